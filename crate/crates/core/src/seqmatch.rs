//! Sequential subset matching: the synthetic set is split into K ordered
//! subsets, subset k is optimized against the k-th trajectory segment with
//! subsets 1..k-1 frozen, and evaluation trains on the subsets in order.

use std::collections::VecDeque;

use rand::Rng;
use rayon::prelude::*;
use seqmatch_tensor::{ParamSet, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{invalid, Error, Result};
use crate::matching::{backbone_step, Anchor, BackboneConfig, MatchMode, MatchState, SyntheticDataset};
use crate::models::{accuracy, init_params, Architecture, InitSpec, TrainConfig, Trainer};
use crate::rng::{derive_seed, rng_for};
use crate::teacher::TrajectoryPool;

/// Subset id of every instance: within each class the `ipc` instances (in
/// their initialized order) are cut into `k` contiguous runs, the first
/// `ipc % k` runs one longer than the rest.
pub fn partition(s: &SyntheticDataset, k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(invalid("K must be at least 1"));
    }
    if k > s.len() {
        return Err(invalid(format!("K = {k} exceeds |S| = {}", s.len())));
    }
    let ipc = s.ipc();
    if k > ipc {
        return Err(invalid(format!(
            "K = {k} exceeds ipc = {ipc}; some subset would miss every class"
        )));
    }
    let (base, extra) = (ipc / k, ipc % k);
    let mut within = Vec::with_capacity(ipc);
    for j in 0..k {
        let size = base + usize::from(j < extra);
        within.extend(std::iter::repeat_n(j, size));
    }
    Ok((0..s.len()).map(|i| within[i % ipc]).collect())
}

/// Per-subset adjustments of the backbone.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsetOverride {
    /// Teacher path: matched steps are drawn from `[lo, min(hi, lo + cap))`.
    #[serde(default)]
    pub max_start: Option<usize>,
    /// Matching iterations per restart for this subset.
    #[serde(default)]
    pub iterations: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeqSchedule {
    pub k: usize,
    /// Trajectory length M.
    pub steps: usize,
    /// Segment length n = round(M / K), halves rounding up.
    pub n: usize,
    /// `[lo, hi]` per subset.
    pub segments: Vec<[usize; 2]>,
    /// Matching iterations per restart (N).
    pub iterations: usize,
    pub overrides: Vec<SubsetOverride>,
}

impl SeqSchedule {
    pub fn iterations_for(&self, stage: usize) -> usize {
        self.overrides
            .get(stage)
            .and_then(|o| o.iterations)
            .unwrap_or(self.iterations)
    }

    /// Steps `[lo, hi_eff)` the teacher path may anchor at in `stage`.
    pub fn start_range(&self, stage: usize) -> (usize, usize) {
        let [lo, hi] = self.segments[stage];
        let hi = match self.overrides.get(stage).and_then(|o| o.max_start) {
            Some(cap) => hi.min(lo + cap.max(1)),
            None => hi,
        };
        (lo, hi)
    }
}

pub fn build_schedule(
    steps: usize,
    k: usize,
    iterations: usize,
    overrides: Vec<SubsetOverride>,
) -> Result<SeqSchedule> {
    if k == 0 {
        return Err(invalid("K must be at least 1"));
    }
    if steps < k {
        return Err(invalid(format!("M = {steps} is smaller than K = {k}")));
    }
    if iterations == 0 {
        return Err(invalid("N must be positive"));
    }
    if !overrides.is_empty() && overrides.len() != k {
        return Err(invalid(format!("{} overrides given for K = {k}", overrides.len())));
    }
    if overrides.iter().any(|o| o.iterations == Some(0)) {
        return Err(invalid("override iterations must be positive"));
    }
    let n = (2 * steps + k) / (2 * k);
    let segments: Vec<[usize; 2]> = (0..k).map(|j| [j * n, ((j + 1) * n).min(steps)]).collect();
    if let Some((j, seg)) = segments.iter().enumerate().find(|(_, s)| s[0] >= s[1]) {
        return Err(invalid(format!(
            "segment {} = [{}, {}] is empty after clamping to M = {steps}",
            j + 1,
            seg[0],
            seg[1]
        )));
    }
    Ok(SeqSchedule {
        k,
        steps,
        n,
        segments,
        iterations,
        overrides,
    })
}

/// The last few stage-final networks, sampled uniformly to start the next
/// stage.
#[derive(Clone, Debug)]
pub struct StageCheckpointPool {
    capacity: usize,
    items: VecDeque<ParamSet>,
}

pub const STAGE_POOL_CAPACITY: usize = 4;

impl StageCheckpointPool {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(invalid("stage pool capacity must be positive"));
        }
        Ok(Self {
            capacity,
            items: VecDeque::with_capacity(capacity),
        })
    }

    pub fn push(&mut self, theta: ParamSet) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(theta);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> impl Iterator<Item = &ParamSet> {
        self.items.iter()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<&ParamSet> {
        if self.items.is_empty() {
            return Err(Error::EmptyPool("stage checkpoint pool"));
        }
        Ok(&self.items[rng.random_range(0..self.items.len())])
    }
}

/// Emitted while distilling.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum Progress {
    Step {
        stage: usize,
        restart: usize,
        iteration: usize,
        matching_loss: f64,
    },
    StageEnd {
        stage: usize,
        pool_size: usize,
    },
}

pub struct DistillInputs<'a> {
    pub arch: &'a Architecture,
    /// Real training data T.
    pub real: &'a LabeledDataset,
    /// Required on the teacher path.
    pub trajectories: Option<&'a TrajectoryPool>,
    pub backbone: &'a BackboneConfig,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct DistillOutcome {
    pub synthetic: SyntheticDataset,
    /// Stage-final checkpoint pool of every stage.
    pub stage_pools: Vec<StageCheckpointPool>,
    /// θ_0 of every restart, per stage.
    pub starts: Vec<Vec<ParamSet>>,
    /// Mean matching loss of each restart, per stage.
    pub restart_losses: Vec<Vec<f64>>,
}

struct StageResult {
    pool: StageCheckpointPool,
    losses: Vec<f64>,
    starts: Vec<ParamSet>,
}

struct StageSpec {
    stage: usize,
    view: Vec<usize>,
    start: (usize, usize),
    iterations: usize,
}

fn run_stage(
    inp: &DistillInputs<'_>,
    s: &mut SyntheticDataset,
    spec: &StageSpec,
    prev: Option<&StageCheckpointPool>,
    progress: &mut dyn FnMut(&Progress, &SyntheticDataset),
) -> Result<StageResult> {
    let cfg = inp.backbone;
    let stage = spec.stage;
    let traj_pool = match cfg.mode {
        MatchMode::TeacherPath => Some(
            inp.trajectories
                .ok_or_else(|| invalid("teacher-path matching needs a trajectory pool"))?,
        ),
        MatchMode::StudentPath => None,
    };
    let mut pool = StageCheckpointPool::new(STAGE_POOL_CAPACITY)?;
    let mut state: Option<MatchState> = None;
    let mut losses = Vec::with_capacity(cfg.restarts);
    let mut starts = Vec::with_capacity(cfg.restarts);
    for r in 0..cfg.restarts {
        let theta0 = match prev {
            None => init_params(
                inp.arch,
                InitSpec {
                    seed: derive_seed(inp.seed, &format!("stage{stage}-theta0"), r as u64),
                },
            )?,
            Some(p) => p
                .sample(&mut rng_for(inp.seed, &format!("stage{stage}-handoff"), r as u64))?
                .clone(),
        };
        starts.push(theta0.clone());
        let state = match state.as_mut() {
            Some(st) => {
                st.reset_theta(theta0);
                st
            }
            None => state.insert(MatchState::new(
                theta0,
                cfg,
                derive_seed(inp.seed, "stage-state", stage as u64),
            )?),
        };
        let mut anchor_rng = rng_for(inp.seed, &format!("stage{stage}-anchor"), r as u64);
        let traj = match traj_pool {
            Some(tp) => {
                let seg = tp.sample_segment(spec.start.0, spec.start.1.max(spec.start.0 + 1), &mut anchor_rng)?;
                Some(tp.get(seg.trajectory))
            }
            None => None,
        };
        let mut total = 0.0;
        for i in 0..spec.iterations {
            let anchor = match traj {
                Some(t) => Anchor::Teacher {
                    traj: t,
                    m: anchor_rng.random_range(spec.start.0..spec.start.1),
                },
                None => Anchor::Student,
            };
            let l = backbone_step(inp.arch, inp.real, cfg, state, s, &spec.view, anchor)?;
            total += l;
            progress(
                &Progress::Step {
                    stage,
                    restart: r,
                    iteration: i,
                    matching_loss: l,
                },
                s,
            );
        }
        losses.push(total / spec.iterations as f64);
        pool.push(state.theta.clone());
    }
    progress(
        &Progress::StageEnd {
            stage,
            pool_size: pool.len(),
        },
        s,
    );
    Ok(StageResult { pool, losses, starts })
}

/// The backbone alone: every instance matched against the whole trajectory
/// `[0, M]`, `n_iterations` matching iterations per restart.
pub fn distill_backbone(
    inp: &DistillInputs<'_>,
    s_init: &SyntheticDataset,
    steps: usize,
    n_iterations: usize,
    progress: &mut dyn FnMut(&Progress, &SyntheticDataset),
) -> Result<DistillOutcome> {
    let mut s = s_init.clone();
    s.set_partition(vec![0; s.len()], 1)?;
    let spec = StageSpec {
        stage: 0,
        view: (0..s.len()).collect(),
        start: (0, steps),
        iterations: n_iterations,
    };
    let out = run_stage(inp, &mut s, &spec, None, progress)?;
    s.freeze(0);
    Ok(DistillOutcome {
        synthetic: s,
        stage_pools: vec![out.pool],
        starts: vec![out.starts],
        restart_losses: vec![out.losses],
    })
}

/// Partitions `s_init` per `schedule` and optimizes the subsets in order.
pub fn seqmatch_distill(
    inp: &DistillInputs<'_>,
    s_init: &SyntheticDataset,
    schedule: &SeqSchedule,
    progress: &mut dyn FnMut(&Progress, &SyntheticDataset),
) -> Result<DistillOutcome> {
    if let Some(tp) = inp.trajectories {
        if inp.backbone.mode == MatchMode::TeacherPath && tp.steps() < schedule.steps {
            return Err(invalid(format!(
                "trajectories have M = {}, schedule needs {}",
                tp.steps(),
                schedule.steps
            )));
        }
    }
    let mut s = s_init.clone();
    s.set_partition(partition(&s, schedule.k)?, schedule.k)?;
    let mut stage_pools: Vec<StageCheckpointPool> = Vec::with_capacity(schedule.k);
    let mut starts = Vec::with_capacity(schedule.k);
    let mut restart_losses = Vec::with_capacity(schedule.k);
    for stage in 0..schedule.k {
        for j in 0..stage {
            s.freeze(j);
        }
        let spec = StageSpec {
            stage,
            view: s.indices_of(&(0..=stage).collect::<Vec<_>>()),
            start: schedule.start_range(stage),
            iterations: schedule.iterations_for(stage),
        };
        let out = run_stage(inp, &mut s, &spec, stage_pools.last(), progress)?;
        restart_losses.push(out.losses);
        starts.push(out.starts);
        stage_pools.push(out.pool);
    }
    s.freeze(schedule.k - 1);
    Ok(DistillOutcome {
        synthetic: s,
        stage_pools,
        starts,
        restart_losses,
    })
}

/// Evaluation training: total budget, SGD settings and number of networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seeds: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.0,
            batch_size: 256,
            iterations: 1000,
            seeds: 5,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds == 0 {
            return Err(invalid("evaluation needs at least one seed"));
        }
        self.train_config(0).validate()
    }

    fn train_config(&self, j: usize) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            momentum: self.momentum,
            batch_size: self.batch_size,
            iterations: self.iterations,
            seed: derive_seed(self.seed, "eval-batch", j as u64),
        }
    }

    /// θ_0 of evaluation network `j`.
    pub fn init(&self, j: usize) -> InitSpec {
        InitSpec {
            seed: derive_seed(self.seed, "eval-init", j as u64),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl EvalReport {
    pub fn from_accuracies(accuracies: Vec<f64>) -> Self {
        let n = accuracies.len() as f64;
        let mean = accuracies.iter().sum::<f64>() / n;
        let var = accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        Self {
            accuracies,
            mean,
            std: var.sqrt(),
        }
    }

    /// Percentages with one decimal, e.g. `74.4 ± 0.5`.
    pub fn display(&self) -> String {
        format!("{:.1} ± {:.1}", 100.0 * self.mean, 100.0 * self.std)
    }
}

/// Splits `total` iterations proportionally to `sizes`, earlier stages
/// taking any remainder.
pub fn split_budget(total: usize, sizes: &[usize]) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    let mut out: Vec<usize> = sizes.iter().map(|&s| total * s / n).collect();
    let mut rest = total - out.iter().sum::<usize>();
    for v in out.iter_mut() {
        if rest == 0 {
            break;
        }
        *v += 1;
        rest -= 1;
    }
    out
}

/// A training stage: instances and labels.
pub type Stage = (Tensor, Vec<usize>);

/// Trains one network from θ_0 through `stages` in order and returns it.
pub fn train_staged(
    arch: &Architecture,
    stages: &[Stage],
    theta0: ParamSet,
    cfg: &TrainConfig,
    total: usize,
) -> Result<ParamSet> {
    let sizes: Vec<usize> = stages.iter().map(|(_, y)| y.len()).collect();
    let budget = split_budget(total, &sizes);
    let mut params = theta0;
    let mut trainer = Trainer::new(cfg)?;
    for ((x, y), iters) in stages.iter().zip(budget) {
        trainer.run(arch, &mut params, x, y, iters)?;
    }
    Ok(params)
}

/// Test accuracy of `eval.seeds` networks trained through `stages`.
pub fn eval_stages(
    arch: &Architecture,
    stages: &[Stage],
    eval: &EvalConfig,
    test: &LabeledDataset,
) -> Result<EvalReport> {
    eval.validate()?;
    if stages.is_empty() || stages.iter().any(|(_, y)| y.is_empty()) {
        return Err(invalid("evaluation stages must be nonempty"));
    }
    let accuracies = (0..eval.seeds)
        .into_par_iter()
        .map(|j| {
            let theta0 = init_params(arch, eval.init(j))?;
            let params = train_staged(arch, stages, theta0, &eval.train_config(j), eval.iterations)?;
            accuracy(arch, &params, test.instances(), test.labels())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_accuracies(accuracies))
}

/// The subsets of `s`, in order, as training stages.
pub fn stages_of(s: &SyntheticDataset) -> Result<Vec<Stage>> {
    (0..s.num_subsets()).map(|k| s.rows(&s.subset_indices(k))).collect()
}

/// Trains on S_1, ..., S_K in order; the budget is split proportionally to
/// subset sizes.
pub fn eval_staged(
    s: &SyntheticDataset,
    arch: &Architecture,
    eval: &EvalConfig,
    test: &LabeledDataset,
) -> Result<EvalReport> {
    eval_stages(arch, &stages_of(s)?, eval, test)
}
