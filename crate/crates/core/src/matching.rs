//! Gradient matching: the column-wise cosine distance, the matching loss and
//! its gradient with respect to the synthetic instances, and the synthetic
//! dataset the backbone optimizes.

use std::path::Path;

use rand::seq::index::sample;
use seqmatch_tensor::{grad, no_grad, ParamSet, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{invalid, Error, Result};
use crate::models::{loss, Architecture, TrainConfig, Trainer};
use crate::rng::{derive_seed, rng_for};
use crate::store::{self, PayloadKind, Store};
use crate::teacher::{gradient_on, BatchSpec, TeacherTrajectory};

/// Added to norm products below this value so dead (all-zero) columns stay
/// finite. Larger products are left untouched, keeping `D(X, X) = 0`.
pub const NORM_GUARD: f64 = 1e-12;

fn column_norms(x: &Var) -> Result<Var> {
    // MIN_POSITIVE keeps the derivative of sqrt finite at an all-zero
    // column without changing any representable nonzero norm
    Ok(x.square()?.sum_rows()?.add_scalar(f64::MIN_POSITIVE)?.sqrt()?)
}

/// `D(X, Y) = sum_i (1 - <X_i, Y_i> / (|X_i| |Y_i|))` over the columns of two
/// `[rows, cols]` matrices, with [`NORM_GUARD`] protecting tiny products.
pub fn cosine_distance(x: &Var, y: &Var) -> Result<Var> {
    if x.shape() != y.shape() || x.shape().len() != 2 {
        return Err(Error::Tensor(seqmatch_tensor::TensorError::ShapeMismatch {
            op: "cosine_distance",
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        }));
    }
    let cols = x.shape()[1] as f64;
    let dots = x.mul(y)?.sum_rows()?;
    let prod = column_norms(x)?.mul(&column_norms(y)?)?;
    let guard = prod.value().map(|p| if p < NORM_GUARD { NORM_GUARD } else { 0.0 });
    let denom = prod.add(&Var::constant(guard))?;
    Ok(dots.div(&denom)?.sum()?.neg()?.add_scalar(cols)?)
}

/// [`cosine_distance`] on plain tensors.
pub fn cosine_distance_value(x: &Tensor, y: &Tensor) -> Result<f64> {
    no_grad(|| cosine_distance(&Var::constant(x.clone()), &Var::constant(y.clone()))?.item().map_err(Error::from))
}

/// A layer gradient as a matrix whose columns are output units: weights are
/// already `[fan_in, out]`, a bias `[out]` becomes one column `[out, 1]`.
pub fn layer_matrix(g: &Var) -> Result<Var> {
    match g.shape() {
        [_, _] => Ok(g.clone()),
        [n] => Ok(g.reshape(&[*n, 1])?),
        other => {
            let rows = other[0];
            let rest: usize = other[1..].iter().product();
            Ok(g.reshape(&[rows, rest])?)
        }
    }
}

/// Summed-loss gradient of `(x, labels)` at `params`, recorded so it can be
/// differentiated again. Summing (rather than averaging) makes every
/// instance contribute its own gradient with weight one.
pub fn recorded_gradient(arch: &Architecture, params: &[Var], x: &Var, labels: &[usize]) -> Result<Vec<Var>> {
    let l = loss(arch, params, x, labels, false)?;
    Ok(grad(&l, params, true)?)
}

/// `sum_layers D(grad_theta L_S, g_target)` at `params`, differentiable in `x`.
pub fn matching_loss(
    arch: &Architecture,
    params: &ParamSet,
    x: &Var,
    labels: &[usize],
    target: &ParamSet,
) -> Result<Var> {
    let leaves = params.to_leaves();
    matching_loss_at(arch, &leaves, x, labels, target)
}

fn matching_loss_at(
    arch: &Architecture,
    leaves: &[Var],
    x: &Var,
    labels: &[usize],
    target: &ParamSet,
) -> Result<Var> {
    if target.len() != leaves.len() {
        return Err(invalid("target gradient does not match the architecture"));
    }
    let g = recorded_gradient(arch, leaves, x, labels)?;
    let mut total: Option<Var> = None;
    for (gs, gt) in g.iter().zip(target.tensors()) {
        let d = cosine_distance(&layer_matrix(gs)?, &layer_matrix(&Var::constant(gt.clone()))?)?;
        total = Some(match total {
            Some(t) => t.add(&d)?,
            None => d,
        });
    }
    total.ok_or_else(|| invalid("architecture has no parameters"))
}

/// One matched group: synthetic rows, their labels and the target gradient.
#[derive(Clone, Debug)]
pub struct MatchGroup {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub target: ParamSet,
}

/// Total matching loss over `groups` and its gradient with respect to each
/// group's instances.
pub fn matching_loss_and_grad(
    arch: &Architecture,
    params: &ParamSet,
    groups: &[MatchGroup],
) -> Result<(f64, Vec<Tensor>)> {
    let leaves = params.to_leaves();
    let xs: Vec<Var> = groups.iter().map(|g| Var::leaf(g.x.clone())).collect();
    let mut total: Option<Var> = None;
    for (g, x) in groups.iter().zip(&xs) {
        let l = matching_loss_at(arch, &leaves, x, &g.labels, &g.target)?;
        total = Some(match total {
            Some(t) => t.add(&l)?,
            None => l,
        });
    }
    let total = total.ok_or_else(|| invalid("no groups to match"))?;
    let value = total.item()?;
    let grads = grad(&total, &xs, false)?;
    Ok((value, grads.into_iter().map(|v| v.value().clone()).collect()))
}

/// Gradient of the matching loss with respect to the rows of `x`; rows with
/// `frozen[i]` set receive exact zeros.
pub fn synthetic_grad(
    arch: &Architecture,
    params: &ParamSet,
    x: &Tensor,
    labels: &[usize],
    target: &ParamSet,
    frozen: &[bool],
) -> Result<Tensor> {
    let (n, d) = x.dims2()?;
    if frozen.len() != n {
        return Err(invalid("frozen mask length differs from instance count"));
    }
    if frozen.iter().all(|&f| f) {
        return Ok(Tensor::zeros(&[n, d])?);
    }
    let group = MatchGroup {
        x: x.clone(),
        labels: labels.to_vec(),
        target: target.clone(),
    };
    let (_, mut g) = matching_loss_and_grad(arch, params, std::slice::from_ref(&group))?;
    let mut g = g.remove(0);
    zero_rows(&mut g, frozen, d);
    Ok(g)
}

fn zero_rows(g: &mut Tensor, frozen: &[bool], d: usize) {
    for (row, &f) in g.data_mut().chunks_mut(d).zip(frozen) {
        if f {
            row.fill(0.0);
        }
    }
}

/// Learnable instances with fixed class-balanced labels, stored class-major
/// (all of class 0, then class 1, ...), and a partition into K ordered
/// subsets.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    instances: Tensor,
    labels: Vec<usize>,
    classes: usize,
    ipc: usize,
    instance_shape: Vec<usize>,
    subset: Vec<usize>,
    k: usize,
    frozen: Vec<bool>,
    provenance: Vec<usize>,
}

impl SyntheticDataset {
    /// `ipc` distinct real instances per class, drawn without replacement;
    /// one subset.
    pub fn init_from_real(real: &LabeledDataset, ipc: usize, seed: u64) -> Result<Self> {
        if ipc == 0 {
            return Err(invalid("ipc must be positive"));
        }
        let mut provenance = Vec::with_capacity(ipc * real.classes());
        for c in 0..real.classes() {
            let members = real.class_indices(c);
            if members.len() < ipc {
                return Err(invalid(format!(
                    "class {c} has {} real instances, fewer than ipc = {ipc}",
                    members.len()
                )));
            }
            let mut rng = rng_for(seed, "synthetic-init", c as u64);
            let mut picks = sample(&mut rng, members.len(), ipc).into_vec();
            picks.sort_unstable();
            provenance.extend(picks.into_iter().map(|i| members[i]));
        }
        let instances = real.instances().select_rows(&provenance)?;
        let labels = provenance.iter().map(|&i| real.labels()[i]).collect();
        Self::new(instances, labels, real.classes(), real.instance_shape().to_vec(), provenance)
    }

    /// Class-major instances with `ipc` rows per class.
    pub fn new(
        instances: Tensor,
        labels: Vec<usize>,
        classes: usize,
        instance_shape: Vec<usize>,
        provenance: Vec<usize>,
    ) -> Result<Self> {
        let (n, d) = instances.dims2()?;
        if classes == 0 || n == 0 || n % classes != 0 || labels.len() != n {
            return Err(invalid("synthetic set needs the same count of every class"));
        }
        let ipc = n / classes;
        if labels.iter().enumerate().any(|(i, &y)| y != i / ipc) {
            return Err(invalid("synthetic labels must be class-major and balanced"));
        }
        if instance_shape.iter().product::<usize>() != d {
            return Err(invalid("instance shape does not match instance width"));
        }
        if provenance.len() != n {
            return Err(invalid("provenance length differs from instance count"));
        }
        Ok(Self {
            instances,
            labels,
            classes,
            ipc,
            instance_shape,
            subset: vec![0; n],
            k: 1,
            frozen: vec![false],
            provenance,
        })
    }

    pub fn instances(&self) -> &Tensor {
        &self.instances
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn ipc(&self) -> usize {
        self.ipc
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.instances.shape()[1]
    }

    pub fn instance_shape(&self) -> &[usize] {
        &self.instance_shape
    }

    /// Real-data indices the instances were initialized from.
    pub fn provenance(&self) -> &[usize] {
        &self.provenance
    }

    pub fn num_subsets(&self) -> usize {
        self.k
    }

    /// Subset id (0-based) of every instance.
    pub fn subset_ids(&self) -> &[usize] {
        &self.subset
    }

    /// Installs a partition map; every subset must be nonempty. Clears all
    /// frozen flags.
    pub fn set_partition(&mut self, subset: Vec<usize>, k: usize) -> Result<()> {
        if subset.len() != self.len() {
            return Err(invalid("partition map length differs from instance count"));
        }
        if k == 0 || subset.iter().any(|&s| s >= k) {
            return Err(invalid(format!("partition ids must lie in 0..{k}")));
        }
        for j in 0..k {
            if !subset.contains(&j) {
                return Err(invalid(format!("subset {j} is empty")));
            }
        }
        self.subset = subset;
        self.k = k;
        self.frozen = vec![false; k];
        Ok(())
    }

    pub fn freeze(&mut self, subset: usize) {
        self.frozen[subset] = true;
    }

    pub fn is_frozen(&self, subset: usize) -> bool {
        self.frozen[subset]
    }

    /// Per-instance frozen mask.
    pub fn frozen_mask(&self) -> Vec<bool> {
        self.subset.iter().map(|&s| self.frozen[s]).collect()
    }

    /// Indices of instances whose subset id is in `subsets`.
    pub fn indices_of(&self, subsets: &[usize]) -> Vec<usize> {
        (0..self.len()).filter(|&i| subsets.contains(&self.subset[i])).collect()
    }

    pub fn subset_indices(&self, k: usize) -> Vec<usize> {
        self.indices_of(&[k])
    }

    /// `(instances, labels)` of the listed rows.
    pub fn rows(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        Ok((
            self.instances.select_rows(indices)?,
            indices.iter().map(|&i| self.labels[i]).collect(),
        ))
    }

    /// Bytes of the instances of `subset`, for invariance checks.
    pub fn subset_bytes(&self, subset: usize) -> Vec<u8> {
        let d = self.dim();
        self.subset_indices(subset)
            .into_iter()
            .flat_map(|i| self.instances.data()[i * d..(i + 1) * d].iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }

    /// `instances[i] -= step[i]` for every unfrozen row.
    pub fn apply_step(&mut self, step: &Tensor) -> Result<()> {
        if step.shape() != self.instances.shape() {
            return Err(invalid("update shape differs from synthetic instances"));
        }
        let d = self.dim();
        let mask = self.frozen_mask();
        for ((row, s), frozen) in self
            .instances
            .data_mut()
            .chunks_mut(d)
            .zip(step.data().chunks(d))
            .zip(mask)
        {
            if !frozen {
                for (v, u) in row.iter_mut().zip(s) {
                    *v -= u;
                }
            }
        }
        if !self.instances.is_finite() {
            return Err(Error::Tensor(seqmatch_tensor::TensorError::NonFinite("synthetic update")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatchMode {
    /// θ is a stored teacher checkpoint θ_m; the target is the real-data
    /// gradient there.
    TeacherPath,
    /// θ is trained on the synthetic view between matching steps; the
    /// target is a fresh real-data gradient at the current θ.
    StudentPath,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatchGranularity {
    /// One distance between the gradients of the whole view and the target.
    Global,
    /// One distance per class (synthetic rows of class c against a real
    /// batch of class c), summed.
    PerClass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub mode: MatchMode,
    pub granularity: MatchGranularity,
    /// Synthetic-instance learning rate.
    pub pixel_lr: f64,
    pub pixel_momentum: f64,
    /// Matching iterations per restart (N).
    pub iterations: usize,
    /// Restarts per stage (R).
    pub restarts: usize,
    /// Real batch used for every target gradient.
    pub target_batch: BatchSpec,
    /// Student-path θ training on the synthetic view.
    pub student_lr: f64,
    pub student_batch: usize,
    /// SGD steps on the synthetic view before each matching step.
    pub student_steps: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            mode: MatchMode::StudentPath,
            granularity: MatchGranularity::PerClass,
            pixel_lr: 0.1,
            pixel_momentum: 0.5,
            iterations: 10,
            restarts: 20,
            target_batch: BatchSpec::PerClass { size: 64 },
            student_lr: 0.05,
            student_batch: 256,
            student_steps: 5,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.pixel_lr >= 0.0) || !self.pixel_lr.is_finite() {
            return Err(invalid("pixel_lr must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.pixel_momentum) {
            return Err(invalid("pixel_momentum must be in [0, 1)"));
        }
        if self.iterations == 0 || self.restarts == 0 {
            return Err(invalid("iterations and restarts must be positive"));
        }
        if !(self.student_lr > 0.0) || self.student_batch == 0 {
            return Err(invalid("student_lr and student_batch must be positive"));
        }
        self.target_batch.validate()
    }

    pub fn student_train(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.student_lr,
            momentum: 0.0,
            batch_size: self.student_batch,
            iterations: self.student_steps,
            seed,
        }
    }
}

/// Per-run state of the backbone: the current network, pixel momentum and
/// counters.
#[derive(Clone, Debug)]
pub struct MatchState {
    pub theta: ParamSet,
    pub mode: MatchMode,
    velocity: Option<Tensor>,
    student: Trainer,
    seed: u64,
    /// Matching steps taken.
    pub iteration: u64,
}

impl MatchState {
    pub fn new(theta0: ParamSet, cfg: &BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            theta: theta0,
            mode: cfg.mode,
            velocity: None,
            student: Trainer::new(&cfg.student_train(derive_seed(seed, "student", 0)))?,
            seed,
            iteration: 0,
        })
    }

    /// Restarts from a new network, keeping pixel momentum and counters.
    pub fn reset_theta(&mut self, theta0: ParamSet) {
        self.theta = theta0;
    }
}

/// Where θ comes from for one backbone step.
#[derive(Clone, Copy, Debug)]
pub enum Anchor<'a> {
    Teacher { traj: &'a TeacherTrajectory, m: usize },
    Student,
}

/// Target gradient(s) at θ for the rows `view`, grouped per the config.
fn build_groups(
    arch: &Architecture,
    real: &LabeledDataset,
    cfg: &BackboneConfig,
    theta: &ParamSet,
    s: &SyntheticDataset,
    view: &[usize],
    seed: u64,
    draw: u64,
) -> Result<Vec<(Vec<usize>, MatchGroup)>> {
    let idx = cfg.target_batch.indices(real, seed, draw);
    match cfg.granularity {
        MatchGranularity::Global => {
            let (x, labels) = s.rows(view)?;
            let target = gradient_on(arch, theta, real, &idx)?;
            Ok(vec![(view.to_vec(), MatchGroup { x, labels, target })])
        }
        MatchGranularity::PerClass => {
            let mut groups = Vec::new();
            for c in 0..s.classes() {
                let rows: Vec<usize> = view.iter().copied().filter(|&i| s.labels()[i] == c).collect();
                if rows.is_empty() {
                    continue;
                }
                let real_rows: Vec<usize> = idx.iter().copied().filter(|&i| real.labels()[i] == c).collect();
                if real_rows.is_empty() {
                    return Err(invalid(format!("target batch has no instance of class {c}")));
                }
                let (x, labels) = s.rows(&rows)?;
                let target = gradient_on(arch, theta, real, &real_rows)?;
                groups.push((rows, MatchGroup { x, labels, target }));
            }
            Ok(groups)
        }
    }
}

/// Matching loss of the rows `view` at `theta` with targets drawn as in a
/// backbone step (draw index `draw`).
pub fn view_matching_loss(
    arch: &Architecture,
    real: &LabeledDataset,
    cfg: &BackboneConfig,
    theta: &ParamSet,
    s: &SyntheticDataset,
    view: &[usize],
    seed: u64,
    draw: u64,
) -> Result<f64> {
    let groups = build_groups(arch, real, cfg, theta, s, view, seed, draw)?;
    let leaves = theta.to_leaves();
    groups.iter().try_fold(0.0, |acc, (_, g)| {
        Ok(acc + matching_loss_at(arch, &leaves, &Var::constant(g.x.clone()), &g.labels, &g.target)?.item()?)
    })
}

/// One update of the synthetic instances. Returns the matching loss before
/// the update.
///
/// Student path: θ first takes `student_steps` SGD steps on the view, then
/// the target is the real gradient at the new θ. Teacher path: θ is the
/// checkpoint θ_m of `traj`.
pub fn backbone_step(
    arch: &Architecture,
    real: &LabeledDataset,
    cfg: &BackboneConfig,
    state: &mut MatchState,
    s: &mut SyntheticDataset,
    view: &[usize],
    anchor: Anchor<'_>,
) -> Result<f64> {
    match anchor {
        Anchor::Teacher { traj, m } => {
            if state.mode != MatchMode::TeacherPath {
                return Err(invalid("teacher anchor in a student-path run"));
            }
            if m >= traj.steps() {
                return Err(invalid(format!("step {m} out of range 0..{}", traj.steps())));
            }
            state.theta = traj.checkpoints[m].clone();
        }
        Anchor::Student => {
            if state.mode != MatchMode::StudentPath {
                return Err(invalid("student anchor in a teacher-path run"));
            }
            let (x, y) = s.rows(view)?;
            state.student.run(arch, &mut state.theta, &x, &y, cfg.student_steps)?;
        }
    }
    let groups = build_groups(arch, real, cfg, &state.theta, s, view, state.seed, state.iteration)?;
    let plain: Vec<MatchGroup> = groups.iter().map(|(_, g)| g.clone()).collect();
    let (value, grads) = matching_loss_and_grad(arch, &state.theta, &plain)?;

    let d = s.dim();
    let mut full = Tensor::zeros(s.instances().shape())?;
    for ((rows, _), g) in groups.iter().zip(&grads) {
        for (j, &i) in rows.iter().enumerate() {
            full.data_mut()[i * d..(i + 1) * d].copy_from_slice(&g.data()[j * d..(j + 1) * d]);
        }
    }
    zero_rows(&mut full, &s.frozen_mask(), d);
    let v = match state.velocity.take() {
        Some(mut v) if cfg.pixel_momentum > 0.0 => {
            v = v.map(|a| a * cfg.pixel_momentum);
            v.axpy(1.0, &full)?;
            v
        }
        _ => full,
    };
    if cfg.pixel_lr > 0.0 {
        s.apply_step(&v.map(|a| a * cfg.pixel_lr))?;
    }
    state.velocity = Some(v);
    state.iteration += 1;
    Ok(value)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticManifest {
    pub kind: String,
    pub ipc: usize,
    pub classes: usize,
    pub k: usize,
    pub instance_shape: Vec<usize>,
    /// Trajectory segment `[lo, hi]` matched by each subset.
    pub segments: Vec<[usize; 2]>,
    /// Real training indices each instance was initialized from.
    pub provenance: Vec<usize>,
    pub layout: String,
    #[serde(default)]
    pub extra: serde_json::Value,
}

const SYNTHETIC_LAYOUT: &str =
    "instances [n, d] (class-major), labels [n] as f64, subset ids [n] as f64 (0-based)";

/// Writes the synthetic set (SQDS kind synthetic) and its manifest.
pub fn save_synthetic(
    path: &Path,
    s: &SyntheticDataset,
    segments: &[[usize; 2]],
    extra: serde_json::Value,
) -> Result<()> {
    if s.num_subsets() == 0 || s.is_empty() {
        return Err(invalid("refusing to save a synthetic set without subsets"));
    }
    let n = s.len();
    let tensors = vec![
        s.instances().clone(),
        Tensor::new(vec![n], s.labels().iter().map(|&y| y as f64).collect())?,
        Tensor::new(vec![n], s.subset_ids().iter().map(|&k| k as f64).collect())?,
    ];
    store::save_store(path, &Store::new(PayloadKind::Synthetic, tensors))?;
    let manifest = SyntheticManifest {
        kind: "synthetic".into(),
        ipc: s.ipc(),
        classes: s.classes(),
        k: s.num_subsets(),
        instance_shape: s.instance_shape().to_vec(),
        segments: segments.to_vec(),
        provenance: s.provenance().to_vec(),
        layout: SYNTHETIC_LAYOUT.into(),
        extra,
    };
    store::write_json(&store::manifest_path(path), &manifest)
}

pub fn load_synthetic(path: &Path) -> Result<(SyntheticDataset, SyntheticManifest)> {
    let manifest: SyntheticManifest = store::read_json(&store::manifest_path(path))?;
    let st = store::load_store_of(path, PayloadKind::Synthetic)?;
    let [x, labels, subsets]: [Tensor; 3] = st
        .tensors
        .try_into()
        .map_err(|_| Error::Format("synthetic store must hold 3 tensors".into()))?;
    let as_index = |t: Tensor| -> Result<Vec<usize>> {
        t.into_data()
            .into_iter()
            .map(|v| {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::Format(format!("non-integer index {v} in synthetic store")))
                }
            })
            .collect()
    };
    let mut s = SyntheticDataset::new(
        x,
        as_index(labels)?,
        manifest.classes,
        manifest.instance_shape.clone(),
        manifest.provenance.clone(),
    )?;
    s.set_partition(as_index(subsets)?, manifest.k)?;
    Ok((s, manifest))
}
