//! Teacher trajectories: checkpoint sequences of a network trained on the
//! real data, their matching-target gradients and a sampling pool.

use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use seqmatch_tensor::{ParamSet, Tensor, TensorError};
use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, LabeledDataset};
use crate::error::{invalid, Error, Result};
use crate::models::{accuracy, batch_gradient, init_params, mean_loss, Architecture, InitSpec, TrainConfig, Trainer};
use crate::rng::rng_for;
use crate::store::{self, PayloadKind, Store};

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherTrajectory {
    pub arch: Architecture,
    /// Training configuration; `train.seed` also seeds θ_0.
    pub train: TrainConfig,
    /// SGD iterations between consecutive checkpoints.
    pub stride: usize,
    /// θ_0 ..= θ_M.
    pub checkpoints: Vec<ParamSet>,
    /// Mean full-train loss at every checkpoint.
    pub train_loss: Vec<f64>,
    /// Test accuracy at every checkpoint.
    pub test_accuracy: Vec<f64>,
}

impl TeacherTrajectory {
    /// Number of recorded steps M (checkpoints minus one).
    pub fn steps(&self) -> usize {
        self.checkpoints.len() - 1
    }

    pub fn checkpoint(&self, m: usize) -> Result<&ParamSet> {
        self.checkpoints
            .get(m)
            .ok_or_else(|| invalid(format!("checkpoint {m} out of range 0..={}", self.steps())))
    }

    /// Retrains from θ_0 with the stored configuration and returns θ_M.
    pub fn replay(&self, train: &LabeledDataset) -> Result<ParamSet> {
        let mut params = self.checkpoints[0].clone();
        let mut trainer = Trainer::new(&self.train)?;
        trainer.run(
            &self.arch,
            &mut params,
            train.instances(),
            train.labels(),
            self.steps() * self.stride,
        )?;
        Ok(params)
    }
}

/// Trains a teacher from a fresh θ_0 and records `steps + 1` checkpoints,
/// `stride` iterations apart.
pub fn train_teacher(
    split: &DatasetSplit,
    arch: &Architecture,
    cfg: &TrainConfig,
    steps: usize,
    stride: usize,
) -> Result<TeacherTrajectory> {
    if steps == 0 || stride == 0 {
        return Err(invalid("teacher needs at least one step and a positive stride"));
    }
    if steps * stride > cfg.iterations {
        return Err(invalid(format!(
            "{steps} steps of stride {stride} exceed the budget of {} iterations",
            cfg.iterations
        )));
    }
    let (x, y) = (split.train.instances(), split.train.labels());
    let mut params = init_params(arch, InitSpec { seed: cfg.seed })?;
    let mut trainer = Trainer::new(cfg)?;
    let mut checkpoints = Vec::with_capacity(steps + 1);
    let mut train_loss = Vec::with_capacity(steps + 1);
    let mut test_accuracy = Vec::with_capacity(steps + 1);
    for m in 0..=steps {
        if m > 0 {
            trainer.run(arch, &mut params, x, y, stride)?;
        }
        let it = trainer.iteration();
        let diverged = |e: Error| match e {
            Error::Tensor(source @ TensorError::NonFinite(_)) => Error::Divergence { iteration: it, source },
            other => other,
        };
        train_loss.push(mean_loss(arch, &params, x, y).map_err(diverged)?);
        test_accuracy.push(accuracy(arch, &params, split.test.instances(), split.test.labels()).map_err(diverged)?);
        checkpoints.push(params.clone());
    }
    Ok(TeacherTrajectory {
        arch: arch.clone(),
        train: cfg.clone(),
        stride,
        checkpoints,
        train_loss,
        test_accuracy,
    })
}

/// Which real instances a target gradient is computed on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BatchSpec {
    Full,
    /// `size` instances per class, drawn without replacement.
    PerClass { size: usize },
    /// `size` instances drawn uniformly without replacement.
    Uniform { size: usize },
}

impl BatchSpec {
    /// Instance indices for draw number `draw` under `seed`.
    pub fn indices(&self, data: &LabeledDataset, seed: u64, draw: u64) -> Vec<usize> {
        let n = data.len();
        match *self {
            BatchSpec::Full => (0..n).collect(),
            BatchSpec::Uniform { size } if size >= n => (0..n).collect(),
            BatchSpec::Uniform { size } => {
                let mut rng = rng_for(seed, "target-batch", draw);
                let mut idx = sample(&mut rng, n, size).into_vec();
                idx.sort_unstable();
                idx
            }
            BatchSpec::PerClass { size } => {
                let mut rng = rng_for(seed, "target-batch", draw);
                let mut out = Vec::new();
                for c in 0..data.classes() {
                    let members = data.class_indices(c);
                    if size >= members.len() {
                        out.extend(members);
                    } else {
                        out.extend(sample(&mut rng, members.len(), size).into_iter().map(|i| members[i]));
                    }
                }
                out.sort_unstable();
                out
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            BatchSpec::PerClass { size: 0 } | BatchSpec::Uniform { size: 0 } => {
                Err(invalid("target batch size must be positive"))
            }
            _ => Ok(()),
        }
    }
}

/// Mean-loss gradient on the selected real instances at `params`.
pub fn gradient_on(
    arch: &Architecture,
    params: &ParamSet,
    data: &LabeledDataset,
    indices: &[usize],
) -> Result<ParamSet> {
    if indices.len() == data.len() {
        return batch_gradient(arch, params, data.instances(), data.labels());
    }
    let x = data.instances().select_rows(indices)?;
    let y: Vec<usize> = indices.iter().map(|&i| data.labels()[i]).collect();
    batch_gradient(arch, params, &x, &y)
}

/// Matching target g_m: the real-data gradient at checkpoint θ_m, `m < M`.
pub fn teacher_gradient(
    traj: &TeacherTrajectory,
    m: usize,
    data: &LabeledDataset,
    batch: BatchSpec,
    seed: u64,
    draw: u64,
) -> Result<ParamSet> {
    if m >= traj.steps() {
        return Err(invalid(format!("step {m} out of range 0..{}", traj.steps())));
    }
    gradient_on(&traj.arch, &traj.checkpoints[m], data, &batch.indices(data, seed, draw))
}

#[derive(Clone, Debug)]
pub struct TrajectoryPool {
    trajectories: Vec<TeacherTrajectory>,
}

/// A borrowed run of checkpoints θ_lo ..= θ_hi of one trajectory.
#[derive(Clone, Copy, Debug)]
pub struct Segment<'a> {
    pub trajectory: usize,
    pub lo: usize,
    pub checkpoints: &'a [ParamSet],
}

impl Segment<'_> {
    pub fn hi(&self) -> usize {
        self.lo + self.checkpoints.len() - 1
    }

    /// θ_m for `lo <= m <= hi`.
    pub fn at(&self, m: usize) -> Result<&ParamSet> {
        m.checked_sub(self.lo)
            .and_then(|i| self.checkpoints.get(i))
            .ok_or_else(|| invalid(format!("step {m} outside segment [{}, {}]", self.lo, self.hi())))
    }
}

impl TrajectoryPool {
    pub fn new(trajectories: Vec<TeacherTrajectory>) -> Result<Self> {
        let first = trajectories.first().ok_or(Error::EmptyPool("trajectory pool"))?;
        if trajectories
            .iter()
            .any(|t| t.arch != first.arch || t.steps() != first.steps())
        {
            return Err(invalid("pool trajectories must share architecture and step count"));
        }
        Ok(Self { trajectories })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn trajectories(&self) -> &[TeacherTrajectory] {
        &self.trajectories
    }

    pub fn get(&self, i: usize) -> &TeacherTrajectory {
        &self.trajectories[i]
    }

    pub fn arch(&self) -> &Architecture {
        &self.trajectories[0].arch
    }

    pub fn steps(&self) -> usize {
        self.trajectories[0].steps()
    }

    /// A uniformly chosen trajectory's checkpoints `lo ..= hi`.
    pub fn sample_segment<R: Rng + ?Sized>(&self, lo: usize, hi: usize, rng: &mut R) -> Result<Segment<'_>> {
        if lo >= hi || hi > self.steps() {
            return Err(invalid(format!(
                "segment [{lo}, {hi}] invalid for M = {}",
                self.steps()
            )));
        }
        let trajectory = rng.random_range(0..self.trajectories.len());
        Ok(Segment {
            trajectory,
            lo,
            checkpoints: &self.trajectories[trajectory].checkpoints[lo..=hi],
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryManifest {
    pub kind: String,
    pub arch: Architecture,
    pub train: TrainConfig,
    pub seed: u64,
    pub stride: usize,
    pub steps: usize,
    pub layers: Vec<String>,
    pub train_loss: Vec<f64>,
    pub test_accuracy: Vec<f64>,
    /// How the store's tensors are laid out.
    pub layout: String,
}

const TRAJECTORY_LAYOUT: &str =
    "checkpoint-major: for m in 0..=steps, every layer tensor of theta_m in `layers` order; \
     then train_loss [steps+1] and test_accuracy [steps+1]";

/// Writes `<path>` (SQDS trajectory) and its JSON manifest.
pub fn save_trajectory(path: &Path, traj: &TeacherTrajectory) -> Result<()> {
    let mut tensors: Vec<Tensor> = traj
        .checkpoints
        .iter()
        .flat_map(|p| p.tensors().cloned())
        .collect();
    tensors.push(Tensor::vector(traj.train_loss.clone())?);
    tensors.push(Tensor::vector(traj.test_accuracy.clone())?);
    store::save_store(path, &Store::new(PayloadKind::Trajectory, tensors))?;
    let manifest = TrajectoryManifest {
        kind: "trajectory".into(),
        arch: traj.arch.clone(),
        train: traj.train.clone(),
        seed: traj.train.seed,
        stride: traj.stride,
        steps: traj.steps(),
        layers: traj.checkpoints[0].names().map(String::from).collect(),
        train_loss: traj.train_loss.clone(),
        test_accuracy: traj.test_accuracy.clone(),
        layout: TRAJECTORY_LAYOUT.into(),
    };
    store::write_json(&store::manifest_path(path), &manifest)
}

pub fn load_trajectory(path: &Path) -> Result<TeacherTrajectory> {
    let manifest: TrajectoryManifest = store::read_json(&store::manifest_path(path))?;
    let st = store::load_store_of(path, PayloadKind::Trajectory)?;
    let per = manifest.layers.len();
    let expected = per * (manifest.steps + 1) + 2;
    if st.tensors.len() != expected {
        return Err(Error::Format(format!(
            "trajectory store holds {} tensors, manifest implies {expected}",
            st.tensors.len()
        )));
    }
    let mut tensors = st.tensors.into_iter();
    let mut checkpoints = Vec::with_capacity(manifest.steps + 1);
    for _ in 0..=manifest.steps {
        let layers = manifest
            .layers
            .iter()
            .cloned()
            .zip(tensors.by_ref().take(per))
            .collect();
        checkpoints.push(ParamSet::new(layers));
    }
    let train_loss = tensors.next().unwrap().into_data();
    let test_accuracy = tensors.next().unwrap().into_data();
    let traj = TeacherTrajectory {
        arch: manifest.arch,
        train: manifest.train,
        stride: manifest.stride,
        checkpoints,
        train_loss,
        test_accuracy,
    };
    let specs = traj.arch.layer_specs();
    if traj.checkpoints[0].shapes() != specs.iter().map(|s| s.shape.clone()).collect::<Vec<_>>() {
        return Err(Error::Format("trajectory shapes do not match its architecture".into()));
    }
    Ok(traj)
}
