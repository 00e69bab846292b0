//! The pipeline commands and their artifacts.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rayon::prelude::*;
use seqmatch_core::data::{self, BlobSpec, DatasetSplit, LabeledDataset};
use seqmatch_core::diagnostics::{self, CouplingReport, LossTrajectoryMatrix};
use seqmatch_core::matching::{load_synthetic, save_synthetic, MatchMode, SyntheticDataset};
use seqmatch_core::models::{Architecture, InitSpec, TrainConfig};
use seqmatch_core::seqmatch::{self, DistillInputs, EvalReport, Progress, Stage};
use seqmatch_core::store::{manifest_path, read_json, write_json};
use seqmatch_core::teacher::{self, TrajectoryPool};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{DatasetKind, Method, RunConfig};

/// A store a command depends on does not exist.
#[derive(Debug, Clone)]
pub struct MissingInput(pub PathBuf);

impl fmt::Display for MissingInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "missing input store {}", self.0.display())
    }
}

impl std::error::Error for MissingInput {}

pub const DATA_STORE: &str = "data.sqds";
pub const MANIFEST: &str = "manifest.json";

pub fn teacher_store(i: usize) -> String {
    format!("teacher-{i}.sqds")
}

pub fn synthetic_store(method: Method) -> String {
    format!("synthetic-{}.sqds", method.name())
}

/// Writes one JSON object per line to stderr.
pub fn emit(event: &Value) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{event}");
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(MissingInput(path.to_path_buf()).into())
    }
}

/// One produced file, with the config that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub path: String,
    /// JSON manifest next to a store.
    pub sidecar: Option<String>,
    pub command: String,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub seed: u64,
    /// Resolved configs by hash, stored under `configs/`.
    pub configs: BTreeMap<String, String>,
    pub artifacts: BTreeMap<String, ArtifactEntry>,
}

/// SHA-256 of the resolved config's JSON.
pub fn config_hash(cfg: &RunConfig) -> String {
    let text = serde_json::to_string(cfg).expect("config serializes");
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Output directory, resolved config and the artifact records of one command.
pub struct Run {
    pub cfg: RunConfig,
    pub out: PathBuf,
    hash: String,
    command: &'static str,
    produced: Vec<(String, String, BTreeMap<String, u64>)>,
}

impl Run {
    pub fn new(cfg: RunConfig, command: &'static str) -> Result<Self> {
        let out = cfg.out_dir();
        std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        let hash = config_hash(&cfg);
        emit(&json!({"event": "start", "command": command, "out": out, "config_hash": hash}));
        Ok(Self {
            cfg,
            out,
            hash,
            command,
            produced: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn record(&mut self, key: &str, name: &str, seeds: &[(&str, u64)]) {
        emit(&json!({"event": "artifact", "key": key, "path": self.path(name)}));
        let seeds = seeds.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        self.produced.push((key.to_string(), name.to_string(), seeds));
    }

    /// Merges this command's artifacts into the run manifest.
    pub fn finish(self) -> Result<()> {
        let mpath = self.path(MANIFEST);
        let mut manifest: RunManifest = if mpath.exists() {
            read_json(&mpath)?
        } else {
            RunManifest::default()
        };
        manifest.version = env!("CARGO_PKG_VERSION").to_string();
        manifest.seed = self.cfg.seed;
        let cfg_name = format!("configs/{}.json", self.hash);
        write_json(&self.path(&cfg_name), &self.cfg)?;
        manifest.configs.insert(self.hash.clone(), cfg_name);
        for (key, path, seeds) in self.produced {
            manifest.artifacts.insert(
                key,
                ArtifactEntry {
                    sidecar: path
                        .ends_with(".sqds")
                        .then(|| manifest_path(Path::new(&path)).to_string_lossy().into_owned()),
                    path,
                    command: self.command.to_string(),
                    config_hash: self.hash.clone(),
                    seeds,
                },
            );
        }
        write_json(&mpath, &manifest)?;
        emit(&json!({"event": "done", "command": self.command}));
        Ok(())
    }

    fn load_data(&self) -> Result<DatasetSplit> {
        let p = self.path(DATA_STORE);
        require(&p)?;
        Ok(data::load_split(&p)?)
    }

    fn arch(&self, split: &DatasetSplit) -> Result<Architecture> {
        let arch = self
            .cfg
            .architecture(split.train.instance_shape(), split.train.classes())?;
        arch.validate()?;
        Ok(arch)
    }

    fn load_synthetic(&self, method: Method) -> Result<SyntheticDataset> {
        let p = self.path(&synthetic_store(method));
        require(&p)?;
        Ok(load_synthetic(&p)?.0)
    }
}

pub fn gen_data(cfg: RunConfig) -> Result<()> {
    let mut run = Run::new(cfg, "gen-data")?;
    let cfg = &run.cfg;
    let data_seed = cfg.sub_seed("data", 0);
    let split = match cfg.dataset.source {
        DatasetKind::Blobs => {
            let b = &cfg.dataset.blobs;
            data::gen_blobs(&BlobSpec {
                classes: b.classes,
                dim: b.dim,
                per_class: b.per_class,
                spread: b.spread,
                seed: data_seed,
            })?
        }
        DatasetKind::Idx => {
            let i = &cfg.dataset.idx;
            require(&i.images)?;
            require(&i.labels)?;
            let mut raw = data::load_idx(&i.images, &i.labels)?;
            if let Some(cap) = i.cap_per_class {
                raw = raw.cap_per_class(cap)?;
            }
            if i.downsample {
                raw = raw.downsample2x()?;
            }
            data::stratified_split(&raw, i.test_fraction, i.normalization, data_seed)?
        }
    };
    let extra = json!({"dataset": cfg.dataset, "seed": data_seed});
    data::save_split(&run.path(DATA_STORE), &split, extra)?;
    emit(&json!({
        "event": "dataset",
        "train": split.train.len(),
        "test": split.test.len(),
        "classes": split.train.classes(),
        "instance_shape": split.train.instance_shape(),
    }));
    run.record("data", DATA_STORE, &[("data", data_seed)]);
    run.finish()
}

pub fn train_teacher(cfg: RunConfig) -> Result<()> {
    let mut run = Run::new(cfg, "train-teacher")?;
    let split = run.load_data()?;
    let arch = run.arch(&split)?;
    let t = run.cfg.teacher.clone();
    let trajs = (0..t.pool_size)
        .into_par_iter()
        .map(|i| teacher::train_teacher(&split, &arch, &run.cfg.teacher_train(i as u64), t.steps, t.stride))
        .collect::<seqmatch_core::Result<Vec<_>>>()?;
    for (i, traj) in trajs.iter().enumerate() {
        let name = teacher_store(i);
        teacher::save_trajectory(&run.path(&name), traj)?;
        emit(&json!({
            "event": "teacher",
            "index": i,
            "final_train_loss": traj.train_loss.last(),
            "final_test_accuracy": traj.test_accuracy.last(),
        }));
        let seed = traj.train.seed;
        run.record(&format!("teacher-{i}"), &name, &[("teacher", seed)]);
    }
    run.finish()
}

fn load_pool(run: &Run) -> Result<TrajectoryPool> {
    let trajs = (0..run.cfg.teacher.pool_size)
        .map(|i| {
            let p = run.path(&teacher_store(i));
            require(&p)?;
            Ok(teacher::load_trajectory(&p)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrajectoryPool::new(trajs)?)
}

pub fn distill(cfg: RunConfig, method: Method) -> Result<()> {
    let mut run = Run::new(cfg, "distill")?;
    let split = run.load_data()?;
    let arch = run.arch(&split)?;
    let cfg = run.cfg.clone();
    let pool = match cfg.backbone.mode {
        MatchMode::TeacherPath => Some(load_pool(&run)?),
        MatchMode::StudentPath => None,
    };
    let init_seed = cfg.sub_seed("synthetic-init", 0);
    let distill_seed = cfg.sub_seed("distill", 0);
    let s0 = SyntheticDataset::init_from_real(&split.train, cfg.ipc, init_seed)?;
    let inp = DistillInputs {
        arch: &arch,
        real: &split.train,
        trajectories: pool.as_ref(),
        backbone: &cfg.backbone,
        seed: distill_seed,
    };
    let mut progress = |p: &Progress, _: &SyntheticDataset| {
        emit(&serde_json::to_value(p).expect("progress serializes"));
    };
    let steps = cfg.teacher.steps;
    let (outcome, segments) = match method {
        Method::Backbone => (
            seqmatch::distill_backbone(&inp, &s0, steps, cfg.backbone.iterations, &mut progress)?,
            vec![[0, steps]],
        ),
        Method::Seqmatch => {
            let schedule = seqmatch::build_schedule(
                steps,
                cfg.seqmatch.k,
                cfg.backbone.iterations,
                cfg.seqmatch.overrides.clone(),
            )?;
            (
                seqmatch::seqmatch_distill(&inp, &s0, &schedule, &mut progress)?,
                schedule.segments.clone(),
            )
        }
    };
    let name = synthetic_store(method);
    let extra = json!({
        "method": method.name(),
        "backbone": cfg.backbone,
        "restart_losses": outcome.restart_losses,
        "seeds": {"synthetic-init": init_seed, "distill": distill_seed},
    });
    save_synthetic(&run.path(&name), &outcome.synthetic, &segments, extra)?;
    run.record(
        &format!("synthetic-{}", method.name()),
        &name,
        &[("synthetic-init", init_seed), ("distill", distill_seed)],
    );
    run.finish()
}

/// What `eval` trains on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalTarget {
    Synthetic(Method),
    /// The full real training set, as a reference.
    Real,
}

impl EvalTarget {
    fn name(self) -> &'static str {
        match self {
            EvalTarget::Synthetic(m) => m.name(),
            EvalTarget::Real => "real",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub target: String,
    pub report: EvalReport,
    pub display: String,
    pub iterations: usize,
}

pub fn eval_file(target: &str) -> String {
    format!("eval-{target}.json")
}

pub fn eval(cfg: RunConfig, target: EvalTarget) -> Result<EvalRecord> {
    let mut run = Run::new(cfg, "eval")?;
    let split = run.load_data()?;
    let arch = run.arch(&split)?;
    let ec = run.cfg.eval_config();
    let report = match target {
        EvalTarget::Synthetic(m) => {
            let s = run.load_synthetic(m)?;
            seqmatch::eval_staged(&s, &arch, &ec, &split.test)?
        }
        EvalTarget::Real => {
            let stage = (split.train.instances().clone(), split.train.labels().to_vec());
            seqmatch::eval_stages(&arch, &[stage], &ec, &split.test)?
        }
    };
    let rec = EvalRecord {
        target: target.name().to_string(),
        display: report.display(),
        report,
        iterations: ec.iterations,
    };
    println!("{}: {}", rec.target, rec.display);
    let name = eval_file(target.name());
    write_json(&run.path(&name), &rec)?;
    run.record(&format!("eval-{}", target.name()), &name, &[("eval", ec.seed)]);
    run.finish()?;
    Ok(rec)
}

/// Evenly spaced indices of `count` out of `n`.
fn spaced(n: usize, count: usize) -> Vec<usize> {
    let count = count.min(n);
    (0..count).map(|i| i * n / count).collect()
}

/// Loss matrix averaged over `seeds` networks trained through `stages`.
fn mean_loss_matrix(
    run: &Run,
    arch: &Architecture,
    stages: &[Stage],
    tracked: &LabeledDataset,
) -> Result<LossTrajectoryMatrix> {
    let cfg = &run.cfg;
    let epochs = cfg.diagnostics.epochs;
    let mats = (0..cfg.eval.seeds)
        .into_par_iter()
        .map(|j| {
            let train = TrainConfig {
                lr: cfg.eval.lr,
                momentum: cfg.eval.momentum,
                batch_size: cfg.eval.batch_size,
                iterations: (epochs - 1) * diagnostics::ITERATIONS_PER_EPOCH,
                seed: cfg.sub_seed("loss-batch", j as u64),
            };
            let init = InitSpec {
                seed: cfg.sub_seed("loss-init", j as u64),
            };
            diagnostics::track_instance_losses(arch, stages, tracked, epochs, &train, init)
        })
        .collect::<seqmatch_core::Result<Vec<_>>>()?;
    let mut values = vec![0.0; mats[0].values.len()];
    for m in &mats {
        for (a, v) in values.iter_mut().zip(&m.values) {
            *a += v / mats.len() as f64;
        }
    }
    Ok(LossTrajectoryMatrix::new(mats[0].rows, epochs, values)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodDiagnostics {
    pub method: String,
    pub spearman: Option<f64>,
    pub mean_discrepancy: f64,
    pub easy_initial: Option<f64>,
    pub easy_final: Option<f64>,
    pub hard_initial: Option<f64>,
    pub hard_final: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsSummary {
    pub tracked: Vec<usize>,
    pub easy: Vec<usize>,
    pub hard: Vec<usize>,
    pub easy_fraction: f64,
    pub hard_fraction: f64,
    pub degenerate: bool,
    pub methods: Vec<MethodDiagnostics>,
}

pub fn diagnose(cfg: RunConfig) -> Result<DiagnosticsSummary> {
    let mut run = Run::new(cfg, "diagnose")?;
    let split = run.load_data()?;
    let arch = run.arch(&split)?;
    let methods: Vec<Method> = [Method::Backbone, Method::Seqmatch]
        .into_iter()
        .filter(|m| run.path(&synthetic_store(*m)).exists())
        .collect();
    if methods.is_empty() {
        return Err(MissingInput(run.path(&synthetic_store(run.cfg.method))).into());
    }
    std::fs::create_dir_all(run.path("diagnostics"))?;
    let tracked_idx = spaced(split.train.len(), run.cfg.diagnostics.tracked);
    let tracked = split.train.subset(&tracked_idx)?;
    let real_stage = (split.train.instances().clone(), split.train.labels().to_vec());
    let real_losses = mean_loss_matrix(&run, &arch, &[real_stage], &tracked)?;
    let clusters = diagnostics::cluster_easy_hard(&real_losses)?;
    diagnostics::export_loss_matrix(&run.path("diagnostics/losses-real.csv"), &real_losses)?;
    run.record("losses-real", "diagnostics/losses-real.csv", &[]);
    let ec = run.cfg.eval_config();
    let norm_seed = run.cfg.sub_seed("amplification", 0);
    let mut per_method = Vec::new();
    for m in methods {
        let s = run.load_synthetic(m)?;
        let stages = seqmatch::stages_of(&s)?;
        let losses = mean_loss_matrix(&run, &arch, &stages, &tracked)?;
        let curves = diagnostics::loss_drop_summary(&losses, &clusters.easy, &clusters.hard)?;
        let name = format!("diagnostics/losses-{}.csv", m.name());
        diagnostics::export_loss_matrix(&run.path(&name), &losses)?;
        run.record(&format!("losses-{}", m.name()), &name, &[]);
        let name = format!("diagnostics/curves-{}.csv", m.name());
        diagnostics::export_curves(&run.path(&name), &curves)?;
        run.record(&format!("curves-{}", m.name()), &name, &[]);
        let coupling: CouplingReport = diagnostics::coupling_experiment(
            &arch,
            s.instances(),
            s.labels(),
            &ec,
            &split.test,
            &run.cfg.diagnostics.fractions,
            norm_seed,
            None,
        )?;
        let name = format!("diagnostics/coupling-{}.csv", m.name());
        diagnostics::export_coupling(&run.path(&name), &coupling)?;
        run.record(
            &format!("coupling-{}", m.name()),
            &name,
            &[("amplification", norm_seed), ("eval", ec.seed)],
        );
        let ends = |c: &Option<Vec<f64>>| (c.as_ref().map(|v| v[0]), c.as_ref().and_then(|v| v.last().copied()));
        let (easy_initial, easy_final) = ends(&curves.easy);
        let (hard_initial, hard_final) = ends(&curves.hard);
        let md = MethodDiagnostics {
            method: m.name().to_string(),
            spearman: coupling.spearman,
            mean_discrepancy: coupling.mean_discrepancy(),
            easy_initial,
            easy_final,
            hard_initial,
            hard_final,
        };
        emit(&json!({"event": "diagnostics", "result": md}));
        per_method.push(md);
    }
    let summary = DiagnosticsSummary {
        tracked: tracked_idx,
        easy: clusters.easy,
        hard: clusters.hard,
        easy_fraction: clusters.easy_fraction,
        hard_fraction: clusters.hard_fraction,
        degenerate: clusters.degenerate,
        methods: per_method,
    };
    write_json(&run.path("diagnostics/summary.json"), &summary)?;
    run.record("diagnostics-summary", "diagnostics/summary.json", &[]);
    run.finish()?;
    Ok(summary)
}

/// Every stage in order: data, teachers, both distillations, evaluations and
/// diagnostics.
pub fn run_all(cfg: RunConfig) -> Result<()> {
    gen_data(cfg.clone())?;
    train_teacher(cfg.clone())?;
    distill(cfg.clone(), Method::Backbone)?;
    distill(cfg.clone(), Method::Seqmatch)?;
    let real = eval(cfg.clone(), EvalTarget::Real)?;
    let stat = eval(cfg.clone(), EvalTarget::Synthetic(Method::Backbone))?;
    let seq = eval(cfg.clone(), EvalTarget::Synthetic(Method::Seqmatch))?;
    let k = cfg.seqmatch.k;
    diagnose(cfg)?;
    println!(
        "real {} | backbone {} | seqmatch K={} {} | gap {:+.2}",
        real.display,
        stat.display,
        k,
        seq.display,
        100.0 * (seq.report.mean - stat.report.mean)
    );
    Ok(())
}
