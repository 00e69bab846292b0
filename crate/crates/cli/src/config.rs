//! Run configuration: JSON file, `--set` overrides, defaults and validation.

use std::fmt;
use std::path::{Path, PathBuf};

use seqmatch_core::data::NormMode;
use seqmatch_core::matching::BackboneConfig;
use seqmatch_core::models::{Architecture, TrainConfig};
use seqmatch_core::rng::derive_seed;
use seqmatch_core::seqmatch::{EvalConfig, SubsetOverride};
use seqmatch_core::teacher::BatchSpec;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Environment variable that roots relative output directories.
pub const OUT_ROOT_ENV: &str = "SEQMATCH_OUT";

/// A rejected configuration, with the dotted path of the offending field.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigError {
    fn at(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() {
            write!(f, "config: {}", self.message)
        } else {
            write!(f, "config `{}`: {}", self.path, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Blobs,
    Idx,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobsConfig {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub spread: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxConfig {
    pub images: PathBuf,
    pub labels: PathBuf,
    /// Keep at most this many instances of every class (first in file order).
    pub cap_per_class: Option<usize>,
    /// 2x2 average pooling, e.g. 28x28 -> 14x14.
    pub downsample: bool,
    pub test_fraction: f64,
    pub normalization: NormMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: DatasetKind,
    pub blobs: BlobsConfig,
    pub idx: IdxConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchKind {
    Mlp,
    ConvnetMini,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub name: ArchKind,
    /// MLP hidden widths.
    pub hidden: Vec<usize>,
    /// Convnet channels per conv block.
    pub channels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Stored steps M; the trajectory has M + 1 checkpoints.
    pub steps: usize,
    /// SGD iterations between stored checkpoints.
    pub stride: usize,
    /// Number of teacher trajectories.
    pub pool_size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Seqmatch,
    Backbone,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Seqmatch => "seqmatch",
            Method::Backbone => "backbone",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeqmatchConfig {
    pub k: usize,
    /// Empty, or one entry per subset.
    pub overrides: Vec<SubsetOverride>,
    /// Values of K for sweeps; informational.
    pub k_grid: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seeds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsConfig {
    /// Top/bottom fractions of the coupling splits.
    pub fractions: Vec<f64>,
    /// Loss-tracking epochs, counting the untrained column.
    pub epochs: usize,
    /// Real training instances whose losses are tracked (evenly spaced).
    pub tracked: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub dataset: DatasetConfig,
    pub arch: ArchConfig,
    pub ipc: usize,
    pub method: Method,
    pub teacher: TeacherConfig,
    pub backbone: BackboneConfig,
    pub seqmatch: SeqmatchConfig,
    pub eval: EvalSection,
    pub diagnostics: DiagnosticsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            dataset: DatasetConfig {
                source: DatasetKind::Blobs,
                blobs: BlobsConfig {
                    classes: 3,
                    dim: 16,
                    per_class: 1000,
                    spread: 0.3,
                },
                idx: IdxConfig {
                    images: PathBuf::from("data/mnist-npm/images-idx3-ubyte.gz"),
                    labels: PathBuf::from("data/mnist-npm/labels-idx1-ubyte.gz"),
                    cap_per_class: Some(1000),
                    downsample: true,
                    test_fraction: 0.2,
                    normalization: NormMode::Global,
                },
            },
            arch: ArchConfig {
                name: ArchKind::Mlp,
                hidden: vec![64],
                channels: vec![8, 16],
            },
            ipc: 10,
            method: Method::Seqmatch,
            teacher: TeacherConfig {
                lr: 0.05,
                momentum: 0.0,
                batch_size: 256,
                steps: 20,
                stride: 10,
                pool_size: 4,
            },
            backbone: BackboneConfig::default(),
            seqmatch: SeqmatchConfig {
                k: 2,
                overrides: Vec::new(),
                k_grid: vec![2, 3, 4, 5, 6],
            },
            eval: EvalSection {
                lr: 0.05,
                momentum: 0.0,
                batch_size: 256,
                iterations: 1000,
                seeds: 5,
            },
            diagnostics: DiagnosticsConfig {
                fractions: vec![0.1, 0.2, 0.3, 0.4, 0.5],
                epochs: 50,
                tracked: 1000,
            },
        }
    }
}

/// Deep-merges `over` into `base`; objects merge key by key, anything else
/// replaces. A tagged object whose `kind` changes is replaced whole.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o))
            if !b.contains_key("kind") || !o.contains_key("kind") || b.get("kind") == o.get("kind") =>
        {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses `key.path=value`; the value is read as JSON, or taken as a string
/// when it is not valid JSON.
pub fn parse_set(arg: &str) -> Result<(String, Value), ConfigError> {
    let (key, raw) = arg
        .split_once('=')
        .ok_or_else(|| ConfigError::at("", format!("override `{arg}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(ConfigError::at(key, "empty key in override"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), ConfigError> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| ConfigError::at(parts[..i].join("."), "not an object"))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split yields at least one part")
}

/// Resolves file text (may be empty) plus `key=value` overrides into a
/// validated config. Overrides win over the file; missing keys take defaults.
pub fn resolve_config(text: &str, sets: &[(String, Value)]) -> Result<RunConfig, ConfigError> {
    let mut user = if text.trim().is_empty() {
        Value::Object(Default::default())
    } else {
        serde_json::from_str(text).map_err(|e| ConfigError::at("", format!("malformed JSON: {e}")))?
    };
    if !user.is_object() {
        return Err(ConfigError::at("", "top level must be a JSON object"));
    }
    for (k, v) in sets {
        set_path(&mut user, k, v.clone())?;
    }
    let mut full = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
    merge(&mut full, user);
    let cfg: RunConfig = serde_path_to_error::deserialize(full).map_err(|e| {
        let path = e.path().to_string();
        ConfigError::at(if path == "." { String::new() } else { path }, e.into_inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: Option<&Path>, sets: &[(String, Value)]) -> Result<RunConfig, ConfigError> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| ConfigError::at("", format!("cannot read {}: {e}", p.display())))?,
        None => String::new(),
    };
    resolve_config(&text, sets)
}

fn positive(path: &str, v: usize) -> Result<(), ConfigError> {
    if v == 0 {
        Err(ConfigError::at(path, "must be positive"))
    } else {
        Ok(())
    }
}

fn finite_positive(path: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(ConfigError::at(path, format!("must be finite and > 0, got {v}")))
    }
}

fn momentum(path: &str, v: f64) -> Result<(), ConfigError> {
    if (0.0..1.0).contains(&v) {
        Ok(())
    } else {
        Err(ConfigError::at(path, format!("must be in [0, 1), got {v}")))
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        match self.dataset.source {
            DatasetKind::Blobs => {
                let b = &self.dataset.blobs;
                if b.classes < 2 {
                    return Err(ConfigError::at("dataset.blobs.classes", "need at least 2 classes"));
                }
                positive("dataset.blobs.dim", b.dim)?;
                if b.per_class < 5 {
                    return Err(ConfigError::at("dataset.blobs.per_class", "need at least 5 per class"));
                }
                if !(b.spread >= 0.0 && b.spread.is_finite()) {
                    return Err(ConfigError::at("dataset.blobs.spread", "must be finite and >= 0"));
                }
            }
            DatasetKind::Idx => {
                let i = &self.dataset.idx;
                if i.cap_per_class == Some(0) {
                    return Err(ConfigError::at("dataset.idx.cap_per_class", "must be positive"));
                }
                if !(i.test_fraction > 0.0 && i.test_fraction < 1.0) {
                    return Err(ConfigError::at("dataset.idx.test_fraction", "must be in (0, 1)"));
                }
            }
        }
        match self.arch.name {
            ArchKind::Mlp => {
                if self.arch.hidden.contains(&0) {
                    return Err(ConfigError::at("arch.hidden", "widths must be positive"));
                }
            }
            ArchKind::ConvnetMini => {
                if self.arch.channels.is_empty() || self.arch.channels.contains(&0) {
                    return Err(ConfigError::at("arch.channels", "need positive channel counts"));
                }
            }
        }
        positive("ipc", self.ipc)?;
        let t = &self.teacher;
        finite_positive("teacher.lr", t.lr)?;
        momentum("teacher.momentum", t.momentum)?;
        positive("teacher.batch_size", t.batch_size)?;
        positive("teacher.steps", t.steps)?;
        positive("teacher.stride", t.stride)?;
        positive("teacher.pool_size", t.pool_size)?;
        let b = &self.backbone;
        if !(b.pixel_lr >= 0.0 && b.pixel_lr.is_finite()) {
            return Err(ConfigError::at("backbone.pixel_lr", "must be finite and >= 0"));
        }
        momentum("backbone.pixel_momentum", b.pixel_momentum)?;
        positive("backbone.iterations", b.iterations)?;
        positive("backbone.restarts", b.restarts)?;
        finite_positive("backbone.student_lr", b.student_lr)?;
        positive("backbone.student_batch", b.student_batch)?;
        match b.target_batch {
            BatchSpec::PerClass { size } | BatchSpec::Uniform { size } => {
                positive("backbone.target_batch.size", size)?
            }
            BatchSpec::Full => {}
        }
        let s = &self.seqmatch;
        positive("seqmatch.k", s.k)?;
        if s.k > self.ipc {
            return Err(ConfigError::at("seqmatch.k", format!("K = {} exceeds ipc = {}", s.k, self.ipc)));
        }
        if s.k > t.steps {
            return Err(ConfigError::at(
                "seqmatch.k",
                format!("K = {} exceeds teacher.steps = {}", s.k, t.steps),
            ));
        }
        if !s.overrides.is_empty() && s.overrides.len() != s.k {
            return Err(ConfigError::at("seqmatch.overrides", "give none or exactly K entries"));
        }
        for (i, o) in s.overrides.iter().enumerate() {
            if o.iterations == Some(0) {
                return Err(ConfigError::at(format!("seqmatch.overrides[{i}].iterations"), "must be positive"));
            }
        }
        if s.k_grid.contains(&0) {
            return Err(ConfigError::at("seqmatch.k_grid", "entries must be positive"));
        }
        let e = &self.eval;
        finite_positive("eval.lr", e.lr)?;
        momentum("eval.momentum", e.momentum)?;
        positive("eval.batch_size", e.batch_size)?;
        positive("eval.iterations", e.iterations)?;
        positive("eval.seeds", e.seeds)?;
        let d = &self.diagnostics;
        if d.fractions.is_empty() {
            return Err(ConfigError::at("diagnostics.fractions", "need at least one fraction"));
        }
        if let Some(f) = d.fractions.iter().find(|f| !(**f > 0.0 && **f <= 0.5)) {
            return Err(ConfigError::at("diagnostics.fractions", format!("{f} outside (0, 0.5]")));
        }
        if d.epochs < 2 {
            return Err(ConfigError::at("diagnostics.epochs", "need at least 2 epochs"));
        }
        positive("diagnostics.tracked", d.tracked)?;
        Ok(())
    }

    /// Output directory; relative paths are rooted at `$SEQMATCH_OUT` when set.
    pub fn out_dir(&self) -> PathBuf {
        match std::env::var_os(OUT_ROOT_ENV) {
            Some(root) if self.out.is_relative() => PathBuf::from(root).join(&self.out),
            _ => self.out.clone(),
        }
    }

    pub fn sub_seed(&self, component: &str, index: u64) -> u64 {
        derive_seed(self.seed, component, index)
    }

    /// The network for `input_shape = [channels, height, width]` or `[d]`.
    pub fn architecture(&self, input_shape: &[usize], classes: usize) -> Result<Architecture, ConfigError> {
        let d: usize = input_shape.iter().product();
        match self.arch.name {
            ArchKind::Mlp => Ok(Architecture::mlp(d, &self.arch.hidden, classes)),
            ArchKind::ConvnetMini => match input_shape {
                &[c, h, w] => Ok(Architecture::convnet_mini([c, h, w], &self.arch.channels, classes)),
                _ => Err(ConfigError::at("arch.name", "convnet-mini needs image data")),
            },
        }
    }

    pub fn teacher_train(&self, index: u64) -> TrainConfig {
        TrainConfig {
            lr: self.teacher.lr,
            momentum: self.teacher.momentum,
            batch_size: self.teacher.batch_size,
            iterations: self.teacher.steps * self.teacher.stride,
            seed: self.sub_seed("teacher", index),
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            lr: self.eval.lr,
            momentum: self.eval.momentum,
            batch_size: self.eval.batch_size,
            iterations: self.eval.iterations,
            seeds: self.eval.seeds,
            seed: self.sub_seed("eval", 0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_parses_json_or_string() {
        assert_eq!(parse_set("seqmatch.k=4").unwrap(), ("seqmatch.k".into(), Value::from(4)));
        assert_eq!(parse_set("out=runs/x").unwrap().1, Value::from("runs/x"));
        assert!(parse_set("novalue").is_err());
        assert!(parse_set("a..b=1").is_err());
    }
}
