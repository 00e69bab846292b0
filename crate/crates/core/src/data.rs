//! Labeled datasets, train/test splits, the blob generator and IDX parsing.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use seqmatch_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::rng_for;
use crate::store::{self, PayloadKind, Store};

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// Per-feature affine normalization `(x - mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// How normalization statistics are pooled when fitted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormMode {
    /// Independent mean/std per feature.
    PerFeature,
    /// One mean/std over all features, stored per feature. Used for images,
    /// where per-pixel statistics of near-constant border pixels explode.
    Global,
}

const MIN_STD: f64 = 1e-8;

impl Normalization {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn fit(x: &Tensor, mode: NormMode) -> Result<Self> {
        let (n, d) = x.dims2()?;
        let data = x.data();
        match mode {
            NormMode::PerFeature => {
                let mut mean = vec![0.0; d];
                for row in data.chunks(d) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; d];
                for row in data.chunks(d) {
                    for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                let std = var
                    .iter()
                    .map(|s| {
                        let sd = (s / n as f64).sqrt();
                        if sd < MIN_STD {
                            1.0
                        } else {
                            sd
                        }
                    })
                    .collect();
                Ok(Self { mean, std })
            }
            NormMode::Global => {
                let count = data.len() as f64;
                let mean = data.iter().sum::<f64>() / count;
                let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
                let sd = var.sqrt();
                let sd = if sd < MIN_STD { 1.0 } else { sd };
                Ok(Self {
                    mean: vec![mean; d],
                    std: vec![sd; d],
                })
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, x: &Tensor) -> Result<Tensor> {
        self.affine(x, |v, m, s| (v - m) / s)
    }

    pub fn denormalize(&self, x: &Tensor) -> Result<Tensor> {
        self.affine(x, |v, m, s| v * s + m)
    }

    fn affine(&self, x: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor> {
        let (_, d) = x.dims2()?;
        if d != self.dim() {
            return Err(invalid(format!(
                "normalization has {} features, data has {d}",
                self.dim()
            )));
        }
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = f(*v, *m, *s);
            }
        }
        Ok(out)
    }
}

/// Instances `[count, d]` with integer labels. Image instances are stored
/// flattened; `instance_shape` keeps their `[channels, height, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    instances: Tensor,
    labels: Vec<usize>,
    classes: usize,
    instance_shape: Vec<usize>,
    normalization: Normalization,
}

impl LabeledDataset {
    pub fn new(
        instances: Tensor,
        labels: Vec<usize>,
        classes: usize,
        instance_shape: Vec<usize>,
        normalization: Normalization,
    ) -> Result<Self> {
        let (n, d) = instances.dims2()?;
        if labels.len() != n {
            return Err(invalid(format!(
                "{n} instances but {} labels",
                labels.len()
            )));
        }
        if instance_shape.iter().product::<usize>() != d {
            return Err(invalid(format!(
                "instance shape {instance_shape:?} does not match feature count {d}"
            )));
        }
        if normalization.dim() != d {
            return Err(invalid("normalization dimension mismatch"));
        }
        let mut counts = vec![0usize; classes];
        for &y in &labels {
            if y >= classes {
                return Err(invalid(format!("label {y} out of range for {classes} classes")));
            }
            counts[y] += 1;
        }
        if let Some(c) = counts.iter().position(|&k| k == 0) {
            return Err(invalid(format!("class {c} has no instances")));
        }
        Ok(Self {
            instances,
            labels,
            classes,
            instance_shape,
            normalization,
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

    pub fn instance_shape(&self) -> &[usize] {
        &self.instance_shape
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
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

    /// Indices of every instance of class `c`, ascending.
    pub fn class_indices(&self, c: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == c).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// New dataset made of the given rows. Every class must stay present.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Self::new(
            self.instances.select_rows(indices)?,
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.classes,
            self.instance_shape.clone(),
            self.normalization.clone(),
        )
    }

    /// Keeps at most `max` instances per class, in original order.
    pub fn cap_per_class(&self, max: usize) -> Result<Self> {
        let mut seen = vec![0usize; self.classes];
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let c = &mut seen[self.labels[i]];
                *c += 1;
                *c <= max
            })
            .collect();
        self.subset(&keep)
    }

    /// Same data with `norm` applied to raw (currently identity-normalized)
    /// instances.
    pub fn with_normalization(&self, norm: &Normalization) -> Result<Self> {
        if self.normalization != Normalization::identity(self.dim()) {
            return Err(invalid("dataset is already normalized"));
        }
        Self::new(
            norm.normalize(&self.instances)?,
            self.labels.clone(),
            self.classes,
            self.instance_shape.clone(),
            norm.clone(),
        )
    }

    /// 2x2 average pooling of `[c, h, w]` images (odd trailing rows/cols
    /// dropped). Only valid before normalization.
    pub fn downsample2x(&self) -> Result<Self> {
        let &[c, h, w] = self.instance_shape.as_slice() else {
            return Err(invalid(format!(
                "downsampling needs [c, h, w] instances, got {:?}",
                self.instance_shape
            )));
        };
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(invalid("image too small to downsample"));
        }
        let d_in = c * h * w;
        let d_out = c * oh * ow;
        let mut out = Vec::with_capacity(self.len() * d_out);
        for img in self.instances.data().chunks(d_in) {
            for ch in 0..c {
                for y in 0..oh {
                    for x in 0..ow {
                        let at = |dy: usize, dx: usize| img[ch * h * w + (2 * y + dy) * w + 2 * x + dx];
                        out.push((at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)) / 4.0);
                    }
                }
            }
        }
        Self::new(
            Tensor::new(vec![self.len(), d_out], out)?,
            self.labels.clone(),
            self.classes,
            vec![c, oh, ow],
            Normalization::identity(d_out),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

/// Stratified split: in every class, `round(test_fraction * count)`
/// shuffled instances go to the test side. Normalization statistics are fitted
/// on the train side only and applied to both sides.
pub fn stratified_split(
    raw: &LabeledDataset,
    test_fraction: f64,
    norm: NormMode,
    seed: u64,
) -> Result<DatasetSplit> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(invalid(format!("test fraction {test_fraction} outside [0, 1)")));
    }
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for c in 0..raw.classes() {
        let mut idx = raw.class_indices(c);
        let n_test = (test_fraction * idx.len() as f64).round() as usize;
        if n_test == 0 || n_test >= idx.len() {
            return Err(invalid(format!(
                "class {c} with {} instances cannot be split {test_fraction}",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng_for(seed, "split", c as u64));
        test_idx.extend_from_slice(&idx[..n_test]);
        train_idx.extend_from_slice(&idx[n_test..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    let train_raw = raw.subset(&train_idx)?;
    let test_raw = raw.subset(&test_idx)?;
    let fitted = Normalization::fit(train_raw.instances(), norm)?;
    Ok(DatasetSplit {
        train: train_raw.with_normalization(&fitted)?,
        test: test_raw.with_normalization(&fitted)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub spread: f64,
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            classes: 3,
            dim: 16,
            per_class: 1000,
            spread: 0.3,
            seed: 0,
        }
    }
}

/// Gaussian blobs: class means uniform on the unit sphere, instances
/// `mean + N(0, spread^2 I)`, split 80/20 stratified.
pub fn gen_blobs(spec: &BlobSpec) -> Result<DatasetSplit> {
    if spec.classes < 2 || spec.dim < 2 || spec.per_class < 2 {
        return Err(invalid("blobs need classes >= 2, dim >= 2, per_class >= 2"));
    }
    if !(spec.spread >= 0.0) {
        return Err(invalid(format!("spread must be >= 0, got {}", spec.spread)));
    }
    let mut rng = rng_for(spec.seed, "blob-means", 0);
    let means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            let v: Vec<f64> = (0..spec.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();
    let mut rng = rng_for(spec.seed, "blob-noise", 0);
    let mut data = Vec::with_capacity(spec.classes * spec.per_class * spec.dim);
    let mut labels = Vec::with_capacity(spec.classes * spec.per_class);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..spec.per_class {
            for &m in mean {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(m + spec.spread * z);
            }
            labels.push(c);
        }
    }
    let raw = LabeledDataset::new(
        Tensor::new(vec![labels.len(), spec.dim], data)?,
        labels,
        spec.classes,
        vec![spec.dim],
        Normalization::identity(spec.dim),
    )?;
    stratified_split(&raw, 0.2, NormMode::PerFeature, spec.seed)
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("truncated IDX header at byte {at}")))
}

/// Parses an IDX image file (`0x00000803`, `[count, rows, cols]` u8 pixels)
/// and its label file (`0x00000801`, `[count]` u8 labels). Pixels are scaled
/// to `[0, 1]`; the result carries identity normalization.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<LabeledDataset> {
    let magic = be_u32(images, 0)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::BadMagic(format!("image file magic {magic:#010x}")));
    }
    let magic = be_u32(labels, 0)?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::BadMagic(format!("label file magic {magic:#010x}")));
    }
    let count = be_u32(images, 4)? as usize;
    let rows = be_u32(images, 8)? as usize;
    let cols = be_u32(images, 12)? as usize;
    let label_count = be_u32(labels, 4)? as usize;
    if count != label_count {
        return Err(Error::Format(format!(
            "{count} images but {label_count} labels"
        )));
    }
    let pixels = count * rows * cols;
    let image_payload = &images[16..];
    if image_payload.len() < pixels {
        return Err(Error::Format(format!(
            "truncated image payload: {} of {pixels} bytes",
            image_payload.len()
        )));
    }
    let label_payload = &labels[8..];
    if label_payload.len() < count {
        return Err(Error::Format(format!(
            "truncated label payload: {} of {count} bytes",
            label_payload.len()
        )));
    }
    let ys: Vec<usize> = label_payload[..count].iter().map(|&b| b as usize).collect();
    let classes = ys.iter().max().map_or(0, |m| m + 1);
    let data = image_payload[..pixels].iter().map(|&p| f64::from(p) / 255.0).collect();
    LabeledDataset::new(
        Tensor::new(vec![count, rows * cols], data)?,
        ys,
        classes,
        vec![1, rows, cols],
        Normalization::identity(rows * cols),
    )
}

/// Reads a file, transparently gunzipping it when it starts with the gzip
/// magic bytes.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

pub fn load_idx(images: &Path, labels: &Path) -> Result<LabeledDataset> {
    parse_idx(&read_maybe_gz(images)?, &read_maybe_gz(labels)?)
}

/// Manifest of a dataset store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub kind: String,
    pub classes: usize,
    pub instance_shape: Vec<usize>,
    pub train: usize,
    pub test: usize,
    pub normalization: Normalization,
    pub layout: String,
    #[serde(default)]
    pub extra: serde_json::Value,
}

const DATASET_LAYOUT: &str =
    "train instances [n, d], train labels [n] as f64, test instances [m, d], test labels [m] as f64 (normalized)";

/// Writes a normalized split as an SQDS metrics store plus manifest.
pub fn save_split(path: &Path, split: &DatasetSplit, extra: serde_json::Value) -> Result<()> {
    let labels = |d: &LabeledDataset| Tensor::vector(d.labels().iter().map(|&y| y as f64).collect());
    let tensors = vec![
        split.train.instances().clone(),
        labels(&split.train)?,
        split.test.instances().clone(),
        labels(&split.test)?,
    ];
    store::save_store(path, &Store::new(PayloadKind::Metrics, tensors))?;
    let manifest = DatasetManifest {
        kind: "dataset".into(),
        classes: split.train.classes(),
        instance_shape: split.train.instance_shape().to_vec(),
        train: split.train.len(),
        test: split.test.len(),
        normalization: split.train.normalization().clone(),
        layout: DATASET_LAYOUT.into(),
        extra,
    };
    store::write_json(&store::manifest_path(path), &manifest)
}

pub fn load_split(path: &Path) -> Result<DatasetSplit> {
    let manifest: DatasetManifest = store::read_json(&store::manifest_path(path))?;
    if manifest.kind != "dataset" {
        return Err(Error::Format(format!("manifest kind {:?} is not a dataset", manifest.kind)));
    }
    let st = store::load_store_of(path, PayloadKind::Metrics)?;
    let [xtr, ytr, xte, yte]: [Tensor; 4] = st
        .tensors
        .try_into()
        .map_err(|_| Error::Format("dataset store must hold 4 tensors".into()))?;
    let side = |x: Tensor, y: Tensor| -> Result<LabeledDataset> {
        let ys = y
            .into_data()
            .into_iter()
            .map(|v| {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::Format(format!("non-integer label {v} in dataset store")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        LabeledDataset::new(
            x,
            ys,
            manifest.classes,
            manifest.instance_shape.clone(),
            manifest.normalization.clone(),
        )
    };
    Ok(DatasetSplit {
        train: side(xtr, ytr)?,
        test: side(xte, yte)?,
    })
}
