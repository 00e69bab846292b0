//! Small differentiable classifiers, their initialization distribution, the
//! cross-entropy loss and the plain-SGD training operator.
//!
//! Weights are stored `[fan_in, fan_out]` (inputs multiply from the left), so
//! every column of a weight matrix belongs to one output unit. Convolution
//! kernels follow the same layout over im2col patches.

use std::rc::Rc;

use rand::seq::index::sample;
use rand::Rng;
use seqmatch_tensor::{grad, no_grad, ParamSet, Tensor, TensorError, Var, PAD};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::rng_for;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    Softplus,
    /// Second derivatives vanish almost everywhere; prefer a smooth
    /// activation when distilling.
    Relu,
}

impl Activation {
    fn apply(self, x: &Var) -> Result<Var> {
        Ok(match self {
            Activation::Tanh => x.tanh()?,
            Activation::Softplus => x.softplus()?,
            Activation::Relu => x.relu()?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Architecture {
    /// Fully connected layers `input_dim -> hidden... -> classes`.
    Mlp {
        input_dim: usize,
        hidden: Vec<usize>,
        classes: usize,
        activation: Activation,
    },
    /// Blocks of 3x3 same-padded convolution, activation and 2x2 average
    /// pooling, then a linear classifier. No normalization layers.
    ConvnetMini {
        channels: usize,
        height: usize,
        width: usize,
        conv_channels: Vec<usize>,
        classes: usize,
        activation: Activation,
    },
}

/// Name, shape and fan-in of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
}

const KERNEL: usize = 3;

impl Architecture {
    pub fn mlp(input_dim: usize, hidden: &[usize], classes: usize) -> Self {
        Architecture::Mlp {
            input_dim,
            hidden: hidden.to_vec(),
            classes,
            activation: Activation::Tanh,
        }
    }

    pub fn convnet_mini(image: [usize; 3], conv_channels: &[usize], classes: usize) -> Self {
        Architecture::ConvnetMini {
            channels: image[0],
            height: image[1],
            width: image[2],
            conv_channels: conv_channels.to_vec(),
            classes,
            activation: Activation::Tanh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Architecture::Mlp {
                input_dim,
                hidden,
                classes,
                ..
            } => {
                if *input_dim == 0 || *classes < 2 || hidden.iter().any(|&h| h == 0) {
                    return Err(invalid("mlp needs input_dim > 0, classes >= 2, nonzero widths"));
                }
            }
            Architecture::ConvnetMini {
                channels,
                height,
                width,
                conv_channels,
                classes,
                ..
            } => {
                if *channels == 0 || *classes < 2 || conv_channels.is_empty() {
                    return Err(invalid("convnet-mini needs channels, classes >= 2 and >= 1 block"));
                }
                if conv_channels.iter().any(|&c| c == 0) {
                    return Err(invalid("convnet-mini channel counts must be positive"));
                }
                let (mut h, mut w) = (*height, *width);
                for _ in conv_channels {
                    h /= 2;
                    w /= 2;
                }
                if h == 0 || w == 0 {
                    return Err(invalid(format!(
                        "{height}x{width} input too small for {} pooling blocks",
                        conv_channels.len()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Architecture::Mlp { input_dim, .. } => *input_dim,
            Architecture::ConvnetMini {
                channels,
                height,
                width,
                ..
            } => channels * height * width,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Architecture::Mlp { classes, .. } | Architecture::ConvnetMini { classes, .. } => *classes,
        }
    }

    pub fn activation(&self) -> Activation {
        match self {
            Architecture::Mlp { activation, .. } | Architecture::ConvnetMini { activation, .. } => {
                *activation
            }
        }
    }

    /// Short identifier such as `mlp-196-64-10-tanh`.
    pub fn id(&self) -> String {
        let act = match self.activation() {
            Activation::Tanh => "tanh",
            Activation::Softplus => "softplus",
            Activation::Relu => "relu",
        };
        match self {
            Architecture::Mlp {
                input_dim,
                hidden,
                classes,
                ..
            } => {
                let mut dims = vec![input_dim.to_string()];
                dims.extend(hidden.iter().map(|h| h.to_string()));
                dims.push(classes.to_string());
                format!("mlp-{}-{act}", dims.join("-"))
            }
            Architecture::ConvnetMini {
                channels,
                height,
                width,
                conv_channels,
                classes,
                ..
            } => {
                let convs: Vec<String> = conv_channels.iter().map(|c| c.to_string()).collect();
                format!(
                    "convnet-{channels}x{height}x{width}-{}-{classes}-{act}",
                    convs.join("-")
                )
            }
        }
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        let dense = |specs: &mut Vec<LayerSpec>, name: String, fan_in: usize, out: usize| {
            specs.push(LayerSpec {
                name: format!("{name}.weight"),
                shape: vec![fan_in, out],
                fan_in,
            });
            specs.push(LayerSpec {
                name: format!("{name}.bias"),
                shape: vec![out],
                fan_in,
            });
        };
        match self {
            Architecture::Mlp {
                input_dim,
                hidden,
                classes,
                ..
            } => {
                let mut fan_in = *input_dim;
                for (i, &h) in hidden.iter().enumerate() {
                    dense(&mut specs, format!("fc{i}"), fan_in, h);
                    fan_in = h;
                }
                dense(&mut specs, "out".into(), fan_in, *classes);
            }
            Architecture::ConvnetMini {
                channels,
                height,
                width,
                conv_channels,
                classes,
                ..
            } => {
                let (mut c, mut h, mut w) = (*channels, *height, *width);
                for (i, &out) in conv_channels.iter().enumerate() {
                    dense(&mut specs, format!("conv{i}"), c * KERNEL * KERNEL, out);
                    c = out;
                    h /= 2;
                    w /= 2;
                }
                dense(&mut specs, "out".into(), c * h * w, *classes);
            }
        }
        specs
    }

    pub fn num_params(&self) -> usize {
        self.layer_specs()
            .iter()
            .map(|s| s.shape.iter().product::<usize>())
            .sum()
    }

    /// Logits `[n, classes]` for instances `[n, input_dim]`.
    pub fn forward(&self, params: &[Var], x: &Var) -> Result<Var> {
        let specs_len = self.layer_specs().len();
        if params.len() != specs_len {
            return Err(invalid(format!(
                "{} expects {specs_len} parameter tensors, got {}",
                self.id(),
                params.len()
            )));
        }
        let (n, d) = x.value().dims2()?;
        if d != self.input_dim() {
            return Err(Error::Tensor(TensorError::ShapeMismatch {
                op: "forward",
                lhs: x.shape().to_vec(),
                rhs: vec![n, self.input_dim()],
            }));
        }
        let act = self.activation();
        match self {
            Architecture::Mlp { hidden, .. } => {
                let mut h = x.clone();
                for i in 0..hidden.len() {
                    h = act.apply(&h.matmul(&params[2 * i])?.add_row(&params[2 * i + 1])?)?;
                }
                let last = 2 * hidden.len();
                Ok(h.matmul(&params[last])?.add_row(&params[last + 1])?)
            }
            Architecture::ConvnetMini {
                channels,
                height,
                width,
                conv_channels,
                ..
            } => {
                let (mut c, mut h, mut w) = (*channels, *height, *width);
                let mut feat = x.clone();
                for (i, &out) in conv_channels.iter().enumerate() {
                    // the raw input is channel-major, later feature maps are
                    // channel-last
                    let layout = if i == 0 { Layout::Chw } else { Layout::Hwc };
                    let patches = feat.gather(
                        im2col_index(n, c, h, w, layout),
                        &[n * h * w, c * KERNEL * KERNEL],
                    )?;
                    let conv = patches.matmul(&params[2 * i])?.add_row(&params[2 * i + 1])?;
                    let a = act.apply(&conv)?;
                    let (ph, pw) = (h / 2, w / 2);
                    feat = a
                        .scatter_add(pool_index(n, h, w, out), &[n * ph * pw, out])?
                        .scale(0.25)?;
                    c = out;
                    h = ph;
                    w = pw;
                }
                let last = 2 * conv_channels.len();
                let flat = feat.reshape(&[n, h * w * c])?;
                Ok(flat.matmul(&params[last])?.add_row(&params[last + 1])?)
            }
        }
    }
}

#[derive(Clone, Copy)]
enum Layout {
    Chw,
    Hwc,
}

/// Gather map from `n` images of `c x h x w` to im2col rows `(img, y, x)` with
/// columns `(channel, ky, kx)` for a same-padded 3x3 kernel.
fn im2col_index(n: usize, c: usize, h: usize, w: usize, layout: Layout) -> Rc<[u32]> {
    let per_img = c * h * w;
    let mut idx = Vec::with_capacity(n * h * w * c * KERNEL * KERNEL);
    for img in 0..n {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    for ky in 0..KERNEL {
                        for kx in 0..KERNEL {
                            let sy = y as isize + ky as isize - 1;
                            let sx = x as isize + kx as isize - 1;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                idx.push(PAD);
                                continue;
                            }
                            let (sy, sx) = (sy as usize, sx as usize);
                            let within = match layout {
                                Layout::Chw => ch * h * w + sy * w + sx,
                                Layout::Hwc => (sy * w + sx) * c + ch,
                            };
                            idx.push((img * per_img + within) as u32);
                        }
                    }
                }
            }
        }
    }
    idx.into()
}

/// Scatter map sending each `(img, y, x, ch)` activation to its 2x2 pooling
/// cell; trailing odd rows/columns are dropped.
fn pool_index(n: usize, h: usize, w: usize, c: usize) -> Rc<[u32]> {
    let (ph, pw) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(n * h * w * c);
    for img in 0..n {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    if y / 2 < ph && x / 2 < pw {
                        idx.push((((img * ph + y / 2) * pw + x / 2) * c + ch) as u32);
                    } else {
                        idx.push(PAD);
                    }
                }
            }
        }
    }
    idx.into()
}

/// Draw from the initialization distribution: every weight and bias of a
/// layer with fan-in `f` is uniform on `[-1/sqrt(f), 1/sqrt(f)]` (Kaiming
/// uniform with `a = sqrt(5)`), i.e. per-element std `1/sqrt(3 f)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitSpec {
    pub seed: u64,
}

pub fn init_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

pub fn init_params(arch: &Architecture, init: InitSpec) -> Result<ParamSet> {
    arch.validate()?;
    let mut rng = rng_for(init.seed, "init", 0);
    let layers = arch
        .layer_specs()
        .into_iter()
        .map(|spec| {
            let b = init_bound(spec.fan_in);
            let t = Tensor::from_fn(&spec.shape, |_| rng.random_range(-b..b))?;
            Ok((spec.name, t))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ParamSet::new(layers))
}

fn check_params(arch: &Architecture, params: &ParamSet) -> Result<()> {
    let specs = arch.layer_specs();
    if specs.len() != params.len()
        || specs
            .iter()
            .zip(params.layers())
            .any(|(s, (_, t))| s.shape.as_slice() != t.shape())
    {
        return Err(invalid(format!("parameters do not match {}", arch.id())));
    }
    Ok(())
}

/// Cross-entropy of the network on `(x, labels)`; mean over the batch when
/// `reduce_mean`, summed otherwise.
pub fn loss(
    arch: &Architecture,
    params: &[Var],
    x: &Var,
    labels: &[usize],
    reduce_mean: bool,
) -> Result<Var> {
    if labels.is_empty() {
        return Err(invalid("loss of an empty batch"));
    }
    Ok(arch.forward(params, x)?.cross_entropy(labels, reduce_mean)?)
}

/// Gradient of the mean loss on `(x, labels)` at `params`.
pub fn batch_gradient(
    arch: &Architecture,
    params: &ParamSet,
    x: &Tensor,
    labels: &[usize],
) -> Result<ParamSet> {
    check_params(arch, params)?;
    let leaves = params.to_leaves();
    let l = loss(arch, &leaves, &Var::constant(x.clone()), labels, true)?;
    let g = grad(&l, &leaves, false)?;
    Ok(params.from_vars(&g)?)
}

/// Mean loss without recording.
pub fn mean_loss(arch: &Architecture, params: &ParamSet, x: &Tensor, labels: &[usize]) -> Result<f64> {
    no_grad(|| {
        let l = loss(arch, &params.to_constants(), &Var::constant(x.clone()), labels, true)?;
        Ok(l.item()?)
    })
}

/// Loss of every instance, in order.
pub fn per_instance_losses(
    arch: &Architecture,
    params: &ParamSet,
    x: &Tensor,
    labels: &[usize],
) -> Result<Vec<f64>> {
    no_grad(|| {
        let logits = arch.forward(&params.to_constants(), &Var::constant(x.clone()))?;
        Ok(logits.cross_entropy_per_row(labels)?.value().data().to_vec())
    })
}

pub fn logits(arch: &Architecture, params: &ParamSet, x: &Tensor) -> Result<Tensor> {
    no_grad(|| Ok(arch.forward(&params.to_constants(), &Var::constant(x.clone()))?.value().clone()))
}

/// Fraction of instances whose arg-max logit equals the label.
pub fn accuracy(arch: &Architecture, params: &ParamSet, x: &Tensor, labels: &[usize]) -> Result<f64> {
    let z = logits(arch, params, x)?;
    let c = arch.classes();
    let correct = z
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            best.0 == y
        })
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Hyperparameters of the training operator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    #[serde(default)]
    pub momentum: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size must be positive"));
        }
        Ok(())
    }
}

/// Stateful SGD over a dataset. The batch drawn at iteration `i` depends
/// only on `(seed, i)`, so a run split into several `run` calls is bitwise
/// identical to one uninterrupted run.
#[derive(Clone, Debug)]
pub struct Trainer {
    cfg: TrainConfig,
    velocity: Option<ParamSet>,
    iteration: u64,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            velocity: None,
            iteration: 0,
        })
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Indices of the batch used at iteration `iteration` over `n`
    /// instances; the whole set when it fits in one batch.
    pub fn batch_indices(&self, n: usize, iteration: u64) -> Vec<usize> {
        if self.cfg.batch_size >= n {
            return (0..n).collect();
        }
        let mut rng = rng_for(self.cfg.seed, "batch", iteration);
        let mut idx = sample(&mut rng, n, self.cfg.batch_size).into_vec();
        idx.sort_unstable();
        idx
    }

    /// One SGD step; returns the batch loss before the update.
    pub fn step(
        &mut self,
        arch: &Architecture,
        params: &mut ParamSet,
        x: &Tensor,
        labels: &[usize],
    ) -> Result<f64> {
        let it = self.iteration;
        let diverged = |e: Error| match e {
            Error::Tensor(source @ TensorError::NonFinite(_)) => Error::Divergence { iteration: it, source },
            other => other,
        };
        let idx = self.batch_indices(labels.len(), it);
        let (xb, yb) = if idx.len() == labels.len() {
            (x.clone(), labels.to_vec())
        } else {
            (x.select_rows(&idx)?, idx.iter().map(|&i| labels[i]).collect())
        };
        let leaves = params.to_leaves();
        let l = loss(arch, &leaves, &Var::constant(xb), &yb, true).map_err(diverged)?;
        let value = l.item()?;
        let g = params.from_vars(&grad(&l, &leaves, false).map_err(|e| diverged(e.into()))?)?;
        if self.cfg.momentum > 0.0 {
            let v = match self.velocity.take() {
                Some(mut v) => {
                    let mut scaled = v.scaled(self.cfg.momentum);
                    scaled.axpy(1.0, &g)?;
                    v = scaled;
                    v
                }
                None => g,
            };
            params.axpy(-self.cfg.lr, &v)?;
            self.velocity = Some(v);
        } else {
            params.axpy(-self.cfg.lr, &g)?;
        }
        if !params.is_finite() {
            return Err(Error::Divergence {
                iteration: it,
                source: TensorError::NonFinite("sgd update"),
            });
        }
        self.iteration += 1;
        Ok(value)
    }

    /// `iterations` steps; returns the per-iteration batch losses.
    pub fn run(
        &mut self,
        arch: &Architecture,
        params: &mut ParamSet,
        x: &Tensor,
        labels: &[usize],
        iterations: usize,
    ) -> Result<Vec<f64>> {
        (0..iterations)
            .map(|_| self.step(arch, params, x, labels))
            .collect()
    }
}

/// The training operator: `cfg.iterations` SGD steps from `params0` on
/// `(x, labels)`.
pub fn alg(
    arch: &Architecture,
    x: &Tensor,
    labels: &[usize],
    params0: &ParamSet,
    cfg: &TrainConfig,
) -> Result<ParamSet> {
    Ok(alg_logged(arch, x, labels, params0, cfg)?.0)
}

/// [`alg`] plus the per-iteration loss log.
pub fn alg_logged(
    arch: &Architecture,
    x: &Tensor,
    labels: &[usize],
    params0: &ParamSet,
    cfg: &TrainConfig,
) -> Result<(ParamSet, Vec<f64>)> {
    if labels.is_empty() {
        return Err(invalid("training on an empty dataset"));
    }
    check_params(arch, params0)?;
    let mut params = params0.clone();
    let log = Trainer::new(cfg)?.run(arch, &mut params, x, labels, cfg.iterations)?;
    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_layout() {
        let arch = Architecture::mlp(4, &[6], 3);
        let names: Vec<_> = arch.layer_specs().into_iter().map(|s| s.name).collect();
        assert_eq!(names, ["fc0.weight", "fc0.bias", "out.weight", "out.bias"]);
        assert_eq!(arch.num_params(), 4 * 6 + 6 + 6 * 3 + 3);
        assert_eq!(arch.id(), "mlp-4-6-3-tanh");

        let conv = Architecture::convnet_mini([1, 8, 8], &[4, 6], 10);
        let shapes: Vec<_> = conv.layer_specs().into_iter().map(|s| s.shape).collect();
        assert_eq!(shapes, vec![vec![9, 4], vec![4], vec![36, 6], vec![6], vec![24, 10], vec![10]]);
    }

    #[test]
    fn invalid_architectures() {
        assert!(Architecture::mlp(4, &[0], 3).validate().is_err());
        assert!(Architecture::mlp(4, &[], 1).validate().is_err());
        assert!(Architecture::convnet_mini([1, 3, 3], &[4, 4], 2).validate().is_err());
    }

    #[test]
    fn conv_of_constant_image_matches_hand_computation() {
        // one 1x2x2 image of ones, one conv block with a single all-ones
        // kernel: each output sees the 4 pixels -> 4 + bias, pooled to one
        let arch = Architecture::ConvnetMini {
            channels: 1,
            height: 2,
            width: 2,
            conv_channels: vec![1],
            classes: 2,
            activation: Activation::Relu,
        };
        let params = vec![
            Var::constant(Tensor::full(&[9, 1], 1.0).unwrap()),
            Var::constant(Tensor::vector(vec![0.5]).unwrap()),
            Var::constant(Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap()),
            Var::constant(Tensor::vector(vec![0.0, 0.0]).unwrap()),
        ];
        let x = Var::constant(Tensor::full(&[1, 4], 1.0).unwrap());
        let z = arch.forward(&params, &x).unwrap();
        assert_eq!(z.value().data(), &[4.5, -4.5]);
    }

    #[test]
    fn zero_budget_returns_params0() {
        let arch = Architecture::mlp(2, &[3], 2);
        let p0 = init_params(&arch, InitSpec { seed: 1 }).unwrap();
        let x = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let cfg = TrainConfig {
            lr: 0.1,
            momentum: 0.0,
            batch_size: 8,
            iterations: 0,
            seed: 0,
        };
        assert_eq!(alg(&arch, &x, &[0, 1], &p0, &cfg).unwrap(), p0);
    }

    #[test]
    fn divergence_reports_iteration() {
        let arch = Architecture::mlp(2, &[], 2);
        let p0 = init_params(&arch, InitSpec { seed: 1 }).unwrap();
        let x = Tensor::matrix(2, 2, vec![1e60; 4]).unwrap();
        let cfg = TrainConfig {
            lr: 1e308,
            momentum: 0.0,
            batch_size: 2,
            iterations: 10,
            seed: 0,
        };
        match alg(&arch, &x, &[0, 1], &p0, &cfg) {
            Err(Error::Divergence { iteration, .. }) => assert!(iteration < 10),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn invalid_train_config() {
        let cfg = TrainConfig {
            lr: 0.0,
            momentum: 0.0,
            batch_size: 1,
            iterations: 1,
            seed: 0,
        };
        assert!(Trainer::new(&cfg).is_err());
    }
}
