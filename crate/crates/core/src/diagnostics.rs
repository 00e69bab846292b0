//! Analysis instruments: amplification norms and the S+/S- coupling sweep,
//! per-instance loss trajectories with 2-means easy/hard clustering, and CSV
//! exports.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use seqmatch_tensor::{grad, ParamSet, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{invalid, Error, Result};
use crate::models::{init_params, per_instance_losses, Architecture, InitSpec, TrainConfig, Trainer};
use crate::rng::{derive_seed, rng_for};
use crate::seqmatch::{eval_stages, split_budget, EvalConfig, Stage};

/// `grad` that treats inputs the output does not depend on as having zero
/// gradient.
fn grad_total(output: &Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>> {
    let mut anchored = output.clone();
    for w in wrt {
        anchored = anchored.add(&w.sum()?.scale(0.0)?)?;
    }
    Ok(grad(&anchored, wrt, create_graph)?)
}

/// Entrywise l1 norm of `R = d(grad_theta loss)/ds`, the `P x d` Jacobian of
/// the parameter gradient of a scalar per-instance loss with respect to the
/// instance. Uses `d` reverse passes when `d <= P`, otherwise `P`.
pub fn amplification_norm_fn(
    loss: &dyn Fn(&[Var], &Var) -> Result<Var>,
    theta: &[Tensor],
    s: &Tensor,
) -> Result<f64> {
    let params: Vec<Var> = theta.iter().map(|t| Var::leaf(t.clone())).collect();
    let x = Var::leaf(s.clone());
    let l = loss(&params, &x)?;
    let d = s.numel();
    let p: usize = theta.iter().map(Tensor::numel).sum();
    let mut total = 0.0;
    if d <= p {
        // column j: grad_theta of dl/ds_j
        let gs = grad_total(&l, std::slice::from_ref(&x), true)?.remove(0);
        for j in 0..d {
            let e = Tensor::from_fn(s.shape(), |i| if i == j { 1.0 } else { 0.0 })?;
            let gj = gs.mul(&Var::constant(e))?.sum()?;
            for g in grad_total(&gj, &params, false)? {
                total += g.value().norm_l1();
            }
        }
    } else {
        let gt = grad_total(&l, &params, true)?;
        for (layer, g) in gt.iter().zip(theta) {
            for j in 0..g.numel() {
                let e = Tensor::from_fn(layer.shape(), |i| if i == j { 1.0 } else { 0.0 })?;
                let gj = layer.mul(&Var::constant(e))?.sum()?;
                total += grad_total(&gj, std::slice::from_ref(&x), false)?[0].value().norm_l1();
            }
        }
    }
    Ok(total)
}

/// ‖R(s, f_θ)‖₁ for the network's cross-entropy on one labeled instance.
pub fn amplification_norm(arch: &Architecture, params: &ParamSet, s: &[f64], label: usize) -> Result<f64> {
    if s.len() != arch.input_dim() {
        return Err(invalid(format!(
            "instance has {} features, {} expects {}",
            s.len(),
            arch.id(),
            arch.input_dim()
        )));
    }
    if label >= arch.classes() {
        return Err(invalid(format!("label {label} out of range")));
    }
    let theta: Vec<Tensor> = params.tensors().cloned().collect();
    let f = |p: &[Var], x: &Var| -> Result<Var> {
        let x = x.reshape(&[1, s.len()])?;
        Ok(arch.forward(p, &x)?.cross_entropy(&[label], false)?)
    };
    amplification_norm_fn(&f, &theta, &Tensor::vector(s.to_vec())?)
}

/// Number of θ_0 draws the instance norms are averaged over.
pub const AMPLIFICATION_DRAWS: usize = 4;

/// Per-instance ‖R‖₁ averaged over [`AMPLIFICATION_DRAWS`] draws of θ_0.
pub fn mean_amplification_norms(
    arch: &Architecture,
    x: &Tensor,
    labels: &[usize],
    seed: u64,
) -> Result<Vec<f64>> {
    let thetas = (0..AMPLIFICATION_DRAWS)
        .map(|j| {
            init_params(
                arch,
                InitSpec {
                    seed: derive_seed(seed, "amplification-theta0", j as u64),
                },
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let d = x.dims2()?.1;
    (0..labels.len())
        .into_par_iter()
        .map(|i| {
            let row = &x.data()[i * d..(i + 1) * d];
            let mut acc = 0.0;
            for t in &thetas {
                acc += amplification_norm(arch, t, row, labels[i])?;
            }
            Ok(acc / thetas.len() as f64)
        })
        .collect()
}

/// Indices sorted by descending norm; equal norms keep ascending index order.
fn rank_desc(norms: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..norms.len()).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    order
}

/// `(S+, S-)`: the top and bottom halves by norm. With an odd count the
/// median-ranked instance is dropped. Ties are broken by instance index, the
/// lower index ranking higher.
pub fn split_by_amplification(norms: &[f64]) -> Result<(Vec<usize>, Vec<usize>)> {
    if norms.len() < 2 {
        return Err(invalid("need at least two instances to split"));
    }
    let order = rank_desc(norms);
    let half = norms.len() / 2;
    let plus = order[..half].to_vec();
    let minus = order[norms.len() - half..].to_vec();
    Ok((plus, minus))
}

/// Top and bottom `fraction` of the instances by norm (at least one each).
pub fn quantile_split(norms: &[f64], fraction: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction <= 0.5) {
        return Err(invalid(format!("split fraction {fraction} outside (0, 0.5]")));
    }
    if norms.len() < 2 {
        return Err(invalid("need at least two instances to split"));
    }
    let order = rank_desc(norms);
    let take = ((fraction * norms.len() as f64).round() as usize).clamp(1, norms.len() / 2);
    Ok((order[..take].to_vec(), order[norms.len() - take..].to_vec()))
}

/// Spearman rank correlation (average ranks for ties). `None` when either
/// side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let ranks = |v: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    };
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingSplit {
    pub split_id: usize,
    pub fraction: f64,
    pub plus: Vec<usize>,
    pub minus: Vec<usize>,
    /// E_{S+}‖R‖₁ − E_{S−}‖R‖₁.
    pub norm_diff: f64,
    /// acc(S+) − acc(S−) for every evaluation seed.
    pub discrepancies: Vec<f64>,
    pub discrepancy_mean: f64,
    pub discrepancy_std: f64,
    /// ‖ε‖₂ with ε = g − ∇_θ L_{S+}, when a target gradient was supplied.
    pub epsilon_norm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingReport {
    pub norms: Vec<f64>,
    pub splits: Vec<CouplingSplit>,
    /// Spearman ρ between `norm_diff` and `discrepancy_mean` across splits.
    pub spearman: Option<f64>,
    pub seeds: usize,
}

impl CouplingReport {
    pub fn mean_discrepancy(&self) -> f64 {
        self.splits.iter().map(|s| s.discrepancy_mean).sum::<f64>() / self.splits.len() as f64
    }
}

/// Default split fractions: top/bottom 10%, 20%, ..., 50%.
pub const COUPLING_FRACTIONS: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

/// For every fraction p, trains `eval.seeds` networks on the top-p and on
/// the bottom-p instances by ‖R‖₁ (same seeds for both sides) and records the
/// accuracy discrepancy against the mean norm difference.
///
/// `epsilon_target`, when given as `(θ, g)`, adds ‖g − ∇_θ L_{S+}‖₂ per split.
pub fn coupling_experiment(
    arch: &Architecture,
    x: &Tensor,
    labels: &[usize],
    eval: &EvalConfig,
    test: &LabeledDataset,
    fractions: &[f64],
    norm_seed: u64,
    epsilon_target: Option<(&ParamSet, &ParamSet)>,
) -> Result<CouplingReport> {
    if fractions.is_empty() {
        return Err(invalid("coupling experiment needs at least one split"));
    }
    let norms = mean_amplification_norms(arch, x, labels, norm_seed)?;
    let mut splits = Vec::with_capacity(fractions.len());
    for (split_id, &fraction) in fractions.iter().enumerate() {
        let (plus, minus) = quantile_split(&norms, fraction)?;
        let mean_of = |idx: &[usize]| idx.iter().map(|&i| norms[i]).sum::<f64>() / idx.len() as f64;
        let stage = |idx: &[usize]| -> Result<Stage> {
            Ok((x.select_rows(idx)?, idx.iter().map(|&i| labels[i]).collect()))
        };
        let acc_plus = eval_stages(arch, &[stage(&plus)?], eval, test)?;
        let acc_minus = eval_stages(arch, &[stage(&minus)?], eval, test)?;
        let discrepancies: Vec<f64> = acc_plus
            .accuracies
            .iter()
            .zip(&acc_minus.accuracies)
            .map(|(a, b)| a - b)
            .collect();
        let n = discrepancies.len() as f64;
        let mean = discrepancies.iter().sum::<f64>() / n;
        let std = (discrepancies.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n).sqrt();
        let epsilon_norm = match epsilon_target {
            Some((theta, g)) => {
                let (xp, yp) = stage(&plus)?;
                let gp = crate::models::batch_gradient(arch, theta, &xp, &yp)?;
                let mut eps = g.clone();
                eps.axpy(-1.0, &gp)?;
                Some(eps.norm_l2())
            }
            None => None,
        };
        splits.push(CouplingSplit {
            split_id,
            fraction,
            norm_diff: mean_of(&plus) - mean_of(&minus),
            plus,
            minus,
            discrepancies,
            discrepancy_mean: mean,
            discrepancy_std: std,
            epsilon_norm,
        });
    }
    let nd: Vec<f64> = splits.iter().map(|s| s.norm_diff).collect();
    let dm: Vec<f64> = splits.iter().map(|s| s.discrepancy_mean).collect();
    Ok(CouplingReport {
        spearman: spearman(&nd, &dm),
        norms,
        splits,
        seeds: eval.seeds,
    })
}

/// Per-instance losses of real instances (rows) at successive epochs
/// (columns).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTrajectoryMatrix {
    pub rows: usize,
    pub epochs: usize,
    /// Row-major `[rows, epochs]`.
    pub values: Vec<f64>,
}

impl LossTrajectoryMatrix {
    pub fn new(rows: usize, epochs: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || epochs == 0 || values.len() != rows * epochs {
            return Err(invalid("loss matrix needs rows x epochs values"));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid("loss matrix entries must be finite and >= 0"));
        }
        Ok(Self { rows, epochs, values })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.epochs..(i + 1) * self.epochs]
    }

    pub fn column_means(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.epochs];
        for i in 0..self.rows {
            for (acc, v) in m.iter_mut().zip(self.row(i)) {
                *acc += v;
            }
        }
        m.iter().map(|v| v / self.rows as f64).collect()
    }
}

/// Synthetic-training iterations between two loss evaluations.
pub const ITERATIONS_PER_EPOCH: usize = 20;

/// Column 0 is the untrained network; every further column follows
/// [`ITERATIONS_PER_EPOCH`] more SGD iterations on the stages, taken in order
/// with the total budget split proportionally to stage sizes.
pub fn track_instance_losses(
    arch: &Architecture,
    stages: &[Stage],
    real: &LabeledDataset,
    epochs: usize,
    train: &TrainConfig,
    init: InitSpec,
) -> Result<LossTrajectoryMatrix> {
    if epochs == 0 {
        return Err(invalid("loss tracking needs at least one epoch"));
    }
    if stages.is_empty() || stages.iter().any(|(_, y)| y.is_empty()) {
        return Err(invalid("loss tracking needs nonempty training stages"));
    }
    let total = (epochs - 1) * ITERATIONS_PER_EPOCH;
    let sizes: Vec<usize> = stages.iter().map(|(_, y)| y.len()).collect();
    let plan: Vec<usize> = split_budget(total, &sizes)
        .into_iter()
        .enumerate()
        .flat_map(|(k, n)| std::iter::repeat_n(k, n))
        .collect();
    let mut params = init_params(arch, init)?;
    let mut trainer = Trainer::new(train)?;
    let mut columns = Vec::with_capacity(epochs);
    columns.push(per_instance_losses(arch, &params, real.instances(), real.labels())?);
    for chunk in plan.chunks(ITERATIONS_PER_EPOCH) {
        for &k in chunk {
            let (x, y) = &stages[k];
            trainer.step(arch, &mut params, x, y)?;
        }
        columns.push(per_instance_losses(arch, &params, real.instances(), real.labels())?);
    }
    let rows = real.len();
    let mut values = Vec::with_capacity(rows * epochs);
    for i in 0..rows {
        values.extend(columns.iter().map(|c| c[i]));
    }
    LossTrajectoryMatrix::new(rows, epochs, values)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EasyHard {
    pub easy: Vec<usize>,
    pub hard: Vec<usize>,
    pub easy_fraction: f64,
    pub hard_fraction: f64,
    /// All rows identical: everything is reported easy and nothing is split.
    pub degenerate: bool,
    /// Within-cluster sum of squared distances.
    pub sse: f64,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Lloyd iterations for 2 clusters from the given centroids. Returns the
/// assignment (0/1 per row), final centroids and SSE.
pub fn lloyd2(m: &LossTrajectoryMatrix, mut c: [Vec<f64>; 2], max_iter: usize) -> (Vec<usize>, [Vec<f64>; 2], f64) {
    let assign = |c: &[Vec<f64>; 2]| -> Vec<usize> {
        (0..m.rows)
            .map(|i| usize::from(dist2(m.row(i), &c[1]) < dist2(m.row(i), &c[0])))
            .collect()
    };
    let mut a = assign(&c);
    for _ in 0..max_iter {
        for (k, ck) in c.iter_mut().enumerate() {
            let members: Vec<usize> = (0..m.rows).filter(|&i| a[i] == k).collect();
            if members.is_empty() {
                continue;
            }
            let mut mean = vec![0.0; m.epochs];
            for &i in &members {
                for (acc, v) in mean.iter_mut().zip(m.row(i)) {
                    *acc += v;
                }
            }
            for v in &mut mean {
                *v /= members.len() as f64;
            }
            *ck = mean;
        }
        let next = assign(&c);
        if next == a {
            break;
        }
        a = next;
    }
    let sse = (0..m.rows).map(|i| dist2(m.row(i), &c[a[i]])).sum();
    (a, c, sse)
}

/// Extra fixed-seed Lloyd starts tried after the extreme-mean start.
pub const KMEANS_RESTARTS: usize = 100;

/// 2-means on loss-trajectory rows. Lloyd starts at the rows with the lowest
/// and highest mean loss, then from [`KMEANS_RESTARTS`] fixed-seed row pairs;
/// the lowest-SSE run wins (the first start on ties). The cluster with lower
/// mean loss is "easy".
pub fn cluster_easy_hard(m: &LossTrajectoryMatrix) -> Result<EasyHard> {
    if m.rows < 2 {
        return Err(invalid("clustering needs at least two rows"));
    }
    let means: Vec<f64> = (0..m.rows).map(|i| m.row(i).iter().sum::<f64>() / m.epochs as f64).collect();
    let lo = (0..m.rows).min_by(|&a, &b| means[a].total_cmp(&means[b])).unwrap();
    let hi = (0..m.rows).max_by(|&a, &b| means[a].total_cmp(&means[b]).then(b.cmp(&a))).unwrap();
    // equal means do not imply equal rows; fall back to the row farthest from
    // the low-mean row
    let hi = if m.row(hi) == m.row(lo) {
        (0..m.rows)
            .max_by(|&a, &b| dist2(m.row(a), m.row(lo)).total_cmp(&dist2(m.row(b), m.row(lo))).then(b.cmp(&a)))
            .unwrap()
    } else {
        hi
    };
    if m.row(hi) == m.row(lo) {
        return Ok(EasyHard {
            easy: (0..m.rows).collect(),
            hard: Vec::new(),
            easy_fraction: 1.0,
            hard_fraction: 0.0,
            degenerate: true,
            sse: 0.0,
        });
    }
    let mut best = lloyd2(m, [m.row(lo).to_vec(), m.row(hi).to_vec()], 1000);
    let mut rng = rng_for(0, "kmeans-restart", m.rows as u64);
    for _ in 0..KMEANS_RESTARTS {
        let i = rng.random_range(0..m.rows);
        let j = rng.random_range(0..m.rows);
        if m.row(i) == m.row(j) {
            continue;
        }
        let run = lloyd2(m, [m.row(i).to_vec(), m.row(j).to_vec()], 1000);
        if run.2 < best.2 - 1e-12 {
            best = run;
        }
    }
    let (a, c, sse) = best;
    let mean_c = |k: usize| c[k].iter().sum::<f64>() / m.epochs as f64;
    let easy_k = if mean_c(0) <= mean_c(1) { 0 } else { 1 };
    let easy: Vec<usize> = (0..m.rows).filter(|&i| a[i] == easy_k).collect();
    let hard: Vec<usize> = (0..m.rows).filter(|&i| a[i] != easy_k).collect();
    Ok(EasyHard {
        easy_fraction: easy.len() as f64 / m.rows as f64,
        hard_fraction: hard.len() as f64 / m.rows as f64,
        easy,
        hard,
        degenerate: false,
        sse,
    })
}

/// Per-epoch mean loss of the easy and hard groups. An empty group has no
/// curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupCurves {
    pub easy: Option<Vec<f64>>,
    pub hard: Option<Vec<f64>>,
}

pub fn loss_drop_summary(m: &LossTrajectoryMatrix, easy: &[usize], hard: &[usize]) -> Result<GroupCurves> {
    let mut seen = vec![false; m.rows];
    for &i in easy.iter().chain(hard) {
        if i >= m.rows || std::mem::replace(&mut seen[i], true) {
            return Err(invalid("easy and hard groups must partition the rows"));
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(invalid("easy and hard groups must cover every row"));
    }
    let curve = |g: &[usize]| -> Option<Vec<f64>> {
        if g.is_empty() {
            return None;
        }
        let mut acc = vec![0.0; m.epochs];
        for &i in g {
            for (a, v) in acc.iter_mut().zip(m.row(i)) {
                *a += v;
            }
        }
        Some(acc.into_iter().map(|v| v / g.len() as f64).collect())
    };
    Ok(GroupCurves {
        easy: curve(easy),
        hard: curve(hard),
    })
}

/// Mean loss over the listed rows in the last column.
pub fn final_group_mean(m: &LossTrajectoryMatrix, rows: &[usize]) -> f64 {
    rows.iter().map(|&i| m.row(i)[m.epochs - 1]).sum::<f64>() / rows.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub instance_id: usize,
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub epoch: usize,
    pub easy_mean: Option<f64>,
    pub hard_mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingRecord {
    pub split_id: usize,
    pub norm_diff: f64,
    pub discrepancy_mean: f64,
    pub discrepancy_std: f64,
}

fn write_csv<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    crate::store::write_atomic(path, &bytes)
}

pub fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|rec| rec.map_err(Error::from)).collect()
}

/// `instance_id,epoch,loss`
pub fn export_loss_matrix(path: &Path, m: &LossTrajectoryMatrix) -> Result<()> {
    write_csv(
        path,
        (0..m.rows).flat_map(|i| {
            (0..m.epochs).map(move |e| LossRecord {
                instance_id: i,
                epoch: e,
                loss: m.values[i * m.epochs + e],
            })
        }),
    )
}

pub fn import_loss_matrix(path: &Path) -> Result<LossTrajectoryMatrix> {
    let recs: Vec<LossRecord> = read_csv(path)?;
    let rows = recs.iter().map(|r| r.instance_id + 1).max().unwrap_or(0);
    let epochs = recs.iter().map(|r| r.epoch + 1).max().unwrap_or(0);
    if recs.len() != rows * epochs {
        return Err(Error::Format("loss CSV does not fill a rows x epochs grid".into()));
    }
    let mut values = vec![f64::NAN; rows * epochs];
    for r in recs {
        values[r.instance_id * epochs + r.epoch] = r.loss;
    }
    LossTrajectoryMatrix::new(rows, epochs, values)
}

/// `epoch,easy_mean,hard_mean`; a missing group leaves its column empty.
pub fn export_curves(path: &Path, c: &GroupCurves) -> Result<()> {
    let n = c.easy.as_ref().or(c.hard.as_ref()).map_or(0, Vec::len);
    write_csv(
        path,
        (0..n).map(|e| CurveRecord {
            epoch: e,
            easy_mean: c.easy.as_ref().map(|v| v[e]),
            hard_mean: c.hard.as_ref().map(|v| v[e]),
        }),
    )
}

/// `split_id,norm_diff,discrepancy_mean,discrepancy_std`
pub fn export_coupling(path: &Path, r: &CouplingReport) -> Result<()> {
    write_csv(
        path,
        r.splits.iter().map(|s| CouplingRecord {
            split_id: s.split_id,
            norm_diff: s.norm_diff,
            discrepancy_mean: s.discrepancy_mean,
            discrepancy_std: s.discrepancy_std,
        }),
    )
}
