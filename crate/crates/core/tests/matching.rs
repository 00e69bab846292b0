use proptest::prelude::*;
use seqmatch_core::data::{gen_blobs, BlobSpec, DatasetSplit, LabeledDataset};
use seqmatch_core::matching::*;
use seqmatch_core::models::{batch_gradient, init_params, Architecture, InitSpec, TrainConfig};
use seqmatch_core::rng::rng_for;
use seqmatch_core::teacher::{train_teacher, BatchSpec, TeacherTrajectory};
use seqmatch_core::tensor::{grad_check, ParamSet, Tensor, Var};
use rand::Rng;

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = rng_for(seed, "test-matrix", 0);
    Tensor::from_fn(&[rows, cols], |_| rng.random_range(-1.0..1.0)).unwrap()
}

fn random_like(p: &ParamSet, seed: u64) -> ParamSet {
    let mut rng = rng_for(seed, "test-target", 0);
    let tensors = p
        .tensors()
        .map(|t| Tensor::from_fn(t.shape(), |_| rng.random_range(-1.0..1.0)).unwrap())
        .collect();
    p.with_tensors(tensors).unwrap()
}

/// Column-wise cosine distance written out directly.
fn direct_cosine(x: &[f64], y: &[f64], rows: usize, cols: usize) -> f64 {
    (0..cols)
        .map(|j| {
            let (mut dot, mut nx, mut ny) = (0.0, 0.0, 0.0);
            for i in 0..rows {
                let (a, b) = (x[i * cols + j], y[i * cols + j]);
                dot += a * b;
                nx += a * a;
                ny += b * b;
            }
            1.0 - dot / (nx.sqrt() * ny.sqrt())
        })
        .sum()
}

/// Summed-loss layer gradients of a tanh MLP d-h-c, by explicit backprop.
fn manual_gradients(p: &ParamSet, x: &[f64], y: &[usize], d: usize, h: usize, c: usize) -> [Vec<f64>; 4] {
    let (w1, b1, w2, b2) = (p.tensor(0).data(), p.tensor(1).data(), p.tensor(2).data(), p.tensor(3).data());
    let mut gw1 = vec![0.0; d * h];
    let mut gb1 = vec![0.0; h];
    let mut gw2 = vec![0.0; h * c];
    let mut gb2 = vec![0.0; c];
    for (n, &label) in y.iter().enumerate() {
        let xi = &x[n * d..(n + 1) * d];
        let hid: Vec<f64> = (0..h)
            .map(|j| ((0..d).map(|i| xi[i] * w1[i * h + j]).sum::<f64>() + b1[j]).tanh())
            .collect();
        let z: Vec<f64> = (0..c)
            .map(|k| (0..h).map(|j| hid[j] * w2[j * c + k]).sum::<f64>() + b2[k])
            .collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        let dz: Vec<f64> = (0..c).map(|k| e[k] / s - f64::from(u8::from(k == label))).collect();
        for j in 0..h {
            for k in 0..c {
                gw2[j * c + k] += hid[j] * dz[k];
            }
        }
        for k in 0..c {
            gb2[k] += dz[k];
        }
        let da: Vec<f64> = (0..h)
            .map(|j| (0..c).map(|k| dz[k] * w2[j * c + k]).sum::<f64>() * (1.0 - hid[j] * hid[j]))
            .collect();
        for i in 0..d {
            for j in 0..h {
                gw1[i * h + j] += xi[i] * da[j];
            }
        }
        for j in 0..h {
            gb1[j] += da[j];
        }
    }
    [gw1, gb1, gw2, gb2]
}

#[test]
fn cosine_examples() {
    let x = random_matrix(5, 3, 1);
    assert!(cosine_distance_value(&x, &x).unwrap().abs() < 1e-12);
    let e = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let f = Tensor::matrix(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    assert!((cosine_distance_value(&e, &f).unwrap() - 2.0).abs() < 1e-15);
    let y = random_matrix(5, 3, 2);
    let a = cosine_distance_value(&x, &y).unwrap();
    let b = cosine_distance_value(&x.map(|v| v * 3.7), &y).unwrap();
    assert!((a - b).abs() < 1e-12);
    assert!(cosine_distance_value(&x, &random_matrix(3, 5, 0)).is_err());
}

#[test]
fn cosine_matches_external_reference_value() {
    // computed independently in Python for these fixed matrices
    let x = Tensor::matrix(3, 2, vec![0.3, -1.2, 0.7, 0.4, -0.5, 0.9]).unwrap();
    let y = Tensor::matrix(3, 2, vec![1.1, 0.2, -0.3, 0.8, 0.6, -0.7]).unwrap();
    let d = cosine_distance_value(&x, &y).unwrap();
    assert!((d - 2.4808861150462054).abs() < 1e-12, "{d}");
}

#[test]
fn cosine_random_pairs_match_direct_formula() {
    for seed in 0..20 {
        let x = random_matrix(3, 2, 100 + seed);
        let y = random_matrix(3, 2, 200 + seed);
        let d = cosine_distance_value(&x, &y).unwrap();
        assert!((d - direct_cosine(x.data(), y.data(), 3, 2)).abs() < 1e-12);
    }
}

#[test]
fn zero_columns_stay_finite() {
    let x = Tensor::zeros(&[3, 2]).unwrap();
    let y = random_matrix(3, 2, 0);
    let d = cosine_distance_value(&x, &y).unwrap();
    assert_eq!(d, 2.0);
    let f = |v: &Var| cosine_distance(v, &Var::constant(y.clone())).map_err(|e| match e {
        seqmatch_core::Error::Tensor(t) => t,
        other => panic!("{other}"),
    });
    let xv = Var::leaf(x.clone());
    let out = f(&xv).unwrap();
    let g = seqmatch_core::tensor::grad(&out, &[xv], false).unwrap();
    assert!(g[0].value().is_finite());
}

fn arb_matrix() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<f64>)> {
    (1usize..6, 1usize..5).prop_flat_map(|(r, c)| {
        let nonzero = prop_oneof![-10.0..-0.01f64, 0.01..10.0f64];
        (
            Just(r),
            Just(c),
            prop::collection::vec(nonzero.clone(), r * c),
            prop::collection::vec(nonzero, r * c),
        )
    })
}

proptest! {
    #[test]
    fn cosine_properties((r, c, a, b) in arb_matrix(), scale in 0.001f64..1000.0) {
        let x = Tensor::matrix(r, c, a).unwrap();
        let y = Tensor::matrix(r, c, b).unwrap();
        let d = cosine_distance_value(&x, &y).unwrap();
        prop_assert!(d >= -1e-12);
        prop_assert!(d <= 2.0 * c as f64 + 1e-12);
        prop_assert!(cosine_distance_value(&x, &x).unwrap().abs() < 1e-12);
        let ds = cosine_distance_value(&x.map(|v| v * scale), &y).unwrap();
        prop_assert!((d - ds).abs() < 1e-10);
        for j in 0..c {
            let col = |t: &Tensor| Tensor::matrix(r, 1, (0..r).map(|i| t.data()[i * c + j]).collect()).unwrap();
            let dj = cosine_distance_value(&col(&x), &col(&y)).unwrap();
            prop_assert!((-1e-12..=2.0 + 1e-12).contains(&dj));
        }
    }
}

fn tiny() -> (Architecture, ParamSet, Tensor, Vec<usize>) {
    let arch = Architecture::mlp(4, &[6], 3);
    let p = init_params(&arch, InitSpec { seed: 3 }).unwrap();
    (arch, p, random_matrix(3, 4, 7), vec![0, 1, 2])
}

fn loss_value(arch: &Architecture, p: &ParamSet, x: &Tensor, y: &[usize], target: &ParamSet) -> f64 {
    matching_loss(arch, p, &Var::constant(x.clone()), y, target).unwrap().item().unwrap()
}

#[test]
fn own_gradient_target_gives_zero() {
    let (arch, p, x, y) = tiny();
    let g = batch_gradient(&arch, &p, &x, &y).unwrap();
    assert!(loss_value(&arch, &p, &x, &y, &g).abs() < 1e-12);
    assert!(loss_value(&arch, &p, &x, &y, &g.scaled(42.0)).abs() < 1e-12);
    assert!(loss_value(&arch, &p, &x, &y, &g.scaled(-1.0)) > 1.0);
}

#[test]
fn matching_loss_matches_two_pass_reimplementation() {
    let (arch, p, x, y) = tiny();
    for seed in 0..5 {
        let target = random_like(&p, seed);
        let grads = manual_gradients(&p, x.data(), &y, 4, 6, 3);
        let cols = [6, 1, 3, 1];
        let rows = [4, 6, 6, 3];
        let expected: f64 = (0..4)
            .map(|l| direct_cosine(&grads[l], target.tensor(l).data(), rows[l], cols[l]))
            .sum();
        let got = loss_value(&arch, &p, &x, &y, &target);
        assert!((got - expected).abs() < 1e-10, "{got} vs {expected}");
    }
}

fn fd_check(arch: &Architecture, p: &ParamSet, x: &Tensor, y: &[usize], target: &ParamSet) {
    let f = |v: &Var| {
        matching_loss(arch, p, v, y, target).map_err(|e| match e {
            seqmatch_core::Error::Tensor(t) => t,
            other => panic!("{other}"),
        })
    };
    let r = grad_check(&f, x, 1e-5, 1e-5).unwrap();
    assert!(r.passed, "{}: rel err {}", arch.id(), r.max_rel_err);
    let sg = synthetic_grad(arch, p, x, y, target, &vec![false; y.len()]).unwrap();
    for (a, b) in sg.data().iter().zip(r.tape.data()) {
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }
}

fn blob_split(dim: usize) -> DatasetSplit {
    gen_blobs(&BlobSpec {
        classes: 3,
        dim,
        per_class: 40,
        spread: 0.4,
        seed: 5,
    })
    .unwrap()
}

#[test]
fn synthetic_grad_matches_finite_differences_mlp() {
    let split = blob_split(4);
    let arch = Architecture::mlp(4, &[6], 3);
    let traj = train_teacher(&split, &arch, &TrainConfig { lr: 0.1, momentum: 0.0, batch_size: 32, iterations: 20, seed: 1 }, 4, 5).unwrap();
    let s = SyntheticDataset::init_from_real(&split.train, 2, 0).unwrap();
    let real = &split.train;
    for m in 0..4 {
        // teacher path: checkpoint θ_m with a real-batch target there
        let target = batch_gradient(&arch, &traj.checkpoints[m], real.instances(), real.labels()).unwrap();
        fd_check(&arch, &traj.checkpoints[m], s.instances(), s.labels(), &target);
    }
    // student path: θ trained on the synthetic rows
    let mut state = MatchState::new(traj.checkpoints[0].clone(), &BackboneConfig::default(), 3).unwrap();
    let mut s2 = s.clone();
    let cfg = BackboneConfig { pixel_lr: 0.0, ..BackboneConfig::default() };
    let view: Vec<usize> = (0..s2.len()).collect();
    backbone_step(&arch, real, &cfg, &mut state, &mut s2, &view, Anchor::Student).unwrap();
    let target = batch_gradient(&arch, &state.theta, real.instances(), real.labels()).unwrap();
    fd_check(&arch, &state.theta, s.instances(), s.labels(), &target);
}

#[test]
fn synthetic_grad_matches_finite_differences_convnet() {
    let arch = Architecture::convnet_mini([1, 6, 6], &[2], 3);
    for seed in 0..2 {
        let p = init_params(&arch, InitSpec { seed }).unwrap();
        let x = random_matrix(3, 36, 10 + seed);
        let real = random_matrix(9, 36, 20 + seed);
        let ry: Vec<usize> = (0..9).map(|i| i % 3).collect();
        let target = batch_gradient(&arch, &p, &real, &ry).unwrap();
        fd_check(&arch, &p, &x, &[0, 1, 2], &target);
        fd_check(&arch, &p, &x, &[0, 1, 2], &random_like(&p, seed));
    }
}

#[test]
fn frozen_rows_receive_zero_gradient() {
    let (arch, p, x, y) = tiny();
    let target = random_like(&p, 1);
    let all = synthetic_grad(&arch, &p, &x, &y, &target, &[true, true, true]).unwrap();
    assert!(all.data().iter().all(|&v| v == 0.0));
    let some = synthetic_grad(&arch, &p, &x, &y, &target, &[false, true, false]).unwrap();
    let free = synthetic_grad(&arch, &p, &x, &y, &target, &[false, false, false]).unwrap();
    assert!(some.data()[4..8].iter().all(|&v| v == 0.0));
    assert_eq!(some.data()[..4], free.data()[..4]);
    assert_eq!(some.data()[8..], free.data()[8..]);
}

#[test]
fn duplicated_rows_get_identical_gradients() {
    let (arch, p, x, _) = tiny();
    let mut rows = x.data()[..4].to_vec();
    rows.extend_from_slice(&x.data()[..4]);
    rows.extend_from_slice(&x.data()[4..8]);
    let xd = Tensor::matrix(3, 4, rows).unwrap();
    let g = synthetic_grad(&arch, &p, &xd, &[1, 1, 2], &random_like(&p, 2), &[false; 3]).unwrap();
    assert_eq!(g.data()[..4], g.data()[4..8]);
}

#[test]
fn argmin_step_is_negligible() {
    let (arch, p, x, y) = tiny();
    let own = batch_gradient(&arch, &p, &x, &y).unwrap();
    let g = synthetic_grad(&arch, &p, &x, &y, &own, &[false; 3]).unwrap();
    let norm = g.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm <= 1e-8, "step norm {norm}");
}

fn teacher_setup(seed: u64) -> (Architecture, DatasetSplit, TeacherTrajectory) {
    let split = blob_split(8);
    let arch = Architecture::mlp(8, &[16], 3);
    let cfg = TrainConfig { lr: 0.1, momentum: 0.0, batch_size: 32, iterations: 50, seed };
    let traj = train_teacher(&split, &arch, &cfg, 10, 5).unwrap();
    (arch, split, traj)
}

fn teacher_cfg(pixel_lr: f64) -> BackboneConfig {
    BackboneConfig {
        mode: MatchMode::TeacherPath,
        granularity: MatchGranularity::PerClass,
        pixel_lr,
        target_batch: BatchSpec::Full,
        ..BackboneConfig::default()
    }
}

fn segment_loss(arch: &Architecture, real: &LabeledDataset, cfg: &BackboneConfig, traj: &TeacherTrajectory, s: &SyntheticDataset) -> f64 {
    let view: Vec<usize> = (0..s.len()).collect();
    (0..traj.steps())
        .map(|m| view_matching_loss(arch, real, cfg, &traj.checkpoints[m], s, &view, 0, 0).unwrap())
        .sum::<f64>()
        / traj.steps() as f64
}

#[test]
fn zero_pixel_lr_leaves_instances_unchanged() {
    let (arch, split, traj) = teacher_setup(0);
    let s0 = SyntheticDataset::init_from_real(&split.train, 3, 0).unwrap();
    let mut s = s0.clone();
    let cfg = teacher_cfg(0.0);
    let mut state = MatchState::new(traj.checkpoints[0].clone(), &cfg, 0).unwrap();
    let view: Vec<usize> = (0..s.len()).collect();
    for m in 0..10 {
        backbone_step(&arch, &split.train, &cfg, &mut state, &mut s, &view, Anchor::Teacher { traj: &traj, m }).unwrap();
    }
    assert_eq!(s, s0);
}

#[test]
fn teacher_path_halves_matching_loss() {
    let mut ratios: Vec<f64> = (0..5)
        .map(|seed| {
            let (arch, split, traj) = teacher_setup(seed);
            let cfg = teacher_cfg(0.1);
            let mut s = SyntheticDataset::init_from_real(&split.train, 3, seed).unwrap();
            let before = segment_loss(&arch, &split.train, &cfg, &traj, &s);
            let mut state = MatchState::new(traj.checkpoints[0].clone(), &cfg, seed).unwrap();
            let mut rng = rng_for(seed, "test-steps", 0);
            let view: Vec<usize> = (0..s.len()).collect();
            for _ in 0..200 {
                let m = rng.random_range(0..traj.steps());
                backbone_step(&arch, &split.train, &cfg, &mut state, &mut s, &view, Anchor::Teacher { traj: &traj, m }).unwrap();
            }
            segment_loss(&arch, &split.train, &cfg, &traj, &s) / before
        })
        .collect();
    ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert!(ratios[2] <= 0.5, "loss ratios {ratios:?}");
}

#[test]
fn frozen_subset_bytes_never_change() {
    let split = blob_split(4);
    let arch = Architecture::mlp(4, &[6], 3);
    let mut s = SyntheticDataset::init_from_real(&split.train, 4, 0).unwrap();
    let map: Vec<usize> = (0..s.len()).map(|i| usize::from(i % 4 >= 2)).collect();
    s.set_partition(map, 2).unwrap();
    s.freeze(0);
    let before = s.subset_bytes(0);
    let labels = s.labels().to_vec();
    let cfg = BackboneConfig { pixel_lr: 0.5, ..BackboneConfig::default() };
    let mut state = MatchState::new(init_params(&arch, InitSpec { seed: 0 }).unwrap(), &cfg, 0).unwrap();
    let view: Vec<usize> = (0..s.len()).collect();
    let moved = s.subset_bytes(1);
    for _ in 0..25 {
        backbone_step(&arch, &split.train, &cfg, &mut state, &mut s, &view, Anchor::Student).unwrap();
    }
    assert_eq!(s.subset_bytes(0), before);
    assert_ne!(s.subset_bytes(1), moved);
    assert_eq!(s.labels(), labels.as_slice());
}

#[test]
fn mode_mismatch_rejected() {
    let (arch, split, traj) = teacher_setup(0);
    let mut s = SyntheticDataset::init_from_real(&split.train, 2, 0).unwrap();
    let view: Vec<usize> = (0..s.len()).collect();
    let cfg = teacher_cfg(0.1);
    let mut state = MatchState::new(traj.checkpoints[0].clone(), &cfg, 0).unwrap();
    assert!(backbone_step(&arch, &split.train, &cfg, &mut state, &mut s, &view, Anchor::Student).is_err());
    assert!(backbone_step(&arch, &split.train, &cfg, &mut state, &mut s, &view, Anchor::Teacher { traj: &traj, m: 10 }).is_err());
}

#[test]
fn synthetic_set_invariants() {
    let split = blob_split(4);
    let s = SyntheticDataset::init_from_real(&split.train, 5, 2).unwrap();
    assert_eq!(s.len(), 15);
    for (i, &y) in s.labels().iter().enumerate() {
        assert_eq!(y, i / 5);
        assert_eq!(split.train.labels()[s.provenance()[i]], y);
    }
    let mut dedup = s.provenance().to_vec();
    dedup.sort_unstable();
    dedup.dedup();
    assert_eq!(dedup.len(), 15);
    assert!(SyntheticDataset::init_from_real(&split.train, 1000, 0).is_err());
    let mut s2 = s.clone();
    assert!(s2.set_partition(vec![0; 15], 2).is_err());
}

#[test]
fn synthetic_store_round_trip() {
    let split = blob_split(4);
    let mut s = SyntheticDataset::init_from_real(&split.train, 4, 2).unwrap();
    s.set_partition((0..s.len()).map(|i| (i % 4) / 2).collect(), 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("syn.sqds");
    save_synthetic(&path, &s, &[[0, 5], [5, 10]], serde_json::json!({"note": 1})).unwrap();
    let (back, manifest) = load_synthetic(&path).unwrap();
    assert_eq!(back.instances(), s.instances());
    assert_eq!(back.labels(), s.labels());
    assert_eq!(back.subset_ids(), s.subset_ids());
    assert_eq!(back.provenance(), s.provenance());
    assert_eq!(manifest.k, 2);
    assert_eq!(manifest.segments, vec![[0, 5], [5, 10]]);
}
