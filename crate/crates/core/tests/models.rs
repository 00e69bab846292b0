use rand::Rng;
use seqmatch_core::data::{gen_blobs, BlobSpec};
use seqmatch_core::models::*;
use seqmatch_core::rng::rng_for;
use seqmatch_core::tensor::{grad, grad_check, ParamSet, Tensor, Var};

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = rng_for(seed, "test-matrix", 0);
    Tensor::from_fn(&[rows, cols], |_| rng.random_range(-1.0..1.0)).unwrap()
}

/// Softmax cross-entropy of one row computed directly from its definition.
fn softmax_ce(row: &[f64], label: usize) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
    -(row[label] - m - z.ln())
}

/// Hand-rolled forward pass of a one-hidden-layer tanh MLP.
fn mlp_logits(p: &ParamSet, x: &[f64], d: usize, h: usize, c: usize) -> Vec<f64> {
    let (w1, b1, w2, b2) = (p.tensor(0).data(), p.tensor(1).data(), p.tensor(2).data(), p.tensor(3).data());
    let hid: Vec<f64> = (0..h)
        .map(|j| ((0..d).map(|i| x[i] * w1[i * h + j]).sum::<f64>() + b1[j]).tanh())
        .collect();
    (0..c)
        .map(|k| (0..h).map(|j| hid[j] * w2[j * c + k]).sum::<f64>() + b2[k])
        .collect()
}

#[test]
fn init_is_deterministic_per_seed() {
    let arch = Architecture::mlp(5, &[7], 3);
    let a = init_params(&arch, InitSpec { seed: 11 }).unwrap();
    let b = init_params(&arch, InitSpec { seed: 11 }).unwrap();
    let c = init_params(&arch, InitSpec { seed: 12 }).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn init_first_layer_mean_is_centered() {
    // 10k draws of the first-layer weights: |mean| < 3 sigma / sqrt(n)
    let arch = Architecture::mlp(4, &[5], 2);
    let fan_in = 4.0f64;
    let sigma = 1.0 / (3.0 * fan_in).sqrt();
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut sq = 0.0;
    for seed in 0..500 {
        let p = init_params(&arch, InitSpec { seed }).unwrap();
        for &w in p.tensor(0).data() {
            sum += w;
            sq += w * w;
            count += 1;
        }
    }
    assert_eq!(count, 10_000);
    let mean = sum / count as f64;
    assert!(mean.abs() < 3.0 * sigma / (count as f64).sqrt(), "mean {mean}");
    let sd = (sq / count as f64 - mean * mean).sqrt();
    assert!((sd - sigma).abs() < 0.02 * sigma, "sd {sd} vs {sigma}");
}

#[test]
fn uniform_logits_give_ln_c() {
    let arch = Architecture::mlp(3, &[], 10);
    let zero = ParamSet::new(vec![
        ("out.weight".into(), Tensor::zeros(&[3, 10]).unwrap()),
        ("out.bias".into(), Tensor::zeros(&[10]).unwrap()),
    ]);
    let x = random_matrix(4, 3, 1);
    let l = mean_loss(&arch, &zero, &x, &[0, 3, 9, 2]).unwrap();
    assert!((l - 10f64.ln()).abs() < 1e-12);
}

#[test]
fn duplicated_batch_has_identical_mean_loss() {
    let arch = Architecture::mlp(3, &[4], 2);
    let p = init_params(&arch, InitSpec { seed: 2 }).unwrap();
    let x = random_matrix(3, 3, 2);
    let y = [0, 1, 1];
    let mut twice = x.data().to_vec();
    twice.extend_from_slice(x.data());
    let x2 = Tensor::matrix(6, 3, twice).unwrap();
    let a = mean_loss(&arch, &p, &x, &y).unwrap();
    let b = mean_loss(&arch, &p, &x2, &[0, 1, 1, 0, 1, 1]).unwrap();
    assert!((a - b).abs() < 1e-15);
}

#[test]
fn loss_matches_hand_rolled_softmax_ce() {
    let (d, h, c) = (3, 5, 4);
    let arch = Architecture::mlp(d, &[h], c);
    let p = init_params(&arch, InitSpec { seed: 3 }).unwrap();
    let x = random_matrix(4, d, 3);
    let y = [0, 3, 1, 3];
    let expected: f64 = (0..4)
        .map(|i| softmax_ce(&mlp_logits(&p, x.row(i).unwrap().as_slice(), d, h, c), y[i]))
        .sum::<f64>()
        / 4.0;
    let got = mean_loss(&arch, &p, &x, &y).unwrap();
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    let per = per_instance_losses(&arch, &p, &x, &y).unwrap();
    for i in 0..4 {
        let e = softmax_ce(&mlp_logits(&p, x.row(i).unwrap().as_slice(), d, h, c), y[i]);
        assert!((per[i] - e).abs() < 1e-12);
    }
}

#[test]
fn label_out_of_range_rejected() {
    let arch = Architecture::mlp(3, &[4], 2);
    let p = init_params(&arch, InitSpec { seed: 2 }).unwrap();
    assert!(mean_loss(&arch, &p, &random_matrix(1, 3, 0), &[2]).is_err());
    assert!(mean_loss(&arch, &p, &random_matrix(1, 4, 0), &[0]).is_err());
}

fn check_param_grads(arch: &Architecture, x: &Tensor, y: &[usize], seed: u64) {
    let p = init_params(arch, InitSpec { seed }).unwrap();
    for layer in 0..p.len() {
        let f = |v: &Var| {
            let mut vars = p.to_constants();
            vars[layer] = v.clone();
            loss(arch, &vars, &Var::constant(x.clone()), y, true).map_err(|e| match e {
                seqmatch_core::Error::Tensor(t) => t,
                other => panic!("{other}"),
            })
        };
        let r = grad_check(&f, p.tensor(layer), 1e-5, 1e-6).unwrap();
        assert!(r.passed, "{} layer {layer}: rel err {}", arch.id(), r.max_rel_err);
    }
}

#[test]
fn parameter_gradients_match_finite_differences() {
    for seed in 0..3 {
        check_param_grads(&Architecture::mlp(4, &[6, 5], 3), &random_matrix(5, 4, seed), &[0, 1, 2, 2, 0], seed);
        let conv = Architecture::convnet_mini([1, 6, 6], &[3], 3);
        check_param_grads(&conv, &random_matrix(2, 36, seed), &[2, 0], seed);
        let mut soft = Architecture::mlp(3, &[4], 2);
        if let Architecture::Mlp { activation, .. } = &mut soft {
            *activation = Activation::Softplus;
        }
        check_param_grads(&soft, &random_matrix(3, 3, seed), &[1, 0, 1], seed);
    }
}

#[test]
fn sgd_step_moves_by_exactly_minus_lr_gradient() {
    let arch = Architecture::mlp(3, &[4], 2);
    let p0 = init_params(&arch, InitSpec { seed: 5 }).unwrap();
    let x = random_matrix(6, 3, 5);
    let y = [0, 1, 0, 1, 1, 0];
    let cfg = TrainConfig {
        lr: 0.3,
        momentum: 0.0,
        batch_size: 6,
        iterations: 1,
        seed: 0,
    };
    let p1 = alg(&arch, &x, &y, &p0, &cfg).unwrap();
    let leaves = p0.to_leaves();
    let l = loss(&arch, &leaves, &Var::constant(x.clone()), &y, true).unwrap();
    let g = grad(&l, &leaves, false).unwrap();
    for ((a, b), gv) in p0.tensors().zip(p1.tensors()).zip(&g) {
        for ((&v0, &v1), &gi) in a.data().iter().zip(b.data()).zip(gv.value().data()) {
            assert_eq!(v1, v0 - 0.3 * gi);
        }
    }
}

#[test]
fn separable_blobs_are_learned() {
    let split = gen_blobs(&BlobSpec {
        classes: 2,
        dim: 2,
        per_class: 200,
        spread: 0.05,
        seed: 4,
    })
    .unwrap();
    let arch = Architecture::mlp(2, &[8], 2);
    let p0 = init_params(&arch, InitSpec { seed: 1 }).unwrap();
    let cfg = TrainConfig {
        lr: 0.5,
        momentum: 0.0,
        batch_size: 32,
        iterations: 500,
        seed: 1,
    };
    let (p, log) = alg_logged(&arch, split.train.instances(), split.train.labels(), &p0, &cfg).unwrap();
    assert_eq!(log.len(), 500);
    let acc = accuracy(&arch, &p, split.train.instances(), split.train.labels()).unwrap();
    assert!(acc >= 0.99, "train accuracy {acc}");
    let again = alg(&arch, split.train.instances(), split.train.labels(), &p0, &cfg).unwrap();
    assert_eq!(p, again);
}

#[test]
fn split_runs_equal_one_run() {
    let arch = Architecture::mlp(3, &[4], 2);
    let p0 = init_params(&arch, InitSpec { seed: 5 }).unwrap();
    let x = random_matrix(20, 3, 6);
    let y: Vec<usize> = (0..20).map(|i| i % 2).collect();
    let cfg = TrainConfig {
        lr: 0.1,
        momentum: 0.9,
        batch_size: 4,
        iterations: 30,
        seed: 3,
    };
    let whole = alg(&arch, &x, &y, &p0, &cfg).unwrap();
    let mut p = p0.clone();
    let mut t = Trainer::new(&cfg).unwrap();
    t.run(&arch, &mut p, &x, &y, 10).unwrap();
    t.run(&arch, &mut p, &x, &y, 20).unwrap();
    assert_eq!(p, whole);
    assert_eq!(t.iteration(), 30);
}

#[test]
fn empty_data_rejected() {
    let arch = Architecture::mlp(3, &[4], 2);
    let p0 = init_params(&arch, InitSpec { seed: 5 }).unwrap();
    let cfg = TrainConfig {
        lr: 0.1,
        momentum: 0.0,
        batch_size: 4,
        iterations: 1,
        seed: 3,
    };
    let x = Tensor::zeros(&[1, 3]).unwrap();
    assert!(alg(&arch, &x, &[], &p0, &cfg).is_err());
}
