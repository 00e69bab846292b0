use proptest::prelude::*;
use seqmatch_core::data::{gen_blobs, BlobSpec, DatasetSplit};
use seqmatch_core::matching::*;
use seqmatch_core::models::{accuracy, alg, init_params, Architecture, TrainConfig};
use seqmatch_core::rng::derive_seed;
use seqmatch_core::seqmatch::*;
use seqmatch_core::teacher::{train_teacher, BatchSpec, TrajectoryPool};
use seqmatch_core::tensor::Tensor;

fn zeros_set(classes: usize, ipc: usize) -> SyntheticDataset {
    let n = classes * ipc;
    SyntheticDataset::new(
        Tensor::zeros(&[n, 2]).unwrap(),
        (0..n).map(|i| i / ipc).collect(),
        classes,
        vec![2],
        vec![0; n],
    )
    .unwrap()
}

fn per_class_sizes(s: &SyntheticDataset, map: &[usize], k: usize) -> Vec<Vec<usize>> {
    (0..k)
        .map(|j| {
            (0..s.classes())
                .map(|c| (0..s.len()).filter(|&i| map[i] == j && s.labels()[i] == c).count())
                .collect()
        })
        .collect()
}

#[test]
fn partition_examples() {
    let s = zeros_set(3, 4);
    assert_eq!(partition(&s, 1).unwrap(), vec![0; 12]);

    let s = zeros_set(10, 10);
    let map = partition(&s, 2).unwrap();
    assert_eq!(map.iter().filter(|&&j| j == 0).count(), 50);
    assert_eq!(map.iter().filter(|&&j| j == 1).count(), 50);
    for sizes in per_class_sizes(&s, &map, 2) {
        assert!(sizes.iter().all(|&n| n == 5));
    }

    let s = zeros_set(2, 50);
    let map = partition(&s, 3).unwrap();
    let sizes = per_class_sizes(&s, &map, 3);
    for c in 0..2 {
        assert_eq!([sizes[0][c], sizes[1][c], sizes[2][c]], [17, 17, 16]);
    }
    // contiguous within each class, in initialized order
    assert_eq!(&map[..50], [vec![0; 17], vec![1; 17], vec![2; 16]].concat().as_slice());
}

#[test]
fn partition_errors() {
    let s = zeros_set(2, 3);
    assert!(partition(&s, 0).is_err());
    assert!(partition(&s, 7).is_err());
    assert!(partition(&s, 4).is_err());
}

proptest! {
    #[test]
    fn partition_is_balanced_and_exhaustive(classes in 1usize..6, ipc in 1usize..20, k in 1usize..6) {
        prop_assume!(k <= ipc);
        let s = zeros_set(classes, ipc);
        let map = partition(&s, k).unwrap();
        prop_assert_eq!(map.len(), s.len());
        prop_assert!(map.iter().all(|&j| j < k));
        for c in 0..classes {
            let counts: Vec<usize> = (0..k)
                .map(|j| (0..s.len()).filter(|&i| map[i] == j && s.labels()[i] == c).count())
                .collect();
            let (lo, hi) = (*counts.iter().min().unwrap(), *counts.iter().max().unwrap());
            prop_assert!(hi - lo <= 1);
            prop_assert!(lo >= 1);
            prop_assert!(counts.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn schedules_are_contiguous(m in 1usize..200, k in 1usize..8) {
        prop_assume!(m >= k);
        match build_schedule(m, k, 1, vec![]) {
            Ok(s) => {
                prop_assert_eq!(s.segments[0][0], 0);
                for w in s.segments.windows(2) {
                    prop_assert_eq!(w[0][1], w[1][0]);
                }
                for seg in &s.segments {
                    prop_assert!(seg[0] < seg[1] && seg[1] <= m);
                }
                prop_assert_eq!(s.segments.last().unwrap()[1], (k * s.n).min(m));
            }
            // rounding can leave a trailing segment with nothing left to match
            Err(_) => prop_assert!((k - 1) * ((2 * m + k) / (2 * k)) >= m),
        }
    }

    #[test]
    fn budget_split_is_exact(total in 0usize..5000, sizes in prop::collection::vec(1usize..100, 1..6)) {
        let b = split_budget(total, &sizes);
        prop_assert_eq!(b.iter().sum::<usize>(), total);
    }
}

#[test]
fn schedule_examples() {
    let s = build_schedule(40, 2, 10, vec![]).unwrap();
    assert_eq!(s.n, 20);
    assert_eq!(s.segments, vec![[0, 20], [20, 40]]);
    let s = build_schedule(10, 1, 10, vec![]).unwrap();
    assert_eq!(s.segments, vec![[0, 10]]);
    let s = build_schedule(7, 2, 10, vec![]).unwrap();
    assert_eq!(s.n, 4);
    assert_eq!(s.segments, vec![[0, 4], [4, 7]]);
    assert!(build_schedule(1, 2, 10, vec![]).is_err());
}

#[test]
fn stage_pool_keeps_last_entries() {
    let arch = Architecture::mlp(2, &[2], 2);
    let mut pool = StageCheckpointPool::new(STAGE_POOL_CAPACITY).unwrap();
    let mut rng = seqmatch_core::rng::rng_for(0, "test", 0);
    assert!(pool.sample(&mut rng).is_err());
    let nets: Vec<_> = (0..6)
        .map(|s| init_params(&arch, seqmatch_core::models::InitSpec { seed: s }).unwrap())
        .collect();
    for n in &nets {
        pool.push(n.clone());
    }
    assert_eq!(pool.len(), 4);
    let kept: Vec<_> = pool.items().cloned().collect();
    assert_eq!(kept, nets[2..].to_vec());
}

fn small_blobs() -> DatasetSplit {
    gen_blobs(&BlobSpec {
        classes: 3,
        dim: 6,
        per_class: 60,
        spread: 0.5,
        seed: 3,
    })
    .unwrap()
}

fn small_backbone(mode: MatchMode) -> BackboneConfig {
    BackboneConfig {
        mode,
        iterations: 4,
        restarts: 3,
        target_batch: BatchSpec::PerClass { size: 16 },
        student_batch: 32,
        student_steps: 2,
        ..BackboneConfig::default()
    }
}

fn teacher_pool(split: &DatasetSplit, arch: &Architecture) -> TrajectoryPool {
    let cfg = TrainConfig {
        lr: 0.1,
        momentum: 0.0,
        batch_size: 32,
        iterations: 16,
        seed: 0,
    };
    let trajs = (0..2)
        .map(|s| train_teacher(split, arch, &TrainConfig { seed: s, ..cfg.clone() }, 8, 2).unwrap())
        .collect();
    TrajectoryPool::new(trajs).unwrap()
}

#[test]
fn k1_reduces_to_backbone_bitwise() {
    let split = small_blobs();
    let arch = Architecture::mlp(6, &[8], 3);
    let pool = teacher_pool(&split, &arch);
    for mode in [MatchMode::StudentPath, MatchMode::TeacherPath] {
        let bb = small_backbone(mode);
        let inp = DistillInputs {
            arch: &arch,
            real: &split.train,
            trajectories: Some(&pool),
            backbone: &bb,
            seed: 11,
        };
        let s0 = SyntheticDataset::init_from_real(&split.train, 4, 0).unwrap();
        let base = distill_backbone(&inp, &s0, 8, bb.iterations, &mut |_, _| {}).unwrap();
        let sched = build_schedule(8, 1, bb.iterations, vec![]).unwrap();
        let seq = seqmatch_distill(&inp, &s0, &sched, &mut |_, _| {}).unwrap();
        assert_eq!(seq.synthetic, base.synthetic, "{mode:?}");
        assert_eq!(seq.restart_losses, base.restart_losses);
        assert_ne!(seq.synthetic.instances(), s0.instances());
    }
}

#[test]
fn predecessors_frozen_and_handoff_from_pool() {
    let split = small_blobs();
    let arch = Architecture::mlp(6, &[8], 3);
    let pool = teacher_pool(&split, &arch);
    for mode in [MatchMode::StudentPath, MatchMode::TeacherPath] {
        let bb = small_backbone(mode);
        let inp = DistillInputs {
            arch: &arch,
            real: &split.train,
            trajectories: Some(&pool),
            backbone: &bb,
            seed: 5,
        };
        let s0 = SyntheticDataset::init_from_real(&split.train, 6, 0).unwrap();
        let sched = build_schedule(8, 3, bb.iterations, vec![]).unwrap();
        let mut finals: Vec<Vec<u8>> = Vec::new();
        let mut violations = 0;
        let mut steps = vec![0usize; 3];
        let out = seqmatch_distill(&inp, &s0, &sched, &mut |p, s| match p {
            Progress::StageEnd { stage, .. } => {
                assert_eq!(*stage, finals.len());
                finals.push(s.subset_bytes(*stage));
            }
            Progress::Step { stage, .. } => {
                steps[*stage] += 1;
                for (j, bytes) in finals.iter().enumerate() {
                    if &s.subset_bytes(j) != bytes {
                        violations += 1;
                    }
                }
            }
        })
        .unwrap();
        assert_eq!(violations, 0);
        assert_eq!(steps, vec![12, 12, 12]);
        for j in 0..3 {
            assert_eq!(out.synthetic.subset_bytes(j), finals[j]);
            assert!(out.synthetic.is_frozen(j));
        }
        assert_eq!(out.stage_pools.len(), 3);
        for k in 1..3 {
            for start in &out.starts[k] {
                assert!(out.stage_pools[k - 1].items().any(|p| p == start), "{mode:?} stage {k}");
            }
        }
        for start in &out.starts[0] {
            assert!(out.stage_pools[0].items().all(|p| p != start));
        }
    }
}

#[test]
fn teacher_path_requires_pool_of_sufficient_length() {
    let split = small_blobs();
    let arch = Architecture::mlp(6, &[8], 3);
    let bb = small_backbone(MatchMode::TeacherPath);
    let s0 = SyntheticDataset::init_from_real(&split.train, 4, 0).unwrap();
    let inp = DistillInputs {
        arch: &arch,
        real: &split.train,
        trajectories: None,
        backbone: &bb,
        seed: 0,
    };
    let sched = build_schedule(8, 2, 2, vec![]).unwrap();
    assert!(seqmatch_distill(&inp, &s0, &sched, &mut |_, _| {}).is_err());
    let pool = teacher_pool(&split, &arch);
    let long = build_schedule(20, 2, 2, vec![]).unwrap();
    let inp = DistillInputs {
        trajectories: Some(&pool),
        ..inp
    };
    assert!(seqmatch_distill(&inp, &s0, &long, &mut |_, _| {}).is_err());
}

fn eval_cfg() -> EvalConfig {
    EvalConfig {
        lr: 0.1,
        momentum: 0.0,
        batch_size: 8,
        iterations: 200,
        seeds: 3,
        seed: 2,
    }
}

#[test]
fn single_subset_eval_is_standard_training() {
    let split = small_blobs();
    let arch = Architecture::mlp(6, &[8], 3);
    let s = SyntheticDataset::init_from_real(&split.train, 5, 0).unwrap();
    let eval = eval_cfg();
    let report = eval_staged(&s, &arch, &eval, &split.test).unwrap();
    for j in 0..eval.seeds {
        let theta0 = init_params(&arch, eval.init(j)).unwrap();
        let cfg = TrainConfig {
            lr: eval.lr,
            momentum: eval.momentum,
            batch_size: eval.batch_size,
            iterations: eval.iterations,
            seed: derive_seed(eval.seed, "eval-batch", j as u64),
        };
        let p = alg(&arch, s.instances(), s.labels(), &theta0, &cfg).unwrap();
        let acc = accuracy(&arch, &p, split.test.instances(), split.test.labels()).unwrap();
        assert_eq!(acc, report.accuracies[j]);
    }
}

#[test]
fn duplicated_subsets_equal_one_long_stage() {
    let split = small_blobs();
    let arch = Architecture::mlp(6, &[8], 3);
    let half = SyntheticDataset::init_from_real(&split.train, 3, 0).unwrap();
    // per class: the same 3 rows twice, so both subsets are identical
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for c in 0..3 {
        for _ in 0..2 {
            for i in 0..3 {
                rows.extend_from_slice(&half.instances().data()[(c * 3 + i) * 6..(c * 3 + i + 1) * 6]);
                labels.push(c);
            }
        }
    }
    let mut doubled = SyntheticDataset::new(Tensor::matrix(18, 6, rows).unwrap(), labels, 3, vec![6], vec![0; 18]).unwrap();
    doubled.set_partition(partition(&doubled, 2).unwrap(), 2).unwrap();
    let stages = stages_of(&doubled).unwrap();
    assert_eq!(stages[0], stages[1]);
    let eval = eval_cfg();
    let staged = eval_staged(&doubled, &arch, &eval, &split.test).unwrap();
    let single = eval_stages(&arch, &stages[..1], &eval, &split.test).unwrap();
    assert_eq!(staged, single);
}

#[test]
fn report_statistics() {
    let r = EvalReport::from_accuracies(vec![0.74, 0.75, 0.735, 0.745, 0.75]);
    let mean = (0.74 + 0.75 + 0.735 + 0.745 + 0.75) / 5.0;
    assert!((r.mean - mean).abs() < 1e-15);
    let var = [0.74f64, 0.75, 0.735, 0.745, 0.75].iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 5.0;
    assert!((r.std - var.sqrt()).abs() < 1e-15);
    assert_eq!(r.display(), "74.4 ± 0.6");
}

#[test]
fn full_set_at_least_as_good_as_first_subset() {
    let split = gen_blobs(&BlobSpec::default()).unwrap();
    let arch = Architecture::mlp(16, &[64], 3);
    let bb = BackboneConfig::default();
    let inp = DistillInputs {
        arch: &arch,
        real: &split.train,
        trajectories: None,
        backbone: &bb,
        seed: 1,
    };
    let s0 = SyntheticDataset::init_from_real(&split.train, 10, 0).unwrap();
    let sched = build_schedule(20, 2, bb.iterations, vec![]).unwrap();
    let out = seqmatch_distill(&inp, &s0, &sched, &mut |_, _| {}).unwrap();
    let eval = EvalConfig::default();
    let full = eval_staged(&out.synthetic, &arch, &eval, &split.test).unwrap();
    let first = eval_stages(&arch, &stages_of(&out.synthetic).unwrap()[..1], &eval, &split.test).unwrap();
    assert_eq!(full.accuracies.len(), 5);
    assert!(full.mean >= first.mean, "full {} vs S_1 {}", full.display(), first.display());
}
