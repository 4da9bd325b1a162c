use hiernas::search_space::{
    build_trellis, random_genotype, BlockGenotype, CellGenotype, NetworkPath, OperatorKind,
};
use hiernas::segsearch::{
    cosine_lr, fixed_minibatch_losses, gen_toy_dataset, majority_baseline_miou, miou,
    retrain_decoded, run_search, split_indices, split_train, Dataset, RetrainConfig, SearchConfig,
    ToyDatasetSpec, TRACE_CSV_HEADER,
};
use proptest::prelude::*;

fn small_config() -> SearchConfig {
    SearchConfig {
        num_layers: 3,
        num_blocks: 2,
        filter_multiplier: 2,
        epochs: 3,
        arch_delay_epochs: 1,
        crop_size: 32,
        ..Default::default()
    }
}

fn small_data(n: usize, seed: u64) -> Dataset {
    gen_toy_dataset(&ToyDatasetSpec {
        num_images: n,
        size: 32,
        seed,
        ..Default::default()
    })
    .unwrap()
}

/// IoU per present class from explicit pixel sets.
fn set_miou(pred: &[u8], gt: &[u8], k: u8) -> f64 {
    let mut ious = Vec::new();
    for c in 0..k {
        let g: Vec<usize> = (0..gt.len()).filter(|&i| gt[i] == c).collect();
        if g.is_empty() {
            continue;
        }
        let p: Vec<usize> = (0..pred.len()).filter(|&i| pred[i] == c).collect();
        let inter = g.iter().filter(|i| p.contains(i)).count();
        let union = g.len() + p.len() - inter;
        ious.push(inter as f64 / union as f64);
    }
    ious.iter().sum::<f64>() / ious.len() as f64
}

#[test]
fn default_dataset_class_shares() {
    let d = gen_toy_dataset(&ToyDatasetSpec::default()).unwrap();
    assert_eq!(d.len(), 100);
    let counts = d.class_counts();
    let total: u64 = counts.iter().sum();
    assert_eq!(total, 100 * 64 * 64);
    for (c, &n) in counts.iter().enumerate() {
        let share = n as f64 / total as f64;
        assert!((0.01..=0.97).contains(&share), "class {c} share {share}");
    }
}

#[test]
fn dataset_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ToyDatasetSpec {
        num_images: 3,
        ..Default::default()
    };
    let d = gen_toy_dataset(&spec).unwrap();
    d.save(dir.path(), Some(&spec)).unwrap();
    assert_eq!(Dataset::load(dir.path()).unwrap(), d);
    let labels = dir.path().join("labels.bin");
    let mut bytes = std::fs::read(&labels).unwrap();
    bytes[0] ^= 1;
    std::fs::write(&labels, bytes).unwrap();
    assert!(matches!(
        Dataset::load(dir.path()),
        Err(hiernas::Error::Validation(_))
    ));
}

#[test]
fn cosine_schedule_shape() {
    let total = 977;
    let lrs: Vec<f64> = (0..=total)
        .map(|s| cosine_lr(s, total, 0.025, 0.001).unwrap())
        .collect();
    assert_eq!(lrs[0], 0.025);
    assert_eq!(lrs[total], 0.001);
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    let closed = |s: usize| {
        0.001 + 0.5 * 0.024 * (1.0 + (std::f64::consts::PI * s as f64 / total as f64).cos())
    };
    assert!(lrs
        .iter()
        .enumerate()
        .all(|(s, &v)| (v - closed(s)).abs() < 1e-15));
}

#[test]
fn trace_has_one_finite_record_per_epoch() {
    let data = small_data(6, 1);
    let out = run_search(&small_config(), &data).unwrap();
    assert_eq!(out.trace.records.len(), 3);
    assert!(out.trace.is_finite());
    assert!(out
        .trace
        .records
        .iter()
        .all(|r| r.alpha_entropy >= 0.0 && r.beta_entropy >= 0.0));
    assert!(out
        .trace
        .records
        .iter()
        .all(|r| (0.0..=1.0).contains(&r.miou)));
    let csv = out.trace.to_csv();
    assert_eq!(csv.lines().next().unwrap(), TRACE_CSV_HEADER);
    assert_eq!(csv.lines().count(), 4);
    // 3 images per split: 2 minibatches per epoch; arch steps in epochs 2 and 3
    assert_eq!(out.counters.weight_updates_from_train_a, 3 * 2);
    assert_eq!(out.counters.arch_updates_from_train_b, 2 * 2);
    assert_eq!(out.counters.weight_updates_from_train_b, 0);
    assert_eq!(out.counters.arch_updates_from_train_a, 0);
    assert_eq!(out.weight_lrs.first(), Some(&0.025));
    assert_eq!(out.weight_lrs.last(), Some(&0.001));
}

#[test]
fn delayed_arch_updates_leave_logits_untouched() {
    let data = small_data(4, 2);
    let cfg = SearchConfig {
        epochs: 2,
        arch_delay_epochs: 2,
        ..small_config()
    };
    let out = run_search(&cfg, &data).unwrap();
    assert_eq!(out.snapshot, out.initial_snapshot);
    assert_eq!(out.counters.arch_updates_from_train_b, 0);
    let moved = run_search(
        &SearchConfig {
            arch_delay_epochs: 1,
            ..cfg
        },
        &data,
    )
    .unwrap();
    assert_ne!(moved.snapshot, moved.initial_snapshot);
}

#[test]
fn search_is_deterministic() {
    let data = small_data(4, 3);
    let a = run_search(&small_config(), &data).unwrap();
    let b = run_search(&small_config(), &data).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.snapshot.to_json().unwrap(), b.snapshot.to_json().unwrap());
    let c = run_search(
        &SearchConfig {
            seed: 1,
            ..small_config()
        },
        &data,
    )
    .unwrap();
    assert_ne!(a.snapshot, c.snapshot);
}

#[test]
fn divergence_names_epoch_and_minibatch() {
    let data = small_data(4, 4);
    let cfg = SearchConfig {
        lr_max: 1e300,
        lr_min: 1e300,
        grad_clip: None,
        ..small_config()
    };
    match run_search(&cfg, &data) {
        Err(hiernas::Error::Divergence { epoch, .. }) => assert!(epoch >= 1),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.trace)),
    }
}

#[test]
fn mismatched_inputs_rejected() {
    let data = small_data(4, 5);
    let bad = [
        SearchConfig {
            num_classes: 3,
            ..small_config()
        },
        SearchConfig {
            crop_size: 64,
            ..small_config()
        },
        SearchConfig {
            arch_delay_epochs: 9,
            ..small_config()
        },
    ];
    for cfg in bad {
        assert!(matches!(
            run_search(&cfg, &data),
            Err(hiernas::Error::InvalidArgument(_))
        ));
    }
    assert!(run_search(&small_config(), &small_data(1, 0)).is_err());
}

#[test]
fn fixed_minibatch_loss_mostly_decreases() {
    let data = gen_toy_dataset(&ToyDatasetSpec::default()).unwrap();
    let losses = fixed_minibatch_losses(&SearchConfig::default(), &data, &[0, 1], 50).unwrap();
    let drops = losses.windows(2).filter(|w| w[1] < w[0]).count();
    assert!(drops >= 45, "{drops} of 49 steps decreased: {losses:?}");
}

fn plain_cell() -> CellGenotype {
    let b = |i1, i2, o1, o2| BlockGenotype {
        input1: i1,
        input2: i2,
        op1: o1,
        op2: o2,
    };
    CellGenotype {
        blocks: vec![
            b(0, 1, OperatorKind::SepConv3x3, OperatorKind::SkipConnect),
            b(1, 2, OperatorKind::SepConv3x3, OperatorKind::AtrousConv3x3),
        ],
    }
}

/// Capacity check at the finest output resolution: coarser paths cannot
/// drive the loss this low through bilinear upsampling of coarse logits.
#[test]
fn retraining_memorises_one_image() {
    let data = gen_toy_dataset(&ToyDatasetSpec {
        num_images: 1,
        seed: 11,
        ..Default::default()
    })
    .unwrap();
    let path = NetworkPath::from_factors(&[4, 4, 4, 4]).unwrap();
    let cfg = RetrainConfig {
        epochs: 600,
        batch_size: 1,
        lr_max: 0.1,
        weight_decay: 0.0,
        grad_clip: None,
        ..Default::default()
    };
    let (_, report) = retrain_decoded(&plain_cell(), &path, &data, &data, &cfg).unwrap();
    assert!(
        report.final_train_loss < 1e-2,
        "final loss {}",
        report.final_train_loss
    );
}

#[test]
fn retraining_is_deterministic_and_validates() {
    let (a, b) = split_train(&small_data(6, 6), 0).unwrap();
    let (_, path) = random_genotype(2, &build_trellis(3).unwrap(), 1).unwrap();
    let cfg = RetrainConfig {
        epochs: 2,
        crop_size: 32,
        ..Default::default()
    };
    let r1 = retrain_decoded(&plain_cell(), &path, &a, &b, &cfg)
        .unwrap()
        .1;
    let r2 = retrain_decoded(&plain_cell(), &path, &a, &b, &cfg)
        .unwrap()
        .1;
    assert_eq!(r1, r2);
    let mut bad = plain_cell();
    bad.blocks[1].input2 = 7;
    assert!(matches!(
        retrain_decoded(&bad, &path, &a, &b, &cfg),
        Err(hiernas::Error::Validation(_))
    ));
}

#[test]
fn majority_baseline_matches_hand_count() {
    let d = small_data(6, 7);
    let (a, b) = split_train(&d, 2).unwrap();
    // background dominates the generator's output
    let counts = a.class_counts();
    assert_eq!(
        counts.iter().enumerate().max_by_key(|(_, &n)| n).unwrap().0,
        0
    );
    let gt: Vec<u8> = b.labels.iter().flatten().copied().collect();
    let expected = set_miou(&vec![0; gt.len()], &gt, 4);
    assert!((majority_baseline_miou(&a, &b).unwrap() - expected).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn splits_partition(n in 2usize..200, seed in any::<u64>()) {
        let (a, b) = split_indices(n, seed).unwrap();
        prop_assert!(a.len() - b.len() <= 1);
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(split_indices(n, seed).unwrap(), (a, b));
    }

    #[test]
    fn miou_matches_set_oracle(pairs in prop::collection::vec((0u8..4, 0u8..4), 1..200)) {
        let (pred, gt): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
        let v = miou(&pred, &gt, 4, None).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert!((v - set_miou(&pred, &gt, 4)).abs() < 1e-12);
        prop_assert_eq!(miou(&gt, &gt, 4, None).unwrap(), 1.0);
    }

    #[test]
    fn cosine_stays_in_range(total in 1usize..10_000, frac in 0.0f64..=1.0) {
        let step = ((total as f64) * frac) as usize;
        let v = cosine_lr(step, total, 0.025, 0.001).unwrap();
        prop_assert!((0.001..=0.025).contains(&v));
        prop_assert!(cosine_lr(total + 1, total, 0.025, 0.001).is_err());
    }
}
