use hiernas::decoder::{
    brute_force_best_path, decode, decode_cell, decode_path_viterbi, path_log_prob,
};
use hiernas::relaxation::{normalize_alpha, normalize_beta, AlphaLogits, ArchSnapshot, BetaLogits};
use hiernas::search_space::{
    build_trellis, enumerate_paths, validate_path, BlockGenotype, CellGenotype, Downsample,
    OperatorKind, NUM_OPS,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Joint search over every B=2 genotype with distinct inputs and non-zero
/// operators, maximising the summed weight of the kept edges.
fn brute_force_cell(alpha: &AlphaLogits) -> CellGenotype {
    let nonzero: Vec<OperatorKind> = OperatorKind::ALL
        .into_iter()
        .filter(|&k| k != OperatorKind::Zero)
        .collect();
    let block_options = |b: usize| {
        let mut v = Vec::new();
        for i1 in 0..b + 2 {
            for i2 in i1 + 1..b + 2 {
                for &o1 in &nonzero {
                    for &o2 in &nonzero {
                        v.push(BlockGenotype {
                            input1: i1,
                            input2: i2,
                            op1: o1,
                            op2: o2,
                        });
                    }
                }
            }
        }
        v
    };
    let score = |b: usize, g: &BlockGenotype| {
        alpha.get(b, g.input1)[g.op1.index()] + alpha.get(b, g.input2)[g.op2.index()]
    };
    let mut best: Option<(f64, CellGenotype)> = None;
    for g0 in block_options(0) {
        for g1 in block_options(1) {
            let s = score(0, &g0) + score(1, &g1);
            if best.as_ref().is_none_or(|(b, _)| s > *b) {
                best = Some((
                    s,
                    CellGenotype {
                        blocks: vec![g0, g1],
                    },
                ));
            }
        }
    }
    best.unwrap().1
}

#[test]
fn viterbi_matches_enumeration_at_twelve_layers() {
    let t = build_trellis(12).unwrap();
    let paths: Vec<_> = enumerate_paths(&t).unwrap().collect();
    assert_eq!(paths.len(), 75025);
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let beta = normalize_beta(&BetaLogits::random(&t, 1.5, &mut rng)).unwrap();
        let v = decode_path_viterbi(&beta).unwrap();
        assert_eq!(v, brute_force_best_path(&beta).unwrap(), "seed {seed}");
        assert!(validate_path(&v, &t).is_valid());
        if seed < 5 {
            let best = path_log_prob(&beta, &v);
            assert!(paths.iter().all(|p| path_log_prob(&beta, p) <= best));
        }
    }
}

#[test]
fn brute_force_respects_cap_and_single_layer() {
    let t = build_trellis(1).unwrap();
    let mut b = BetaLogits::zeros(&t);
    b.set(0, Downsample::X4, [0.0, 0.2, 0.9]);
    let p = brute_force_best_path(&normalize_beta(&b).unwrap()).unwrap();
    assert_eq!(p.factors(), vec![8]);
    let big = build_trellis(30).unwrap();
    let r = brute_force_best_path(&normalize_beta(&BetaLogits::zeros(&big)).unwrap());
    assert!(matches!(r, Err(hiernas::Error::ResourceLimit(_))));
    // Viterbi itself has no such limit
    assert_eq!(
        decode_path_viterbi(&normalize_beta(&BetaLogits::zeros(&big)).unwrap())
            .unwrap()
            .factors(),
        vec![4; 30]
    );
}

#[test]
fn greedy_cell_matches_joint_oracle() {
    for seed in 0..200 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let alpha = normalize_alpha(&AlphaLogits::random(2, 1.0, &mut rng)).unwrap();
        assert_eq!(
            decode_cell(&alpha, 2).unwrap(),
            brute_force_cell(&alpha),
            "seed {seed}"
        );
    }
}

fn logits_strategy() -> impl Strategy<Value = (u64, usize, usize, f64)> {
    (any::<u64>(), 1usize..5, 1usize..9, -50.0f64..50.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decoding_is_shift_invariant((seed, blocks, layers, c) in logits_strategy(), pick in any::<usize>()) {
        let t = build_trellis(layers).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let snap = ArchSnapshot { alpha: AlphaLogits::random(blocks, 2.0, &mut rng), beta: BetaLogits::random(&t, 2.0, &mut rng) };
        let base = decode(&snap).unwrap();

        let mut shifted = snap.clone();
        let groups = shifted.alpha.num_groups();
        let g = pick % groups;
        let (mut b, mut j) = (0, g);
        while j >= b + 2 { j -= b + 2; b += 1; }
        shifted.alpha.get_mut(b, j).iter_mut().for_each(|v| *v += c);
        let d = decode(&shifted).unwrap();
        prop_assert_eq!(&d.cell, &base.cell);
        prop_assert_eq!(&d.path, &base.path);

        let mut shifted = snap.clone();
        let l = pick % layers;
        let sources: Vec<Downsample> = if l == 0 { vec![Downsample::X4] } else { t.layer_nodes(l).to_vec() };
        let s = sources[pick % sources.len()];
        let mask = shifted.beta.mask();
        let mut row = shifted.beta.get(l, s);
        for (d, v) in row.iter_mut().enumerate() {
            if mask.group(l, s)[d] { *v += c; }
        }
        shifted.beta.set(l, s, row);
        let d = decode(&shifted).unwrap();
        prop_assert_eq!(&d.cell, &base.cell);
        prop_assert_eq!(&d.path, &base.path);
    }

    #[test]
    fn decoded_architectures_are_valid((seed, blocks, layers, _c) in logits_strategy()) {
        let t = build_trellis(layers).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut alpha = AlphaLogits::random(blocks, 3.0, &mut rng);
        // bias some edges heavily toward `zero`
        alpha.get_mut(blocks - 1, 0)[NUM_OPS - 1] += 10.0;
        let snap = ArchSnapshot { alpha, beta: BetaLogits::random(&t, 3.0, &mut rng) };
        let d = decode(&snap).unwrap();
        prop_assert!(d.cell.validate_decoded(blocks).is_ok());
        prop_assert!(d.cell.blocks.iter().all(|b| b.op1 != OperatorKind::Zero && b.op2 != OperatorKind::Zero && b.input1 != b.input2));
        prop_assert!(validate_path(&d.path, &t).is_valid());
        prop_assert_eq!(decode(&snap).unwrap(), d);
    }
}
