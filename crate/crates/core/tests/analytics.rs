use hiernas::analytics::{
    build_final_plan, count_multiply_adds, count_params, model_stats, stats_for_layers,
    supernet_param_count, AsppVariant, LayerKind, PlanOptions, Section, StemKind,
};
use hiernas::microtensor::{ParamGroup, ParamStore};
use hiernas::relaxation::{DiscreteNet, NetConfig};
use hiernas::search_space::{build_trellis, random_genotype, validate_path, NetworkPath};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn search_options() -> PlanOptions {
    PlanOptions {
        stem: StemKind::Search,
        in_channels: 3,
        ..Default::default()
    }
}

#[test]
fn search_stem_plan_matches_discrete_net_store() {
    for seed in 0..12 {
        let layers = 1 + (seed as usize % 6);
        let blocks = 1 + (seed as usize % 4);
        let f = 2 + (seed as usize % 3);
        let (cell, path) = random_genotype(blocks, &build_trellis(layers).unwrap(), seed).unwrap();
        let plan = build_final_plan(&cell, &path, f, 5, search_options()).unwrap();
        let mut store = ParamStore::new();
        DiscreteNet::new(
            NetConfig::new(layers, blocks, f, 5),
            &cell,
            &path,
            &mut store,
            seed,
        )
        .unwrap();
        assert_eq!(
            count_params(&plan),
            store.numel(Some(ParamGroup::Weights)) as u64,
            "seed {seed}"
        );
    }
}

#[test]
fn supernet_count_exceeds_any_single_path() {
    let t = build_trellis(4).unwrap();
    let total = supernet_param_count(&NetConfig::new(4, 2, 2, 3)).unwrap();
    for seed in 0..5 {
        let (cell, path) = random_genotype(2, &t, seed).unwrap();
        let plan = build_final_plan(&cell, &path, 2, 3, search_options()).unwrap();
        assert!(count_params(&plan) < total);
    }
}

#[test]
fn final_plan_structure() {
    let t = build_trellis(8).unwrap();
    for seed in 0..10 {
        let (cell, path) = random_genotype(5, &t, seed).unwrap();
        let plan = build_final_plan(&cell, &path, 20, 19, PlanOptions::final_model()).unwrap();
        let stem: Vec<(usize, usize, usize)> = plan
            .stem
            .iter()
            .map(|s| (s.kernel, s.stride, s.filters))
            .collect();
        assert_eq!(stem, vec![(3, 2, 64), (3, 1, 64), (3, 2, 128)]);
        assert!(validate_path(&plan.path, &t).is_valid());
        for node in &plan.body {
            assert_eq!(node.channels, 5 * 20 * node.factor / 4);
        }
        assert_eq!(
            plan.head.upsample_ratio,
            plan.path.resolutions.last().unwrap().factor()
        );
        assert_eq!(plan.head.aspp, AsppVariant::ThreeBranch);
        assert_eq!(
            plan,
            build_final_plan(&cell, &path, 20, 19, PlanOptions::final_model()).unwrap()
        );
    }
    let (cell, _) = random_genotype(2, &build_trellis(2).unwrap(), 0).unwrap();
    let to8 = NetworkPath::from_factors(&[8, 8]).unwrap();
    let plan = build_final_plan(&cell, &to8, 4, 3, PlanOptions::final_model()).unwrap();
    assert_eq!(plan.head.upsample_ratio, 8);
}

#[test]
fn invalid_inputs_rejected() {
    let (cell, _) = random_genotype(2, &build_trellis(3).unwrap(), 1).unwrap();
    let jump = NetworkPath::from_factors(&[4, 16, 16]).unwrap();
    assert!(matches!(
        build_final_plan(&cell, &jump, 4, 3, PlanOptions::final_model()),
        Err(hiernas::Error::Validation(_))
    ));
    let ok = NetworkPath::from_factors(&[4, 8, 16]).unwrap();
    let plan = build_final_plan(&cell, &ok, 4, 3, PlanOptions::final_model()).unwrap();
    assert!(count_multiply_adds(&plan, 65, 64).is_err());
}

/// Fixed random genotype: body convolution weights for F and 2F.
#[test]
fn doubling_filters_roughly_quadruples_body_convs() {
    let (cell, path) = random_genotype(5, &build_trellis(12).unwrap(), 2024).unwrap();
    let body_conv = |f: usize| {
        let plan = build_final_plan(&cell, &path, f, 19, PlanOptions::final_model()).unwrap();
        plan.layers
            .iter()
            .filter(|l| l.section == Section::Body && matches!(l.kind, LayerKind::Conv { .. }))
            .map(|l| l.params())
            .sum::<u64>()
    };
    for f in [8, 16, 20, 32] {
        let ratio = body_conv(2 * f) as f64 / body_conv(f) as f64;
        assert!((3.5..=4.0).contains(&ratio), "F={f}: ratio {ratio}");
    }
}

#[test]
fn size_ordering_across_filter_multipliers() {
    let t = build_trellis(12).unwrap();
    for seed in 0..5 {
        let (cell, path) = random_genotype(5, &t, seed).unwrap();
        let stats: Vec<_> = [20, 32, 48]
            .iter()
            .map(|&f| {
                model_stats(
                    &build_final_plan(&cell, &path, f, 19, PlanOptions::final_model()).unwrap(),
                    512,
                    1024,
                )
                .unwrap()
            })
            .collect();
        assert!(stats[0].params < stats[1].params && stats[1].params < stats[2].params);
        assert!(
            stats[0].multiply_adds < stats[1].multiply_adds
                && stats[1].multiply_adds < stats[2].multiply_adds
        );
    }
}

#[test]
fn head_variants_add_cost() {
    let (cell, path) = random_genotype(3, &build_trellis(6).unwrap(), 5).unwrap();
    let base = build_final_plan(&cell, &path, 8, 4, PlanOptions::final_model()).unwrap();
    let five = build_final_plan(
        &cell,
        &path,
        8,
        4,
        PlanOptions {
            aspp: AsppVariant::FiveBranch,
            ..PlanOptions::final_model()
        },
    )
    .unwrap();
    let dec = build_final_plan(
        &cell,
        &path,
        8,
        4,
        PlanOptions {
            decoder_stub: true,
            ..PlanOptions::final_model()
        },
    )
    .unwrap();
    assert!(count_params(&five) > count_params(&base));
    let s = model_stats(&dec, 64, 64).unwrap();
    assert!(s.section_params(Section::Decoder) > 0);
    assert_eq!(dec.head.upsample_ratio, 4);
    let s = model_stats(&base, 64, 64).unwrap();
    assert_eq!(s.section_params(Section::Decoder), 0);
    assert!(s.to_table().lines().last().unwrap().contains("64x64"));
    let parsed: hiernas::analytics::ModelStats =
        serde_json::from_str(&s.to_json().unwrap()).unwrap();
    assert_eq!(parsed, s);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn totals_are_additive_and_order_free(seed in any::<u64>(), layers in 1usize..8, blocks in 1usize..5, f in 1usize..12, hk in 1usize..4, wk in 1usize..4) {
        let (cell, path) = random_genotype(blocks, &build_trellis(layers).unwrap(), seed).unwrap();
        let plan = build_final_plan(&cell, &path, f, 4, PlanOptions::final_model()).unwrap();
        let (h, w) = (32 * hk, 32 * wk);
        let s = model_stats(&plan, h, w).unwrap();
        prop_assert_eq!(s.params, s.rows.iter().map(|r| r.params).sum::<u64>());
        prop_assert_eq!(s.multiply_adds, s.rows.iter().map(|r| r.multiply_adds).sum::<u64>());
        prop_assert_eq!(s.params, count_params(&plan));
        prop_assert_eq!(s.multiply_adds, count_multiply_adds(&plan, h, w).unwrap());
        let sections = [Section::Stem, Section::Body, Section::Head, Section::Decoder];
        prop_assert_eq!(sections.iter().map(|&x| s.section_params(x)).sum::<u64>(), s.params);

        let mut shuffled = plan.layers.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let t = stats_for_layers(&shuffled, h, w).unwrap();
        prop_assert_eq!((t.params, t.multiply_adds), (s.params, s.multiply_adds));

        let bigger = model_stats(&plan, h + 32, w).unwrap();
        prop_assert!(bigger.multiply_adds > s.multiply_adds);
        let wider = build_final_plan(&cell, &path, f + 1, 4, PlanOptions::final_model()).unwrap();
        prop_assert!(count_multiply_adds(&wider, h, w).unwrap() > s.multiply_adds);
    }
}
