use hiernas::microtensor::{GradCheckConfig, Graph, NodeId, OpTag, ParamStore, Shape4, Tensor4};
use hiernas::relaxation::{
    alpha_group, cell_forward, mixed_operator, supernet_gradient_check, ArchSnapshot, DiscreteNet,
    Fwd, NetConfig, NormMode, SuperNet,
};
use hiernas::search_space::{random_genotype, Downsample, OperatorKind, NUM_OPS};
use hiernas::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn images(n: usize, hw: usize, seed: u64) -> Tensor4 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor4::uniform(Shape4::new(n, 3, hw, hw), 0.0, 1.0, &mut rng)
}

fn alpha_probs(fx: &mut Fwd, net: &SuperNet) -> NodeId {
    let a = fx.param(net.alpha_id());
    fx.g.softmax_over_channel(a, None).unwrap()
}

fn set_alpha(store: &mut ParamStore, net: &SuperNet, f: impl Fn(usize, usize, usize) -> f64) {
    let mut a = net.alpha_logits(store).unwrap();
    for b in 0..net.config().num_blocks {
        for j in 0..b + 2 {
            for k in 0..NUM_OPS {
                a.get_mut(b, j)[k] = f(b, j, k);
            }
        }
    }
    let beta = net.beta_logits(store).unwrap();
    net.set_arch(store, &a, &beta).unwrap();
}

#[test]
fn output_shape_and_channel_law() {
    let cfg = NetConfig::new(4, 2, 2, 4);
    let mut store = ParamStore::new();
    let net = SuperNet::new(cfg.clone(), &mut store, 1).unwrap();
    let mut g = Graph::new();
    let mut fx = Fwd::new(&mut g, &store, NormMode::Batch);
    let x = fx.g.input(images(2, 64, 0));
    let out = net.forward(&mut fx, x).unwrap();
    assert_eq!(g.shape(out.logits), Shape4::new(2, 4, 64, 64));
    assert_eq!(g.shape(out.stem), Shape4::new(2, 4, 16, 16));
    // every feasible node is present under softmax β
    assert_eq!(out.nodes.len(), net.trellis().num_nodes());
    for &(_, s, h) in &out.nodes {
        let shape = g.shape(h);
        assert_eq!(shape.c, 2 * 2 * s.factor() / 4);
        assert_eq!(shape.h, 64 / s.factor());
    }
}

#[test]
fn indivisible_input_rejected() {
    let mut store = ParamStore::new();
    let net = SuperNet::new(NetConfig::new(2, 1, 2, 3), &mut store, 1).unwrap();
    let mut g = Graph::new();
    let mut fx = Fwd::new(&mut g, &store, NormMode::Batch);
    let x = fx.g.input(images(1, 48, 0));
    assert!(matches!(
        net.forward(&mut fx, x),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn alpha_is_one_shared_node() {
    let mut store = ParamStore::new();
    let net = SuperNet::new(NetConfig::new(3, 2, 2, 3), &mut store, 2).unwrap();
    let mut g = Graph::new();
    let mut fx = Fwd::new(&mut g, &store, NormMode::Batch);
    let x = fx.g.input(images(1, 32, 0));
    let out = net.forward(&mut fx, x).unwrap();
    let alpha_leaf = g.param_node(net.alpha_id()).unwrap();
    let mut alpha_consumers = 0;
    let mut mixed = 0;
    for node in g.node_ids() {
        let parents = g.parents(node);
        if parents.contains(&alpha_leaf) {
            alpha_consumers += 1;
        }
        if g.op_tag(node) == OpTag::WeightedSum {
            let weights: Vec<NodeId> = parents.chunks(2).map(|p| p[1]).collect();
            assert!(weights
                .iter()
                .all(|&w| w == out.alpha_probs || w == out.beta_probs));
            if weights[0] == out.alpha_probs {
                mixed += 1;
            }
        }
    }
    // a single softmax reads the α leaf; every mixed edge reads that softmax
    assert_eq!(alpha_consumers, 1);
    let edges_per_cell = 2 + 3;
    let cells: usize = out.nodes.len();
    assert!(mixed >= cells * edges_per_cell, "{mixed}");
    assert_eq!(g.param_of(alpha_leaf), Some(net.alpha_id()));
}

#[test]
fn mixed_operator_one_hot_and_oracle() {
    let cfg = NetConfig::new(1, 1, 4, 3);
    let mut store = ParamStore::new();
    let net = SuperNet::new(cfg, &mut store, 3).unwrap();
    let cell = net.cell(1, Downsample::X4).unwrap().clone();
    let wide = Tensor4::from_vec(
        Shape4::new(1, 4, 8, 8),
        (0..256)
            .map(|i| ((i * 37 % 19) as f64 - 9.0) / 5.0)
            .collect(),
    )
    .unwrap();

    let run = |store: &ParamStore| -> Tensor4 {
        let mut g = Graph::new();
        let mut fx = Fwd::new(&mut g, store, NormMode::Batch);
        let ap = alpha_probs(&mut fx, &net);
        let x = fx.g.input(wide.clone());
        let y = mixed_operator(&mut fx, cell.edge(0, 1), x, ap, alpha_group(0, 1)).unwrap();
        g.value(y).clone()
    };
    let one_hot =
        |k: usize| move |_b: usize, _j: usize, kk: usize| if kk == k { 0.0 } else { -1e4 };

    set_alpha(&mut store, &net, one_hot(OperatorKind::SkipConnect.index()));
    assert_eq!(run(&store), wide);
    set_alpha(&mut store, &net, one_hot(OperatorKind::Zero.index()));
    assert!(run(&store).data().iter().all(|&v| v == 0.0));

    let per_op: Vec<Tensor4> = (0..NUM_OPS)
        .map(|k| {
            set_alpha(&mut store, &net, one_hot(k));
            run(&store)
        })
        .collect();
    let logits = [0.3, -1.2, 0.7, 0.1, -0.4, 1.1, -0.9, 0.2];
    set_alpha(&mut store, &net, |_, _, k| logits[k]);
    let z: f64 = logits.iter().map(|l: &f64| l.exp()).sum();
    let mut expected = vec![0.0; wide.data().len()];
    for (k, out) in per_op.iter().enumerate() {
        let p = logits[k].exp() / z;
        for (e, v) in expected.iter_mut().zip(out.data()) {
            *e += p * v;
        }
    }
    let got = run(&store);
    let diff = got
        .data()
        .iter()
        .zip(&expected)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(diff <= 1e-12, "{diff}");
}

#[test]
fn cell_skip_from_prev_returns_adapted_prev() {
    let cfg = NetConfig::new(1, 1, 4, 3);
    let mut store = ParamStore::new();
    let net = SuperNet::new(cfg, &mut store, 5).unwrap();
    let cell = net.cell(1, Downsample::X4).unwrap().clone();
    set_alpha(&mut store, &net, |_, j, k| {
        let want = if j == 1 {
            OperatorKind::SkipConnect
        } else {
            OperatorKind::Zero
        };
        if k == want.index() {
            0.0
        } else {
            -1e4
        }
    });
    let mut g = Graph::new();
    let mut fx = Fwd::new(&mut g, &store, NormMode::Batch);
    let ap = alpha_probs(&mut fx, &net);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let prev4 =
        fx.g.input(Tensor4::randn(Shape4::new(1, 4, 8, 8), 1.0, &mut rng));
    let pp = fx.g.input(Tensor4::full(Shape4::new(1, 4, 8, 8), 0.5));
    let out = cell_forward(&mut fx, &cell, prev4, pp, ap).unwrap();
    let (adapted, _) = cell.preprocess(&mut fx, prev4, pp).unwrap();
    assert_eq!(g.shape(out).c, 4);
    assert_eq!(g.value(out), g.value(adapted));

    let mut g = Graph::new();
    let mut fx = Fwd::new(&mut g, &store, NormMode::Batch);
    let ap = alpha_probs(&mut fx, &net);
    let a = fx.g.input(Tensor4::zeros(Shape4::new(1, 4, 8, 8)));
    let b = fx.g.input(Tensor4::zeros(Shape4::new(1, 4, 4, 4)));
    assert!(matches!(
        cell_forward(&mut fx, &cell, a, b, ap),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn one_hot_supernet_equals_discrete_network() {
    let cfg = NetConfig::new(5, 2, 2, 4);
    let mut store = ParamStore::new();
    let net = SuperNet::new(cfg.clone(), &mut store, 11).unwrap();
    let n_params = store.len();
    for seed in 0..4 {
        let (cell, path) = random_genotype(2, net.trellis(), 100 + seed).unwrap();
        let snap = ArchSnapshot::one_hot(&cell, &path).unwrap();
        net.set_arch(&mut store, &snap.alpha, &snap.beta).unwrap();
        let discrete = DiscreteNet::new(cfg.clone(), &cell, &path, &mut store, 0).unwrap();
        assert_eq!(
            store.len(),
            n_params,
            "discrete network must reuse supernet weights"
        );
        let x = images(1, 64, seed);
        let mut g1 = Graph::new();
        let mut fx = Fwd::new(&mut g1, &store, NormMode::Batch);
        let xi = fx.g.input(x.clone());
        let sup = net.forward(&mut fx, xi).unwrap();
        let mut g2 = Graph::new();
        let mut fx = Fwd::new(&mut g2, &store, NormMode::Batch);
        let xi = fx.g.input(x);
        let dis = discrete.forward(&mut fx, xi).unwrap();
        let diff = g1.value(sup.logits).max_abs_diff(g2.value(dis));
        assert!(diff <= 1e-9, "seed {seed}: {diff}");
        assert_eq!(sup.nodes.len(), 5, "only the path is active");
    }
}

#[test]
fn duplicated_batch_duplicates_logits_without_norm() {
    let mut cfg = NetConfig::new(3, 2, 2, 3);
    cfg.norm = NormMode::Disabled;
    let mut store = ParamStore::new();
    let net = SuperNet::new(cfg, &mut store, 4).unwrap();
    let x = images(1, 32, 9);
    let run = |t: Tensor4| {
        let mut g = Graph::new();
        let mut fx = Fwd::new(&mut g, &store, NormMode::Disabled);
        let xi = fx.g.input(t);
        let out = net.forward(&mut fx, xi).unwrap();
        g.value(out.logits).clone()
    };
    let single = run(x.clone());
    let double = run(Tensor4::stack_batch(&[&x, &x]).unwrap());
    assert_eq!(double.batch_slice(0, 1), single);
    assert_eq!(double.batch_slice(1, 1), single);
}

#[test]
fn supernet_gradients_match_finite_differences() {
    let (arch, weights) = supernet_gradient_check(&GradCheckConfig::default(), 1, 4).unwrap();
    assert!(arch.passed(), "{arch:?}");
    assert!(arch.params.iter().all(|p| p.checked > 0));
    assert!(weights.passed(), "{weights:?}");
}
