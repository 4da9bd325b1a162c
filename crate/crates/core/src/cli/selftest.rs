use std::sync::Mutex;
use std::time::Instant;

use anyhow::{bail, ensure, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hiernas::decoder::{brute_force_best_path, decode_path_viterbi};
use hiernas::microtensor::suite::primitive_gradient_suite;
use hiernas::microtensor::{GradCheckConfig, Graph, ParamStore, Shape4, Tensor4};
use hiernas::relaxation::{
    normalize_beta, supernet_gradient_check, ArchSnapshot, BetaLogits, DiscreteNet, Fwd, NetConfig,
    NormMode, SuperNet,
};
use hiernas::search_space::{
    build_trellis, count_cell_genotypes, count_paths, enumerate_paths, random_genotype,
    StartConvention, Trellis,
};

type Suite = (&'static str, fn() -> Result<String>);
/// Outcome and wall time in seconds; `None` until the suite has run.
type SuiteResult = Option<(Result<String>, f64)>;

const SUITES: [Suite; 4] = [
    ("counting", counting),
    ("viterbi", viterbi),
    ("gradients", gradients),
    ("one-hot-collapse", one_hot_collapse),
];

fn counting() -> Result<String> {
    ensure!(
        count_cell_genotypes(5, 8)? == 556_627_761_561_600,
        "cell count for B=5, K=8"
    );
    ensure!(
        count_paths(12, StartConvention::FirstLayer4)? == 28657,
        "path count, first layer 4"
    );
    ensure!(
        count_paths(12, StartConvention::FirstLayer4Or8)? == 75025,
        "path count, first layer 4 or 8"
    );
    for l in 1..=12 {
        for conv in [
            StartConvention::FirstLayer4,
            StartConvention::FirstLayer4Or8,
        ] {
            let t = Trellis::new(l, conv)?;
            ensure!(
                enumerate_paths(&t)?.count() as u128 == t.path_count()?,
                "enumeration at L={l}"
            );
        }
    }
    Ok("closed forms and enumeration agree for L <= 12".into())
}

fn viterbi() -> Result<String> {
    let t = build_trellis(12)?;
    for seed in 0..100 {
        let beta = normalize_beta(&BetaLogits::random(
            &t,
            1.5,
            &mut ChaCha8Rng::seed_from_u64(seed),
        ))?;
        ensure!(
            decode_path_viterbi(&beta)? == brute_force_best_path(&beta)?,
            "draw {seed} disagrees"
        );
    }
    Ok("100 draws at L=12 match enumeration".into())
}

fn gradients() -> Result<String> {
    let cfg = GradCheckConfig::default();
    let mut worst: f64 = 0.0;
    for (name, report) in primitive_gradient_suite(&cfg, 0)? {
        ensure!(
            report.passed(),
            "{name}: relative error {}",
            report.max_rel_error()
        );
        worst = worst.max(report.max_rel_error());
    }
    let (arch, weights) = supernet_gradient_check(&cfg, 1, 8)?;
    ensure!(
        arch.passed(),
        "supernet architecture gradients: {}",
        arch.max_rel_error()
    );
    ensure!(
        weights.passed(),
        "supernet weight gradients: {}",
        weights.max_rel_error()
    );
    worst = worst.max(arch.max_rel_error()).max(weights.max_rel_error());
    Ok(format!("max relative error {worst:.2e}"))
}

fn one_hot_collapse() -> Result<String> {
    let mut worst: f64 = 0.0;
    for seed in 0..2 {
        let config = NetConfig::new(4, 2, 2, 3);
        let t = build_trellis(4)?;
        let (cell, path) = random_genotype(2, &t, seed)?;
        let mut store = ParamStore::new();
        let net = SuperNet::new(config.clone(), &mut store, seed)?;
        let snap = ArchSnapshot::one_hot(&cell, &path)?;
        net.set_arch(&mut store, &snap.alpha, &snap.beta)?;
        let discrete = DiscreteNet::new(config, &cell, &path, &mut store, seed)?;
        let x = Tensor4::uniform(
            Shape4::new(1, 3, 64, 64),
            0.0,
            1.0,
            &mut ChaCha8Rng::seed_from_u64(seed),
        );
        let mut g1 = Graph::new();
        let a = {
            let mut fx = Fwd::new(&mut g1, &store, NormMode::Batch);
            let xi = fx.g.input(x.clone());
            net.forward(&mut fx, xi)?.logits
        };
        let mut g2 = Graph::new();
        let b = {
            let mut fx = Fwd::new(&mut g2, &store, NormMode::Batch);
            let xi = fx.g.input(x);
            discrete.forward(&mut fx, xi)?
        };
        worst = worst.max(g1.value(a).max_abs_diff(g2.value(b)));
    }
    ensure!(
        worst <= 1e-9,
        "supernet and discrete network differ by {worst:e}"
    );
    Ok(format!("max abs difference {worst:.2e}"))
}

fn thread_cap() -> usize {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    std::env::var("HIERNAS_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .map_or(available, |n| n.min(available))
        .min(SUITES.len())
}

/// Runs every suite on up to `HIERNAS_THREADS` workers; prints one line per
/// suite in a fixed order.
pub fn run() -> Result<()> {
    let next = Mutex::new(0usize);
    let results: Mutex<Vec<SuiteResult>> = Mutex::new((0..SUITES.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..thread_cap() {
            scope.spawn(|| loop {
                let i = {
                    let mut n = next.lock().unwrap();
                    *n += 1;
                    *n - 1
                };
                let Some((_, suite)) = SUITES.get(i) else {
                    break;
                };
                let start = Instant::now();
                let r = suite();
                results.lock().unwrap()[i] = Some((r, start.elapsed().as_secs_f64()));
            });
        }
    });
    let mut failed = 0;
    for ((name, _), r) in SUITES.iter().zip(results.into_inner().unwrap()) {
        match r {
            Some((Ok(detail), secs)) => println!("PASS {name} ({detail}; {secs:.1}s)"),
            Some((Err(e), secs)) => {
                failed += 1;
                println!("FAIL {name} ({e:#}; {secs:.1}s)");
            }
            None => {
                failed += 1;
                println!("FAIL {name} (did not run)");
            }
        }
    }
    if failed > 0 {
        bail!(SelftestFailed(failed));
    }
    Ok(())
}

#[derive(Debug)]
pub struct SelftestFailed(pub usize);

impl std::fmt::Display for SelftestFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} suite(s) failed", self.0)
    }
}

impl std::error::Error for SelftestFailed {}
