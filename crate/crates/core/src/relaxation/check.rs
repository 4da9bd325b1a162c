use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AlphaLogits, BetaLogits, Fwd, NetConfig, NormMode, SuperNet};
use crate::error::Result;
use crate::microtensor::{
    gradient_check, CoordSelection, GradCheckConfig, GradCheckReport, Graph, ParamGroup, ParamId,
    ParamStore, Shape4, Tensor4,
};

/// Finite-difference check of a whole supernet loss (L=3, B=2, F=2 on a
/// 2×3×64×64 batch): every architecture coordinate, plus `weight_samples`
/// sampled coordinates of every weight tensor. Returns the architecture and
/// weight reports.
///
/// At 32×32 the factor-32 nodes are 1×1, so their batch norm sees two values
/// per channel; that loss surface is too sharply curved for a 1e-4 step.
pub fn supernet_gradient_check(
    cfg: &GradCheckConfig,
    weight_samples: usize,
    seed: u64,
) -> Result<(GradCheckReport, GradCheckReport)> {
    let mut store = ParamStore::new();
    let net = SuperNet::new(NetConfig::new(3, 2, 2, 3), &mut store, seed)?;
    // larger architecture logits so their gradients are not tiny
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
    let alpha = AlphaLogits::random(2, 0.5, &mut rng);
    let beta = BetaLogits::random(net.trellis(), 0.5, &mut rng);
    net.set_arch(&mut store, &alpha, &beta)?;
    let x = Tensor4::uniform(Shape4::new(2, 3, 64, 64), 0.0, 1.0, &mut rng);
    let labels: Vec<u8> = (0..2 * 64 * 64).map(|i| ((i / 7) % 3) as u8).collect();
    let loss = |g: &mut Graph, s: &ParamStore| {
        let mut fx = Fwd::new(g, s, NormMode::Batch);
        let xi = fx.g.input(x.clone());
        let out = net.forward(&mut fx, xi)?;
        g.cross_entropy_spatial(out.logits, &labels, None)
    };
    let arch: Vec<ParamId> = store.ids_in(ParamGroup::Architecture).collect();
    let arch_report = gradient_check(
        loss,
        &mut store,
        &arch,
        &GradCheckConfig {
            coords: CoordSelection::All,
            ..*cfg
        },
    )?;
    let weights: Vec<ParamId> = store.ids_in(ParamGroup::Weights).collect();
    let sample = GradCheckConfig {
        coords: CoordSelection::Sample {
            per_param: weight_samples,
            seed,
        },
        ..*cfg
    };
    let weight_report = gradient_check(loss, &mut store, &weights, &sample)?;
    Ok((arch_report, weight_report))
}
