use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::arch::{alpha_group, beta_flat_index, AlphaLogits, ArchSnapshot, BetaLogits, BetaMask};
use super::layers::{
    AsppHead, Connector, ConvNorm, EdgeWeights, Fwd, InitKind, NormMode, ParamFactory, Stem,
};
use crate::error::{Error, Result};
use crate::microtensor::{NodeId, ParamGroup, ParamId, ParamStore, Shape4};
use crate::search_space::{Direction, Downsample, StartConvention, Trellis, NUM_OPS};

/// Scale of the Gaussian used to initialise α and β logits.
pub const ARCH_INIT_SCALE: f64 = 1e-3;

/// Widths and sizes shared by the supernet and discrete networks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub num_layers: usize,
    pub num_blocks: usize,
    pub filter_multiplier: usize,
    pub num_classes: usize,
    pub in_channels: usize,
    pub norm: NormMode,
}

impl NetConfig {
    pub fn new(
        num_layers: usize,
        num_blocks: usize,
        filter_multiplier: usize,
        num_classes: usize,
    ) -> Self {
        Self {
            num_layers,
            num_blocks,
            filter_multiplier,
            num_classes,
            in_channels: 3,
            norm: NormMode::Batch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("layers", self.num_layers),
            ("blocks", self.num_blocks),
            ("filter multiplier", self.filter_multiplier),
            ("input channels", self.in_channels),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("at least two classes are required"));
        }
        Ok(())
    }

    /// Channels of one block output at factor `s`: F·s/4.
    pub fn block_channels(&self, s: Downsample) -> usize {
        self.filter_multiplier * s.factor() / 4
    }

    /// Channels of a trellis node at factor `s`: B·F·s/4.
    pub fn node_channels(&self, s: Downsample) -> usize {
        self.num_blocks * self.block_channels(s)
    }

    /// Width of the first stem layer, ⌈B·F/2⌉.
    pub fn stem_mid_channels(&self) -> usize {
        (self.num_blocks * self.filter_multiplier).div_ceil(2)
    }

    pub(crate) fn check_input(&self, shape: Shape4) -> Result<()> {
        if !shape.h.is_multiple_of(32)
            || !shape.w.is_multiple_of(32)
            || shape.h == 0
            || shape.w == 0
        {
            return Err(Error::invalid(format!(
                "input {}×{} is not divisible by 32",
                shape.h, shape.w
            )));
        }
        if shape.c != self.in_channels {
            return Err(Error::invalid(format!(
                "input has {} channels, expected {}",
                shape.c, self.in_channels
            )));
        }
        Ok(())
    }
}

pub(crate) fn cell_prefix(layer: usize, s: Downsample) -> String {
    format!("l{layer}.s{}.cell", s.factor())
}

pub(crate) fn input_prefix(layer: usize, to: Downsample, from: Downsample) -> String {
    format!("l{layer}.s{}.in{}", to.factor(), from.factor())
}

pub(crate) fn prevprev_prefix(layer: usize, to: Downsample, from: Downsample) -> String {
    format!("l{layer}.s{}.pp{}", to.factor(), from.factor())
}

/// A cell with every candidate operator on every edge.
#[derive(Clone, Debug)]
pub struct MixedCell {
    pub(crate) pre0: ConvNorm,
    pub(crate) pre1: ConvNorm,
    /// `edges[block][input]`
    pub(crate) edges: Vec<Vec<EdgeWeights>>,
}

impl MixedCell {
    pub(crate) fn new<R: rand::Rng>(
        f: &mut ParamFactory<R>,
        prefix: &str,
        cfg: &NetConfig,
        s: Downsample,
    ) -> Result<Self> {
        let (cn, cb) = (cfg.node_channels(s), cfg.block_channels(s));
        let pre0 = ConvNorm::preprocess(f, &format!("{prefix}.pre0"), cn, cb)?;
        let pre1 = ConvNorm::preprocess(f, &format!("{prefix}.pre1"), cn, cb)?;
        let edges = (0..cfg.num_blocks)
            .map(|b| {
                (0..b + 2)
                    .map(|j| EdgeWeights::new(f, &format!("{prefix}.b{b}.j{j}"), cb))
                    .collect()
            })
            .collect::<Result<Vec<Vec<_>>>>()?;
        Ok(Self { pre0, pre1, edges })
    }

    pub fn num_blocks(&self) -> usize {
        self.edges.len()
    }

    /// The channel-adapted `(previous, previous-previous)` inputs that the
    /// blocks actually read.
    pub fn preprocess(
        &self,
        fx: &mut Fwd,
        h_prev: NodeId,
        h_prevprev: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        Ok((
            self.pre1.forward(fx, h_prev)?,
            self.pre0.forward(fx, h_prevprev)?,
        ))
    }

    pub fn edge(&self, block: usize, input: usize) -> &EdgeWeights {
        &self.edges[block][input]
    }
}

/// Σ_k α^k · O^k(x) for the edge whose α group is `group`. `alpha_probs`
/// is the `(groups, 8, 1, 1)` probability node shared by the whole network.
pub fn mixed_operator(
    fx: &mut Fwd,
    edge: &EdgeWeights,
    x: NodeId,
    alpha_probs: NodeId,
    group: usize,
) -> Result<NodeId> {
    let mut terms = Vec::with_capacity(NUM_OPS);
    for op in &edge.ops {
        if let Some(y) = op.forward(fx, x)? {
            terms.push((y, alpha_probs, group * NUM_OPS + op.kind.index()));
        }
    }
    fx.g.weighted_sum(&terms)
}

/// Mixed operators applied to the preprocessed previous-previous input,
/// one per block. They do not depend on the previous input, so a node
/// computes them once for all of its incoming cells.
fn prevprev_terms(
    fx: &mut Fwd,
    cell: &MixedCell,
    h_prevprev: NodeId,
    alpha_probs: NodeId,
) -> Result<Vec<NodeId>> {
    let h0 = cell.pre0.forward(fx, h_prevprev)?;
    (0..cell.num_blocks())
        .map(|b| mixed_operator(fx, &cell.edges[b][0], h0, alpha_probs, alpha_group(b, 0)))
        .collect()
}

fn cell_with_terms(
    fx: &mut Fwd,
    cell: &MixedCell,
    h_prev: NodeId,
    pp_terms: &[NodeId],
    alpha_probs: NodeId,
) -> Result<NodeId> {
    let h1 = cell.pre1.forward(fx, h_prev)?;
    let mut states = vec![h1];
    for b in 0..cell.num_blocks() {
        let mut parts = vec![pp_terms[b]];
        for j in 1..b + 2 {
            parts.push(mixed_operator(
                fx,
                &cell.edges[b][j],
                states[j - 1],
                alpha_probs,
                alpha_group(b, j),
            )?);
        }
        let out = fx.g.add(&parts)?;
        states.push(out);
    }
    fx.g.concat_channels(&states[1..])
}

/// All B blocks of a relaxed cell; returns their channel concatenation.
pub fn cell_forward(
    fx: &mut Fwd,
    cell: &MixedCell,
    h_prev: NodeId,
    h_prevprev: NodeId,
    alpha_probs: NodeId,
) -> Result<NodeId> {
    let (a, b) = (fx.g.shape(h_prev), fx.g.shape(h_prevprev));
    if (a.n, a.h, a.w) != (b.n, b.h, b.w) {
        return Err(Error::shape("cell_forward", a, b));
    }
    let terms = prevprev_terms(fx, cell, h_prevprev, alpha_probs)?;
    cell_with_terms(fx, cell, h_prev, &terms, alpha_probs)
}

/// Graph nodes produced by one supernet forward pass.
#[derive(Clone, Debug)]
pub struct SuperNetOutput {
    pub logits: NodeId,
    pub alpha_probs: NodeId,
    pub beta_probs: NodeId,
    pub stem: NodeId,
    /// `(layer, factor, state)` for every active node.
    pub nodes: Vec<(usize, Downsample, NodeId)>,
    /// Cell output nodes, one per incoming edge of every active node.
    pub cells: Vec<NodeId>,
}

/// The relaxed network: every trellis node, every cell operator.
#[derive(Clone, Debug)]
pub struct SuperNet {
    config: NetConfig,
    trellis: Trellis,
    graph_mask: Vec<bool>,
    alpha: ParamId,
    beta: ParamId,
    stem: Stem,
    inputs: HashMap<(usize, Downsample, Downsample), Connector>,
    prevprev: HashMap<(usize, Downsample, Downsample), Connector>,
    cells: HashMap<(usize, Downsample), MixedCell>,
    heads: HashMap<Downsample, AsppHead>,
}

/// Factors of the previous layer's states: the stem for layer 0.
pub(crate) fn layer_factors(trellis: &Trellis, layer: usize) -> Vec<Downsample> {
    if layer == 0 {
        vec![Downsample::X4]
    } else {
        trellis.layer_nodes(layer).to_vec()
    }
}

impl SuperNet {
    /// Registers every parameter in `store` (α and β in the architecture
    /// group, the rest as weights), initialised from `seed`.
    pub fn new(config: NetConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        config.validate()?;
        let trellis = Trellis::new(config.num_layers, StartConvention::FirstLayer4Or8)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = ParamFactory {
            store,
            rng: &mut rng,
        };
        let alpha = f.get_or_init(
            "alpha".into(),
            ParamGroup::Architecture,
            AlphaLogits::zeros(config.num_blocks).to_tensor().shape(),
            InitKind::Gaussian(ARCH_INIT_SCALE),
        )?;
        let beta = f.get_or_init(
            "beta".into(),
            ParamGroup::Architecture,
            Shape4::new(config.num_layers, 3, 4, 1),
            InitKind::Zeros,
        )?;
        // Gaussian on open directions only, so closed logits stay 0.
        let b = BetaLogits::random(&trellis, ARCH_INIT_SCALE, f.rng);
        *f.store.value_mut(beta) = b.to_tensor();

        let stem = Stem::new(
            &mut f,
            config.in_channels,
            config.stem_mid_channels(),
            config.node_channels(Downsample::X4),
        )?;
        let ch = |s: Downsample| config.node_channels(s);
        let mut inputs = HashMap::new();
        let mut prevprev = HashMap::new();
        let mut cells = HashMap::new();
        for l in 1..=config.num_layers {
            for &s in trellis.layer_nodes(l) {
                for from in layer_factors(&trellis, l - 1) {
                    if from != s && Direction::between(from, s).is_some() {
                        inputs.insert(
                            (l, s, from),
                            Connector::new(&mut f, &input_prefix(l, s, from), from, s, ch)?,
                        );
                    }
                }
                let pp_layer = l.saturating_sub(2);
                for from in layer_factors(&trellis, if l <= 2 { 0 } else { pp_layer }) {
                    if from != s {
                        prevprev.insert(
                            (l, s, from),
                            Connector::new(&mut f, &prevprev_prefix(l, s, from), from, s, ch)?,
                        );
                    }
                }
                cells.insert(
                    (l, s),
                    MixedCell::new(&mut f, &cell_prefix(l, s), &config, s)?,
                );
            }
        }
        let mut heads = HashMap::new();
        for &s in trellis.layer_nodes(config.num_layers) {
            heads.insert(
                s,
                AsppHead::new(&mut f, s, config.node_channels(s), config.num_classes)?,
            );
        }
        let graph_mask = BetaMask::from_trellis(&trellis).to_graph_mask();
        Ok(Self {
            config,
            trellis,
            graph_mask,
            alpha,
            beta,
            stem,
            inputs,
            prevprev,
            cells,
            heads,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn trellis(&self) -> &Trellis {
        &self.trellis
    }

    pub fn alpha_id(&self) -> ParamId {
        self.alpha
    }

    pub fn beta_id(&self) -> ParamId {
        self.beta
    }

    pub fn cell(&self, layer: usize, s: Downsample) -> Option<&MixedCell> {
        self.cells.get(&(layer, s))
    }

    pub fn alpha_logits(&self, store: &ParamStore) -> Result<AlphaLogits> {
        AlphaLogits::from_tensor(self.config.num_blocks, store.value(self.alpha))
    }

    pub fn beta_logits(&self, store: &ParamStore) -> Result<BetaLogits> {
        BetaLogits::from_tensor(&self.trellis, store.value(self.beta))
    }

    pub fn snapshot(&self, store: &ParamStore) -> Result<ArchSnapshot> {
        Ok(ArchSnapshot {
            alpha: self.alpha_logits(store)?,
            beta: self.beta_logits(store)?,
        })
    }

    pub fn set_arch(
        &self,
        store: &mut ParamStore,
        alpha: &AlphaLogits,
        beta: &BetaLogits,
    ) -> Result<()> {
        if alpha.num_blocks() != self.config.num_blocks || beta.trellis() != &self.trellis {
            return Err(Error::invalid(
                "architecture logits do not fit this supernet",
            ));
        }
        *store.value_mut(self.alpha) = alpha.to_tensor();
        *store.value_mut(self.beta) = beta.to_tensor();
        Ok(())
    }

    /// Runs the relaxed network on `images` (an `(n, c, h, w)` node).
    ///
    /// A node whose reach probability from the stem (the sum over incoming
    /// edges of source reach times β) is exactly zero is treated as absent,
    /// and a missing previous-previous state is replaced by the nearest
    /// present factor of that layer through a connector chain.
    pub fn forward(&self, fx: &mut Fwd, images: NodeId) -> Result<SuperNetOutput> {
        let in_shape = fx.g.shape(images);
        self.config.check_input(in_shape)?;
        let a = fx.param(self.alpha);
        let alpha_probs = fx.g.softmax_over_channel(a, None)?;
        let b = fx.param(self.beta);
        let beta_probs = fx.g.softmax_over_channel(b, Some(&self.graph_mask))?;
        let bp = fx.g.value(beta_probs).data().to_vec();

        let layers = self.config.num_layers;
        let mut reach = vec![[0.0f64; 4]; layers + 1];
        let mut states: Vec<[Option<NodeId>; 4]> = vec![[None; 4]; layers + 1];
        let stem = self.stem.forward(fx, images)?;
        reach[0][Downsample::X4.index()] = 1.0;
        states[0][Downsample::X4.index()] = Some(stem);
        let mut nodes = Vec::new();
        let mut cell_nodes = Vec::new();

        for l in 1..=layers {
            for &s in self.trellis.layer_nodes(l) {
                let sources: Vec<(Downsample, usize)> = layer_factors(&self.trellis, l - 1)
                    .into_iter()
                    .filter(|&from| states[l - 1][from.index()].is_some())
                    .filter_map(|from| {
                        Direction::between(from, s).map(|d| (from, beta_flat_index(l - 1, from, d)))
                    })
                    .collect();
                let r: f64 = sources
                    .iter()
                    .map(|&(from, idx)| reach[l - 1][from.index()] * bp[idx])
                    .sum();
                if r == 0.0 {
                    continue;
                }
                reach[l][s.index()] = r;

                let (pp_factor, pp_state) = if l <= 2 {
                    (Downsample::X4, stem)
                } else {
                    nearest_state(&states[l - 2], s)
                        .ok_or_else(|| Error::Internal(format!("layer {} has no state", l - 2)))?
                };
                let pp = if pp_factor == s {
                    pp_state
                } else {
                    self.prevprev[&(l, s, pp_factor)].forward(fx, pp_state)?
                };
                let cell = &self.cells[&(l, s)];
                let terms = prevprev_terms(fx, cell, pp, alpha_probs)?;
                let mut weighted = Vec::with_capacity(sources.len());
                for (from, idx) in sources {
                    let state = states[l - 1][from.index()].expect("filtered above");
                    let prev = if from == s {
                        state
                    } else {
                        self.inputs[&(l, s, from)].forward(fx, state)?
                    };
                    let out = cell_with_terms(fx, cell, prev, &terms, alpha_probs)?;
                    cell_nodes.push(out);
                    weighted.push((out, beta_probs, idx));
                }
                let h = fx.g.weighted_sum(&weighted)?;
                states[l][s.index()] = Some(h);
                nodes.push((l, s, h));
            }
        }

        let mut outs = Vec::new();
        for &s in self.trellis.layer_nodes(layers) {
            if let Some(h) = states[layers][s.index()] {
                let y = self.heads[&s].forward(fx, h)?;
                outs.push(fx.g.bilinear_resize(y, in_shape.h, in_shape.w)?);
            }
        }
        let logits = if outs.len() == 1 {
            outs[0]
        } else {
            fx.g.add(&outs)?
        };
        Ok(SuperNetOutput {
            logits,
            alpha_probs,
            beta_probs,
            stem,
            nodes,
            cells: cell_nodes,
        })
    }
}

/// Present state whose factor is closest to `s`, preferring the finer one on
/// ties.
fn nearest_state(layer: &[Option<NodeId>; 4], s: Downsample) -> Option<(Downsample, NodeId)> {
    Downsample::ALL
        .into_iter()
        .filter_map(|f| layer[f.index()].map(|n| (f, n)))
        .min_by_key(|(f, _)| (f.index().abs_diff(s.index()), f.index()))
}
