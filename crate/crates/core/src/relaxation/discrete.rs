use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{AsppHead, Connector, ConvNorm, Fwd, OpWeights, ParamFactory, Stem};
use super::supernet::{cell_prefix, input_prefix, prevprev_prefix, NetConfig};
use crate::error::{Error, Result};
use crate::microtensor::{NodeId, ParamStore};
use crate::search_space::{build_trellis, validate_path, CellGenotype, Downsample, NetworkPath};

#[derive(Clone, Debug)]
struct DiscreteCell {
    pre0: ConvNorm,
    pre1: ConvNorm,
    /// Per block, the two `(input index, operator)` branches.
    blocks: Vec<[(usize, OpWeights); 2]>,
}

impl DiscreteCell {
    fn forward(&self, fx: &mut Fwd, h_prev: NodeId, h_prevprev: NodeId) -> Result<NodeId> {
        let h0 = self.pre0.forward(fx, h_prevprev)?;
        let h1 = self.pre1.forward(fx, h_prev)?;
        let mut states = vec![h0, h1];
        for branches in &self.blocks {
            let mut parts = Vec::with_capacity(2);
            for (input, op) in branches {
                let y = op.forward(fx, states[*input])?;
                parts.push(
                    y.ok_or_else(|| Error::Internal("`zero` operator in a discrete cell".into()))?,
                );
            }
            let out = fx.g.add(&parts)?;
            states.push(out);
        }
        fx.g.concat_channels(&states[2..])
    }
}

/// One concrete architecture: a fixed cell repeated along a fixed path.
#[derive(Clone, Debug)]
pub struct DiscreteNet {
    config: NetConfig,
    path: NetworkPath,
    stem: Stem,
    /// Connector from the previous layer's factor, per layer.
    inputs: Vec<Option<Connector>>,
    /// Connector from the previous-previous state's factor, per layer.
    prevprev: Vec<Option<Connector>>,
    cells: Vec<DiscreteCell>,
    head: AsppHead,
}

impl DiscreteNet {
    /// Fetches parameters from `store` by name, creating any that are
    /// missing from `seed`. On a supernet's store this shares its weights.
    pub fn new(
        config: NetConfig,
        cell: &CellGenotype,
        path: &NetworkPath,
        store: &mut ParamStore,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        cell.validate(config.num_blocks)?;
        if path.len() != config.num_layers {
            return Err(Error::validation(format!(
                "path has {} layers, expected {}",
                path.len(),
                config.num_layers
            )));
        }
        validate_path(path, &build_trellis(config.num_layers)?).into_result()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = ParamFactory {
            store,
            rng: &mut rng,
        };
        let stem = Stem::new(
            &mut f,
            config.in_channels,
            config.stem_mid_channels(),
            config.node_channels(Downsample::X4),
        )?;
        let ch = |s: Downsample| config.node_channels(s);
        let factor = |l: usize| {
            if l == 0 {
                Downsample::X4
            } else {
                path.resolutions[l - 1]
            }
        };
        let mut inputs = Vec::new();
        let mut prevprev = Vec::new();
        let mut cells = Vec::new();
        for l in 1..=config.num_layers {
            let s = factor(l);
            let from = factor(l - 1);
            inputs.push(if from == s {
                None
            } else {
                Some(Connector::new(
                    &mut f,
                    &input_prefix(l, s, from),
                    from,
                    s,
                    ch,
                )?)
            });
            let pp = if l <= 2 {
                Downsample::X4
            } else {
                factor(l - 2)
            };
            prevprev.push(if pp == s {
                None
            } else {
                Some(Connector::new(
                    &mut f,
                    &prevprev_prefix(l, s, pp),
                    pp,
                    s,
                    ch,
                )?)
            });
            let prefix = cell_prefix(l, s);
            let (cn, cb) = (config.node_channels(s), config.block_channels(s));
            let pre0 = ConvNorm::preprocess(&mut f, &format!("{prefix}.pre0"), cn, cb)?;
            let pre1 = ConvNorm::preprocess(&mut f, &format!("{prefix}.pre1"), cn, cb)?;
            let blocks = cell
                .blocks
                .iter()
                .enumerate()
                .map(|(b, g)| {
                    let a =
                        OpWeights::new(&mut f, &format!("{prefix}.b{b}.j{}", g.input1), g.op1, cb)?;
                    let c =
                        OpWeights::new(&mut f, &format!("{prefix}.b{b}.j{}", g.input2), g.op2, cb)?;
                    Ok([(g.input1, a), (g.input2, c)])
                })
                .collect::<Result<Vec<_>>>()?;
            cells.push(DiscreteCell { pre0, pre1, blocks });
        }
        let last = factor(config.num_layers);
        let head = AsppHead::new(&mut f, last, config.node_channels(last), config.num_classes)?;
        Ok(Self {
            config,
            path: path.clone(),
            stem,
            inputs,
            prevprev,
            cells,
            head,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn path(&self) -> &NetworkPath {
        &self.path
    }

    /// Per-pixel logits `(n, classes, h, w)` for `images`.
    pub fn forward(&self, fx: &mut Fwd, images: NodeId) -> Result<NodeId> {
        let in_shape = fx.g.shape(images);
        self.config.check_input(in_shape)?;
        let stem = self.stem.forward(fx, images)?;
        let mut states = vec![stem];
        for l in 1..=self.config.num_layers {
            let prev = match &self.inputs[l - 1] {
                Some(c) => c.forward(fx, states[l - 1])?,
                None => states[l - 1],
            };
            let pp_state = if l <= 2 { stem } else { states[l - 2] };
            let pp = match &self.prevprev[l - 1] {
                Some(c) => c.forward(fx, pp_state)?,
                None => pp_state,
            };
            let h = self.cells[l - 1].forward(fx, prev, pp)?;
            states.push(h);
        }
        let y = self.head.forward(fx, states[self.config.num_layers])?;
        fx.g.bilinear_resize(y, in_shape.h, in_shape.w)
    }
}
