//! Parameterised building blocks shared by the supernet and the discrete
//! network. Both look parameters up by name, so a discrete network can be
//! instantiated on top of a supernet's store.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::microtensor::{Graph, NodeId, ParamGroup, ParamId, ParamStore, Shape4, Tensor4};
use crate::search_space::{Downsample, OperatorKind, NUM_OPS};

/// Whether batch normalisation layers are applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    #[default]
    Batch,
    Disabled,
}

/// Forward-pass context: the tape, the parameter values and the norm mode.
pub struct Fwd<'a> {
    pub g: &'a mut Graph,
    pub store: &'a ParamStore,
    pub norm: NormMode,
}

impl<'a> Fwd<'a> {
    pub fn new(g: &'a mut Graph, store: &'a ParamStore, norm: NormMode) -> Self {
        Self { g, store, norm }
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        self.g.param(self.store, id)
    }
}

pub(crate) enum InitKind {
    /// He-normal with the given fan-in.
    He(usize),
    Ones,
    Zeros,
    /// Standard normal times the given scale.
    Gaussian(f64),
}

/// Creates parameters on first request and reuses them (after a shape
/// check) when a parameter of that name already exists.
pub(crate) struct ParamFactory<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng> ParamFactory<'_, R> {
    pub fn get_or_init(
        &mut self,
        name: String,
        group: ParamGroup,
        shape: Shape4,
        init: InitKind,
    ) -> Result<ParamId> {
        if let Some(id) = self.store.id(&name) {
            let have = self.store.value(id).shape();
            if have != shape {
                return Err(Error::Internal(format!(
                    "parameter `{name}` has shape {have}, expected {shape}"
                )));
            }
            return Ok(id);
        }
        let value = match init {
            InitKind::He(fan_in) => Tensor4::randn(shape, (2.0 / fan_in as f64).sqrt(), self.rng),
            InitKind::Ones => Tensor4::full(shape, 1.0),
            InitKind::Zeros => Tensor4::zeros(shape),
            InitKind::Gaussian(scale) => Tensor4::randn(shape, scale, self.rng),
        };
        self.store.insert(name, group, value)
    }

    fn weight(&mut self, name: String, shape: Shape4) -> Result<ParamId> {
        let fan_in = shape.c * shape.h * shape.w;
        self.get_or_init(name, ParamGroup::Weights, shape, InitKind::He(fan_in))
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn new<R: Rng>(f: &mut ParamFactory<R>, prefix: &str, c: usize) -> Result<Self> {
        let shape = Shape4::new(1, c, 1, 1);
        Ok(Self {
            gamma: f.get_or_init(
                format!("{prefix}.bn.gamma"),
                ParamGroup::Weights,
                shape,
                InitKind::Ones,
            )?,
            beta: f.get_or_init(
                format!("{prefix}.bn.beta"),
                ParamGroup::Weights,
                shape,
                InitKind::Zeros,
            )?,
        })
    }

    fn apply(&self, fx: &mut Fwd, x: NodeId) -> Result<NodeId> {
        match fx.norm {
            NormMode::Batch => {
                let (ga, be) = (fx.param(self.gamma), fx.param(self.beta));
                fx.g.batch_norm(x, Some(ga), Some(be))
            }
            NormMode::Disabled => Ok(x),
        }
    }
}

/// Optional ReLU, convolution, batch norm, optional ReLU.
#[derive(Clone, Debug)]
pub(crate) struct ConvNorm {
    w: ParamId,
    norm: Norm,
    stride: usize,
    dilation: usize,
    relu_in: bool,
    relu_out: bool,
}

impl ConvNorm {
    #[allow(clippy::too_many_arguments)]
    fn new<R: Rng>(
        f: &mut ParamFactory<R>,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        dilation: usize,
        relus: (bool, bool),
    ) -> Result<Self> {
        Ok(Self {
            w: f.weight(format!("{prefix}.w"), Shape4::new(c_out, c_in, k, k))?,
            norm: Norm::new(f, prefix, c_out)?,
            stride,
            dilation,
            relu_in: relus.0,
            relu_out: relus.1,
        })
    }

    /// ReLU → 1×1 conv → BN, the cell input preprocessing.
    pub fn preprocess<R: Rng>(
        f: &mut ParamFactory<R>,
        prefix: &str,
        c_in: usize,
        c_out: usize,
    ) -> Result<Self> {
        Self::new(f, prefix, c_in, c_out, 1, 1, 1, (true, false))
    }

    pub fn forward(&self, fx: &mut Fwd, x: NodeId) -> Result<NodeId> {
        let x = if self.relu_in { fx.g.relu(x) } else { x };
        let w = fx.param(self.w);
        let y = fx.g.conv2d(x, w, None, self.stride, self.dilation, 1)?;
        let y = self.norm.apply(fx, y)?;
        Ok(if self.relu_out { fx.g.relu(y) } else { y })
    }
}

/// ReLU → depthwise k×k (dilated) → pointwise → BN.
#[derive(Clone, Debug)]
pub(crate) struct SepConvNorm {
    dw: ParamId,
    pw: ParamId,
    norm: Norm,
    dilation: usize,
}

impl SepConvNorm {
    fn new<R: Rng>(
        f: &mut ParamFactory<R>,
        prefix: &str,
        c: usize,
        k: usize,
        dilation: usize,
    ) -> Result<Self> {
        Ok(Self {
            dw: f.weight(format!("{prefix}.dw"), Shape4::new(c, 1, k, k))?,
            pw: f.weight(format!("{prefix}.pw"), Shape4::new(c, c, 1, 1))?,
            norm: Norm::new(f, prefix, c)?,
            dilation,
        })
    }

    fn forward(&self, fx: &mut Fwd, x: NodeId) -> Result<NodeId> {
        let x = fx.g.relu(x);
        let (dw, pw) = (fx.param(self.dw), fx.param(self.pw));
        let y = fx.g.separable_conv(x, dw, pw, self.dilation)?;
        self.norm.apply(fx, y)
    }
}

/// Weights of one candidate operator on one cell edge (`None` for the
/// parameter-free operators).
#[derive(Clone, Debug)]
pub(crate) struct OpWeights {
    pub kind: OperatorKind,
    conv: Option<SepConvNorm>,
}

impl OpWeights {
    pub fn new<R: Rng>(
        f: &mut ParamFactory<R>,
        prefix: &str,
        kind: OperatorKind,
        c: usize,
    ) -> Result<Self> {
        let conv = match kind.conv_geometry() {
            Some((k, d)) => Some(SepConvNorm::new(
                f,
                &format!("{prefix}.{}", kind.name()),
                c,
                k,
                d,
            )?),
            None => None,
        };
        Ok(Self { kind, conv })
    }

    /// Applies the operator; `None` for `zero`, which contributes nothing.
    pub fn forward(&self, fx: &mut Fwd, x: NodeId) -> Result<Option<NodeId>> {
        Ok(match self.kind {
            OperatorKind::Zero => None,
            OperatorKind::SkipConnect => Some(fx.g.identity(x)),
            OperatorKind::AvgPool3x3 => Some(fx.g.avg_pool_3x3(x)),
            OperatorKind::MaxPool3x3 => Some(fx.g.max_pool_3x3(x)),
            _ => {
                let conv = self
                    .conv
                    .as_ref()
                    .ok_or_else(|| Error::Internal(format!("{} has no weights", self.kind)))?;
                Some(conv.forward(fx, x)?)
            }
        })
    }
}

/// All eight candidate operators on one (block, input) edge.
#[derive(Clone, Debug)]
pub struct EdgeWeights {
    pub(crate) ops: Vec<OpWeights>,
}

impl EdgeWeights {
    pub(crate) fn new<R: Rng>(f: &mut ParamFactory<R>, prefix: &str, c: usize) -> Result<Self> {
        let ops = OperatorKind::ALL
            .iter()
            .map(|&k| OpWeights::new(f, prefix, k, c))
            .collect::<Result<Vec<_>>>()?;
        debug_assert_eq!(ops.len(), NUM_OPS);
        Ok(Self { ops })
    }
}

/// One resolution step between trellis nodes.
#[derive(Clone, Debug)]
pub(crate) enum Resample {
    /// ReLU → 3×3 stride-2 conv → BN.
    Down(ConvNorm),
    /// ReLU → bilinear ×2 → 1×1 conv → BN.
    Up(ConvNorm),
}

impl Resample {
    pub fn forward(&self, fx: &mut Fwd, x: NodeId) -> Result<NodeId> {
        match self {
            Resample::Down(c) => c.forward(fx, x),
            Resample::Up(c) => {
                let x = fx.g.relu(x);
                let x = fx.g.bilinear_upsample_x2(x)?;
                c.forward(fx, x)
            }
        }
    }
}

/// A chain of resolution steps from `from` to `to` (empty when equal).
#[derive(Clone, Debug)]
pub(crate) struct Connector {
    steps: Vec<Resample>,
}

impl Connector {
    pub fn new<R: Rng>(
        f: &mut ParamFactory<R>,
        prefix: &str,
        from: Downsample,
        to: Downsample,
        channels: impl Fn(Downsample) -> usize,
    ) -> Result<Self> {
        let mut steps = Vec::new();
        let mut cur = from;
        let mut k = 0;
        while cur != to {
            let name = if from.index().abs_diff(to.index()) == 1 {
                prefix.to_string()
            } else {
                format!("{prefix}.step{k}")
            };
            if cur < to {
                let next = cur
                    .coarser()
                    .expect("coarser factor exists below the target");
                steps.push(Resample::Down(ConvNorm::new(
                    f,
                    &name,
                    channels(cur),
                    channels(next),
                    3,
                    2,
                    1,
                    (true, false),
                )?));
                cur = next;
            } else {
                let next = cur.finer().expect("finer factor exists above the target");
                steps.push(Resample::Up(ConvNorm::new(
                    f,
                    &name,
                    channels(cur),
                    channels(next),
                    1,
                    1,
                    1,
                    (false, false),
                )?));
                cur = next;
            }
            k += 1;
        }
        Ok(Self { steps })
    }

    pub fn forward(&self, fx: &mut Fwd, mut x: NodeId) -> Result<NodeId> {
        for s in &self.steps {
            x = s.forward(fx, x)?;
        }
        Ok(x)
    }
}

/// Two stride-2 conv → BN → ReLU layers taking the image to factor 4.
#[derive(Clone, Debug)]
pub(crate) struct Stem {
    convs: [ConvNorm; 2],
}

impl Stem {
    pub fn new<R: Rng>(
        f: &mut ParamFactory<R>,
        c_in: usize,
        c_mid: usize,
        c_out: usize,
    ) -> Result<Self> {
        Ok(Self {
            convs: [
                ConvNorm::new(f, "stem.0", c_in, c_mid, 3, 2, 1, (false, true))?,
                ConvNorm::new(f, "stem.1", c_mid, c_out, 3, 2, 1, (false, true))?,
            ],
        })
    }

    pub fn forward(&self, fx: &mut Fwd, x: NodeId) -> Result<NodeId> {
        let x = self.convs[0].forward(fx, x)?;
        self.convs[1].forward(fx, x)
    }
}

/// Three-branch atrous spatial pyramid pooling followed by a classifier.
#[derive(Clone, Debug)]
pub(crate) struct AsppHead {
    conv1: ConvNorm,
    atrous: ConvNorm,
    pool_w: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
}

impl AsppHead {
    pub fn new<R: Rng>(
        f: &mut ParamFactory<R>,
        s: Downsample,
        c: usize,
        num_classes: usize,
    ) -> Result<Self> {
        let prefix = format!("head.s{}", s.factor());
        Ok(Self {
            conv1: ConvNorm::new(
                f,
                &format!("{prefix}.conv1x1"),
                c,
                c,
                1,
                1,
                1,
                (false, true),
            )?,
            atrous: ConvNorm::new(
                f,
                &format!("{prefix}.atrous"),
                c,
                c,
                3,
                1,
                atrous_rate(s),
                (false, true),
            )?,
            pool_w: f.weight(format!("{prefix}.pool.w"), Shape4::new(c, c, 1, 1))?,
            proj_w: f.weight(
                format!("{prefix}.proj.w"),
                Shape4::new(num_classes, 3 * c, 1, 1),
            )?,
            proj_b: f.get_or_init(
                format!("{prefix}.proj.b"),
                ParamGroup::Weights,
                Shape4::new(1, num_classes, 1, 1),
                InitKind::Zeros,
            )?,
        })
    }

    pub fn forward(&self, fx: &mut Fwd, x: NodeId) -> Result<NodeId> {
        let s = fx.g.shape(x);
        let b1 = self.conv1.forward(fx, x)?;
        let b2 = self.atrous.forward(fx, x)?;
        let pooled = fx.g.global_avg_pool(x);
        let pw = fx.param(self.pool_w);
        let b3 = fx.g.conv2d(pooled, pw, None, 1, 1, 1)?;
        let b3 = fx.g.relu(b3);
        let b3 = fx.g.bilinear_resize(b3, s.h, s.w)?;
        let cat = fx.g.concat_channels(&[b1, b2, b3])?;
        let (w, b) = (fx.param(self.proj_w), fx.param(self.proj_b));
        fx.g.conv2d(cat, w, Some(b), 1, 1, 1)
    }
}

/// Dilation of the ASPP 3×3 branch at factor `s`.
pub fn atrous_rate(s: Downsample) -> usize {
    96 / s.factor()
}
