//! A small dense-tensor engine with tape-based reverse-mode differentiation.
//!
//! Everything is `f64` and NCHW. A [`Graph`] records operations in creation
//! order, which is already a topological order, so backward is one reverse
//! sweep over the tape.

mod gradcheck;
mod graph;
pub mod kernels;
mod optim;
mod params;
pub mod suite;

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use gradcheck::{gradient_check, CoordSelection, GradCheckConfig, GradCheckReport, ParamCheck};
pub use graph::{Graph, NodeId, OpTag};
pub use kernels::ConvGeom;
pub use optim::{clip_grad_norm, Adam, SgdMomentum};
pub use params::{AdamState, ParamGroup, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Self::new(1, 1, 1, 1)
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn to_array(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Display for Shape4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    shape: Shape4,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(shape: Shape4) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.numel()],
        }
    }

    pub fn full(shape: Shape4, v: f64) -> Self {
        Self {
            shape,
            data: vec![v; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape4, data: Vec<f64>) -> crate::Result<Self> {
        if data.len() != shape.numel() {
            return Err(crate::Error::invalid(format!(
                "{} values for shape {shape} ({} expected)",
                data.len(),
                shape.numel()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: Shape4::scalar(),
            data: vec![v],
        }
    }

    /// Standard-normal entries scaled by `std`.
    pub fn randn<R: Rng>(shape: Shape4, std: f64, rng: &mut R) -> Self {
        let data = (0..shape.numel())
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self { shape, data }
    }

    pub fn uniform<R: Rng>(shape: Shape4, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..shape.numel()).map(|_| rng.gen_range(lo..hi)).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape4 {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.offset(n, c, h, w)]
    }

    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    /// Channels `[start, start + len)` as a new tensor.
    pub fn channel_slice(&self, start: usize, len: usize) -> Tensor4 {
        let s = self.shape;
        let plane = s.plane();
        let mut data = Vec::with_capacity(s.n * len * plane);
        for n in 0..s.n {
            let base = (n * s.c + start) * plane;
            data.extend_from_slice(&self.data[base..base + len * plane]);
        }
        Tensor4 {
            shape: Shape4::new(s.n, len, s.h, s.w),
            data,
        }
    }

    /// Samples `[start, start + len)` along the batch axis.
    pub fn batch_slice(&self, start: usize, len: usize) -> Tensor4 {
        let per = self.shape.c * self.shape.plane();
        Tensor4 {
            shape: Shape4::new(len, self.shape.c, self.shape.h, self.shape.w),
            data: self.data[start * per..(start + len) * per].to_vec(),
        }
    }

    /// Stacks same-shaped tensors along the batch axis.
    pub fn stack_batch(parts: &[&Tensor4]) -> crate::Result<Tensor4> {
        let first = parts
            .first()
            .ok_or_else(|| crate::Error::invalid("nothing to stack"))?
            .shape;
        let mut data = Vec::with_capacity(parts.iter().map(|t| t.data.len()).sum());
        let mut n = 0;
        for t in parts {
            if (t.shape.c, t.shape.h, t.shape.w) != (first.c, first.h, first.w) {
                return Err(crate::Error::shape("stack_batch", first, t.shape));
            }
            n += t.shape.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor4 {
            shape: Shape4::new(n, first.c, first.h, first.w),
            data,
        })
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
