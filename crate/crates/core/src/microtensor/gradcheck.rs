use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, NodeId, ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CoordSelection {
    All,
    /// At most `per_param` coordinates per parameter, chosen with `seed`.
    Sample {
        per_param: usize,
        seed: u64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub h: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator, so coordinates whose
    /// true derivative is ~0 are judged on absolute error.
    pub abs_floor: f64,
    pub coords: CoordSelection,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-4,
            tolerance: 1e-4,
            abs_floor: 1e-6,
            coords: CoordSelection::All,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a ReLU kink or changed a
    /// max-pool winner; the finite difference is meaningless there.
    pub skipped_nondifferentiable: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= self.tolerance
    }

    pub fn skipped(&self) -> usize {
        self.params
            .iter()
            .map(|p| p.skipped_nondifferentiable)
            .sum()
    }
}

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// central differences, one coordinate at a time.
pub fn gradient_check<F>(
    f: F,
    store: &mut ParamStore,
    params: &[ParamId],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<NodeId>,
{
    if cfg.h <= 0.0 {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let eval = |store: &ParamStore| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let loss = f(&mut g, store)?;
        Ok((g.value(loss).data()[0], g.kink_signature()))
    };

    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    g.backward(loss)?;
    let base_sig = g.kink_signature();
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|&p| match g.param_node(p).and_then(|n| g.grad(n)) {
            Some(gr) => gr.to_vec(),
            None => vec![0.0; store.value(p).shape().numel()],
        })
        .collect();
    drop(g);

    let mut report = Vec::with_capacity(params.len());
    for (pi, &p) in params.iter().enumerate() {
        let numel = store.value(p).shape().numel();
        let coords: Vec<usize> = match cfg.coords {
            CoordSelection::All => (0..numel).collect(),
            CoordSelection::Sample { per_param, seed } if per_param < numel => {
                let mut rng = ChaCha8Rng::seed_from_u64(
                    seed ^ (pi as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
                );
                let mut v = sample(&mut rng, numel, per_param).into_vec();
                v.sort_unstable();
                v
            }
            CoordSelection::Sample { .. } => (0..numel).collect(),
        };
        let mut check = ParamCheck {
            name: store.name(p).to_string(),
            max_rel_error: 0.0,
            checked: 0,
            skipped_nondifferentiable: 0,
        };
        for i in coords {
            let orig = store.value(p).data()[i];
            store.value_mut(p).data_mut()[i] = orig + cfg.h;
            let plus = eval(store);
            store.value_mut(p).data_mut()[i] = orig - cfg.h;
            let minus = eval(store);
            store.value_mut(p).data_mut()[i] = orig;
            let ((lp, sp), (lm, sm)) = (plus?, minus?);
            if sp != base_sig || sm != base_sig {
                check.skipped_nondifferentiable += 1;
                continue;
            }
            let fd = (lp - lm) / (2.0 * cfg.h);
            let err = relative_error(fd, analytic[pi][i], cfg.abs_floor);
            check.max_rel_error = check.max_rel_error.max(err);
            check.checked += 1;
        }
        report.push(check);
    }
    Ok(GradCheckReport {
        params: report,
        tolerance: cfg.tolerance,
    })
}
