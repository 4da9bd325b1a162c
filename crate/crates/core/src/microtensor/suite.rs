//! Finite-difference checks for every primitive, shared by the test suites
//! and the `selftest` command.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    gradient_check, GradCheckConfig, GradCheckReport, Graph, NodeId, ParamGroup, ParamId,
    ParamStore, Shape4, Tensor4,
};
use crate::error::Result;

type Builder = Box<dyn Fn(&mut Graph, &ParamStore, &[ParamId]) -> Result<NodeId>>;

struct Case {
    name: &'static str,
    params: Vec<(Shape4, f64)>,
    build: Builder,
}

/// Contracts `out` against a fixed pseudo-random weighting so that every
/// output element carries a distinct upstream gradient.
fn project(g: &mut Graph, out: NodeId) -> Result<NodeId> {
    let s = g.shape(out);
    let data = (0..s.numel())
        .map(|i| ((i * 7919 % 23) as f64 - 11.0) / 7.0)
        .collect();
    let r = g.input(Tensor4::from_vec(s, data)?);
    let p = g.mul(out, r)?;
    Ok(g.sum(p))
}

fn cases() -> Vec<Case> {
    let x5 = Shape4::new(1, 2, 5, 5);
    let x6 = Shape4::new(2, 3, 6, 6);
    vec![
        Case {
            name: "conv2d",
            params: vec![
                (x5, 1.0),
                (Shape4::new(3, 2, 3, 3), 0.5),
                (Shape4::new(1, 3, 1, 1), 0.5),
            ],
            build: Box::new(|g, s, p| {
                let (x, w, b) = (g.param(s, p[0]), g.param(s, p[1]), g.param(s, p[2]));
                let y = g.conv2d(x, w, Some(b), 1, 1, 1)?;
                project(g, y)
            }),
        },
        Case {
            name: "conv2d_stride2",
            params: vec![(x6, 1.0), (Shape4::new(4, 3, 3, 3), 0.5)],
            build: Box::new(|g, s, p| {
                let (x, w) = (g.param(s, p[0]), g.param(s, p[1]));
                let y = g.conv2d(x, w, None, 2, 1, 1)?;
                project(g, y)
            }),
        },
        Case {
            name: "conv2d_dilated_grouped",
            params: vec![(x6, 1.0), (Shape4::new(3, 1, 5, 5), 0.5)],
            build: Box::new(|g, s, p| {
                let (x, w) = (g.param(s, p[0]), g.param(s, p[1]));
                let y = g.conv2d(x, w, None, 1, 2, 3)?;
                project(g, y)
            }),
        },
        Case {
            name: "separable_conv_3x3",
            params: vec![
                (x6, 1.0),
                (Shape4::new(3, 1, 3, 3), 0.5),
                (Shape4::new(4, 3, 1, 1), 0.5),
            ],
            build: Box::new(|g, s, p| {
                let (x, dw, pw) = (g.param(s, p[0]), g.param(s, p[1]), g.param(s, p[2]));
                let y = g.separable_conv(x, dw, pw, 1)?;
                project(g, y)
            }),
        },
        Case {
            name: "separable_conv_5x5_rate2",
            params: vec![
                (x6, 1.0),
                (Shape4::new(3, 1, 5, 5), 0.5),
                (Shape4::new(3, 3, 1, 1), 0.5),
            ],
            build: Box::new(|g, s, p| {
                let (x, dw, pw) = (g.param(s, p[0]), g.param(s, p[1]), g.param(s, p[2]));
                let y = g.separable_conv(x, dw, pw, 2)?;
                project(g, y)
            }),
        },
        Case {
            name: "avg_pool_3x3",
            params: vec![(x5, 1.0)],
            build: Box::new(|g, s, p| {
                let x = g.param(s, p[0]);
                let y = g.avg_pool_3x3(x);
                project(g, y)
            }),
        },
        Case {
            name: "max_pool_3x3",
            params: vec![(x5, 1.0)],
            build: Box::new(|g, s, p| {
                let x = g.param(s, p[0]);
                let y = g.max_pool_3x3(x);
                project(g, y)
            }),
        },
        Case {
            name: "add_and_weighted_sum",
            params: vec![(x5, 1.0), (x5, 1.0), (Shape4::new(1, 3, 1, 1), 1.0)],
            build: Box::new(|g, s, p| {
                let (a, b, w) = (g.param(s, p[0]), g.param(s, p[1]), g.param(s, p[2]));
                let m = g.weighted_sum(&[(a, w, 0), (b, w, 2), (a, w, 1)])?;
                let y = g.add(&[m, b])?;
                project(g, y)
            }),
        },
        Case {
            name: "concat_and_slice",
            params: vec![(x5, 1.0), (Shape4::new(1, 3, 5, 5), 1.0)],
            build: Box::new(|g, s, p| {
                let (a, b) = (g.param(s, p[0]), g.param(s, p[1]));
                let c = g.concat_channels(&[a, b])?;
                let y = g.slice_channels(c, 1, 3)?;
                project(g, y)
            }),
        },
        Case {
            name: "bilinear_upsample_x2",
            params: vec![(Shape4::new(1, 2, 3, 4), 1.0)],
            build: Box::new(|g, s, p| {
                let x = g.param(s, p[0]);
                let y = g.bilinear_upsample_x2(x)?;
                project(g, y)
            }),
        },
        Case {
            name: "bilinear_resize",
            params: vec![(Shape4::new(2, 2, 2, 3), 1.0)],
            build: Box::new(|g, s, p| {
                let x = g.param(s, p[0]);
                let y = g.bilinear_resize(x, 8, 5)?;
                project(g, y)
            }),
        },
        Case {
            name: "global_avg_pool",
            params: vec![(x6, 1.0)],
            build: Box::new(|g, s, p| {
                let x = g.param(s, p[0]);
                let y = g.global_avg_pool(x);
                project(g, y)
            }),
        },
        Case {
            name: "batch_norm",
            params: vec![
                (x6, 1.0),
                (Shape4::new(1, 3, 1, 1), 1.0),
                (Shape4::new(1, 3, 1, 1), 1.0),
            ],
            build: Box::new(|g, s, p| {
                let (x, ga, be) = (g.param(s, p[0]), g.param(s, p[1]), g.param(s, p[2]));
                let y = g.batch_norm(x, Some(ga), Some(be))?;
                project(g, y)
            }),
        },
        Case {
            name: "relu",
            params: vec![(x6, 1.0)],
            build: Box::new(|g, s, p| {
                let x = g.param(s, p[0]);
                let y = g.relu(x);
                project(g, y)
            }),
        },
        Case {
            name: "softmax_over_channel",
            params: vec![(Shape4::new(2, 3, 2, 2), 1.0)],
            build: Box::new(|g, s, p| {
                let x = g.param(s, p[0]);
                let mask: Vec<bool> = (0..24).map(|i| i % 7 != 3).collect();
                let y = g.softmax_over_channel(x, Some(&mask))?;
                project(g, y)
            }),
        },
        Case {
            name: "cross_entropy_spatial",
            params: vec![(Shape4::new(2, 4, 3, 3), 1.0)],
            build: Box::new(|g, s, p| {
                let x = g.param(s, p[0]);
                let labels: Vec<u8> = (0..18)
                    .map(|i| if i == 5 { 255 } else { (i * 5 % 4) as u8 })
                    .collect();
                g.cross_entropy_spatial(x, &labels, Some(255))
            }),
        },
    ]
}

/// Runs the finite-difference check on every primitive with random inputs.
pub fn primitive_gradient_suite(
    cfg: &GradCheckConfig,
    seed: u64,
) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for case in cases() {
        let mut store = ParamStore::new();
        let ids: Vec<ParamId> = case
            .params
            .iter()
            .enumerate()
            .map(|(i, &(shape, std))| {
                store.insert(
                    format!("p{i}"),
                    ParamGroup::Weights,
                    Tensor4::randn(shape, std, &mut rng),
                )
            })
            .collect::<Result<_>>()?;
        let build = &case.build;
        let report = gradient_check(|g, s| build(g, s, &ids), &mut store, &ids, cfg)?;
        out.push((case.name, report));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_matches_finite_differences() {
        let cfg = GradCheckConfig::default();
        for (name, report) in primitive_gradient_suite(&cfg, 3).unwrap() {
            assert!(report.passed(), "{name}: {:?}", report);
            assert!(report.params.iter().all(|p| p.checked > 0), "{name}");
        }
    }

    #[test]
    fn linear_function_is_exact() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let id = store
            .insert(
                "x",
                ParamGroup::Weights,
                Tensor4::randn(Shape4::new(1, 2, 3, 3), 1.0, &mut rng),
            )
            .unwrap();
        let cfg = GradCheckConfig::default();
        let report = gradient_check(
            |g, s| {
                let x = g.param(s, id);
                let y = g.scale(x, 3.0);
                Ok(g.sum(y))
            },
            &mut store,
            &[id],
            &cfg,
        )
        .unwrap();
        assert!(report.max_rel_error() < 1e-9, "{report:?}");
    }

    #[test]
    fn max_pool_tie_is_flagged() {
        let mut store = ParamStore::new();
        let id = store
            .insert(
                "x",
                ParamGroup::Weights,
                Tensor4::full(Shape4::new(1, 1, 3, 3), 1.0),
            )
            .unwrap();
        let cfg = GradCheckConfig::default();
        let report = gradient_check(
            |g, s| {
                let x = g.param(s, id);
                let y = g.max_pool_3x3(x);
                Ok(g.sum(y))
            },
            &mut store,
            &[id],
            &cfg,
        )
        .unwrap();
        assert!(report.params[0].skipped_nondifferentiable > 0);
        assert!(report.passed());
    }
}
