//! Finite-difference verification of every differentiable component, in
//! 64-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoder::{ModelConfig, ToyEncoder};
use crate::error::Result;
use crate::lakan::{LakanConfig, LakanModule, LandmarkSet};
use crate::ndiff::gradcheck::{self, GradCheckReport};
use crate::ndiff::{CustomOp, Tape, Tensor, Var};
use crate::params::{gradcheck_params, ParamStore};
use crate::spline_kan::{basis_eval, edge_activation, kan_layer, SplineGrid};

pub const COMPONENTS: [&str; 6] = [
    "spline_basis",
    "edge_activation",
    "kan_layer",
    "generate_params",
    "lakan_forward",
    "encoder_forward",
];

pub const TOLERANCE: f64 = 1e-5;
pub const STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct ComponentReport {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub probes: usize,
}

impl ComponentReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

/// Identity in the forward pass that scales the gradient flowing back,
/// used to check that the suite catches a wrong derivative.
struct SkewGradient;

impl CustomOp<f64> for SkewGradient {
    fn name(&self) -> &'static str {
        "skew_gradient"
    }

    fn backward(&self, _: &[&Tensor<f64>], _: &Tensor<f64>, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.iter().map(|v| 1.1 * v).collect())]
    }
}

fn finish(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>, skew: bool) -> Result<Var> {
    let out = if skew {
        let value = tape.value(out).clone();
        tape.custom(vec![out], value, Box::new(SkewGradient))
    } else {
        out
    };
    let w = tape.constant(weights.clone());
    let y = tape.mul(out, w)?;
    Ok(tape.sum(y))
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

fn landmarks(rng: &mut ChaCha8Rng, n: usize) -> LandmarkSet {
    LandmarkSet::new((0..n).map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]).collect())
        .expect("unit square")
}

fn randomize_matching(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, pattern: &str, scale: f64) -> Result<()> {
    for id in store.ids().collect::<Vec<_>>() {
        if store.name(id).contains(pattern) {
            let shape = store.get(id).shape().to_vec();
            store.set(id, random(rng, &shape, scale))?;
        }
    }
    Ok(())
}

fn component(name: &'static str, seed: u64, skew: bool) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = SplineGrid::default();
    let nb = grid.n_basis();
    match name {
        "spline_basis" => {
            let x = random(&mut rng, &[40], 1.3);
            let w = random(&mut rng, &[40, nb], 1.0);
            gradcheck::check(&[x], |t, v| {
                let b = basis_eval(t, &grid, v[0])?;
                finish(t, b, &w, skew)
            }, STEP, None, seed)
        }
        "edge_activation" | "kan_layer" => {
            let (batch, i, o) = (5, 3, 4);
            let inputs = [
                random(&mut rng, &[batch, i], 2.0),
                random(&mut rng, &[o, i], 1.0),
                random(&mut rng, &[o, i], 1.0),
                random(&mut rng, &[o, i, nb], 1.0),
            ];
            let shape: &[usize] = if name == "kan_layer" { &[batch, o] } else { &[batch, o, i] };
            let w = random(&mut rng, shape, 1.0);
            let edge = name == "edge_activation";
            gradcheck::check(&inputs, |t, v| {
                let y = if edge {
                    edge_activation(t, &grid, v[0], v[1], v[2], v[3])?
                } else {
                    kan_layer(t, &grid, v[0], v[1], v[2], v[3])?
                };
                finish(t, y, &w, skew)
            }, STEP, None, seed)
        }
        "generate_params" | "lakan_forward" => {
            let config = LakanConfig {
                pos_freqs: 3,
                guide_dim: 4,
                mlp_hidden: 8,
                num_landmarks: 6,
                ..LakanConfig::new(4)
            };
            let mut store = ParamStore::new();
            let module = LakanModule::new(&mut store, "m", config, &mut rng)?;
            randomize_matching(&mut store, &mut rng, "", 0.4)?;
            let l = landmarks(&mut rng, 6);
            let ids: Vec<_> = store.ids().collect();
            let x = random(&mut rng, &[4, 8, 8], 1.5);
            if name == "generate_params" {
                let wc = random(&mut rng, &[4, 4, nb], 1.0);
                let ws = random(&mut rng, &[4, 4], 1.0);
                gradcheck_params(&store, &ids, |g| {
                    let (c, s) = module.generate_params(g, &l)?[0];
                    let a = finish(g, c, &wc, skew)?;
                    let b = finish(g, s, &ws, false)?;
                    g.add(a, b)
                }, STEP, Some(12), seed)
            } else {
                let w = random(&mut rng, &[4, 8, 8], 1.0);
                gradcheck_params(&store, &ids, |g| {
                    let xv = g.constant(x.clone());
                    let y = module.forward(g, xv, &l)?;
                    finish(g, y, &w, skew)
                }, STEP, Some(12), seed)
            }
        }
        "encoder_forward" => {
            let config = ModelConfig { seed, ..ModelConfig::default() };
            let (model, mut store) = ToyEncoder::new::<f64>(config)?;
            randomize_matching(&mut store, &mut rng, "lakan", 0.05)?;
            let image = random(&mut rng, &[3, 64, 64], 0.5).map(|v| v + 0.5);
            let l = landmarks(&mut rng, model.config.num_landmarks);
            let ids: Vec<_> = store.ids().collect();
            let one = Tensor::scalar(1.0);
            gradcheck_params(&store, &ids, |g| {
                let x = g.constant(image.clone());
                let y = model.forward(g, x, &l)?;
                finish(g, y, &one, skew)
            }, STEP, Some(1), seed)
        }
        other => unreachable!("unknown component {other}"),
    }
}

/// Runs every component; `skew` names one whose gradient is deliberately
/// distorted.
pub fn gradient_suite(seed: u64, skew: Option<&str>) -> Result<Vec<ComponentReport>> {
    COMPONENTS
        .iter()
        .map(|&name| {
            let r = component(name, seed, skew == Some(name))?;
            Ok(ComponentReport {
                name,
                max_rel_error: r.max_rel_error,
                probes: r.probes,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_names_every_component() {
        let reports = gradient_suite(0, None).unwrap();
        let names: Vec<_> = reports.iter().map(|r| r.name).collect();
        assert_eq!(names, COMPONENTS);
        for r in &reports {
            assert!(r.passed(), "{r:?}");
            assert!(r.probes > 0);
        }
    }

    #[test]
    fn skewed_gradient_is_caught() {
        for name in COMPONENTS {
            let reports = gradient_suite(1, Some(name)).unwrap();
            for r in reports {
                assert_eq!(r.passed(), r.name != name, "{r:?}");
            }
        }
    }
}
