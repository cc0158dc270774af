//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Worst agreement observed between analytic and numerical gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    /// max |analytic − numeric| / max(1, |analytic|)
    pub max_rel_error: f64,
    pub probes: usize,
}

impl GradCheckReport {
    pub fn merge(self, other: Self) -> Self {
        GradCheckReport {
            max_rel_error: self.max_rel_error.max(other.max_rel_error),
            probes: self.probes + other.probes,
        }
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Compares the tape gradient of the scalar `f(inputs)` against central
/// differences with the given `step`.
///
/// Every input is recorded as a gradient-carrying leaf. With
/// `max_probes = Some(n)` at most `n` coordinates per input are probed,
/// chosen deterministically from `seed`.
pub fn check<F>(
    inputs: &[Tensor<f64>],
    f: F,
    step: f64,
    max_probes: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    let mut probe_inputs = inputs.to_vec();
    for (slot, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var)?.to_vec();
        let n = inputs[slot].len();
        let coords: Vec<usize> = match max_probes {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let base = inputs[slot].data()[i];
            let mut shifted = inputs[slot].to_vec();
            shifted[i] = base + step;
            probe_inputs[slot] = Tensor::new(inputs[slot].shape().to_vec(), shifted.clone())?;
            let up = eval(&probe_inputs)?;
            shifted[i] = base - step;
            probe_inputs[slot] = Tensor::new(inputs[slot].shape().to_vec(), shifted)?;
            let down = eval(&probe_inputs)?;
            let numeric = (up - down) / (2.0 * step);
            if !numeric.is_finite() {
                return Err(Error::Numerical(format!(
                    "finite difference for input {slot}[{i}] is not finite"
                )));
            }
            report.max_rel_error = report.max_rel_error.max(rel_error(analytic[i], numeric));
            report.probes += 1;
        }
        probe_inputs[slot] = inputs[slot].clone();
    }
    Ok(report)
}
