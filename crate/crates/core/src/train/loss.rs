use crate::data::Label;
use crate::error::{Error, Result};
use crate::ndiff::{sigmoid, CustomOp, Real, Tape, Tensor, Var};

/// `log(1 + e^t)` without overflow.
fn softplus<T: Real>(t: T) -> T {
    t.max(T::zero()) + (-t.abs()).exp().ln_1p()
}

struct BceOp {
    signs: Vec<f64>,
}

impl<T: Real> CustomOp<T> for BceOp {
    fn name(&self) -> &'static str {
        "bce_loss"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let n = T::of(self.signs.len() as f64);
        let dz = inputs[0]
            .data()
            .iter()
            .zip(&self.signs)
            .map(|(&z, &y)| {
                let y = T::of(y);
                -g[0] * y * sigmoid(-y * z) / n
            })
            .collect();
        vec![Some(dz)]
    }
}

/// Mean of `log(1 + exp(−y·z))` over the batch, with `y = ±1` for fake/real.
pub fn bce_loss<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[Label]) -> Result<Var> {
    let z = tape.value(logits);
    if z.len() != labels.len() || z.rank() > 1 {
        return Err(Error::dim(format!(
            "bce_loss: {} labels for logits of shape {:?}",
            labels.len(),
            z.shape()
        )));
    }
    if labels.is_empty() {
        return Err(Error::dim("bce_loss: empty batch"));
    }
    if let Some(i) = z.data().iter().position(|v| v.is_nan()) {
        return Err(Error::Numerical(format!("NaN logit at batch index {i}")));
    }
    let signs: Vec<f64> = labels.iter().map(|l| if l.is_fake() { 1.0 } else { -1.0 }).collect();
    let total: T = z
        .data()
        .iter()
        .zip(&signs)
        .map(|(&v, &y)| softplus(-T::of(y) * v))
        .sum();
    let value = Tensor::scalar(total / T::of(labels.len() as f64));
    Ok(tape.custom(vec![logits], value, Box::new(BceOp { signs })))
}
