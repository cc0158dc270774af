use crate::error::{Error, Result};
use crate::ndiff::{Real, Tensor};
use crate::params::{ParamGrads, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Clone, Debug)]
pub struct AdamW<T: Real> {
    pub config: AdamWConfig,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    step: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>, config: AdamWConfig) -> Self {
        let zeros = || store.ids().map(|id| vec![T::zero(); store.get(id).len()]).collect();
        AdamW {
            config,
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr`; a missing gradient counts as zero.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &ParamGrads<T>, lr: f64) -> Result<()> {
        if grads.len() != store.len() || self.first.len() != store.len() {
            return Err(Error::dim(format!(
                "optimizer tracks {} parameters, store has {}, gradients {}",
                self.first.len(),
                store.len(),
                grads.len()
            )));
        }
        for (id, grad) in store.ids().zip(grads) {
            if let Some(g) = grad {
                if g.shape() != store.get(id).shape() {
                    return Err(Error::dim(format!(
                        "gradient of `{}` has shape {:?}, parameter has {:?}",
                        store.name(id),
                        g.shape(),
                        store.get(id).shape()
                    )));
                }
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let correct1 = T::of(1.0 - c.beta1.powi(t));
        let correct2 = T::of(1.0 - c.beta2.powi(t));
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (lr_t, eps) = (T::of(lr), T::of(c.eps));
        let decay = T::of(1.0 - lr * c.weight_decay);
        for (id, grad) in store.ids().collect::<Vec<_>>().into_iter().zip(grads) {
            let p = store.get(id);
            let g = grad.as_ref().map(Tensor::data);
            let (m, v) = (&mut self.first[id.index()], &mut self.second[id.index()]);
            let mut data = p.to_vec();
            for i in 0..data.len() {
                let gi = g.map_or(T::zero(), |g| g[i]);
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let mhat = m[i] / correct1;
                let vhat = v[i] / correct2;
                data[i] = data[i] * decay - lr_t * mhat / (vhat.sqrt() + eps);
            }
            store.set(id, Tensor::new(p.shape().to_vec(), data)?)?;
        }
        Ok(())
    }
}
