use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::bce_loss;
use super::metrics::auc;
use super::optim::{AdamW, AdamWConfig};
use crate::data::{Label, Sample};
use crate::encoder::ToyEncoder;
use crate::error::{Error, Result};
use crate::ndiff::{sigmoid, Var};
use crate::params::{Graph, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optim: AdamWConfig,
    /// Seeds the per-epoch shuffling.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            lr: 5e-4,
            optim: AdamWConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and non-negative, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }

    /// Constant for the first half of training, then linear decay that
    /// reaches `lr / (epochs − epochs/2)` in the final epoch.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        let half = self.epochs / 2;
        if epoch < half {
            self.lr
        } else {
            self.lr * (self.epochs - epoch) as f64 / (self.epochs - half) as f64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub loss: f64,
    pub train_auc: f64,
    pub val_auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub auc: f64,
    pub mean_real: f64,
    pub mean_fake: f64,
    pub scores: Vec<f64>,
}

fn check_balanced(samples: &[Sample], what: &str) -> Result<()> {
    let fakes = samples.iter().filter(|s| s.label.is_fake()).count();
    if samples.is_empty() || 2 * fakes != samples.len() {
        return Err(Error::Validation(format!(
            "{what} set must be nonempty and balanced, has {} real and {fakes} fake",
            samples.len() - fakes
        )));
    }
    Ok(())
}

fn logit(model: &ToyEncoder, g: &mut Graph<'_, f32>, sample: &Sample) -> Result<Var> {
    let x = g.constant(sample.image.clone());
    model.forward(g, x, &sample.landmarks)
}

/// Fake-class probability for every sample.
pub fn predict(model: &ToyEncoder, store: &ParamStore<f32>, samples: &[Sample]) -> Result<Vec<f64>> {
    samples
        .iter()
        .map(|s| {
            let mut g = Graph::new(store);
            let z = logit(model, &mut g, s)?;
            Ok(sigmoid(g.value(z).item()? as f64))
        })
        .collect()
}

pub fn evaluate(model: &ToyEncoder, store: &ParamStore<f32>, samples: &[Sample]) -> Result<Evaluation> {
    let scores = predict(model, store, samples)?;
    let labels: Vec<bool> = samples.iter().map(|s| s.label.is_fake()).collect();
    let mean = |fake: bool| {
        let picked: Vec<f64> = scores.iter().zip(&labels).filter(|(_, &l)| l == fake).map(|(&s, _)| s).collect();
        picked.iter().sum::<f64>() / picked.len().max(1) as f64
    };
    Ok(Evaluation {
        auc: auc(&scores, &labels)?,
        mean_real: mean(false),
        mean_fake: mean(true),
        scores,
    })
}

/// Mini-batch AdamW training; `on_epoch` sees each record as it is made.
pub fn train(
    model: &ToyEncoder,
    store: &mut ParamStore<f32>,
    train: &[Sample],
    val: Option<&[Sample]>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    check_balanced(train, "training")?;
    if let Some(v) = val {
        check_balanced(v, "validation")?;
    }
    let _ftz = FlushSubnormals::enable();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = AdamW::new(store, config.optim);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let lr = config.learning_rate(epoch);
        let mut loss_sum = 0.0;
        let mut scores = vec![0.0; train.len()];
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let context = |e: Error| Error::Numerical(format!("epoch {} batch {b}: {e}", epoch + 1));
            let grads = {
                let mut g = Graph::new(store);
                let logits = batch
                    .iter()
                    .map(|&i| logit(model, &mut g, &train[i]))
                    .collect::<Result<Vec<_>>>()?;
                let z = g.concat(&logits)?;
                for (&i, &v) in batch.iter().zip(g.value(z).data()) {
                    scores[i] = sigmoid(v as f64);
                }
                let labels: Vec<Label> = batch.iter().map(|&i| train[i].label).collect();
                let loss = bce_loss(&mut g, z, &labels).map_err(context)?;
                let value = g.value(loss).item()? as f64;
                if !value.is_finite() {
                    return Err(context(Error::Numerical(format!("loss {value}"))));
                }
                loss_sum += value * batch.len() as f64;
                g.backward(loss)?
            };
            opt.step(store, &grads, lr)?;
        }
        let labels: Vec<bool> = train.iter().map(|s| s.label.is_fake()).collect();
        let record = EpochRecord {
            epoch: epoch + 1,
            loss: loss_sum / train.len() as f64,
            train_auc: auc(&scores, &labels)?,
            val_auc: val.map(|v| evaluate(model, store, v).map(|e| e.auc)).transpose()?,
        };
        on_epoch(&record);
        history.push(record);
    }
    Ok(history)
}

/// Flush-to-zero and denormals-are-zero on this thread until dropped.
struct FlushSubnormals {
    #[cfg(target_arch = "x86_64")]
    saved: u32,
}

impl FlushSubnormals {
    #[cfg(target_arch = "x86_64")]
    #[allow(deprecated)]
    fn enable() -> Self {
        use std::arch::x86_64::{_mm_getcsr, _mm_setcsr};
        const FTZ_DAZ: u32 = 0x8040;
        // SAFETY: SSE is part of the x86_64 baseline; only the rounding-mode
        // independent FTZ and DAZ bits change.
        unsafe {
            let saved = _mm_getcsr();
            _mm_setcsr(saved | FTZ_DAZ);
            FlushSubnormals { saved }
        }
    }

    #[cfg(not(target_arch = "x86_64"))]
    fn enable() -> Self {
        FlushSubnormals {}
    }
}

impl Drop for FlushSubnormals {
    fn drop(&mut self) {
        #[cfg(target_arch = "x86_64")]
        #[allow(deprecated)]
        // SAFETY: restores the register value read in `enable`.
        unsafe {
            std::arch::x86_64::_mm_setcsr(self.saved)
        }
    }
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,loss,train_auc,val_auc\n");
    for r in history {
        let val = r.val_auc.map(|v| format!("{v:.6}")).unwrap_or_default();
        writeln!(out, "{},{:.6},{:.6},{val}", r.epoch, r.loss, r.train_auc).expect("string write");
    }
    out
}

pub fn write_history(history: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, history_csv(history))?;
    Ok(())
}
