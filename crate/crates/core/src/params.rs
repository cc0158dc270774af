//! Named parameter storage and the per-pass binding of parameters onto a tape.

use std::collections::HashMap;
use std::ops::{Deref, DerefMut};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::ndiff::gradcheck::{rel_error, GradCheckReport};
use crate::ndiff::{Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of uniquely named tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalars across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    /// Replaces a parameter value; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let current = &self.values[id.0];
        if current.shape() != value.shape() {
            return Err(Error::ParamShape {
                name: self.names[id.0].clone(),
                expected: current.shape().to_vec(),
                found: value.shape().to_vec(),
            });
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.names == other.names
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.bitwise_eq(b))
    }
}

/// Gradients aligned with the ids of a [`ParamStore`]; `None` for
/// parameters that were not used in the pass.
pub type ParamGrads<T> = Vec<Option<Tensor<T>>>;

/// A tape plus lazy, at-most-once binding of store parameters onto it.
///
/// Dereferences to the underlying [`Tape`] so forward code can call tape
/// operations directly.
pub struct Graph<'s, T: Real> {
    tape: Tape<T>,
    store: &'s ParamStore<T>,
    bound: Vec<Option<Var>>,
}

impl<'s, T: Real> Graph<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.param(self.store.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn backward(&mut self, loss: Var) -> Result<ParamGrads<T>> {
        let grads = self.tape.backward(loss)?;
        self.bound
            .iter()
            .map(|b| b.map(|v| grads.get(v).cloned()).transpose())
            .collect()
    }
}

impl<T: Real> Deref for Graph<'_, T> {
    type Target = Tape<T>;

    fn deref(&self) -> &Tape<T> {
        &self.tape
    }
}

impl<T: Real> DerefMut for Graph<'_, T> {
    fn deref_mut(&mut self) -> &mut Tape<T> {
        &mut self.tape
    }
}

/// Central finite-difference check of `f` with respect to the listed
/// parameters of `store`, probing at most `max_probes` coordinates of each.
///
/// Returns the largest `|analytic − numeric| / max(1, |analytic|)`.
pub fn gradcheck_params<F>(
    store: &ParamStore<f64>,
    ids: &[ParamId],
    f: F,
    step: f64,
    max_probes: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let loss = f(&mut g)?;
    let grads = g.backward(loss)?;
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new(s);
        let out = f(&mut g)?;
        g.value(out).item()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    let mut probe = store.clone();
    for &id in ids {
        let base = store.get(id);
        let analytic = match &grads[id.0] {
            Some(t) => t.to_vec(),
            None => vec![0.0; base.len()],
        };
        let n = base.len();
        let coords: Vec<usize> = match max_probes {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let mut data = base.to_vec();
        for i in coords {
            let orig = data[i];
            data[i] = orig + step;
            probe.set(id, Tensor::new(base.shape().to_vec(), data.clone())?)?;
            let up = eval(&probe)?;
            data[i] = orig - step;
            probe.set(id, Tensor::new(base.shape().to_vec(), data.clone())?)?;
            let down = eval(&probe)?;
            data[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            report.max_rel_error = report.max_rel_error.max(rel_error(analytic[i], numeric));
            report.probes += 1;
        }
        probe.set(id, base.clone())?;
    }
    Ok(report)
}

pub(crate) fn uniform<T: Real>(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = if bound > 0.0 {
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        (0..n).map(|_| T::of(dist.sample(rng))).collect()
    } else {
        vec![T::zero(); n]
    };
    Tensor::new(shape.to_vec(), data).expect("shape")
}

pub(crate) fn normal<T: Real>(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    let data = (0..n).map(|_| T::of(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}
