use rand::Rng;

use super::ops::{check_edge_params, kan_layer};
use super::SplineGrid;
use crate::error::{Error, Result};
use crate::ndiff::{Real, Tape, Tensor, Var};
use crate::params::{normal, uniform, Graph, ParamId, ParamStore};

/// Owned spline branch of a layer: the per-edge scaler `w_s` and the
/// coefficients `ω`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplineParams {
    pub scaler: ParamId,
    pub coeffs: ParamId,
}

/// How a fresh layer's parameters are drawn.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum KanInit {
    /// `w_b ~ U(±1/√in)`, `w_s = 1`, `ω ~ N(0, 0.1/√n_basis)`.
    Standard,
    /// `w_b = 0`, `w_s = 1`, `ω = 0`: the layer outputs exactly zero but
    /// every parameter still receives gradient.
    Neutral,
}

/// One layer of edge functions `φ_{o,i}`; node values are plain sums of the
/// incoming edges (no bias).
#[derive(Clone, Debug, PartialEq)]
pub struct KanLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub grid: SplineGrid,
    pub base_weight: ParamId,
    /// `None` when the spline branch is always injected from outside.
    pub spline: Option<SplineParams>,
}

impl KanLayer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        grid: SplineGrid,
        init: KanInit,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut layer = Self::base_only(store, prefix, in_dim, out_dim, grid, init, rng)?;
        let nb = grid.n_basis();
        let coeffs = match init {
            KanInit::Standard => normal(rng, &[out_dim, in_dim, nb], 0.1 / (nb as f64).sqrt()),
            KanInit::Neutral => Tensor::zeros([out_dim, in_dim, nb]),
        };
        layer.spline = Some(SplineParams {
            scaler: store.add(format!("{prefix}.spline_scaler"), Tensor::ones([out_dim, in_dim]))?,
            coeffs: store.add(format!("{prefix}.spline_coeffs"), coeffs)?,
        });
        Ok(layer)
    }

    /// A layer that owns only `w_b`; its spline branch must be injected.
    pub fn base_only<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        grid: SplineGrid,
        init: KanInit,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Config(format!("KAN layer {in_dim}→{out_dim} has an empty side")));
        }
        let base = match init {
            KanInit::Standard => uniform(rng, &[out_dim, in_dim], 1.0 / (in_dim as f64).sqrt()),
            KanInit::Neutral => Tensor::zeros([out_dim, in_dim]),
        };
        Ok(KanLayer {
            in_dim,
            out_dim,
            grid,
            base_weight: store.add(format!("{prefix}.base_weight"), base)?,
            spline: None,
        })
    }

    pub fn scaler_shape(&self) -> [usize; 2] {
        [self.out_dim, self.in_dim]
    }

    pub fn coeffs_shape(&self) -> [usize; 3] {
        [self.out_dim, self.in_dim, self.grid.n_basis()]
    }

    /// `x: batch×in_dim` → `batch×out_dim` with the owned parameters.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let spline = self.spline.ok_or_else(|| {
            Error::Config("layer has no owned spline parameters; inject them instead".into())
        })?;
        let scaler = g.param(spline.scaler);
        let coeffs = g.param(spline.coeffs);
        self.injected(g, scaler, coeffs)?.forward(g, x)
    }

    /// A view of this layer whose spline scaler and coefficients come from
    /// the supplied tape values, while `w_b` stays owned.
    pub fn injected<T: Real>(&self, tape: &Tape<T>, scaler: Var, coeffs: Var) -> Result<InjectedLayer<'_>> {
        if tape.shape(scaler) != self.scaler_shape() || tape.shape(coeffs) != self.coeffs_shape() {
            return Err(Error::dim(format!(
                "injected spline parameters have shapes {:?} and {:?}; a {}→{} layer expects scaler {:?} and coefficients {:?}",
                tape.shape(scaler),
                tape.shape(coeffs),
                self.in_dim,
                self.out_dim,
                self.scaler_shape(),
                self.coeffs_shape()
            )));
        }
        Ok(InjectedLayer {
            layer: self,
            scaler,
            coeffs,
        })
    }

    /// Per-edge activations `batch×out×in` with the owned parameters.
    pub fn edges<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let spline = self
            .spline
            .ok_or_else(|| Error::Config("layer has no owned spline parameters".into()))?;
        let base = g.param(self.base_weight);
        let scaler = g.param(spline.scaler);
        let coeffs = g.param(spline.coeffs);
        super::edge_activation(g, &self.grid, x, base, scaler, coeffs)
    }
}

/// Layer view with an externally supplied spline branch.
#[derive(Clone, Copy, Debug)]
pub struct InjectedLayer<'a> {
    layer: &'a KanLayer,
    scaler: Var,
    coeffs: Var,
}

impl InjectedLayer<'_> {
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let l = self.layer;
        if g.shape(x).get(1) != Some(&l.in_dim) {
            return Err(Error::dim(format!(
                "layer expects batch×{} input, got {:?}",
                l.in_dim,
                g.shape(x)
            )));
        }
        let base = g.param(l.base_weight);
        check_edge_params(g, &l.grid, x, base, self.scaler, self.coeffs)?;
        kan_layer(g, &l.grid, x, base, self.scaler, self.coeffs)
    }
}

/// Composition `Φ_{L−1} ∘ … ∘ Φ_0` of KAN layers.
///
/// By the Kolmogorov–Arnold representation a continuous `f: [0,1]^n → ℝ`
/// needs only a two-layer network of widths `[n, 2n+1, 1]`; that width is
/// a guideline here and is not enforced.
#[derive(Clone, Debug, PartialEq)]
pub struct KanNetwork {
    pub layers: Vec<KanLayer>,
    /// Per layer: tanh-squash the layer input onto its grid domain first.
    pub normalize: Vec<bool>,
}

impl KanNetwork {
    pub fn new(layers: Vec<KanLayer>, normalize: Vec<bool>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("KAN network needs at least one layer".into()));
        }
        if normalize.len() != layers.len() {
            return Err(Error::Config(format!(
                "{} normalisation flags for {} layers",
                normalize.len(),
                layers.len()
            )));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::dim(format!(
                    "layer {l} emits {} features but layer {} takes {}",
                    pair[0].out_dim,
                    l + 1,
                    pair[1].in_dim
                )));
            }
        }
        Ok(KanNetwork { layers, normalize })
    }

    /// Builds owned layers for `widths = [d0, d1, …, dL]`.
    pub fn build<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        widths: &[usize],
        grid: SplineGrid,
        normalize: &[bool],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config(format!("need at least two widths, got {widths:?}")));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                KanLayer::new(store, &format!("{prefix}.{l}"), w[0], w[1], grid, KanInit::Standard, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers, normalize.to_vec())
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let mut h = x;
        for (layer, &squash) in self.layers.iter().zip(&self.normalize) {
            if squash {
                h = squash_to_grid(g, &layer.grid, h);
            }
            h = layer.forward(g, h)?;
        }
        Ok(h)
    }
}

/// `mid + half·tanh(x)`, mapping ℝ onto the open grid domain.
pub fn squash_to_grid<T: Real>(g: &mut Graph<'_, T>, grid: &SplineGrid, x: Var) -> Var {
    let (mid, half) = grid.squash_affine();
    let t = g.tanh(x);
    let t = if half == 1.0 { t } else { g.scale(t, T::of(half)) };
    if mid == 0.0 {
        t
    } else {
        g.add_scalar(t, T::of(mid))
    }
}
