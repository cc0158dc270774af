//! Landmark-conditioned KAN gating.
//!
//! Facial landmarks are embedded with fixed sinusoids, compressed by a small
//! MLP into a guidance vector, and two affine heads turn that vector into
//! the spline coefficients and spline scalers of a KAN layer. The layer runs
//! over pooled feature vectors; its sigmoid output gates the feature map.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::ndiff::{Real, Tensor, Var};
use crate::params::{uniform, Graph, ParamId, ParamStore};
use crate::spline_kan::{squash_to_grid, KanInit, KanLayer, SplineGrid};

pub const DEFAULT_LANDMARKS: usize = 68;

/// Landmark coordinates normalised to `[0, 1]` image space, `(x, y)` per point.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet {
    coords: Vec<[f32; 2]>,
}

impl LandmarkSet {
    pub fn new(coords: Vec<[f32; 2]>) -> Result<Self> {
        for (i, p) in coords.iter().enumerate() {
            if !p.iter().all(|c| (0.0..=1.0).contains(c)) {
                return Err(Error::Validation(format!(
                    "landmark {i} at ({}, {}) lies outside [0, 1]",
                    p[0], p[1]
                )));
            }
        }
        Ok(LandmarkSet { coords })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[[f32; 2]] {
        &self.coords
    }
}

/// Sinusoidal embedding of every coordinate at `freqs` octave bands.
///
/// Layout: landmark-major, then `x` before `y`, then band `j`, then the pair
/// `(sin(2^j·π·c), cos(2^j·π·c))`; `4·freqs·N` values in total.
pub fn pos_embed<T: Real>(landmarks: &LandmarkSet, freqs: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(4 * freqs * landmarks.len());
    for p in landmarks.coords() {
        for &c in p {
            let c = c as f64;
            for j in 0..freqs {
                let angle = (1u64 << j) as f64 * std::f64::consts::PI * c;
                out.push(T::of(angle.sin()));
                out.push(T::of(angle.cos()));
            }
        }
    }
    out
}

/// How the gate `G` is merged back into the features `X`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FusionMode {
    /// `X ⊙ (1 + G)`
    #[default]
    Gating,
    /// `X + G`
    Addition,
    /// `X ⊙ G`
    Product,
    /// learned 1×1 projection of `[X; G]` back to `C` channels
    Concatenation,
}

impl FusionMode {
    pub const ALL: [FusionMode; 4] = [
        FusionMode::Gating,
        FusionMode::Addition,
        FusionMode::Product,
        FusionMode::Concatenation,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            FusionMode::Gating => "gating",
            FusionMode::Addition => "addition",
            FusionMode::Product => "product",
            FusionMode::Concatenation => "concatenation",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown fusion mode `{s}` (expected gating, addition, product or concatenation)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LakanConfig {
    pub channels: usize,
    pub pooled_size: usize,
    pub pos_freqs: usize,
    pub guide_dim: usize,
    pub mlp_hidden: usize,
    pub num_landmarks: usize,
    /// Widths of the dynamic KAN; must start and end at `channels`.
    pub dyn_kan_dims: Vec<usize>,
    pub grid: SplineGrid,
    pub fusion: FusionMode,
    /// Replace the dynamic KAN by a generated affine map.
    pub ablate_kan: bool,
    /// Ignore landmarks; the KAN uses owned static parameters.
    pub ablate_landmarks: bool,
}

impl LakanConfig {
    pub fn new(channels: usize) -> Self {
        LakanConfig {
            channels,
            pooled_size: 4,
            pos_freqs: 8,
            guide_dim: 6,
            mlp_hidden: 32,
            num_landmarks: DEFAULT_LANDMARKS,
            dyn_kan_dims: vec![channels, channels],
            grid: SplineGrid::default(),
            fusion: FusionMode::Gating,
            ablate_kan: false,
            ablate_landmarks: false,
        }
    }

    pub fn embed_dim(&self) -> usize {
        4 * self.pos_freqs * self.num_landmarks
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("channels", self.channels),
            ("pooled_size", self.pooled_size),
            ("pos_freqs", self.pos_freqs),
            ("guide_dim", self.guide_dim),
            ("mlp_hidden", self.mlp_hidden),
            ("num_landmarks", self.num_landmarks),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("LAKAN `{name}` must be positive")));
        }
        if self.pos_freqs > 30 {
            return Err(Error::Config(format!("{} frequency bands is too many", self.pos_freqs)));
        }
        let dims = &self.dyn_kan_dims;
        if dims.len() < 2 || dims[0] != self.channels || dims[dims.len() - 1] != self.channels {
            return Err(Error::Config(format!(
                "dynamic KAN widths {dims:?} must start and end at {} channels",
                self.channels
            )));
        }
        if dims.contains(&0) {
            return Err(Error::Config(format!("dynamic KAN widths {dims:?} contain zero")));
        }
        Ok(())
    }
}

/// Affine map `x·W + b` with `W` stored `in×out`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dims: (usize, usize),
        init: LinearInit,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (fan_in, fan_out) = dims;
        let (weight, bias) = match init {
            LinearInit::Uniform => {
                let bound = 1.0 / (fan_in as f64).sqrt();
                (uniform(rng, &[fan_in, fan_out], bound), uniform(rng, &[fan_out], bound))
            }
            LinearInit::Constant(b) => (Tensor::zeros([fan_in, fan_out]), Tensor::full([fan_out], T::of(b))),
        };
        Ok(Linear {
            weight: store.add(format!("{prefix}.weight"), weight)?,
            bias: store.add(format!("{prefix}.bias"), bias)?,
        })
    }

    /// `x: rows×in` → `rows×out`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w)?;
        g.add_row_bias(y, b)
    }
}

#[derive(Clone, Copy, Debug)]
enum LinearInit {
    Uniform,
    /// zero weights, constant bias
    Constant(f64),
}

/// Generation heads for one dynamic KAN layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicLayer {
    pub layer: KanLayer,
    pub coeff_head: Linear,
    pub scaler_head: Linear,
}

/// The feature transform run over pooled channel vectors.
#[derive(Clone, Debug, PartialEq)]
pub enum Transform {
    /// Full module: landmark-generated spline parameters.
    Dynamic(Vec<DynamicLayer>),
    /// Landmarks ablated: owned static KAN parameters.
    Static(Vec<KanLayer>),
    /// KAN ablated: affine map whose weight and bias the heads generate.
    GeneratedAffine { weight_head: Linear, bias_head: Linear },
    /// Both ablated: owned affine map.
    Affine(Linear),
}

/// Intermediate values of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct LakanTrace {
    pub pooled: Var,
    /// transform output, `C×S×S`
    pub transformed: Var,
    /// `σ(transformed)`, `C×S×S`
    pub gate: Var,
    /// gate upsampled to the input resolution
    pub gate_full: Var,
    pub output: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LakanModule {
    pub config: LakanConfig,
    pub guide: Option<(Linear, Linear)>,
    pub transform: Transform,
    /// `[X; G] → X` projection, concatenation mode only.
    pub projection: Option<Linear>,
}

impl LakanModule {
    /// Builds the module and registers its parameters under `prefix`.
    ///
    /// Generation heads start with zero weights; the coefficient head has
    /// zero bias and the scaler head unit bias, and `w_b` starts at zero, so
    /// the transform initially outputs exactly zero and the gate is 0.5.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        config: LakanConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let uses_landmarks = !config.ablate_landmarks;
        let guide = if uses_landmarks {
            Some((
                Linear::new(store, &format!("{prefix}.guide.0"), (config.embed_dim(), config.mlp_hidden), LinearInit::Uniform, rng)?,
                Linear::new(store, &format!("{prefix}.guide.1"), (config.mlp_hidden, config.guide_dim), LinearInit::Uniform, rng)?,
            ))
        } else {
            None
        };

        let transform = match (config.ablate_kan, config.ablate_landmarks) {
            (false, false) => {
                let mut layers = Vec::new();
                for (l, w) in config.dyn_kan_dims.windows(2).enumerate() {
                    let (i, o) = (w[0], w[1]);
                    let nb = config.grid.n_basis();
                    layers.push(DynamicLayer {
                        layer: KanLayer::base_only(store, &format!("{prefix}.kan.{l}"), i, o, config.grid, KanInit::Neutral, rng)?,
                        coeff_head: Linear::new(store, &format!("{prefix}.head_coeffs.{l}"), (config.guide_dim, o * i * nb), LinearInit::Constant(0.0), rng)?,
                        scaler_head: Linear::new(store, &format!("{prefix}.head_scaler.{l}"), (config.guide_dim, o * i), LinearInit::Constant(1.0), rng)?,
                    });
                }
                Transform::Dynamic(layers)
            }
            (false, true) => Transform::Static(
                config
                    .dyn_kan_dims
                    .windows(2)
                    .enumerate()
                    .map(|(l, w)| KanLayer::new(store, &format!("{prefix}.kan.{l}"), w[0], w[1], config.grid, KanInit::Neutral, rng))
                    .collect::<Result<_>>()?,
            ),
            (true, false) => Transform::GeneratedAffine {
                weight_head: Linear::new(store, &format!("{prefix}.head_affine_weight"), (config.guide_dim, c * c), LinearInit::Constant(0.0), rng)?,
                bias_head: Linear::new(store, &format!("{prefix}.head_affine_bias"), (config.guide_dim, c), LinearInit::Constant(0.0), rng)?,
            },
            (true, true) => Transform::Affine(Linear::new(store, &format!("{prefix}.affine"), (c, c), LinearInit::Constant(0.0), rng)?),
        };

        let projection = if config.fusion == FusionMode::Concatenation {
            // [X; G] → X starts as the identity on the X half
            let mut w = vec![T::zero(); 2 * c * c];
            for ch in 0..c {
                w[ch * c + ch] = T::one();
            }
            Some(Linear {
                weight: store.add(format!("{prefix}.fuse.weight"), Tensor::new([2 * c, c], w)?)?,
                bias: store.add(format!("{prefix}.fuse.bias"), Tensor::zeros([c]))?,
            })
        } else {
            None
        };

        Ok(LakanModule {
            config,
            guide,
            transform,
            projection,
        })
    }

    fn check_landmarks(&self, landmarks: &LandmarkSet) -> Result<()> {
        if landmarks.len() != self.config.num_landmarks {
            return Err(Error::dim(format!(
                "module expects {} landmarks, got {}",
                self.config.num_landmarks,
                landmarks.len()
            )));
        }
        Ok(())
    }

    /// `MLP(PosEmbed(L))` as a `1×guide_dim` row.
    pub fn guidance<T: Real>(&self, g: &mut Graph<'_, T>, landmarks: &LandmarkSet) -> Result<Var> {
        self.check_landmarks(landmarks)?;
        let (first, second) = self
            .guide
            .as_ref()
            .ok_or_else(|| Error::Config("landmark guidance is ablated in this module".into()))?;
        let embed = pos_embed::<T>(landmarks, self.config.pos_freqs);
        let e = g.constant(Tensor::new([1, embed.len()], embed)?);
        let h = first.forward(g, e)?;
        let h = g.silu(h);
        second.forward(g, h)
    }

    /// Spline parameters `(coefficients out×in×n_basis, scaler out×in)` for
    /// each dynamic KAN layer, generated from the landmarks.
    pub fn generate_params<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        landmarks: &LandmarkSet,
    ) -> Result<Vec<(Var, Var)>> {
        let Transform::Dynamic(layers) = &self.transform else {
            return Err(Error::Config("module has no dynamic KAN to parameterise".into()));
        };
        let v = self.guidance(g, landmarks)?;
        layers
            .iter()
            .map(|d| {
                let coeffs = d.coeff_head.forward(g, v)?;
                let coeffs = g.reshape(coeffs, d.layer.coeffs_shape())?;
                let scaler = d.scaler_head.forward(g, v)?;
                let scaler = g.reshape(scaler, d.layer.scaler_shape())?;
                Ok((coeffs, scaler))
            })
            .collect()
    }

    /// `X'` for pooled rows `h: S²×C`.
    fn apply_transform<T: Real>(&self, g: &mut Graph<'_, T>, h: Var, landmarks: &LandmarkSet) -> Result<Var> {
        let grid = &self.config.grid;
        let c = self.config.channels;
        match &self.transform {
            Transform::Dynamic(layers) => {
                let params = self.generate_params(g, landmarks)?;
                let mut h = h;
                for (l, (d, (coeffs, scaler))) in layers.iter().zip(params).enumerate() {
                    if l > 0 {
                        h = squash_to_grid(g, grid, h);
                    }
                    h = d.layer.injected(g, scaler, coeffs)?.forward(g, h)?;
                }
                Ok(h)
            }
            Transform::Static(layers) => {
                let mut h = h;
                for (l, layer) in layers.iter().enumerate() {
                    if l > 0 {
                        h = squash_to_grid(g, grid, h);
                    }
                    h = layer.forward(g, h)?;
                }
                Ok(h)
            }
            Transform::GeneratedAffine { weight_head, bias_head } => {
                let v = self.guidance(g, landmarks)?;
                let w = weight_head.forward(g, v)?;
                let w = g.reshape(w, [c, c])?;
                let b = bias_head.forward(g, v)?;
                let y = g.matmul(h, w)?;
                g.add_row_bias(y, b)
            }
            Transform::Affine(lin) => lin.forward(g, h),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, landmarks: &LandmarkSet) -> Result<Var> {
        Ok(self.forward_traced(g, x, landmarks)?.output)
    }

    /// Pool → squash → transform → sigmoid → upsample → fuse, keeping every
    /// intermediate value addressable.
    pub fn forward_traced<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        landmarks: &LandmarkSet,
    ) -> Result<LakanTrace> {
        let cfg = &self.config;
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[0] != cfg.channels {
            return Err(Error::dim(format!(
                "LAKAN over {} channels received features of shape {shape:?}",
                cfg.channels
            )));
        }
        if !cfg.ablate_landmarks {
            self.check_landmarks(landmarks)?;
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let s = cfg.pooled_size;

        let pooled = g.adaptive_avg_pool(x, s)?;
        let rows = g.reshape(pooled, [c, s * s])?;
        let rows = g.transpose(rows)?;
        let rows = squash_to_grid(g, &cfg.grid, rows);
        let out = self.apply_transform(g, rows, landmarks)?;
        let out = g.transpose(out)?;
        let transformed = g.reshape(out, [c, s, s])?;
        let gate = g.sigmoid(transformed);
        let gate_full = g.upsample_nearest(gate, h, w)?;

        let output = match cfg.fusion {
            FusionMode::Gating => {
                let scale = g.add_scalar(gate_full, T::one());
                g.mul(x, scale)?
            }
            FusionMode::Addition => g.add(x, gate_full)?,
            FusionMode::Product => g.mul(x, gate_full)?,
            FusionMode::Concatenation => {
                let proj = self
                    .projection
                    .ok_or_else(|| Error::Config("concatenation fusion without projection".into()))?;
                let cat = g.concat(&[x, gate_full])?;
                let cat = g.reshape(cat, [2 * c, h * w])?;
                let weight = g.param(proj.weight);
                let weight = g.transpose(weight)?;
                let bias = g.param(proj.bias);
                let y = g.matmul(weight, cat)?;
                let y = g.reshape(y, [c, h, w])?;
                g.add_channel_bias(y, bias)?
            }
        };
        Ok(LakanTrace {
            pooled,
            transformed,
            gate,
            gate_full,
            output,
        })
    }
}

#[cfg(test)]
mod tests;
