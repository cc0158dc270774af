//! Four-stage convolutional classifier with a LAKAN module at the entrance
//! of every stage.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lakan::{FusionMode, LakanConfig, LakanModule, LandmarkSet, DEFAULT_LANDMARKS};
use crate::ndiff::{sigmoid, Real, Tensor, Var};
use crate::params::{uniform, Graph, ParamId, ParamStore};
use crate::spline_kan::SplineGrid;

/// Channel means of images from the default generator.
pub const PIXEL_MEAN: [f64; 3] = [0.430, 0.377, 0.346];
/// Channel standard deviations of images from the default generator.
pub const PIXEL_STD: [f64; 3] = [0.200, 0.143, 0.115];

/// Architecture and LAKAN settings shared by every stage.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Square input side; must be divisible by 32.
    pub input_size: usize,
    pub in_channels: usize,
    /// Per-channel pixel mean subtracted before the stem.
    pub input_mean: Vec<f64>,
    /// Per-channel pixel spread divided out before the stem.
    pub input_std: Vec<f64>,
    pub stem_channels: usize,
    pub stage_channels: Vec<usize>,
    pub pooled_size: usize,
    pub pos_freqs: usize,
    pub guide_dim: usize,
    pub mlp_hidden: usize,
    pub num_landmarks: usize,
    /// Inner widths of each dynamic KAN; empty means a single `C→C` layer.
    pub kan_hidden: Vec<usize>,
    pub grid: SplineGrid,
    pub fusion: FusionMode,
    pub ablate_kan: bool,
    pub ablate_landmarks: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let lakan = LakanConfig::new(1);
        ModelConfig {
            input_size: 64,
            in_channels: 3,
            input_mean: PIXEL_MEAN.to_vec(),
            input_std: PIXEL_STD.to_vec(),
            stem_channels: 16,
            stage_channels: vec![16, 32, 64, 128],
            pooled_size: lakan.pooled_size,
            pos_freqs: lakan.pos_freqs,
            guide_dim: lakan.guide_dim,
            mlp_hidden: lakan.mlp_hidden,
            num_landmarks: DEFAULT_LANDMARKS,
            kan_hidden: Vec::new(),
            grid: lakan.grid,
            fusion: FusionMode::Gating,
            ablate_kan: false,
            ablate_landmarks: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// With both ablations the stage entrances are identity passthroughs.
    pub fn is_baseline(&self) -> bool {
        self.ablate_kan && self.ablate_landmarks
    }

    pub fn validate(&self) -> Result<()> {
        let reduction = 1 << (self.stage_channels.len() + 1);
        if self.input_size == 0 || !self.input_size.is_multiple_of(reduction) {
            return Err(Error::Config(format!(
                "input size {} must be a positive multiple of {reduction}",
                self.input_size
            )));
        }
        if self.input_size >> self.stage_channels.len() < 3 {
            return Err(Error::Config(format!(
                "input size {} leaves the last block a map smaller than 3×3",
                self.input_size
            )));
        }
        if self.stage_channels.is_empty() || self.in_channels == 0 || self.stem_channels == 0 {
            return Err(Error::Config("encoder needs input, stem and stage channels".into()));
        }
        if self.input_mean.len() != self.in_channels || self.input_std.len() != self.in_channels {
            return Err(Error::Config(format!(
                "input statistics need {} channels, got mean {} and std {}",
                self.in_channels,
                self.input_mean.len(),
                self.input_std.len()
            )));
        }
        if self.input_mean.iter().any(|m| !m.is_finite()) || self.input_std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Config("input mean must be finite and input std positive".into()));
        }
        if self.stage_channels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "stage channels {:?} must be strictly increasing",
                self.stage_channels
            )));
        }
        Ok(())
    }

    /// LAKAN settings for a stage whose entrance sees `channels` features.
    pub fn lakan_config(&self, channels: usize) -> LakanConfig {
        let mut dims = vec![channels];
        dims.extend(&self.kan_hidden);
        dims.push(channels);
        LakanConfig {
            channels,
            pooled_size: self.pooled_size,
            pos_freqs: self.pos_freqs,
            guide_dim: self.guide_dim,
            mlp_hidden: self.mlp_hidden,
            num_landmarks: self.num_landmarks,
            dyn_kan_dims: dims,
            grid: self.grid,
            fusion: self.fusion,
            ablate_kan: self.ablate_kan,
            ablate_landmarks: self.ablate_landmarks,
        }
    }
}

/// 3×3 convolution with bias followed by SiLU.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvBlock {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl ConvBlock {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        (c_in, c_out): (usize, usize),
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let bound = (6.0 / (c_in * 9) as f64).sqrt();
        Ok(ConvBlock {
            weight: store.add(format!("{prefix}.weight"), uniform(rng, &[c_out, c_in, 3, 3], bound))?,
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros([c_out]))?,
            stride,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.conv2d(x, w, self.stride)?;
        let y = g.add_channel_bias(y, b)?;
        Ok(g.silu(y))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    /// `None` for an identity entrance.
    pub lakan: Option<LakanModule>,
    pub block: ConvBlock,
}

/// Entrance features of one stage before and after its LAKAN module.
#[derive(Clone, Copy, Debug)]
pub struct StageTrace {
    pub input: Var,
    pub output: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyEncoder {
    pub config: ModelConfig,
    pub stem: ConvBlock,
    pub stages: Vec<Stage>,
    pub head_weight: ParamId,
    pub head_bias: ParamId,
}

impl ToyEncoder {
    /// Builds the encoder, drawing initial values from `config.seed`.
    pub fn new<T: Real>(config: ModelConfig) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let stem = ConvBlock::new(&mut store, "stem", (config.in_channels, config.stem_channels), 2, &mut rng)?;
        let mut stages = Vec::new();
        let mut c_in = config.stem_channels;
        for (k, &c_out) in config.stage_channels.iter().enumerate() {
            let prefix = format!("stage{}", k + 1);
            let lakan = if config.is_baseline() {
                None
            } else {
                Some(LakanModule::new(&mut store, &format!("{prefix}.lakan"), config.lakan_config(c_in), &mut rng)?)
            };
            let block = ConvBlock::new(&mut store, &format!("{prefix}.block"), (c_in, c_out), 2, &mut rng)?;
            stages.push(Stage { lakan, block });
            c_in = c_out;
        }
        let head_weight = store.add("head.weight", uniform(&mut rng, &[c_in, 1], 1.0 / (c_in as f64).sqrt()))?;
        let head_bias = store.add("head.bias", Tensor::zeros([1]))?;
        let model = ToyEncoder {
            config,
            stem,
            stages,
            head_weight,
            head_bias,
        };
        Ok((model, store))
    }

    fn check_image<T: Real>(&self, g: &Graph<'_, T>, image: Var) -> Result<()> {
        let c = &self.config;
        let want = [c.in_channels, c.input_size, c.input_size];
        if g.shape(image) != want {
            return Err(Error::dim(format!(
                "encoder expects an image of shape {want:?}, got {:?}",
                g.shape(image)
            )));
        }
        Ok(())
    }

    fn standardise<T: Real>(&self, g: &mut Graph<'_, T>, image: Var) -> Result<Var> {
        let c = &self.config;
        let shift = Tensor::new([c.in_channels], c.input_mean.iter().map(|&m| T::of(-m)).collect())?;
        let plane = c.input_size * c.input_size;
        let inv = c.input_std.iter().flat_map(|&s| std::iter::repeat_n(T::of(1.0 / s), plane)).collect();
        let inv = Tensor::new([c.in_channels, c.input_size, c.input_size], inv)?;
        let shift = g.constant(shift);
        let inv = g.constant(inv);
        let h = g.add_channel_bias(image, shift)?;
        g.mul(h, inv)
    }

    /// Scalar logit for one `C×H×W` image with pixels in `[0, 1]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, image: Var, landmarks: &LandmarkSet) -> Result<Var> {
        Ok(self.forward_traced(g, image, landmarks)?.0)
    }

    /// The logit together with every stage's entrance features.
    pub fn forward_traced<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        image: Var,
        landmarks: &LandmarkSet,
    ) -> Result<(Var, Vec<StageTrace>)> {
        self.forward_with(g, image, |g, stage, x| match &stage.lakan {
            Some(m) => m.forward(g, x, landmarks),
            None => Ok(x),
        })
    }

    /// Forward pass with every stage entrance computed by `entrance`.
    pub fn forward_with<T: Real, F>(&self, g: &mut Graph<'_, T>, image: Var, mut entrance: F) -> Result<(Var, Vec<StageTrace>)>
    where
        F: FnMut(&mut Graph<'_, T>, &Stage, Var) -> Result<Var>,
    {
        self.check_image(g, image)?;
        let h = self.standardise(g, image)?;
        let mut h = self.stem.forward(g, h)?;
        let mut traces = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let input = h;
            let output = entrance(g, stage, h)?;
            traces.push(StageTrace { input, output });
            h = stage.block.forward(g, output)?;
        }
        let pooled = g.global_avg_pool(h)?;
        let c = g.shape(pooled)[0];
        let pooled = g.reshape(pooled, [1, c])?;
        let w = g.param(self.head_weight);
        let b = g.param(self.head_bias);
        let logit = g.matmul(pooled, w)?;
        let logit = g.add_row_bias(logit, b)?;
        Ok((g.reshape(logit, Vec::new())?, traces))
    }

    /// `σ(logit)` for one image.
    pub fn predict_score(&self, store: &ParamStore<f32>, image: &Tensor<f32>, landmarks: &LandmarkSet) -> Result<f32> {
        let mut g = Graph::new(store);
        let x = g.constant(image.clone());
        let logit = self.forward(&mut g, x, landmarks)?;
        Ok(sigmoid(g.value(logit).item()?))
    }
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::params::gradcheck_params;

    fn landmarks(rng: &mut ChaCha8Rng, n: usize) -> LandmarkSet {
        LandmarkSet::new((0..n).map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]).collect()).unwrap()
    }

    fn image(rng: &mut ChaCha8Rng, size: usize) -> Tensor<f64> {
        let n = 3 * size * size;
        Tensor::new([3, size, size], (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    fn small() -> ModelConfig {
        ModelConfig {
            input_size: 64,
            stem_channels: 4,
            stage_channels: vec![4, 6, 8, 10],
            pooled_size: 1,
            pos_freqs: 2,
            guide_dim: 3,
            mlp_hidden: 4,
            num_landmarks: 5,
            seed: 3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn default_model_stays_below_two_million_scalars() {
        let (model, store) = ToyEncoder::new::<f32>(ModelConfig::default()).unwrap();
        assert!(store.scalar_count() < 2_000_000, "{}", store.scalar_count());
        assert_eq!(model.stages.len(), 4);
        assert!(model.stages.iter().all(|s| s.lakan.is_some()));
        assert!(store.iter().all(|(n, _)| ["stem.", "stage1.", "stage2.", "stage3.", "stage4.", "head."]
            .iter()
            .any(|p| n.starts_with(p))));
        assert!(store.id("stage4.lakan.head_coeffs.0.weight").is_some());
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { input_size: 48, ..ModelConfig::default() }.validate().is_err());
        assert!(ModelConfig { stage_channels: vec![16, 16, 32, 64], ..ModelConfig::default() }
            .validate()
            .is_err());
        assert!(ModelConfig { input_std: vec![0.2, 0.0, 0.1], ..ModelConfig::default() }.validate().is_err());
        assert!(ModelConfig { input_mean: vec![0.5; 2], ..ModelConfig::default() }.validate().is_err());
    }

    #[test]
    fn baseline_has_identity_entrances_and_same_shapes() {
        let cfg = ModelConfig { ablate_kan: true, ablate_landmarks: true, ..small() };
        let (model, store) = ToyEncoder::new::<f64>(cfg).unwrap();
        assert!(model.stages.iter().all(|s| s.lakan.is_none()));
        assert!(store.iter().all(|(n, _)| !n.contains("lakan")));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new(&store);
        let x = g.constant(image(&mut rng, 64));
        let (logit, traces) = model.forward_traced(&mut g, x, &landmarks(&mut rng, 5)).unwrap();
        assert_eq!(g.shape(logit), &[] as &[usize]);
        for t in traces {
            assert_eq!(t.input, t.output);
        }
    }

    #[test]
    fn zero_image_and_zero_head_give_zero_logit() {
        let (model, mut store) = ToyEncoder::new::<f64>(small()).unwrap();
        store.set(model.head_weight, Tensor::zeros([10, 1])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::zeros([3, 64, 64]));
        let logit = model.forward(&mut g, x, &landmarks(&mut rng, 5)).unwrap();
        assert_eq!(g.value(logit).item().unwrap(), 0.0);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (img, l) = (image(&mut rng, 64), landmarks(&mut rng, 5));
        let run = || {
            let (model, store) = ToyEncoder::new::<f64>(small()).unwrap();
            let mut g = Graph::new(&store);
            let x = g.constant(img.clone());
            let y = model.forward(&mut g, x, &l).unwrap();
            g.value(y).item().unwrap()
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn wrong_image_size_is_dimension_error() {
        let (model, store) = ToyEncoder::new::<f64>(small()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::zeros([3, 32, 32]));
        assert!(matches!(model.forward(&mut g, x, &landmarks(&mut rng, 5)), Err(Error::Dimension(_))));
    }

    #[test]
    fn neutral_start_equals_constant_scaling() {
        let (model, store) = ToyEncoder::new::<f64>(small()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (img, l) = (image(&mut rng, 64), landmarks(&mut rng, 5));
        let mut g = Graph::new(&store);
        let x = g.constant(img);
        let (a, traces) = model.forward_traced(&mut g, x, &l).unwrap();
        let (b, _) = model
            .forward_with(&mut g, x, |g, _, h| Ok(g.scale(h, 1.5)))
            .unwrap();
        assert_eq!(g.value(a).item().unwrap().to_bits(), g.value(b).item().unwrap().to_bits());
        for t in traces {
            assert!(g.value(t.output).bitwise_eq(&g.value(t.input).map(|v| v * 1.5)));
        }
    }

    #[test]
    fn predict_score_matches_recomputation() {
        let (model, store) = ToyEncoder::new::<f32>(small()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = image(&mut rng, 64).cast::<f32>();
        let l = landmarks(&mut rng, 5);
        let p = model.predict_score(&store, &img, &l).unwrap();
        assert!(p > 0.0 && p < 1.0);
        let mut g = Graph::new(&store);
        let x = g.constant(img);
        let logit = model.forward(&mut g, x, &l).unwrap();
        let z = g.value(logit).item().unwrap() as f64;
        assert!((p as f64 - 1.0 / (1.0 + (-z).exp())).abs() < 1e-6);
    }

    #[test]
    fn lakan_gradients_match_finite_differences() {
        let (model, mut store) = ToyEncoder::new::<f64>(small()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        // move off the neutral start so every branch carries signal
        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id).contains("lakan") {
                let shape = store.get(id).shape().to_vec();
                store.set(id, uniform(&mut rng, &shape, 0.3)).unwrap();
            }
        }
        let (img, l) = (image(&mut rng, 64), landmarks(&mut rng, 5));
        let ids: Vec<_> = store.ids().filter(|&id| store.name(id).contains("lakan")).collect();
        let report = gradcheck_params(
            &store,
            &ids,
            |g| {
                let x = g.constant(img.clone());
                model.forward(g, x, &l)
            },
            1e-5,
            Some(1),
            7,
        )
        .unwrap();
        assert!(report.probes >= 20);
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }
}
