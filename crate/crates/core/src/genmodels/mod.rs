//! Desk-scale DCGAN-style generator/discriminator pairs and a small VAE,
//! their training loops, and checkpoint persistence.

mod checkpoint;
mod gan;
mod vae;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use gmk_nn::{Activation, ActivationKind, BatchNorm, Conv2d, ConvTranspose2d, Dense, Mode, Reshape, Sequential, Tensor};

use crate::signature::{GammaSource, SignPlacement};

pub use checkpoint::{CheckpointError, CheckpointMeta, ModelCheckpoint, NamedTensor};
pub use gan::{train_gan, GanModel};
pub use gmk_nn::spectral::spectral_normalize;
pub use vae::{train_vae, Vae, VaeConfig};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite {term} loss at step {step}; model left at its last finite state")]
    NonFinite { step: u64, term: &'static str },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputHead {
    /// `[-1, 1]` images.
    Tanh,
    /// `[0, 1]` images.
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub latent_dim: usize,
    pub base_map: usize,
    /// Channels of the `base_map × base_map` map produced by the dense layer.
    pub base_channels: usize,
    /// Output channels of each stride-2 deconvolution (each followed by
    /// batch norm and ReLU).
    pub widths: Vec<usize>,
    pub out_channels: usize,
    pub head: OutputHead,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            latent_dim: 128,
            base_map: 4,
            base_channels: 512,
            widths: vec![256, 128, 64],
            out_channels: 3,
            head: OutputHead::Tanh,
        }
    }
}

impl GeneratorConfig {
    /// Narrow variant that trains in minutes on one CPU core.
    pub fn desk() -> Self {
        Self { base_channels: 128, widths: vec![64, 32, 16], ..Self::default() }
    }

    pub fn resolution(&self) -> usize {
        self.base_map << self.widths.len()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.latent_dim == 0 || self.base_map == 0 || self.base_channels == 0 || self.out_channels == 0 {
            return Err(ModelError::Config("generator dimensions must be positive".into()));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(ModelError::Config(format!("generator widths must be positive, got {:?}", self.widths)));
        }
        Ok(())
    }

    /// Normalization layers in signature order.
    pub fn placement(&self) -> SignPlacement {
        SignPlacement::new(self.widths.iter().enumerate().map(|(i, &w)| (format!("bn{i}"), w)))
    }
}

/// Latent batch → image batch.
pub struct Generator {
    pub cfg: GeneratorConfig,
    pub net: Sequential,
}

impl Generator {
    pub fn new(cfg: GeneratorConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Sequential::new();
        let m = cfg.base_map;
        net.push(Dense::new("fc", cfg.latent_dim, m * m * cfg.base_channels, false, &mut rng));
        net.push(Reshape::new("reshape", vec![m, m, cfg.base_channels]));
        let gamma_init = Normal::new(0.5f32, 0.02).expect("valid normal");
        let mut c = cfg.base_channels;
        for (i, &w) in cfg.widths.iter().enumerate() {
            net.push(ConvTranspose2d::new(format!("deconv{i}"), c, w, 4, 2, 1, &mut rng));
            let mut bn = BatchNorm::new(format!("bn{i}"), w);
            bn.gamma.value.iter_mut().for_each(|g| *g = gamma_init.sample(&mut rng));
            net.push(bn);
            net.push(Activation::new(format!("relu{i}"), ActivationKind::Relu));
            c = w;
        }
        net.push(Conv2d::new("out", c, cfg.out_channels, 3, 1, 1, false, &mut rng));
        let head = match cfg.head {
            OutputHead::Tanh => ActivationKind::Tanh,
            OutputHead::Sigmoid => ActivationKind::Sigmoid,
        };
        net.push(Activation::new("head", head));
        Ok(Self { cfg, net })
    }

    pub fn placement(&self) -> SignPlacement {
        self.cfg.placement()
    }

    pub fn forward(&mut self, z: &Tensor, mode: Mode) -> Tensor {
        self.net.forward(z, mode)
    }

    /// Output images mapped to `[0, 1]`.
    pub fn generate(&mut self, z: &Tensor) -> Tensor {
        let y = self.net.forward(z, Mode::Eval);
        match self.cfg.head {
            OutputHead::Tanh => y.map(|v| (v + 1.0) * 0.5),
            OutputHead::Sigmoid => y,
        }
    }

    pub fn gamma_mut(&mut self, layer: &str) -> Option<&mut gmk_nn::Param> {
        self.net.param_mut(&SignPlacement::gamma_tensor(layer))
    }
}

impl GammaSource for Generator {
    fn gamma(&self, layer: &str) -> Option<&[f32]> {
        self.net.param(&SignPlacement::gamma_tensor(layer)).map(|p| p.value.as_slice())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub layers: Vec<ConvSpec>,
    pub spectral_norm: bool,
    pub leaky_slope: f32,
    pub in_channels: usize,
    pub resolution: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self::scaled(1)
    }
}

impl DiscriminatorConfig {
    /// The reference layout with every width divided by `div`.
    pub fn scaled(div: usize) -> Self {
        let spec = |kernel, stride, channels: usize| ConvSpec { kernel, stride, channels: (channels / div).max(1) };
        Self {
            layers: vec![
                spec(3, 1, 64),
                spec(4, 2, 64),
                spec(3, 1, 128),
                spec(4, 2, 128),
                spec(3, 1, 256),
                spec(4, 2, 256),
                spec(3, 1, 512),
            ],
            spectral_norm: true,
            leaky_slope: 0.1,
            in_channels: 3,
            resolution: 32,
        }
    }

    pub fn desk() -> Self {
        Self::scaled(16)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layers.is_empty() || self.layers.iter().any(|l| l.channels == 0 || l.kernel == 0 || l.stride == 0) {
            return Err(ModelError::Config("discriminator layers must be non-empty and positive".into()));
        }
        if self.layers.iter().any(|l| l.kernel == 4 && l.stride != 2 || l.kernel == 3 && l.stride != 1) {
            return Err(ModelError::Config("supported layers are 3x3 stride 1 and 4x4 stride 2".into()));
        }
        let downs = self.layers.iter().filter(|l| l.stride == 2).count();
        if self.resolution >> downs == 0 || !self.resolution.is_multiple_of(1 << downs) {
            return Err(ModelError::Config(format!("resolution {} not divisible by 2^{downs}", self.resolution)));
        }
        Ok(())
    }
}

/// Image batch → one score per sample.
pub struct Discriminator {
    pub cfg: DiscriminatorConfig,
    pub net: Sequential,
}

impl Discriminator {
    pub fn new(cfg: DiscriminatorConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Sequential::new();
        let (mut c, mut hw) = (cfg.in_channels, cfg.resolution);
        for (i, l) in cfg.layers.iter().enumerate() {
            let pad = if l.kernel == 4 { 1 } else { l.kernel / 2 };
            net.push(Conv2d::new(format!("conv{i}"), c, l.channels, l.kernel, l.stride, pad, cfg.spectral_norm, &mut rng));
            net.push(Activation::new(format!("lrelu{i}"), ActivationKind::LeakyRelu(cfg.leaky_slope)));
            c = l.channels;
            hw /= l.stride;
        }
        net.push(Reshape::new("flatten", vec![hw * hw * c]));
        net.push(Dense::new("fc", hw * hw * c, 1, cfg.spectral_norm, &mut rng));
        Ok(Self { cfg, net })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Gan { generator: GeneratorConfig, discriminator: DiscriminatorConfig },
    Vae { vae: VaeConfig },
}

/// Adam settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.5, beta2: 0.9 }
    }
}

impl OptimConfig {
    pub(crate) fn adam(&self) -> gmk_nn::Adam {
        gmk_nn::Adam::new(gmk_nn::AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: 1e-8 })
    }
}

/// Everything a training run needs besides the model and data.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub d_steps: usize,
    pub seed: u64,
    pub objective: crate::losses::ObjectiveSpec,
    pub trigger: Option<crate::triggers::TriggerSpec>,
    pub watermark: Option<crate::triggers::WatermarkAsset>,
    pub signature: Option<crate::losses::SignLossConfig>,
    pub uchida: Option<crate::losses::UchidaSpec>,
    pub ssim: crate::metrics::SsimConfig,
}

impl TrainConfig {
    pub fn new(steps: usize, seed: u64) -> Self {
        Self {
            steps,
            batch_size: 64,
            optim: OptimConfig::default(),
            d_steps: 1,
            seed,
            objective: crate::losses::ObjectiveSpec::baseline(),
            trigger: None,
            watermark: None,
            signature: None,
            uchida: None,
            ssim: crate::metrics::SsimConfig::default(),
        }
    }

    pub(crate) fn validate(&self, latent_dim: usize) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 || self.d_steps == 0 {
            return bad("batch_size and d_steps must be > 0".into());
        }
        self.objective.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        if self.objective.lambda > 0.0 {
            match (&self.trigger, &self.watermark) {
                (Some(t), Some(_)) => match t.as_latent() {
                    Some(l) if l.dim == latent_dim => {}
                    Some(l) => return bad(format!("trigger dim {} != latent dim {latent_dim}", l.dim)),
                    None => return bad("generators take latent triggers".into()),
                },
                _ => return bad("lambda > 0 needs a trigger and a watermark".into()),
            }
        }
        if self.objective.use_sign_loss && self.signature.is_none() {
            return bad("sign loss enabled without a signature".into());
        }
        if let Some(s) = &self.signature {
            s.validate().map_err(|e| TrainError::Config(e.to_string()))?;
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TrainLogRow {
    pub step: u64,
    pub base: f64,
    pub lw: f64,
    pub ls: f64,
    pub total: f64,
    pub d_loss: f64,
}

impl TrainLogRow {
    pub const HEADER: &'static str = "step,base,lw,ls,total,d_loss";

    pub fn to_csv(&self) -> String {
        format!("{},{},{},{},{},{}", self.step, self.base, self.lw, self.ls, self.total, self.d_loss)
    }
}

pub fn log_to_csv(rows: &[TrainLogRow]) -> String {
    let mut s = String::from(TrainLogRow::HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

/// `n` standard-normal latents from a seed.
pub fn sample_latents(n: usize, dim: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![n, dim], (0..n * dim).map(|_| StandardNormal.sample(&mut rng)).collect())
}

pub(crate) fn fill_normal(t: &mut [f32], rng: &mut ChaCha8Rng) {
    for v in t {
        *v = StandardNormal.sample(rng);
    }
}

/// Epoch-shuffled minibatches over an in-memory dataset.
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut s = Self { order: (0..n).collect(), pos: n, rng: ChaCha8Rng::seed_from_u64(seed) };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        use rand::seq::SliceRandom;
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    pub fn next(&mut self, data: &Tensor, batch: usize) -> Tensor {
        let item = data.item_len();
        let mut out = Vec::with_capacity(batch * item);
        for _ in 0..batch {
            if self.pos == self.order.len() {
                self.reshuffle();
            }
            out.extend_from_slice(data.item(self.order[self.pos]));
            self.pos += 1;
        }
        let mut shape = data.shape().to_vec();
        shape[0] = batch;
        Tensor::new(shape, out)
    }
}

/// The image-producing network in a checkpoint: the GAN generator or the
/// VAE decoder, with its stored weights and running statistics.
pub fn generator_from_checkpoint(ckpt: &ModelCheckpoint) -> Result<Generator, ModelError> {
    let cfg = match &ckpt.meta.model {
        ModelSpec::Gan { generator, .. } => generator.clone(),
        ModelSpec::Vae { vae } => vae.decoder.clone(),
    };
    let mut g = Generator::new(cfg, ckpt.meta.seed)?;
    import_params(&mut g.net, &ckpt.meta.gamma_prefix, ckpt)?;
    Ok(g)
}

pub(crate) fn export_params(net: &Sequential, prefix: &str, out: &mut Vec<NamedTensor>) {
    for (name, p) in net.named_params() {
        out.push(NamedTensor { name: format!("{prefix}{name}"), shape: p.shape.clone(), data: p.value.clone() });
    }
}

pub(crate) fn import_params(net: &mut Sequential, prefix: &str, ckpt: &ModelCheckpoint) -> Result<(), CheckpointError> {
    for (name, p) in net.named_params_mut() {
        let full = format!("{prefix}{name}");
        let t = ckpt.get(&full).ok_or_else(|| CheckpointError::MissingTensor(full.clone()))?;
        if t.shape != p.shape {
            return Err(CheckpointError::ShapeMismatch { name: full, expected: p.shape.clone(), found: t.shape.clone() });
        }
        p.value.copy_from_slice(&t.data);
    }
    Ok(())
}
