//! Variational autoencoder whose decoder is the signed generator.
//!
//! Trigger latents are built from the (detached) posterior sample, so the
//! decoder learns the watermark response while the encoder only sees the
//! ELBO.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use gmk_nn::{Activation, ActivationKind, Conv2d, Dense, Mode, Reshape, Sequential, Tensor};

use crate::losses::{vae_elbo_loss, compose_objective};
use crate::metrics::reconstructive_loss;
use crate::triggers::{latent_trigger_tensor, paste_watermark_tensor};

use super::gan::{apply_sign_loss, seed_signs};
use super::{
    export_params, fill_normal, import_params, BatchSampler, CheckpointMeta, Generator, GeneratorConfig,
    ModelCheckpoint, ModelError, ModelSpec, OutputHead, TrainConfig, TrainError, TrainLogRow,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    /// Output channels of the stride-2 encoder convolutions.
    pub enc_widths: Vec<usize>,
    /// Decoder; its latent size is the VAE latent size.
    pub decoder: GeneratorConfig,
    /// Weight on the KL term; `None` uses one over the pixel count, which
    /// puts the KL on the same per-element scale as the squared error.
    #[serde(default)]
    pub kl_weight: Option<f64>,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self { enc_widths: vec![16, 32, 64], decoder: GeneratorConfig { head: OutputHead::Sigmoid, ..GeneratorConfig::desk() }, kl_weight: None }
    }
}

impl VaeConfig {
    pub fn kl_weight(&self) -> f64 {
        let c = &self.decoder;
        self.kl_weight.unwrap_or(1.0 / (c.resolution() * c.resolution() * c.out_channels) as f64)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.decoder.validate()?;
        if !(self.kl_weight() >= 0.0 && self.kl_weight().is_finite()) {
            return Err(ModelError::Config(format!("kl_weight must be finite and non-negative, got {:?}", self.kl_weight)));
        }
        if self.decoder.head != OutputHead::Sigmoid {
            return Err(ModelError::Config("VAE decoder needs a sigmoid head".into()));
        }
        let res = self.decoder.resolution();
        if self.enc_widths.is_empty() || self.enc_widths.contains(&0) || res >> self.enc_widths.len() == 0 {
            return Err(ModelError::Config(format!("invalid encoder widths {:?}", self.enc_widths)));
        }
        Ok(())
    }
}

pub struct Vae {
    pub cfg: VaeConfig,
    pub enc: Sequential,
    pub dec: Generator,
    pub step: u64,
    pub seed: u64,
}

impl Vae {
    pub fn new(cfg: VaeConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(7));
        let mut enc = Sequential::new();
        let (mut c, mut hw) = (cfg.decoder.out_channels, cfg.decoder.resolution());
        for (i, &w) in cfg.enc_widths.iter().enumerate() {
            enc.push(Conv2d::new(format!("conv{i}"), c, w, 4, 2, 1, false, &mut rng));
            enc.push(Activation::new(format!("lrelu{i}"), ActivationKind::LeakyRelu(0.2)));
            c = w;
            hw /= 2;
        }
        enc.push(Reshape::new("flatten", vec![hw * hw * c]));
        enc.push(Dense::new("fc", hw * hw * c, 2 * cfg.decoder.latent_dim, false, &mut rng));
        let dec = Generator::new(cfg.decoder.clone(), seed)?;
        Ok(Self { cfg, enc, dec, step: 0, seed })
    }

    pub fn latent_dim(&self) -> usize {
        self.cfg.decoder.latent_dim
    }

    /// Posterior mean and standard deviation for a batch in `[0, 1]`.
    pub fn encode(&mut self, x: &Tensor, mode: Mode) -> (Vec<f32>, Vec<f32>) {
        let h = self.enc.forward(x, mode);
        split_posterior(&h, self.latent_dim())
    }

    /// `z = μ + σ ⊙ ε`.
    pub fn reparameterize(mu: &[f32], sigma: &[f32], eps: &[f32]) -> Vec<f32> {
        mu.iter().zip(sigma).zip(eps).map(|((m, s), e)| m + s * e).collect()
    }

    pub fn to_checkpoint(&self, config_hash: &str) -> ModelCheckpoint {
        let mut tensors = Vec::new();
        export_params(&self.enc, "enc.", &mut tensors);
        export_params(&self.dec.net, "dec.", &mut tensors);
        ModelCheckpoint {
            meta: CheckpointMeta {
                step: self.step,
                seed: self.seed,
                config_hash: config_hash.to_string(),
                placement: self.dec.placement(),
                gamma_prefix: "dec.".into(),
                model: ModelSpec::Vae { vae: self.cfg.clone() },
            },
            tensors,
        }
    }

    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<Self, ModelError> {
        let ModelSpec::Vae { vae } = &ckpt.meta.model else {
            return Err(ModelError::Config("checkpoint does not hold a VAE".into()));
        };
        let mut m = Self::new(vae.clone(), ckpt.meta.seed)?;
        import_params(&mut m.enc, "enc.", ckpt)?;
        import_params(&mut m.dec.net, "dec.", ckpt)?;
        m.step = ckpt.meta.step;
        Ok(m)
    }
}

const LOGVAR_CLAMP: f32 = 10.0;

fn split_posterior(h: &Tensor, latent: usize) -> (Vec<f32>, Vec<f32>) {
    let mut mu = Vec::with_capacity(h.batch() * latent);
    let mut sigma = Vec::with_capacity(h.batch() * latent);
    for row in h.data().chunks_exact(2 * latent) {
        mu.extend_from_slice(&row[..latent]);
        sigma.extend(row[latent..].iter().map(|lv| (0.5 * lv.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP)).exp()));
    }
    (mu, sigma)
}

/// Trains the VAE for `cfg.steps` steps on `data` (NHWC in `[0, 1]`).
pub fn train_vae(model: &mut Vae, data: &Tensor, cfg: &TrainConfig, log: &mut Vec<TrainLogRow>) -> Result<(), TrainError> {
    let latent = model.latent_dim();
    cfg.validate(latent)?;
    if cfg.steps == 0 {
        return Ok(());
    }
    let b = cfg.batch_size;
    let res = model.cfg.decoder.resolution();
    if data.shape().len() != 4 || data.shape()[1..] != [res, res, model.cfg.decoder.out_channels] || data.batch() == 0 {
        return Err(TrainError::Config(format!("dataset shape {:?} does not match decoder output", data.shape())));
    }
    let use_trigger = cfg.objective.lambda > 0.0;
    let n_trig = if use_trigger { ((cfg.objective.trigger_batch_ratio * b as f64).ceil() as usize).clamp(1, b) } else { 0 };
    let trigger = cfg.trigger.as_ref().and_then(|t| t.as_latent());
    let signature = cfg.signature.as_ref().filter(|_| cfg.objective.use_sign_loss);
    if model.step == 0 {
        if let Some(sig) = signature {
            seed_signs(&mut model.dec, sig);
        }
    }
    let mut sampler = BatchSampler::new(data.batch(), cfg.seed ^ 0x5a17_d47a);
    let mut erng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1a7e_17);
    let mut opt_enc = cfg.optim.adam();
    let mut opt_dec = cfg.optim.adam();

    for _ in 0..cfg.steps {
        let x = sampler.next(data, b);
        let h = model.enc.forward(&x, Mode::Train);
        let (mu, sigma) = split_posterior(&h, latent);
        let mut eps = vec![0.0; b * latent];
        fill_normal(&mut eps, &mut erng);
        let z = Tensor::new(vec![b, latent], Vae::reparameterize(&mu, &sigma, &eps));
        let dec_in = match trigger.filter(|_| use_trigger) {
            Some(t) => {
                let xw = latent_trigger_tensor(&z.slice_batch(0, n_trig), t).map_err(|e| TrainError::Config(e.to_string()))?;
                Tensor::concat_batch(&[&z, &xw])
            }
            None => z.clone(),
        };
        let out = model.dec.forward(&dec_in, Mode::TrainPrefix(b));
        let recon = out.slice_batch(0, b);
        let mut vl = vae_elbo_loss(x.data(), recon.data(), &mu, &sigma, b).map_err(|e| TrainError::Config(e.to_string()))?;
        let beta = model.cfg.kl_weight();
        let base = vl.recon + beta * vl.kl;
        vl.d_mu.iter_mut().chain(vl.d_sigma.iter_mut()).for_each(|g| *g *= beta as f32);
        if !base.is_finite() {
            return Err(TrainError::NonFinite { step: model.step, term: "elbo" });
        }
        let mut grad_out = Tensor::new(recon.shape().to_vec(), vl.d_recon.clone());
        let mut lw = 0.0;
        if use_trigger {
            let asset = cfg.watermark.as_ref().expect("validated");
            let target = paste_watermark_tensor(&recon.slice_batch(0, n_trig), asset)
                .map_err(|e| TrainError::Config(e.to_string()))?;
            let (l, g) = reconstructive_loss(&out.slice_batch(b, b + n_trig), &target, &cfg.ssim)
                .map_err(|e| TrainError::Config(e.to_string()))?;
            lw = l;
            let scale = cfg.objective.lambda as f32;
            grad_out = Tensor::concat_batch(&[&grad_out, &g.map(|v| v * scale)]);
        }
        model.dec.net.zero_grad();
        let grad_in = model.dec.net.backward(&grad_out, true);
        let ls = match signature {
            Some(sig) => apply_sign_loss(&mut model.dec, sig),
            None => 0.0,
        };
        let total = compose_objective(base, lw, ls, &cfg.objective)
            .map_err(|_| TrainError::NonFinite { step: model.step, term: "decoder" })?;

        // back through the reparameterization into the encoder head
        let dz = &grad_in.data()[..b * latent];
        let mut dh = Vec::with_capacity(b * 2 * latent);
        for r in 0..b {
            let span = r * latent..(r + 1) * latent;
            for i in span.clone() {
                dh.push(dz[i] + vl.d_mu[i]);
            }
            for i in span {
                let d_sigma = dz[i] * eps[i] + vl.d_sigma[i];
                let lv = h.data()[r * 2 * latent + latent + (i - r * latent)];
                let inside = lv.abs() < LOGVAR_CLAMP;
                dh.push(if inside { d_sigma * 0.5 * sigma[i] } else { 0.0 });
            }
        }
        model.enc.zero_grad();
        model.enc.backward(&Tensor::new(vec![b, 2 * latent], dh), true);
        opt_enc.step(model.enc.params_mut());
        opt_dec.step(model.dec.net.params_mut());
        model.step += 1;
        log.push(TrainLogRow { step: model.step, base, lw, ls, total, d_loss: 0.0 });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::{generate_shapes, SyntheticShapesSpec};

    #[test]
    fn zero_noise_is_posterior_mean() {
        let mu = [0.3, -1.0];
        assert_eq!(Vae::reparameterize(&mu, &[2.0, 0.5], &[0.0, 0.0]), mu.to_vec());
    }

    #[test]
    fn decoder_range_and_roundtrip() {
        let mut v = Vae::new(VaeConfig::default(), 2).unwrap();
        let z = super::super::sample_latents(4, 128, 1);
        let y = v.dec.generate(&z);
        assert!(y.data().iter().all(|p| (0.0..=1.0).contains(p)));
        let data = generate_shapes(&SyntheticShapesSpec { n_samples: 16, ..Default::default() }).unwrap();
        let mut cfg = TrainConfig::new(2, 3);
        cfg.batch_size = 8;
        train_vae(&mut v, &data, &cfg, &mut Vec::new()).unwrap();
        let back = Vae::from_checkpoint(&v.to_checkpoint("h")).unwrap();
        assert_eq!(back.to_checkpoint("h").to_bytes(), v.to_checkpoint("h").to_bytes());
        let bad = VaeConfig { decoder: GeneratorConfig::desk(), ..VaeConfig::default() };
        assert!(Vae::new(bad, 0).is_err());
    }

    #[test]
    fn encoder_gradient_matches_finite_differences() {
        // loss(μ, σ) = KL + ⟨r, z⟩ through the reparameterization
        let (mu, lv, eps, r) = (0.4f32, -0.6f32, 0.8f32, 0.3f32);
        let f = |mu: f32, lv: f32| {
            let s = (0.5 * lv).exp();
            let z = mu + s * eps;
            let kl = vae_elbo_loss(&[0.0], &[0.0], &[mu], &[s], 1).unwrap().kl;
            kl + (r * z) as f64
        };
        let s = (0.5 * lv).exp();
        let vl = vae_elbo_loss(&[0.0], &[0.0], &[mu], &[s], 1).unwrap();
        let d_mu = r + vl.d_mu[0];
        let d_lv = (r * eps + vl.d_sigma[0]) * 0.5 * s;
        let h = 1e-3;
        assert!((((f(mu + h, lv) - f(mu - h, lv)) / (2.0 * h as f64)) - d_mu as f64).abs() < 1e-3);
        assert!((((f(mu, lv + h) - f(mu, lv - h)) / (2.0 * h as f64)) - d_lv as f64).abs() < 1e-3);
    }
}
