//! Adversarial training with the watermark terms.
//!
//! Each cycle runs the generator once on `[z; f(z)]`: the normal half feeds
//! the discriminator and the adversarial loss, the trigger half is scored
//! against `paste(G(z), logo)` with the target detached. Batch-norm
//! statistics therefore cover both halves, which keeps the frozen running
//! statistics valid for trigger and normal queries alike.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gmk_nn::{Mode, Tensor};

use crate::losses::{
    compose_objective, discriminator_hinge_grad, discriminator_hinge_loss, generator_hinge_grad,
    generator_hinge_loss, mean_kernel, mean_kernel_backward, sign_loss, sign_loss_grad, uchida_embed_loss,
    SignLossConfig,
};
use crate::metrics::reconstructive_loss;
use crate::triggers::{latent_trigger_tensor, paste_watermark_tensor};

use super::{
    export_params, fill_normal, import_params, BatchSampler, CheckpointMeta, Discriminator, DiscriminatorConfig,
    Generator, GeneratorConfig, ModelCheckpoint, ModelError, ModelSpec, TrainConfig, TrainError, TrainLogRow,
};

/// Generator, discriminator and the number of generator steps taken.
pub struct GanModel {
    pub g: Generator,
    pub d: Discriminator,
    pub step: u64,
    pub seed: u64,
}

impl GanModel {
    pub fn new(gcfg: GeneratorConfig, dcfg: DiscriminatorConfig, seed: u64) -> Result<Self, ModelError> {
        if gcfg.resolution() != dcfg.resolution || gcfg.out_channels != dcfg.in_channels {
            return Err(ModelError::Config(format!(
                "generator emits {0}x{0}x{1} but discriminator expects {2}x{2}x{3}",
                gcfg.resolution(),
                gcfg.out_channels,
                dcfg.resolution,
                dcfg.in_channels
            )));
        }
        Ok(Self {
            g: Generator::new(gcfg, seed)?,
            d: Discriminator::new(dcfg, seed.wrapping_add(1))?,
            step: 0,
            seed,
        })
    }

    pub fn to_checkpoint(&self, config_hash: &str) -> ModelCheckpoint {
        let mut tensors = Vec::new();
        export_params(&self.g.net, "g.", &mut tensors);
        export_params(&self.d.net, "d.", &mut tensors);
        ModelCheckpoint {
            meta: CheckpointMeta {
                step: self.step,
                seed: self.seed,
                config_hash: config_hash.to_string(),
                placement: self.g.placement(),
                gamma_prefix: "g.".into(),
                model: ModelSpec::Gan { generator: self.g.cfg.clone(), discriminator: self.d.cfg.clone() },
            },
            tensors,
        }
    }

    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<Self, ModelError> {
        let ModelSpec::Gan { generator, discriminator } = &ckpt.meta.model else {
            return Err(ModelError::Config("checkpoint does not hold a GAN".into()));
        };
        let mut m = Self::new(generator.clone(), discriminator.clone(), ckpt.meta.seed)?;
        import_params(&mut m.g.net, "g.", ckpt)?;
        import_params(&mut m.d.net, "d.", ckpt)?;
        m.step = ckpt.meta.step;
        Ok(m)
    }
}

/// Sets every signature channel to `b_i · |γ_i|` so the hinge starts
/// satisfied.
pub(crate) fn seed_signs(g: &mut Generator, sig: &SignLossConfig) {
    let bits = sig.target.bits();
    for (layer, start, count) in sig.layer_spans() {
        if let Some(p) = g.gamma_mut(&layer) {
            for (v, &b) in p.value[..count].iter_mut().zip(&bits[start..start + count]) {
                *v = v.abs() * b as f32;
            }
        }
    }
}

/// Adds the sign-loss subgradient to the γ gradients; returns the loss.
pub(crate) fn apply_sign_loss(g: &mut Generator, sig: &SignLossConfig) -> f64 {
    let bits = sig.target.bits();
    let mut total = 0.0;
    for (layer, start, count) in sig.layer_spans() {
        let Some(p) = g.gamma_mut(&layer) else { continue };
        let target = &bits[start..start + count];
        let gammas = &p.value[..count];
        total += sign_loss(gammas, target, sig.gamma0).expect("span fits layer");
        let grad = sign_loss_grad(gammas, target, sig.gamma0).expect("span fits layer");
        for (acc, d) in p.grad.iter_mut().zip(grad) {
            *acc += d;
        }
    }
    total
}

/// Adds the Uchida regularizer gradient on the output conv; returns the loss.
pub(crate) fn apply_uchida(g: &mut Generator, spec: &crate::losses::UchidaSpec) -> Result<f64, TrainError> {
    let c_out = g.cfg.out_channels;
    let p = g.net.param_mut("out.weight").ok_or_else(|| TrainError::Config("generator has no output conv".into()))?;
    let wbar = mean_kernel(&p.value, c_out);
    let (loss, gw) = uchida_embed_loss(&wbar, spec).map_err(|e| TrainError::Config(e.to_string()))?;
    for (acc, d) in p.grad.iter_mut().zip(mean_kernel_backward(&gw, c_out)) {
        *acc += d;
    }
    Ok(loss)
}

/// Trains `model` for `cfg.steps` generator steps on `data` (NHWC in
/// `[0, 1]`), appending one log row per step.
pub fn train_gan(
    model: &mut GanModel,
    data: &Tensor,
    cfg: &TrainConfig,
    log: &mut Vec<TrainLogRow>,
) -> Result<(), TrainError> {
    let latent = model.g.cfg.latent_dim;
    cfg.validate(latent)?;
    if cfg.steps == 0 {
        return Ok(());
    }
    let b = cfg.batch_size;
    let res = model.g.cfg.resolution();
    if data.shape().len() != 4 || data.shape()[1..] != [res, res, model.g.cfg.out_channels] || data.batch() == 0 {
        return Err(TrainError::Config(format!("dataset shape {:?} does not match generator output", data.shape())));
    }
    let use_trigger = cfg.objective.lambda > 0.0;
    let n_trig = if use_trigger { ((cfg.objective.trigger_batch_ratio * b as f64).ceil() as usize).clamp(1, b) } else { 0 };
    let trigger = cfg.trigger.as_ref().and_then(|t| t.as_latent());
    let signature = cfg.signature.as_ref().filter(|_| cfg.objective.use_sign_loss);

    if model.step == 0 {
        if let Some(sig) = signature {
            seed_signs(&mut model.g, sig);
        }
    }

    let mut sampler = BatchSampler::new(data.batch(), cfg.seed ^ 0x5a17_d47a);
    let mut zrng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1a7e_17);
    let mut opt_g = cfg.optim.adam();
    let mut opt_d = cfg.optim.adam();

    for _ in 0..cfg.steps {
        let mut fake_all = Tensor::zeros(vec![0]);
        let mut d_loss = 0.0;
        for _ in 0..cfg.d_steps {
            let real = sampler.next(data, b).map(|v| 2.0 * v - 1.0);
            let mut z = Tensor::zeros(vec![b, latent]);
            fill_normal(z.data_mut(), &mut zrng);
            let g_in = match trigger.filter(|_| use_trigger) {
                Some(t) => {
                    let xw = latent_trigger_tensor(&z.slice_batch(0, n_trig), t)
                        .map_err(|e| TrainError::Config(e.to_string()))?;
                    Tensor::concat_batch(&[&z, &xw])
                }
                None => z.clone(),
            };
            fake_all = model.g.forward(&g_in, Mode::TrainPrefix(b));
            let fake = fake_all.slice_batch(0, b);
            let scores = model.d.net.forward(&Tensor::concat_batch(&[&real, &fake]), Mode::Train);
            let (sr, sf) = scores.data().split_at(b);
            d_loss = discriminator_hinge_loss(sr, sf).map_err(|e| TrainError::Config(e.to_string()))?;
            if !d_loss.is_finite() {
                return Err(TrainError::NonFinite { step: model.step, term: "discriminator" });
            }
            let (gr, gf) = discriminator_hinge_grad(sr, sf);
            model.d.net.zero_grad();
            model.d.net.backward(&Tensor::new(vec![2 * b, 1], [gr, gf].concat()), true);
            opt_d.step(model.d.net.params_mut());
        }

        // generator step against the updated discriminator
        let fake = fake_all.slice_batch(0, b);
        let scores = model.d.net.forward(&fake, Mode::Train);
        let base = generator_hinge_loss(scores.data()).map_err(|e| TrainError::Config(e.to_string()))?;
        let grad_scores = Tensor::new(vec![b, 1], generator_hinge_grad(scores.data()));
        let grad_fake = model.d.net.backward(&grad_scores, false);

        let mut lw = 0.0;
        let mut grad_out = grad_fake.clone();
        if use_trigger {
            let asset = cfg.watermark.as_ref().expect("validated");
            let to01 = |t: &Tensor| t.map(|v| (v + 1.0) * 0.5);
            let gen_w = to01(&fake_all.slice_batch(b, b + n_trig));
            let target = paste_watermark_tensor(&to01(&fake.slice_batch(0, n_trig)), asset)
                .map_err(|e| TrainError::Config(e.to_string()))?;
            let (l, g01) = reconstructive_loss(&gen_w, &target, &cfg.ssim).map_err(|e| TrainError::Config(e.to_string()))?;
            lw = l;
            let scale = (cfg.objective.lambda * 0.5) as f32;
            let grad_w = g01.map(|v| v * scale);
            grad_out = Tensor::concat_batch(&[&grad_fake, &grad_w]);
        }
        model.g.net.zero_grad();
        model.g.net.backward(&grad_out, true);
        let ls = match signature {
            Some(sig) => apply_sign_loss(&mut model.g, sig),
            None => 0.0,
        };
        let mut total = compose_objective(base, lw, ls, &cfg.objective)
            .map_err(|_| TrainError::NonFinite { step: model.step, term: "generator" })?;
        if let Some(u) = &cfg.uchida {
            let lu = apply_uchida(&mut model.g, u)?;
            total += lu;
            if !lu.is_finite() {
                return Err(TrainError::NonFinite { step: model.step, term: "uchida" });
            }
        }
        opt_g.step(model.g.net.params_mut());
        model.step += 1;
        log.push(TrainLogRow { step: model.step, base, lw, ls, total, d_loss });
        if model.step.is_multiple_of(100) {
            log::debug!("step {} d {:.4} g {:.4} lw {:.4} ls {:.4}", model.step, d_loss, base, lw, ls);
        }
    }
    Ok(())
}

/// Parameters of a model, for equality checks.
#[cfg(test)]
pub(crate) fn snapshot(net: &gmk_nn::Sequential) -> Vec<Vec<f32>> {
    net.named_params().into_iter().map(|(_, p)| p.value.clone()).collect()
}
