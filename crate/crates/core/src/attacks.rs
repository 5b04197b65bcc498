//! Removal attacks (fine-tuning, overwriting) and ambiguity attacks (sign
//! flips, forged Uchida keys) against a stolen checkpoint.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use gmk_nn::Tensor;

use crate::genmodels::{
    generator_from_checkpoint, sample_latents, train_gan, train_vae, GanModel, ModelCheckpoint, ModelError, ModelSpec,
    TrainConfig, TrainError, Vae,
};
use crate::losses::{
    bit_error_rate, mean_kernel, uchida_extract, BaseLossKind, ObjectiveSpec, SignLossConfig, UchidaSpec,
};
use crate::metrics::{frechet_proxy, FrechetProxyConfig, MetricError, SsimConfig};
use crate::triggers::{TriggerSpec, WatermarkAsset};
use crate::verify::{sample_qwm, verify_whitebox, OwnerKeys, VerifyError};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Train(TrainError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Finetune,
    Overwrite,
    FlipSigns,
}

/// How attacked models are scored.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_queries: usize,
    pub query_seed: u64,
    /// Real and generated samples for the fidelity proxy.
    pub n_fidelity: usize,
    pub fidelity_seed: u64,
    pub fidelity: FrechetProxyConfig,
    pub ssim: SsimConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_queries: 256,
            query_seed: 0x7e57,
            n_fidelity: 1024,
            fidelity_seed: 0xf1de,
            fidelity: FrechetProxyConfig::default(),
            ssim: SsimConfig::default(),
        }
    }
}

/// Reference data, the owner's keys and scoring settings.
#[derive(Clone, Copy, Debug)]
pub struct AttackContext<'a> {
    /// NHWC images in `[0, 1]`.
    pub data: &'a Tensor,
    pub owner: &'a OwnerKeys,
    pub eval: EvalConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackMetrics {
    pub fidelity_proxy: f64,
    pub qwm_mean: f64,
    /// Owner signature BER; 1.0 when the signature cannot be read.
    pub ber: f64,
}

/// Fidelity proxy, owner trigger Q_wm and owner BER of a checkpoint.
pub fn evaluate(ckpt: &ModelCheckpoint, ctx: &AttackContext) -> Result<AttackMetrics, AttackError> {
    let mut g = generator_from_checkpoint(ckpt)?;
    let e = &ctx.eval;
    let q = sample_qwm(&mut g, &ctx.owner.trigger, &ctx.owner.watermark, e.n_queries, e.query_seed, 128, &e.ssim)?;
    let n = e.n_fidelity.min(ctx.data.batch());
    let fake = g.generate(&sample_latents(n, g.cfg.latent_dim, e.fidelity_seed));
    let fidelity_proxy = frechet_proxy(&ctx.data.slice_batch(0, n), &fake, &e.fidelity)?;
    let ber = verify_whitebox(ckpt, &ctx.owner.signature).ber.unwrap_or(1.0);
    Ok(AttackMetrics { fidelity_proxy, qwm_mean: q.trigger_mean(), ber })
}

fn attacker_qwm(ckpt: &ModelCheckpoint, keys: &AttackerKeys, eval: &EvalConfig) -> Result<f64, AttackError> {
    let mut g = generator_from_checkpoint(ckpt)?;
    let q = sample_qwm(&mut g, &keys.trigger, &keys.watermark, eval.n_queries, eval.query_seed, 128, &eval.ssim)?;
    Ok(q.trigger_mean())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub kind: AttackKind,
    pub variant: Option<String>,
    pub parameters: serde_json::Value,
    pub pre: AttackMetrics,
    pub post: AttackMetrics,
    pub attacker_qwm_pre: Option<f64>,
    pub attacker_qwm_post: Option<f64>,
    pub seeds: Vec<u64>,
    pub elapsed_steps: u64,
    /// Set when training stopped on a non-finite loss; the checkpoint holds
    /// the last finite state.
    pub diverged: Option<String>,
}

impl AttackReport {
    pub const CSV_HEADER: &'static str = "kind,variant,pre_fidelity,post_fidelity,pre_qwm,post_qwm,pre_ber,post_ber,attacker_qwm_post,elapsed_steps";

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        let kind = serde_json::to_value(self.kind).expect("kind serializes");
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            kind.as_str().unwrap_or_default(),
            self.variant.as_deref().unwrap_or(""),
            self.pre.fidelity_proxy,
            self.post.fidelity_proxy,
            self.pre.qwm_mean,
            self.post.qwm_mean,
            self.pre.ber,
            self.post.ber,
            self.attacker_qwm_post.map(|v| v.to_string()).unwrap_or_default(),
            self.elapsed_steps
        )
    }
}

/// Continues training the checkpoint's model with `cfg` and returns the new
/// checkpoint plus the divergence message, if any.
fn continue_training(
    ckpt: &ModelCheckpoint,
    data: &Tensor,
    cfg: &TrainConfig,
) -> Result<(ModelCheckpoint, Option<String>), AttackError> {
    let hash = ckpt.meta.config_hash.clone();
    let keep = |r: Result<(), TrainError>| match r {
        Ok(()) => Ok(None),
        Err(e @ TrainError::NonFinite { .. }) => Ok(Some(e.to_string())),
        Err(e) => Err(AttackError::Train(e)),
    };
    let mut cfg = cfg.clone();
    match &ckpt.meta.model {
        ModelSpec::Gan { .. } => {
            cfg.objective.base_loss_kind = BaseLossKind::DcganHingeG;
            let mut m = GanModel::from_checkpoint(ckpt)?;
            let diverged = keep(train_gan(&mut m, data, &cfg, &mut Vec::new()))?;
            Ok((m.to_checkpoint(&hash), diverged))
        }
        ModelSpec::Vae { .. } => {
            cfg.objective.base_loss_kind = BaseLossKind::VaeElbo;
            let mut m = Vae::from_checkpoint(ckpt)?;
            let diverged = keep(train_vae(&mut m, data, &cfg, &mut Vec::new()))?;
            Ok((m.to_checkpoint(&hash), diverged))
        }
    }
}

/// Fine-tuning attack: `template.steps` more steps of the plain objective,
/// with no trigger term and no sign loss.
pub fn finetune_attack(
    ckpt: &ModelCheckpoint,
    ctx: &AttackContext,
    template: &TrainConfig,
) -> Result<(ModelCheckpoint, AttackReport), AttackError> {
    let mut cfg = template.clone();
    cfg.objective = ObjectiveSpec::baseline();
    cfg.trigger = None;
    cfg.watermark = None;
    cfg.signature = None;
    cfg.uchida = None;
    let pre = evaluate(ckpt, ctx)?;
    let (out, diverged) = if cfg.steps == 0 { (ckpt.clone(), None) } else { continue_training(ckpt, ctx.data, &cfg)? };
    let post = if cfg.steps == 0 { pre } else { evaluate(&out, ctx)? };
    let report = AttackReport {
        kind: AttackKind::Finetune,
        variant: None,
        parameters: serde_json::json!({ "steps": cfg.steps, "batch_size": cfg.batch_size, "lr": cfg.optim.lr }),
        pre,
        post,
        attacker_qwm_pre: None,
        attacker_qwm_post: None,
        seeds: vec![cfg.seed],
        elapsed_steps: out.meta.step - ckpt.meta.step,
        diverged,
    };
    Ok((out, report))
}

/// The attacker's own watermark keys.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackerKeys {
    pub trigger: TriggerSpec,
    pub watermark: WatermarkAsset,
    /// Enables the "with sign loss" variant.
    pub signature: Option<SignLossConfig>,
}

pub const VARIANT_PLAIN: &str = "without_sign_loss";
pub const VARIANT_SIGNED: &str = "with_sign_loss";

/// Overwrite attack: re-runs embedding from the stolen checkpoint with the
/// attacker's keys. Returns the plain variant, then the signed variant when
/// the attacker has a signature.
pub fn overwrite_attack(
    ckpt: &ModelCheckpoint,
    ctx: &AttackContext,
    attacker: &AttackerKeys,
    template: &TrainConfig,
) -> Result<Vec<(ModelCheckpoint, AttackReport)>, AttackError> {
    if attacker.trigger == ctx.owner.trigger {
        return Err(AttackError::Config("attacker trigger is identical to the owner trigger".into()));
    }
    if template.objective.lambda <= 0.0 {
        return Err(AttackError::Config("overwriting needs a positive lambda".into()));
    }
    let pre = evaluate(ckpt, ctx)?;
    let attacker_pre = attacker_qwm(ckpt, attacker, &ctx.eval)?;
    let mut variants = vec![(VARIANT_PLAIN, None)];
    if let Some(sig) = &attacker.signature {
        variants.push((VARIANT_SIGNED, Some(sig.clone())));
    }
    let mut out = Vec::new();
    for (label, signature) in variants {
        let mut cfg = template.clone();
        cfg.objective.use_sign_loss = signature.is_some();
        cfg.trigger = Some(attacker.trigger.clone());
        cfg.watermark = Some(attacker.watermark.clone());
        cfg.signature = signature;
        cfg.uchida = None;
        let (attacked, diverged) = continue_training(ckpt, ctx.data, &cfg)?;
        let report = AttackReport {
            kind: AttackKind::Overwrite,
            variant: Some(label.to_string()),
            parameters: serde_json::json!({
                "steps": cfg.steps,
                "lambda": cfg.objective.lambda,
                "sign_loss": cfg.objective.use_sign_loss,
                "batch_size": cfg.batch_size,
                "lr": cfg.optim.lr,
            }),
            pre,
            post: evaluate(&attacked, ctx)?,
            attacker_qwm_pre: Some(attacker_pre),
            attacker_qwm_post: Some(attacker_qwm(&attacked, attacker, &ctx.eval)?),
            seeds: vec![cfg.seed],
            elapsed_steps: attacked.meta.step - ckpt.meta.step,
            diverged,
        };
        out.push((attacked, report));
    }
    Ok(out)
}

/// Negates γ on `⌊p · n_channels⌋` of the first `n_channels` placement
/// channels, drawn without replacement. Returns the flipped global indices
/// in ascending order.
pub fn flip_signs(
    ckpt: &ModelCheckpoint,
    p: f64,
    n_channels: usize,
    seed: u64,
) -> Result<(ModelCheckpoint, Vec<usize>), AttackError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(AttackError::Config(format!("flip fraction must be in [0, 1], got {p}")));
    }
    let placement = &ckpt.meta.placement;
    if n_channels > placement.total_capacity_bits() {
        return Err(AttackError::Config(format!(
            "{n_channels} channels requested but placement holds {}",
            placement.total_capacity_bits()
        )));
    }
    let count = (p * n_channels as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, n_channels, count).into_vec();
    picked.sort_unstable();
    let mut out = ckpt.clone();
    let mut offset = 0;
    for (layer, &channels) in placement.layer_names.iter().zip(&placement.channel_counts) {
        let local: Vec<usize> = picked.iter().filter(|&&i| i >= offset && i < offset + channels).map(|i| i - offset).collect();
        if !local.is_empty() {
            let gamma = out
                .gammas_mut(layer)
                .ok_or_else(|| AttackError::Config(format!("checkpoint has no scale tensor for {layer}")))?;
            for i in local {
                gamma[i] = -gamma[i];
            }
        }
        offset += channels;
    }
    Ok((out, picked))
}

/// Sign-flip attack on the owner's signature channels, without retraining.
pub fn flip_signs_attack(
    ckpt: &ModelCheckpoint,
    ctx: &AttackContext,
    p: f64,
    seed: u64,
) -> Result<(ModelCheckpoint, AttackReport), AttackError> {
    let pre = evaluate(ckpt, ctx)?;
    flip_with_pre(ckpt, ctx, p, seed, pre)
}

fn flip_with_pre(
    ckpt: &ModelCheckpoint,
    ctx: &AttackContext,
    p: f64,
    seed: u64,
    pre: AttackMetrics,
) -> Result<(ModelCheckpoint, AttackReport), AttackError> {
    let n = ctx.owner.signature.target.len();
    let (out, flipped) = flip_signs(ckpt, p, n, seed)?;
    let post = if flipped.is_empty() { pre } else { evaluate(&out, ctx)? };
    let report = AttackReport {
        kind: AttackKind::FlipSigns,
        variant: None,
        parameters: serde_json::json!({ "p": p, "signature_channels": n, "flipped": flipped }),
        pre,
        post,
        attacker_qwm_pre: None,
        attacker_qwm_post: None,
        seeds: vec![seed],
        elapsed_steps: 0,
        diverged: None,
    };
    Ok((out, report))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub p: f64,
    pub seed: u64,
    pub fidelity_proxy: f64,
    pub qwm_mean: f64,
    pub ber: f64,
}

/// One row per (fraction, seed) pair, fractions outermost.
pub fn flip_sweep(
    ckpt: &ModelCheckpoint,
    ctx: &AttackContext,
    fractions: &[f64],
    seeds: &[u64],
) -> Result<Vec<SweepRow>, AttackError> {
    let pre = evaluate(ckpt, ctx)?;
    let mut rows = Vec::with_capacity(fractions.len() * seeds.len());
    for &p in fractions {
        for &seed in seeds {
            let (_, r) = flip_with_pre(ckpt, ctx, p, seed, pre)?;
            rows.push(SweepRow { p, seed, fidelity_proxy: r.post.fidelity_proxy, qwm_mean: r.post.qwm_mean, ber: r.post.ber });
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("p,seed,fidelity_proxy,qwm_mean,ber\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{}\n", r.p, r.seed, r.fidelity_proxy, r.qwm_mean, r.ber));
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgeConfig {
    pub max_iters: usize,
    /// Per-iteration change applied to each logit's gradient direction.
    pub step: f64,
    pub target_ber: f64,
}

impl Default for ForgeConfig {
    fn default() -> Self {
        Self { max_iters: 2000, step: 1.0, target_ber: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgeResult {
    /// Forged key: projection X′ with bits b′.
    pub forged: UchidaSpec,
    pub ber: f64,
    pub iterations: usize,
    pub success: bool,
}

/// Mean output-conv kernel of the checkpoint's generator.
pub fn uchida_weights(ckpt: &ModelCheckpoint) -> Result<Vec<f32>, AttackError> {
    let g = generator_from_checkpoint(ckpt)?;
    let name = format!("{}out.weight", ckpt.meta.gamma_prefix);
    let w = ckpt.get(&name).ok_or_else(|| AttackError::Config(format!("checkpoint has no {name}")))?;
    Ok(mean_kernel(&w.data, g.cfg.out_channels))
}

/// Ambiguity attack on the Uchida scheme: with the weights frozen, fits a
/// projection X′ so that the checkpoint "contains" arbitrary bits b′.
pub fn uchida_forge(ckpt: &ModelCheckpoint, forged_bits: &[u8], seed: u64, cfg: &ForgeConfig) -> Result<ForgeResult, AttackError> {
    let wbar = uchida_weights(ckpt)?;
    let norm2: f64 = wbar.iter().map(|&w| w as f64 * w as f64).sum();
    if norm2 == 0.0 {
        return Err(AttackError::Config("output kernel is all zeros".into()));
    }
    let mut spec = UchidaSpec::generate(seed, wbar.len(), forged_bits.to_vec(), 1.0).map_err(|e| AttackError::Config(e.to_string()))?;
    let n = forged_bits.len();
    let ber_now = |spec: &UchidaSpec| -> Result<f64, AttackError> {
        let got = uchida_extract(&wbar, &spec.projection, n).map_err(|e| AttackError::Config(e.to_string()))?;
        Ok(bit_error_rate(&got, forged_bits))
    };
    let mut ber = ber_now(&spec)?;
    let mut iterations = 0;
    while ber > cfg.target_ber && iterations < cfg.max_iters {
        let logits = spec.logits(&wbar).map_err(|e| AttackError::Config(e.to_string()))?;
        for ((row, &z), &b) in spec.projection.chunks_exact_mut(wbar.len()).zip(&logits).zip(forged_bits) {
            // X′_j ← X′_j − η (σ(z_j) − b_j) w̄ / |w̄|², so z_j moves by η (b_j − σ(z_j))
            let d = cfg.step * (1.0 / (1.0 + (-z).exp()) - b as f64) / norm2;
            for (x, &w) in row.iter_mut().zip(&wbar) {
                *x -= (d * w as f64) as f32;
            }
        }
        iterations += 1;
        ber = ber_now(&spec)?;
    }
    Ok(ForgeResult { success: ber <= cfg.target_ber, forged: spec, ber, iterations })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::{generate_shapes, SyntheticShapesSpec};
    use crate::genmodels::{DiscriminatorConfig, GeneratorConfig};
    use crate::img::Region;
    use crate::signature::encode_text;
    use crate::triggers::LatentTriggerSpec;
    use proptest::prelude::*;

    fn tiny_ckpt(seed: u64) -> ModelCheckpoint {
        let g = GeneratorConfig { base_channels: 16, widths: vec![8, 8, 8], ..GeneratorConfig::desk() };
        GanModel::new(g, DiscriminatorConfig::scaled(32), seed).unwrap().to_checkpoint("t")
    }

    fn keys(ckpt: &ModelCheckpoint) -> OwnerKeys {
        OwnerKeys {
            trigger: TriggerSpec::Latent(LatentTriggerSpec::generate(128, 5, -10.0, 1).unwrap()),
            watermark: WatermarkAsset::builtin("ring", Region::top_left(24, 24)).unwrap(),
            signature: SignLossConfig::new(encode_text("ABC").unwrap(), ckpt.meta.placement.clone()).unwrap(),
        }
    }

    fn small_eval(n_queries: usize, n_fidelity: usize) -> EvalConfig {
        let fidelity = FrechetProxyConfig { feature_dim: 8, ..Default::default() };
        EvalConfig { n_queries, n_fidelity, fidelity, ..Default::default() }
    }

    fn all_gammas(c: &ModelCheckpoint) -> Vec<f32> {
        c.meta.placement.layer_names.iter().flat_map(|l| c.gammas(l).unwrap().to_vec()).collect()
    }

    #[test]
    fn flips_exact_count_and_preserve_magnitude() {
        let c = tiny_ckpt(1);
        let (out, flipped) = flip_signs(&c, 0.25, 24, 7).unwrap();
        assert_eq!(flipped.len(), 6);
        assert!(flipped.iter().all(|&i| i < 24));
        let (a, b) = (all_gammas(&c), all_gammas(&out));
        for i in 0..a.len() {
            assert_eq!(a[i].abs(), b[i].abs());
            assert_eq!(a[i] != b[i], flipped.contains(&i), "channel {i}");
        }
        assert_eq!(flip_signs(&c, 0.25, 24, 7).unwrap().0, out);
        assert_eq!(flip_signs(&c, 0.0, 24, 7).unwrap().0, c);
        assert!(flip_signs(&c, 1.5, 24, 7).is_err());
        assert!(flip_signs(&c, -0.1, 24, 7).is_err());
        assert!(flip_signs(&c, 0.5, 25, 7).is_err());
        let (full, _) = flip_signs(&c, 1.0, 24, 3).unwrap();
        let sig = &keys(&c).signature;
        let before = verify_whitebox(&c, sig).mismatches.unwrap();
        assert_eq!(verify_whitebox(&full, sig).mismatches, Some(24 - before));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn flip_count_is_floor(p in 0.0f64..=1.0, n in 0usize..=24, seed in any::<u64>()) {
            let c = tiny_ckpt(2);
            let (out, flipped) = flip_signs(&c, p, n, seed).unwrap();
            prop_assert_eq!(flipped.len(), (p * n as f64).floor() as usize);
            let changed = all_gammas(&c).iter().zip(all_gammas(&out)).filter(|(a, b)| **a != *b).count();
            prop_assert_eq!(changed, flipped.len());
        }
    }

    #[test]
    fn sweep_rows_and_zero_fraction_baseline() {
        let c = tiny_ckpt(3);
        let data = generate_shapes(&SyntheticShapesSpec { n_samples: 64, ..Default::default() }).unwrap();
        let owner = keys(&c);
        let ctx = AttackContext { data: &data, owner: &owner, eval: small_eval(8, 64) };
        let rows = flip_sweep(&c, &ctx, &[0.0, 0.1, 0.25, 0.5, 1.0], &[1, 2]).unwrap();
        assert_eq!(rows.len(), 10);
        let base = evaluate(&c, &ctx).unwrap();
        assert_eq!((rows[0].fidelity_proxy, rows[0].qwm_mean, rows[0].ber), (base.fidelity_proxy, base.qwm_mean, base.ber));
        let csv = sweep_csv(&rows);
        assert!(csv.starts_with("p,seed,fidelity_proxy,qwm_mean,ber\n"));
        assert_eq!(csv.lines().count(), 11);
        let (_, r) = flip_signs_attack(&c, &ctx, 0.0, 9).unwrap();
        assert_eq!(r.pre, r.post);
    }

    #[test]
    fn finetune_zero_steps_is_identity_and_overwrite_rejects_owner_trigger() {
        let c = tiny_ckpt(4);
        let data = generate_shapes(&SyntheticShapesSpec { n_samples: 32, ..Default::default() }).unwrap();
        let owner = keys(&c);
        let ctx = AttackContext { data: &data, owner: &owner, eval: small_eval(4, 32) };
        let (out, r) = finetune_attack(&c, &ctx, &TrainConfig::new(0, 1)).unwrap();
        assert_eq!(out, c);
        assert_eq!(r.pre, r.post);
        assert_eq!(r.elapsed_steps, 0);
        let attacker = AttackerKeys { trigger: owner.trigger.clone(), watermark: owner.watermark.clone(), signature: None };
        assert!(matches!(overwrite_attack(&c, &ctx, &attacker, &TrainConfig::new(1, 1)), Err(AttackError::Config(_))));
    }

    #[test]
    fn short_attacks_are_reproducible() {
        let c = tiny_ckpt(5);
        let data = generate_shapes(&SyntheticShapesSpec { n_samples: 32, ..Default::default() }).unwrap();
        let owner = keys(&c);
        let ctx = AttackContext { data: &data, owner: &owner, eval: small_eval(4, 32) };
        let mut t = TrainConfig::new(2, 11);
        t.batch_size = 8;
        let a = finetune_attack(&c, &ctx, &t).unwrap();
        let b = finetune_attack(&c, &ctx, &t).unwrap();
        assert_eq!(a.0.to_bytes(), b.0.to_bytes());
        assert_eq!(a.1, b.1);
        assert_eq!(a.1.elapsed_steps, 2);
        let attacker = AttackerKeys {
            trigger: TriggerSpec::Latent(LatentTriggerSpec::generate(128, 5, 10.0, 99).unwrap()),
            watermark: WatermarkAsset::builtin("cross", Region::top_left(24, 24)).unwrap(),
            signature: Some(SignLossConfig::new(encode_text("XYZ").unwrap(), c.meta.placement.clone()).unwrap()),
        };
        t.objective = ObjectiveSpec::default();
        let runs = overwrite_attack(&c, &ctx, &attacker, &t).unwrap();
        assert_eq!(runs.len(), 2);
        assert_eq!(runs[0].1.variant.as_deref(), Some(VARIANT_PLAIN));
        assert_eq!(runs[1].1.variant.as_deref(), Some(VARIANT_SIGNED));
        let again = overwrite_attack(&c, &ctx, &attacker, &t).unwrap();
        assert_eq!(runs[1].0.to_bytes(), again[1].0.to_bytes());
        assert_eq!(runs[0].1.to_csv().split(',').count(), AttackReport::CSV_HEADER.split(',').count());
    }

    #[test]
    fn forge_reaches_arbitrary_bits() {
        let c = tiny_ckpt(6);
        let wbar = uchida_weights(&c).unwrap();
        assert_eq!(wbar.len(), 72);
        let bits = UchidaSpec::random_bits(64, 3);
        let r = uchida_forge(&c, &bits, 8, &ForgeConfig::default()).unwrap();
        assert!(r.success && r.ber <= 0.01, "{r:?}");
        assert_eq!(uchida_extract(&wbar, &r.forged.projection, 64).unwrap(), bits);
        let again = uchida_forge(&c, &bits, 8, &ForgeConfig::default()).unwrap();
        assert_eq!(again, r);
        let budget = uchida_forge(&c, &bits, 8, &ForgeConfig { max_iters: 0, ..Default::default() }).unwrap();
        assert_eq!(budget.iterations, 0);
        assert_eq!(budget.success, budget.ber <= 0.01);
    }
}
