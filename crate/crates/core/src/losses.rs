//! Watermark regularizers, the adversarial and VAE base losses, and the
//! Uchida-style weight-projection watermark used as an ambiguity baseline.
//!
//! Every loss comes with its analytic gradient; the training loop feeds
//! those into the layer backward passes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signature::{BitSignature, SignPlacement};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("need {need} scale factors for the signature, got {got}")]
    Shortfall { need: usize, got: usize },
    #[error("signature of {bits} bits exceeds placement capacity {capacity}")]
    Capacity { bits: usize, capacity: usize },
    #[error("invalid setting: {0}")]
    Config(String),
    #[error("loss term `{0}` is not finite")]
    NonFinite(&'static str),
    #[error("empty batch")]
    Empty,
    #[error("dimension mismatch: expected {want}, got {got}")]
    Dimension { want: usize, got: usize },
    #[error("sigma must be positive (index {index}: {value})")]
    Sigma { index: usize, value: f32 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignLossConfig {
    pub gamma0: f32,
    pub target: BitSignature,
    pub placement: SignPlacement,
}

impl SignLossConfig {
    pub fn new(target: BitSignature, placement: SignPlacement) -> Result<Self, LossError> {
        let cfg = Self { gamma0: 0.1, target, placement };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.gamma0 > 0.0) {
            return Err(LossError::Config(format!("gamma0 must be > 0, got {}", self.gamma0)));
        }
        let capacity = self.placement.total_capacity_bits();
        if self.target.len() > capacity {
            return Err(LossError::Capacity { bits: self.target.len(), capacity });
        }
        Ok(())
    }

    /// `(layer, first bit, bit count)` for every layer that carries bits.
    pub fn layer_spans(&self) -> Vec<(String, usize, usize)> {
        let mut spans = Vec::new();
        let mut start = 0;
        for (name, &count) in self.placement.layer_names.iter().zip(&self.placement.channel_counts) {
            let take = count.min(self.target.len().saturating_sub(start));
            if take == 0 {
                break;
            }
            spans.push((name.clone(), start, take));
            start += take;
        }
        spans
    }
}

/// `Σ max(γ0 − γ_i b_i, 0)` over the signature prefix of `gammas`.
pub fn sign_loss(gammas: &[f32], target: &[i8], gamma0: f32) -> Result<f64, LossError> {
    if gammas.len() < target.len() {
        return Err(LossError::Shortfall { need: target.len(), got: gammas.len() });
    }
    Ok(gammas.iter().zip(target).map(|(&g, &b)| (gamma0 as f64 - g as f64 * b as f64).max(0.0)).sum())
}

/// Subgradient of [`sign_loss`]; zero at the hinge point and beyond the
/// signature prefix.
pub fn sign_loss_grad(gammas: &[f32], target: &[i8], gamma0: f32) -> Result<Vec<f32>, LossError> {
    if gammas.len() < target.len() {
        return Err(LossError::Shortfall { need: target.len(), got: gammas.len() });
    }
    let mut g = vec![0.0; gammas.len()];
    for (i, (&gamma, &b)) in gammas.iter().zip(target).enumerate() {
        if gamma0 - gamma * b as f32 > 0.0 {
            g[i] = -(b as f32);
        }
    }
    Ok(g)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseLossKind {
    DcganHingeG,
    VaeElbo,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveSpec {
    pub base_loss_kind: BaseLossKind,
    pub lambda: f64,
    pub use_sign_loss: bool,
    pub trigger_batch_ratio: f64,
}

impl Default for ObjectiveSpec {
    fn default() -> Self {
        Self { base_loss_kind: BaseLossKind::DcganHingeG, lambda: 1.0, use_sign_loss: true, trigger_batch_ratio: 1.0 }
    }
}

impl ObjectiveSpec {
    pub fn baseline() -> Self {
        Self { lambda: 0.0, use_sign_loss: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(LossError::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.trigger_batch_ratio > 0.0 && self.trigger_batch_ratio <= 1.0) {
            return Err(LossError::Config(format!(
                "trigger_batch_ratio must be in (0, 1], got {}",
                self.trigger_batch_ratio
            )));
        }
        Ok(())
    }

    /// Whether the watermark terms take part at all.
    pub fn watermarking(&self) -> bool {
        self.lambda > 0.0 || self.use_sign_loss
    }
}

/// `base + λ·lw + ls`; exactly `base` when both watermark terms are off.
pub fn compose_objective(base: f64, lw: f64, ls: f64, spec: &ObjectiveSpec) -> Result<f64, LossError> {
    if !base.is_finite() {
        return Err(LossError::NonFinite("base"));
    }
    if !spec.watermarking() {
        return Ok(base);
    }
    if !lw.is_finite() {
        return Err(LossError::NonFinite("lw"));
    }
    if !ls.is_finite() {
        return Err(LossError::NonFinite("ls"));
    }
    let mut total = base + spec.lambda * lw;
    if spec.use_sign_loss {
        total += ls;
    }
    Ok(total)
}

/// `−mean D(G(z))`.
pub fn generator_hinge_loss(d_fake: &[f32]) -> Result<f64, LossError> {
    if d_fake.is_empty() {
        return Err(LossError::Empty);
    }
    Ok(-d_fake.iter().map(|&v| v as f64).sum::<f64>() / d_fake.len() as f64)
}

pub fn generator_hinge_grad(d_fake: &[f32]) -> Vec<f32> {
    vec![-1.0 / d_fake.len() as f32; d_fake.len()]
}

/// `mean max(0, 1 − D(x)) + mean max(0, 1 + D(G(z)))`.
pub fn discriminator_hinge_loss(d_real: &[f32], d_fake: &[f32]) -> Result<f64, LossError> {
    if d_real.is_empty() || d_fake.is_empty() {
        return Err(LossError::Empty);
    }
    let r = d_real.iter().map(|&v| (1.0 - v as f64).max(0.0)).sum::<f64>() / d_real.len() as f64;
    let f = d_fake.iter().map(|&v| (1.0 + v as f64).max(0.0)).sum::<f64>() / d_fake.len() as f64;
    Ok(r + f)
}

/// Gradients of [`discriminator_hinge_loss`] w.r.t. real and fake scores.
pub fn discriminator_hinge_grad(d_real: &[f32], d_fake: &[f32]) -> (Vec<f32>, Vec<f32>) {
    let nr = d_real.len() as f32;
    let nf = d_fake.len() as f32;
    (
        d_real.iter().map(|&v| if v < 1.0 { -1.0 / nr } else { 0.0 }).collect(),
        d_fake.iter().map(|&v| if v > -1.0 { 1.0 / nf } else { 0.0 }).collect(),
    )
}

/// Negative ELBO terms and their gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct VaeLoss {
    /// Mean squared error over all elements.
    pub recon: f64,
    /// `Σ_dims −½(1 + log σ² − μ² − σ²)`, averaged over the batch.
    pub kl: f64,
    pub d_recon: Vec<f32>,
    pub d_mu: Vec<f32>,
    pub d_sigma: Vec<f32>,
}

impl VaeLoss {
    pub fn total(&self) -> f64 {
        self.recon + self.kl
    }
}

pub fn vae_elbo_loss(x: &[f32], recon: &[f32], mu: &[f32], sigma: &[f32], batch: usize) -> Result<VaeLoss, LossError> {
    if batch == 0 {
        return Err(LossError::Empty);
    }
    if x.len() != recon.len() {
        return Err(LossError::Dimension { want: x.len(), got: recon.len() });
    }
    if mu.len() != sigma.len() {
        return Err(LossError::Dimension { want: mu.len(), got: sigma.len() });
    }
    if let Some((index, &value)) = sigma.iter().enumerate().find(|(_, s)| !(**s > 0.0)) {
        return Err(LossError::Sigma { index, value });
    }
    let n = x.len() as f64;
    let recon_loss = x.iter().zip(recon).map(|(&a, &b)| (b as f64 - a as f64).powi(2)).sum::<f64>() / n;
    let d_recon = x.iter().zip(recon).map(|(&a, &b)| (2.0 * (b as f64 - a as f64) / n) as f32).collect();
    let bf = batch as f64;
    let kl = mu
        .iter()
        .zip(sigma)
        .map(|(&m, &s)| {
            let (m, s) = (m as f64, s as f64);
            -0.5 * (1.0 + (s * s).ln() - m * m - s * s)
        })
        .sum::<f64>()
        / bf;
    let d_mu = mu.iter().map(|&m| (m as f64 / bf) as f32).collect();
    let d_sigma = sigma.iter().map(|&s| ((s as f64 - 1.0 / s as f64) / bf) as f32).collect();
    Ok(VaeLoss { recon: recon_loss, kl, d_recon, d_mu, d_sigma })
}

/// Weight-projection watermark: `b ≈ sigmoid(X w̄)` with `X` seeded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UchidaSpec {
    pub seed: u64,
    pub dim: usize,
    /// Row-major `bits x dim`.
    pub projection: Vec<f32>,
    pub bits: Vec<u8>,
    pub strength: f32,
}

impl UchidaSpec {
    pub fn generate(seed: u64, dim: usize, bits: Vec<u8>, strength: f32) -> Result<Self, LossError> {
        if let Some(b) = bits.iter().find(|b| **b > 1) {
            return Err(LossError::Config(format!("watermark bits must be 0 or 1, found {b}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection = (0..bits.len() * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        Ok(Self { seed, dim, projection, bits, strength })
    }

    pub fn validate(&self) -> Result<(), LossError> {
        let fresh = Self::generate(self.seed, self.dim, self.bits.clone(), self.strength)?;
        if fresh.projection != self.projection {
            return Err(LossError::Config(format!("projection does not match seed {}", self.seed)));
        }
        Ok(())
    }

    /// Random watermark bits from a seed.
    pub fn random_bits(n: usize, seed: u64) -> Vec<u8> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(0..2u8)).collect()
    }

    pub fn logits(&self, wbar: &[f32]) -> Result<Vec<f64>, LossError> {
        uchida_logits(wbar, &self.projection, self.bits.len())
    }
}

fn uchida_logits(wbar: &[f32], projection: &[f32], n_bits: usize) -> Result<Vec<f64>, LossError> {
    if n_bits == 0 || projection.len() != n_bits * wbar.len() {
        return Err(LossError::Dimension { want: projection.len() / n_bits.max(1), got: wbar.len() });
    }
    Ok(projection
        .chunks_exact(wbar.len())
        .map(|row| row.iter().zip(wbar).map(|(&a, &b)| a as f64 * b as f64).sum())
        .collect())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `strength · mean BCE(sigmoid(X w̄), b)` and its gradient w.r.t. `w̄`.
pub fn uchida_embed_loss(wbar: &[f32], spec: &UchidaSpec) -> Result<(f64, Vec<f32>), LossError> {
    let logits = spec.logits(wbar)?;
    let n = logits.len() as f64;
    let s = spec.strength as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0f64; wbar.len()];
    for ((&z, &b), row) in logits.iter().zip(&spec.bits).zip(spec.projection.chunks_exact(wbar.len())) {
        // softplus form: BCE = log(1 + e^z) − b z
        let sp = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
        loss += sp - b as f64 * z;
        let dz = s * (sigmoid(z) - b as f64) / n;
        for (g, &x) in grad.iter_mut().zip(row) {
            *g += dz * x as f64;
        }
    }
    Ok((s * loss / n, grad.into_iter().map(|g| g as f32).collect()))
}

/// Bits read back as `sigmoid(X w̄) ≥ 0.5`, so a logit of exactly zero
/// gives 1.
pub fn uchida_extract(wbar: &[f32], projection: &[f32], n_bits: usize) -> Result<Vec<u8>, LossError> {
    Ok(uchida_logits(wbar, projection, n_bits)?.into_iter().map(|z| (sigmoid(z) >= 0.5) as u8).collect())
}

/// Fraction of differing bits.
pub fn bit_error_rate(a: &[u8], b: &[u8]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).filter(|(x, y)| x != y).count() as f64 / a.len() as f64
}

/// Per-output-channel mean of a conv weight laid out `[k·k·c_in, c_out]`.
pub fn mean_kernel(weight: &[f32], c_out: usize) -> Vec<f32> {
    weight.chunks_exact(c_out).map(|row| row.iter().sum::<f32>() / c_out as f32).collect()
}

/// Gradient of [`mean_kernel`] pulled back to the full weight.
pub fn mean_kernel_backward(grad_wbar: &[f32], c_out: usize) -> Vec<f32> {
    grad_wbar.iter().flat_map(|&g| std::iter::repeat_n(g / c_out as f32, c_out)).collect()
}
