//! Two-step ownership verification: trigger queries against a black box,
//! then the γ sign signature read from the weights.

use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use gmk_nn::Tensor;

use crate::genmodels::{sample_latents, Generator, ModelCheckpoint};
use crate::img::images_from_tensor;
use crate::losses::SignLossConfig;
use crate::metrics::{qwm, MetricError, QwmResult, SsimConfig, QWM_THRESHOLD};
use crate::signature::{ber, decode_bits, extract_signs};
use crate::triggers::{latent_trigger_tensor, paste_watermark_tensor, TransformError, TriggerSpec, WatermarkAsset};

pub const REPORT_SCHEMA: &str = "gmk-report/1";

/// Minimum trigger-minus-control Q_wm gap expected of a healthy embedding.
pub const SEPARATION_MARGIN: f64 = 0.2;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("model {what} is {got:?}, key expects {want:?}")]
    Resolution { what: &'static str, want: Vec<usize>, got: Vec<usize> },
    #[error("{0} triggers need an image-input model")]
    Unsupported(&'static str),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("invalid verification config: {0}")]
    Config(String),
}

/// Input→image access to a model. Verification code only sees this.
pub trait ImageQuery {
    /// Per-sample input shape, e.g. `[latent_dim]`.
    fn input_shape(&self) -> Vec<usize>;
    /// Per-sample output shape `[height, width, channels]`.
    fn output_shape(&self) -> Vec<usize>;
    /// Deterministic forward pass returning images in `[0, 1]`.
    fn query(&mut self, inputs: &Tensor) -> Tensor;
}

impl ImageQuery for Generator {
    fn input_shape(&self) -> Vec<usize> {
        vec![self.cfg.latent_dim]
    }

    fn output_shape(&self) -> Vec<usize> {
        let r = self.cfg.resolution();
        vec![r, r, self.cfg.out_channels]
    }

    fn query(&mut self, inputs: &Tensor) -> Tensor {
        self.generate(inputs)
    }
}

/// The owner's secret material.
#[derive(Clone, Debug, PartialEq)]
pub struct OwnerKeys {
    pub trigger: TriggerSpec,
    pub watermark: WatermarkAsset,
    pub signature: SignLossConfig,
}

impl OwnerKeys {
    /// SHA-256 of each key part, for the report.
    pub fn hashes(&self) -> KeyHashes {
        let w = &self.watermark;
        let mut h = Sha256::new();
        h.update(w.name.as_bytes());
        h.update(serde_json::to_vec(&w.region).expect("region serializes"));
        for v in &w.image.data {
            h.update(v.to_le_bytes());
        }
        KeyHashes { trigger: json_sha256(&self.trigger), watermark: hex::encode(h.finalize()), signature: json_sha256(&self.signature) }
    }
}

fn json_sha256<T: Serialize>(v: &T) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(v).expect("key parts serialize")))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyHashes {
    pub trigger: String,
    pub watermark: String,
    pub signature: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlackboxConfig {
    pub n_queries: usize,
    pub threshold: f64,
    pub seed: u64,
    pub histogram_bins: usize,
    /// Latents per forward pass.
    pub query_batch: usize,
    pub ssim: SsimConfig,
}

impl Default for BlackboxConfig {
    fn default() -> Self {
        Self { n_queries: 500, threshold: QWM_THRESHOLD, seed: 0, histogram_bins: 20, query_batch: 128, ssim: SsimConfig::default() }
    }
}

/// Counts over equal-width bins of `[lo, hi]`; values outside are clamped
/// into the end bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(values: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let mut counts = vec![0; bins.max(1)];
        let n = counts.len();
        for &v in values {
            let t = ((v - lo) / (hi - lo) * n as f64).floor();
            counts[(t.max(0.0) as usize).min(n - 1)] += 1;
        }
        Self { lo, hi, counts }
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

/// Per-query scores for trigger inputs and their untransformed controls.
#[derive(Clone, Debug, PartialEq)]
pub struct QwmSamples {
    pub trigger: Vec<QwmResult>,
    pub control: Vec<QwmResult>,
}

impl QwmSamples {
    pub fn trigger_full(&self) -> Vec<f64> {
        self.trigger.iter().map(|q| q.full_image).collect()
    }

    pub fn control_full(&self) -> Vec<f64> {
        self.control.iter().map(|q| q.full_image).collect()
    }

    pub fn trigger_mean(&self) -> f64 {
        mean_std(&self.trigger_full()).0
    }

    /// `index,set,qwm_full,qwm_region` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,set,qwm_full,qwm_region\n");
        for (set, rows) in [("trigger", &self.trigger), ("control", &self.control)] {
            for (i, q) in rows.iter().enumerate() {
                let region = q.region_only.map(|v| v.to_string()).unwrap_or_default();
                out.push_str(&format!("{i},{set},{},{region}\n", q.full_image));
            }
        }
        out
    }
}

/// Queries `n` latents `z` and their triggers `f(z)`. Trigger outputs are
/// scored against `paste(model(z), logo)`; control outputs `model(z)` are
/// scored against the same target.
pub fn sample_qwm(
    model: &mut dyn ImageQuery,
    trigger: &TriggerSpec,
    watermark: &WatermarkAsset,
    n: usize,
    seed: u64,
    query_batch: usize,
    ssim: &SsimConfig,
) -> Result<QwmSamples, VerifyError> {
    let TriggerSpec::Latent(spec) = trigger else {
        return Err(VerifyError::Unsupported("image"));
    };
    let input = model.input_shape();
    if input != [spec.dim] {
        return Err(VerifyError::Resolution { what: "input shape", want: vec![spec.dim], got: input });
    }
    let out = model.output_shape();
    let (h, w) = (watermark.region.row + watermark.region.height, watermark.region.col + watermark.region.width);
    if out.len() != 3 || out[0] < h || out[1] < w || out[2] != watermark.image.channels {
        return Err(VerifyError::Resolution { what: "output shape", want: vec![h, w, watermark.image.channels], got: out });
    }
    if query_batch == 0 {
        return Err(VerifyError::Config("query_batch must be positive".into()));
    }
    let z_all = sample_latents(n, spec.dim, seed);
    let mut samples = QwmSamples { trigger: Vec::with_capacity(n), control: Vec::with_capacity(n) };
    let region = Some((&watermark.region, &watermark.image));
    let mut start = 0;
    while start < n {
        let end = (start + query_batch).min(n);
        let z = z_all.slice_batch(start, end);
        let base = model.query(&z);
        let marked = model.query(&latent_trigger_tensor(&z, spec)?);
        let expected = paste_watermark_tensor(&base, watermark)?;
        let (base, marked, expected) = (images_from_tensor(&base), images_from_tensor(&marked), images_from_tensor(&expected));
        for i in 0..z.batch() {
            samples.trigger.push(qwm(&marked[i], &expected[i], region, ssim)?);
            samples.control.push(qwm(&base[i], &expected[i], region, ssim)?);
        }
        start = end;
    }
    Ok(samples)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlackboxSection {
    pub n_queries: usize,
    pub qwm_mean: f64,
    pub qwm_std: f64,
    pub qwm_histogram: Histogram,
    pub region_qwm_mean: Option<f64>,
    pub control_qwm_mean: f64,
    pub control_qwm_std: f64,
    pub control_histogram: Histogram,
    /// Trigger mean minus control mean.
    pub separation: f64,
    pub threshold: f64,
    pub verdict: bool,
    #[serde(skip)]
    pub samples: Option<QwmSamples>,
}

pub fn verify_blackbox(
    model: &mut dyn ImageQuery,
    trigger: &TriggerSpec,
    watermark: &WatermarkAsset,
    cfg: &BlackboxConfig,
) -> Result<BlackboxSection, VerifyError> {
    if cfg.n_queries == 0 {
        return Err(VerifyError::Config("n_queries must be positive".into()));
    }
    let samples = sample_qwm(model, trigger, watermark, cfg.n_queries, cfg.seed, cfg.query_batch, &cfg.ssim)?;
    let (t, c) = (samples.trigger_full(), samples.control_full());
    let (qwm_mean, qwm_std) = mean_std(&t);
    let (control_qwm_mean, control_qwm_std) = mean_std(&c);
    let region: Option<Vec<f64>> = samples.trigger.iter().map(|q| q.region_only).collect();
    Ok(BlackboxSection {
        n_queries: cfg.n_queries,
        qwm_mean,
        qwm_std,
        qwm_histogram: Histogram::new(&t, 0.0, 1.0, cfg.histogram_bins),
        region_qwm_mean: region.map(|r| mean_std(&r).0),
        control_qwm_mean,
        control_qwm_std,
        control_histogram: Histogram::new(&c, 0.0, 1.0, cfg.histogram_bins),
        separation: qwm_mean - control_qwm_mean,
        threshold: cfg.threshold,
        verdict: qwm_mean >= cfg.threshold,
        samples: Some(samples),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WhiteboxSection {
    pub extracted_text: Option<String>,
    pub ber: Option<f64>,
    pub mismatches: Option<usize>,
    pub n_bits: usize,
    pub verdict: bool,
    pub diagnostics: Vec<String>,
}

/// Reads the signature from the checkpoint's γ tensors. Placement problems
/// give a negative verdict with diagnostics rather than an error.
pub fn verify_whitebox(ckpt: &ModelCheckpoint, signature: &SignLossConfig) -> WhiteboxSection {
    let n_bits = signature.target.len();
    let mut section = WhiteboxSection { extracted_text: None, ber: None, mismatches: None, n_bits, verdict: false, diagnostics: vec![] };
    if ckpt.meta.placement != signature.placement {
        section.diagnostics.push(format!(
            "checkpoint placement {:?} differs from key placement {:?}",
            ckpt.meta.placement, signature.placement
        ));
    }
    let bits = match extract_signs(ckpt, &signature.placement, n_bits) {
        Ok(b) => b,
        Err(e) => {
            section.diagnostics.push(format!("extraction failed: {e}"));
            return section;
        }
    };
    let erasures = bits.erasures();
    if !erasures.is_empty() {
        section.diagnostics.push(format!("{} zero-valued scales read as erasures", erasures.len()));
    }
    match ber(&bits.values, signature.target.bits()) {
        Ok(r) => {
            section.ber = Some(r.ber);
            section.mismatches = Some(r.mismatches);
            section.verdict = r.mismatches == 0;
        }
        Err(e) => section.diagnostics.push(format!("BER failed: {e}")),
    }
    match bits.to_signature().map(|s| decode_bits(&s)) {
        Ok(Ok(d)) => section.extracted_text = Some(d.text),
        Ok(Err(e)) | Err(e) => section.diagnostics.push(format!("decoding failed: {e}")),
    }
    section
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub schema: String,
    pub blackbox: Option<BlackboxSection>,
    pub blackbox_error: Option<String>,
    pub whitebox: Option<WhiteboxSection>,
    pub whitebox_error: Option<String>,
    pub checkpoint_sha256: Option<String>,
    pub key_hashes: KeyHashes,
    pub seed: u64,
    pub timestamp: u64,
}

impl VerificationReport {
    pub fn blackbox_positive(&self) -> bool {
        self.blackbox.as_ref().is_some_and(|b| b.verdict)
    }

    pub fn whitebox_positive(&self) -> bool {
        self.whitebox.as_ref().is_some_and(|w| w.verdict)
    }

    /// 0 both positive, 2 black-box only, 3 white-box only, 4 neither.
    pub fn exit_code(&self) -> i32 {
        match (self.blackbox_positive(), self.whitebox_positive()) {
            (true, true) => 0,
            (true, false) => 2,
            (false, true) => 3,
            (false, false) => 4,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        match (&self.blackbox, &self.blackbox_error) {
            (Some(b), _) => s.push_str(&format!(
                "black-box: {} (Q_wm {:.4} ± {:.4} over {} queries, control {:.4}, threshold {})\n",
                verdict(b.verdict),
                b.qwm_mean,
                b.qwm_std,
                b.n_queries,
                b.control_qwm_mean,
                b.threshold
            )),
            (None, e) => s.push_str(&format!("black-box: error ({})\n", e.as_deref().unwrap_or("not run"))),
        }
        match (&self.whitebox, &self.whitebox_error) {
            (Some(w), _) => {
                let ber = w.ber.map(|b| format!("{b:.4}")).unwrap_or_else(|| "n/a".into());
                let text = w.extracted_text.as_deref().unwrap_or("");
                s.push_str(&format!("white-box: {} (BER {ber} over {} bits, text {text:?})\n", verdict(w.verdict), w.n_bits));
                for d in &w.diagnostics {
                    s.push_str(&format!("  note: {d}\n"));
                }
            }
            (None, e) => s.push_str(&format!("white-box: error ({})\n", e.as_deref().unwrap_or("not run"))),
        }
        s
    }
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "POSITIVE"
    } else {
        "negative"
    }
}

/// Black-box step on `model`, then white-box step on `ckpt` when given.
/// Sub-step failures are recorded in the report.
pub fn full_report(
    model: &mut dyn ImageQuery,
    ckpt: Option<&ModelCheckpoint>,
    keys: &OwnerKeys,
    cfg: &BlackboxConfig,
) -> VerificationReport {
    let (blackbox, blackbox_error) = match verify_blackbox(model, &keys.trigger, &keys.watermark, cfg) {
        Ok(b) => (Some(b), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let (whitebox, whitebox_error) = match ckpt {
        Some(c) => (Some(verify_whitebox(c, &keys.signature)), None),
        None => (None, Some("no checkpoint access".to_string())),
    };
    VerificationReport {
        schema: REPORT_SCHEMA.into(),
        blackbox,
        blackbox_error,
        whitebox,
        whitebox_error,
        checkpoint_sha256: ckpt.map(|c| c.sha256()),
        key_hashes: keys.hashes(),
        seed: cfg.seed,
        timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
    }
}
