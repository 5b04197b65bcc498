//! JSON experiment configs and the run directories they produce.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use gmk_nn::Tensor;

use super::{generate_shapes, read_cifar_binary, DataError, SyntheticShapesSpec};
use crate::genmodels::{
    generator_from_checkpoint, log_to_csv, sample_latents, train_gan, train_vae, DiscriminatorConfig, GanModel,
    GeneratorConfig, ModelCheckpoint, ModelSpec, OptimConfig, OutputHead, TrainConfig, Vae, VaeConfig,
};
use crate::img::Region;
use crate::losses::{BaseLossKind, ObjectiveSpec, SignLossConfig, UchidaSpec};
use crate::metrics::{frechet_proxy, FrechetProxyConfig, MetricRow};
use crate::signature::{encode_text, read_signature_file};
use crate::triggers::{LatentTriggerSpec, TriggerSpec, WatermarkAsset};
use crate::verify::{full_report, BlackboxConfig, OwnerKeys, VerificationReport};

pub const MANIFEST: &str = "MANIFEST";
pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "model.gmk";
pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "report.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Gan,
    Vae,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Narrow networks for CPU runs.
    #[default]
    Desk,
    /// Full-width networks ([256, 128, 64] generator stages).
    Full,
}

/// Model choice; explicit sub-configs replace the preset's.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    #[serde(default)]
    pub preset: Preset,
    pub generator: Option<GeneratorConfig>,
    pub discriminator: Option<DiscriminatorConfig>,
    pub vae: Option<VaeConfig>,
}

impl ModelSection {
    pub fn spec(&self) -> ModelSpec {
        let g = self.generator.clone().unwrap_or_else(|| match self.preset {
            Preset::Desk => GeneratorConfig::desk(),
            Preset::Full => GeneratorConfig::default(),
        });
        match self.kind {
            ModelKind::Gan => ModelSpec::Gan {
                generator: g,
                discriminator: self.discriminator.clone().unwrap_or_else(|| match self.preset {
                    Preset::Desk => DiscriminatorConfig::desk(),
                    Preset::Full => DiscriminatorConfig::default(),
                }),
            },
            ModelKind::Vae => ModelSpec::Vae {
                vae: self.vae.clone().unwrap_or_else(|| VaeConfig {
                    decoder: GeneratorConfig { head: OutputHead::Sigmoid, ..g },
                    ..VaeConfig::default()
                }),
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub d_steps: usize,
    /// Model initialization and training streams.
    pub seed: u64,
    pub optim: OptimConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self { steps: 3000, batch_size: 64, d_steps: 1, seed: 0, optim: OptimConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum TriggerSource {
    /// Random mask of `n` latent coordinates set to `c`.
    Generate { n: usize, c: f32, seed: u64 },
    /// A `TriggerSpec` JSON file, relative to the config.
    File { path: PathBuf },
    Inline { spec: TriggerSpec },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WatermarkSource {
    /// One of the built-in logos ("ring", "cross", "bars").
    pub builtin: Option<String>,
    /// PNG logo, relative to the config; resized to the region.
    pub path: Option<PathBuf>,
    pub name: Option<String>,
    pub region: Region,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignatureSource {
    pub text: Option<String>,
    /// Text file holding the owner string.
    pub file: Option<PathBuf>,
    #[serde(default = "default_gamma0")]
    pub gamma0: f32,
}

fn default_gamma0() -> f32 {
    0.1
}

/// Uchida-style embedding into the generator's output convolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UchidaSource {
    pub seed: u64,
    pub n_bits: usize,
    pub bits_seed: u64,
    #[serde(default = "default_strength")]
    pub strength: f32,
}

fn default_strength() -> f32 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSection {
    Shapes {
        #[serde(flatten)]
        spec: SyntheticShapesSpec,
    },
    Cifar {
        path: PathBuf,
        limit: Option<usize>,
    },
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection::Shapes { spec: SyntheticShapesSpec::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub n_queries: usize,
    pub seed: u64,
    pub threshold: f64,
    pub n_fidelity: usize,
    pub fidelity_seed: u64,
    pub fidelity: FrechetProxyConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            n_queries: 500,
            seed: 0x7e57,
            threshold: crate::metrics::QWM_THRESHOLD,
            n_fidelity: 1024,
            fidelity_seed: 0xf1de,
            fidelity: FrechetProxyConfig::default(),
        }
    }
}

impl EvalSection {
    pub fn attack_eval(&self) -> crate::attacks::EvalConfig {
        crate::attacks::EvalConfig {
            n_queries: self.n_queries,
            query_seed: self.seed,
            n_fidelity: self.n_fidelity,
            fidelity_seed: self.fidelity_seed,
            fidelity: self.fidelity,
            ..Default::default()
        }
    }

    pub fn blackbox(&self) -> BlackboxConfig {
        BlackboxConfig { n_queries: self.n_queries, threshold: self.threshold, seed: self.seed, ..Default::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackerSection {
    pub trigger: TriggerSource,
    pub watermark: WatermarkSource,
    pub signature: Option<SignatureSource>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub objective: ObjectiveSpec,
    pub trigger: Option<TriggerSource>,
    pub watermark: Option<WatermarkSource>,
    pub signature: Option<SignatureSource>,
    pub uchida: Option<UchidaSource>,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub eval: EvalSection,
    pub attacker: Option<AttackerSection>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn invalid(field: &str, reason: impl Into<String>) -> DataError {
    DataError::Invalid { field: field.to_string(), reason: reason.into() }
}

impl ExperimentConfig {
    /// Parses JSON; type errors name the offending field path.
    pub fn from_json(text: &str) -> Result<Self, DataError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            invalid(if path == "." { "<root>" } else { &path }, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// "baseline", "w", "s" or "ws" from the active regularizers.
    pub fn variant(&self) -> &'static str {
        match (self.objective.lambda > 0.0, self.objective.use_sign_loss) {
            (false, false) => "baseline",
            (true, false) => "w",
            (false, true) => "s",
            (true, true) => "ws",
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let o = &self.objective;
        if !(o.lambda >= 0.0 && o.lambda.is_finite()) {
            return Err(invalid("objective.lambda", format!("must be finite and >= 0, got {}", o.lambda)));
        }
        if !(o.trigger_batch_ratio > 0.0 && o.trigger_batch_ratio <= 1.0) {
            return Err(invalid("objective.trigger_batch_ratio", format!("must be in (0, 1], got {}", o.trigger_batch_ratio)));
        }
        let t = &self.train;
        for (field, v) in [("train.steps", t.steps), ("train.batch_size", t.batch_size), ("train.d_steps", t.d_steps)] {
            if v == 0 {
                return Err(invalid(field, "must be > 0"));
            }
        }
        if !(t.optim.lr > 0.0 && t.optim.lr.is_finite()) {
            return Err(invalid("train.optim.lr", format!("must be > 0, got {}", t.optim.lr)));
        }
        for (field, b) in [("train.optim.beta1", t.optim.beta1), ("train.optim.beta2", t.optim.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(invalid(field, format!("must be in [0, 1), got {b}")));
            }
        }
        let spec = self.model.spec();
        let (gen, expected_base) = match &spec {
            ModelSpec::Gan { generator, discriminator } => {
                discriminator.validate().map_err(|e| invalid("model.discriminator", e.to_string()))?;
                if discriminator.resolution != generator.resolution() || discriminator.in_channels != generator.out_channels {
                    return Err(invalid("model.discriminator", "input shape does not match the generator output"));
                }
                (generator.clone(), BaseLossKind::DcganHingeG)
            }
            ModelSpec::Vae { vae } => {
                vae.validate().map_err(|e| invalid("model.vae", e.to_string()))?;
                (vae.decoder.clone(), BaseLossKind::VaeElbo)
            }
        };
        gen.validate().map_err(|e| invalid("model.generator", e.to_string()))?;
        if o.base_loss_kind != expected_base {
            return Err(invalid("objective.base_loss_kind", format!("{:?} does not fit a {:?} model", o.base_loss_kind, self.model.kind)));
        }
        if o.lambda > 0.0 && self.trigger.is_none() {
            return Err(invalid("trigger", "required when objective.lambda > 0"));
        }
        if o.lambda > 0.0 && self.watermark.is_none() {
            return Err(invalid("watermark", "required when objective.lambda > 0"));
        }
        if o.use_sign_loss && self.signature.is_none() {
            return Err(invalid("signature", "required when objective.use_sign_loss is set"));
        }
        if let Some(TriggerSource::Generate { n, c, .. }) = &self.trigger {
            if *n == 0 || *n >= gen.latent_dim {
                return Err(invalid("trigger.n", format!("must be in [1, {}), got {n}", gen.latent_dim)));
            }
            if !c.is_finite() {
                return Err(invalid("trigger.c", "must be finite"));
            }
        }
        let res = gen.resolution();
        if let Some(w) = &self.watermark {
            validate_watermark(w, res, "watermark")?;
        }
        if let Some(s) = &self.signature {
            validate_signature(s, "signature")?;
        }
        if let Some(a) = &self.attacker {
            validate_watermark(&a.watermark, res, "attacker.watermark")?;
            if let Some(s) = &a.signature {
                validate_signature(s, "attacker.signature")?;
            }
        }
        if let Some(u) = &self.uchida {
            if u.n_bits == 0 {
                return Err(invalid("uchida.n_bits", "must be > 0"));
            }
        }
        match &self.dataset {
            DatasetSection::Shapes { spec } => {
                if spec.resolution != res {
                    return Err(invalid("dataset.resolution", format!("{} does not match model resolution {res}", spec.resolution)));
                }
                spec.validate().map_err(|e| invalid("dataset", e.to_string()))?;
            }
            DatasetSection::Cifar { .. } if res != 32 || gen.out_channels != 3 => {
                return Err(invalid("dataset.kind", "CIFAR images need a 32x32x3 model"));
            }
            DatasetSection::Cifar { .. } => {}
        }
        if self.eval.n_queries == 0 {
            return Err(invalid("eval.n_queries", "must be > 0"));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(invalid("name", "must be a non-empty plain file name"));
        }
        Ok(())
    }
}

fn validate_watermark(w: &WatermarkSource, res: usize, field: &str) -> Result<(), DataError> {
    if w.builtin.is_some() == w.path.is_some() {
        return Err(invalid(field, "set exactly one of builtin and path"));
    }
    if !w.region.fits_in(res, res) || w.region.area() == 0 {
        return Err(invalid(&format!("{field}.region"), format!("{:?} must be non-empty and inside {res}x{res}", w.region)));
    }
    Ok(())
}

fn validate_signature(s: &SignatureSource, field: &str) -> Result<(), DataError> {
    if s.text.is_some() == s.file.is_some() {
        return Err(invalid(field, "set exactly one of text and file"));
    }
    if !(s.gamma0 > 0.0 && s.gamma0.is_finite()) {
        return Err(invalid(&format!("{field}.gamma0"), format!("must be > 0, got {}", s.gamma0)));
    }
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// A parsed config, the directory its relative paths resolve against and
/// the exact bytes it was read from.
#[derive(Clone, Debug)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub base_dir: PathBuf,
    pub bytes: Vec<u8>,
}

impl LoadedConfig {
    pub fn load(path: &Path) -> Result<Self, DataError> {
        let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
        let text = std::str::from_utf8(&bytes).map_err(|e| DataError::Format(format!("{}: {e}", path.display())))?;
        let config = ExperimentConfig::from_json(text)?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { config, base_dir, bytes })
    }

    /// Replaces the config (e.g. after overrides); the recorded bytes become
    /// its serialization.
    pub fn with_config(&self, config: ExperimentConfig) -> Result<Self, DataError> {
        config.validate()?;
        Ok(Self { bytes: config.to_json().into_bytes(), config, base_dir: self.base_dir.clone() })
    }

    pub fn hash(&self) -> String {
        sha256_hex(&self.bytes)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        self.config.model.spec()
    }

    fn generator_config(&self) -> GeneratorConfig {
        match self.model_spec() {
            ModelSpec::Gan { generator, .. } => generator,
            ModelSpec::Vae { vae } => vae.decoder,
        }
    }

    pub fn trigger(&self, src: &TriggerSource) -> Result<TriggerSpec, DataError> {
        let dim = self.generator_config().latent_dim;
        let spec = match src {
            TriggerSource::Generate { n, c, seed } => {
                TriggerSpec::Latent(LatentTriggerSpec::generate(dim, *n, *c, *seed).map_err(|e| invalid("trigger", e.to_string()))?)
            }
            TriggerSource::File { path } => {
                let p = self.resolve(path);
                let text = fs::read_to_string(&p).map_err(|e| DataError::io(&p, e))?;
                serde_json::from_str(&text).map_err(|e| DataError::Format(format!("{}: {e}", p.display())))?
            }
            TriggerSource::Inline { spec } => spec.clone(),
        };
        spec.validate().map_err(|e| invalid("trigger", e.to_string()))?;
        match spec.as_latent() {
            Some(l) if l.dim == dim => Ok(spec),
            _ => Err(invalid("trigger", format!("must be a latent trigger of dimension {dim}"))),
        }
    }

    pub fn watermark(&self, src: &WatermarkSource) -> Result<WatermarkAsset, DataError> {
        let channels = self.generator_config().out_channels;
        let asset = match (&src.builtin, &src.path) {
            (Some(kind), _) => WatermarkAsset::builtin(kind, src.region).map_err(|e| invalid("watermark.builtin", e.to_string()))?,
            (None, Some(path)) => {
                let name = src.name.clone().unwrap_or_else(|| path.display().to_string());
                WatermarkAsset::from_png(&self.resolve(path), name, src.region).map_err(|e| invalid("watermark.path", e.to_string()))?
            }
            (None, None) => return Err(invalid("watermark", "set exactly one of builtin and path")),
        };
        if asset.image.channels != channels {
            return Err(invalid("watermark", format!("logo has {} channels, model outputs {channels}", asset.image.channels)));
        }
        Ok(match &src.name {
            Some(n) => WatermarkAsset { name: n.clone(), ..asset },
            None => asset,
        })
    }

    pub fn signature(&self, src: &SignatureSource) -> Result<SignLossConfig, DataError> {
        let bits = match (&src.text, &src.file) {
            (Some(t), _) => encode_text(t).map_err(|e| invalid("signature.text", e.to_string()))?,
            (None, Some(p)) => read_signature_file(&self.resolve(p)).map_err(|e| invalid("signature.file", e.to_string()))?,
            (None, None) => return Err(invalid("signature", "set exactly one of text and file")),
        };
        let mut cfg = SignLossConfig::new(bits, self.generator_config().placement()).map_err(|e| invalid("signature", e.to_string()))?;
        cfg.gamma0 = src.gamma0;
        cfg.validate().map_err(|e| invalid("signature.gamma0", e.to_string()))?;
        Ok(cfg)
    }

    /// Owner keys, when trigger, watermark and signature are all configured.
    pub fn owner_keys(&self) -> Result<Option<OwnerKeys>, DataError> {
        let c = &self.config;
        match (&c.trigger, &c.watermark, &c.signature) {
            (Some(t), Some(w), Some(s)) => {
                Ok(Some(OwnerKeys { trigger: self.trigger(t)?, watermark: self.watermark(w)?, signature: self.signature(s)? }))
            }
            _ => Ok(None),
        }
    }

    pub fn attacker_keys(&self) -> Result<Option<crate::attacks::AttackerKeys>, DataError> {
        let Some(a) = &self.config.attacker else { return Ok(None) };
        Ok(Some(crate::attacks::AttackerKeys {
            trigger: self.trigger(&a.trigger)?,
            watermark: self.watermark(&a.watermark)?,
            signature: a.signature.as_ref().map(|s| self.signature(s)).transpose()?,
        }))
    }

    pub fn dataset(&self) -> Result<Tensor, DataError> {
        match &self.config.dataset {
            DatasetSection::Shapes { spec } => generate_shapes(spec),
            DatasetSection::Cifar { path, limit } => {
                let mut set = read_cifar_binary(&self.resolve(path))?;
                if let Some(n) = limit {
                    set.images = set.images.slice_batch(0, (*n).min(set.images.batch()));
                }
                Ok(set.images)
            }
        }
    }

    pub fn uchida(&self) -> Option<UchidaSpec> {
        let u = self.config.uchida.as_ref()?;
        let g = self.generator_config();
        let dim = 9 * g.widths.last().copied().unwrap_or(g.base_channels);
        UchidaSpec::generate(u.seed, dim, UchidaSpec::random_bits(u.n_bits, u.bits_seed), u.strength).ok()
    }

    /// The full training configuration, keys included.
    pub fn train_config(&self) -> Result<TrainConfig, DataError> {
        let c = &self.config;
        let mut t = TrainConfig::new(c.train.steps, c.train.seed);
        t.batch_size = c.train.batch_size;
        t.d_steps = c.train.d_steps;
        t.optim = c.train.optim;
        t.objective = c.objective;
        t.trigger = c.trigger.as_ref().map(|s| self.trigger(s)).transpose()?;
        t.watermark = c.watermark.as_ref().map(|s| self.watermark(s)).transpose()?;
        t.signature = c.signature.as_ref().map(|s| self.signature(s)).transpose()?;
        t.uchida = self.uchida();
        Ok(t)
    }
}

/// Settings that replace config values for one run.
#[derive(Clone, Debug, Default)]
pub struct RunOverrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub checkpoint: ModelCheckpoint,
    pub report: Option<VerificationReport>,
    pub metrics: Vec<MetricRow>,
}

impl RunSummary {
    /// Verification exit code, or 0 when no verification ran.
    pub fn exit_code(&self) -> i32 {
        self.report.as_ref().map_or(0, |r| r.exit_code())
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.metric == name).map(|m| m.value)
    }
}

fn write(dir: &Path, rel: &str, bytes: &[u8]) -> Result<(), DataError> {
    let p = dir.join(rel);
    if let Some(parent) = p.parent() {
        fs::create_dir_all(parent).map_err(|e| DataError::io(parent, e))?;
    }
    fs::write(&p, bytes).map_err(|e| DataError::io(&p, e))
}

/// Loads `path`, applies overrides and runs it. The run directory is
/// `<out or output_dir>/<name>`.
pub fn run_experiment(path: &Path, overrides: &RunOverrides) -> Result<RunSummary, DataError> {
    let mut loaded = LoadedConfig::load(path)?;
    if let Some(seed) = overrides.seed {
        let mut cfg = loaded.config.clone();
        cfg.train.seed = seed;
        loaded = loaded.with_config(cfg)?;
    }
    let root = overrides.out.clone().unwrap_or_else(|| loaded.resolve(&loaded.config.output_dir));
    run_loaded(&loaded, &root.join(&loaded.config.name))
}

/// Trains, evaluates and verifies one loaded config into `dir`.
pub fn run_loaded(loaded: &LoadedConfig, dir: &Path) -> Result<RunSummary, DataError> {
    let cfg = &loaded.config;
    fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    write(dir, CONFIG_FILE, &loaded.bytes)?;
    let hash = loaded.hash();
    let train = loaded.train_config()?;
    let data = loaded.dataset()?;
    if let Some(t) = &train.trigger {
        write(dir, "keys/trigger.json", serde_json::to_string_pretty(t).expect("trigger serializes").as_bytes())?;
    }
    if let Some(w) = &train.watermark {
        w.save_png(&dir.join("keys/watermark.png")).map_err(|e| DataError::Format(e.to_string()))?;
        let meta = serde_json::json!({ "name": w.name, "region": w.region });
        write(dir, "keys/watermark.json", serde_json::to_string_pretty(&meta).expect("json").as_bytes())?;
    }
    if let Some(s) = &train.signature {
        write(dir, "keys/signature.txt", s.target.to_lines().as_bytes())?;
    }
    if let Some(u) = &train.uchida {
        write(dir, "keys/uchida.json", serde_json::to_string_pretty(u).expect("json").as_bytes())?;
    }

    log::info!("training {} ({} steps, variant {})", cfg.name, train.steps, cfg.variant());
    let mut log_rows = Vec::new();
    let run_err = |e: crate::genmodels::TrainError| DataError::Invalid { field: "train".into(), reason: e.to_string() };
    let ckpt = match loaded.model_spec() {
        ModelSpec::Gan { generator, discriminator } => {
            let mut m = GanModel::new(generator, discriminator, cfg.train.seed).map_err(|e| invalid("model", e.to_string()))?;
            let r = train_gan(&mut m, &data, &train, &mut log_rows);
            let ckpt = m.to_checkpoint(&hash);
            finish_training(dir, &ckpt, &log_rows, r.map_err(run_err))?;
            ckpt
        }
        ModelSpec::Vae { vae } => {
            let mut m = Vae::new(vae, cfg.train.seed).map_err(|e| invalid("model", e.to_string()))?;
            let r = train_vae(&mut m, &data, &train, &mut log_rows);
            let ckpt = m.to_checkpoint(&hash);
            finish_training(dir, &ckpt, &log_rows, r.map_err(run_err))?;
            ckpt
        }
    };

    let mut g = generator_from_checkpoint(&ckpt).map_err(|e| invalid("model", e.to_string()))?;
    let e = &cfg.eval;
    let seed = cfg.train.seed;
    let mut metrics = Vec::new();
    let mut row = |metric: &str, value: f64, n: usize| {
        metrics.push(MetricRow { run_id: cfg.name.clone(), metric: metric.into(), value, n_samples: n, seed })
    };
    let n = e.n_fidelity.min(data.batch());
    let fake = g.generate(&sample_latents(n, g.cfg.latent_dim, e.fidelity_seed));
    let fid = frechet_proxy(&data.slice_batch(0, n), &fake, &e.fidelity).map_err(|e| invalid("eval", e.to_string()))?;
    row("fidelity_proxy", fid, n);

    let bb = e.blackbox();
    let report = match loaded.owner_keys()? {
        Some(keys) => {
            let report = full_report(&mut g, Some(&ckpt), &keys, &bb);
            if let Some(b) = &report.blackbox {
                row("qwm_mean", b.qwm_mean, b.n_queries);
                row("qwm_std", b.qwm_std, b.n_queries);
                row("control_qwm_mean", b.control_qwm_mean, b.n_queries);
                row("separation", b.separation, b.n_queries);
                if let Some(s) = &b.samples {
                    write(dir, "qwm_samples.csv", s.to_csv().as_bytes())?;
                }
            }
            if let Some(w) = report.whitebox.as_ref().and_then(|w| w.ber.map(|b| (b, w.n_bits))) {
                row("ber", w.0, w.1);
            }
            write(dir, REPORT_FILE, report.to_json().as_bytes())?;
            write(dir, "report.txt", report.summary().as_bytes())?;
            Some(report)
        }
        None => None,
    };
    if let Some(u) = &train.uchida {
        let wbar = crate::attacks::uchida_weights(&ckpt).map_err(|e| invalid("uchida", e.to_string()))?;
        let got = crate::losses::uchida_extract(&wbar, &u.projection, u.bits.len()).map_err(|e| invalid("uchida", e.to_string()))?;
        row("uchida_ber", crate::losses::bit_error_rate(&got, &u.bits), u.bits.len());
    }
    let mut csv = format!("{}\n", MetricRow::HEADER);
    for m in &metrics {
        csv.push_str(&m.to_csv());
        csv.push('\n');
    }
    write(dir, METRICS_FILE, csv.as_bytes())?;
    write_manifest(dir)?;
    Ok(RunSummary { dir: dir.to_path_buf(), checkpoint: ckpt, report, metrics })
}

fn finish_training(
    dir: &Path,
    ckpt: &ModelCheckpoint,
    log_rows: &[crate::genmodels::TrainLogRow],
    result: Result<(), DataError>,
) -> Result<(), DataError> {
    write(dir, "train_log.csv", log_to_csv(log_rows).as_bytes())?;
    ckpt.save(&dir.join(CHECKPOINT_FILE)).map_err(|e| DataError::Format(e.to_string()))?;
    if let Err(e) = result {
        write_manifest(dir)?;
        return Err(e);
    }
    Ok(())
}

fn files_under(dir: &Path) -> Result<Vec<String>, DataError> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<(), DataError> {
        for entry in fs::read_dir(dir).map_err(|e| DataError::io(dir, e))? {
            let p = entry.map_err(|e| DataError::io(dir, e))?.path();
            if p.is_dir() {
                walk(root, &p, out)?;
            } else {
                let rel = p.strip_prefix(root).expect("under root").to_string_lossy().replace('\\', "/");
                if rel != MANIFEST {
                    out.push(rel);
                }
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out)?;
    out.sort();
    Ok(out)
}

/// Writes `MANIFEST`: one `<sha256>  <relative path>` line per file.
pub fn write_manifest(dir: &Path) -> Result<(), DataError> {
    let mut text = String::new();
    for rel in files_under(dir)? {
        let p = dir.join(&rel);
        let bytes = fs::read(&p).map_err(|e| DataError::io(&p, e))?;
        text.push_str(&format!("{}  {rel}\n", sha256_hex(&bytes)));
    }
    write(dir, MANIFEST, text.as_bytes())
}

pub fn read_manifest(dir: &Path) -> Result<BTreeMap<String, String>, DataError> {
    let p = dir.join(MANIFEST);
    let text = fs::read_to_string(&p).map_err(|e| DataError::io(&p, e))?;
    text.lines()
        .map(|l| {
            l.split_once("  ")
                .map(|(h, f)| (f.to_string(), h.to_string()))
                .ok_or_else(|| DataError::Format(format!("bad MANIFEST line {l:?}")))
        })
        .collect()
}

/// Checks that every file is listed and every listed hash matches.
pub fn verify_manifest(dir: &Path) -> Result<(), DataError> {
    let listed = read_manifest(dir)?;
    let present = files_under(dir)?;
    for rel in &present {
        let want = listed.get(rel).ok_or_else(|| invalid(rel, "not listed in MANIFEST"))?;
        let got = sha256_hex(&fs::read(dir.join(rel)).map_err(|e| DataError::io(&dir.join(rel), e))?);
        if &got != want {
            return Err(invalid(rel, "hash differs from MANIFEST"));
        }
    }
    if let Some(missing) = listed.keys().find(|k| !present.contains(k)) {
        return Err(invalid(missing, "listed in MANIFEST but missing"));
    }
    Ok(())
}

pub const TABLE_HEADER: &str = "run,model,variant,fidelity_proxy,qwm_mean,ber";
const NULL: &str = "null";

/// One row per run directory, read from its config copy and metrics CSV.
/// Missing values are written as `null`.
pub fn emit_tables(run_dirs: &[PathBuf]) -> Result<String, DataError> {
    let mut out = format!("{TABLE_HEADER}\n");
    for dir in run_dirs {
        let cfg_path = dir.join(CONFIG_FILE);
        let (name, model, variant) = match fs::read_to_string(&cfg_path).ok().and_then(|t| ExperimentConfig::from_json(&t).ok()) {
            Some(c) => {
                let model = match c.model.kind {
                    ModelKind::Gan => "dcgan",
                    ModelKind::Vae => "vae",
                };
                (c.name.clone(), model.to_string(), c.variant().to_string())
            }
            None => (dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(), NULL.into(), NULL.into()),
        };
        let metrics = read_metrics(&dir.join(METRICS_FILE)).unwrap_or_default();
        let get = |m: &str| metrics.get(m).cloned().unwrap_or_else(|| NULL.to_string());
        out.push_str(&format!("{name},{model},{variant},{},{},{}\n", get("fidelity_proxy"), get("qwm_mean"), get("ber")));
    }
    Ok(out)
}

/// Metric name → value text, exactly as written.
pub fn read_metrics(path: &Path) -> Result<BTreeMap<String, String>, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(MetricRow::HEADER) {
        return Err(DataError::Format(format!("{}: unexpected header", path.display())));
    }
    lines
        .map(|l| {
            let cols: Vec<&str> = l.split(',').collect();
            if cols.len() != 5 {
                return Err(DataError::Format(format!("{}: bad row {l:?}", path.display())));
            }
            Ok((cols[1].to_string(), cols[2].to_string()))
        })
        .collect()
}
