//! Run configuration: every dimension and hyper-parameter in one record,
//! read from `key = value` lines with dotted namespaces.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::types::{LossWeights, PassType};

/// Dimensions of the frozen backends and the injection point.
#[derive(Clone, Debug, PartialEq)]
pub struct BackendConfig {
    pub image_size: usize,
    pub latent_layers: usize,
    pub latent_dim: usize,
    pub feat_channels: usize,
    pub feat_h: usize,
    pub feat_w: usize,
    /// Zero-based count of synthesis layers replaced by the injected feature map.
    pub injection_layer_k: usize,
    pub frs_dim: usize,
    pub disc_hidden: usize,
    pub seed: u64,
}

impl BackendConfig {
    pub fn reference() -> Self {
        Self {
            image_size: 256,
            latent_layers: 18,
            latent_dim: 512,
            feat_channels: 512,
            feat_h: 64,
            feat_w: 64,
            injection_layer_k: 9,
            frs_dim: 512,
            disc_hidden: 512,
            seed: 0,
        }
    }

    pub fn toy() -> Self {
        Self {
            image_size: 16,
            latent_layers: 4,
            latent_dim: 8,
            feat_channels: 8,
            feat_h: 8,
            feat_w: 8,
            injection_layer_k: 2,
            frs_dim: 128,
            disc_hidden: 32,
            seed: 7,
        }
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [3, self.image_size, self.image_size]
    }

    pub fn feat_shape(&self) -> [usize; 3] {
        [self.feat_channels, self.feat_h, self.feat_w]
    }

    pub fn latent_shape(&self) -> [usize; 2] {
        [self.latent_layers, self.latent_dim]
    }

    /// Number of style layers consumed after injection.
    pub fn tail_layers(&self) -> usize {
        self.latent_layers - self.injection_layer_k
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.image_size,
            self.latent_layers,
            self.latent_dim,
            self.feat_channels,
            self.feat_h,
            self.feat_w,
            self.frs_dim,
            self.disc_hidden,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("backend dimensions must be positive".into()));
        }
        if self.injection_layer_k >= self.latent_layers {
            return Err(Error::Config(format!(
                "injection layer {} must be below latent layer count {}",
                self.injection_layer_k, self.latent_layers
            )));
        }
        if self.feat_h != self.feat_w {
            return Err(Error::Config("feature maps must be square".into()));
        }
        let ratio = self.image_size / self.feat_h;
        if !self.image_size.is_multiple_of(self.feat_h) || !ratio.is_power_of_two() {
            return Err(Error::Config(format!(
                "image size {} must be a power-of-two multiple of feature size {}",
                self.image_size, self.feat_h
            )));
        }
        Ok(())
    }
}

/// Architecture of the trainable modules. Schedules are channel widths in
/// units of `feat_channels`; consecutive entries define one block each.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub fdm_schedule: Vec<usize>,
    pub ffm_schedule: Vec<usize>,
    pub idm_width: usize,
    pub idm_style_blocks: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { fdm_schedule: vec![2, 2, 1, 1, 1], ffm_schedule: vec![2, 1, 1], idm_width: 16, idm_style_blocks: 2, seed: 11 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, s) in [("fdm", &self.fdm_schedule), ("ffm", &self.ffm_schedule)] {
            if s.len() < 2 || s.first() != Some(&2) || s.last() != Some(&1) || s.contains(&0) {
                return Err(Error::Config(format!(
                    "{name} schedule must start at 2, end at 1, and have at least one block"
                )));
            }
        }
        if self.idm_width == 0 {
            return Err(Error::Config("idm width must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    /// Lookahead around rectified Adam.
    Ranger,
    Adam,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub batch_size: usize,
    pub lr_modules: f64,
    pub lr_disc: f64,
    pub curriculum_cap_step: usize,
    pub curriculum_p_max: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub optimizer: OptimizerKind,
}

impl TrainConfig {
    pub fn reference() -> Self {
        Self {
            total_steps: 68_000,
            batch_size: 2,
            lr_modules: 5e-5,
            lr_disc: 1e-4,
            curriculum_cap_step: 40_000,
            curriculum_p_max: 0.8,
            seed: 0,
            checkpoint_every: 5_000,
            optimizer: OptimizerKind::Ranger,
        }
    }

    pub fn toy() -> Self {
        Self {
            total_steps: 2_000,
            batch_size: 2,
            lr_modules: 2e-3,
            lr_disc: 1e-4,
            curriculum_cap_step: 1_000,
            curriculum_p_max: 0.8,
            seed: 3,
            checkpoint_every: 500,
            optimizer: OptimizerKind::Adam,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.checkpoint_every == 0 || self.curriculum_cap_step == 0 {
            return Err(Error::Config("batch size, checkpoint interval and curriculum cap must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.curriculum_p_max) {
            return Err(Error::Config("curriculum_p_max must lie in [0, 1]".into()));
        }
        if !(self.lr_modules > 0.0 && self.lr_disc > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub bona_fide: LossWeights,
    pub morphed: LossWeights,
    pub ms_ssim_scales: usize,
    pub ms_ssim_window: usize,
    pub ms_ssim_sigma: f64,
}

impl LossConfig {
    pub fn reference() -> Self {
        Self {
            bona_fide: LossWeights::bona_fide_pass(),
            morphed: LossWeights::morphed_pass(),
            ms_ssim_scales: 5,
            ms_ssim_window: 11,
            ms_ssim_sigma: 1.5,
        }
    }

    pub fn toy() -> Self {
        Self { ms_ssim_scales: 3, ms_ssim_window: 3, ms_ssim_sigma: 0.5, ..Self::reference() }
    }

    pub fn weights(&self, pass: PassType) -> &LossWeights {
        match pass {
            PassType::BonaFidePass => &self.bona_fide,
            PassType::MorphedPass => &self.morphed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MorphMethod {
    Blend,
    Splice,
}

impl MorphMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Blend => "blend",
            Self::Splice => "splice",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "blend" => Ok(Self::Blend),
            "splice" => Ok(Self::Splice),
            other => Err(Error::Config(format!("unknown morph method '{other}'"))),
        }
    }
}

/// Parameters of the synthetic identity world and its corpus protocol.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub name: String,
    pub n_identities: usize,
    pub id_dim: usize,
    pub methods: Vec<MorphMethod>,
    pub alpha: f64,
    pub live_per_identity: usize,
    pub noise_sigma: f64,
    pub illum_shift: f64,
    pub target_fmr: f64,
    pub test_fraction: f64,
    pub splice_area: f64,
    pub lookalike_pool: usize,
    pub n_frs: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            name: "toy".into(),
            n_identities: 80,
            id_dim: 8,
            methods: vec![MorphMethod::Blend, MorphMethod::Splice],
            alpha: 0.5,
            live_per_identity: 2,
            noise_sigma: 0.02,
            illum_shift: 0.05,
            target_fmr: 0.005,
            test_fraction: 0.25,
            splice_area: 0.44,
            lookalike_pool: 5,
            n_frs: 3,
            seed: 1,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.id_dim == 0 || self.live_per_identity == 0 || self.methods.is_empty() {
            return Err(Error::Config("corpus needs id_dim, live captures and at least one method".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config("alpha must lie in [0, 1] and test_fraction in [0, 1)".into()));
        }
        if !(self.target_fmr > 0.0 && self.target_fmr < 1.0) {
            return Err(Error::Config("target_fmr must lie in (0, 1)".into()));
        }
        if !(self.splice_area > 0.0 && self.splice_area <= 1.0) || self.noise_sigma < 0.0 {
            return Err(Error::Config("splice_area must lie in (0, 1] and noise_sigma be nonnegative".into()));
        }
        if self.lookalike_pool == 0 || self.n_frs == 0 {
            return Err(Error::Config("lookalike_pool and n_frs must be positive".into()));
        }
        Ok(())
    }
}

/// The merged configuration of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub backend: BackendConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub corpus: CorpusConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::toy()
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| Error::Config(format!("invalid value '{v}' for {key}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|x| parse_num(key, x)).collect()
}

fn fmt_list(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

const WEIGHT_KEYS: [&str; 7] =
    ["lambda_id", "lambda_l2", "lambda_lpips", "lambda_ms_ssim", "lambda_feat", "lambda_inv_id", "lambda_adv"];

fn weight_field<'a>(w: &'a mut LossWeights, name: &str) -> Option<&'a mut f64> {
    Some(match name {
        "lambda_id" => &mut w.lambda_id,
        "lambda_l2" => &mut w.lambda_l2,
        "lambda_lpips" => &mut w.lambda_lpips,
        "lambda_ms_ssim" => &mut w.lambda_ms_ssim,
        "lambda_feat" => &mut w.lambda_feat,
        "lambda_inv_id" => &mut w.lambda_inv_id,
        "lambda_adv" => &mut w.lambda_adv,
        _ => return None,
    })
}

impl RunConfig {
    pub fn toy() -> Self {
        Self {
            backend: BackendConfig::toy(),
            model: ModelConfig::default(),
            train: TrainConfig::toy(),
            loss: LossConfig::toy(),
            corpus: CorpusConfig { id_dim: 32, noise_sigma: 0.01, ..CorpusConfig::default() },
        }
    }

    pub fn reference() -> Self {
        Self {
            backend: BackendConfig::reference(),
            model: ModelConfig::default(),
            train: TrainConfig::reference(),
            loss: LossConfig::reference(),
            corpus: CorpusConfig::default(),
        }
    }

    /// Parses `key = value` lines over the toy defaults. `#` starts a comment;
    /// unknown keys and duplicate keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::toy();
        let mut seen = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", lineno + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if seen.insert(k.to_string(), ()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k}", lineno + 1)));
            }
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let b = &mut self.backend;
        let t = &mut self.train;
        let c = &mut self.corpus;
        match key {
            "backend.image_size" => b.image_size = parse_num(key, v)?,
            "backend.latent_layers" => b.latent_layers = parse_num(key, v)?,
            "backend.latent_dim" => b.latent_dim = parse_num(key, v)?,
            "backend.feat_channels" => b.feat_channels = parse_num(key, v)?,
            "backend.feat_h" => b.feat_h = parse_num(key, v)?,
            "backend.feat_w" => b.feat_w = parse_num(key, v)?,
            "backend.injection_layer_k" => b.injection_layer_k = parse_num(key, v)?,
            "backend.frs_dim" => b.frs_dim = parse_num(key, v)?,
            "backend.disc_hidden" => b.disc_hidden = parse_num(key, v)?,
            "backend.seed" => b.seed = parse_num(key, v)?,
            "model.fdm_schedule" => self.model.fdm_schedule = parse_list(key, v)?,
            "model.ffm_schedule" => self.model.ffm_schedule = parse_list(key, v)?,
            "model.idm_width" => self.model.idm_width = parse_num(key, v)?,
            "model.idm_style_blocks" => self.model.idm_style_blocks = parse_num(key, v)?,
            "model.seed" => self.model.seed = parse_num(key, v)?,
            "train.total_steps" => t.total_steps = parse_num(key, v)?,
            "train.batch_size" => t.batch_size = parse_num(key, v)?,
            "train.lr_modules" => t.lr_modules = parse_num(key, v)?,
            "train.lr_disc" => t.lr_disc = parse_num(key, v)?,
            "train.curriculum_cap_step" => t.curriculum_cap_step = parse_num(key, v)?,
            "train.curriculum_p_max" => t.curriculum_p_max = parse_num(key, v)?,
            "train.seed" => t.seed = parse_num(key, v)?,
            "train.checkpoint_every" => t.checkpoint_every = parse_num(key, v)?,
            "train.optimizer" => {
                t.optimizer = match v {
                    "ranger" => OptimizerKind::Ranger,
                    "adam" => OptimizerKind::Adam,
                    _ => return Err(Error::Config(format!("unknown optimizer '{v}'"))),
                }
            }
            "loss.margin_m" => {
                let m = parse_num(key, v)?;
                self.loss.bona_fide.margin_m = m;
                self.loss.morphed.margin_m = m;
            }
            "loss.gamma_r1" => {
                let g = parse_num(key, v)?;
                self.loss.bona_fide.gamma_r1 = g;
                self.loss.morphed.gamma_r1 = g;
            }
            "loss.ms_ssim_scales" => self.loss.ms_ssim_scales = parse_num(key, v)?,
            "loss.ms_ssim_window" => self.loss.ms_ssim_window = parse_num(key, v)?,
            "loss.ms_ssim_sigma" => self.loss.ms_ssim_sigma = parse_num(key, v)?,
            "corpus.name" => c.name = v.to_string(),
            "corpus.n_identities" => c.n_identities = parse_num(key, v)?,
            "corpus.id_dim" => c.id_dim = parse_num(key, v)?,
            "corpus.methods" => c.methods = v.split(',').map(MorphMethod::parse).collect::<Result<_>>()?,
            "corpus.alpha" => c.alpha = parse_num(key, v)?,
            "corpus.live_per_identity" => c.live_per_identity = parse_num(key, v)?,
            "corpus.noise_sigma" => c.noise_sigma = parse_num(key, v)?,
            "corpus.illum_shift" => c.illum_shift = parse_num(key, v)?,
            "corpus.target_fmr" => c.target_fmr = parse_num(key, v)?,
            "corpus.test_fraction" => c.test_fraction = parse_num(key, v)?,
            "corpus.splice_area" => c.splice_area = parse_num(key, v)?,
            "corpus.lookalike_pool" => c.lookalike_pool = parse_num(key, v)?,
            "corpus.n_frs" => c.n_frs = parse_num(key, v)?,
            "corpus.seed" => c.seed = parse_num(key, v)?,
            _ => {
                let weights = if let Some(rest) = key.strip_prefix("loss.bonafide.") {
                    Some((&mut self.loss.bona_fide, rest))
                } else {
                    key.strip_prefix("loss.morphed.").map(|rest| (&mut self.loss.morphed, rest))
                };
                match weights.and_then(|(w, name)| weight_field(w, name)) {
                    Some(slot) => *slot = parse_num(key, v)?,
                    None => return Err(Error::Config(format!("unknown key '{key}'"))),
                }
            }
        }
        Ok(())
    }

    /// Overrides every seed with values derived from one global seed.
    pub fn reseed(&mut self, seed: u64) {
        self.backend.seed = seed;
        self.model.seed = seed.wrapping_add(1);
        self.train.seed = seed.wrapping_add(2);
        self.corpus.seed = seed.wrapping_add(3);
    }

    pub fn validate(&self) -> Result<()> {
        self.backend.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.corpus.validate()?;
        self.loss.bona_fide.check_pass(PassType::BonaFidePass)?;
        self.loss.morphed.validate()?;
        if self.loss.ms_ssim_scales == 0 || self.loss.ms_ssim_window == 0 || self.loss.ms_ssim_sigma <= 0.0 {
            return Err(Error::Config("ms-ssim parameters must be positive".into()));
        }
        Ok(())
    }

    /// Every resolved key with its canonical value, sorted by key.
    pub fn entries(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        let b = &self.backend;
        put("backend.image_size", b.image_size.to_string());
        put("backend.latent_layers", b.latent_layers.to_string());
        put("backend.latent_dim", b.latent_dim.to_string());
        put("backend.feat_channels", b.feat_channels.to_string());
        put("backend.feat_h", b.feat_h.to_string());
        put("backend.feat_w", b.feat_w.to_string());
        put("backend.injection_layer_k", b.injection_layer_k.to_string());
        put("backend.frs_dim", b.frs_dim.to_string());
        put("backend.disc_hidden", b.disc_hidden.to_string());
        put("backend.seed", b.seed.to_string());
        put("model.fdm_schedule", fmt_list(&self.model.fdm_schedule));
        put("model.ffm_schedule", fmt_list(&self.model.ffm_schedule));
        put("model.idm_width", self.model.idm_width.to_string());
        put("model.idm_style_blocks", self.model.idm_style_blocks.to_string());
        put("model.seed", self.model.seed.to_string());
        let t = &self.train;
        put("train.total_steps", t.total_steps.to_string());
        put("train.batch_size", t.batch_size.to_string());
        put("train.lr_modules", t.lr_modules.to_string());
        put("train.lr_disc", t.lr_disc.to_string());
        put("train.curriculum_cap_step", t.curriculum_cap_step.to_string());
        put("train.curriculum_p_max", t.curriculum_p_max.to_string());
        put("train.seed", t.seed.to_string());
        put("train.checkpoint_every", t.checkpoint_every.to_string());
        put(
            "train.optimizer",
            match t.optimizer {
                OptimizerKind::Ranger => "ranger",
                OptimizerKind::Adam => "adam",
            }
            .into(),
        );
        put("loss.margin_m", self.loss.morphed.margin_m.to_string());
        put("loss.gamma_r1", self.loss.morphed.gamma_r1.to_string());
        put("loss.ms_ssim_scales", self.loss.ms_ssim_scales.to_string());
        put("loss.ms_ssim_window", self.loss.ms_ssim_window.to_string());
        put("loss.ms_ssim_sigma", self.loss.ms_ssim_sigma.to_string());
        for (prefix, w) in [("loss.bonafide.", self.loss.bona_fide), ("loss.morphed.", self.loss.morphed)] {
            let mut w = w;
            for name in WEIGHT_KEYS {
                put(&format!("{prefix}{name}"), weight_field(&mut w, name).map(|v| v.to_string()).unwrap_or_default());
            }
        }
        let c = &self.corpus;
        put("corpus.name", c.name.clone());
        put("corpus.n_identities", c.n_identities.to_string());
        put("corpus.id_dim", c.id_dim.to_string());
        put("corpus.methods", c.methods.iter().map(|m| m.as_str()).collect::<Vec<_>>().join(","));
        put("corpus.alpha", c.alpha.to_string());
        put("corpus.live_per_identity", c.live_per_identity.to_string());
        put("corpus.noise_sigma", c.noise_sigma.to_string());
        put("corpus.illum_shift", c.illum_shift.to_string());
        put("corpus.target_fmr", c.target_fmr.to_string());
        put("corpus.test_fraction", c.test_fraction.to_string());
        put("corpus.splice_area", c.splice_area.to_string());
        put("corpus.lookalike_pool", c.lookalike_pool.to_string());
        put("corpus.n_frs", c.n_frs.to_string());
        put("corpus.seed", c.seed.to_string());
        m
    }

    /// Canonical text form; parsing it reproduces this configuration.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Content hash over all resolved entries.
    pub fn digest(&self) -> String {
        digest_entries(self.entries().iter())
    }

    /// Hash of the entries that determine model parameters and optimisation
    /// trajectory; a checkpoint only resumes under a matching value.
    pub fn model_digest(&self) -> String {
        digest_entries(self.entries().iter().filter(|(k, _)| {
            (k.starts_with("backend.") || k.starts_with("model.") || k.starts_with("train.") || k.starts_with("loss."))
                && k.as_str() != "train.total_steps"
                && k.as_str() != "train.checkpoint_every"
        }))
    }
}

fn digest_entries<'a>(entries: impl Iterator<Item = (&'a String, &'a String)>) -> String {
    let mut h = Sha256::new();
    for (k, v) in entries {
        h.update(k.as_bytes());
        h.update(b"=");
        h.update(v.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}
