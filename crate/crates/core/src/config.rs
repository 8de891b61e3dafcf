//! Training configuration and its flat `section.key=value` text form.
//!
//! ```text
//! # comments and blank lines are ignored
//! train.epochs=20
//! f1.kind=patch_attention
//! augment.height=64
//! ```

use std::collections::HashSet;
use std::path::PathBuf;

use crate::data::{AugmentPolicy, DEFAULT_BATCH_LABELED, DEFAULT_BATCH_UNLABELED};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::metrics::{EmptyPolicy, DEFAULT_NSD_TOLERANCE};
use crate::nn::{BackboneKind, BackboneSpec};
use crate::teacher::DEFAULT_EMA_DECAY;

pub const SEED_ENV: &str = "FMDACL_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    Cosine,
}

/// Validation quantity used to pick the best checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    Score,
    Dsc,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub seed: u64,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub lr_backbone_f1: f64,
    pub lr_heads_f1: f64,
    pub wd_f1: f64,
    pub lr_f2: f64,
    pub wd_f2: f64,
    pub ema_decay: f64,
    pub weights: LossWeights,
    /// Mixing ratio of the interpolation-consistency term.
    pub mix_sigma: f64,
    /// When positive, the mixing ratio is drawn per step from
    /// `Beta(alpha, alpha)` instead of using `mix_sigma`.
    pub mix_beta_alpha: f64,
    /// Multiplier of the entropy-agreement term inside the agreement loss;
    /// `-1` flips its sign.
    pub conf_sign: f64,
    pub lr_schedule: LrSchedule,
    /// Sigmoid ramp-up of the semi-supervised weights over this many epochs;
    /// 0 disables it.
    pub rampup_epochs: usize,
    /// Global gradient-norm cap per network; 0 disables clipping.
    pub grad_clip: f64,
    pub select_by: Selection,
    /// Also keep a checkpoint every this many epochs; 0 keeps only the
    /// latest and the best.
    pub save_every: usize,
    pub nsd_tolerance: f64,
    pub empty_policy: EmptyPolicy,
    pub f1: BackboneSpec,
    pub f2: BackboneSpec,
    pub augment: AugmentPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 300,
            seed: 0,
            batch_labeled: DEFAULT_BATCH_LABELED,
            batch_unlabeled: DEFAULT_BATCH_UNLABELED,
            lr_backbone_f1: 1e-4,
            lr_heads_f1: 1e-3,
            wd_f1: 0.01,
            lr_f2: 1e-3,
            wd_f2: 1e-4,
            ema_decay: DEFAULT_EMA_DECAY,
            weights: LossWeights::default(),
            mix_sigma: 0.5,
            mix_beta_alpha: 0.0,
            conf_sign: 1.0,
            lr_schedule: LrSchedule::Constant,
            rampup_epochs: 0,
            grad_clip: 0.0,
            select_by: Selection::Score,
            save_every: 0,
            nsd_tolerance: DEFAULT_NSD_TOLERANCE,
            empty_policy: EmptyPolicy::Exclude,
            f1: BackboneSpec::new(BackboneKind::PatchAttention, 16, 2),
            f2: BackboneSpec::new(BackboneKind::ConvUnet, 16, 3),
            augment: AugmentPolicy::default(),
        }
    }
}

fn invalid(key: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        msg: msg.into(),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| invalid(key, format!("cannot parse {v:?} as {}", std::any::type_name::<T>())))
}

fn parse_real(key: &str, v: &str) -> Result<f64> {
    let x: f64 = parse_num(key, v)?;
    if !x.is_finite() {
        return Err(invalid(key, "must be finite"));
    }
    Ok(x)
}

impl TrainConfig {
    /// Every key with its current value, in canonical order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let kind = |s: &BackboneSpec| s.kind.as_str().to_string();
        vec![
            ("train.epochs", self.epochs.to_string()),
            ("train.seed", self.seed.to_string()),
            ("train.batch_labeled", self.batch_labeled.to_string()),
            ("train.batch_unlabeled", self.batch_unlabeled.to_string()),
            ("train.lr_backbone_f1", self.lr_backbone_f1.to_string()),
            ("train.lr_heads_f1", self.lr_heads_f1.to_string()),
            ("train.wd_f1", self.wd_f1.to_string()),
            ("train.lr_f2", self.lr_f2.to_string()),
            ("train.wd_f2", self.wd_f2.to_string()),
            ("train.ema_decay", self.ema_decay.to_string()),
            ("train.mix_sigma", self.mix_sigma.to_string()),
            ("train.mix_beta_alpha", self.mix_beta_alpha.to_string()),
            (
                "train.lr_schedule",
                match self.lr_schedule {
                    LrSchedule::Constant => "constant",
                    LrSchedule::Cosine => "cosine",
                }
                .to_string(),
            ),
            ("train.rampup_epochs", self.rampup_epochs.to_string()),
            ("train.grad_clip", self.grad_clip.to_string()),
            (
                "train.select_by",
                match self.select_by {
                    Selection::Score => "score",
                    Selection::Dsc => "dsc",
                }
                .to_string(),
            ),
            ("train.save_every", self.save_every.to_string()),
            ("loss.lambda_cps", self.weights.lambda_cps.to_string()),
            ("loss.tau_ict", self.weights.tau_ict.to_string()),
            ("loss.beta_dac", self.weights.beta_dac.to_string()),
            ("loss.conf_sign", self.conf_sign.to_string()),
            ("eval.nsd_tolerance", self.nsd_tolerance.to_string()),
            (
                "eval.empty_policy",
                match self.empty_policy {
                    EmptyPolicy::Exclude => "exclude",
                    EmptyPolicy::Perfect => "perfect",
                }
                .to_string(),
            ),
            ("model.c_seg", self.f1.c_seg.to_string()),
            ("model.k_cls", self.f1.k_cls.to_string()),
            ("f1.kind", kind(&self.f1)),
            ("f1.width", self.f1.width.to_string()),
            ("f1.depth", self.f1.depth.to_string()),
            ("f2.kind", kind(&self.f2)),
            ("f2.width", self.f2.width.to_string()),
            ("f2.depth", self.f2.depth.to_string()),
            ("augment.hflip_prob", self.augment.hflip_prob.to_string()),
            ("augment.max_rotate_deg", self.augment.max_rotate_deg.to_string()),
            ("augment.height", self.augment.target_size.0.to_string()),
            ("augment.width", self.augment.target_size.1.to_string()),
        ]
    }

    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let backbone = |key: &str, v: &str| {
            BackboneKind::parse(v).ok_or_else(|| invalid(key, format!("unknown backbone {v:?}")))
        };
        match key {
            "train.epochs" => self.epochs = parse_num(key, v)?,
            "train.seed" => self.seed = parse_num(key, v)?,
            "train.batch_labeled" => self.batch_labeled = parse_num(key, v)?,
            "train.batch_unlabeled" => self.batch_unlabeled = parse_num(key, v)?,
            "train.lr_backbone_f1" => self.lr_backbone_f1 = parse_real(key, v)?,
            "train.lr_heads_f1" => self.lr_heads_f1 = parse_real(key, v)?,
            "train.wd_f1" => self.wd_f1 = parse_real(key, v)?,
            "train.lr_f2" => self.lr_f2 = parse_real(key, v)?,
            "train.wd_f2" => self.wd_f2 = parse_real(key, v)?,
            "train.ema_decay" => self.ema_decay = parse_real(key, v)?,
            "train.mix_sigma" => self.mix_sigma = parse_real(key, v)?,
            "train.mix_beta_alpha" => self.mix_beta_alpha = parse_real(key, v)?,
            "train.lr_schedule" => {
                self.lr_schedule = match v {
                    "constant" => LrSchedule::Constant,
                    "cosine" => LrSchedule::Cosine,
                    _ => return Err(invalid(key, format!("expected constant|cosine, got {v:?}"))),
                }
            }
            "train.rampup_epochs" => self.rampup_epochs = parse_num(key, v)?,
            "train.grad_clip" => self.grad_clip = parse_real(key, v)?,
            "train.select_by" => {
                self.select_by = match v {
                    "score" => Selection::Score,
                    "dsc" => Selection::Dsc,
                    _ => return Err(invalid(key, format!("expected score|dsc, got {v:?}"))),
                }
            }
            "train.save_every" => self.save_every = parse_num(key, v)?,
            "loss.lambda_cps" => self.weights.lambda_cps = parse_real(key, v)?,
            "loss.tau_ict" => self.weights.tau_ict = parse_real(key, v)?,
            "loss.beta_dac" => self.weights.beta_dac = parse_real(key, v)?,
            "loss.conf_sign" => self.conf_sign = parse_real(key, v)?,
            "eval.nsd_tolerance" => self.nsd_tolerance = parse_real(key, v)?,
            "eval.empty_policy" => {
                self.empty_policy = match v {
                    "exclude" => EmptyPolicy::Exclude,
                    "perfect" => EmptyPolicy::Perfect,
                    _ => return Err(invalid(key, format!("expected exclude|perfect, got {v:?}"))),
                }
            }
            "model.c_seg" => {
                let c = parse_num(key, v)?;
                self.f1.c_seg = c;
                self.f2.c_seg = c;
            }
            "model.k_cls" => {
                let k = parse_num(key, v)?;
                self.f1.k_cls = k;
                self.f2.k_cls = k;
            }
            "f1.kind" => self.f1.kind = backbone(key, v)?,
            "f1.width" => self.f1.width = parse_num(key, v)?,
            "f1.depth" => self.f1.depth = parse_num(key, v)?,
            "f2.kind" => self.f2.kind = backbone(key, v)?,
            "f2.width" => self.f2.width = parse_num(key, v)?,
            "f2.depth" => self.f2.depth = parse_num(key, v)?,
            "augment.hflip_prob" => self.augment.hflip_prob = parse_real(key, v)?,
            "augment.max_rotate_deg" => self.augment.max_rotate_deg = parse_real(key, v)?,
            "augment.height" => self.augment.target_size.0 = parse_num(key, v)?,
            "augment.width" => self.augment.target_size.1 = parse_num(key, v)?,
            _ => return Err(invalid(key, "unknown key")),
        }
        Ok(())
    }

    /// Schema checks beyond per-value parsing, reported with the key path.
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(invalid("train.epochs", "must be at least 1"));
        }
        if self.batch_labeled < 1 {
            return Err(invalid("train.batch_labeled", "must be at least 1"));
        }
        if self.batch_unlabeled < 2 || self.batch_unlabeled % 2 != 0 {
            return Err(invalid("train.batch_unlabeled", "must be even and at least 2"));
        }
        for (key, v) in [
            ("train.lr_backbone_f1", self.lr_backbone_f1),
            ("train.lr_heads_f1", self.lr_heads_f1),
            ("train.lr_f2", self.lr_f2),
            ("train.wd_f1", self.wd_f1),
            ("train.wd_f2", self.wd_f2),
            ("train.grad_clip", self.grad_clip),
            ("train.mix_beta_alpha", self.mix_beta_alpha),
            ("eval.nsd_tolerance", self.nsd_tolerance),
        ] {
            if v < 0.0 {
                return Err(invalid(key, "must be >= 0"));
            }
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(invalid("train.ema_decay", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.mix_sigma) {
            return Err(invalid("train.mix_sigma", "must lie in [0, 1]"));
        }
        if self.conf_sign != 1.0 && self.conf_sign != -1.0 {
            return Err(invalid("loss.conf_sign", "must be 1 or -1"));
        }
        self.weights
            .validate()
            .map_err(|e| invalid("loss", e.to_string()))?;
        self.augment
            .validate()
            .map_err(|e| invalid("augment", e.to_string()))?;
        for (sec, s) in [("f1", &self.f1), ("f2", &self.f2)] {
            s.validate().map_err(|e| invalid(sec, e.to_string()))?;
            let (h, w) = self.augment.target_size;
            s.check_input(h, w)
                .map_err(|e| invalid("augment.height", format!("{sec}: {e}")))?;
        }
        Ok(())
    }

    /// Renders every key, one `key=value` per line.
    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Applies a text document on top of the defaults.
    pub fn from_text(text: &str) -> Result<TrainConfig> {
        Ok(RunConfig::from_text(text)?.train)
    }
}

/// A training run: configuration plus where data lives and results go.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data_root: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                key: format!("line {}", i + 1),
                msg: format!("expected key=value, got {line:?}"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(invalid(k, "given more than once"));
            }
            match k {
                "data.root" => cfg.data_root = Some(PathBuf::from(v)),
                "output.dir" => cfg.output_dir = Some(PathBuf::from(v)),
                _ => cfg.train.set(k, v)?,
            }
        }
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = self.train.to_text();
        if let Some(p) = &self.data_root {
            s.push_str(&format!("data.root={}\n", p.display()));
        }
        if let Some(p) = &self.output_dir {
            s.push_str(&format!("output.dir={}\n", p.display()));
        }
        s
    }
}

/// Applies the seed override from the environment variable, if set.
pub fn apply_seed_env(cfg: &mut TrainConfig, value: Option<&str>) -> Result<()> {
    if let Some(v) = value {
        cfg.seed = v
            .trim()
            .parse()
            .map_err(|_| invalid(SEED_ENV, format!("cannot parse {v:?} as a seed")))?;
    }
    Ok(())
}
