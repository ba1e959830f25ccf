//! Run configuration: a flat `section.key = value` text format covering
//! every tunable in the pipeline, with strict parsing (unknown keys are
//! errors) and a canonical serializer used for checkpoint snapshots.

use std::path::PathBuf;

use crate::diffusion::{ScheduleKind, SigmaMode};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::masking::{Fill, MaskConfig, Ramp};
use crate::model::ModelConfig;
use crate::videodata::{DatasetSpec, Split};

/// Learning-rate schedule of the optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    CosineAnneal,
}

impl std::fmt::Display for LrSchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LrSchedule::Constant => write!(f, "constant"),
            LrSchedule::CosineAnneal => write!(f, "cosine_anneal"),
        }
    }
}

/// Perceptual feature backend selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    ConvPyramid,
}

impl std::fmt::Display for BackendKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BackendKind::ConvPyramid => write!(f, "conv_pyramid"),
        }
    }
}

/// Full run configuration; one field per config key.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    // data.*
    pub data_root: PathBuf,
    pub segment_length: usize,
    pub resize: (usize, usize),
    pub channels: usize,
    pub data_seed: u64,
    // mask.*
    pub p_r: f64,
    pub p_m: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub ramp: Ramp,
    pub fill: Fill,
    pub constant_value: f64,
    // diffusion.*
    pub t_d: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub schedule_kind: ScheduleKind,
    pub sigma_mode: SigmaMode,
    // model.*
    pub base_channels: usize,
    pub levels: usize,
    pub heads: usize,
    pub time_embed_dim: usize,
    // loss.*
    pub lambda_mse: f64,
    pub lambda_l1: f64,
    pub lambda_perc: f64,
    pub lambda_lpips: f64,
    pub adaptive_ramp: bool,
    pub backend: BackendKind,
    // train.*
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    /// Checkpoint cadence in optimizer steps.
    pub checkpoint_every: usize,
    /// Global-norm gradient clip; 0 disables.
    pub grad_clip: f64,
    /// Stop after this many optimizer steps; 0 means run all epochs.
    pub max_steps: usize,
    pub out_dir: PathBuf,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            data_root: PathBuf::from("data"),
            segment_length: 7,
            resize: (64, 64),
            channels: 3,
            data_seed: 42,
            p_r: 0.1,
            p_m: 1.0,
            p_min: 0.1,
            p_max: 0.5,
            ramp: Ramp::Cosine,
            fill: Fill::GaussianNoise,
            constant_value: 0.5,
            t_d: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            schedule_kind: ScheduleKind::Linear,
            sigma_mode: SigmaMode::Posterior,
            base_channels: 16,
            levels: 3,
            heads: 4,
            time_embed_dim: 64,
            lambda_mse: 1.0,
            lambda_l1: 1.0,
            lambda_perc: 0.1,
            lambda_lpips: 0.1,
            adaptive_ramp: false,
            backend: BackendKind::ConvPyramid,
            epochs: 100,
            batch_size: 8,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            lr_schedule: LrSchedule::CosineAnneal,
            seed: 42,
            checkpoint_every: 100,
            grad_clip: 1.0,
            max_steps: 0,
            out_dir: PathBuf::from("runs/mivid"),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("train.epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be > 0, got {}", self.lr)));
        }
        for (name, b) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must be in [0,1), got {b}")));
            }
        }
        if self.grad_clip < 0.0 || !self.grad_clip.is_finite() {
            return Err(Error::Config("train.grad_clip must be >= 0".into()));
        }
        self.dataset_spec(Split::Train).validate()?;
        self.mask_config().validate()?;
        self.model_config().validate()?;
        self.loss_weights().validate()?;
        let div = 1usize << (self.levels - 1);
        if self.resize.0 % div != 0 || self.resize.1 % div != 0 {
            return Err(Error::Config(format!(
                "data.resize {}x{} not divisible by 2^(model.levels-1) = {div}",
                self.resize.0, self.resize.1
            )));
        }
        crate::diffusion::build_schedule(self.schedule_kind, self.t_d, self.beta_start, self.beta_end)?;
        Ok(())
    }

    pub fn dataset_spec(&self, split: Split) -> DatasetSpec {
        let mut spec = DatasetSpec::new(&self.data_root);
        spec.segment_length = self.segment_length;
        spec.resize_to = self.resize;
        spec.channels = self.channels;
        spec.split = split;
        spec.seed = self.data_seed;
        spec
    }

    /// Mask configuration with the curriculum horizon tied to the epoch count.
    pub fn mask_config(&self) -> MaskConfig {
        MaskConfig {
            p_r: self.p_r,
            p_m: self.p_m,
            p_min: self.p_min,
            p_max: self.p_max,
            e_max: self.epochs.max(1),
            ramp: self.ramp,
            fill: self.fill,
            constant_value: self.constant_value,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            channels: self.channels,
            base_channels: self.base_channels,
            levels: self.levels,
            heads: self.heads,
            time_embed_dim: self.time_embed_dim,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_mse: self.lambda_mse,
            lambda_l1: self.lambda_l1,
            lambda_perc: self.lambda_perc,
            lambda_lpips: self.lambda_lpips,
            lambda_diff: 1.0,
        }
    }

    /// Canonical text form: every key, fixed order, `Display` floats.
    /// Parsing this text reproduces the configuration exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("data.channels", self.channels.to_string());
        kv("data.resize", format!("{}x{}", self.resize.0, self.resize.1));
        kv("data.root", self.data_root.display().to_string());
        kv("data.seed", self.data_seed.to_string());
        kv("data.segment_length", self.segment_length.to_string());
        kv("diffusion.T_d", self.t_d.to_string());
        kv("diffusion.beta_end", self.beta_end.to_string());
        kv("diffusion.beta_start", self.beta_start.to_string());
        kv("diffusion.kind", self.schedule_kind.to_string());
        kv("diffusion.sigma_mode", self.sigma_mode.to_string());
        kv("loss.adaptive_ramp", self.adaptive_ramp.to_string());
        kv("loss.backend", self.backend.to_string());
        kv("loss.lambda_l1", self.lambda_l1.to_string());
        kv("loss.lambda_lpips", self.lambda_lpips.to_string());
        kv("loss.lambda_mse", self.lambda_mse.to_string());
        kv("loss.lambda_perc", self.lambda_perc.to_string());
        kv(
            "mask.constant_value",
            self.constant_value.to_string(),
        );
        kv(
            "mask.fill",
            match self.fill {
                Fill::GaussianNoise => "gaussian_noise".to_string(),
                Fill::Constant => "constant".to_string(),
            },
        );
        kv("mask.p_m", self.p_m.to_string());
        kv("mask.p_max", self.p_max.to_string());
        kv("mask.p_min", self.p_min.to_string());
        kv("mask.p_r", self.p_r.to_string());
        kv(
            "mask.ramp",
            match self.ramp {
                Ramp::Linear => "linear".to_string(),
                Ramp::Cosine => "cosine".to_string(),
            },
        );
        kv("model.base_channels", self.base_channels.to_string());
        kv("model.heads", self.heads.to_string());
        kv("model.levels", self.levels.to_string());
        kv("model.time_embed_dim", self.time_embed_dim.to_string());
        kv("train.batch_size", self.batch_size.to_string());
        kv("train.beta1", self.beta1.to_string());
        kv("train.beta2", self.beta2.to_string());
        kv("train.checkpoint_every", self.checkpoint_every.to_string());
        kv("train.epochs", self.epochs.to_string());
        kv("train.grad_clip", self.grad_clip.to_string());
        kv("train.lr", self.lr.to_string());
        kv("train.lr_schedule", self.lr_schedule.to_string());
        kv("train.max_steps", self.max_steps.to_string());
        kv("train.out_dir", self.out_dir.display().to_string());
        kv("train.seed", self.seed.to_string());
        s
    }

    /// Parse the flat key-value text. Unknown keys, malformed lines, and
    /// malformed values are all [`Error::Config`].
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainingConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`, got `{raw}`", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            apply_key(&mut cfg, key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse `{value}`: {e}")))
}

fn apply_key(cfg: &mut TrainingConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "data.root" => cfg.data_root = PathBuf::from(value),
        "data.segment_length" => cfg.segment_length = parse_num(key, value)?,
        "data.resize" => {
            let (h, w) = value
                .split_once(['x', 'X'])
                .ok_or_else(|| Error::Config(format!("{key}: expected HxW, got `{value}`")))?;
            cfg.resize = (parse_num(key, h.trim())?, parse_num(key, w.trim())?);
        }
        "data.channels" => cfg.channels = parse_num(key, value)?,
        "data.seed" => cfg.data_seed = parse_num(key, value)?,
        "mask.p_r" => cfg.p_r = parse_num(key, value)?,
        "mask.p_m" => cfg.p_m = parse_num(key, value)?,
        "mask.p_min" => cfg.p_min = parse_num(key, value)?,
        "mask.p_max" => cfg.p_max = parse_num(key, value)?,
        "mask.ramp" => {
            cfg.ramp = match value {
                "linear" => Ramp::Linear,
                "cosine" => Ramp::Cosine,
                _ => return Err(Error::Config(format!("{key}: unknown ramp `{value}`"))),
            }
        }
        "mask.fill" => {
            cfg.fill = match value {
                "gaussian_noise" => Fill::GaussianNoise,
                "constant" => Fill::Constant,
                _ => return Err(Error::Config(format!("{key}: unknown fill `{value}`"))),
            }
        }
        "mask.constant_value" => cfg.constant_value = parse_num(key, value)?,
        "diffusion.T_d" => cfg.t_d = parse_num(key, value)?,
        "diffusion.beta_start" => cfg.beta_start = parse_num(key, value)?,
        "diffusion.beta_end" => cfg.beta_end = parse_num(key, value)?,
        "diffusion.kind" => {
            cfg.schedule_kind = match value {
                "linear" => ScheduleKind::Linear,
                "cosine" => ScheduleKind::Cosine,
                _ => return Err(Error::Config(format!("{key}: unknown kind `{value}`"))),
            }
        }
        "diffusion.sigma_mode" => {
            cfg.sigma_mode = match value {
                "posterior" => SigmaMode::Posterior,
                "zero" => SigmaMode::Zero,
                _ => return Err(Error::Config(format!("{key}: unknown sigma mode `{value}`"))),
            }
        }
        "model.base_channels" => cfg.base_channels = parse_num(key, value)?,
        "model.levels" => cfg.levels = parse_num(key, value)?,
        "model.heads" => cfg.heads = parse_num(key, value)?,
        "model.time_embed_dim" => cfg.time_embed_dim = parse_num(key, value)?,
        "loss.lambda_mse" => cfg.lambda_mse = parse_num(key, value)?,
        "loss.lambda_l1" => cfg.lambda_l1 = parse_num(key, value)?,
        "loss.lambda_perc" => cfg.lambda_perc = parse_num(key, value)?,
        "loss.lambda_lpips" => cfg.lambda_lpips = parse_num(key, value)?,
        "loss.adaptive_ramp" => {
            cfg.adaptive_ramp = match value {
                "true" => true,
                "false" => false,
                _ => return Err(Error::Config(format!("{key}: expected true/false, got `{value}`"))),
            }
        }
        "loss.backend" => {
            cfg.backend = match value {
                "conv_pyramid" => BackendKind::ConvPyramid,
                _ => return Err(Error::Config(format!("{key}: unknown backend `{value}`"))),
            }
        }
        "train.epochs" => cfg.epochs = parse_num(key, value)?,
        "train.batch_size" => cfg.batch_size = parse_num(key, value)?,
        "train.lr" => cfg.lr = parse_num(key, value)?,
        "train.beta1" => cfg.beta1 = parse_num(key, value)?,
        "train.beta2" => cfg.beta2 = parse_num(key, value)?,
        "train.lr_schedule" => {
            cfg.lr_schedule = match value {
                "constant" => LrSchedule::Constant,
                "cosine_anneal" => LrSchedule::CosineAnneal,
                _ => return Err(Error::Config(format!("{key}: unknown schedule `{value}`"))),
            }
        }
        "train.seed" => cfg.seed = parse_num(key, value)?,
        "train.checkpoint_every" => cfg.checkpoint_every = parse_num(key, value)?,
        "train.grad_clip" => cfg.grad_clip = parse_num(key, value)?,
        "train.max_steps" => cfg.max_steps = parse_num(key, value)?,
        "train.out_dir" => cfg.out_dir = PathBuf::from(value),
        _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roundtrip_is_exact() {
        let mut cfg = TrainingConfig::default();
        cfg.lr = 3.2e-3;
        cfg.resize = (32, 48);
        cfg.schedule_kind = ScheduleKind::Cosine;
        cfg.fill = Fill::Constant;
        cfg.constant_value = 0.25;
        let text = cfg.to_text();
        let parsed = TrainingConfig::from_text(&text).unwrap();
        assert_eq!(cfg, parsed);
        assert_eq!(text, parsed.to_text(), "serialization must be canonical");
    }

    #[test]
    fn unknown_keys_are_errors() {
        let err = TrainingConfig::from_text("train.warp_speed = 9\n").unwrap_err();
        match err {
            Error::Config(msg) => assert!(msg.contains("train.warp_speed"), "message: {msg}"),
            other => panic!("expected ConfigError, got {other:?}"),
        }
    }

    #[test]
    fn comments_and_blanks_skipped() {
        let cfg = TrainingConfig::from_text("# comment\n\ntrain.lr = 0.01\n").unwrap();
        assert_eq!(cfg.lr, 0.01);
    }

    #[test]
    fn malformed_values_are_errors() {
        assert!(TrainingConfig::from_text("train.lr = fast\n").is_err());
        assert!(TrainingConfig::from_text("data.resize = 64\n").is_err());
        assert!(TrainingConfig::from_text("just nonsense\n").is_err());
    }

    #[test]
    fn default_config_validates() {
        TrainingConfig::default().validate().unwrap();
    }

    #[test]
    fn invalid_combinations_rejected() {
        let mut cfg = TrainingConfig::default();
        cfg.resize = (30, 30); // not divisible by 2^(levels-1)=4
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = TrainingConfig::default();
        cfg.lr = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainingConfig::default();
        cfg.p_min = 0.9;
        cfg.p_max = 0.1;
        assert!(cfg.validate().is_err());
    }
}
