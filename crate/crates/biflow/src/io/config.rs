//! Experiment configuration: line-based `key = value` text with validated
//! ranges and canonical re-serialization.

use crate::error::{Error, Result};

/// Every knob an experiment needs, with defaults favoring the published
/// training recipe where one exists and desk-scale sizes elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    // dataset
    pub dataset: String,
    pub n_samples: usize,
    pub eval_samples: usize,
    pub patch_size: usize,
    // forward model
    pub blocks: usize,
    pub layers: usize,
    pub width: usize,
    pub attn_heads: usize,
    pub class_tokens: usize,
    pub clip_range: f64,
    pub noise_level: f64,
    // optimization
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub ema_decay: f64,
    pub label_drop: f64,
    // reverse model
    pub strategy: String,
    pub rev_layers: usize,
    pub rev_width: usize,
    pub rev_heads: bool,
    pub rev_epochs: usize,
    pub denoise_block: bool,
    pub adaptive_p: f64,
    pub adaptive_offset: f64,
    pub w_max: f64,
    pub wd_max: f64,
    pub trajectory_norm: String,
    pub metric: String,
    // sampling defaults
    pub cfg_scale: f64,
    pub cfg_schedule: String,
    pub cfg_space: String,
    pub cfg_mode: String,
    pub denoise: String,
    pub sample_w: f64,
    pub sample_wd: f64,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: "two_moons".into(),
            n_samples: 4096,
            eval_samples: 512,
            patch_size: 2,
            blocks: 4,
            layers: 1,
            width: 32,
            attn_heads: 2,
            class_tokens: 1,
            clip_range: 1.0,
            noise_level: 0.3,
            lr: 4e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.95,
            epochs: 40,
            batch_size: 256,
            warmup_epochs: 10,
            ema_decay: 0.9999,
            label_drop: 0.1,
            strategy: "hidden_align".into(),
            rev_layers: 1,
            rev_width: 32,
            rev_heads: true,
            rev_epochs: 40,
            denoise_block: true,
            adaptive_p: 2.0,
            adaptive_offset: 1e-3,
            w_max: 1.0,
            wd_max: 8.0,
            trajectory_norm: "clip_assumed".into(),
            metric: "mse".into(),
            cfg_scale: 0.0,
            cfg_schedule: "linear".into(),
            cfg_space: "param".into(),
            cfg_mode: "online".into(),
            denoise: "score".into(),
            sample_w: 0.0,
            sample_wd: 0.0,
            seed: 0,
        }
    }
}

macro_rules! parse_value {
    ($cfg:expr, $key:expr, $val:expr, $line:expr, { $($name:literal => $field:ident : $ty:tt),+ $(,)? }) => {
        match $key {
            $($name => $cfg.$field = parse_typed!($val, $key, $line, $ty),)+
            other => {
                return Err(Error::Config(format!(
                    "line {}: unknown key '{other}'", $line
                )))
            }
        }
    };
}

macro_rules! parse_typed {
    ($val:expr, $key:expr, $line:expr, usize) => {
        $val.parse::<usize>().map_err(|_| {
            Error::Config(format!("line {}: key '{}' expects an integer", $line, $key))
        })?
    };
    ($val:expr, $key:expr, $line:expr, u64) => {
        $val.parse::<u64>().map_err(|_| {
            Error::Config(format!("line {}: key '{}' expects an integer", $line, $key))
        })?
    };
    ($val:expr, $key:expr, $line:expr, f64) => {
        $val.parse::<f64>().map_err(|_| {
            Error::Config(format!("line {}: key '{}' expects a number", $line, $key))
        })?
    };
    ($val:expr, $key:expr, $line:expr, bool) => {
        match $val {
            "true" | "on" => true,
            "false" | "off" => false,
            _ => {
                return Err(Error::Config(format!(
                    "line {}: key '{}' expects true/false or on/off",
                    $line, $key
                )))
            }
        }
    };
    ($val:expr, $key:expr, $line:expr, String) => {
        $val.to_string()
    };
}

/// Parses `key = value` lines. Empty lines and `#` comments are skipped,
/// unknown keys are rejected with their line number, and every invariant is
/// enforced before the config is returned.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, val) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {line_no}: expected 'key = value'"))
        })?;
        let key = key.trim();
        let val = val.trim();
        parse_value!(cfg, key, val, line_no, {
            "dataset" => dataset: String,
            "n_samples" => n_samples: usize,
            "eval_samples" => eval_samples: usize,
            "patch_size" => patch_size: usize,
            "blocks" => blocks: usize,
            "layers" => layers: usize,
            "width" => width: usize,
            "attn_heads" => attn_heads: usize,
            "class_tokens" => class_tokens: usize,
            "clip_range" => clip_range: f64,
            "noise_level" => noise_level: f64,
            "lr" => lr: f64,
            "adam_beta1" => adam_beta1: f64,
            "adam_beta2" => adam_beta2: f64,
            "epochs" => epochs: usize,
            "batch_size" => batch_size: usize,
            "warmup_epochs" => warmup_epochs: usize,
            "ema_decay" => ema_decay: f64,
            "label_drop" => label_drop: f64,
            "strategy" => strategy: String,
            "rev_layers" => rev_layers: usize,
            "rev_width" => rev_width: usize,
            "rev_heads" => rev_heads: bool,
            "rev_epochs" => rev_epochs: usize,
            "denoise_block" => denoise_block: bool,
            "adaptive_p" => adaptive_p: f64,
            "adaptive_offset" => adaptive_offset: f64,
            "w_max" => w_max: f64,
            "wd_max" => wd_max: f64,
            "trajectory_norm" => trajectory_norm: String,
            "metric" => metric: String,
            "cfg_scale" => cfg_scale: f64,
            "cfg_schedule" => cfg_schedule: String,
            "cfg_space" => cfg_space: String,
            "cfg_mode" => cfg_mode: String,
            "denoise" => denoise: String,
            "sample_w" => sample_w: f64,
            "sample_wd" => sample_wd: f64,
            "seed" => seed: u64,
        });
    }
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let rate = |name: &str, v: f64| -> Result<()> {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("key '{name}' must lie in [0, 1]")));
            }
            Ok(())
        };
        rate("label_drop", self.label_drop)?;
        rate("ema_decay", self.ema_decay)?;
        rate("adam_beta1", self.adam_beta1)?;
        rate("adam_beta2", self.adam_beta2)?;
        let positive_size = |name: &str, v: usize| -> Result<()> {
            if v == 0 {
                return Err(Error::Config(format!("key '{name}' must be >= 1")));
            }
            Ok(())
        };
        positive_size("n_samples", self.n_samples)?;
        positive_size("eval_samples", self.eval_samples)?;
        positive_size("blocks", self.blocks)?;
        positive_size("layers", self.layers)?;
        positive_size("width", self.width)?;
        positive_size("attn_heads", self.attn_heads)?;
        positive_size("class_tokens", self.class_tokens)?;
        positive_size("batch_size", self.batch_size)?;
        positive_size("rev_layers", self.rev_layers)?;
        positive_size("rev_width", self.rev_width)?;
        positive_size("patch_size", self.patch_size)?;
        if self.noise_level < 0.0 {
            return Err(Error::Config("key 'noise_level' must be >= 0".into()));
        }
        if self.clip_range <= 0.0 {
            return Err(Error::Config("key 'clip_range' must be > 0".into()));
        }
        if self.adaptive_offset <= 0.0 {
            return Err(Error::Config("key 'adaptive_offset' must be > 0".into()));
        }
        if self.adaptive_p < 0.0 {
            return Err(Error::Config("key 'adaptive_p' must be >= 0".into()));
        }
        if self.w_max < 0.0 || self.wd_max < 0.0 || self.cfg_scale < 0.0 {
            return Err(Error::Config("guidance scales must be >= 0".into()));
        }
        if self.sample_w < 0.0 || self.sample_wd < 0.0 {
            return Err(Error::Config("sampling guidance scales must be >= 0".into()));
        }
        crate::reverse::Strategy::parse(&self.strategy)?;
        crate::reverse::TrajectoryNorm::parse(&self.trajectory_norm)?;
        match self.cfg_schedule.as_str() {
            "linear" | "const" => {}
            other => {
                return Err(Error::Config(format!(
                    "key 'cfg_schedule' must be linear|const, got '{other}'"
                )))
            }
        }
        match self.cfg_space.as_str() {
            "param" | "pixel" => {}
            other => {
                return Err(Error::Config(format!(
                    "key 'cfg_space' must be param|pixel, got '{other}'"
                )))
            }
        }
        match self.cfg_mode.as_str() {
            "online" | "offline" => {}
            other => {
                return Err(Error::Config(format!(
                    "key 'cfg_mode' must be online|offline, got '{other}'"
                )))
            }
        }
        match self.denoise.as_str() {
            "score" | "none" => {}
            other => {
                return Err(Error::Config(format!(
                    "key 'denoise' must be score|none, got '{other}'"
                )))
            }
        }
        let _ = self.layout()?;
        Ok(())
    }

    /// `(tokens, dim, classes)` implied by the dataset choice.
    pub fn layout(&self) -> Result<(usize, usize, usize)> {
        match self.dataset.as_str() {
            "two_moons" | "checkerboard" => Ok((2, 1, 2)),
            "gauss_grid" => Ok((2, 1, 9)),
            "tiny_digits" => {
                if self.patch_size == 0 || 8 % self.patch_size != 0 {
                    return Err(Error::Config("patch_size must divide 8".into()));
                }
                let side = 8 / self.patch_size;
                Ok((side * side, self.patch_size * self.patch_size, 10))
            }
            other => Err(Error::Config(format!("unknown dataset '{other}'"))),
        }
    }

    /// `BIFLOW_SEED` overrides the configured seed when set.
    pub fn apply_env_overrides(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var("BIFLOW_SEED") {
            self.seed = v
                .parse()
                .map_err(|_| Error::Config("BIFLOW_SEED must be an integer".into()))?;
        }
        Ok(())
    }

    /// Canonical serialization: every key, fixed order. Parsing it back gives
    /// an identical config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("dataset", self.dataset.clone());
        kv("n_samples", self.n_samples.to_string());
        kv("eval_samples", self.eval_samples.to_string());
        kv("patch_size", self.patch_size.to_string());
        kv("blocks", self.blocks.to_string());
        kv("layers", self.layers.to_string());
        kv("width", self.width.to_string());
        kv("attn_heads", self.attn_heads.to_string());
        kv("class_tokens", self.class_tokens.to_string());
        kv("clip_range", self.clip_range.to_string());
        kv("noise_level", self.noise_level.to_string());
        kv("lr", self.lr.to_string());
        kv("adam_beta1", self.adam_beta1.to_string());
        kv("adam_beta2", self.adam_beta2.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("warmup_epochs", self.warmup_epochs.to_string());
        kv("ema_decay", self.ema_decay.to_string());
        kv("label_drop", self.label_drop.to_string());
        kv("strategy", self.strategy.clone());
        kv("rev_layers", self.rev_layers.to_string());
        kv("rev_width", self.rev_width.to_string());
        kv("rev_heads", if self.rev_heads { "on" } else { "off" }.into());
        kv("rev_epochs", self.rev_epochs.to_string());
        kv(
            "denoise_block",
            if self.denoise_block { "true" } else { "false" }.into(),
        );
        kv("adaptive_p", self.adaptive_p.to_string());
        kv("adaptive_offset", self.adaptive_offset.to_string());
        kv("w_max", self.w_max.to_string());
        kv("wd_max", self.wd_max.to_string());
        kv("trajectory_norm", self.trajectory_norm.clone());
        kv("metric", self.metric.clone());
        kv("cfg_scale", self.cfg_scale.to_string());
        kv("cfg_schedule", self.cfg_schedule.clone());
        kv("cfg_space", self.cfg_space.clone());
        kv("cfg_mode", self.cfg_mode.clone());
        kv("denoise", self.denoise.clone());
        kv("sample_w", self.sample_w.to_string());
        kv("sample_wd", self.sample_wd.to_string());
        kv("seed", self.seed.to_string());
        s
    }

    pub fn flow_config(&self) -> Result<crate::flow::FlowConfig> {
        let (tokens, dim, classes) = self.layout()?;
        Ok(crate::flow::FlowConfig {
            blocks: self.blocks,
            tokens,
            dim,
            layers: self.layers,
            width: self.width,
            heads: self.attn_heads,
            class_tokens: self.class_tokens,
            classes,
            clip: self.clip_range,
            sigma: self.noise_level,
        })
    }

    pub fn reverse_config(&self) -> Result<crate::reverse::ReverseConfig> {
        use crate::reverse::{HiddenMode, ReverseConfig, Strategy};
        let fwd = self.flow_config()?;
        let strategy = Strategy::parse(&self.strategy)?;
        let hidden_mode = if strategy == Strategy::HiddenDistill || !self.rev_heads {
            HiddenMode::InputSpace
        } else {
            HiddenMode::Hidden
        };
        Ok(ReverseConfig::from_forward(
            &fwd,
            self.rev_layers,
            self.rev_width,
            self.attn_heads,
            hidden_mode,
            self.denoise_block,
        ))
    }

    pub fn guidance_spec(&self) -> crate::inverse::GuidanceSpec {
        use crate::inverse::{Mode, Schedule, Space};
        crate::inverse::GuidanceSpec {
            scale: self.cfg_scale,
            schedule: if self.cfg_schedule == "const" {
                Schedule::Constant
            } else {
                Schedule::Linear
            },
            space: if self.cfg_space == "pixel" {
                Space::Pixel
            } else {
                Space::Parameter
            },
            mode: if self.cfg_mode == "offline" {
                Mode::Offline
            } else {
                Mode::Online
            },
            denoise_scale: self.sample_wd,
        }
    }
}
