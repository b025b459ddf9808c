//! Run configuration: a flat key = value text format with typed parsing,
//! strict unknown-key rejection, and an emitter whose output parses back to
//! the identical config (the `--out` template and the checkpoint snapshot
//! both rely on that round trip).

use std::fmt::Write as _;

use crate::distill::{total_steps_for, DistillConfig, MaskConfig, TargetConfig};
use crate::encoder::{Activation, EncoderConfig};
use crate::error::{Error, Result};
use crate::heads::default_probe_every;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    // model
    pub width: usize,
    pub num_blocks: usize,
    pub kernel_size: usize,
    pub dropout: f64,
    pub init_scale: f64,
    pub activation: Activation,
    pub batch_norm: bool,
    // masking and targets
    pub mask_prob: f64,
    pub max_block_frac: f64,
    pub min_block_len: usize,
    pub target_layers: usize,
    pub layer_norm_targets: bool,
    pub num_students: usize,
    pub smooth_l1_beta: f64,
    // optimization
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub batch_size: usize,
    pub steps_per_kilostep: u64,
    /// 0 derives the budget from the data volume
    pub total_steps: u64,
    pub ema_start: f64,
    pub ema_end: f64,
    // data handling
    pub normalize: bool,
    pub crop_window: usize,
    pub forecast_context: usize,
    pub probe_horizon: usize,
    // probing and safety rails
    /// 0 picks a cadence from the step budget
    pub probe_every: u64,
    pub collapse_threshold: f64,
    pub collapse_patience: u32,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            width: 320,
            num_blocks: 7,
            kernel_size: 3,
            dropout: 0.1,
            // sub-unit residual-branch init: the stack starts near-identity,
            // which both stabilizes short runs and keeps an untrained encoder
            // from scoring spuriously well on frequency-discrimination probes
            init_scale: 0.7,
            activation: Activation::Gelu,
            batch_norm: true,
            mask_prob: 0.5,
            max_block_frac: 0.1,
            min_block_len: 1,
            target_layers: 7,
            layer_norm_targets: true,
            num_students: 3,
            smooth_l1_beta: 1.0,
            lr: 1e-3,
            weight_decay: 1e-4,
            warmup_frac: 0.1,
            batch_size: 8,
            steps_per_kilostep: 600,
            total_steps: 0,
            ema_start: 0.9996,
            ema_end: 0.99996,
            normalize: true,
            crop_window: 1024,
            forecast_context: 200,
            probe_horizon: 24,
            probe_every: 0,
            collapse_threshold: 1e-4,
            collapse_patience: 50,
        }
    }
}

fn bad(key: &str, value: &str, want: &str) -> Error {
    Error::Config(format!("key {key:?}: cannot read {value:?} as {want}"))
}

macro_rules! setter {
    ($cfg:ident, $key:ident, $value:ident, $($name:ident : $ty:tt),+ $(,)?) => {
        match $key {
            $(stringify!($name) => {
                $cfg.$name = setter!(@parse $key, $value, $ty)?;
            })+
            other => {
                return Err(Error::Config(format!("unknown config key {other:?}")));
            }
        }
    };
    (@parse $key:ident, $value:ident, bool) => {
        match $value {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(bad($key, $value, "a bool (true/false)")),
        }
    };
    (@parse $key:ident, $value:ident, activation) => {
        match $value {
            "gelu" => Ok(Activation::Gelu),
            "relu" => Ok(Activation::Relu),
            _ => Err(bad($key, $value, "an activation (gelu/relu)")),
        }
    };
    (@parse $key:ident, $value:ident, $ty:ty) => {
        $value.parse::<$ty>().map_err(|_| bad($key, $value, stringify!($ty)))
    };
}

impl RunConfig {
    /// Parses the flat format; keys not present keep their defaults, keys
    /// not known are errors, and so are duplicates.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seen = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected key = value, got {line:?}",
                    lineno + 1
                ))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if seen.contains(&key.to_string()) {
                return Err(Error::Config(format!("duplicate config key {key:?}")));
            }
            seen.push(key.to_string());
            setter!(cfg, key, value,
                seed: u64,
                width: usize,
                num_blocks: usize,
                kernel_size: usize,
                dropout: f64,
                init_scale: f64,
                activation: activation,
                batch_norm: bool,
                mask_prob: f64,
                max_block_frac: f64,
                min_block_len: usize,
                target_layers: usize,
                layer_norm_targets: bool,
                num_students: usize,
                smooth_l1_beta: f64,
                lr: f64,
                weight_decay: f64,
                warmup_frac: f64,
                batch_size: usize,
                steps_per_kilostep: u64,
                total_steps: u64,
                ema_start: f64,
                ema_end: f64,
                normalize: bool,
                crop_window: usize,
                forecast_context: usize,
                probe_horizon: usize,
                probe_every: u64,
                collapse_threshold: f64,
                collapse_patience: u32,
            );
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key in parse order; `parse(emit(c)) == c` for any valid config.
    pub fn emit(&self) -> String {
        let mut s = String::new();
        let act = match self.activation {
            Activation::Gelu => "gelu",
            Activation::Relu => "relu",
            Activation::Identity => unreachable!("run configs never carry identity"),
        };
        let _ = write!(
            s,
            "# run configuration (key = value; # starts a comment)\n\
             seed = {}\n\
             \n# model\n\
             width = {}\nnum_blocks = {}\nkernel_size = {}\ndropout = {}\n\
             init_scale = {}\nactivation = {act}\nbatch_norm = {}\n\
             \n# masking and targets\n\
             mask_prob = {}\nmax_block_frac = {}\nmin_block_len = {}\n\
             target_layers = {}\nlayer_norm_targets = {}\nnum_students = {}\n\
             smooth_l1_beta = {}\n\
             \n# optimization\n\
             lr = {}\nweight_decay = {}\nwarmup_frac = {}\nbatch_size = {}\n\
             steps_per_kilostep = {}\ntotal_steps = {}\nema_start = {}\nema_end = {}\n\
             \n# data handling\n\
             normalize = {}\ncrop_window = {}\nforecast_context = {}\nprobe_horizon = {}\n\
             \n# probing and safety rails\n\
             probe_every = {}\ncollapse_threshold = {}\ncollapse_patience = {}\n",
            self.seed,
            self.width,
            self.num_blocks,
            self.kernel_size,
            self.dropout,
            self.init_scale,
            self.batch_norm,
            self.mask_prob,
            self.max_block_frac,
            self.min_block_len,
            self.target_layers,
            self.layer_norm_targets,
            self.num_students,
            self.smooth_l1_beta,
            self.lr,
            self.weight_decay,
            self.warmup_frac,
            self.batch_size,
            self.steps_per_kilostep,
            self.total_steps,
            self.ema_start,
            self.ema_end,
            self.normalize,
            self.crop_window,
            self.forecast_context,
            self.probe_horizon,
            self.probe_every,
            self.collapse_threshold,
            self.collapse_patience,
        );
        s
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Config(msg));
        if self.width == 0 || self.num_blocks == 0 {
            return err("width and num_blocks must be >= 1".into());
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return err(format!("kernel_size must be odd, got {}", self.kernel_size));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if !self.init_scale.is_finite() || self.init_scale < 0.0 {
            return err(format!("init_scale must be >= 0, got {}", self.init_scale));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return err(format!("mask_prob must be in [0, 1], got {}", self.mask_prob));
        }
        if !(self.max_block_frac > 0.0 && self.max_block_frac <= 1.0) {
            return err(format!(
                "max_block_frac must be in (0, 1], got {}",
                self.max_block_frac
            ));
        }
        if self.min_block_len == 0 {
            return err("min_block_len must be >= 1".into());
        }
        if self.target_layers == 0 || self.target_layers > self.num_blocks {
            return err(format!(
                "target_layers must be in 1..={}, got {}",
                self.num_blocks, self.target_layers
            ));
        }
        if self.num_students == 0 {
            return err("num_students must be >= 1".into());
        }
        if self.smooth_l1_beta <= 0.0 {
            return err(format!("smooth_l1_beta must be > 0, got {}", self.smooth_l1_beta));
        }
        if self.lr <= 0.0 {
            return err(format!("lr must be > 0, got {}", self.lr));
        }
        if self.weight_decay < 0.0 {
            return err(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return err(format!(
                "warmup_frac must be in (0, 1), got {}",
                self.warmup_frac
            ));
        }
        if self.batch_size == 0 {
            return err("batch_size must be >= 1".into());
        }
        if self.total_steps == 0 && self.steps_per_kilostep == 0 {
            return err("steps_per_kilostep must be >= 1 when total_steps is derived".into());
        }
        if !(0.0..=1.0).contains(&self.ema_start)
            || !(0.0..=1.0).contains(&self.ema_end)
            || self.ema_start > self.ema_end
        {
            return err(format!(
                "need 0 <= ema_start <= ema_end <= 1, got {}..{}",
                self.ema_start, self.ema_end
            ));
        }
        if self.crop_window == 0 || self.forecast_context == 0 || self.probe_horizon == 0 {
            return err("crop_window, forecast_context, probe_horizon must be >= 1".into());
        }
        if self.collapse_threshold <= 0.0 {
            return err(format!(
                "collapse_threshold must be > 0, got {}",
                self.collapse_threshold
            ));
        }
        if self.collapse_patience == 0 {
            return err("collapse_patience must be >= 1".into());
        }
        Ok(())
    }

    pub fn encoder_config(&self, in_channels: usize) -> EncoderConfig {
        EncoderConfig {
            in_channels,
            width: self.width,
            num_blocks: self.num_blocks,
            kernel_size: self.kernel_size,
            dropout_rate: self.dropout,
            init_scale: self.init_scale,
            activation: self.activation,
            batch_norm: self.batch_norm,
        }
    }

    pub fn distill_config(&self, total_steps: u64) -> DistillConfig {
        DistillConfig {
            mask: MaskConfig {
                mask_prob: self.mask_prob,
                max_block_frac: self.max_block_frac,
                min_block_len: self.min_block_len,
            },
            target: TargetConfig {
                num_layers: self.target_layers,
                layer_norm: self.layer_norm_targets,
            },
            num_students: self.num_students,
            smooth_l1_beta: self.smooth_l1_beta,
            weight_decay: self.weight_decay,
            max_lr: self.lr,
            warmup_frac: self.warmup_frac,
            total_steps,
            ema_start: self.ema_start,
            ema_end: self.ema_end,
        }
    }

    /// Step budget: the explicit override, or the per-kilotimestep rate.
    pub fn resolve_total_steps(&self, series_length: usize) -> u64 {
        if self.total_steps > 0 {
            self.total_steps
        } else {
            total_steps_for(series_length, self.steps_per_kilostep)
        }
    }

    pub fn resolve_probe_every(&self, total_steps: u64) -> u64 {
        if self.probe_every > 0 {
            self.probe_every
        } else {
            default_probe_every(total_steps)
        }
    }
}
