//! Training configuration: `key = value` text files with `#` comments.
//!
//! Every key can also be set from the command line under the same name, and
//! unknown keys are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::densify::{DensifyConfig, Policy};
use crate::error::{Error, Result};
use crate::gaussian::Rgb;
use crate::optim::{ExpDecay, LearningRates};
use crate::raster::{LossKind, RasterConfig};
use crate::stats::GcrMode;
use crate::targets::{TargetKind, TargetSpec};

/// Units of the positional gradients fed to the densification statistics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GradUnits {
    /// Gradient with respect to the mean in pixels.
    #[default]
    Pixel,
    /// Gradient with respect to the mean in normalized device coordinates, `[-1, 1]` across the image.
    Ndc,
}

impl GradUnits {
    pub fn name(self) -> &'static str {
        match self {
            GradUnits::Pixel => "pixel",
            GradUnits::Ndc => "ndc",
        }
    }

    /// Per-axis factor from pixel gradients to these units.
    pub fn scale(self, width: usize, height: usize) -> [f64; 2] {
        match self {
            GradUnits::Pixel => [1.0, 1.0],
            GradUnits::Ndc => [width as f64 / 2.0, height as f64 / 2.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// PPM file to fit; when unset the synthetic target below is generated.
    pub target: Option<PathBuf>,
    pub target_kind: TargetKind,
    pub width: usize,
    pub height: usize,
    pub target_seed: u64,

    pub iterations: u64,
    pub n0: usize,
    pub seed: u64,
    pub loss: LossKind,
    pub background: Rgb,

    pub policy: Policy,
    pub densify_interval: u64,
    pub densify_start: u64,
    pub densify_stop: u64,
    pub weight_alpha: f64,
    pub weight_beta: f64,
    pub weight_p: f64,
    pub tau_p: f64,
    /// Size threshold as a fraction of the image extent.
    pub percent_dense: f64,
    pub split_factor: f64,
    pub opacity_prune_threshold: f64,
    /// Pruning limit on the larger standard deviation, as a fraction of the image extent.
    pub max_scale_fraction: f64,
    pub gcr_mode: GcrMode,
    pub grad_units: GradUnits,
    pub opacity_reset: bool,
    pub opacity_reset_interval: u64,
    pub opacity_reset_value: f64,

    /// Position rates are multiplied by the image extent.
    pub lr_position_init: f64,
    pub lr_position_final: f64,
    pub lr_scale: f64,
    pub lr_rotation: f64,
    pub lr_opacity: f64,
    pub lr_color: f64,

    pub contrib_cutoff: f64,
    pub min_transmittance: f64,
    pub footprint_sigmas: f64,
    pub parallel: bool,

    /// Write a snapshot render every this many iterations; 0 disables.
    pub snapshot_every: u64,
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            target: None,
            target_kind: TargetKind::Mixed,
            width: 128,
            height: 128,
            target_seed: 0,
            iterations: 5000,
            n0: 50,
            seed: 0,
            loss: LossKind::L1,
            background: [0.0; 3],
            policy: Policy::Gdags,
            densify_interval: 50,
            densify_start: 250,
            densify_stop: 2500,
            weight_alpha: 0.8,
            weight_beta: 25.0,
            weight_p: 15.0,
            tau_p: 2e-4,
            percent_dense: 0.01,
            split_factor: 1.6,
            opacity_prune_threshold: 0.005,
            max_scale_fraction: 0.5,
            gcr_mode: GcrMode::Global,
            grad_units: GradUnits::Pixel,
            opacity_reset: true,
            opacity_reset_interval: 500,
            opacity_reset_value: 0.01,
            lr_position_init: 1.6e-4,
            lr_position_final: 1.6e-6,
            lr_scale: 5e-3,
            lr_rotation: 1e-3,
            lr_opacity: 0.05,
            lr_color: 2.5e-3,
            contrib_cutoff: 1.0 / 255.0,
            min_transmittance: 1e-4,
            footprint_sigmas: 3.0,
            parallel: true,
            snapshot_every: 0,
            out_dir: None,
        }
    }
}

pub const KEYS: &[&str] = &[
    "target",
    "target_kind",
    "width",
    "height",
    "target_seed",
    "iterations",
    "n0",
    "seed",
    "loss",
    "background",
    "policy",
    "densify_interval",
    "densify_start",
    "densify_stop",
    "weight_alpha",
    "weight_beta",
    "weight_p",
    "tau_p",
    "percent_dense",
    "split_factor",
    "opacity_prune_threshold",
    "max_scale_fraction",
    "gcr_mode",
    "grad_units",
    "opacity_reset",
    "opacity_reset_interval",
    "opacity_reset_value",
    "lr_position_init",
    "lr_position_final",
    "lr_scale",
    "lr_rotation",
    "lr_opacity",
    "lr_color",
    "contrib_cutoff",
    "min_transmittance",
    "footprint_sigmas",
    "parallel",
    "snapshot_every",
    "out_dir",
];

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

fn rgb(key: &str, value: &str) -> Result<Rgb> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!("{key}: expected r,g,b, got {value:?}")));
    }
    Ok([num(key, parts[0])?, num(key, parts[1])?, num(key, parts[2])?])
}

fn gcr_mode_name(m: GcrMode) -> &'static str {
    match m {
        GcrMode::Global => "global",
        GcrMode::PerViewMean => "per_view",
    }
}

impl TrainConfig {
    /// Normalizes `--some-key` / `some-key` spellings to `some_key`.
    pub fn normalize_key(key: &str) -> String {
        key.trim().trim_start_matches("--").replace('-', "_")
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = Self::normalize_key(key);
        let v = value.trim();
        match key.as_str() {
            "target" => self.target = (!v.is_empty()).then(|| PathBuf::from(v)),
            "target_kind" => self.target_kind = v.parse()?,
            "width" => self.width = num(&key, v)?,
            "height" => self.height = num(&key, v)?,
            "target_seed" => self.target_seed = num(&key, v)?,
            "iterations" => self.iterations = num(&key, v)?,
            "n0" => self.n0 = num(&key, v)?,
            "seed" => self.seed = num(&key, v)?,
            "loss" => self.loss = v.parse().map_err(Error::Config)?,
            "background" => self.background = rgb(&key, v)?,
            "policy" => self.policy = v.parse()?,
            "densify_interval" => self.densify_interval = num(&key, v)?,
            "densify_start" => self.densify_start = num(&key, v)?,
            "densify_stop" => self.densify_stop = num(&key, v)?,
            "weight_alpha" => self.weight_alpha = num(&key, v)?,
            "weight_beta" => self.weight_beta = num(&key, v)?,
            "weight_p" => self.weight_p = num(&key, v)?,
            "tau_p" => self.tau_p = num(&key, v)?,
            "percent_dense" => self.percent_dense = num(&key, v)?,
            "split_factor" => self.split_factor = num(&key, v)?,
            "opacity_prune_threshold" => self.opacity_prune_threshold = num(&key, v)?,
            "max_scale_fraction" => self.max_scale_fraction = num(&key, v)?,
            "gcr_mode" => {
                self.gcr_mode = match v {
                    "global" => GcrMode::Global,
                    "per_view" | "per-view" => GcrMode::PerViewMean,
                    _ => return Err(Error::Config(format!("gcr_mode: expected global or per_view, got {v:?}"))),
                }
            }
            "grad_units" => {
                self.grad_units = match v {
                    "pixel" => GradUnits::Pixel,
                    "ndc" => GradUnits::Ndc,
                    _ => return Err(Error::Config(format!("grad_units: expected pixel or ndc, got {v:?}"))),
                }
            }
            "opacity_reset" => self.opacity_reset = flag(&key, v)?,
            "opacity_reset_interval" => self.opacity_reset_interval = num(&key, v)?,
            "opacity_reset_value" => self.opacity_reset_value = num(&key, v)?,
            "lr_position_init" => self.lr_position_init = num(&key, v)?,
            "lr_position_final" => self.lr_position_final = num(&key, v)?,
            "lr_scale" => self.lr_scale = num(&key, v)?,
            "lr_rotation" => self.lr_rotation = num(&key, v)?,
            "lr_opacity" => self.lr_opacity = num(&key, v)?,
            "lr_color" => self.lr_color = num(&key, v)?,
            "contrib_cutoff" => self.contrib_cutoff = num(&key, v)?,
            "min_transmittance" => self.min_transmittance = num(&key, v)?,
            "footprint_sigmas" => self.footprint_sigmas = num(&key, v)?,
            "parallel" => self.parallel = flag(&key, v)?,
            "snapshot_every" => self.snapshot_every = num(&key, v)?,
            "out_dir" => self.out_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a config file body on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {raw:?}", n + 1)))?;
            self.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io("reading config", path, e))?;
        let mut cfg = TrainConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Every key except `out_dir`, in declaration order; used as the config echo.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let b = self.background;
        vec![
            ("target", self.target.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
            ("target_kind", self.target_kind.name().to_string()),
            ("width", self.width.to_string()),
            ("height", self.height.to_string()),
            ("target_seed", self.target_seed.to_string()),
            ("iterations", self.iterations.to_string()),
            ("n0", self.n0.to_string()),
            ("seed", self.seed.to_string()),
            ("loss", self.loss.name().to_string()),
            ("background", format!("{},{},{}", b[0], b[1], b[2])),
            ("policy", self.policy.name().to_string()),
            ("densify_interval", self.densify_interval.to_string()),
            ("densify_start", self.densify_start.to_string()),
            ("densify_stop", self.densify_stop.to_string()),
            ("weight_alpha", self.weight_alpha.to_string()),
            ("weight_beta", self.weight_beta.to_string()),
            ("weight_p", self.weight_p.to_string()),
            ("tau_p", self.tau_p.to_string()),
            ("percent_dense", self.percent_dense.to_string()),
            ("split_factor", self.split_factor.to_string()),
            ("opacity_prune_threshold", self.opacity_prune_threshold.to_string()),
            ("max_scale_fraction", self.max_scale_fraction.to_string()),
            ("gcr_mode", gcr_mode_name(self.gcr_mode).to_string()),
            ("grad_units", self.grad_units.name().to_string()),
            ("opacity_reset", self.opacity_reset.to_string()),
            ("opacity_reset_interval", self.opacity_reset_interval.to_string()),
            ("opacity_reset_value", self.opacity_reset_value.to_string()),
            ("lr_position_init", self.lr_position_init.to_string()),
            ("lr_position_final", self.lr_position_final.to_string()),
            ("lr_scale", self.lr_scale.to_string()),
            ("lr_rotation", self.lr_rotation.to_string()),
            ("lr_opacity", self.lr_opacity.to_string()),
            ("lr_color", self.lr_color.to_string()),
            ("contrib_cutoff", self.contrib_cutoff.to_string()),
            ("min_transmittance", self.min_transmittance.to_string()),
            ("footprint_sigmas", self.footprint_sigmas.to_string()),
            ("parallel", self.parallel.to_string()),
            ("snapshot_every", self.snapshot_every.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(out, "{k} = {v}");
        }
        if let Some(dir) = &self.out_dir {
            let _ = writeln!(out, "out_dir = {}", dir.display());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n0 == 0 {
            return bad("n0 must be >= 1".into());
        }
        if self.densify_interval == 0 {
            return bad("densify_interval must be >= 1".into());
        }
        if self.densify_stop > self.iterations {
            return bad(format!("densify_stop {} exceeds iterations {}", self.densify_stop, self.iterations));
        }
        if self.opacity_reset && self.opacity_reset_interval == 0 {
            return bad("opacity_reset_interval must be >= 1".into());
        }
        if !(self.opacity_reset_value > 0.0 && self.opacity_reset_value < 1.0) {
            return bad("opacity_reset_value must lie in (0, 1)".into());
        }
        if !(self.lr_position_init > 0.0 && self.lr_position_final > 0.0) {
            return bad("position learning rates must be > 0".into());
        }
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return bad("background channels must lie in [0, 1]".into());
        }
        if self.target.is_none() {
            crate::targets::generate(&TargetSpec::new(self.target_kind, 16, 16, 0))?;
            if self.width < crate::targets::MIN_TARGET_SIZE || self.height < crate::targets::MIN_TARGET_SIZE {
                return bad(format!("synthetic targets need at least {} pixels per side", crate::targets::MIN_TARGET_SIZE));
            }
        }
        self.densify_config(self.width.max(self.height) as f64).validate()
    }

    pub fn target_spec(&self) -> TargetSpec {
        TargetSpec::new(self.target_kind, self.width, self.height, self.target_seed)
    }

    pub fn densify_config(&self, extent: f64) -> DensifyConfig {
        DensifyConfig {
            policy: self.policy,
            weight_alpha: self.weight_alpha,
            weight_beta: self.weight_beta,
            weight_p: self.weight_p,
            tau_p: self.tau_p,
            tau_s: self.percent_dense * extent,
            split_factor: self.split_factor,
            opacity_prune_threshold: self.opacity_prune_threshold,
            max_scale_limit: self.max_scale_fraction * extent,
            interval: self.densify_interval,
            start_iteration: self.densify_start,
            stop_iteration: self.densify_stop,
            gcr_mode: self.gcr_mode,
        }
    }

    pub fn learning_rates(&self, extent: f64) -> LearningRates {
        LearningRates {
            position: ExpDecay {
                init: self.lr_position_init * extent,
                end: self.lr_position_final * extent,
                max_steps: self.iterations,
            },
            scale: self.lr_scale,
            rotation: self.lr_rotation,
            opacity: self.lr_opacity,
            color: self.lr_color,
        }
    }

    pub fn raster_config(&self) -> RasterConfig {
        RasterConfig {
            contrib_cutoff: self.contrib_cutoff,
            min_transmittance: self.min_transmittance,
            footprint_sigmas: self.footprint_sigmas,
            parallel: self.parallel,
            ..RasterConfig::default()
        }
    }
}
