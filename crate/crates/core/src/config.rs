//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key has a
//! default; unknown or repeated keys are rejected. The config hash is the
//! first 16 hex digits of the SHA-256 of the canonical text (all keys,
//! sorted, one `key=value` per line).

use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("config key {key:?}: cannot parse {value:?} ({msg})")]
    BadValue {
        key: String,
        value: String,
        msg: String,
    },
    #[error("config line {0}: expected key = value")]
    Syntax(usize),
    #[error("config key {0:?} given twice")]
    Duplicate(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

trait ConfigValue: Sized {
    fn parse(s: &str) -> Result<Self, String>;
    fn render(&self) -> String;
}

macro_rules! scalar_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse(s: &str) -> Result<Self, String> {
                s.parse().map_err(|e| format!("{e}"))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
scalar_value!(usize, u64, f64, String);

impl ConfigValue for bool {
    fn parse(s: &str) -> Result<Self, String> {
        match s {
            "on" | "true" | "1" => Ok(true),
            "off" | "false" | "0" => Ok(false),
            _ => Err("expected on/off".into()),
        }
    }
    fn render(&self) -> String {
        if *self { "on" } else { "off" }.into()
    }
}

impl ConfigValue for Vec<usize> {
    fn parse(s: &str) -> Result<Self, String> {
        s.split(',')
            .map(|p| p.trim().parse().map_err(|e| format!("{e}")))
            .collect()
    }
    fn render(&self) -> String {
        let parts: Vec<String> = self.iter().map(|v| v.to_string()).collect();
        parts.join(",")
    }
}

macro_rules! config_keys {
    ($($(#[doc = $doc:literal])* $name:ident : $ty:ty = $default:expr,)*) => {
        /// Every tunable of a run, with desk-scale defaults.
        #[derive(Clone, Debug, PartialEq)]
        pub struct Config {
            $($(#[doc = $doc])* pub $name: $ty,)*
        }

        impl Default for Config {
            fn default() -> Self {
                Self { $($name: $default,)* }
            }
        }

        impl Config {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($name)),*];

            pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
                let bad = |msg| ConfigError::BadValue {
                    key: key.into(),
                    value: value.into(),
                    msg,
                };
                match key {
                    $(stringify!($name) => self.$name = ConfigValue::parse(value).map_err(bad)?,)*
                    _ => return Err(ConfigError::UnknownKey(key.into())),
                }
                Ok(())
            }

            /// Every key with its rendered value, in declaration order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($name), ConfigValue::render(&self.$name)),)*]
            }
        }
    };
}

config_keys! {
    /// Master seed; every stochastic component derives from it.
    seed: u64 = 0,
    /// Dataset directory.
    dataset: String = "data".to_string(),
    /// Square image side in pixels.
    resolution: usize = 64,
    /// Focal length divided by image width.
    focal_ratio: f64 = 1.4375,
    ring_radius: f64 = 3.0,
    ring_height: f64 = 0.0,
    train_subjects: usize = 4,
    test_subjects: usize = 2,
    poses: usize = 4,
    views: usize = 8,
    /// Channels of the stride-2 encoder blocks; their sum is the learned
    /// part of the 2D feature map.
    encoder_widths: Vec<usize> = vec![16, 16, 16, 16],
    style_dim: usize = 64,
    mapping_layers: usize = 2,
    /// Tri-plane channels F.
    plane_channels: usize = 32,
    /// Tri-plane resolution R (4·2^k).
    plane_res: usize = 64,
    /// Width of the style-modulated plane decoder.
    plane_width: usize = 32,
    /// Voxels per axis (odd).
    voxel_grid: usize = 31,
    /// Point-level feature dimension D.
    point_dim: usize = 32,
    sparse_layers: usize = 4,
    /// Token channels C.
    token_channels: usize = 32,
    heads: usize = 3,
    /// Per-head width; 0 means token_channels / heads.
    head_dim: usize = 16,
    /// `concat` or `mean`.
    fusion_reduce: String = "concat".to_string(),
    decoder_width: usize = 128,
    decoder_depth: usize = 4,
    pe_points: usize = 10,
    pe_rgb: usize = 4,
    /// Meters from the nearest canonical vertex beyond which a sample is gated.
    gate_threshold: f64 = 0.05,
    /// Pre-activation density assigned to gated samples.
    gate_sigma: f64 = -80.0,
    /// Multiplier on the decoder's density output.
    sigma_scale: f64 = 10.0,
    samples_per_ray: usize = 48,
    /// Inflation of the posed body box bounding each ray (meters).
    aabb_margin: f64 = 0.1,
    lambda_mask: f64 = 0.1,
    lambda_ssim: f64 = 0.01,
    lambda_perc: f64 = 0.01,
    perc_seed: u64 = 1234,
    perc_filters: usize = 16,
    perc_scales: usize = 3,
    lr: f64 = 2e-3,
    lr_decay: f64 = 0.5,
    epochs: usize = 5,
    adam_beta1: f64 = 0.9,
    adam_beta2: f64 = 0.999,
    adam_eps: f64 = 1e-8,
    rays_per_batch: usize = 512,
    /// Side of the square ray patch used by the SSIM and perceptual terms.
    patch_size: usize = 16,
    /// Share of the scattered rays drawn from inside the target mask.
    interior_fraction: f64 = 0.25,
    /// Stop after this many steps (0 = run all epochs).
    max_steps: usize = 0,
    /// Stratified jitter of ray samples during training.
    jitter: bool = true,
}

impl Config {
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Config::default();
        let mut seen = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax(i + 1))?;
            let (k, v) = (k.trim(), v.trim());
            if seen.iter().any(|s| s == k) {
                return Err(ConfigError::Duplicate(k.into()));
            }
            cfg.set(k, v)?;
            seen.push(k.to_string());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_text(&text)
    }

    /// All keys, sorted, one `key=value` per line.
    pub fn canonical_text(&self) -> String {
        let mut e = self.entries();
        e.sort_by(|a, b| a.0.cmp(b.0));
        e.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_text().as_bytes());
        hex::encode(digest)[..16].to_string()
    }

    pub fn focal(&self) -> f64 {
        self.focal_ratio * self.resolution as f64
    }

    /// Learned 2D feature channels plus the RGB encoding block.
    pub fn map_channels(&self) -> usize {
        self.encoder_widths.iter().sum::<usize>() + self.rgb_channels()
    }

    /// Width of the RGB block appended to the 2D feature map:
    /// posenc(RGB), raw RGB, then the validity bit repeated up to a
    /// multiple of 8.
    pub fn rgb_channels(&self) -> usize {
        let base = 6 * self.pe_rgb + 3;
        base.div_ceil(8) * 8
    }

    pub fn resolved_head_dim(&self) -> usize {
        if self.head_dim == 0 {
            self.token_channels / self.heads.max(1)
        } else {
            self.head_dim
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.resolution < 16 {
            return fail("resolution must be at least 16");
        }
        if self.patch_size < 11 || self.patch_size > self.resolution {
            return fail("patch_size must lie in [11, resolution]");
        }
        if self.rays_per_batch < self.patch_size * self.patch_size {
            return fail("rays_per_batch must cover the patch");
        }
        if self.plane_res < 4 || !(self.plane_res / 4).is_power_of_two() || self.plane_res % 4 != 0 {
            return fail("plane_res must be 4·2^k");
        }
        if self.voxel_grid < 3 || self.voxel_grid % 2 == 0 {
            return fail("voxel_grid must be odd and at least 3");
        }
        if self.heads == 0 {
            return fail("heads must be positive");
        }
        if self.head_dim == 0 && self.token_channels % self.heads != 0 {
            return fail("token_channels must be divisible by heads when head_dim = 0");
        }
        if !matches!(self.fusion_reduce.as_str(), "concat" | "mean") {
            return fail("fusion_reduce must be concat or mean");
        }
        if self.encoder_widths.is_empty() || self.encoder_widths.contains(&0) {
            return fail("encoder_widths must be nonempty and positive");
        }
        if self.samples_per_ray == 0 || self.epochs == 0 || self.decoder_depth == 0 {
            return fail("samples_per_ray, epochs and decoder_depth must be positive");
        }
        if [self.lambda_mask, self.lambda_ssim, self.lambda_perc]
            .iter()
            .any(|&l| l < 0.0)
        {
            return fail("loss weights must be nonnegative");
        }
        if !(0.0..=1.0).contains(&self.interior_fraction) {
            return fail("interior_fraction must lie in [0, 1]");
        }
        if self.train_subjects + self.test_subjects == 0 || self.poses == 0 || self.views == 0 {
            return fail("dataset counts must be positive");
        }
        if self.mapping_layers == 0 || self.sparse_layers == 0 || self.perc_scales == 0 {
            return fail("layer counts must be positive");
        }
        Ok(())
    }
}
