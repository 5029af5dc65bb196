//! Run configuration, read from a flat `key = value` TOML file.
//!
//! Every key is optional; missing keys take the defaults below. Unknown keys
//! are rejected so typos surface as validation errors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, SatelliteMeta};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Seed for parameter init, scene generation and batch order.
    pub seed: u64,
    /// Force fixed summation order everywhere (single worker thread).
    pub deterministic: bool,

    // Image geometry.
    pub sat_size: usize,
    /// Satellite ground resolution at full resolution, meters per pixel.
    pub sat_alpha: f64,
    pub ground_width: usize,
    pub ground_height: usize,
    /// Focal length in full-resolution ground pixels (both axes).
    pub focal: f64,
    /// Row of the principal point; `None` means `ground_height / 2`.
    pub horizon_row: Option<f64>,
    pub cam_height: f64,
    /// Report azimuths clockwise-positive at the file/CLI boundary.
    pub azimuth_clockwise: bool,

    // Scene rendering.
    /// Rays hitting the ground farther than this render as fog.
    pub render_range_m: f64,
    /// Number of elevated blocks per scene (0 = planar scenes).
    pub blocks: usize,

    // Network shape.
    /// Feature channels per pyramid level, coarse (1/8) → fine (1/2).
    pub pyramid_channels: [usize; 3],
    /// Column radius of the cross-attention candidate pool.
    pub radius: usize,
    pub heads: usize,
    /// Window side of the optimizer's windowed attention.
    pub window: usize,
    pub optimizer_hidden: usize,
    /// Per-update bounds of the optimizer output head.
    pub max_step_deg: f64,
    pub max_step_m: f64,
    /// Bypass the learned encoders and use raw pixels as features.
    pub identity_encoder: bool,

    // Refinement and correlation.
    pub levels: usize,
    pub iterations: usize,
    /// Side length of the square translation search window, meters.
    pub search_range_m: f64,
    /// Side of the synthesized template used for correlation, meters.
    pub template_m: f64,
    pub use_uncertainty: bool,
    /// Refine the correlation maximum with a per-axis parabola.
    pub subpixel_peak: bool,

    // Noise envelope of prior poses.
    pub noise_theta_deg: f64,
    pub noise_t_m: f64,

    // Training.
    pub gamma: f64,
    pub lambda1_init: f64,
    pub lambda2_init: f64,
    pub lr_start: f64,
    pub lr_end: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Hard cap on optimizer steps; `0` means `epochs * ceil(n / batch)`.
    pub max_steps: usize,
    pub train_samples: usize,
    /// Keep the translation terms of the pose loss.
    pub translation_supervision: bool,
    /// Use the sign convention exactly as printed for the location loss.
    pub literal_triplet_sign: bool,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 7,
            deterministic: false,
            sat_size: 512,
            sat_alpha: 0.2,
            ground_width: 1024,
            ground_height: 256,
            focal: 512.0,
            horizon_row: None,
            cam_height: 1.65,
            azimuth_clockwise: false,
            render_range_m: 100.0,
            blocks: 0,
            pyramid_channels: [128, 64, 32],
            radius: 1,
            heads: 4,
            window: 4,
            optimizer_hidden: 64,
            max_step_deg: 45.0,
            max_step_m: 10.0,
            identity_encoder: false,
            levels: 3,
            iterations: 2,
            search_range_m: 40.0,
            template_m: 40.0,
            use_uncertainty: true,
            subpixel_peak: false,
            noise_theta_deg: 20.0,
            noise_t_m: 20.0,
            gamma: 10.0,
            lambda1_init: -5.0,
            lambda2_init: -3.0,
            lr_start: 1e-4,
            lr_end: 1e-5,
            batch_size: 3,
            epochs: 5,
            max_steps: 0,
            train_samples: 16,
            translation_supervision: true,
            literal_triplet_sign: false,
        }
    }
}

impl Config {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let s = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::Config(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn camera(&self) -> Result<CameraModel> {
        CameraModel::new(
            self.focal,
            self.focal,
            self.ground_width as f64 / 2.0,
            self.horizon_row.unwrap_or(self.ground_height as f64 / 2.0),
            self.ground_width,
            self.ground_height,
            self.cam_height,
        )
    }

    pub fn satellite(&self) -> Result<SatelliteMeta> {
        SatelliteMeta::centered(self.sat_alpha, self.sat_size)
    }

    /// Downsampling exponents of the refinement levels, coarse → fine.
    pub fn level_exponents(&self) -> Vec<usize> {
        [3, 2, 1].into_iter().take(self.levels).collect()
    }

    /// Channels at a downsampling exponent (3, 2 or 1).
    pub fn channels_at(&self, exp: usize) -> usize {
        self.pyramid_channels[3 - exp]
    }

    /// Exponent of the level used for correlation.
    pub fn correlation_level(&self) -> usize {
        if self.identity_encoder {
            0
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.sat_size == 0 || self.sat_size % 8 != 0 {
            return fail(format!("sat_size {} must be a positive multiple of 8", self.sat_size));
        }
        if self.ground_width % 8 != 0 || self.ground_height % 8 != 0 || self.ground_width == 0 || self.ground_height == 0 {
            return fail(format!(
                "ground image {}x{} must be a positive multiple of 8",
                self.ground_width, self.ground_height
            ));
        }
        if !(self.sat_alpha > 0.0 && self.focal > 0.0 && self.cam_height > 0.0) {
            return fail("sat_alpha, focal and cam_height must be positive".into());
        }
        if !(1..=3).contains(&self.levels) {
            return fail(format!("levels must be 1..=3, got {}", self.levels));
        }
        if self.iterations == 0 {
            return fail("iterations must be at least 1".into());
        }
        if self.heads == 0 || self.pyramid_channels.iter().any(|c| *c == 0 || c % self.heads != 0) {
            return fail(format!(
                "pyramid channels {:?} must be positive multiples of heads = {}",
                self.pyramid_channels, self.heads
            ));
        }
        if self.radius > self.ground_width / 8 {
            return fail(format!(
                "radius {} exceeds the coarse ground feature width {}",
                self.radius,
                self.ground_width / 8
            ));
        }
        if self.window == 0 {
            return fail("window must be positive".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(self.search_range_m > 0.0 && self.template_m > 0.0) {
            return fail("search_range_m and template_m must be positive".into());
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0) {
            return fail("learning rates must be positive".into());
        }
        self.camera()?;
        self.satellite()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        Config::default().validate().unwrap();
    }

    #[test]
    fn partial_file_overrides_defaults() {
        let cfg = Config::from_toml_str("seed = 3\nradius = 2\npyramid_channels = [16, 8, 8]\nheads = 2\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.radius, 2);
        assert_eq!(cfg.channels_at(3), 16);
        assert_eq!(cfg.channels_at(1), 8);
        assert_eq!(cfg.gamma, 10.0);
    }

    #[test]
    fn unknown_keys_and_bad_values_fail() {
        assert!(Config::from_toml_str("sedd = 3").is_err());
        assert!(Config::from_toml_str("radius = 1000").is_err());
        assert!(Config::from_toml_str("sat_size = 100").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = Config {
            seed: 99,
            ..Config::default()
        };
        assert_eq!(Config::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);
    }
}
