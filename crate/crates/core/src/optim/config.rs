use serde::{Deserialize, Serialize};

use super::loss::LossWeights;
use crate::appearance::DEFAULT_WAVELET_DIM;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    /// Initial means rate, multiplied by the scene extent.
    pub means: f64,
    /// Final means rate after exponential decay, same units.
    pub means_final: f64,
    pub scales: f64,
    pub rotations: f64,
    pub opacities: f64,
    pub sh: f64,
    pub wavelet_weights: f64,
    pub wavelet_scales: f64,
    pub wavelet_translations: f64,
    pub pose_deltas: f64,
    pub eps: f64,
    pub wavelet_eps: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            means: 1.6e-4,
            means_final: 1.6e-6,
            scales: 5e-3,
            rotations: 1e-3,
            opacities: 5e-2,
            sh: 2.5e-3,
            wavelet_weights: 2.5e-3,
            wavelet_scales: 1e-3,
            wavelet_translations: 1e-3,
            pose_deltas: 1e-4,
            eps: 1e-15,
            wavelet_eps: 1e-15,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensityConfig {
    pub enabled: bool,
    /// Iterations between density-control passes.
    pub interval: u32,
    pub start: u32,
    pub stop: u32,
    /// Mean NDC positional-gradient norm above which a Gaussian densifies.
    pub grad_threshold: f64,
    /// Clone below, split above this fraction of the scene extent.
    pub percent_dense: f64,
    pub min_opacity: f64,
    pub split_scale_divisor: f64,
    /// Per-node ceiling on the Gaussian count after densification.
    pub max_gaussians: usize,
}

impl Default for DensityConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            interval: 100,
            start: 500,
            stop: 15_000,
            grad_threshold: 2e-4,
            percent_dense: 0.01,
            min_opacity: 0.005,
            split_scale_divisor: 1.6,
            max_gaussians: 1_000_000,
        }
    }
}

/// Appearance model used for object nodes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectAppearance {
    #[default]
    Wavelet,
    /// Plain SH without time dependence (the control setting).
    Static,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: u32,
    pub seed: u64,
    /// Fraction of frames used for training: 0.25, 0.5, 0.75 or 1.0.
    pub split: f64,
    pub loss: LossWeights,
    pub lr: LearningRates,
    pub density: DensityConfig,
    pub sh_degree: u8,
    pub object_sh_degree: u8,
    pub wavelet_dim: usize,
    pub object_appearance: ObjectAppearance,
    pub pose_refinement: bool,
    pub background: [f64; 3],
    pub tile_size: u32,
    /// Iterations between held-out evaluations (0: only at the end).
    pub eval_every: u32,
    /// Iterations between checkpoints (0: only at the end).
    pub checkpoint_every: u32,
    /// Voxel sizes used when initializing from LiDAR.
    pub background_voxel: f64,
    pub object_voxel: f64,
    pub box_margin: f64,
    /// Points placed in an object's box when it has no LiDAR returns.
    pub empty_object_points: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 30_000,
            seed: 0,
            split: 0.75,
            loss: LossWeights::default(),
            lr: LearningRates::default(),
            density: DensityConfig::default(),
            sh_degree: 3,
            object_sh_degree: 1,
            wavelet_dim: DEFAULT_WAVELET_DIM,
            object_appearance: ObjectAppearance::Wavelet,
            pose_refinement: false,
            background: [0.0; 3],
            tile_size: 16,
            eval_every: 1000,
            checkpoint_every: 0,
            background_voxel: 0.15,
            object_voxel: 0.05,
            box_margin: 0.1,
            empty_object_points: 500,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be positive".into()));
        }
        if ![0.25, 0.5, 0.75, 1.0].contains(&self.split) {
            return Err(Error::Config(format!(
                "split must be one of 0.25, 0.5, 0.75, 1.0, got {}",
                self.split
            )));
        }
        if self.sh_degree > 3 || self.object_sh_degree > 3 {
            return Err(Error::Config("SH degree must be at most 3".into()));
        }
        if self.wavelet_dim == 0 {
            return Err(Error::Config(
                "wavelet_dim must be at least 1; use object_appearance = \"static\" for plain SH".into(),
            ));
        }
        if self.tile_size == 0 {
            return Err(Error::Config("tile_size must be positive".into()));
        }
        if !(self.density.split_scale_divisor > 1.0) {
            return Err(Error::Config("split_scale_divisor must exceed 1".into()));
        }
        if !(self.background_voxel > 0.0) || !(self.object_voxel > 0.0) || !(self.box_margin >= 0.0) {
            return Err(Error::Config("voxel sizes must be positive and box_margin non-negative".into()));
        }
        Ok(())
    }
}
