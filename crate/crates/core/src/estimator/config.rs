use serde::{Deserialize, Serialize};

use crate::error::EstimatorError;
use crate::sensors::ImuNoiseModel;

/// How the oldest keyframe's IMU information is folded into the prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MargStrategy {
    /// One preintegration factor over the first inter-keyframe interval.
    Preintegrated,
    /// The raw per-sample IMU factors of that interval.
    RawImu,
}

impl MargStrategy {
    pub fn from_number(n: u8) -> Result<Self, EstimatorError> {
        match n {
            1 => Ok(Self::Preintegrated),
            2 => Ok(Self::RawImu),
            _ => Err(EstimatorError::Contract(format!("marginalization strategy must be 1 or 2, got {n}"))),
        }
    }

    pub fn number(self) -> u8 {
        match self {
            Self::Preintegrated => 1,
            Self::RawImu => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    /// Seed from ground truth (optionally perturbed).
    Oracle,
    /// Gyro bias and gravity from a static prefix, then dead reckoning.
    Coarse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    /// Knot spacing of the spline, seconds.
    pub knot_interval: f64,
    /// Maximum number of frames in the window.
    pub window_size: usize,
    pub max_features: usize,
    /// Isotropic pixel noise, pixels.
    pub pixel_sigma: f64,
    /// Huber threshold on whitened visual residuals; 0 disables.
    pub huber_threshold: f64,
    /// Mean parallax to the last keyframe above which a frame is a keyframe, pixels.
    pub keyframe_parallax: f64,
    /// Fewer tracked features than this also makes a keyframe.
    pub min_tracks: usize,
    /// 1 or 2.
    pub marginalization_strategy: u8,
    pub estimate_line_delay: bool,
    pub line_delay_init_us: f64,
    /// Minimum ray angle for triangulation, degrees.
    pub min_parallax_deg: f64,
    pub min_depth: f64,
    pub max_depth: f64,
    pub gravity: [f64; 3],
    pub imu_noise: ImuNoiseModel,
    pub init_mode: InitMode,
    /// Length of the ground-truth fit that seeds the spline in oracle mode, seconds.
    pub oracle_fit_duration: f64,
    /// Perturbation of the oracle poses, radians and meters.
    pub oracle_rotation_sigma: f64,
    pub oracle_position_sigma: f64,
    /// Bias the estimator starts from.
    pub initial_gyro_bias: [f64; 3],
    pub initial_accel_bias: [f64; 3],
    /// Strength of the initial prior on the first segment and first biases.
    pub prior_rotation_sigma: f64,
    pub prior_position_sigma: f64,
    pub prior_gyro_bias_sigma: f64,
    pub prior_accel_bias_sigma: f64,
    /// Coarse mode: thresholds of the static detector.
    pub static_gyro_threshold: f64,
    pub static_accel_threshold: f64,
    pub min_static_duration: f64,
    pub seed: u64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            knot_interval: 0.03,
            window_size: 11,
            max_features: 150,
            pixel_sigma: 1.0,
            huber_threshold: 1.0,
            keyframe_parallax: 10.0,
            min_tracks: 20,
            marginalization_strategy: 1,
            estimate_line_delay: true,
            line_delay_init_us: 0.0,
            min_parallax_deg: 1.0,
            min_depth: 0.1,
            max_depth: 1000.0,
            gravity: [0.0, 0.0, 9.8],
            imu_noise: ImuNoiseModel::default(),
            init_mode: InitMode::Oracle,
            oracle_fit_duration: 0.5,
            oracle_rotation_sigma: 0.0,
            oracle_position_sigma: 0.0,
            initial_gyro_bias: [0.0; 3],
            initial_accel_bias: [0.0; 3],
            prior_rotation_sigma: 1e-3,
            prior_position_sigma: 1e-3,
            prior_gyro_bias_sigma: 1e-2,
            prior_accel_bias_sigma: 1e-1,
            static_gyro_threshold: 0.02,
            static_accel_threshold: 0.2,
            min_static_duration: 0.5,
            seed: 0,
        }
    }
}

impl EstimatorConfig {
    pub fn strategy(&self) -> Result<MargStrategy, EstimatorError> {
        MargStrategy::from_number(self.marginalization_strategy)
    }

    pub fn validate(&self) -> Result<(), EstimatorError> {
        let bad = |m: &str| Err(EstimatorError::Contract(m.to_string()));
        if !(self.knot_interval > 0.0) {
            return bad("knot_interval must be positive");
        }
        if self.window_size < 4 {
            return bad("window_size must be at least 4");
        }
        if !(self.pixel_sigma > 0.0) {
            return bad("pixel_sigma must be positive");
        }
        if !(self.line_delay_init_us >= 0.0) {
            return bad("line_delay_init_us must be nonnegative");
        }
        if !(self.min_depth > 0.0 && self.max_depth > self.min_depth) {
            return bad("depth limits must satisfy 0 < min_depth < max_depth");
        }
        let sigmas = [
            self.prior_rotation_sigma,
            self.prior_position_sigma,
            self.prior_gyro_bias_sigma,
            self.prior_accel_bias_sigma,
        ];
        if sigmas.iter().any(|s| !(*s > 0.0)) {
            return bad("prior sigmas must be positive");
        }
        self.imu_noise.validate().map_err(|e| EstimatorError::Contract(e.to_string()))?;
        let n = &self.imu_noise;
        if [n.gyro_noise_density, n.accel_noise_density, n.gyro_bias_walk, n.accel_bias_walk].iter().any(|v| *v <= 0.0) {
            return bad("estimator noise densities must be positive");
        }
        self.strategy().map(|_| ())
    }
}
