//! Rolling-shutter pinhole camera, IMU measurement types and noise model.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::SensorError;

/// Minimum depth accepted by [`PinholeIntrinsics::project`].
pub const MIN_DEPTH: f64 = 1e-6;

/// Gravity in the world frame. The accelerometer measures `R^T (a + g)`.
pub const GRAVITY: Vector3<f64> = Vector3::new(0.0, 0.0, 9.8);

/// Undistorted pinhole intrinsics. `height` is the number of image rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PinholeIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: f64,
    pub height: f64,
}

impl PinholeIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: f64, height: f64) -> Result<Self, SensorError> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), SensorError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(SensorError::Invalid("focal lengths must be positive".into()));
        }
        if !(self.cx > 0.0 && self.cx < self.width && self.cy > 0.0 && self.cy < self.height) {
            return Err(SensorError::Invalid("principal point must lie inside the image".into()));
        }
        Ok(())
    }

    /// Pixel to the normalized image plane, `((u - cx)/fx, (v - cy)/fy, 1)`.
    #[inline]
    pub fn back_project(&self, pixel: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((pixel.x - self.cx) / self.fx, (pixel.y - self.cy) / self.fy, 1.0)
    }

    pub fn project(&self, p: &Vector3<f64>) -> Result<Vector2<f64>, SensorError> {
        if p.z <= MIN_DEPTH {
            return Err(SensorError::Cheirality(p.z));
        }
        Ok(Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0 && pixel.x < self.width && pixel.y >= 0.0 && pixel.y < self.height
    }
}

/// Exposure time of image row `row` (zero-based, measured from the top of the
/// image, fractional rows used as-is) for a frame stamped at its first row.
pub fn row_time(frame_time: f64, row: f64, line_delay: f64, height: f64) -> Result<f64, SensorError> {
    if !(row >= 0.0 && row < height) {
        return Err(SensorError::RowOutOfRange { row, height });
    }
    Ok(frame_time + row * line_delay)
}

/// Constant time between the exposure of two adjacent rows, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct LineDelay(f64);

impl LineDelay {
    pub fn new(seconds: f64) -> Result<Self, SensorError> {
        if !(seconds >= 0.0 && seconds.is_finite()) {
            return Err(SensorError::Invalid(format!("line delay {seconds} must be nonnegative")));
        }
        Ok(Self(seconds))
    }

    pub fn from_micros(us: f64) -> Result<Self, SensorError> {
        Self::new(us * 1e-6)
    }

    pub fn seconds(self) -> f64 {
        self.0
    }

    pub fn micros(self) -> f64 {
        self.0 * 1e6
    }

    /// Checks that the full readout `height * t_r` finishes before the next frame.
    pub fn check_readout(self, height: f64, frame_period: f64) -> Result<(), SensorError> {
        if self.0 * height >= frame_period {
            return Err(SensorError::Invalid(format!(
                "readout time {:.6} s exceeds frame period {:.6} s",
                self.0 * height,
                frame_period
            )));
        }
        Ok(())
    }
}

/// Continuous-time IMU noise densities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImuNoiseModel {
    /// rad/s/sqrt(Hz)
    pub gyro_noise_density: f64,
    /// m/s^2/sqrt(Hz)
    pub accel_noise_density: f64,
    /// rad/s^2/sqrt(Hz)
    pub gyro_bias_walk: f64,
    /// m/s^3/sqrt(Hz)
    pub accel_bias_walk: f64,
    /// Hz
    pub rate: f64,
}

impl Default for ImuNoiseModel {
    fn default() -> Self {
        Self {
            gyro_noise_density: 1.7e-4,
            accel_noise_density: 2.0e-3,
            gyro_bias_walk: 2.0e-5,
            accel_bias_walk: 3.0e-3,
            rate: 90.0,
        }
    }
}

impl ImuNoiseModel {
    pub fn validate(&self) -> Result<(), SensorError> {
        let all = [
            self.gyro_noise_density,
            self.accel_noise_density,
            self.gyro_bias_walk,
            self.accel_bias_walk,
        ];
        if all.iter().any(|v| !(*v >= 0.0)) || !(self.rate > 0.0) {
            return Err(SensorError::Invalid("noise densities must be >= 0 and rate > 0".into()));
        }
        Ok(())
    }

    /// Standard deviation of one discrete gyro sample.
    pub fn gyro_sample_sigma(&self) -> f64 {
        self.gyro_noise_density * self.rate.sqrt()
    }

    pub fn accel_sample_sigma(&self) -> f64 {
        self.accel_noise_density * self.rate.sqrt()
    }
}

/// One raw IMU measurement in the body frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    pub gyro: Vector3<f64>,
    pub accel: Vector3<f64>,
}

impl ImuSample {
    pub fn new(t: f64, gyro: Vector3<f64>, accel: Vector3<f64>) -> Self {
        Self { t, gyro, accel }
    }

    /// Linear interpolation between two samples.
    pub fn lerp(a: &ImuSample, b: &ImuSample, t: f64) -> ImuSample {
        let span = b.t - a.t;
        let s = if span > 0.0 { (t - a.t) / span } else { 0.0 };
        ImuSample {
            t,
            gyro: a.gyro + (b.gyro - a.gyro) * s,
            accel: a.accel + (b.accel - a.accel) * s,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BiasPair {
    pub gyro: Vector3<f64>,
    pub accel: Vector3<f64>,
}

impl BiasPair {
    pub fn new(gyro: Vector3<f64>, accel: Vector3<f64>) -> Self {
        Self { gyro, accel }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn intr() -> PinholeIntrinsics {
        PinholeIntrinsics::new(400.0, 400.0, 320.0, 240.0, 640.0, 480.0).unwrap()
    }

    #[test]
    fn back_project_examples() {
        let k = intr();
        assert_eq!(k.back_project(&Vector2::new(320.0, 240.0)), Vector3::new(0.0, 0.0, 1.0));
        assert_eq!(k.back_project(&Vector2::new(720.0, 240.0)), Vector3::new(1.0, 0.0, 1.0));
    }

    #[test]
    fn project_examples() {
        let k = intr();
        assert_eq!(k.project(&Vector3::new(0.0, 0.0, 1.0)).unwrap(), Vector2::new(320.0, 240.0));
        assert_eq!(k.project(&Vector3::new(1.0, 0.0, 1.0)).unwrap().x, 720.0);
        assert!(matches!(k.project(&Vector3::new(0.0, 0.0, 0.0)), Err(SensorError::Cheirality(_))));
    }

    #[test]
    fn project_inverts_back_project() {
        let k = intr();
        for (u, v, d) in [(12.5, 400.25, 0.3), (600.0, 3.0, 17.0), (320.0, 240.0, 1.0)] {
            let px = Vector2::new(u, v);
            let p = k.project(&(k.back_project(&px) * d)).unwrap();
            assert!((p - px).norm() < 1e-12);
        }
    }

    #[test]
    fn row_time_examples() {
        let t = row_time(10.0, 240.0, 69.44e-6, 480.0).unwrap();
        assert!((t - 10.0166656).abs() < 1e-12);
        assert_eq!(row_time(10.0, 240.0, 0.0, 480.0).unwrap(), 10.0);
        assert_eq!(row_time(10.0, 0.0, 69.44e-6, 480.0).unwrap(), 10.0);
        assert!(row_time(10.0, 480.0, 69.44e-6, 480.0).is_err());
        assert!(row_time(10.0, -0.5, 69.44e-6, 480.0).is_err());
    }

    #[test]
    fn row_time_is_affine_in_line_delay() {
        let v = 123.75;
        let a = row_time(1.0, v, 1e-5, 480.0).unwrap();
        let b = row_time(1.0, v, 2e-5, 480.0).unwrap();
        assert!(((b - a) / 1e-5 - v).abs() < 1e-6);
    }

    #[test]
    fn invalid_intrinsics_rejected() {
        assert!(PinholeIntrinsics::new(-1.0, 400.0, 320.0, 240.0, 640.0, 480.0).is_err());
        assert!(PinholeIntrinsics::new(400.0, 400.0, 700.0, 240.0, 640.0, 480.0).is_err());
    }

    #[test]
    fn line_delay_readout_check() {
        let tr = LineDelay::from_micros(69.44).unwrap();
        assert!(tr.check_readout(480.0, 1.0 / 30.0).is_ok());
        assert!(LineDelay::from_micros(100.0).unwrap().check_readout(480.0, 1.0 / 30.0).is_err());
        assert!(LineDelay::new(-1e-6).is_err());
    }
}
