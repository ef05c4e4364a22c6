//! Synthetic rolling-shutter VIO data: analytic ground-truth motion, IMU
//! synthesis with bias random walks, and per-row feature projection.

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DatasetMeta, Frame, StampedPose};
use crate::error::SimError;
use crate::lie;
use crate::sensors::{ImuSample, PinholeIntrinsics, GRAVITY};
use crate::spline::{Derivs, RigidTransform, Trajectory};

/// Row fixed point stops once a refinement moves the row by less than this.
pub const ROW_TOLERANCE: f64 = 1e-4;
pub const MAX_ROW_ITERATIONS: usize = 20;
/// Points closer than this to the camera plane are not observed.
pub const MIN_VISIBLE_DEPTH: f64 = 0.1;

/// Ground-truth kinematics at one instant. `omega` is in the body frame,
/// `vel` and `acc` in the world frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthState {
    pub rot: Matrix3<f64>,
    pub pos: Vector3<f64>,
    pub vel: Vector3<f64>,
    pub acc: Vector3<f64>,
    pub omega: Vector3<f64>,
}

/// Anything that can serve as ground-truth motion.
pub trait TruthTrajectory {
    fn state(&self, t: f64) -> Result<TruthState, SimError>;
}

/// A spline used directly as ground truth, so that the estimator's model
/// class contains the truth exactly.
impl TruthTrajectory for Trajectory {
    fn state(&self, t: f64) -> Result<TruthState, SimError> {
        let (start, end) = self.domain();
        let (_, e) = self
            .evaluate(t, Derivs::ValuesOnly)
            .map_err(|_| SimError::OutOfRange { t, duration: end - start })?;
        Ok(TruthState { rot: e.rot, pos: e.pos, vel: e.vel, acc: e.acc, omega: e.omega })
    }
}

/// `amplitude * sin(2 pi frequency t + phase)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sinusoid {
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
}

impl Sinusoid {
    pub fn new(amplitude: f64, frequency: f64, phase: f64) -> Self {
        Self { amplitude, frequency, phase }
    }

    /// Value and first two derivatives.
    fn eval(&self, t: f64) -> [f64; 3] {
        let w = 2.0 * std::f64::consts::PI * self.frequency;
        let (s, c) = (w * t + self.phase).sin_cos();
        [self.amplitude * s, self.amplitude * w * c, -self.amplitude * w * w * s]
    }
}

/// Speed tier; scales every motion frequency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speed {
    Slow,
    Medium,
    Fast,
}

impl Speed {
    pub fn frequency_scale(self) -> f64 {
        match self {
            Speed::Slow => 1.0,
            Speed::Medium => 2.0,
            Speed::Fast => 3.0,
        }
    }
}

/// Position `center + e(t) * sum sinusoids` per axis and orientation
/// `base * Exp(e(t) * sum sinusoids)`, where `e` ramps smoothly from 0 to 1
/// over `[static_prefix, static_prefix + ramp]` so the motion can start
/// from rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyticTrajectory {
    pub center: [f64; 3],
    pub position: [Sinusoid; 3],
    pub rotation: [Sinusoid; 3],
    pub static_prefix: f64,
    pub ramp: f64,
}

impl AnalyticTrajectory {
    /// The base desk-scale motion, frequencies scaled by the speed tier.
    pub fn preset(speed: Speed) -> Self {
        let k = speed.frequency_scale();
        Self {
            center: [0.0; 3],
            position: [
                Sinusoid::new(0.30, 0.20 * k, 0.0),
                Sinusoid::new(0.30, 0.25 * k, 1.3),
                Sinusoid::new(0.15, 0.30 * k, 0.7),
            ],
            rotation: [
                Sinusoid::new(0.25, 0.35 * k, 0.4),
                Sinusoid::new(0.25, 0.30 * k, 2.1),
                Sinusoid::new(0.30, 0.25 * k, 1.0),
            ],
            static_prefix: 0.0,
            ramp: 0.0,
        }
    }

    /// Quintic smoothstep envelope and its derivatives.
    fn envelope(&self, t: f64) -> [f64; 3] {
        if self.ramp <= 0.0 {
            return if t >= self.static_prefix { [1.0, 0.0, 0.0] } else { [0.0; 3] };
        }
        let s = (t - self.static_prefix) / self.ramp;
        if s <= 0.0 {
            return [0.0; 3];
        }
        if s >= 1.0 {
            return [1.0, 0.0, 0.0];
        }
        let r = self.ramp;
        let e = s * s * s * (10.0 - 15.0 * s + 6.0 * s * s);
        let de = 30.0 * s * s * (1.0 - s) * (1.0 - s) / r;
        let dde = 60.0 * s * (1.0 - s) * (1.0 - 2.0 * s) / (r * r);
        [e, de, dde]
    }

    fn axes(&self, waves: &[Sinusoid; 3], t: f64) -> [Vector3<f64>; 3] {
        let [e, de, dde] = self.envelope(t);
        let mut out = [Vector3::zeros(); 3];
        for (i, w) in waves.iter().enumerate() {
            let [f, df, ddf] = w.eval(t);
            out[0][i] = e * f;
            out[1][i] = de * f + e * df;
            out[2][i] = dde * f + 2.0 * de * df + e * ddf;
        }
        out
    }

    /// Peak body angular rate over `[0, duration]`, sampled at 1 kHz.
    pub fn peak_angular_rate(&self, duration: f64) -> f64 {
        (0..=(duration * 1000.0) as usize)
            .map(|i| self.state(i as f64 * 1e-3).map(|s| s.omega.norm()).unwrap_or(0.0))
            .fold(0.0, f64::max)
    }
}

impl TruthTrajectory for AnalyticTrajectory {
    fn state(&self, t: f64) -> Result<TruthState, SimError> {
        if !t.is_finite() {
            return Err(SimError::OutOfRange { t, duration: f64::INFINITY });
        }
        let [p, v, a] = self.axes(&self.position, t);
        let [theta, dtheta, _] = self.axes(&self.rotation, t);
        Ok(TruthState {
            rot: lie::exp(&theta),
            pos: Vector3::from(self.center) + p,
            vel: v,
            acc: a,
            omega: lie::right_jacobian(&theta) * dtheta,
        })
    }
}

/// Noise-free accelerometer and gyro readings for a truth state.
pub fn ideal_imu(state: &TruthState) -> (Vector3<f64>, Vector3<f64>) {
    (state.omega, state.rot.transpose() * (state.acc + GRAVITY))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub duration: f64,
    pub imu_rate: f64,
    pub frame_rate: f64,
    pub line_delay_us: f64,
    pub speed: Speed,
    /// Seconds of rest before the motion ramps in.
    pub static_prefix: f64,
    pub ramp: f64,
    pub landmarks: usize,
    /// Landmark box in the world frame, meters.
    pub landmark_box_min: [f64; 3],
    pub landmark_box_max: [f64; 3],
    pub intrinsics: PinholeIntrinsics,
    pub gyro_noise_density: f64,
    pub accel_noise_density: f64,
    pub gyro_bias_walk: f64,
    pub accel_bias_walk: f64,
    pub initial_gyro_bias: [f64; 3],
    pub initial_accel_bias: [f64; 3],
    pub pixel_sigma: f64,
    /// Frames with fewer visible features than this trigger a warning.
    pub min_tracks: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            duration: 30.0,
            imu_rate: 90.0,
            frame_rate: 30.0,
            line_delay_us: 69.44,
            speed: Speed::Slow,
            static_prefix: 0.0,
            ramp: 0.0,
            landmarks: 300,
            landmark_box_min: [4.0, -6.0, -4.0],
            landmark_box_max: [10.0, 6.0, 4.0],
            intrinsics: PinholeIntrinsics { fx: 450.0, fy: 450.0, cx: 320.0, cy: 240.0, width: 640.0, height: 480.0 },
            gyro_noise_density: 0.0,
            accel_noise_density: 0.0,
            gyro_bias_walk: 0.0,
            accel_bias_walk: 0.0,
            initial_gyro_bias: [0.0; 3],
            initial_accel_bias: [0.0; 3],
            pixel_sigma: 0.0,
            min_tracks: 20,
            seed: 0,
        }
    }
}

impl SimConfig {
    /// Realistic noise: 1.7e-4 rad/s/sqrt(Hz) gyro, 2e-3 m/s^2/sqrt(Hz)
    /// accel, 1 px.
    pub fn with_realistic_noise(mut self) -> Self {
        self.gyro_noise_density = 1.7e-4;
        self.accel_noise_density = 2.0e-3;
        self.gyro_bias_walk = 2.0e-5;
        self.accel_bias_walk = 3.0e-3;
        self.pixel_sigma = 1.0;
        self
    }

    pub fn line_delay(&self) -> f64 {
        self.line_delay_us * 1e-6
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.to_string()));
        if !(self.duration > 0.0 && self.imu_rate > 0.0 && self.frame_rate > 0.0) {
            return bad("duration and rates must be positive");
        }
        if !(self.line_delay_us >= 0.0) {
            return bad("line delay must be nonnegative");
        }
        if self.line_delay() * self.intrinsics.height >= 1.0 / self.frame_rate {
            return bad("readout time exceeds the frame period");
        }
        self.intrinsics.validate().map_err(|e| SimError::Config(e.to_string()))?;
        let noise = [
            self.gyro_noise_density,
            self.accel_noise_density,
            self.gyro_bias_walk,
            self.accel_bias_walk,
            self.pixel_sigma,
        ];
        if noise.iter().any(|v| !(*v >= 0.0)) {
            return bad("noise parameters must be nonnegative");
        }
        if (0..3).any(|i| !(self.landmark_box_min[i] <= self.landmark_box_max[i])) {
            return bad("landmark box is inverted");
        }
        Ok(())
    }

    pub fn trajectory(&self) -> AnalyticTrajectory {
        AnalyticTrajectory { static_prefix: self.static_prefix, ramp: self.ramp, ..AnalyticTrajectory::preset(self.speed) }
    }
}

/// Timestamps are stored with nanosecond resolution.
pub fn quantize_time(t: f64) -> f64 {
    (t * 1e9).round() / 1e9
}

/// Outcome of projecting one landmark into one rolling-shutter frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RowSolve {
    Observed { pixel: Vector2<f64>, iterations: usize },
    NotVisible,
    NotConverged,
}

/// Solves the row fixed point `v = project(T_WC(t_i + v t_r)^-1 p).v`,
/// starting from the global-shutter projection at `t_i`. The returned pixel
/// is the projection at the final row estimate, whose row differs from that
/// estimate by less than [`ROW_TOLERANCE`].
pub fn project_rolling_shutter(
    truth: &dyn TruthTrajectory,
    extrinsic: &RigidTransform,
    intr: &PinholeIntrinsics,
    point: &Vector3<f64>,
    frame_time: f64,
    line_delay: f64,
) -> Result<RowSolve, SimError> {
    let project_at = |t: f64| -> Result<Option<Vector2<f64>>, SimError> {
        let s = truth.state(t)?;
        let cam = RigidTransform::new(s.rot, s.pos).compose(extrinsic);
        let pc = cam.inverse().apply(point);
        if pc.z < MIN_VISIBLE_DEPTH {
            return Ok(None);
        }
        Ok(intr.project(&pc).ok())
    };
    let Some(px) = project_at(frame_time)? else {
        return Ok(RowSolve::NotVisible);
    };
    if line_delay == 0.0 {
        return Ok(if intr.contains(&px) { RowSolve::Observed { pixel: px, iterations: 1 } } else { RowSolve::NotVisible });
    }
    // secant iteration on f(v) = g(v) - v, where g is the row the point
    // projects to when the camera is at the pose of row v
    let mut v = px.y;
    let mut prev: Option<(f64, f64)> = None;
    for it in 1..=MAX_ROW_ITERATIONS {
        // rows past the image still give a well-defined time; only the final
        // answer goes through the visibility test
        let Some(next) = project_at(frame_time + v.clamp(0.0, intr.height) * line_delay)? else {
            return Ok(RowSolve::NotVisible);
        };
        let f = next.y - v;
        if f.abs() < ROW_TOLERANCE {
            return Ok(if intr.contains(&next) { RowSolve::Observed { pixel: next, iterations: it } } else { RowSolve::NotVisible });
        }
        let step = match prev {
            Some((v0, f0)) if (f - f0).abs() > 1e-12 => -f * (v - v0) / (f - f0),
            _ => f,
        };
        prev = Some((v, f));
        v += step;
    }
    Ok(RowSolve::NotConverged)
}

/// Statistics gathered while generating a dataset.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimReport {
    pub not_converged: usize,
    pub max_row_iterations: usize,
    pub min_features: usize,
    /// Frames that saw fewer than `min_tracks` features.
    pub sparse_frames: usize,
}

/// A generated dataset plus the extra truth that does not go to files.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub dataset: Dataset,
    pub truth: AnalyticTrajectory,
    pub landmarks: Vec<Vector3<f64>>,
    /// True bias at every IMU sample.
    pub biases: Vec<(Vector3<f64>, Vector3<f64>)>,
    pub report: SimReport,
}

/// The camera extrinsic used by the simulator: camera looking along body
/// +x with image rows along body -z.
pub fn default_extrinsic() -> RigidTransform {
    let r = Matrix3::from_columns(&[
        Vector3::new(0.0, -1.0, 0.0),
        Vector3::new(0.0, 0.0, -1.0),
        Vector3::new(1.0, 0.0, 0.0),
    ]);
    RigidTransform::new(r, Vector3::new(0.05, -0.02, 0.01))
}

/// Generates IMU samples, rolling-shutter frames and ground truth sampled
/// at frame times.
pub fn generate(config: &SimConfig) -> Result<Simulation, SimError> {
    config.validate()?;
    let truth = config.trajectory();
    let extrinsic = default_extrinsic();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let landmarks: Vec<Vector3<f64>> = (0..config.landmarks)
        .map(|_| Vector3::from_fn(|i, _| rng.gen_range(config.landmark_box_min[i]..=config.landmark_box_max[i])))
        .collect();

    // IMU
    let n_imu = (config.duration * config.imu_rate).round() as usize;
    let dt = 1.0 / config.imu_rate;
    let sg = config.gyro_noise_density * config.imu_rate.sqrt();
    let sa = config.accel_noise_density * config.imu_rate.sqrt();
    let wg = config.gyro_bias_walk * dt.sqrt();
    let wa = config.accel_bias_walk * dt.sqrt();
    let mut bg = Vector3::from(config.initial_gyro_bias);
    let mut ba = Vector3::from(config.initial_accel_bias);
    let gauss3 = |rng: &mut ChaCha8Rng, s: f64| {
        let v = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        v * s
    };
    let mut imu = Vec::with_capacity(n_imu);
    let mut biases = Vec::with_capacity(n_imu);
    for k in 0..n_imu {
        let t = quantize_time(k as f64 * dt);
        let (w, a) = ideal_imu(&truth.state(t)?);
        imu.push(ImuSample::new(t, w + bg + gauss3(&mut rng, sg), a + ba + gauss3(&mut rng, sa)));
        biases.push((bg, ba));
        bg += gauss3(&mut rng, wg);
        ba += gauss3(&mut rng, wa);
    }

    // frames
    let n_frames = (config.duration * config.frame_rate).round() as usize;
    let t_r = config.line_delay();
    let mut report = SimReport { min_features: usize::MAX, ..Default::default() };
    let mut frames = Vec::with_capacity(n_frames);
    let mut ground_truth = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        let t = quantize_time(i as f64 / config.frame_rate);
        let mut obs = Vec::new();
        for (id, p) in landmarks.iter().enumerate() {
            match project_rolling_shutter(&truth, &extrinsic, &config.intrinsics, p, t, t_r)? {
                RowSolve::Observed { pixel, iterations } => {
                    report.max_row_iterations = report.max_row_iterations.max(iterations);
                    let noisy = pixel + Vector2::new(rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal)) * config.pixel_sigma;
                    if config.intrinsics.contains(&noisy) {
                        obs.push((id as u64, noisy));
                    }
                }
                RowSolve::NotVisible => {}
                RowSolve::NotConverged => report.not_converged += 1,
            }
        }
        if obs.is_empty() {
            return Err(SimError::NoVisibility(t));
        }
        if obs.len() < config.min_tracks {
            report.sparse_frames += 1;
            log::warn!("frame at {t:.9} sees only {} features", obs.len());
        }
        report.min_features = report.min_features.min(obs.len());
        let s = truth.state(t)?;
        ground_truth.push(StampedPose { t, rot: s.rot, pos: s.pos });
        frames.push(Frame::new(t, obs));
    }

    let meta = DatasetMeta {
        intrinsics: config.intrinsics,
        extrinsic_rotation: lie::to_quaternion(&extrinsic.rot),
        extrinsic_translation: extrinsic.trans.into(),
        imu_rate: config.imu_rate,
        frame_rate: config.frame_rate,
        line_delay_us: Some(config.line_delay_us),
    };
    Ok(Simulation {
        dataset: Dataset { meta, imu, frames, ground_truth: Some(ground_truth) },
        truth,
        landmarks,
        biases,
        report,
    })
}
