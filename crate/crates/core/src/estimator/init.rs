use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dataset::StampedPose;
use crate::error::EstimatorError;
use crate::factors::{ImuFactor, ImuWeights, PoseFactor};
use crate::lie;
use crate::optimizer::{solve, BlockKind, ParamKey, Problem, SolverOptions};
use crate::sensors::{BiasPair, ImuNoiseModel, ImuSample};
use crate::spline::{ControlPoint, RigidTransform, Trajectory};

/// Result of the static-prefix initializer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StaticInit {
    pub gyro_bias: Vector3<f64>,
    /// Body orientation with the measured specific force mapped onto world
    /// up, zero yaw.
    pub rotation: Matrix3<f64>,
    /// End of the detected static interval.
    pub static_end: f64,
    pub samples: usize,
}

/// Finds the initial run of samples with small angular rate and specific
/// force close to gravity. Requires at least `min_duration` seconds of it.
pub fn static_prefix_init(
    imu: &[ImuSample],
    gravity: &Vector3<f64>,
    gyro_threshold: f64,
    accel_threshold: f64,
    min_duration: f64,
) -> Result<StaticInit, EstimatorError> {
    let g = gravity.norm();
    let n = imu
        .iter()
        .take_while(|s| s.gyro.norm() < gyro_threshold && (s.accel.norm() - g).abs() < accel_threshold)
        .count();
    if n < 2 || imu[n - 1].t - imu[0].t < min_duration {
        let span = if n >= 2 { imu[n - 1].t - imu[0].t } else { 0.0 };
        return Err(EstimatorError::Initialization(format!(
            "no static prefix: {span:.3} s below the motion thresholds, need {min_duration:.3} s"
        )));
    }
    let prefix = &imu[..n];
    let gyro_bias = prefix.iter().map(|s| s.gyro).sum::<Vector3<f64>>() / n as f64;
    let f = prefix.iter().map(|s| s.accel).sum::<Vector3<f64>>() / n as f64;
    Ok(StaticInit { gyro_bias, rotation: align_to_up(&f, gravity), static_end: imu[n - 1].t, samples: n })
}

/// Rotation `R` with `R f` parallel to `up`, minimal (no yaw added).
fn align_to_up(f: &Vector3<f64>, up: &Vector3<f64>) -> Matrix3<f64> {
    let a = f.normalize();
    let b = up.normalize();
    let axis = a.cross(&b);
    let s = axis.norm();
    if s < 1e-12 {
        return if a.dot(&b) > 0.0 { Matrix3::identity() } else { lie::exp(&Vector3::new(std::f64::consts::PI, 0.0, 0.0)) };
    }
    lie::exp(&(axis / s * s.atan2(a.dot(&b))))
}

/// Spline seeded with a constant pose, enough control points to cover `t_end`.
pub fn constant_spline(t0: f64, dt: f64, t_end: f64, rot: Matrix3<f64>, pos: Vector3<f64>, extrinsic: RigidTransform) -> Result<Trajectory, EstimatorError> {
    let segments = (((t_end - t0) / dt).floor() as usize + 1).max(1);
    Ok(Trajectory::new(t0, dt, vec![ControlPoint::new(rot, pos); segments + 3], extrinsic)?)
}

/// Fits a spline over `[t0, t_end]` to ground-truth poses (perturbed by
/// the given sigmas) together with raw IMU factors at a known bias.
#[allow(clippy::too_many_arguments)]
pub fn oracle_fit(
    truth: &[StampedPose],
    imu: &[ImuSample],
    t0: f64,
    t_end: f64,
    dt: f64,
    extrinsic: RigidTransform,
    bias: &BiasPair,
    noise: &ImuNoiseModel,
    gravity: &Vector3<f64>,
    sigmas: (f64, f64),
    seed: u64,
) -> Result<Trajectory, EstimatorError> {
    let poses: Vec<&StampedPose> = truth.iter().filter(|p| p.t >= t0 - 1e-9 && p.t <= t_end).collect();
    let Some(first) = poses.first() else {
        return Err(EstimatorError::Initialization(format!("no ground truth in [{t0:.9}, {t_end:.9}]")));
    };
    let mut traj = constant_spline(t0, dt, t_end, first.rot, first.pos, extrinsic)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise3 = |s: f64| Vector3::from_fn(|_, _| StandardNormal.sample(&mut rng)) * s;

    let mut problem = Problem::new();
    for (k, cp) in traj.control_points().iter().enumerate() {
        problem.add_block(ParamKey::RotCp(k), BlockKind::RotationCp, cp.rot.as_slice().to_vec());
        problem.add_block(ParamKey::PosCp(k), BlockKind::PositionCp, cp.pos.as_slice().to_vec());
    }
    let bg = problem.add_block(ParamKey::BiasGyro(0), BlockKind::BiasGyro, bias.gyro.as_slice().to_vec());
    let ba = problem.add_block(ParamKey::BiasAccel(0), BlockKind::BiasAccel, bias.accel.as_slice().to_vec());
    problem.set_constant(bg, true);
    problem.set_constant(ba, true);
    let (rot_w, pos_w) = (1e4, 1e4);
    for p in &poses {
        let rot = p.rot * lie::exp(&noise3(sigmas.0));
        let pos = p.pos + noise3(sigmas.1);
        problem.add_factor(Box::new(PoseFactor::new(&problem, traj.grid(), p.t, rot, pos, rot_w, pos_w)?))?;
    }
    let weights = ImuWeights::from_noise(noise);
    for s in imu.iter().filter(|s| s.t >= t0 && s.t <= t_end) {
        problem.add_factor(Box::new(ImuFactor::new(&problem, traj.grid(), s, 0, gravity, weights)?))?;
    }
    let options = SolverOptions { max_iterations: 50, ..SolverOptions::default() };
    solve(&mut problem, &options)?;
    for k in 0..traj.control_points().len() {
        let r = problem.value_by_key(&ParamKey::RotCp(k)).unwrap();
        let p = problem.value_by_key(&ParamKey::PosCp(k)).unwrap();
        *traj.control_point_mut(k) = ControlPoint::new(Matrix3::from_column_slice(r), Vector3::from_column_slice(p));
    }
    Ok(traj)
}
