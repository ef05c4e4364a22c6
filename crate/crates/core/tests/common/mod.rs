#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use splinevio::factors::{Landmark, PixelObservation};
use splinevio::lie;
use splinevio::optimizer::{
    analytic_jacobians, jacobian_relative_error, numeric_jacobians, BlockId, BlockKind, Factor, ParamKey, Problem,
};
use splinevio::sensors::{BiasPair, ImuSample, PinholeIntrinsics, GRAVITY};
use splinevio::spline::{ControlPoint, Derivs, RigidTransform, Trajectory};
use splinevio::FactorError;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_vec(rng: &mut impl Rng, scale: f64) -> Vector3<f64> {
    Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * scale
}

/// Camera looking along body +x: camera x = -body y, camera y = -body z.
pub fn forward_extrinsic() -> RigidTransform {
    let r = Matrix3::from_columns(&[
        Vector3::new(0.0, -1.0, 0.0),
        Vector3::new(0.0, 0.0, -1.0),
        Vector3::new(1.0, 0.0, 0.0),
    ]);
    RigidTransform::new(r, Vector3::new(0.05, -0.02, 0.01))
}

/// Smooth random trajectory: small random walk in rotation and position
/// around the identity pose.
pub fn random_trajectory(rng: &mut impl Rng, n_cps: usize, t0: f64, dt: f64, rot_step: f64, pos_step: f64) -> Trajectory {
    let mut rot = lie::exp(&rand_vec(rng, 0.2));
    let mut pos = rand_vec(rng, 0.5);
    let mut cps = Vec::with_capacity(n_cps);
    for _ in 0..n_cps {
        cps.push(ControlPoint::new(rot, pos));
        rot *= lie::exp(&rand_vec(rng, rot_step));
        pos += rand_vec(rng, pos_step);
    }
    Trajectory::new(t0, dt, cps, forward_extrinsic()).unwrap()
}

/// Registers every control point of `traj` in `problem`.
pub fn add_control_points(problem: &mut Problem, traj: &Trajectory) {
    for (k, cp) in traj.control_points().iter().enumerate() {
        problem.add_block(ParamKey::RotCp(k), BlockKind::RotationCp, cp.rot.as_slice().to_vec());
        problem.add_block(ParamKey::PosCp(k), BlockKind::PositionCp, cp.pos.as_slice().to_vec());
    }
}

/// Analytic vs central-difference Jacobians of a factor at the problem's
/// current values; returns the worst per-block relative error.
pub fn factor_jacobian_error(problem: &Problem, factor: &dyn Factor) -> f64 {
    let params: Vec<Vec<f64>> = factor.blocks().iter().map(|&b| problem.value(b).to_vec()).collect();
    let kinds: Vec<BlockKind> = factor.blocks().iter().map(|&b| problem.block(b).kind).collect();
    let (_, analytic) = analytic_jacobians(factor, &params, &kinds).unwrap();
    let numeric = numeric_jacobians(factor, &params, &kinds, 1e-6).unwrap();
    let scale = numeric.iter().map(|j| j.norm()).fold(0.0, f64::max);
    jacobian_relative_error(&analytic, &numeric, (scale * 1e-4).max(1e-6))
}

/// `r = sum_i A_i x_i - b` over Euclidean blocks.
pub struct LinearFactor {
    pub blocks: Vec<BlockId>,
    pub a: Vec<DMatrix<f64>>,
    pub b: DVector<f64>,
}

impl Factor for LinearFactor {
    fn blocks(&self) -> &[BlockId] {
        &self.blocks
    }

    fn residual_dim(&self) -> usize {
        self.b.len()
    }

    fn evaluate(&self, params: &[&[f64]], jacobians: Option<&mut [DMatrix<f64>]>) -> Result<DVector<f64>, FactorError> {
        let mut r = -&self.b;
        for (a, p) in self.a.iter().zip(params) {
            r += a * DVector::from_column_slice(p);
        }
        if let Some(j) = jacobians {
            for (dst, a) in j.iter_mut().zip(&self.a) {
                dst.copy_from(a);
            }
        }
        Ok(r)
    }

    fn name(&self) -> &'static str {
        "linear"
    }
}

pub fn intrinsics() -> PinholeIntrinsics {
    PinholeIntrinsics::new(450.0, 450.0, 320.0, 240.0, 640.0, 480.0).unwrap()
}

/// Noise-free rolling-shutter observation of `p_w` in the frame starting at
/// `frame_time`, found by fixed-point iteration on the row.
pub fn observe(traj: &Trajectory, intr: &PinholeIntrinsics, p_w: &Vector3<f64>, frame_time: f64, t_r: f64) -> Option<Vector2<f64>> {
    let mut px = Vector2::new(intr.cx, intr.cy);
    for _ in 0..50 {
        let t = frame_time + px.y * t_r;
        let cam = traj.camera_pose(t).ok()?;
        let next = intr.project(&cam.inverse().apply(p_w)).ok()?;
        let done = (next - px).norm() < 1e-13;
        px = next;
        if done {
            break;
        }
    }
    intr.contains(&px).then_some(px)
}

pub struct VisualCase {
    pub traj: Trajectory,
    pub landmark: Landmark,
    pub obs: PixelObservation,
    pub t_r: f64,
}

pub fn visual_case(r: &mut impl Rng, static_traj: bool) -> VisualCase {
    let intr = intrinsics();
    loop {
        let traj = if static_traj {
            let cp = ControlPoint::new(lie::exp(&rand_vec(r, 0.3)), rand_vec(r, 1.0));
            Trajectory::new(0.0, 0.1, vec![cp; 10], forward_extrinsic()).unwrap()
        } else {
            random_trajectory(r, 10, 0.0, 0.1, 0.05, 0.05)
        };
        let t_r = r.gen_range(0.0..1e-4);
        let (t0, t1) = traj.domain();
        let t_i = r.gen_range(t0..t1 - 0.35);
        let anchor = PixelObservation::new(t_i, Vector2::new(r.gen_range(0.0..640.0), r.gen_range(0.0..480.0)));
        let depth = r.gen_range(2.0..8.0);
        let p_w = traj.camera_pose(anchor.time(t_r)).unwrap().apply(&(intr.back_project(&anchor.pixel) * depth));
        let t_j = t_i + r.gen_range(0.05..0.25);
        if let Some(px) = observe(&traj, &intr, &p_w, t_j, t_r) {
            let landmark = Landmark { id: 3, anchor, inverse_depth: 1.0 / depth };
            return VisualCase { traj, landmark, obs: PixelObservation::new(t_j, px), t_r };
        }
    }
}

pub fn visual_problem(c: &VisualCase) -> Problem {
    let mut p = Problem::new();
    add_control_points(&mut p, &c.traj);
    p.add_block(ParamKey::InvDepth(c.landmark.id), BlockKind::InverseDepth, vec![c.landmark.inverse_depth]);
    p.add_block(ParamKey::LineDelay, BlockKind::LineDelay, vec![c.t_r]);
    p
}


pub fn bias_blocks(p: &mut Problem, id: u64, b: &BiasPair) {
    p.add_block(ParamKey::BiasGyro(id), BlockKind::BiasGyro, b.gyro.as_slice().to_vec());
    p.add_block(ParamKey::BiasAccel(id), BlockKind::BiasAccel, b.accel.as_slice().to_vec());
}


pub fn sample_spline(traj: &Trajectory, t0: f64, t1: f64, rate: f64) -> Vec<ImuSample> {
    let n = ((t1 - t0) * rate).round() as usize;
    (0..=n)
        .map(|i| {
            let t = t0 + (t1 - t0) * i as f64 / n as f64;
            let (_, e) = traj.evaluate(t, Derivs::ValuesOnly).unwrap();
            ImuSample::new(t, e.omega, e.rot.transpose() * (e.acc + GRAVITY))
        })
        .collect()
}
