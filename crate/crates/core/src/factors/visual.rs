use nalgebra::{DMatrix, DVector, Matrix2, Matrix2x3, Vector2, Vector3};

use super::{check_arity, lookup, SplineSupport};
use crate::error::{FactorError, SensorError};
use crate::lie::skew;
use crate::optimizer::{BlockId, Factor, ParamKey, Problem};
use crate::sensors::{row_time, PinholeIntrinsics, MIN_DEPTH};
use crate::spline::{Derivs, KnotGrid, RigidTransform, SegmentEval, Trajectory};

/// One feature observation in a frame stamped at its first row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelObservation {
    pub frame_time: f64,
    pub pixel: Vector2<f64>,
}

impl PixelObservation {
    pub fn new(frame_time: f64, pixel: Vector2<f64>) -> Self {
        Self { frame_time, pixel }
    }

    /// Exposure time of the observed row under line delay `t_r`.
    pub fn time(&self, t_r: f64) -> f64 {
        self.frame_time + self.pixel.y * t_r
    }
}

/// Landmark in inverse-depth form, anchored in the frame of its first
/// (keyframe) observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Landmark {
    pub id: u64,
    pub anchor: PixelObservation,
    pub inverse_depth: f64,
}

/// Visual residual and its derivatives with respect to the body pose at the
/// anchor time `a` and the observation time `b`. Rotations are perturbed on
/// the right. Units are the normalized image plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VisualEval {
    pub residual: Vector2<f64>,
    pub d_eps_a: Matrix2x3<f64>,
    pub d_pos_a: Matrix2x3<f64>,
    pub d_eps_b: Matrix2x3<f64>,
    pub d_pos_b: Matrix2x3<f64>,
    pub d_lambda: Vector2<f64>,
    pub d_time_a: Vector2<f64>,
    pub d_time_b: Vector2<f64>,
    /// `row_a * d_time_a + row_b * d_time_b`.
    pub d_line_delay: Vector2<f64>,
}

/// Reprojection of an anchored inverse-depth landmark into a later row.
///
/// `ea`, `eb` are spline evaluations at the two row times; `bearing_a` is the
/// anchor pixel on the normalized plane and `obs_b` the observed normalized
/// coordinates.
#[allow(clippy::too_many_arguments)]
pub fn visual_kernel(
    ea: &SegmentEval,
    eb: &SegmentEval,
    extrinsic: &RigidTransform,
    bearing_a: &Vector3<f64>,
    inverse_depth: f64,
    obs_b: &Vector2<f64>,
    row_a: f64,
    row_b: f64,
) -> Result<VisualEval, FactorError> {
    let (r_bc, p_bc) = (&extrinsic.rot, &extrinsic.trans);
    let p_hat = r_bc * (bearing_a / inverse_depth) + p_bc;
    let p_w = ea.rot * p_hat + ea.pos;
    let y = p_w - eb.pos;
    let q = eb.rot.transpose() * y;
    let p_c = r_bc.transpose() * (q - p_bc);
    if p_c.z <= MIN_DEPTH {
        return Err(SensorError::Cheirality(p_c.z).into());
    }
    let iz = 1.0 / p_c.z;
    let residual = Vector2::new(p_c.x * iz, p_c.y * iz) - obs_b;
    let proj = Matrix2x3::new(iz, 0.0, -p_c.x * iz * iz, 0.0, iz, -p_c.y * iz * iz);

    let c_b = r_bc.transpose() * eb.rot.transpose();
    let d_pc_pos_a = c_b;
    let d_pc_eps_a = -(c_b * ea.rot * skew(&p_hat));
    let d_pc_eps_b = r_bc.transpose() * skew(&q);
    let d_pc_lambda = c_b * ea.rot * r_bc * (-bearing_a / (inverse_depth * inverse_depth));
    let d_pc_ta = c_b * (ea.rot_dot() * p_hat + ea.vel);
    let d_pc_tb = r_bc.transpose() * (eb.rot_dot().transpose() * y - eb.rot.transpose() * eb.vel);

    let d_time_a = proj * d_pc_ta;
    let d_time_b = proj * d_pc_tb;
    Ok(VisualEval {
        residual,
        d_eps_a: proj * d_pc_eps_a,
        d_pos_a: proj * d_pc_pos_a,
        d_eps_b: proj * d_pc_eps_b,
        d_pos_b: -(proj * d_pc_pos_a),
        d_lambda: proj * d_pc_lambda,
        d_time_a,
        d_time_b,
        d_line_delay: d_time_a * row_a + d_time_b * row_b,
    })
}

/// Line-delay Jacobian assembled from the pose Jacobians instead: a time
/// shift moves the pose along `R [omega dt]` and `v dt`.
pub fn line_delay_jacobian_by_chain(ev: &VisualEval, ea: &SegmentEval, eb: &SegmentEval, row_a: f64, row_b: f64) -> Vector2<f64> {
    let dta = ev.d_eps_a * ea.omega + ev.d_pos_a * ea.vel;
    let dtb = ev.d_eps_b * eb.omega + ev.d_pos_b * eb.vel;
    dta * row_a + dtb * row_b
}

fn check_row(obs: &PixelObservation, intr: &PinholeIntrinsics) -> Result<(), FactorError> {
    row_time(obs.frame_time, obs.pixel.y, 0.0, intr.height)?;
    Ok(())
}

/// Unwhitened residual read from a trajectory, normalized-plane units.
pub fn visual_residual(
    traj: &Trajectory,
    intr: &PinholeIntrinsics,
    landmark: &Landmark,
    obs: &PixelObservation,
    t_r: f64,
) -> Result<Vector2<f64>, FactorError> {
    Ok(visual_jacobians(traj, intr, landmark, obs, t_r)?.residual)
}

/// Residual and Jacobians read from a trajectory, with respect to every
/// contributing control point, the inverse depth and the line delay.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualJacobians {
    pub residual: Vector2<f64>,
    pub control_points: Vec<usize>,
    pub d_rot: Vec<Matrix2x3<f64>>,
    pub d_pos: Vec<Matrix2x3<f64>>,
    pub d_inverse_depth: Vector2<f64>,
    pub d_line_delay: Vector2<f64>,
}

pub fn visual_jacobians(
    traj: &Trajectory,
    intr: &PinholeIntrinsics,
    landmark: &Landmark,
    obs: &PixelObservation,
    t_r: f64,
) -> Result<VisualJacobians, FactorError> {
    check_row(&landmark.anchor, intr)?;
    check_row(obs, intr)?;
    let (seg_a, ea) = traj.evaluate(landmark.anchor.time(t_r), Derivs::WithJacobians)?;
    let (seg_b, eb) = traj.evaluate(obs.time(t_r), Derivs::WithJacobians)?;
    let ev = visual_kernel(
        &ea,
        &eb,
        &traj.extrinsic,
        &intr.back_project(&landmark.anchor.pixel),
        landmark.inverse_depth,
        &intr.back_project(&obs.pixel).xy(),
        landmark.anchor.pixel.y,
        obs.pixel.y,
    )?;
    let support = SplineSupport::new(traj.grid(), &[seg_a, seg_b]);
    let mut jacs: Vec<DMatrix<f64>> = (0..support.num_blocks()).map(|_| DMatrix::zeros(2, 3)).collect();
    support.add_rot(&mut jacs, 0, seg_a, &ea.d_rot, &ev.d_eps_a);
    support.add_pos(&mut jacs, 0, seg_a, &ea.pos_weights, &ev.d_pos_a);
    support.add_rot(&mut jacs, 0, seg_b, &eb.d_rot, &ev.d_eps_b);
    support.add_pos(&mut jacs, 0, seg_b, &eb.pos_weights, &ev.d_pos_b);
    let fixed = |m: &DMatrix<f64>| Matrix2x3::from_iterator(m.iter().copied());
    Ok(VisualJacobians {
        residual: ev.residual,
        control_points: support.control_points().to_vec(),
        d_rot: jacs.iter().step_by(2).map(fixed).collect(),
        d_pos: jacs.iter().skip(1).step_by(2).map(fixed).collect(),
        d_inverse_depth: ev.d_lambda,
        d_line_delay: ev.d_line_delay,
    })
}

/// Reprojection factor between a landmark's anchor and one later
/// observation. Blocks: interleaved control points, inverse depth, line delay.
///
/// Segment assignments are fixed when the factor is built; if the line delay
/// moves a row time across a knot the segment polynomial is extrapolated.
#[derive(Debug, Clone)]
pub struct VisualFactor {
    support: SplineSupport,
    seg_a: usize,
    seg_b: usize,
    anchor: PixelObservation,
    obs: PixelObservation,
    bearing_a: Vector3<f64>,
    obs_norm: Vector2<f64>,
    extrinsic: RigidTransform,
    sqrt_info: Vector2<f64>,
    huber: Option<f64>,
    landmark_id: u64,
    blocks: Vec<BlockId>,
}

impl VisualFactor {
    /// `sigma_px` is the isotropic pixel noise; the normalized-plane
    /// residual is whitened by `f / sigma_px` per axis.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        problem: &Problem,
        grid: &KnotGrid,
        intr: &PinholeIntrinsics,
        extrinsic: &RigidTransform,
        landmark: &Landmark,
        obs: &PixelObservation,
        t_r: f64,
        sigma_px: f64,
        huber: Option<f64>,
    ) -> Result<Self, FactorError> {
        check_row(&landmark.anchor, intr)?;
        check_row(obs, intr)?;
        let (seg_a, _) = grid.locate(landmark.anchor.time(t_r))?;
        let (seg_b, _) = grid.locate(obs.time(t_r))?;
        let support = SplineSupport::new(grid, &[seg_a, seg_b]);
        let mut blocks = support.block_ids(problem)?;
        blocks.push(lookup(problem, ParamKey::InvDepth(landmark.id))?);
        blocks.push(lookup(problem, ParamKey::LineDelay)?);
        Ok(Self {
            support,
            seg_a,
            seg_b,
            anchor: landmark.anchor,
            obs: *obs,
            bearing_a: intr.back_project(&landmark.anchor.pixel),
            obs_norm: intr.back_project(&obs.pixel).xy(),
            extrinsic: *extrinsic,
            sqrt_info: Vector2::new(intr.fx / sigma_px, intr.fy / sigma_px),
            huber,
            landmark_id: landmark.id,
            blocks,
        })
    }

    pub fn landmark_id(&self) -> u64 {
        self.landmark_id
    }

    pub fn observation(&self) -> &PixelObservation {
        &self.obs
    }

    pub fn control_points(&self) -> &[usize] {
        self.support.control_points()
    }
}

impl Factor for VisualFactor {
    fn blocks(&self) -> &[BlockId] {
        &self.blocks
    }

    fn residual_dim(&self) -> usize {
        2
    }

    fn evaluate(&self, params: &[&[f64]], jacobians: Option<&mut [DMatrix<f64>]>) -> Result<DVector<f64>, FactorError> {
        let nb = self.support.num_blocks();
        check_arity(params, nb + 2)?;
        let lambda = params[nb][0];
        let t_r = params[nb + 1][0];
        let derivs = if jacobians.is_some() { Derivs::WithJacobians } else { Derivs::ValuesOnly };
        let ea = self.support.eval(params, self.seg_a, self.anchor.time(t_r), derivs);
        let eb = self.support.eval(params, self.seg_b, self.obs.time(t_r), derivs);
        let ev = visual_kernel(
            &ea,
            &eb,
            &self.extrinsic,
            &self.bearing_a,
            lambda,
            &self.obs_norm,
            self.anchor.pixel.y,
            self.obs.pixel.y,
        )?;
        let w2 = Matrix2::from_diagonal(&self.sqrt_info);
        if let Some(jacs) = jacobians {
            for j in jacs.iter_mut() {
                j.fill(0.0);
            }
            let s = &self.support;
            s.add_rot(jacs, 0, self.seg_a, &ea.d_rot, &(w2 * ev.d_eps_a));
            s.add_pos(jacs, 0, self.seg_a, &ea.pos_weights, &(w2 * ev.d_pos_a));
            s.add_rot(jacs, 0, self.seg_b, &eb.d_rot, &(w2 * ev.d_eps_b));
            s.add_pos(jacs, 0, self.seg_b, &eb.pos_weights, &(w2 * ev.d_pos_b));
            jacs[nb].column_mut(0).copy_from(&(w2 * ev.d_lambda));
            jacs[nb + 1].column_mut(0).copy_from(&(w2 * ev.d_line_delay));
        }
        let r = w2 * ev.residual;
        Ok(DVector::from_column_slice(r.as_slice()))
    }

    fn huber(&self) -> Option<f64> {
        self.huber
    }

    fn name(&self) -> &'static str {
        "visual"
    }
}
