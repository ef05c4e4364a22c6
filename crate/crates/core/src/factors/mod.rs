//! Residuals and analytic Jacobians of the sliding-window cost.
//!
//! Factors that read the spline bind their control points as interleaved
//! `[rotation, position]` blocks over the sorted set of control points they
//! touch, followed by their remaining blocks.

mod bias;
mod imu;
mod pose;
mod preint;
mod prior;
mod visual;

use nalgebra::{DMatrix, Matrix3, SMatrix, Vector3};

pub use bias::{bias_residual, BiasFactor};
pub use imu::{imu_residual, ImuFactor, ImuWeights};
pub use pose::PoseFactor;
pub use preint::{preintegrate, preintegrate_interval, preintegration_residual, PreintFactor, Preintegration, StateAt};
pub use prior::{PriorFactor, PriorResidual};
pub use visual::{
    line_delay_jacobian_by_chain, visual_jacobians, visual_kernel, visual_residual, Landmark, PixelObservation,
    VisualEval, VisualFactor, VisualJacobians,
};

use crate::error::FactorError;
use crate::optimizer::{BlockId, ParamKey, Problem};
use crate::spline::{Derivs, KnotGrid, SegmentEval, ORDER};

/// Control points read by a factor and how to evaluate the spline from the
/// factor's parameter slices.
#[derive(Debug, Clone, PartialEq)]
pub struct SplineSupport {
    cps: Vec<usize>,
    t0: f64,
    dt: f64,
}

impl SplineSupport {
    /// Union of the supports of `segments`.
    pub fn new(grid: &KnotGrid, segments: &[usize]) -> Self {
        let mut cps: Vec<usize> = segments.iter().flat_map(|&s| s..s + ORDER).collect();
        cps.sort_unstable();
        cps.dedup();
        Self { cps, t0: grid.t0, dt: grid.dt }
    }

    pub fn control_points(&self) -> &[usize] {
        &self.cps
    }

    pub fn num_blocks(&self) -> usize {
        2 * self.cps.len()
    }

    /// Block ids of the interleaved control point blocks.
    pub fn block_ids(&self, problem: &Problem) -> Result<Vec<BlockId>, FactorError> {
        let mut ids = Vec::with_capacity(self.num_blocks());
        for &k in &self.cps {
            for key in [ParamKey::RotCp(k), ParamKey::PosCp(k)] {
                ids.push(lookup(problem, key)?);
            }
        }
        Ok(ids)
    }

    fn local(&self, cp: usize) -> usize {
        self.cps.binary_search(&cp).expect("control point outside factor support")
    }

    /// Normalized time of `t` in a segment held fixed.
    pub fn u(&self, segment: usize, t: f64) -> f64 {
        (t - self.t0) / self.dt - segment as f64
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Evaluates `segment` at time `t` from the factor's parameter slices.
    pub fn eval(&self, params: &[&[f64]], segment: usize, t: f64, derivs: Derivs) -> SegmentEval {
        let mut rots = [Matrix3::zeros(); ORDER];
        let mut pos = [Vector3::zeros(); ORDER];
        for q in 0..ORDER {
            let l = self.local(segment + q);
            rots[q] = Matrix3::from_column_slice(params[2 * l]);
            pos[q] = Vector3::from_column_slice(params[2 * l + 1]);
        }
        SegmentEval::compute(
            [&rots[0], &rots[1], &rots[2], &rots[3]],
            [&pos[0], &pos[1], &pos[2], &pos[3]],
            self.u(segment, t),
            1.0 / self.dt,
            derivs,
        )
    }

    /// Adds `d_eps * d(eps)/d(rot cp)` for the body rotation at one instant.
    pub fn add_rot<const M: usize>(
        &self,
        jacs: &mut [DMatrix<f64>],
        row: usize,
        segment: usize,
        d_rot: &[Matrix3<f64>; ORDER],
        d_eps: &SMatrix<f64, M, 3>,
    ) {
        for q in 0..ORDER {
            let l = self.local(segment + q);
            add_into(&mut jacs[2 * l], row, &(d_eps * d_rot[q]));
        }
    }

    /// Adds `d_p * w_q` for a quantity linear in the positional control points.
    pub fn add_pos<const M: usize>(
        &self,
        jacs: &mut [DMatrix<f64>],
        row: usize,
        segment: usize,
        weights: &[f64; ORDER],
        d_p: &SMatrix<f64, M, 3>,
    ) {
        for q in 0..ORDER {
            if weights[q] == 0.0 {
                continue;
            }
            let l = self.local(segment + q);
            add_into(&mut jacs[2 * l + 1], row, &(d_p * weights[q]));
        }
    }
}

pub(crate) fn lookup(problem: &Problem, key: ParamKey) -> Result<BlockId, FactorError> {
    problem
        .block_id(&key)
        .ok_or_else(|| FactorError::LayoutMismatch(format!("block {key:?} not in problem")))
}

pub(crate) fn add_into<const R: usize, const C: usize>(dst: &mut DMatrix<f64>, row: usize, src: &SMatrix<f64, R, C>) {
    let mut v = dst.view_mut((row, 0), (R, C));
    v += src;
}

pub(crate) fn set_block<const R: usize, const C: usize>(
    dst: &mut DMatrix<f64>,
    row: usize,
    src: &SMatrix<f64, R, C>,
) {
    dst.view_mut((row, 0), (R, C)).copy_from(src);
}

pub(crate) fn check_arity(params: &[&[f64]], expected: usize) -> Result<(), FactorError> {
    if params.len() != expected {
        return Err(FactorError::LayoutMismatch(format!(
            "expected {expected} parameter blocks, got {}",
            params.len()
        )));
    }
    Ok(())
}
