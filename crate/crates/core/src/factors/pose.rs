use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use super::{check_arity, SplineSupport};
use crate::error::FactorError;
use crate::lie;
use crate::optimizer::{BlockId, Factor, Problem};
use crate::spline::{Derivs, KnotGrid};

/// Direct measurement of the body pose at one instant:
/// `[w_rot * Log(R_m^T R(t)); w_pos * (p(t) - p_m)]`.
#[derive(Debug, Clone)]
pub struct PoseFactor {
    support: SplineSupport,
    segment: usize,
    t: f64,
    rot: Matrix3<f64>,
    pos: Vector3<f64>,
    w_rot: f64,
    w_pos: f64,
    blocks: Vec<BlockId>,
}

impl PoseFactor {
    pub fn new(
        problem: &Problem,
        grid: &KnotGrid,
        t: f64,
        rot: Matrix3<f64>,
        pos: Vector3<f64>,
        w_rot: f64,
        w_pos: f64,
    ) -> Result<Self, FactorError> {
        let (segment, _) = grid.locate(t)?;
        let support = SplineSupport::new(grid, &[segment]);
        let blocks = support.block_ids(problem)?;
        Ok(Self { support, segment, t, rot, pos, w_rot, w_pos, blocks })
    }
}

impl Factor for PoseFactor {
    fn blocks(&self) -> &[BlockId] {
        &self.blocks
    }

    fn residual_dim(&self) -> usize {
        6
    }

    fn evaluate(&self, params: &[&[f64]], jacobians: Option<&mut [DMatrix<f64>]>) -> Result<DVector<f64>, FactorError> {
        check_arity(params, self.support.num_blocks())?;
        let derivs = if jacobians.is_some() { Derivs::WithJacobians } else { Derivs::ValuesOnly };
        let e = self.support.eval(params, self.segment, self.t, derivs);
        let rr = lie::log_unchecked(&(self.rot.transpose() * e.rot));
        let rp = e.pos - self.pos;
        if let Some(jacs) = jacobians {
            for j in jacs.iter_mut() {
                j.fill(0.0);
            }
            let s = &self.support;
            s.add_rot(jacs, 0, self.segment, &e.d_rot, &(lie::right_jacobian_inv(&rr) * self.w_rot));
            s.add_pos(jacs, 3, self.segment, &e.pos_weights, &(Matrix3::identity() * self.w_pos));
        }
        let r = [rr * self.w_rot, rp * self.w_pos];
        Ok(DVector::from_iterator(6, r.iter().flat_map(|v| v.iter().copied())))
    }

    fn name(&self) -> &'static str {
        "pose"
    }
}
