use nalgebra::{DMatrix, DVector, Matrix3, Vector6};

use super::{check_arity, lookup, set_block};
use crate::error::FactorError;
use crate::optimizer::{BlockId, Factor, ParamKey, Problem};
use crate::sensors::{BiasPair, ImuNoiseModel};

/// `[b_g(k+1) - b_g(k); b_a(k+1) - b_a(k)]`.
pub fn bias_residual(bias_k: &BiasPair, bias_k1: &BiasPair) -> Vector6<f64> {
    let g = bias_k1.gyro - bias_k.gyro;
    let a = bias_k1.accel - bias_k.accel;
    Vector6::new(g.x, g.y, g.z, a.x, a.y, a.z)
}

/// Random-walk factor between consecutive bias states. The covariance is
/// `walk^2 * dt` per axis. Blocks: `bg_k, ba_k, bg_k1, ba_k1`.
#[derive(Debug, Clone)]
pub struct BiasFactor {
    w_gyro: f64,
    w_accel: f64,
    blocks: Vec<BlockId>,
}

impl BiasFactor {
    pub fn new(problem: &Problem, k: u64, k1: u64, dt: f64, noise: &ImuNoiseModel) -> Result<Self, FactorError> {
        if !(dt > 0.0) {
            return Err(FactorError::EmptyInterval);
        }
        let blocks = vec![
            lookup(problem, ParamKey::BiasGyro(k))?,
            lookup(problem, ParamKey::BiasAccel(k))?,
            lookup(problem, ParamKey::BiasGyro(k1))?,
            lookup(problem, ParamKey::BiasAccel(k1))?,
        ];
        Ok(Self {
            w_gyro: 1.0 / (noise.gyro_bias_walk * dt.sqrt()),
            w_accel: 1.0 / (noise.accel_bias_walk * dt.sqrt()),
            blocks,
        })
    }
}

impl Factor for BiasFactor {
    fn blocks(&self) -> &[BlockId] {
        &self.blocks
    }

    fn residual_dim(&self) -> usize {
        6
    }

    fn evaluate(&self, params: &[&[f64]], jacobians: Option<&mut [DMatrix<f64>]>) -> Result<DVector<f64>, FactorError> {
        check_arity(params, 4)?;
        let read = |g: &[f64], a: &[f64]| BiasPair {
            gyro: nalgebra::Vector3::from_column_slice(g),
            accel: nalgebra::Vector3::from_column_slice(a),
        };
        let mut r = bias_residual(&read(params[0], params[1]), &read(params[2], params[3]));
        if let Some(jacs) = jacobians {
            for j in jacs.iter_mut() {
                j.fill(0.0);
            }
            let (ig, ia) = (Matrix3::identity() * self.w_gyro, Matrix3::identity() * self.w_accel);
            set_block(&mut jacs[0], 0, &(-ig));
            set_block(&mut jacs[1], 3, &(-ia));
            set_block(&mut jacs[2], 0, &ig);
            set_block(&mut jacs[3], 3, &ia);
        }
        for i in 0..3 {
            r[i] *= self.w_gyro;
            r[i + 3] *= self.w_accel;
        }
        Ok(DVector::from_column_slice(r.as_slice()))
    }

    fn name(&self) -> &'static str {
        "bias"
    }
}
