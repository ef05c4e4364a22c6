use nalgebra::{DMatrix, DVector, Matrix3, Vector3, Vector6};

use super::{check_arity, lookup, set_block, SplineSupport};
use crate::error::FactorError;
use crate::lie::skew;
use crate::optimizer::{BlockId, Factor, ParamKey, Problem};
use crate::sensors::{BiasPair, ImuNoiseModel, ImuSample};
use crate::spline::{Derivs, KnotGrid, SegmentEval, Trajectory};

/// `[gyro; accel]` residual of one raw sample against the spline state.
fn imu_kernel(e: &SegmentEval, s: &ImuSample, bg: &Vector3<f64>, ba: &Vector3<f64>, gravity: &Vector3<f64>) -> (Vector6<f64>, Vector3<f64>) {
    let specific = e.rot.transpose() * (e.acc + gravity);
    let rg = e.omega - s.gyro + bg;
    let ra = specific - s.accel + ba;
    (Vector6::new(rg.x, rg.y, rg.z, ra.x, ra.y, ra.z), specific)
}

/// Unwhitened raw IMU residual `[omega - w_m + b_g; R^T (a + g) - a_m + b_a]`.
pub fn imu_residual(
    traj: &Trajectory,
    sample: &ImuSample,
    bias: &BiasPair,
    gravity: &Vector3<f64>,
) -> Result<Vector6<f64>, FactorError> {
    let (_, e) = traj.evaluate(sample.t, Derivs::ValuesOnly)?;
    Ok(imu_kernel(&e, sample, &bias.gyro, &bias.accel, gravity).0)
}

/// Per-axis whitening weights of the raw IMU factor (inverse sample sigmas).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuWeights {
    pub gyro: f64,
    pub accel: f64,
}

impl ImuWeights {
    pub fn from_noise(noise: &ImuNoiseModel) -> Self {
        Self { gyro: 1.0 / noise.gyro_sample_sigma(), accel: 1.0 / noise.accel_sample_sigma() }
    }
}

/// Raw IMU factor on one sample. Blocks: interleaved control points of the
/// sample's segment, gyro bias, accel bias.
#[derive(Debug, Clone)]
pub struct ImuFactor {
    support: SplineSupport,
    segment: usize,
    sample: ImuSample,
    gravity: Vector3<f64>,
    weights: ImuWeights,
    blocks: Vec<BlockId>,
}

impl ImuFactor {
    /// `bias_id` selects the `BiasGyro` / `BiasAccel` blocks the sample binds to.
    pub fn new(
        problem: &Problem,
        grid: &KnotGrid,
        sample: &ImuSample,
        bias_id: u64,
        gravity: &Vector3<f64>,
        weights: ImuWeights,
    ) -> Result<Self, FactorError> {
        let (segment, _) = grid.locate(sample.t)?;
        let support = SplineSupport::new(grid, &[segment]);
        let mut blocks = support.block_ids(problem)?;
        blocks.push(lookup(problem, ParamKey::BiasGyro(bias_id))?);
        blocks.push(lookup(problem, ParamKey::BiasAccel(bias_id))?);
        Ok(Self { support, segment, sample: *sample, gravity: *gravity, weights, blocks })
    }

    pub fn sample(&self) -> &ImuSample {
        &self.sample
    }
}

impl Factor for ImuFactor {
    fn blocks(&self) -> &[BlockId] {
        &self.blocks
    }

    fn residual_dim(&self) -> usize {
        6
    }

    fn evaluate(&self, params: &[&[f64]], jacobians: Option<&mut [DMatrix<f64>]>) -> Result<DVector<f64>, FactorError> {
        let nb = self.support.num_blocks();
        check_arity(params, nb + 2)?;
        let bg = Vector3::from_column_slice(params[nb]);
        let ba = Vector3::from_column_slice(params[nb + 1]);
        let derivs = if jacobians.is_some() { Derivs::WithJacobians } else { Derivs::ValuesOnly };
        let e = self.support.eval(params, self.segment, self.sample.t, derivs);
        let (mut r, specific) = imu_kernel(&e, &self.sample, &bg, &ba, &self.gravity);
        let (wg, wa) = (self.weights.gyro, self.weights.accel);
        if let Some(jacs) = jacobians {
            for j in jacs.iter_mut() {
                j.fill(0.0);
            }
            let s = &self.support;
            // gyro rows follow omega's own control point Jacobians
            s.add_rot(jacs, 0, self.segment, &e.d_omega, &(Matrix3::identity() * wg));
            s.add_rot(jacs, 3, self.segment, &e.d_rot, &(skew(&specific) * wa));
            s.add_pos(jacs, 3, self.segment, &e.acc_weights, &(e.rot.transpose() * wa));
            set_block(&mut jacs[nb], 0, &(Matrix3::identity() * wg));
            set_block(&mut jacs[nb + 1], 3, &(Matrix3::identity() * wa));
        }
        for i in 0..3 {
            r[i] *= wg;
            r[i + 3] *= wa;
        }
        Ok(DVector::from_column_slice(r.as_slice()))
    }

    fn name(&self) -> &'static str {
        "imu"
    }
}
