use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, Vector3};

use super::{add_into, check_arity, lookup, SplineSupport};
use crate::error::FactorError;
use crate::lie::{self, skew};
use crate::optimizer::{BlockId, Factor, ParamKey, Problem};
use crate::sensors::{BiasPair, ImuNoiseModel, ImuSample};
use crate::spline::{Derivs, KnotGrid};

type M15 = SMatrix<f64, 15, 15>;
type M15x18 = SMatrix<f64, 15, 18>;
type M9 = SMatrix<f64, 9, 9>;
type V9 = SMatrix<f64, 9, 1>;

// Error-state order: alpha, theta, beta, b_a, b_g.
const A: usize = 0;
const TH: usize = 3;
const B: usize = 6;
const BA: usize = 9;
const BG: usize = 12;

/// IMU preintegration between two instants, midpoint rule, with first-order
/// covariance and bias Jacobians.
#[derive(Debug, Clone, PartialEq)]
pub struct Preintegration {
    pub alpha: Vector3<f64>,
    pub beta: Vector3<f64>,
    pub delta_rot: Matrix3<f64>,
    /// Covariance of `[alpha, theta, beta, b_a, b_g]`.
    pub covariance: M15,
    /// Jacobian of the same state with respect to its value at the start.
    /// The bias columns are exact derivatives of the discrete integration
    /// and give the first-order bias correction.
    pub jacobian: M15,
    /// Bias the measurements were integrated with.
    pub bias: BiasPair,
    pub t_start: f64,
    pub t_end: f64,
}

impl Preintegration {
    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }

    /// Covariance of `[alpha, theta, beta]`.
    pub fn covariance9(&self) -> M9 {
        self.covariance.fixed_view::<9, 9>(0, 0).into_owned()
    }

    fn block(&self, r: usize, c: usize) -> Matrix3<f64> {
        self.jacobian.fixed_view::<3, 3>(r, c).into_owned()
    }

    /// Measurements corrected to first order for a bias change.
    pub fn corrected(&self, bias: &BiasPair) -> (Vector3<f64>, Matrix3<f64>, Vector3<f64>) {
        let dba = bias.accel - self.bias.accel;
        let dbg = bias.gyro - self.bias.gyro;
        let alpha = self.alpha + self.block(A, BA) * dba + self.block(A, BG) * dbg;
        let rot = self.delta_rot * lie::exp(&(self.block(TH, BG) * dbg));
        let beta = self.beta + self.block(B, BA) * dba + self.block(B, BG) * dbg;
        (alpha, rot, beta)
    }

    /// Square-root information of the 9-dim residual, `L^-1` for the
    /// Cholesky factor `L` of the (slightly regularized) covariance.
    pub fn sqrt_information(&self) -> M9 {
        let cov = self.covariance9() + M9::identity() * 1e-12;
        let cov = (cov + cov.transpose()) * 0.5;
        match cov.cholesky() {
            Some(ch) => ch.l().try_inverse().unwrap_or_else(M9::identity),
            None => M9::identity(),
        }
    }
}

/// Integrates consecutive samples with the midpoint rule. The interval is
/// `[samples[0].t, samples[last].t]`.
pub fn preintegrate(samples: &[ImuSample], bias: &BiasPair, noise: &ImuNoiseModel) -> Result<Preintegration, FactorError> {
    if samples.len() < 2 || !(samples[samples.len() - 1].t > samples[0].t) {
        return Err(FactorError::EmptyInterval);
    }
    let mut p = Preintegration {
        alpha: Vector3::zeros(),
        beta: Vector3::zeros(),
        delta_rot: Matrix3::identity(),
        covariance: M15::zeros(),
        jacobian: M15::identity(),
        bias: *bias,
        t_start: samples[0].t,
        t_end: samples[samples.len() - 1].t,
    };
    let i3 = Matrix3::identity();
    for w in samples.windows(2) {
        let (s0, s1) = (&w[0], &w[1]);
        let dt = s1.t - s0.t;
        if !(dt > 0.0) {
            return Err(FactorError::EmptyInterval);
        }
        let omega = (s0.gyro + s1.gyro) * 0.5 - bias.gyro;
        let a0 = s0.accel - bias.accel;
        let a1 = s1.accel - bias.accel;
        let r0 = p.delta_rot;
        let step = lie::exp(&(omega * dt));
        let r1 = r0 * step;
        let un_acc = (r0 * a0 + r1 * a1) * 0.5;
        p.alpha += p.beta * dt + un_acc * (0.5 * dt * dt);
        p.beta += un_acc * dt;
        p.delta_rot = lie::normalize_rotation(&r1);

        let (wx, a0x, a1x) = (skew(&omega), skew(&a0), skew(&a1));
        let rot_step = i3 - wx * dt;
        let dt2 = dt * dt;
        let mut f = M15::identity();
        let put = |m: &mut M15, r: usize, c: usize, v: Matrix3<f64>| m.fixed_view_mut::<3, 3>(r, c).copy_from(&v);
        put(&mut f, A, TH, (r0 * a0x * dt2 + r1 * a1x * rot_step * dt2) * -0.25);
        put(&mut f, A, B, i3 * dt);
        put(&mut f, A, BA, (r0 + r1) * (-0.25 * dt2));
        put(&mut f, A, BG, r1 * a1x * (0.25 * dt2 * dt));
        put(&mut f, TH, TH, rot_step);
        put(&mut f, TH, BG, -i3 * dt);
        put(&mut f, B, TH, (r0 * a0x * dt + r1 * a1x * rot_step * dt) * -0.5);
        put(&mut f, B, BA, (r0 + r1) * (-0.5 * dt));
        put(&mut f, B, BG, r1 * a1x * (0.5 * dt2));

        let mut v = M15x18::zeros();
        let mut putv = |r: usize, c: usize, m: Matrix3<f64>| v.fixed_view_mut::<3, 3>(r, c).copy_from(&m);
        let g_in_alpha = r1 * a1x * (-0.125 * dt2 * dt);
        putv(A, 0, r0 * (0.25 * dt2));
        putv(A, 3, g_in_alpha);
        putv(A, 6, r1 * (0.25 * dt2));
        putv(A, 9, g_in_alpha);
        putv(TH, 3, i3 * (0.5 * dt));
        putv(TH, 9, i3 * (0.5 * dt));
        let g_in_beta = r1 * a1x * (-0.25 * dt2);
        putv(B, 0, r0 * (0.5 * dt));
        putv(B, 3, g_in_beta);
        putv(B, 6, r1 * (0.5 * dt));
        putv(B, 9, g_in_beta);
        putv(BA, 12, i3 * dt);
        putv(BG, 15, i3 * dt);

        // discrete sample variances: density^2 / dt
        let na = noise.accel_noise_density.powi(2) / dt;
        let ng = noise.gyro_noise_density.powi(2) / dt;
        let nwa = noise.accel_bias_walk.powi(2) / dt;
        let nwg = noise.gyro_bias_walk.powi(2) / dt;
        let mut q = SMatrix::<f64, 18, 1>::zeros();
        for i in 0..3 {
            q[i] = na;
            q[3 + i] = ng;
            q[6 + i] = na;
            q[9 + i] = ng;
            q[12 + i] = nwa;
            q[15 + i] = nwg;
        }
        // The transition above is the usual simplified one; it is fine for
        // the covariance but only approximately the derivative of the
        // discrete scheme. Bias sensitivities are propagated exactly.
        let jth0 = p.block(TH, BG);
        let jth1 = step.transpose() * jth0 - lie::right_jacobian(&(omega * dt)) * dt;
        let dacc_ba = (r0 + r1) * -0.5;
        let dacc_bg = (r0 * a0x * jth0 + r1 * a1x * jth1) * -0.5;
        let exact = [
            (A, BA, p.block(A, BA) + p.block(B, BA) * dt + dacc_ba * (0.5 * dt2)),
            (A, BG, p.block(A, BG) + p.block(B, BG) * dt + dacc_bg * (0.5 * dt2)),
            (B, BA, p.block(B, BA) + dacc_ba * dt),
            (B, BG, p.block(B, BG) + dacc_bg * dt),
            (TH, BG, jth1),
        ];
        p.jacobian = f * p.jacobian;
        for (r, c, m) in exact {
            put(&mut p.jacobian, r, c, m);
        }
        p.covariance = f * p.covariance * f.transpose() + v * SMatrix::<f64, 18, 18>::from_diagonal(&q) * v.transpose();
    }
    Ok(p)
}

/// Sub-steps per sample interval in [`preintegrate_interval`].
pub const PREINT_SUBSTEPS: usize = 8;

/// Cubic through the four samples around `t` (fewer near the ends of the
/// stream). Reproduces the samples exactly at their own times.
fn interpolate_imu(imu: &[ImuSample], t: f64) -> ImuSample {
    let i = imu.partition_point(|s| s.t <= t).clamp(1, imu.len() - 1);
    let lo = i.saturating_sub(2).min(imu.len().saturating_sub(4));
    let pts = &imu[lo..(lo + 4).min(imu.len())];
    let mut out = ImuSample { t, gyro: Vector3::zeros(), accel: Vector3::zeros() };
    for (a, sa) in pts.iter().enumerate() {
        let w: f64 = pts.iter().enumerate().filter(|&(b, _)| b != a).map(|(_, sb)| (t - sb.t) / (sa.t - sb.t)).product();
        out.gyro += sa.gyro * w;
        out.accel += sa.accel * w;
    }
    out
}

/// Preintegrates over exactly `[t0, t1]`.
///
/// The midpoint rule at the raw IMU rate leaves a discretization error that
/// is large next to the tight covariance of a noise-free or low-noise
/// stream, so each sample interval is split into [`PREINT_SUBSTEPS`] steps
/// on a cubic interpolant of the neighboring samples.
pub fn preintegrate_interval(
    imu: &[ImuSample],
    t0: f64,
    t1: f64,
    bias: &BiasPair,
    noise: &ImuNoiseModel,
) -> Result<Preintegration, FactorError> {
    if !(t1 > t0) || imu.len() < 2 || imu[0].t > t0 || imu[imu.len() - 1].t < t1 {
        return Err(FactorError::EmptyInterval);
    }
    let mut knots = vec![t0];
    knots.extend(imu.iter().map(|s| s.t).filter(|&t| t > t0 && t < t1));
    knots.push(t1);
    let mut samples = Vec::with_capacity(knots.len() * PREINT_SUBSTEPS);
    for w in knots.windows(2) {
        for q in 0..PREINT_SUBSTEPS {
            samples.push(interpolate_imu(imu, w[0] + (w[1] - w[0]) * q as f64 / PREINT_SUBSTEPS as f64));
        }
    }
    samples.push(interpolate_imu(imu, t1));
    preintegrate(&samples, bias, noise)
}

/// Body state at one instant as read from the spline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateAt {
    pub rot: Matrix3<f64>,
    pub pos: Vector3<f64>,
    pub vel: Vector3<f64>,
}

/// Unwhitened `[alpha; theta; beta]` residual between two body states.
pub fn preintegration_residual(
    k: &StateAt,
    k1: &StateAt,
    bias_k: &BiasPair,
    preint: &Preintegration,
    gravity: &Vector3<f64>,
) -> V9 {
    let dt = preint.duration();
    let (alpha, rot, beta) = preint.corrected(bias_k);
    let ya = k1.pos - k.pos - k.vel * dt + gravity * (0.5 * dt * dt);
    let yb = k1.vel - k.vel + gravity * dt;
    let ra = k.rot.transpose() * ya - alpha;
    let rt = lie::log_unchecked(&(rot.transpose() * k.rot.transpose() * k1.rot));
    let rb = k.rot.transpose() * yb - beta;
    let mut r = V9::zeros();
    r.fixed_rows_mut::<3>(A).copy_from(&ra);
    r.fixed_rows_mut::<3>(TH).copy_from(&rt);
    r.fixed_rows_mut::<3>(B).copy_from(&rb);
    r
}

/// Preintegration factor between `t_k` and `t_k1`. Blocks: interleaved
/// control points of both instants, then the gyro and accel bias at `t_k`.
#[derive(Debug, Clone)]
pub struct PreintFactor {
    support: SplineSupport,
    seg_k: usize,
    seg_k1: usize,
    preint: Preintegration,
    sqrt_info: M9,
    gravity: Vector3<f64>,
    blocks: Vec<BlockId>,
}

impl PreintFactor {
    pub fn new(
        problem: &Problem,
        grid: &KnotGrid,
        preint: Preintegration,
        bias_id: u64,
        gravity: &Vector3<f64>,
    ) -> Result<Self, FactorError> {
        let (seg_k, _) = grid.locate(preint.t_start)?;
        let (seg_k1, _) = grid.locate(preint.t_end)?;
        let support = SplineSupport::new(grid, &[seg_k, seg_k1]);
        let mut blocks = support.block_ids(problem)?;
        blocks.push(lookup(problem, ParamKey::BiasGyro(bias_id))?);
        blocks.push(lookup(problem, ParamKey::BiasAccel(bias_id))?);
        Ok(Self { support, seg_k, seg_k1, sqrt_info: preint.sqrt_information(), preint, gravity: *gravity, blocks })
    }

    pub fn control_points(&self) -> &[usize] {
        self.support.control_points()
    }

    pub fn preintegration(&self) -> &Preintegration {
        &self.preint
    }
}

impl Factor for PreintFactor {
    fn blocks(&self) -> &[BlockId] {
        &self.blocks
    }

    fn residual_dim(&self) -> usize {
        9
    }

    fn evaluate(&self, params: &[&[f64]], jacobians: Option<&mut [DMatrix<f64>]>) -> Result<DVector<f64>, FactorError> {
        let nb = self.support.num_blocks();
        check_arity(params, nb + 2)?;
        let bias = BiasPair::new(Vector3::from_column_slice(params[nb]), Vector3::from_column_slice(params[nb + 1]));
        let derivs = if jacobians.is_some() { Derivs::WithJacobians } else { Derivs::ValuesOnly };
        let e0 = self.support.eval(params, self.seg_k, self.preint.t_start, derivs);
        let e1 = self.support.eval(params, self.seg_k1, self.preint.t_end, derivs);
        let k = StateAt { rot: e0.rot, pos: e0.pos, vel: e0.vel };
        let k1 = StateAt { rot: e1.rot, pos: e1.pos, vel: e1.vel };
        let r = preintegration_residual(&k, &k1, &bias, &self.preint, &self.gravity);
        let w = &self.sqrt_info;

        if let Some(jacs) = jacobians {
            for j in jacs.iter_mut() {
                j.fill(0.0);
            }
            let dt = self.preint.duration();
            let g = &self.gravity;
            let r0t = k.rot.transpose();
            let ya = k1.pos - k.pos - k.vel * dt + g * (0.5 * dt * dt);
            let yb = k1.vel - k.vel + g * dt;
            let rt = r.fixed_rows::<3>(TH).into_owned();
            let jr_inv = lie::right_jacobian_inv(&rt);

            // d r / d eps at t_k and t_k1, stacked [alpha; theta; beta]
            let mut d_eps0 = SMatrix::<f64, 9, 3>::zeros();
            d_eps0.fixed_view_mut::<3, 3>(A, 0).copy_from(&skew(&(r0t * ya)));
            d_eps0.fixed_view_mut::<3, 3>(TH, 0).copy_from(&(-jr_inv * k1.rot.transpose() * k.rot));
            d_eps0.fixed_view_mut::<3, 3>(B, 0).copy_from(&skew(&(r0t * yb)));
            let mut d_eps1 = SMatrix::<f64, 9, 3>::zeros();
            d_eps1.fixed_view_mut::<3, 3>(TH, 0).copy_from(&jr_inv);

            let s = &self.support;
            s.add_rot(jacs, 0, self.seg_k, &e0.d_rot, &(w * d_eps0));
            s.add_rot(jacs, 0, self.seg_k1, &e1.d_rot, &(w * d_eps1));

            // positions: alpha reads p_k1 - p_k - v_k dt, beta reads v_k1 - v_k
            let mut d_p = SMatrix::<f64, 9, 3>::zeros();
            d_p.fixed_view_mut::<3, 3>(A, 0).copy_from(&r0t);
            let mut d_v = SMatrix::<f64, 9, 3>::zeros();
            d_v.fixed_view_mut::<3, 3>(B, 0).copy_from(&r0t);
            let wp = w * d_p;
            let wv = w * d_v;
            let neg = |x: [f64; 4], s: f64| x.map(|v| -v * s);
            s.add_pos(jacs, 0, self.seg_k1, &e1.pos_weights, &wp);
            s.add_pos(jacs, 0, self.seg_k, &neg(e0.pos_weights, 1.0), &wp);
            s.add_pos(jacs, 0, self.seg_k, &neg(e0.vel_weights, dt), &wp);
            s.add_pos(jacs, 0, self.seg_k1, &e1.vel_weights, &wv);
            s.add_pos(jacs, 0, self.seg_k, &neg(e0.vel_weights, 1.0), &wv);

            let pj = &self.preint;
            let dbg = bias.gyro - pj.bias.gyro;
            let jth = pj.block(TH, BG);
            let mut d_bg = SMatrix::<f64, 9, 3>::zeros();
            let mut d_ba = SMatrix::<f64, 9, 3>::zeros();
            d_bg.fixed_view_mut::<3, 3>(A, 0).copy_from(&-pj.block(A, BG));
            d_bg.fixed_view_mut::<3, 3>(TH, 0).copy_from(
                &(-jr_inv * lie::exp(&rt).transpose() * lie::right_jacobian(&(jth * dbg)) * jth),
            );
            d_bg.fixed_view_mut::<3, 3>(B, 0).copy_from(&-pj.block(B, BG));
            d_ba.fixed_view_mut::<3, 3>(A, 0).copy_from(&-pj.block(A, BA));
            d_ba.fixed_view_mut::<3, 3>(B, 0).copy_from(&-pj.block(B, BA));
            add_into(&mut jacs[nb], 0, &(w * d_bg));
            add_into(&mut jacs[nb + 1], 0, &(w * d_ba));
        }
        let rw = w * r;
        Ok(DVector::from_column_slice(rw.as_slice()))
    }

    fn name(&self) -> &'static str {
        "preintegration"
    }
}
