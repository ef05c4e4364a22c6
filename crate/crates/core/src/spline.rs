//! Uniform cumulative cubic B-spline trajectory with a split representation:
//! rotation on SO(3) (multiplicative cumulative form) and position in R^3.
//!
//! Segment `i` covers `[t0 + i*dt, t0 + (i+1)*dt)` and is controlled by
//! control points `i..=i+3`. The right end of the domain is closed so the
//! last knot evaluates as `u = 1` of the final segment.

use std::sync::OnceLock;

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};

use crate::error::SplineError;
use crate::lie;
use crate::sensors::{BiasPair, ImuSample};

/// Spline order (cubic).
pub const ORDER: usize = 4;

fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Standard uniform B-spline basis matrix: `B_s(u) = sum_n m[s][n] u^n`.
pub fn basis_matrix() -> Matrix4<f64> {
    let k = ORDER;
    let fact: f64 = (1..k).map(|v| v as f64).product();
    Matrix4::from_fn(|s, n| {
        let mut sum = 0.0;
        for l in s..k {
            let sign = if (l - s) % 2 == 0 { 1.0 } else { -1.0 };
            sum += sign * binomial(k, l - s) * ((k - 1 - l) as f64).powi((k - 1 - n) as i32);
        }
        binomial(k - 1, n) * sum / fact
    })
}

/// Cumulative blending matrix: row `j` is the sum of basis rows `j..k`.
pub fn cumulative_matrix() -> &'static Matrix4<f64> {
    static M: OnceLock<Matrix4<f64>> = OnceLock::new();
    M.get_or_init(|| {
        let b = basis_matrix();
        Matrix4::from_fn(|j, n| (j..ORDER).map(|s| b[(s, n)]).sum())
    })
}

/// Cumulative blending values and their first two derivatives in `u`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blending {
    pub value: Vector4<f64>,
    pub d1: Vector4<f64>,
    pub d2: Vector4<f64>,
}

pub fn blending(u: f64) -> Blending {
    let m = cumulative_matrix();
    let pw = Vector4::new(1.0, u, u * u, u * u * u);
    let d1 = Vector4::new(0.0, 1.0, 2.0 * u, 3.0 * u * u);
    let d2 = Vector4::new(0.0, 0.0, 2.0, 6.0 * u);
    Blending { value: m * pw, d1: m * d1, d2: m * d2 }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KnotGrid {
    pub t0: f64,
    pub dt: f64,
    pub count: usize,
}

impl KnotGrid {
    pub fn new(t0: f64, dt: f64, count: usize) -> Result<Self, SplineError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(SplineError::InvalidGrid(format!("knot spacing {dt} must be positive")));
        }
        if count < ORDER {
            return Err(SplineError::InvalidGrid(format!("need at least {ORDER} control points, got {count}")));
        }
        Ok(Self { t0, dt, count })
    }

    /// Closed interval of valid query times.
    pub fn domain(&self) -> (f64, f64) {
        (self.t0, self.t0 + (self.count - (ORDER - 1)) as f64 * self.dt)
    }

    pub fn num_segments(&self) -> usize {
        self.count - (ORDER - 1)
    }

    /// Segment index and normalized time of `t`.
    pub fn locate(&self, t: f64) -> Result<(usize, f64), SplineError> {
        let (start, end) = self.domain();
        if !(t >= start && t <= end) {
            return Err(SplineError::OutOfDomain { t, start, end });
        }
        let mut s = (t - self.t0) / self.dt;
        // knot times computed as t0 + i*dt may land a few ulps short of i
        let nearest = s.round();
        if (s - nearest).abs() < 1e-9 {
            s = nearest;
        }
        let last = self.num_segments() - 1;
        let i = (s.floor() as usize).min(last);
        Ok((i, s - i as f64))
    }

    /// Normalized time of `t` relative to a given segment, which may fall
    /// outside `[0, 1]` when the segment assignment is held fixed.
    #[inline]
    pub fn u_in_segment(&self, segment: usize, t: f64) -> f64 {
        (t - self.t0) / self.dt - segment as f64
    }

    /// Time at which control point `k` is centered (`t0 + (k-1) dt`).
    pub fn control_point_time(&self, k: usize) -> f64 {
        self.t0 + (k as f64 - 1.0) * self.dt
    }
}

/// Rotational and positional control point at one knot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlPoint {
    pub rot: Matrix3<f64>,
    pub pos: Vector3<f64>,
}

impl ControlPoint {
    pub fn new(rot: Matrix3<f64>, pos: Vector3<f64>) -> Self {
        Self { rot, pos }
    }

    pub fn identity() -> Self {
        Self { rot: Matrix3::identity(), pos: Vector3::zeros() }
    }
}

/// Rigid transform `(R, p)` mapping points from frame B into frame A.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rot: Matrix3<f64>,
    pub trans: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rot: Matrix3::identity(), trans: Vector3::zeros() }
    }

    pub fn new(rot: Matrix3<f64>, trans: Vector3<f64>) -> Self {
        Self { rot, trans }
    }

    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform { rot: self.rot * other.rot, trans: self.rot * other.trans + self.trans }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rot.transpose();
        RigidTransform { rot: rt, trans: -(rt * self.trans) }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rot * p + self.trans
    }
}

/// Inclusive range of control point indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ControlPointSpan {
    pub first: usize,
    pub last: usize,
}

impl ControlPointSpan {
    pub fn len(&self) -> usize {
        self.last - self.first + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, k: usize) -> bool {
        k >= self.first && k <= self.last
    }

    pub fn union(&self, other: &ControlPointSpan) -> ControlPointSpan {
        ControlPointSpan { first: self.first.min(other.first), last: self.last.max(other.last) }
    }

    pub fn indices(&self) -> std::ops::RangeInclusive<usize> {
        self.first..=self.last
    }
}

/// Everything a factor needs from one spline segment at one instant.
///
/// Rotation Jacobians are taken with respect to right perturbations of the
/// four rotational control points, and describe the right perturbation of
/// `R(t)`. Position-like quantities are linear in the positional control
/// points with the scalar weights stored here.
#[derive(Debug, Clone, Copy)]
pub struct SegmentEval {
    pub rot: Matrix3<f64>,
    pub pos: Vector3<f64>,
    pub vel: Vector3<f64>,
    pub acc: Vector3<f64>,
    /// Body-frame angular velocity.
    pub omega: Vector3<f64>,
    pub pos_weights: [f64; ORDER],
    pub vel_weights: [f64; ORDER],
    pub acc_weights: [f64; ORDER],
    pub d_rot: [Matrix3<f64>; ORDER],
    pub d_omega: [Matrix3<f64>; ORDER],
}

/// What [`SegmentEval::compute`] should fill in beyond the values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Derivs {
    ValuesOnly,
    WithJacobians,
}

impl SegmentEval {
    /// Evaluates a segment from its four control points at normalized time `u`.
    pub fn compute(
        rots: [&Matrix3<f64>; ORDER],
        pos: [&Vector3<f64>; ORDER],
        u: f64,
        inv_dt: f64,
        derivs: Derivs,
    ) -> SegmentEval {
        let b = blending(u);
        let zeta = b.value;
        let dzeta = b.d1 * inv_dt;
        let ddzeta = b.d2 * inv_dt * inv_dt;

        let mut pos_weights = [0.0; ORDER];
        let mut vel_weights = [0.0; ORDER];
        let mut acc_weights = [0.0; ORDER];
        for k in 0..ORDER {
            let next = |v: &Vector4<f64>| if k + 1 < ORDER { v[k + 1] } else { 0.0 };
            pos_weights[k] = zeta[k] - next(&zeta);
            // zeta_0 == 1, so its derivatives vanish.
            let d0 = if k == 0 { 0.0 } else { dzeta[k] };
            let dd0 = if k == 0 { 0.0 } else { ddzeta[k] };
            vel_weights[k] = d0 - next(&dzeta);
            acc_weights[k] = dd0 - next(&ddzeta);
        }
        let mut p = Vector3::zeros();
        let mut v = Vector3::zeros();
        let mut a = Vector3::zeros();
        for k in 0..ORDER {
            p += pos[k] * pos_weights[k];
            v += pos[k] * vel_weights[k];
            a += pos[k] * acc_weights[k];
        }

        // Rotation: R = R_0 * A_1 * A_2 * A_3, A_j = Exp(zeta_j d_j).
        let mut d = [Vector3::zeros(); ORDER];
        let mut a_mat = [Matrix3::identity(); ORDER];
        let mut r = *rots[0];
        let mut omega = Vector3::zeros();
        // omega before the update of step j, needed for its Jacobian
        let mut omega_prev = [Vector3::zeros(); ORDER];
        for j in 1..ORDER {
            d[j] = lie::log_unchecked(&(rots[j - 1].transpose() * rots[j]));
            a_mat[j] = lie::exp(&(d[j] * zeta[j]));
            r *= a_mat[j];
            omega_prev[j] = omega;
            omega = a_mat[j].transpose() * omega + d[j] * dzeta[j];
        }

        let mut out = SegmentEval {
            rot: r,
            pos: p,
            vel: v,
            acc: a,
            omega,
            pos_weights,
            vel_weights,
            acc_weights,
            d_rot: [Matrix3::zeros(); ORDER],
            d_omega: [Matrix3::zeros(); ORDER],
        };
        if derivs == Derivs::ValuesOnly {
            return out;
        }

        // post[j] = A_{j+1} ... A_3
        let mut post = [Matrix3::identity(); ORDER];
        for j in (0..ORDER - 1).rev() {
            post[j] = a_mat[j + 1] * post[j + 1];
        }
        let mut drot_dd = [Matrix3::zeros(); ORDER];
        let mut domega_dd = [Matrix3::zeros(); ORDER];
        for j in 1..ORDER {
            let jr = lie::right_jacobian(&(d[j] * zeta[j])) * zeta[j];
            let pt = post[j].transpose();
            drot_dd[j] = pt * jr;
            let rotated = a_mat[j].transpose() * omega_prev[j];
            domega_dd[j] = pt * (lie::skew(&rotated) * jr + Matrix3::identity() * dzeta[j]);
        }
        out.d_rot[0] = post[0].transpose();
        for j in 1..ORDER {
            let jr_inv = lie::right_jacobian_inv(&d[j]);
            // d_j depends on rots[j] through Jr^-1 and on rots[j-1] through -Jr^-1 Exp(d_j)^T
            let wrt_prev = -(jr_inv * lie::exp(&d[j]).transpose());
            out.d_rot[j] += drot_dd[j] * jr_inv;
            out.d_rot[j - 1] += drot_dd[j] * wrt_prev;
            out.d_omega[j] += domega_dd[j] * jr_inv;
            out.d_omega[j - 1] += domega_dd[j] * wrt_prev;
        }
        out
    }

    /// `dR/dt = R [omega]_x`.
    pub fn rot_dot(&self) -> Matrix3<f64> {
        self.rot * lie::skew(&self.omega)
    }
}

/// Continuous-time body (IMU) trajectory plus the fixed body-to-camera extrinsic.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    grid: KnotGrid,
    cps: Vec<ControlPoint>,
    pub extrinsic: RigidTransform,
}

impl Trajectory {
    pub fn new(t0: f64, dt: f64, cps: Vec<ControlPoint>, extrinsic: RigidTransform) -> Result<Self, SplineError> {
        let grid = KnotGrid::new(t0, dt, cps.len())?;
        Ok(Self { grid, cps, extrinsic })
    }

    pub fn grid(&self) -> &KnotGrid {
        &self.grid
    }

    pub fn control_points(&self) -> &[ControlPoint] {
        &self.cps
    }

    pub fn control_point(&self, k: usize) -> &ControlPoint {
        &self.cps[k]
    }

    pub fn control_point_mut(&mut self, k: usize) -> &mut ControlPoint {
        &mut self.cps[k]
    }

    pub fn domain(&self) -> (f64, f64) {
        self.grid.domain()
    }

    pub fn locate(&self, t: f64) -> Result<(usize, f64), SplineError> {
        self.grid.locate(t)
    }

    /// Evaluates segment `segment` at normalized time `u` (any real `u`).
    pub fn eval_segment(&self, segment: usize, u: f64, derivs: Derivs) -> SegmentEval {
        let c = &self.cps[segment..segment + ORDER];
        SegmentEval::compute(
            [&c[0].rot, &c[1].rot, &c[2].rot, &c[3].rot],
            [&c[0].pos, &c[1].pos, &c[2].pos, &c[3].pos],
            u,
            1.0 / self.grid.dt,
            derivs,
        )
    }

    pub fn evaluate(&self, t: f64, derivs: Derivs) -> Result<(usize, SegmentEval), SplineError> {
        let (i, u) = self.locate(t)?;
        Ok((i, self.eval_segment(i, u, derivs)))
    }

    pub fn eval_pose(&self, t: f64) -> Result<(Matrix3<f64>, Vector3<f64>), SplineError> {
        let (_, e) = self.evaluate(t, Derivs::ValuesOnly)?;
        Ok((e.rot, e.pos))
    }

    /// Camera pose in the world frame, `T_WB(t) * T_BC`.
    pub fn camera_pose(&self, t: f64) -> Result<RigidTransform, SplineError> {
        let (r, p) = self.eval_pose(t)?;
        Ok(RigidTransform::new(r, p).compose(&self.extrinsic))
    }

    pub fn body_angular_velocity(&self, t: f64) -> Result<Vector3<f64>, SplineError> {
        Ok(self.evaluate(t, Derivs::ValuesOnly)?.1.omega)
    }

    pub fn world_velocity_acceleration(&self, t: f64) -> Result<(Vector3<f64>, Vector3<f64>), SplineError> {
        let (_, e) = self.evaluate(t, Derivs::ValuesOnly)?;
        Ok((e.vel, e.acc))
    }

    pub fn rotation_time_derivative(&self, t: f64) -> Result<Matrix3<f64>, SplineError> {
        Ok(self.evaluate(t, Derivs::ValuesOnly)?.1.rot_dot())
    }

    /// Control points influencing any instant in `[t_a, t_b]`.
    pub fn active_span(&self, t_a: f64, t_b: f64) -> Result<ControlPointSpan, SplineError> {
        let (lo, hi) = if t_a <= t_b { (t_a, t_b) } else { (t_b, t_a) };
        let (i_a, _) = self.locate(lo)?;
        let (i_b, _) = self.locate(hi)?;
        Ok(ControlPointSpan { first: i_a, last: i_b + ORDER - 1 })
    }

    /// Appends control points until the domain reaches `t_end`. Each new
    /// control point is the dead-reckoned IMU pose at its center time,
    /// integrated from the spline state at the current domain end.
    ///
    /// A control point is not a point on the curve: the spline at a knot is
    /// about `P_k + dt^2/6 P''`. The second derivative is subtracted (the
    /// cubic quasi-interpolant), using the IMU acceleration and the gyro
    /// slope at the center time.
    pub fn extend_with_prediction(
        &mut self,
        t_end: f64,
        imu: &[ImuSample],
        bias: &BiasPair,
        gravity: &Vector3<f64>,
    ) -> Result<usize, SplineError> {
        let (_, dom_end) = self.domain();
        if t_end <= dom_end {
            return Ok(0);
        }
        check_imu_coverage(imu, dom_end, t_end)?;

        let (_, e) = self.evaluate(dom_end, Derivs::ValuesOnly)?;
        let mut state = DeadReckoning { t: dom_end, rot: e.rot, pos: e.pos, vel: e.vel };
        let mut cursor = 0usize;
        let mut added = 0;
        while self.domain().1 < t_end {
            let k = self.cps.len();
            let target = self.grid.control_point_time(k);
            state.advance_to(target, imu, &mut cursor, bias, gravity);
            let curvature = self.grid.dt * self.grid.dt / 6.0;
            let s = DeadReckoning::sample_at(imu, &mut cursor, target);
            let acc = state.rot * (s.accel - bias.accel) - gravity;
            let rot = state.rot * lie::exp(&(-gyro_slope(imu, target) * curvature));
            self.cps.push(ControlPoint::new(lie::normalize_rotation(&rot), state.pos - acc * curvature));
            self.grid.count += 1;
            added += 1;
        }
        Ok(added)
    }
}

fn check_imu_coverage(imu: &[ImuSample], from: f64, to: f64) -> Result<(), SplineError> {
    let err = SplineError::InsufficientImu { from, to };
    if imu.len() < 2 {
        return Err(err);
    }
    // allow one sample period of slack at either end
    let mut gaps: Vec<f64> = imu.windows(2).map(|w| w[1].t - w[0].t).collect();
    gaps.sort_by(|a, b| a.total_cmp(b));
    let spacing = gaps[gaps.len() / 2];
    let first = imu[0].t;
    let last = imu[imu.len() - 1].t;
    if from < first - spacing || to > last + spacing {
        return Err(err);
    }
    Ok(())
}

/// Rate of change of the gyro signal over the sample interval holding `t`,
/// or the last interval past the end of the stream.
fn gyro_slope(imu: &[ImuSample], t: f64) -> Vector3<f64> {
    let i = imu.partition_point(|s| s.t <= t).clamp(1, imu.len() - 1);
    let (a, b) = (&imu[i - 1], &imu[i]);
    (b.gyro - a.gyro) / (b.t - a.t)
}

/// Midpoint-rule strapdown integration with zero-order hold outside the samples.
struct DeadReckoning {
    t: f64,
    rot: Matrix3<f64>,
    pos: Vector3<f64>,
    vel: Vector3<f64>,
}

impl DeadReckoning {
    fn sample_at(imu: &[ImuSample], cursor: &mut usize, t: f64) -> ImuSample {
        while *cursor + 1 < imu.len() && imu[*cursor + 1].t <= t {
            *cursor += 1;
        }
        let a = &imu[*cursor];
        // extrapolating the last interval's trend amplifies sample noise
        if t <= a.t || *cursor + 1 >= imu.len() {
            return ImuSample { t, ..*a };
        }
        ImuSample::lerp(a, &imu[*cursor + 1], t)
    }

    fn advance_to(&mut self, target: f64, imu: &[ImuSample], cursor: &mut usize, bias: &BiasPair, g: &Vector3<f64>) {
        while self.t < target {
            // step to the next sample boundary or the target
            let mut next = target;
            if let Some(s) = imu.iter().skip(*cursor).find(|s| s.t > self.t + 1e-12) {
                next = next.min(s.t);
            }
            let h = next - self.t;
            let s0 = Self::sample_at(imu, cursor, self.t);
            let s1 = Self::sample_at(imu, cursor, next);
            let w = (s0.gyro + s1.gyro) * 0.5 - bias.gyro;
            let r1 = self.rot * lie::exp(&(w * h));
            let a0 = self.rot * (s0.accel - bias.accel) - g;
            let a1 = r1 * (s1.accel - bias.accel) - g;
            let a = (a0 + a1) * 0.5;
            self.pos += self.vel * h + a * (0.5 * h * h);
            self.vel += a * h;
            self.rot = r1;
            self.t = next;
        }
    }
}
