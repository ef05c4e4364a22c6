//! SO(3) toolbox: exponential/logarithm maps, hat/vee and the right Jacobian.
//!
//! Rotations are plain 3x3 matrices. Perturbations are right-multiplicative,
//! `R <- R * exp(delta)`, throughout the crate.

use nalgebra::{Matrix3, Vector3};

use crate::error::LieError;

/// Below this angle the closed forms switch to Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Maximum orthonormality residual accepted by [`log`].
pub const ORTHONORMAL_TOL: f64 = 1e-6;

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`skew`]. Rejects matrices that are not antisymmetric to 1e-9.
pub fn vee(m: &Matrix3<f64>) -> Result<Vector3<f64>, LieError> {
    let asym = (m + m.transpose()).abs().max();
    if asym > 1e-9 {
        return Err(LieError::NotAntisymmetric(asym));
    }
    Ok(vee_unchecked(m))
}

/// Extracts the axial vector of the antisymmetric part of `m`.
#[inline]
pub fn vee_unchecked(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]) * 0.5
}

/// Rodrigues' formula.
pub fn exp(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let k = skew(phi);
    let k2 = k * k;
    if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        return Matrix3::identity() + k + k2 * 0.5;
    }
    let theta = theta2.sqrt();
    let (s, c) = theta.sin_cos();
    Matrix3::identity() + k * (s / theta) + k2 * ((1.0 - c) / theta2)
}

/// Principal logarithm with `|result| <= pi`. At exactly `pi` the sign is
/// fixed so the last nonzero component is nonnegative.
pub fn log(r: &Matrix3<f64>) -> Result<Vector3<f64>, LieError> {
    let resid = orthonormality_residual(r);
    if resid > ORTHONORMAL_TOL || !resid.is_finite() {
        return Err(LieError::NotOrthonormal(resid));
    }
    if r.determinant() < 0.0 {
        return Err(LieError::NotOrthonormal(f64::INFINITY));
    }
    Ok(log_unchecked(r))
}

/// [`log`] without input validation, for hot paths where `r` is known to be a rotation.
pub fn log_unchecked(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos_theta = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let w = vee_unchecked(r); // sin(theta) * axis
    let sin_theta = w.norm();
    if sin_theta < 1e-7 && cos_theta > 0.0 {
        // theta ~ 0: log = vee(R - R^T)/2 * (1 + theta^2/6)
        return w * (1.0 + sin_theta * sin_theta / 6.0);
    }
    if cos_theta < -0.99 {
        return log_near_pi(r, cos_theta, &w);
    }
    let theta = sin_theta.atan2(cos_theta);
    w * (theta / sin_theta)
}

fn log_near_pi(r: &Matrix3<f64>, cos_theta: f64, w: &Vector3<f64>) -> Vector3<f64> {
    // R + R^T = 2 cos I + 2 (1 - cos) a a^T
    let sym = (r + r.transpose()) * 0.5 - Matrix3::identity() * cos_theta;
    let diag = Vector3::new(sym[(0, 0)], sym[(1, 1)], sym[(2, 2)]);
    let mut axis = sym.column(diag.imax()).normalize();
    let theta;
    if w.norm() > 1e-12 {
        theta = w.norm().atan2(cos_theta);
        if axis.dot(w) < 0.0 {
            axis = -axis;
        }
    } else {
        theta = std::f64::consts::PI;
        let last = if axis.z.abs() > 1e-12 {
            axis.z
        } else if axis.y.abs() > 1e-12 {
            axis.y
        } else {
            axis.x
        };
        if last < 0.0 {
            axis = -axis;
        }
    }
    axis * theta
}

pub fn orthonormality_residual(r: &Matrix3<f64>) -> f64 {
    (r * r.transpose() - Matrix3::identity()).abs().max()
}

/// Closed-form right Jacobian: `exp(phi + d) ~= exp(phi) * exp(Jr(phi) d)`.
pub fn right_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let k = skew(phi);
    if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        return Matrix3::identity() - k * 0.5 + k * k / 6.0;
    }
    let theta = theta2.sqrt();
    let (s, c) = theta.sin_cos();
    Matrix3::identity() - k * ((1.0 - c) / theta2) + k * k * ((theta - s) / (theta2 * theta))
}

/// Inverse of [`right_jacobian`].
pub fn right_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let k = skew(phi);
    if theta2 < 1e-10 {
        return Matrix3::identity() + k * 0.5 + k * k / 12.0;
    }
    let theta = theta2.sqrt();
    let (s, c) = theta.sin_cos();
    let coeff = 1.0 / theta2 - (1.0 + c) / (2.0 * theta * s);
    Matrix3::identity() + k * 0.5 + k * k * coeff
}

/// Left Jacobian, `Jl(phi) = exp(phi) Jr(phi) = Jr(-phi)`.
pub fn left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    right_jacobian(&-phi)
}

/// Projects a near-rotation back onto SO(3) via polar decomposition.
pub fn normalize_rotation(r: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = r.svd(true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let mut out = u * vt;
    if out.determinant() < 0.0 {
        let mut u2 = u;
        u2.column_mut(2).neg_mut();
        out = u2 * vt;
    }
    out
}

/// Unit quaternion `(x, y, z, w)` of a rotation matrix, scalar-last, `w >= 0`.
pub fn to_quaternion(r: &Matrix3<f64>) -> [f64; 4] {
    let rot = nalgebra::Rotation3::from_matrix_unchecked(*r);
    let q = nalgebra::UnitQuaternion::from_rotation_matrix(&rot);
    let mut c = q.coords;
    if c.w < 0.0 {
        c = -c;
    }
    [c.x, c.y, c.z, c.w]
}

/// Inverse of [`to_quaternion`]; the input is normalized first.
pub fn from_quaternion(q: [f64; 4]) -> Matrix3<f64> {
    let uq = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
        q[3], q[0], q[1], q[2],
    ));
    uq.to_rotation_matrix().into_inner()
}
