use nalgebra::{Matrix4, Vector2, Vector3, Vector4};

use crate::sensors::PinholeIntrinsics;
use crate::spline::{RigidTransform, Trajectory};

/// Why a landmark could not be triangulated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TriangulationFailure {
    TooFewViews,
    /// Largest angle between viewing rays, degrees.
    InsufficientParallax(f64),
    Degenerate,
    /// Depth in the anchor camera, meters.
    DepthOutOfRange(f64),
    BehindCamera,
}

/// Linear triangulation from camera poses and normalized-plane bearings
/// `(x, y, 1)`. Returns the world point.
pub fn triangulate_dlt(views: &[(RigidTransform, Vector3<f64>)]) -> Option<Vector3<f64>> {
    if views.len() < 2 {
        return None;
    }
    let mut a = Matrix4::zeros();
    for (cam, b) in views {
        // world -> camera: p_c = R^T (p - c)
        let rt = cam.rot.transpose();
        let t = -(rt * cam.trans);
        let row = |i: usize| Vector4::new(rt[(i, 0)], rt[(i, 1)], rt[(i, 2)], t[i]);
        let (r0, r1, r2) = (row(0), row(1), row(2));
        let e1 = r2 * b.x - r0;
        let e2 = r2 * b.y - r1;
        a += e1 * e1.transpose() + e2 * e2.transpose();
    }
    let eig = a.symmetric_eigen();
    let (k, _) = eig.eigenvalues.iter().enumerate().min_by(|x, y| x.1.total_cmp(y.1))?;
    let h = eig.eigenvectors.column(k);
    if h[3].abs() < 1e-12 {
        return None;
    }
    let p = Vector3::new(h[0], h[1], h[2]) / h[3];
    p.iter().all(|v| v.is_finite()).then_some(p)
}

/// Largest angle between any two viewing rays to `point`, degrees.
pub fn max_parallax_deg(cameras: &[RigidTransform], point: &Vector3<f64>) -> f64 {
    let rays: Vec<Vector3<f64>> = cameras.iter().map(|c| (point - c.trans).normalize()).collect();
    let mut best: f64 = 0.0;
    for i in 0..rays.len() {
        for j in i + 1..rays.len() {
            best = best.max(rays[i].dot(&rays[j]).clamp(-1.0, 1.0).acos());
        }
    }
    best.to_degrees()
}

/// Triangulates a landmark from pixel observations `(frame_time, pixel)`,
/// the first being the anchor. Every observation uses the camera pose at
/// its own row time. Returns the inverse depth in the anchor camera.
pub fn triangulate_inverse_depth(
    traj: &Trajectory,
    intr: &PinholeIntrinsics,
    line_delay: f64,
    observations: &[(f64, Vector2<f64>)],
    min_parallax_deg: f64,
    depth_range: (f64, f64),
) -> Result<f64, TriangulationFailure> {
    if observations.len() < 2 {
        return Err(TriangulationFailure::TooFewViews);
    }
    let mut views = Vec::with_capacity(observations.len());
    for (t, px) in observations {
        let cam = traj.camera_pose(t + px.y * line_delay).map_err(|_| TriangulationFailure::Degenerate)?;
        views.push((cam, intr.back_project(px)));
    }
    let p = triangulate_dlt(&views).ok_or(TriangulationFailure::Degenerate)?;
    let cams: Vec<RigidTransform> = views.iter().map(|v| v.0).collect();
    let parallax = max_parallax_deg(&cams, &p);
    if !(parallax > min_parallax_deg) {
        return Err(TriangulationFailure::InsufficientParallax(parallax));
    }
    if cams.iter().any(|c| c.inverse().apply(&p).z <= 0.0) {
        return Err(TriangulationFailure::BehindCamera);
    }
    let depth = cams[0].inverse().apply(&p).z;
    if !(depth >= depth_range.0 && depth <= depth_range.1) {
        return Err(TriangulationFailure::DepthOutOfRange(depth));
    }
    Ok(1.0 / depth)
}
