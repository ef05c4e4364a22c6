//! Trajectory accuracy and line-delay calibration statistics.

use nalgebra::{Matrix3, Vector3};

use crate::dataset::StampedPose;
use crate::error::IoError;

/// Maximum timestamp difference for associating two poses.
pub const ASSOCIATION_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApeResult {
    pub rmse: f64,
    pub max: f64,
    pub pairs: usize,
    /// Alignment mapping the estimate onto the ground truth.
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

/// Pairs each estimate with the nearest ground-truth time within tolerance.
pub fn associate(estimate: &[StampedPose], truth: &[StampedPose], tol: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    if truth.is_empty() {
        return out;
    }
    for (i, e) in estimate.iter().enumerate() {
        let j = truth.partition_point(|g| g.t < e.t);
        let best = [j.checked_sub(1), (j < truth.len()).then_some(j)]
            .into_iter()
            .flatten()
            .min_by(|&a, &b| (truth[a].t - e.t).abs().total_cmp(&(truth[b].t - e.t).abs()));
        if let Some(k) = best.filter(|&k| (truth[k].t - e.t).abs() <= tol) {
            out.push((i, k));
        }
    }
    out
}

/// Closed-form rigid alignment `y ~= R x + t` (no scale).
pub fn align_rigid(x: &[Vector3<f64>], y: &[Vector3<f64>]) -> (Matrix3<f64>, Vector3<f64>) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<Vector3<f64>>() / n;
    let my = y.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for (a, b) in x.iter().zip(y) {
        cov += (b - my) * (a - mx).transpose();
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut s = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * vt;
    (r, my - r * mx)
}

/// Absolute pose error: RMSE of positions after rigid alignment.
pub fn compute_ape(estimate: &[StampedPose], truth: &[StampedPose]) -> Result<ApeResult, IoError> {
    let pairs = associate(estimate, truth, ASSOCIATION_TOLERANCE);
    if pairs.len() < 3 {
        return Err(IoError::Eval(format!("only {} poses could be associated, need 3", pairs.len())));
    }
    let x: Vec<_> = pairs.iter().map(|&(i, _)| estimate[i].pos).collect();
    let y: Vec<_> = pairs.iter().map(|&(_, j)| truth[j].pos).collect();
    let (r, t) = align_rigid(&x, &y);
    let errs: Vec<f64> = x.iter().zip(&y).map(|(a, b)| (r * a + t - b).norm()).collect();
    let rmse = (errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64).sqrt();
    Ok(ApeResult { rmse, max: errs.iter().copied().fold(0.0, f64::max), pairs: pairs.len(), rotation: r, translation: t })
}

/// Summary of a line-delay trace, in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationStats {
    /// Mean and standard deviation over the final `window` seconds.
    pub mean: f64,
    pub std: f64,
    pub samples: usize,
    pub final_value: f64,
    /// Error of the mean against the reference, when given.
    pub error: Option<f64>,
    /// First trace time after which every sample stays within `band` of
    /// the reference.
    pub settle_time: Option<f64>,
}

pub fn calibration_stats(trace: &[(f64, f64)], window: f64, reference: Option<f64>, band: f64) -> Result<CalibrationStats, IoError> {
    let Some(&(t_end, final_value)) = trace.last() else {
        return Err(IoError::Eval("empty calibration trace".into()));
    };
    let tail: Vec<f64> = trace.iter().filter(|(t, _)| *t >= t_end - window).map(|s| s.1).collect();
    let n = tail.len() as f64;
    let mean = tail.iter().sum::<f64>() / n;
    let std = (tail.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let settle_time = reference.and_then(|r| {
        let last_out = trace.iter().rposition(|(_, v)| (v - r).abs() > band);
        match last_out {
            None => Some(trace[0].0),
            Some(k) if k + 1 < trace.len() => Some(trace[k + 1].0),
            Some(_) => None,
        }
    });
    Ok(CalibrationStats { mean, std, samples: tail.len(), final_value, error: reference.map(|r| mean - r), settle_time })
}
