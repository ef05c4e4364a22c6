use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{huber_rho, BlockId, BlockKind, NormalTerms, Problem};
use crate::error::SolverError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverOptions {
    pub max_iterations: usize,
    /// Stop when an accepted step decreases the cost by less than this fraction.
    pub function_tolerance: f64,
    /// Stop when the max-norm of the gradient falls below this.
    pub gradient_tolerance: f64,
    /// Initial damping relative to the Marquardt diagonal. Zero gives plain
    /// Gauss-Newton until a step is rejected.
    pub initial_lambda: f64,
    /// Eliminate 1-dim inverse-depth blocks with a Schur complement. A depth
    /// sharing a factor with another free depth stays in the dense part.
    pub landmark_schur: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 20,
            function_tolerance: 1e-8,
            gradient_tolerance: 1e-10,
            initial_lambda: 1e-8,
            landmark_schur: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    ZeroCost,
    NoFreeParameters,
    FunctionTolerance,
    GradientTolerance,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    /// Iterations spent, rejected steps included.
    pub iterations: usize,
    pub accepted_steps: usize,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub termination: Termination,
    /// Tangent-space norm of every accepted step.
    pub step_norms: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Col {
    Fixed,
    Dense(usize),
    Landmark(usize),
}

struct Layout {
    cols: Vec<Col>,
    n_dense: usize,
    n_landmark: usize,
}

impl Layout {
    fn new(problem: &Problem, landmark_schur: bool) -> Self {
        // a depth shares no factor with another free depth -> eliminable
        let mut eliminable: Vec<bool> = (0..problem.blocks().len()).map(|id| landmark_schur && is_free_landmark(problem, id)).collect();
        for f in problem.factors() {
            let lms: Vec<BlockId> = f.blocks().iter().copied().filter(|&b| is_free_landmark(problem, b)).collect();
            if lms.len() > 1 {
                for b in lms {
                    eliminable[b] = false;
                }
            }
        }
        let mut cols = Vec::with_capacity(problem.blocks().len());
        let (mut n_dense, mut n_landmark) = (0, 0);
        for (id, b) in problem.blocks().iter().enumerate() {
            if b.constant {
                cols.push(Col::Fixed);
            } else if eliminable[id] {
                cols.push(Col::Landmark(n_landmark));
                n_landmark += 1;
            } else {
                cols.push(Col::Dense(n_dense));
                n_dense += b.kind.tangent_dim();
            }
        }
        Self { cols, n_dense, n_landmark }
    }
}

fn is_free_landmark(problem: &Problem, id: BlockId) -> bool {
    let b = problem.block(id);
    !b.constant && b.kind == BlockKind::InverseDepth
}

/// What one factor contributes to the normal equations.
pub(crate) enum Terms<'a> {
    /// Robust-scaled residual and per-block Jacobians.
    Jacobian(&'a DVector<f64>, &'a [DMatrix<f64>]),
    /// Precomputed products; `offsets[k]` is block `k`'s first row.
    Normal(&'a NormalTerms, &'a [usize]),
}

/// Linearizes every factor, applies the robust weighting by `sqrt(rho')`,
/// and hands the result to `sink`. Returns the robust cost.
pub(crate) fn linearize_each(problem: &Problem, mut sink: impl FnMut(&[BlockId], Terms<'_>)) -> Result<f64, SolverError> {
    let mut cost = 0.0;
    for f in problem.factors() {
        let params = problem.params_of(f.as_ref());
        if f.huber().is_none() {
            if let Some(nt) = f.normal_terms(&params) {
                let nt = nt?;
                if !nt.squared_norm.is_finite() {
                    return Err(SolverError::NonFiniteInitial);
                }
                cost += nt.squared_norm;
                let mut offsets = Vec::with_capacity(f.blocks().len());
                let mut o = 0;
                for &b in f.blocks() {
                    offsets.push(o);
                    o += problem.block(b).kind.tangent_dim();
                }
                sink(f.blocks(), Terms::Normal(&nt, &offsets));
                continue;
            }
        }
        let m = f.residual_dim();
        let mut jacs: Vec<DMatrix<f64>> = f
            .blocks()
            .iter()
            .map(|&b| DMatrix::zeros(m, problem.block(b).kind.tangent_dim()))
            .collect();
        let mut r = f.evaluate(&params, Some(&mut jacs))?;
        let s = r.norm_squared();
        if !s.is_finite() {
            return Err(SolverError::NonFiniteInitial);
        }
        match f.huber() {
            Some(d) => {
                let (rho, drho) = huber_rho(s, d);
                cost += rho;
                if drho != 1.0 {
                    let w = drho.sqrt();
                    r *= w;
                    for j in jacs.iter_mut() {
                        *j *= w;
                    }
                }
            }
            None => cost += s,
        }
        sink(f.blocks(), Terms::Jacobian(&r, &jacs));
    }
    Ok(0.5 * cost)
}

struct Normal {
    h_pp: DMatrix<f64>,
    g_p: DVector<f64>,
    h_pl: DMatrix<f64>,
    h_ll: DVector<f64>,
    g_l: DVector<f64>,
    cost: f64,
}

fn build_normal(problem: &Problem, layout: &Layout) -> Result<Normal, SolverError> {
    let (np, nl) = (layout.n_dense, layout.n_landmark);
    let mut h_pp = DMatrix::zeros(np, np);
    let mut g_p = DVector::zeros(np);
    let mut h_pl = DMatrix::zeros(np, nl);
    let mut h_ll = DVector::zeros(nl);
    let mut g_l = DVector::zeros(nl);
    let hs = h_pp.as_mut_slice();
    let mut dense: Vec<(usize, usize, usize)> = Vec::new();
    let cost = linearize_each(problem, |blocks, terms| {
        let (r, jacs) = match terms {
            Terms::Jacobian(r, jacs) => (r, jacs),
            Terms::Normal(nt, offsets) => {
                for (a, &ba) in blocks.iter().enumerate() {
                    let (ka, na) = (offsets[a], problem.block(ba).kind.tangent_dim());
                    match layout.cols[ba] {
                        Col::Fixed => {}
                        Col::Landmark(l) => {
                            h_ll[l] += nt.jtj[(ka, ka)];
                            g_l[l] += nt.jtr[ka];
                        }
                        Col::Dense(oa) => {
                            for i in 0..na {
                                g_p[oa + i] += nt.jtr[ka + i];
                            }
                            for (b, &bb) in blocks.iter().enumerate() {
                                let (kb, nb) = (offsets[b], problem.block(bb).kind.tangent_dim());
                                match layout.cols[bb] {
                                    Col::Fixed => {}
                                    Col::Landmark(l) => {
                                        for i in 0..na {
                                            h_pl[(oa + i, l)] += nt.jtj[(ka + i, kb)];
                                        }
                                    }
                                    Col::Dense(ob) if ob >= oa => {
                                        for j in 0..nb {
                                            for i in 0..na {
                                                hs[(ob + j) * np + oa + i] += nt.jtj[(ka + i, kb + j)];
                                            }
                                        }
                                    }
                                    Col::Dense(_) => {}
                                }
                            }
                        }
                    }
                }
                return;
            }
        };
        let m = r.len();
        let r = r.as_slice();
        // (block index in factor, column offset, dim) of every dense block
        dense.clear();
        for (a, &ba) in blocks.iter().enumerate() {
            let ja = jacs[a].as_slice();
            match layout.cols[ba] {
                Col::Fixed => {}
                Col::Landmark(l) => {
                    h_ll[l] += dot(ja, ja);
                    g_l[l] += dot(ja, r);
                }
                Col::Dense(o) => dense.push((a, o, jacs[a].ncols())),
            }
        }
        for &(a, oa, na) in &dense {
            let ja = jacs[a].as_slice();
            for i in 0..na {
                g_p[oa + i] += dot(&ja[i * m..(i + 1) * m], r);
            }
            for (b, &bb) in blocks.iter().enumerate() {
                if let Col::Landmark(l) = layout.cols[bb] {
                    let jb = jacs[b].as_slice();
                    for i in 0..na {
                        h_pl[(oa + i, l)] += dot(&ja[i * m..(i + 1) * m], jb);
                    }
                }
            }
            for &(b, ob, nb) in &dense {
                if ob < oa {
                    continue;
                }
                let jb = jacs[b].as_slice();
                for j in 0..nb {
                    let cj = &jb[j * m..(j + 1) * m];
                    let hcol = &mut hs[(ob + j) * np + oa..(ob + j) * np + oa + na];
                    for (i, h) in hcol.iter_mut().enumerate() {
                        *h += dot(&ja[i * m..(i + 1) * m], cj);
                    }
                }
            }
        }
    })?;
    // Only the upper triangle was accumulated.
    for c in 0..np {
        for r in (c + 1)..np {
            h_pp[(r, c)] = h_pp[(c, r)];
        }
    }
    Ok(Normal { h_pp, g_p, h_pl, h_ll, g_l, cost })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn clamp_diag(v: f64) -> f64 {
    v.clamp(1e-6, 1e32)
}

/// Solves `(H + mu D) delta = -g` with landmarks eliminated first.
/// Returns `None` when the reduced system is not positive definite.
fn damped_step(n: &Normal, mu: f64) -> Option<(DVector<f64>, DVector<f64>)> {
    let np = n.g_p.len();
    let nl = n.g_l.len();
    let mut s = n.h_pp.clone();
    for i in 0..np {
        s[(i, i)] += mu * clamp_diag(n.h_pp[(i, i)]);
    }
    let mut rhs = -&n.g_p;
    let mut a_inv = DVector::zeros(nl);
    for l in 0..nl {
        let a = n.h_ll[l] + mu * clamp_diag(n.h_ll[l]);
        a_inv[l] = if a > 1e-300 { 1.0 / a } else { 0.0 };
    }
    // each landmark column is sparse: only the blocks its factors touch
    for l in 0..nl {
        let col = n.h_pl.column(l);
        let nz: Vec<usize> = (0..np).filter(|&i| col[i] != 0.0).collect();
        for &j in &nz {
            let wj = col[j] * a_inv[l];
            rhs[j] += wj * n.g_l[l];
            for &i in &nz {
                s[(i, j)] -= wj * col[i];
            }
        }
    }
    let dp = if np > 0 { s.cholesky()?.solve(&rhs) } else { DVector::zeros(0) };
    let mut dl = DVector::zeros(nl);
    for l in 0..nl {
        dl[l] = -(n.g_l[l] + n.h_pl.column(l).dot(&dp)) * a_inv[l];
    }
    if dp.iter().chain(dl.iter()).any(|v| !v.is_finite()) {
        return None;
    }
    Some((dp, dl))
}

fn predicted_reduction(n: &Normal, dp: &DVector<f64>, dl: &DVector<f64>, mu: f64) -> f64 {
    let mut lin = -n.g_p.dot(dp) - n.g_l.dot(dl);
    let mut damp = 0.0;
    for i in 0..dp.len() {
        damp += clamp_diag(n.h_pp[(i, i)]) * dp[i] * dp[i];
    }
    for l in 0..dl.len() {
        damp += clamp_diag(n.h_ll[l]) * dl[l] * dl[l];
    }
    lin += mu * damp;
    0.5 * lin
}

fn apply_step(problem: &mut Problem, layout: &Layout, dp: &DVector<f64>, dl: &DVector<f64>) {
    for id in 0..problem.blocks().len() {
        let kind = problem.block(id).kind;
        let delta: Vec<f64> = match layout.cols[id] {
            Col::Fixed => continue,
            Col::Dense(o) => dp.rows(o, kind.tangent_dim()).iter().copied().collect(),
            Col::Landmark(l) => vec![dl[l]],
        };
        let next = kind.plus(problem.value(id), &delta);
        problem.set_value(id, next);
    }
}

fn gradient_max_norm(n: &Normal) -> f64 {
    n.g_p.iter().chain(n.g_l.iter()).fold(0.0, |a, v| a.max(v.abs()))
}

/// Levenberg-Marquardt with Marquardt diagonal scaling and Nielsen's damping
/// update. Rotation blocks retract on the right.
pub fn solve(problem: &mut Problem, options: &SolverOptions) -> Result<SolveReport, SolverError> {
    let layout = Layout::new(problem, options.landmark_schur);
    let initial_cost = problem.cost()?;
    if !initial_cost.is_finite() {
        return Err(SolverError::NonFiniteInitial);
    }
    let mut report = SolveReport {
        iterations: 0,
        accepted_steps: 0,
        initial_cost,
        final_cost: initial_cost,
        termination: Termination::MaxIterations,
        step_norms: Vec::new(),
    };
    if initial_cost == 0.0 {
        report.termination = Termination::ZeroCost;
        return Ok(report);
    }
    if layout.n_dense + layout.n_landmark == 0 {
        report.termination = Termination::NoFreeParameters;
        return Ok(report);
    }

    let mut normal = build_normal(problem, &layout)?;
    let mut cost = normal.cost;
    let mut mu = options.initial_lambda;
    let mut nu = 2.0;
    while report.iterations < options.max_iterations {
        if gradient_max_norm(&normal) < options.gradient_tolerance {
            report.termination = Termination::GradientTolerance;
            break;
        }
        report.iterations += 1;
        let Some((dp, dl)) = damped_step(&normal, mu) else {
            mu = if mu > 0.0 { mu * nu } else { 1e-4 };
            nu *= 2.0;
            continue;
        };
        let pred = predicted_reduction(&normal, &dp, &dl, mu);
        let saved: Vec<Vec<f64>> = problem.blocks().iter().map(|b| b.value.clone()).collect();
        apply_step(problem, &layout, &dp, &dl);
        let new_cost = match problem.cost() {
            Ok(c) if c.is_finite() => Some(c),
            _ => None,
        };
        let rho = match new_cost {
            Some(c) if pred > 0.0 => (cost - c) / pred,
            _ => -1.0,
        };
        if rho > 0.0 {
            let c = new_cost.unwrap_or(cost);
            report.accepted_steps += 1;
            report.step_norms.push((dp.norm_squared() + dl.norm_squared()).sqrt());
            let rel = (cost - c) / cost.max(f64::MIN_POSITIVE);
            cost = c;
            mu *= (1.0f64 / 3.0).max(1.0 - (2.0 * rho - 1.0).powi(3));
            nu = 2.0;
            if c == 0.0 || rel < options.function_tolerance {
                report.termination = Termination::FunctionTolerance;
                break;
            }
            normal = build_normal(problem, &layout)?;
        } else {
            for (id, v) in saved.into_iter().enumerate() {
                problem.set_value(id, v);
            }
            mu = if mu > 0.0 { mu * nu } else { 1e-4 };
            nu *= 2.0;
        }
    }
    report.final_cost = cost;
    Ok(report)
}
