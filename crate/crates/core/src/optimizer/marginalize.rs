use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};

use super::lm::{linearize_each, Terms};
use super::{BlockId, BlockKind, Problem};
use crate::error::SolverError;
use crate::factors::PriorFactor;

/// Eigenvalues below this are treated as zero in pseudo-inverses.
pub const EIGEN_FLOOR: f64 = 1e-8;

fn sym_pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let inv = eig.eigenvalues.map(|l| if l > EIGEN_FLOOR { 1.0 / l } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose()
}

fn select(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |r, c| m[(rows[r], cols[c])])
}

fn select_vec(v: &DVector<f64>, rows: &[usize]) -> DVector<f64> {
    DVector::from_fn(rows.len(), |r, _| v[rows[r]])
}

/// Linearizes every factor of `problem` at the current values and
/// Schur-complements out `marg`. The result is a prior over the remaining
/// free blocks that some factor touches, in block-id order.
///
/// Marginalized inverse depths that are mutually decoupled are eliminated
/// first with a scalar pseudo-inverse; the rest of the marginal block uses an
/// eigendecomposition pseudo-inverse.
pub fn marginalize_schur(problem: &Problem, marg: &[BlockId]) -> Result<PriorFactor, SolverError> {
    if let Some(&bad) = marg.iter().find(|&&b| b >= problem.blocks().len()) {
        return Err(SolverError::UnknownBlock(bad));
    }
    let marg: BTreeSet<BlockId> = marg.iter().copied().collect();
    let touched: BTreeSet<BlockId> = problem
        .factors()
        .iter()
        .flat_map(|f| f.blocks().iter().copied())
        .filter(|&b| !problem.block(b).constant)
        .collect();

    let mut offsets = vec![usize::MAX; problem.blocks().len()];
    let mut n = 0;
    for &b in &touched {
        offsets[b] = n;
        n += problem.block(b).kind.tangent_dim();
    }
    let mut h = DMatrix::zeros(n, n);
    let mut g = DVector::zeros(n);
    linearize_each(problem, |blocks, terms| {
        let (r, jacs) = match terms {
            Terms::Jacobian(r, jacs) => (r, jacs),
            Terms::Normal(nt, k) => {
                for (a, &ba) in blocks.iter().enumerate() {
                    let (oa, na) = (offsets[ba], problem.block(ba).kind.tangent_dim());
                    if oa == usize::MAX {
                        continue;
                    }
                    g.rows_mut(oa, na).axpy(1.0, &nt.jtr.rows(k[a], na), 1.0);
                    for (b, &bb) in blocks.iter().enumerate() {
                        let (ob, nb) = (offsets[bb], problem.block(bb).kind.tangent_dim());
                        if ob != usize::MAX {
                            let mut dst = h.view_mut((oa, ob), (na, nb));
                            dst += nt.jtj.view((k[a], k[b]), (na, nb));
                        }
                    }
                }
                return;
            }
        };
        for (a, &ba) in blocks.iter().enumerate() {
            let oa = offsets[ba];
            if oa == usize::MAX {
                continue;
            }
            let ja = &jacs[a];
            g.rows_mut(oa, ja.ncols()).gemv_tr(1.0, ja, r, 1.0);
            for (b, &bb) in blocks.iter().enumerate() {
                let ob = offsets[bb];
                if ob == usize::MAX {
                    continue;
                }
                let jb = &jacs[b];
                h.view_mut((oa, ob), (ja.ncols(), jb.ncols())).gemm_tr(1.0, ja, jb, 1.0);
            }
        }
    })?;

    let cols_of = |b: BlockId| offsets[b]..offsets[b] + problem.block(b).kind.tangent_dim();
    let depth_idx: Vec<usize> = touched
        .iter()
        .filter(|b| marg.contains(b) && problem.block(**b).kind == BlockKind::InverseDepth)
        .map(|&b| offsets[b])
        .collect();
    let decoupled = depth_idx
        .iter()
        .all(|&i| depth_idx.iter().all(|&j| i == j || h[(i, j)] == 0.0));
    let scalar_idx: Vec<usize> = if decoupled { depth_idx } else { Vec::new() };
    let other_marg: Vec<usize> = touched
        .iter()
        .filter(|b| marg.contains(b))
        .flat_map(|&b| cols_of(b))
        .filter(|i| !scalar_idx.contains(i))
        .collect();
    let keep_blocks: Vec<BlockId> = touched.iter().copied().filter(|b| !marg.contains(b)).collect();
    let keep: Vec<usize> = keep_blocks.iter().flat_map(|&b| cols_of(b)).collect();

    // Stage 1: scalar elimination of decoupled inverse depths.
    let rest: Vec<usize> = other_marg.iter().chain(keep.iter()).copied().collect();
    let mut h1 = select(&h, &rest, &rest);
    let mut g1 = select_vec(&g, &rest);
    for &l in &scalar_idx {
        let hll = h[(l, l)];
        if hll <= EIGEN_FLOOR {
            continue;
        }
        let col = DVector::from_fn(rest.len(), |r, _| h[(rest[r], l)]);
        h1.ger(-1.0 / hll, &col, &col, 1.0);
        g1.axpy(-g[l] / hll, &col, 1.0);
    }

    // Stage 2: eigen pseudo-inverse on the remaining marginal block.
    let nm = other_marg.len();
    let nk = keep.len();
    let h_mm = h1.view((0, 0), (nm, nm)).into_owned();
    let h_km = h1.view((nm, 0), (nk, nm)).into_owned();
    let h_kk = h1.view((nm, nm), (nk, nk)).into_owned();
    let g_m = g1.rows(0, nm).into_owned();
    let g_k = g1.rows(nm, nk).into_owned();
    let pinv = sym_pinv(&h_mm);
    let hp = &h_km * &pinv;
    let s = &h_kk - &hp * h_km.transpose();
    let gs = &g_k - &hp * &g_m;

    let s = (&s + s.transpose()) * 0.5;
    let (sqrt_info, offset) = if nk == 0 {
        (DMatrix::zeros(0, 0), DVector::zeros(0))
    } else {
        let eig = s.symmetric_eigen();
        let lam = &eig.eigenvalues;
        let vt = eig.eigenvectors.transpose();
        let mut j = DMatrix::zeros(nk, nk);
        let mut e = DVector::zeros(nk);
        let vtg = &vt * &gs;
        for i in 0..nk {
            if lam[i] > EIGEN_FLOOR {
                let sq = lam[i].sqrt();
                j.row_mut(i).copy_from(&(vt.row(i) * sq));
                e[i] = vtg[i] / sq;
            }
        }
        let qr = j.qr();
        let mut r = qr.r();
        let mut off = qr.q().transpose() * e;
        for i in 0..nk {
            if r[(i, i)] < 0.0 {
                r.row_mut(i).neg_mut();
                off[i] = -off[i];
            }
        }
        (r, off)
    };
    if sqrt_info.iter().chain(offset.iter()).any(|v| !v.is_finite()) {
        return Err(SolverError::Marginalization("non-finite prior".into()));
    }

    Ok(PriorFactor {
        keys: keep_blocks.iter().map(|&b| problem.block(b).key).collect(),
        kinds: keep_blocks.iter().map(|&b| problem.block(b).kind).collect(),
        x0: keep_blocks.iter().map(|&b| problem.value(b).to_vec()).collect(),
        sqrt_info,
        offset,
    })
}
