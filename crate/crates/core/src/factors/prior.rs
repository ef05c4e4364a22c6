use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::lookup;
use crate::error::FactorError;
use crate::optimizer::{BlockId, BlockKind, Factor, NormalTerms, ParamKey, Problem};

/// Linearized prior left behind by marginalization:
/// `r = offset + sqrt_info * (x [-] x0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorFactor {
    pub keys: Vec<ParamKey>,
    pub kinds: Vec<BlockKind>,
    /// Linearization point per block, frozen at marginalization time.
    pub x0: Vec<Vec<f64>>,
    /// Upper triangular with nonnegative diagonal.
    pub sqrt_info: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl PriorFactor {
    pub fn empty() -> Self {
        Self {
            keys: Vec::new(),
            kinds: Vec::new(),
            x0: Vec::new(),
            sqrt_info: DMatrix::zeros(0, 0),
            offset: DVector::zeros(0),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.kinds.iter().map(|k| k.tangent_dim()).sum()
    }

    pub fn information(&self) -> DMatrix<f64> {
        self.sqrt_info.transpose() * &self.sqrt_info
    }

    /// Residual and, optionally, per-block Jacobians at `values`, given in
    /// the order of `keys`.
    pub fn residual(&self, values: &[&[f64]], jacobians: Option<&mut [DMatrix<f64>]>) -> Result<DVector<f64>, FactorError> {
        if values.len() != self.keys.len() {
            return Err(FactorError::LayoutMismatch(format!(
                "prior over {} blocks evaluated with {}",
                self.keys.len(),
                values.len()
            )));
        }
        let n = self.dim();
        let mut dx = DVector::zeros(n);
        let mut off = 0;
        for (b, kind) in self.kinds.iter().enumerate() {
            if values[b].len() != kind.ambient_dim() {
                return Err(FactorError::LayoutMismatch(format!("block {:?} has wrong size", self.keys[b])));
            }
            let d = kind.minus(values[b], &self.x0[b]);
            dx.rows_mut(off, d.len()).copy_from_slice(&d);
            off += d.len();
        }
        if let Some(jacs) = jacobians {
            let mut off = 0;
            for (b, kind) in self.kinds.iter().enumerate() {
                let m = kind.tangent_dim();
                let lift = kind.minus_jacobian(values[b], &self.x0[b]);
                jacs[b] = self.sqrt_info.columns(off, m) * lift;
                off += m;
            }
        }
        Ok(&self.offset + &self.sqrt_info * dx)
    }

    /// Binds the prior to the blocks of `problem` carrying its keys.
    pub fn bind(self: &Arc<Self>, problem: &Problem) -> Result<PriorResidual, FactorError> {
        let blocks = self.keys.iter().map(|&k| lookup(problem, k)).collect::<Result<Vec<_>, _>>()?;
        for (&b, kind) in blocks.iter().zip(&self.kinds) {
            if problem.block(b).kind != *kind {
                return Err(FactorError::LayoutMismatch(format!("block {:?} changed kind", problem.block(b).key)));
            }
        }
        Ok(PriorResidual { prior: Arc::clone(self), information: self.information(), blocks })
    }

    /// `J^T J`, `J^T r` and `|r|^2` from the cached information matrix.
    /// Only rotation blocks have a non-identity lift.
    fn normal_terms(&self, information: &DMatrix<f64>, values: &[&[f64]]) -> Result<NormalTerms, FactorError> {
        let r = self.residual(values, None)?;
        let mut jtj = information.clone();
        let mut jtr = self.sqrt_info.tr_mul(&r);
        let mut off = 0;
        let mut lifts = Vec::new();
        for (b, kind) in self.kinds.iter().enumerate() {
            let m = kind.tangent_dim();
            if kind.is_rotation() {
                lifts.push((off, kind.minus_jacobian(values[b], &self.x0[b])));
            }
            off += m;
        }
        for (o, lift) in &lifts {
            let cols = jtj.columns(*o, 3) * lift;
            jtj.columns_mut(*o, 3).copy_from(&cols);
        }
        for (o, lift) in &lifts {
            let rows = lift.transpose() * jtj.rows(*o, 3);
            jtj.rows_mut(*o, 3).copy_from(&rows);
            let g = lift.transpose() * jtr.rows(*o, 3);
            jtr.rows_mut(*o, 3).copy_from(&g);
        }
        Ok(NormalTerms { jtj, jtr, squared_norm: r.norm_squared() })
    }
}

/// A [`PriorFactor`] bound to the blocks of one problem.
#[derive(Debug, Clone)]
pub struct PriorResidual {
    prior: Arc<PriorFactor>,
    information: DMatrix<f64>,
    blocks: Vec<BlockId>,
}

impl PriorResidual {
    pub fn prior(&self) -> &Arc<PriorFactor> {
        &self.prior
    }
}

impl Factor for PriorResidual {
    fn blocks(&self) -> &[BlockId] {
        &self.blocks
    }

    fn residual_dim(&self) -> usize {
        self.prior.sqrt_info.nrows()
    }

    fn evaluate(&self, params: &[&[f64]], jacobians: Option<&mut [DMatrix<f64>]>) -> Result<DVector<f64>, FactorError> {
        self.prior.residual(params, jacobians)
    }

    fn normal_terms(&self, params: &[&[f64]]) -> Option<Result<NormalTerms, FactorError>> {
        Some(self.prior.normal_terms(&self.information, params))
    }

    fn name(&self) -> &'static str {
        "prior"
    }
}
