//! Manifold nonlinear least squares: parameter blocks, factors, a
//! Levenberg-Marquardt solver and Schur-complement marginalization.

mod lm;
mod marginalize;

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::error::{FactorError, SolverError};
use crate::lie;

pub use lm::{solve, SolveReport, SolverOptions, Termination};
pub use marginalize::{marginalize_schur, EIGEN_FLOOR};

pub type BlockId = usize;

/// Kind of a parameter block; fixes its tangent dimension and retraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BlockKind {
    /// Rotation matrix stored column-major, retracted as `R * exp(delta)`.
    RotationCp,
    PositionCp,
    BiasGyro,
    BiasAccel,
    InverseDepth,
    LineDelay,
    /// Plain Euclidean block of the given size.
    Vector(usize),
}

impl BlockKind {
    pub fn tangent_dim(self) -> usize {
        match self {
            BlockKind::RotationCp | BlockKind::PositionCp | BlockKind::BiasGyro | BlockKind::BiasAccel => 3,
            BlockKind::InverseDepth | BlockKind::LineDelay => 1,
            BlockKind::Vector(n) => n,
        }
    }

    pub fn ambient_dim(self) -> usize {
        match self {
            BlockKind::RotationCp => 9,
            other => other.tangent_dim(),
        }
    }

    pub fn is_rotation(self) -> bool {
        matches!(self, BlockKind::RotationCp)
    }

    /// `x [+] delta`.
    pub fn plus(self, x: &[f64], delta: &[f64]) -> Vec<f64> {
        if self.is_rotation() {
            let r = rotation_from_slice(x) * lie::exp(&Vector3::from_column_slice(delta));
            r.as_slice().to_vec()
        } else {
            x.iter().zip(delta).map(|(a, b)| a + b).collect()
        }
    }

    /// `x [-] x0`, the tangent vector taking `x0` to `x`.
    pub fn minus(self, x: &[f64], x0: &[f64]) -> Vec<f64> {
        if self.is_rotation() {
            let d = lie::log_unchecked(&(rotation_from_slice(x0).transpose() * rotation_from_slice(x)));
            d.as_slice().to_vec()
        } else {
            x.iter().zip(x0).map(|(a, b)| a - b).collect()
        }
    }

    /// Derivative of `(x [+] delta) [-] x0` with respect to `delta` at zero.
    pub fn minus_jacobian(self, x: &[f64], x0: &[f64]) -> DMatrix<f64> {
        let n = self.tangent_dim();
        if self.is_rotation() {
            let d = Vector3::from_column_slice(&self.minus(x, x0));
            let j = lie::right_jacobian_inv(&d);
            DMatrix::from_fn(3, 3, |r, c| j[(r, c)])
        } else {
            DMatrix::identity(n, n)
        }
    }
}

pub fn rotation_from_slice(x: &[f64]) -> Matrix3<f64> {
    Matrix3::from_column_slice(&x[..9])
}

/// Stable identity of a parameter across windows, used to carry priors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamKey {
    RotCp(usize),
    PosCp(usize),
    BiasGyro(u64),
    BiasAccel(u64),
    InvDepth(u64),
    LineDelay,
    Aux(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterBlock {
    pub key: ParamKey,
    pub kind: BlockKind,
    pub value: Vec<f64>,
    pub constant: bool,
}

/// Gauss-Newton terms of one factor over the stacked tangent spaces of its
/// blocks, in block order.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalTerms {
    pub jtj: DMatrix<f64>,
    pub jtr: DVector<f64>,
    pub squared_norm: f64,
}

/// A residual term over some parameter blocks. Residuals are whitened;
/// Jacobians are with respect to the tangent space of each block.
pub trait Factor: Send + Sync {
    fn blocks(&self) -> &[BlockId];

    fn residual_dim(&self) -> usize;

    /// `jacobians`, when given, holds one `residual_dim x tangent_dim`
    /// matrix per block, already sized.
    fn evaluate(&self, params: &[&[f64]], jacobians: Option<&mut [DMatrix<f64>]>) -> Result<DVector<f64>, FactorError>;

    /// Huber threshold on the whitened residual norm, if robustified.
    fn huber(&self) -> Option<f64> {
        None
    }

    /// `J^T J`, `J^T r` and `|r|^2` formed directly, for factors where that
    /// is much cheaper than going through `J`. Ignored for robust factors.
    fn normal_terms(&self, _params: &[&[f64]]) -> Option<Result<NormalTerms, FactorError>> {
        None
    }

    fn name(&self) -> &'static str;
}

/// Huber `rho(s)` and `rho'(s)` on the squared norm `s`.
pub fn huber_rho(s: f64, delta: f64) -> (f64, f64) {
    let d2 = delta * delta;
    if s <= d2 {
        (s, 1.0)
    } else {
        let r = s.sqrt();
        (2.0 * delta * r - d2, delta / r)
    }
}

#[derive(Default)]
pub struct Problem {
    blocks: Vec<ParameterBlock>,
    index: BTreeMap<ParamKey, BlockId>,
    factors: Vec<Box<dyn Factor>>,
}

impl std::fmt::Debug for Problem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Problem")
            .field("blocks", &self.blocks.len())
            .field("factors", &self.factors.len())
            .finish()
    }
}

impl Problem {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a block, or returns the existing one registered under `key`.
    pub fn add_block(&mut self, key: ParamKey, kind: BlockKind, value: Vec<f64>) -> BlockId {
        if let Some(&id) = self.index.get(&key) {
            return id;
        }
        assert_eq!(value.len(), kind.ambient_dim(), "value size does not match block kind");
        let id = self.blocks.len();
        self.blocks.push(ParameterBlock { key, kind, value, constant: false });
        self.index.insert(key, id);
        id
    }

    pub fn set_constant(&mut self, id: BlockId, constant: bool) {
        self.blocks[id].constant = constant;
    }

    pub fn block(&self, id: BlockId) -> &ParameterBlock {
        &self.blocks[id]
    }

    pub fn blocks(&self) -> &[ParameterBlock] {
        &self.blocks
    }

    pub fn block_id(&self, key: &ParamKey) -> Option<BlockId> {
        self.index.get(key).copied()
    }

    pub fn value(&self, id: BlockId) -> &[f64] {
        &self.blocks[id].value
    }

    pub fn value_by_key(&self, key: &ParamKey) -> Option<&[f64]> {
        self.block_id(key).map(|id| self.value(id))
    }

    pub fn set_value(&mut self, id: BlockId, value: Vec<f64>) {
        assert_eq!(value.len(), self.blocks[id].kind.ambient_dim());
        self.blocks[id].value = value;
    }

    pub fn add_factor(&mut self, factor: Box<dyn Factor>) -> Result<(), SolverError> {
        if let Some(&bad) = factor.blocks().iter().find(|&&b| b >= self.blocks.len()) {
            return Err(SolverError::UnknownBlock(bad));
        }
        self.factors.push(factor);
        Ok(())
    }

    pub fn factors(&self) -> &[Box<dyn Factor>] {
        &self.factors
    }

    pub fn num_factors(&self) -> usize {
        self.factors.len()
    }

    pub fn remove_factors_where(&mut self, pred: impl Fn(&dyn Factor) -> bool) {
        self.factors.retain(|f| !pred(f.as_ref()));
    }

    pub(crate) fn params_of(&self, factor: &dyn Factor) -> Vec<&[f64]> {
        factor.blocks().iter().map(|&b| self.blocks[b].value.as_slice()).collect()
    }

    /// `0.5 * sum rho(|r|^2)` at the current values.
    pub fn cost(&self) -> Result<f64, SolverError> {
        Ok(self.cost_by_factor()?.values().sum())
    }

    /// The cost split by factor name.
    pub fn cost_by_factor(&self) -> Result<std::collections::BTreeMap<&'static str, f64>, SolverError> {
        let mut out = std::collections::BTreeMap::new();
        for f in &self.factors {
            let r = f.evaluate(&self.params_of(f.as_ref()), None)?;
            let s = r.norm_squared();
            let rho = match f.huber() {
                Some(d) => huber_rho(s, d).0,
                None => s,
            };
            *out.entry(f.name()).or_insert(0.0) += 0.5 * rho;
        }
        Ok(out)
    }
}

/// Central-difference Jacobians of a factor, block by block, using each
/// block's retraction. Independent of any analytic derivative code.
///
/// The step is `step * max(|x|, s)` with `s` the block's characteristic
/// size: 1 for most blocks, 1e-4 s for the line delay.
pub fn numeric_jacobians(
    factor: &dyn Factor,
    params: &[Vec<f64>],
    kinds: &[BlockKind],
    step: f64,
) -> Result<Vec<DMatrix<f64>>, FactorError> {
    let m = factor.residual_dim();
    let mut out = Vec::with_capacity(params.len());
    for (b, kind) in kinds.iter().enumerate() {
        let n = kind.tangent_dim();
        let floor = match kind {
            BlockKind::LineDelay => 1e-4f64,
            _ => 1.0,
        };
        let scale = if kind.is_rotation() { 1.0 } else { params[b].iter().fold(floor, |a, v| a.max(v.abs())) };
        let h = step * scale;
        let mut jac = DMatrix::zeros(m, n);
        for c in 0..n {
            let mut delta = vec![0.0; n];
            let mut eval = |sign: f64| -> Result<DVector<f64>, FactorError> {
                delta[c] = sign * h;
                let mut p = params.to_vec();
                p[b] = kind.plus(&params[b], &delta);
                let refs: Vec<&[f64]> = p.iter().map(|v| v.as_slice()).collect();
                factor.evaluate(&refs, None)
            };
            let plus = eval(1.0)?;
            let minus = eval(-1.0)?;
            jac.set_column(c, &((plus - minus) / (2.0 * h)));
        }
        out.push(jac);
    }
    Ok(out)
}

/// Relative error between two Jacobian sets, `max_b |A_b - N_b| / max(|N_b|, floor)`.
pub fn jacobian_relative_error(analytic: &[DMatrix<f64>], numeric: &[DMatrix<f64>], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).norm() / n.norm().max(floor))
        .fold(0.0, f64::max)
}

/// Evaluates the analytic Jacobians of a factor at the given values.
pub fn analytic_jacobians(
    factor: &dyn Factor,
    params: &[Vec<f64>],
    kinds: &[BlockKind],
) -> Result<(DVector<f64>, Vec<DMatrix<f64>>), FactorError> {
    let m = factor.residual_dim();
    let mut jacs: Vec<DMatrix<f64>> = kinds.iter().map(|k| DMatrix::zeros(m, k.tangent_dim())).collect();
    let refs: Vec<&[f64]> = params.iter().map(|v| v.as_slice()).collect();
    let r = factor.evaluate(&refs, Some(&mut jacs))?;
    Ok((r, jacs))
}
