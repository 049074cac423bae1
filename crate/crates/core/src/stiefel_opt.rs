//! Optimizers for adapter parameters.
//!
//! Orthogonal factors are stepped on the Stiefel manifold with heavy-ball
//! momentum: the ambient momentum is projected onto the tangent space at the
//! current point, the step is retracted with a QR factorization, and the
//! momentum is projected again at the new point. The Cayley alternative keeps
//! a skew-symmetric parameter and maps it to a rotation. Unconstrained
//! parameters use plain heavy-ball descent.

use crate::error::{Result, SodaError};
use crate::linalg::{cayley, orthogonality_defect, qr_orthonormalize, solve, DenseMatrix, SkewSymmetric};

/// Drift above which a parameter gets an extra QR retraction.
pub const REORTHOGONALIZE_ABOVE: f64 = 1e-10;
/// Hard bound on the orthogonality defect after any step.
pub const MAX_DEFECT: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct StiefelOptimizerState {
    pub momentum: DenseMatrix,
    pub lr: f64,
    pub beta: f64,
    pub step_count: u64,
}

impl StiefelOptimizerState {
    pub fn new(rows: usize, cols: usize, lr: f64, beta: f64) -> Result<Self> {
        validate_hyper(lr, beta)?;
        Ok(Self {
            momentum: DenseMatrix::zeros(rows, cols),
            lr,
            beta,
            step_count: 0,
        })
    }
}

fn validate_hyper(lr: f64, beta: f64) -> Result<()> {
    if !(lr.is_finite() && lr > 0.0) {
        return Err(SodaError::Config(format!("learning rate must be positive, got {lr}")));
    }
    if !(0.0..1.0).contains(&beta) {
        return Err(SodaError::Config(format!("momentum must lie in [0, 1), got {beta}")));
    }
    Ok(())
}

/// Projects an ambient matrix onto the tangent space at `v`:
/// `Z − V·sym(VᵀZ)`.
pub fn tangent_projection(v: &DenseMatrix, z: &DenseMatrix) -> Result<DenseMatrix> {
    let vtz = v.tr_matmul(z)?;
    z.sub(&v.matmul(&vtz.sym())?)
}

pub fn stiefel_step(v: &DenseMatrix, grad: &DenseMatrix, state: &mut StiefelOptimizerState) -> Result<DenseMatrix> {
    if v.shape() != grad.shape() || v.shape() != state.momentum.shape() {
        return Err(SodaError::shape(
            "stiefel_step",
            format!(
                "parameter {:?}, gradient {:?}, momentum {:?}",
                v.shape(),
                grad.shape(),
                state.momentum.shape()
            ),
        ));
    }
    state.step_count += 1;

    let mut m = state.momentum.scale(state.beta);
    m.axpy(1.0, grad)?;
    let direction = tangent_projection(v, &m)?;
    if direction.data().iter().all(|&d| d == 0.0) {
        state.momentum = direction;
        return Ok(v.clone());
    }

    let mut moved = v.clone();
    moved.axpy(-state.lr, &direction)?;
    let mut next = qr_orthonormalize(&moved)?;
    if orthogonality_defect(&next) > REORTHOGONALIZE_ABOVE {
        next = qr_orthonormalize(&next)?;
    }
    let defect = orthogonality_defect(&next);
    if !next.is_finite() || defect > MAX_DEFECT {
        return Err(SodaError::numeric(
            "stiefel_step",
            format!("retraction left defect {defect:e}"),
        ));
    }
    state.momentum = tangent_projection(&next, &m)?;
    Ok(next)
}

#[derive(Debug, Clone)]
pub struct EuclideanOptimizerState {
    pub momentum: DenseMatrix,
    pub lr: f64,
    pub beta: f64,
    /// Decoupled weight decay, applied as `p ← p − lr·wd·p`.
    pub weight_decay: f64,
}

impl EuclideanOptimizerState {
    pub fn new(rows: usize, cols: usize, lr: f64, beta: f64) -> Result<Self> {
        validate_hyper(lr, beta)?;
        Ok(Self {
            momentum: DenseMatrix::zeros(rows, cols),
            lr,
            beta,
            weight_decay: 0.0,
        })
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }
}

/// Heavy-ball update `m ← β·m + g`, `p ← p − lr·m`.
pub fn euclidean_step(p: &DenseMatrix, grad: &DenseMatrix, state: &mut EuclideanOptimizerState) -> Result<DenseMatrix> {
    if p.shape() != grad.shape() || p.shape() != state.momentum.shape() {
        return Err(SodaError::shape(
            "euclidean_step",
            format!(
                "parameter {:?}, gradient {:?}, momentum {:?}",
                p.shape(),
                grad.shape(),
                state.momentum.shape()
            ),
        ));
    }
    let mut m = state.momentum.scale(state.beta);
    m.axpy(1.0, grad)?;
    let mut next = p.clone();
    if state.weight_decay != 0.0 {
        next = next.scale(1.0 - state.lr * state.weight_decay);
    }
    next.axpy(-state.lr, &m)?;
    state.momentum = m;
    Ok(next)
}

/// A rotation parameterized through the Cayley map of a skew-symmetric matrix.
#[derive(Debug, Clone)]
pub struct CayleyParameter {
    s: SkewSymmetric,
    rotation: DenseMatrix,
}

impl CayleyParameter {
    pub fn new(s: SkewSymmetric) -> Result<Self> {
        let rotation = cayley(&s)?;
        Ok(Self { s, rotation })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            s: SkewSymmetric::zeros(dim),
            rotation: DenseMatrix::identity(dim),
        }
    }

    pub fn skew(&self) -> &SkewSymmetric {
        &self.s
    }

    pub fn rotation(&self) -> &DenseMatrix {
        &self.rotation
    }

    /// Gradient of the loss with respect to the free (strict lower) entries
    /// of `S`, given the gradient with respect to `R`.
    ///
    /// With `R = (I+S)(I−S)⁻¹`, `dR = (I + R)·dS·(I − S)⁻¹`, so
    /// `∂l/∂S = (I + R)ᵀ·G·(I − S)⁻ᵀ`; each free entry `s_ij` appears as
    /// `+s` at `(i, j)` and `−s` at `(j, i)`.
    pub fn pullback(&self, grad_wrt_rotation: &DenseMatrix) -> Result<SkewSymmetric> {
        let n = self.s.dim();
        if grad_wrt_rotation.shape() != (n, n) {
            return Err(SodaError::shape(
                "cayley pullback",
                format!("gradient {:?} for a {n}x{n} rotation", grad_wrt_rotation.shape()),
            ));
        }
        let eye = DenseMatrix::identity(n);
        let i_plus_r = eye.add(&self.rotation)?;
        let left = i_plus_r.tr_matmul(grad_wrt_rotation)?;
        // left · (I − S)⁻ᵀ = ((I − S)⁻¹ · leftᵀ)ᵀ
        let minus = eye.sub(&self.s.to_matrix())?;
        let grad_s = solve(&minus, &left.transpose())?.transpose();
        let mut out = SkewSymmetric::zeros(n);
        let mut idx = 0;
        for i in 1..n {
            for j in 0..i {
                out.entries_mut()[idx] = grad_s[(i, j)] - grad_s[(j, i)];
                idx += 1;
            }
        }
        Ok(out)
    }
}

/// Euclidean step on the skew parameter, then refreshes the cached rotation.
pub fn cayley_step(cp: &CayleyParameter, grad_wrt_rotation: &DenseMatrix, lr: f64) -> Result<CayleyParameter> {
    let g = cp.pullback(grad_wrt_rotation)?;
    if g.entries().iter().all(|&v| v == 0.0) {
        return Ok(cp.clone());
    }
    let mut s = cp.s.clone();
    for (p, d) in s.entries_mut().iter_mut().zip(g.entries()) {
        *p -= lr * d;
    }
    CayleyParameter::new(s)
}
