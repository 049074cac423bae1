//! Adapter parameterizations over a frozen base weight `W₀ (m×n)`.
//!
//! | method       | effective weight                              |
//! |--------------|-----------------------------------------------|
//! | `Lora`       | `W₀ + B·A`                                    |
//! | `Oft`        | `W₀ · blockdiag(R₁ … R_r)`                    |
//! | `OftShared`  | `W₀ · (I_r ⊗ R)`                              |
//! | `Koft`       | `W₀ · (R₁ ⊗ … ⊗ R_r)`                         |
//! | `Svdiff`     | `U₀ · diag(c(σ + δ)) · V₀ᵀ`                   |
//! | `SodaSvd`    | `U₀ · diag(c(σ + δ)) · (V₀ · ⊗Rᵢ)ᵀ`           |
//! | `SodaQr`     | `(L₀ + diag(δ)) · Q₀ · ⊗Rᵢ`                   |
//!
//! `c` is the spectral constraint (ReLU, softplus or identity). Rotations act
//! on the right of the basis factor. For `SodaSvd` the rotation lives in the
//! `k = min(m, n)` dimensional coordinate space of `V₀`.

mod checkpoint;
mod kron;
mod ops;

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::Rng;

pub use checkpoint::{format_checkpoint, parse_checkpoint, read_checkpoint, write_checkpoint, Checkpoint};
pub use kron::{choose_kron_factorization, kron_factor_gradients, KroneckerRotation};
pub use ops::{
    backward, effective_spectrum, effective_weight, forward, merge, param_count, residual, spectral_projection_delta,
    table_formula_count, SpectralProjection,
};

use crate::error::{Result, SodaError};
use crate::linalg::{lq, svd, DenseMatrix, SpectralDecomposition, TriangularDecomposition};
use crate::random::uniform;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Lora,
    Oft,
    OftShared,
    Koft,
    Svdiff,
    SodaSvd,
    SodaQr,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Lora,
        Method::Oft,
        Method::OftShared,
        Method::Koft,
        Method::Svdiff,
        Method::SodaSvd,
        Method::SodaQr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Lora => "LORA",
            Method::Oft => "OFT",
            Method::OftShared => "OFT_SHARED",
            Method::Koft => "KOFT",
            Method::Svdiff => "SVDIFF",
            Method::SodaSvd => "SODA_SVD",
            Method::SodaQr => "SODA_QR",
        }
    }

    pub fn has_rotations(self) -> bool {
        !matches!(self, Method::Lora | Method::Svdiff)
    }

    pub fn has_spectral_shift(self) -> bool {
        matches!(self, Method::Svdiff | Method::SodaSvd | Method::SodaQr)
    }

    fn uses_kronecker(self) -> bool {
        matches!(self, Method::Koft | Method::SodaSvd | Method::SodaQr)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = SodaError;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        Method::ALL.into_iter().find(|m| m.name() == norm).ok_or_else(|| {
            let names: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
            SodaError::Config(format!("unknown method `{s}`; valid: {}", names.join(", ")))
        })
    }
}

/// Output constraint applied to shifted singular values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Constraint {
    #[default]
    Relu,
    Softplus,
    None,
}

impl Constraint {
    pub const ALL: [Constraint; 3] = [Constraint::None, Constraint::Softplus, Constraint::Relu];

    pub fn name(self) -> &'static str {
        match self {
            Constraint::Relu => "RELU",
            Constraint::Softplus => "SOFTPLUS",
            Constraint::None => "NONE",
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Constraint::Relu => x.max(0.0),
            Constraint::Softplus => softplus(x),
            Constraint::None => x,
        }
    }

    /// Derivative; the ReLU subgradient at zero is taken as 0.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Constraint::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Constraint::Softplus => 1.0 / (1.0 + (-x).exp()),
            Constraint::None => 1.0,
        }
    }

    /// Shift `δ` with `apply(σ + δ) ≈ σ`, so a fresh adapter reproduces `W₀`.
    fn identity_shift(self, sigma: f64) -> f64 {
        match self {
            Constraint::Relu | Constraint::None => 0.0,
            // softplus⁻¹(σ) = ln(eˢ − 1); floored where σ is (near) zero.
            Constraint::Softplus => {
                let inv = if sigma > 30.0 {
                    sigma + (-(-sigma).exp()).ln_1p()
                } else {
                    sigma.exp_m1().ln()
                };
                inv.max(-40.0) - sigma
            }
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Constraint {
    type Err = SodaError;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase();
        Constraint::ALL
            .into_iter()
            .find(|c| c.name() == norm)
            .ok_or_else(|| SodaError::Config(format!("unknown constraint `{s}`; valid: RELU, SOFTPLUS, NONE")))
    }
}

/// Frozen pretrained weight with lazily cached decompositions.
#[derive(Debug)]
pub struct FrozenBase {
    w0: DenseMatrix,
    spectral: OnceLock<SpectralDecomposition>,
    triangular: OnceLock<TriangularDecomposition>,
}

impl FrozenBase {
    pub fn new(w0: DenseMatrix) -> Self {
        Self {
            w0,
            spectral: OnceLock::new(),
            triangular: OnceLock::new(),
        }
    }

    pub fn w0(&self) -> &DenseMatrix {
        &self.w0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.w0.shape()
    }

    pub fn spectral(&self) -> Result<&SpectralDecomposition> {
        if let Some(s) = self.spectral.get() {
            return Ok(s);
        }
        let s = svd(&self.w0)?;
        Ok(self.spectral.get_or_init(|| s))
    }

    pub fn triangular(&self) -> Result<&TriangularDecomposition> {
        if let Some(t) = self.triangular.get() {
            return Ok(t);
        }
        let t = lq(&self.w0)?;
        Ok(self.triangular.get_or_init(|| t))
    }
}

impl Clone for FrozenBase {
    fn clone(&self) -> Self {
        Self {
            w0: self.w0.clone(),
            spectral: self.spectral.clone(),
            triangular: self.triangular.clone(),
        }
    }
}

/// How an adapter is shaped.
///
/// `rank` is the LoRA rank, the number of OFT blocks, or the number of
/// Kronecker factors, depending on the method.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterConfig {
    pub method: Method,
    pub rank: usize,
    pub constraint: Constraint,
    /// Overrides the balanced Kronecker factorization when set.
    pub kron_sizes: Option<Vec<usize>>,
}

impl AdapterConfig {
    pub fn new(method: Method, rank: usize) -> Self {
        Self {
            method,
            rank,
            constraint: Constraint::Relu,
            kron_sizes: None,
        }
    }

    pub fn with_constraint(mut self, constraint: Constraint) -> Self {
        self.constraint = constraint;
        self
    }

    pub fn with_kron_sizes(mut self, sizes: Vec<usize>) -> Self {
        self.kron_sizes = Some(sizes);
        self
    }

    /// Dimension the orthogonal part acts on, for a base of shape `m×n`.
    pub fn rotation_dim(&self, m: usize, n: usize) -> usize {
        match self.method {
            Method::SodaSvd => m.min(n),
            _ => n,
        }
    }

    /// Kronecker factor sizes for Kronecker-based methods.
    pub fn resolved_kron_sizes(&self, m: usize, n: usize) -> Result<Vec<usize>> {
        let dim = self.rotation_dim(m, n);
        match &self.kron_sizes {
            Some(sizes) => {
                if sizes.is_empty() || sizes.iter().product::<usize>() != dim {
                    return Err(SodaError::Config(format!(
                        "Kronecker sizes {sizes:?} do not multiply to {dim}"
                    )));
                }
                Ok(sizes.clone())
            }
            None => choose_kron_factorization(dim, self.rank),
        }
    }
}

/// Trainable parameters, one variant per method. The same shape carries
/// parameter gradients.
#[derive(Debug, Clone, PartialEq)]
pub enum Trainables {
    Lora {
        b: DenseMatrix,
        a: DenseMatrix,
    },
    Oft {
        blocks: Vec<DenseMatrix>,
    },
    OftShared {
        block: DenseMatrix,
    },
    Koft {
        rotation: KroneckerRotation,
    },
    Svdiff {
        delta: Vec<f64>,
    },
    SodaSvd {
        delta: Vec<f64>,
        rotation: KroneckerRotation,
    },
    SodaQr {
        delta: Vec<f64>,
        rotation: KroneckerRotation,
    },
}

pub type ParameterGradients = Trainables;

impl Trainables {
    pub fn method(&self) -> Method {
        match self {
            Trainables::Lora { .. } => Method::Lora,
            Trainables::Oft { .. } => Method::Oft,
            Trainables::OftShared { .. } => Method::OftShared,
            Trainables::Koft { .. } => Method::Koft,
            Trainables::Svdiff { .. } => Method::Svdiff,
            Trainables::SodaSvd { .. } => Method::SodaSvd,
            Trainables::SodaQr { .. } => Method::SodaQr,
        }
    }

    /// Every orthogonal factor, in a fixed order.
    pub fn rotations(&self) -> &[DenseMatrix] {
        match self {
            Trainables::Oft { blocks } => blocks,
            Trainables::OftShared { block } => std::slice::from_ref(block),
            Trainables::Koft { rotation }
            | Trainables::SodaSvd { rotation, .. }
            | Trainables::SodaQr { rotation, .. } => &rotation.factors,
            Trainables::Lora { .. } | Trainables::Svdiff { .. } => &[],
        }
    }

    pub fn rotations_mut(&mut self) -> &mut [DenseMatrix] {
        match self {
            Trainables::Oft { blocks } => blocks,
            Trainables::OftShared { block } => std::slice::from_mut(block),
            Trainables::Koft { rotation }
            | Trainables::SodaSvd { rotation, .. }
            | Trainables::SodaQr { rotation, .. } => &mut rotation.factors,
            Trainables::Lora { .. } | Trainables::Svdiff { .. } => &mut [],
        }
    }

    pub fn delta(&self) -> Option<&[f64]> {
        match self {
            Trainables::Svdiff { delta } | Trainables::SodaSvd { delta, .. } | Trainables::SodaQr { delta, .. } => {
                Some(delta)
            }
            _ => None,
        }
    }

    pub fn delta_mut(&mut self) -> Option<&mut Vec<f64>> {
        match self {
            Trainables::Svdiff { delta } | Trainables::SodaSvd { delta, .. } | Trainables::SodaQr { delta, .. } => {
                Some(delta)
            }
            _ => None,
        }
    }

    pub fn lora(&self) -> Option<(&DenseMatrix, &DenseMatrix)> {
        match self {
            Trainables::Lora { b, a } => Some((b, a)),
            _ => None,
        }
    }

    pub fn lora_mut(&mut self) -> Option<(&mut DenseMatrix, &mut DenseMatrix)> {
        match self {
            Trainables::Lora { b, a } => Some((b, a)),
            _ => None,
        }
    }

    /// All trainable scalars in a fixed order: LoRA `b` then `a`, then `δ`,
    /// then each orthogonal factor row-major.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.scalar_count());
        if let Some((b, a)) = self.lora() {
            out.extend_from_slice(b.data());
            out.extend_from_slice(a.data());
        }
        if let Some(d) = self.delta() {
            out.extend_from_slice(d);
        }
        for r in self.rotations() {
            out.extend_from_slice(r.data());
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn assign_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.scalar_count() {
            return Err(SodaError::shape(
                "assign_flat",
                format!("expected {} values, got {}", self.scalar_count(), values.len()),
            ));
        }
        let mut it = values.iter().copied();
        if let Some((b, a)) = self.lora_mut() {
            b.data_mut().iter_mut().for_each(|v| *v = it.next().unwrap());
            a.data_mut().iter_mut().for_each(|v| *v = it.next().unwrap());
        }
        if let Some(d) = self.delta_mut() {
            d.iter_mut().for_each(|v| *v = it.next().unwrap());
        }
        for r in self.rotations_mut() {
            r.data_mut().iter_mut().for_each(|v| *v = it.next().unwrap());
        }
        Ok(())
    }

    pub fn scalar_count(&self) -> usize {
        let lora = self.lora().map_or(0, |(b, a)| b.data().len() + a.data().len());
        let delta = self.delta().map_or(0, <[f64]>::len);
        let rot: usize = self.rotations().iter().map(|r| r.data().len()).sum();
        lora + delta + rot
    }

    /// Worst orthogonality defect across the orthogonal factors (0 if none).
    pub fn max_defect(&self) -> f64 {
        self.rotations()
            .iter()
            .map(crate::linalg::orthogonality_defect)
            .fold(0.0, f64::max)
    }
}

/// An adapter attached to a particular base shape.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterState {
    pub constraint: Constraint,
    pub rank: usize,
    pub trainables: Trainables,
}

impl AdapterState {
    /// Fresh adapter whose effective weight equals `W₀`: LoRA `b = 0` with
    /// `a ~ U(−1/√n, 1/√n)`, identity rotations, and identity spectral shifts.
    pub fn init(base: &FrozenBase, config: &AdapterConfig, rng: &mut impl Rng) -> Result<Self> {
        let (m, n) = base.shape();
        config.validate(m, n)?;
        let kron = || -> Result<KroneckerRotation> { KroneckerRotation::identity(&config.resolved_kron_sizes(m, n)?) };
        let spectral_delta = || -> Result<Vec<f64>> {
            Ok(base
                .spectral()?
                .sigma
                .iter()
                .map(|&s| config.constraint.identity_shift(s))
                .collect())
        };
        let trainables = match config.method {
            Method::Lora => Trainables::Lora {
                b: DenseMatrix::zeros(m, config.rank),
                a: uniform(rng, config.rank, n, 1.0 / (n as f64).sqrt()),
            },
            Method::Oft => Trainables::Oft {
                blocks: vec![DenseMatrix::identity(n / config.rank); config.rank],
            },
            Method::OftShared => Trainables::OftShared {
                block: DenseMatrix::identity(n / config.rank),
            },
            Method::Koft => Trainables::Koft { rotation: kron()? },
            Method::Svdiff => Trainables::Svdiff {
                delta: spectral_delta()?,
            },
            Method::SodaSvd => Trainables::SodaSvd {
                delta: spectral_delta()?,
                rotation: kron()?,
            },
            Method::SodaQr => {
                base.triangular()?;
                Trainables::SodaQr {
                    delta: vec![0.0; m],
                    rotation: kron()?,
                }
            }
        };
        Ok(Self {
            constraint: config.constraint,
            rank: config.rank,
            trainables,
        })
    }

    pub fn method(&self) -> Method {
        self.trainables.method()
    }

    /// Checks that the trainables fit a base of shape `m×n`.
    pub fn check_shape(&self, m: usize, n: usize) -> Result<()> {
        let k = m.min(n);
        let fail = |detail: String| Err(SodaError::shape("adapter", detail));
        match &self.trainables {
            Trainables::Lora { b, a } => {
                if b.rows() != m || a.cols() != n || b.cols() != a.rows() {
                    return fail(format!(
                        "LoRA factors {:?}·{:?} do not fit {m}x{n}",
                        b.shape(),
                        a.shape()
                    ));
                }
            }
            Trainables::Oft { blocks } => {
                let total: usize = blocks.iter().map(DenseMatrix::rows).sum();
                if total != n || blocks.iter().any(|b| !b.is_square()) {
                    return fail(format!("OFT blocks cover {total} of {n} inputs"));
                }
            }
            Trainables::OftShared { block } => {
                if !block.is_square() || !n.is_multiple_of(block.rows()) {
                    return fail(format!("shared block {:?} does not tile {n}", block.shape()));
                }
            }
            Trainables::Koft { rotation } => {
                if rotation.dim() != n {
                    return fail(format!("rotation dim {} for {n} inputs", rotation.dim()));
                }
            }
            Trainables::Svdiff { delta } => {
                if delta.len() != k {
                    return fail(format!("{} shifts for {k} singular values", delta.len()));
                }
            }
            Trainables::SodaSvd { delta, rotation } => {
                if delta.len() != k || rotation.dim() != k {
                    return fail(format!(
                        "{} shifts and rotation dim {} for k = {k}",
                        delta.len(),
                        rotation.dim()
                    ));
                }
            }
            Trainables::SodaQr { delta, rotation } => {
                if m > n || delta.len() != m || rotation.dim() != n {
                    return fail(format!(
                        "{} shifts and rotation dim {} for {m}x{n}",
                        delta.len(),
                        rotation.dim()
                    ));
                }
            }
        }
        Ok(())
    }
}

impl AdapterConfig {
    pub fn validate(&self, m: usize, n: usize) -> Result<()> {
        if self.rank == 0 {
            return Err(SodaError::Config("rank must be at least 1".into()));
        }
        match self.method {
            Method::Oft | Method::OftShared if !n.is_multiple_of(self.rank) => Err(SodaError::Config(format!(
                "{}: input dimension {n} is not divisible into {} blocks",
                self.method, self.rank
            ))),
            Method::SodaQr if m > n => Err(SodaError::Config(format!(
                "SODA_QR needs rows <= cols for the LQ factorization, got {m}x{n}"
            ))),
            method if method.uses_kronecker() => self.resolved_kron_sizes(m, n).map(|_| ()),
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests;
