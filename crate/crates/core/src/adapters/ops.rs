use super::kron::{choose_kron_factorization, kron_factor_gradients, KroneckerRotation};
use super::{AdapterState, FrozenBase, Method, ParameterGradients, Trainables};
use crate::error::{Result, SodaError};
use crate::linalg::{reconstruct_with, DenseMatrix};

/// `W₀ · blockdiag(blocks)` computed block column by block column.
fn right_block_diag(w0: &DenseMatrix, blocks: &[&DenseMatrix]) -> Result<DenseMatrix> {
    let mut out = DenseMatrix::zeros(w0.rows(), w0.cols());
    let mut off = 0;
    for b in blocks {
        let s = b.rows();
        let slab = w0.block(0, off, w0.rows(), s).matmul(b)?;
        out.set_block(0, off, &slab);
        off += s;
    }
    Ok(out)
}

/// Constrained singular values `c(σ + δ)` for the SVD-based methods.
pub fn effective_spectrum(base: &FrozenBase, state: &AdapterState) -> Result<Option<Vec<f64>>> {
    match &state.trainables {
        Trainables::Svdiff { delta } | Trainables::SodaSvd { delta, .. } => {
            let sigma = &base.spectral()?.sigma;
            Ok(Some(
                sigma
                    .iter()
                    .zip(delta)
                    .map(|(s, d)| state.constraint.apply(s + d))
                    .collect(),
            ))
        }
        _ => Ok(None),
    }
}

pub fn effective_weight(base: &FrozenBase, state: &AdapterState) -> Result<DenseMatrix> {
    let (m, n) = base.shape();
    state.check_shape(m, n)?;
    let w0 = base.w0();
    match &state.trainables {
        Trainables::Lora { b, a } => w0.add(&b.matmul(a)?),
        Trainables::Oft { blocks } => right_block_diag(w0, &blocks.iter().collect::<Vec<_>>()),
        Trainables::OftShared { block } => right_block_diag(w0, &vec![block; n / block.rows()]),
        Trainables::Koft { rotation } => w0.matmul(&rotation.materialize()),
        Trainables::Svdiff { .. } => {
            let dec = base.spectral()?;
            let s = effective_spectrum(base, state)?.expect("spectral method");
            Ok(reconstruct_with(&dec.u, &s, &dec.vt))
        }
        Trainables::SodaSvd { rotation, .. } => {
            let dec = base.spectral()?;
            let s = effective_spectrum(base, state)?.expect("spectral method");
            // (V₀K)ᵀ = Kᵀ·V₀ᵀ
            let vrt = rotation.materialize().tr_matmul(&dec.vt)?;
            Ok(reconstruct_with(&dec.u, &s, &vrt))
        }
        Trainables::SodaQr { delta, rotation } => {
            let dec = base.triangular()?;
            let mut l = dec.l.clone();
            for (i, d) in delta.iter().enumerate() {
                l[(i, i)] += d;
            }
            l.matmul(&dec.q)?.matmul(&rotation.materialize())
        }
    }
}

/// `h = W·x` for a batch of column inputs `x (n×batch)`. LoRA takes the
/// factored route `W₀x + B(Ax)`.
pub fn forward(base: &FrozenBase, state: &AdapterState, x: &DenseMatrix) -> Result<DenseMatrix> {
    let (m, n) = base.shape();
    if x.rows() != n {
        return Err(SodaError::shape(
            "forward",
            format!("input has {} rows, layer expects {n}", x.rows()),
        ));
    }
    state.check_shape(m, n)?;
    match &state.trainables {
        Trainables::Lora { b, a } => base.w0().matmul(x)?.add(&b.matmul(&a.matmul(x)?)?),
        _ => effective_weight(base, state)?.matmul(x),
    }
}

/// Gradients of a loss with respect to every trainable, given the upstream
/// gradient `dh = ∂l/∂h` for the batch `x`. The weight gradient is
/// `G = dh·xᵀ`; each method pulls `G` back through its parameterization.
pub fn backward(
    base: &FrozenBase,
    state: &AdapterState,
    x: &DenseMatrix,
    dh: &DenseMatrix,
) -> Result<ParameterGradients> {
    let (m, n) = base.shape();
    if x.rows() != n || dh.rows() != m || x.cols() != dh.cols() {
        return Err(SodaError::shape(
            "backward",
            format!("x is {:?}, dh is {:?}, layer is {m}x{n}", x.shape(), dh.shape()),
        ));
    }
    state.check_shape(m, n)?;
    let g = dh.matmul_tr(x)?;
    backward_from_weight_grad(base, state, &g)
}

/// Same as [`backward`] but starting from `∂l/∂W`.
pub fn backward_from_weight_grad(
    base: &FrozenBase,
    state: &AdapterState,
    g: &DenseMatrix,
) -> Result<ParameterGradients> {
    let w0 = base.w0();
    if g.shape() != w0.shape() {
        return Err(SodaError::shape(
            "backward",
            format!("weight gradient {:?} for a {:?} layer", g.shape(), w0.shape()),
        ));
    }
    let c = state.constraint;
    Ok(match &state.trainables {
        Trainables::Lora { b, a } => Trainables::Lora {
            b: g.matmul_tr(a)?,
            a: b.tr_matmul(g)?,
        },
        Trainables::Oft { blocks } => {
            let gd = w0.tr_matmul(g)?;
            let mut off = 0;
            let grads = blocks
                .iter()
                .map(|blk| {
                    let s = blk.rows();
                    let out = gd.block(off, off, s, s);
                    off += s;
                    out
                })
                .collect();
            Trainables::Oft { blocks: grads }
        }
        Trainables::OftShared { block } => {
            let gd = w0.tr_matmul(g)?;
            let s = block.rows();
            let mut acc = DenseMatrix::zeros(s, s);
            for j in 0..gd.rows() / s {
                acc.axpy(1.0, &gd.block(j * s, j * s, s, s))?;
            }
            Trainables::OftShared { block: acc }
        }
        Trainables::Koft { rotation } => {
            let gk = w0.tr_matmul(g)?;
            Trainables::Koft {
                rotation: KroneckerRotation {
                    factors: kron_factor_gradients(&rotation.factors, &gk)?,
                },
            }
        }
        Trainables::Svdiff { delta } => {
            let dec = base.spectral()?;
            // (Uᵀ G V)_ii, masked by the constraint derivative
            let ug = dec.u.tr_matmul(g)?;
            let grad = (0..delta.len())
                .map(|i| {
                    let proj: f64 = ug.row(i).iter().zip(dec.vt.row(i)).map(|(a, b)| a * b).sum();
                    proj * c.derivative(dec.sigma[i] + delta[i])
                })
                .collect();
            Trainables::Svdiff { delta: grad }
        }
        Trainables::SodaSvd { delta, rotation } => {
            let dec = base.spectral()?;
            let k = delta.len();
            let kmat = rotation.materialize();
            let ug = dec.u.tr_matmul(g)?;
            // P = Uᵀ G V₀ (k×k); diag(Uᵀ G V_R) = diag(P K)
            let p = ug.matmul_tr(&dec.vt)?;
            let pk = p.matmul(&kmat)?;
            let s: Vec<f64> = dec.sigma.iter().zip(delta).map(|(s, d)| c.apply(s + d)).collect();
            let grad_delta = (0..k)
                .map(|i| pk[(i, i)] * c.derivative(dec.sigma[i] + delta[i]))
                .collect();
            // W = U S Kᵀ V₀ᵀ  ⇒  ∂l/∂K = (S P)ᵀ
            let gk = DenseMatrix::from_fn(k, k, |x, y| p[(y, x)] * s[y]);
            Trainables::SodaSvd {
                delta: grad_delta,
                rotation: KroneckerRotation {
                    factors: kron_factor_gradients(&rotation.factors, &gk)?,
                },
            }
        }
        Trainables::SodaQr { delta, rotation } => {
            let dec = base.triangular()?;
            let qk = dec.q.matmul(&rotation.materialize())?;
            let grad_delta = (0..delta.len())
                .map(|i| g.row(i).iter().zip(qk.row(i)).map(|(a, b)| a * b).sum())
                .collect();
            let mut l = dec.l.clone();
            for (i, d) in delta.iter().enumerate() {
                l[(i, i)] += d;
            }
            let gk = l.matmul(&dec.q)?.tr_matmul(g)?;
            Trainables::SodaQr {
                delta: grad_delta,
                rotation: KroneckerRotation {
                    factors: kron_factor_gradients(&rotation.factors, &gk)?,
                },
            }
        }
    })
}

fn kron_scalars(dim: usize, r: usize) -> Result<usize> {
    Ok(choose_kron_factorization(dim, r)?.iter().map(|s| s * s).sum())
}

/// Trainable scalar count of a method on an `m×n` layer with structure
/// parameter `r` (LoRA rank, OFT block count, or Kronecker factor count).
///
/// Orthogonal factors are counted at their full `s×s` size. For square
/// layers and `n` a perfect `r`-th power these reduce to `2nr`, `n²/r`,
/// `n²/r²`, `r·n^{2/r}` and `n + r·n^{2/r}`.
pub fn param_count(method: Method, m: usize, n: usize, r: usize) -> Result<usize> {
    if m == 0 || n == 0 || r == 0 {
        return Err(SodaError::Config(format!(
            "dimensions and r must be positive, got m={m}, n={n}, r={r}"
        )));
    }
    let k = m.min(n);
    Ok(match method {
        Method::Lora => r * (m + n),
        Method::Oft | Method::OftShared => {
            if !n.is_multiple_of(r) {
                return Err(SodaError::Config(format!(
                    "{method}: {n} is not divisible into {r} blocks"
                )));
            }
            let s = n / r;
            if method == Method::Oft {
                r * s * s
            } else {
                s * s
            }
        }
        Method::Koft => kron_scalars(n, r)?,
        Method::Svdiff => k,
        Method::SodaSvd => k + kron_scalars(k, r)?,
        Method::SodaQr => {
            if m > n {
                return Err(SodaError::Config(format!("SODA_QR needs rows <= cols, got {m}x{n}")));
            }
            m + kron_scalars(n, r)?
        }
    })
}

/// The closed-form square-layer count, where it is an integer with a
/// structural meaning: OFT variants need `r | n`, Kronecker variants need
/// `n` to be a perfect `r`-th power (equal factor sizes). SODA_SVD and
/// SODA_QR share the SODA formula.
pub fn table_formula_count(method: Method, n: usize, r: usize) -> Option<usize> {
    if n == 0 || r == 0 {
        return None;
    }
    let root = integer_root(n, r);
    match method {
        Method::Lora => Some(2 * n * r),
        Method::Oft => n.is_multiple_of(r).then(|| n * n / r),
        Method::OftShared => n.is_multiple_of(r).then(|| n * n / (r * r)),
        Method::Koft => root.map(|s| r * s * s),
        Method::Svdiff => Some(n),
        Method::SodaSvd | Method::SodaQr => root.map(|s| n + r * s * s),
    }
}

fn integer_root(n: usize, r: usize) -> Option<usize> {
    (1..=n)
        .take_while(|s| s.checked_pow(r as u32).is_some_and(|p| p <= n))
        .find(|s| s.pow(r as u32) == n)
}

/// `ΔW = W_eff − W₀`.
pub fn residual(base: &FrozenBase, state: &AdapterState) -> Result<DenseMatrix> {
    match &state.trainables {
        Trainables::Lora { b, a } => {
            let (m, n) = base.shape();
            state.check_shape(m, n)?;
            b.matmul(a)
        }
        _ => effective_weight(base, state)?.sub(base.w0()),
    }
}

/// Arithmetic merge `ΔW₁ + ΔW₂`.
pub fn merge(dw1: &DenseMatrix, dw2: &DenseMatrix) -> Result<DenseMatrix> {
    dw1.add(dw2)
        .map_err(|_| SodaError::shape("merge", format!("{:?} vs {:?}", dw1.shape(), dw2.shape())))
}

/// Part of a weight change a spectral-only update can express.
#[derive(Debug, Clone)]
pub struct SpectralProjection {
    /// `(Uᵀ ΔW V) ⊙ I`.
    pub delta_sigma: DenseMatrix,
    /// `ΔW′ = U · ΔΣ · Vᵀ`.
    pub projected: DenseMatrix,
    /// `‖ΔW′‖_F`.
    pub projected_norm: f64,
}

pub fn spectral_projection_delta(u: &DenseMatrix, v: &DenseMatrix, dw: &DenseMatrix) -> Result<SpectralProjection> {
    if u.rows() != dw.rows() || v.rows() != dw.cols() {
        return Err(SodaError::shape(
            "spectral_projection_delta",
            format!("U {:?}, V {:?}, ΔW {:?}", u.shape(), v.shape(), dw.shape()),
        ));
    }
    let full = u.tr_matmul(dw)?.matmul(v)?;
    let delta_sigma = DenseMatrix::rect_diag(full.rows(), full.cols(), &full.diagonal());
    let projected = u.matmul(&delta_sigma)?.matmul_tr(v)?;
    let projected_norm = projected.frobenius_norm();
    Ok(SpectralProjection {
        delta_sigma,
        projected,
        projected_norm,
    })
}
