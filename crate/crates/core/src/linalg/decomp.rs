//! Dense factorizations: one-sided Jacobi SVD, row Gram–Schmidt LQ,
//! LU-based solves and determinants, and the QR retraction built on LQ.

use super::matrix::{dot, DenseMatrix};
use crate::error::{Result, SodaError};

const MAX_SWEEPS: usize = 100;
const OFF_DIAGONAL_TOL: f64 = 1e-14;

/// Thin SVD `W = U · diag(σ) · Vᵀ` with `k = min(m, n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralDecomposition {
    pub u: DenseMatrix,
    pub sigma: Vec<f64>,
    pub vt: DenseMatrix,
}

impl SpectralDecomposition {
    pub fn rank_dim(&self) -> usize {
        self.sigma.len()
    }

    /// `V` as an `n×k` matrix.
    pub fn v(&self) -> DenseMatrix {
        self.vt.transpose()
    }

    pub fn reconstruct(&self) -> DenseMatrix {
        reconstruct_with(&self.u, &self.sigma, &self.vt)
    }
}

/// `u · diag(values) · vt`.
pub fn reconstruct_with(u: &DenseMatrix, values: &[f64], vt: &DenseMatrix) -> DenseMatrix {
    let scaled = DenseMatrix::from_fn(u.rows(), u.cols(), |i, j| u[(i, j)] * values[j]);
    scaled.matmul(vt).expect("factor shapes agree")
}

/// `W = L · Q` with `L` lower triangular (`m×m`) and `Q` row-orthonormal (`m×n`).
#[derive(Debug, Clone, PartialEq)]
pub struct TriangularDecomposition {
    pub l: DenseMatrix,
    pub q: DenseMatrix,
}

impl TriangularDecomposition {
    pub fn reconstruct(&self) -> DenseMatrix {
        self.l.matmul(&self.q).expect("factor shapes agree")
    }
}

/// Singular value decomposition by one-sided (Hestenes) Jacobi rotations.
///
/// Singular values come back nonincreasing. Each left singular vector is
/// sign-normalized so its largest-magnitude entry (lowest index on ties) is
/// positive, with the matching row of `vt` flipped alongside.
pub fn svd(w: &DenseMatrix) -> Result<SpectralDecomposition> {
    if !w.is_finite() {
        return Err(SodaError::numeric("svd", "input has non-finite entries"));
    }
    let (m, n) = w.shape();
    let mut dec = if m >= n {
        jacobi_tall(w)?
    } else {
        // W = (Wᵀ)ᵀ = (U' Σ V'ᵀ)ᵀ = V' Σ U'ᵀ
        let t = jacobi_tall(&w.transpose())?;
        SpectralDecomposition {
            u: t.vt.transpose(),
            sigma: t.sigma,
            vt: t.u.transpose(),
        }
    };
    normalize_signs(&mut dec);
    Ok(dec)
}

fn jacobi_tall(w: &DenseMatrix) -> Result<SpectralDecomposition> {
    let (m, n) = w.shape();
    // Rows of `cols` are the columns of W·V, rows of `vcols` the columns of V.
    let mut cols = w.transpose();
    let mut vcols = DenseMatrix::identity(n);
    let wnorm2 = w.frobenius_norm().powi(2);

    let mut converged = wnorm2 == 0.0;
    let mut sweeps = 0;
    let mut last_off = 0.0;
    while !converged {
        if sweeps == MAX_SWEEPS {
            return Err(SodaError::numeric(
                "svd",
                format!(
                    "no convergence after {MAX_SWEEPS} sweeps; off-diagonal mass {last_off:e} (relative to ||W||_F^2 = {wnorm2:e})"
                ),
            ));
        }
        sweeps += 1;
        let mut rotated = false;
        let mut off2 = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(cols.row(p), cols.row(p));
                let beta = dot(cols.row(q), cols.row(q));
                let gamma = dot(cols.row(p), cols.row(q));
                off2 += gamma * gamma;
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_rows(&mut cols, p, q, c, s);
                rotate_rows(&mut vcols, p, q, c, s);
            }
        }
        last_off = off2.sqrt();
        converged = !rotated || last_off <= OFF_DIAGONAL_TOL * wnorm2;
    }

    let mut order: Vec<(usize, f64)> = (0..n).map(|j| (j, dot(cols.row(j), cols.row(j)).sqrt())).collect();
    // Stable sort keeps index order among equal values.
    order.sort_by(|a, b| b.1.total_cmp(&a.1));
    let sigma: Vec<f64> = order.iter().map(|&(_, s)| s).collect();
    let smax = sigma.first().copied().unwrap_or(0.0);
    let tiny = (m.max(n) as f64) * f64::EPSILON * smax;

    let mut ucols: Vec<Option<Vec<f64>>> = order
        .iter()
        .map(|&(j, s)| {
            if s > tiny && s > 0.0 {
                Some(cols.row(j).iter().map(|v| v / s).collect())
            } else {
                None
            }
        })
        .collect();
    complete_orthonormal(&mut ucols, m);

    let u = DenseMatrix::from_fn(m, n, |i, j| ucols[j].as_ref().expect("completed")[i]);
    let vt = DenseMatrix::from_fn(n, n, |i, j| vcols[(order[i].0, j)]);
    Ok(SpectralDecomposition { u, sigma, vt })
}

fn rotate_rows(a: &mut DenseMatrix, p: usize, q: usize, c: f64, s: f64) {
    let cols = a.cols();
    let data = a.data_mut();
    for k in 0..cols {
        let x = data[p * cols + k];
        let y = data[q * cols + k];
        data[p * cols + k] = c * x - s * y;
        data[q * cols + k] = s * x + c * y;
    }
}

/// Fills every `None` slot with a unit vector orthogonal to all others,
/// choosing the standard basis vector with the largest residual.
fn complete_orthonormal(vectors: &mut [Option<Vec<f64>>], dim: usize) {
    for slot in 0..vectors.len() {
        if vectors[slot].is_some() {
            continue;
        }
        let basis: Vec<Vec<f64>> = vectors.iter().flatten().cloned().collect();
        let mut best: Option<(f64, Vec<f64>)> = None;
        for e in 0..dim {
            let mut cand = vec![0.0; dim];
            cand[e] = 1.0;
            for _ in 0..2 {
                for b in &basis {
                    let proj = dot(&cand, b);
                    cand.iter_mut().zip(b).for_each(|(c, bv)| *c -= proj * bv);
                }
            }
            let norm = dot(&cand, &cand).sqrt();
            if best.as_ref().is_none_or(|(bn, _)| norm > *bn) {
                best = Some((norm, cand));
            }
        }
        let (norm, mut cand) = best.expect("dimension is positive");
        cand.iter_mut().for_each(|c| *c /= norm);
        vectors[slot] = Some(cand);
    }
}

fn normalize_signs(dec: &mut SpectralDecomposition) {
    let (m, k) = dec.u.shape();
    for j in 0..k {
        let mut best = 0;
        for i in 1..m {
            if dec.u[(i, j)].abs() > dec.u[(best, j)].abs() {
                best = i;
            }
        }
        if dec.u[(best, j)] < 0.0 {
            for i in 0..m {
                dec.u[(i, j)] = -dec.u[(i, j)];
            }
            for c in 0..dec.vt.cols() {
                dec.vt[(j, c)] = -dec.vt[(j, c)];
            }
        }
    }
}

/// LQ factorization by modified Gram–Schmidt on rows with one
/// re-orthogonalization pass. Rows that are numerically dependent get a zero
/// diagonal in `L` and a completed orthonormal row in `Q`.
pub fn lq(w: &DenseMatrix) -> Result<TriangularDecomposition> {
    let (m, n) = w.shape();
    if m > n {
        return Err(SodaError::shape("lq", format!("lq requires rows <= cols, got {m}x{n}")));
    }
    if !w.is_finite() {
        return Err(SodaError::numeric("lq", "input has non-finite entries"));
    }
    let tol = 1e-13 * w.frobenius_norm();
    let mut l = DenseMatrix::zeros(m, m);
    let mut qrows: Vec<Option<Vec<f64>>> = Vec::with_capacity(m);
    let mut deficient = Vec::new();

    for i in 0..m {
        let mut v = w.row(i).to_vec();
        for _ in 0..2 {
            for (j, q) in qrows.iter().enumerate() {
                let q = q.as_ref().expect("earlier rows are complete");
                let proj = dot(&v, q);
                l[(i, j)] += proj;
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= proj * b);
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm > tol && norm > 0.0 {
            l[(i, i)] = norm;
            qrows.push(Some(v.into_iter().map(|a| a / norm).collect()));
        } else {
            deficient.push(i);
            qrows.push(None);
            complete_orthonormal(&mut qrows, n);
        }
    }

    let q = DenseMatrix::from_fn(m, n, |i, j| qrows[i].as_ref().expect("completed")[j]);
    Ok(TriangularDecomposition { l, q })
}

/// Q factor of the thin QR of a tall matrix, with `R` having a nonnegative
/// diagonal. Used as the Stiefel retraction.
pub fn qr_orthonormalize(x: &DenseMatrix) -> Result<DenseMatrix> {
    if x.rows() < x.cols() {
        return Err(SodaError::shape(
            "qr_orthonormalize",
            format!("needs rows >= cols, got {}x{}", x.rows(), x.cols()),
        ));
    }
    // x = Qᵀ Lᵀ where xᵀ = L Q.
    Ok(lq(&x.transpose())?.q.transpose())
}

struct Lu {
    lu: DenseMatrix,
    perm: Vec<usize>,
    swaps: usize,
}

fn lu_factor(a: &DenseMatrix, op: &'static str) -> Result<Lu> {
    if !a.is_square() {
        return Err(SodaError::shape(op, "matrix must be square"));
    }
    let n = a.rows();
    let mut lu = a.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut swaps = 0;
    let scale = a.max_abs().max(f64::MIN_POSITIVE);
    for k in 0..n {
        let (piv, pval) =
            (k..n)
                .map(|i| (i, lu[(i, k)].abs()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if pval <= 1e-300 || pval <= f64::EPSILON * 1e-4 * scale {
            return Err(SodaError::numeric(
                op,
                format!("matrix is singular to working precision (pivot {pval:e} at column {k})"),
            ));
        }
        if piv != k {
            perm.swap(piv, k);
            swaps += 1;
            for j in 0..n {
                let t = lu[(k, j)];
                lu[(k, j)] = lu[(piv, j)];
                lu[(piv, j)] = t;
            }
        }
        let d = lu[(k, k)];
        for i in (k + 1)..n {
            let f = lu[(i, k)] / d;
            lu[(i, k)] = f;
            for j in (k + 1)..n {
                let v = lu[(k, j)];
                lu[(i, j)] -= f * v;
            }
        }
    }
    Ok(Lu { lu, perm, swaps })
}

/// Solves `A · X = B` by LU with partial pivoting.
pub fn solve(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.rows() != b.rows() {
        return Err(SodaError::shape(
            "solve",
            format!("A is {}x{}, B has {} rows", a.rows(), a.cols(), b.rows()),
        ));
    }
    let Lu { lu, perm, .. } = lu_factor(a, "solve")?;
    let n = a.rows();
    let mut x = DenseMatrix::from_fn(n, b.cols(), |i, j| b[(perm[i], j)]);
    for c in 0..b.cols() {
        for i in 0..n {
            let mut s = x[(i, c)];
            for k in 0..i {
                s -= lu[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[(i, c)];
            for k in (i + 1)..n {
                s -= lu[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s / lu[(i, i)];
        }
    }
    Ok(x)
}

/// Determinant via LU; exactly singular matrices give 0.
pub fn determinant(a: &DenseMatrix) -> Result<f64> {
    match lu_factor(a, "determinant") {
        Ok(Lu { lu, swaps, .. }) => {
            let d: f64 = (0..a.rows()).map(|i| lu[(i, i)]).product();
            Ok(if swaps % 2 == 0 { d } else { -d })
        }
        Err(SodaError::Numeric { .. }) => Ok(0.0),
        Err(e) => Err(e),
    }
}
