//! Dense linear algebra on `f64` matrices.

mod decomp;
pub mod io;
mod matrix;

pub use decomp::{
    determinant, lq, qr_orthonormalize, reconstruct_with, solve, svd, SpectralDecomposition, TriangularDecomposition,
};
pub use matrix::DenseMatrix;

use crate::error::{Result, SodaError};

pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    a.matmul(b)
}

/// Kronecker product: block `(i, j)` of the result is `a[i][j] · b`.
pub fn kron(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    let rows = a
        .rows()
        .checked_mul(b.rows())
        .ok_or_else(|| SodaError::Size("kron row count overflows".into()))?;
    let cols = a
        .cols()
        .checked_mul(b.cols())
        .ok_or_else(|| SodaError::Size("kron column count overflows".into()))?;
    rows.checked_mul(cols)
        .ok_or_else(|| SodaError::Size(format!("kron result {rows}x{cols} overflows")))?;
    let (br, bc) = b.shape();
    let mut out = DenseMatrix::zeros(rows, cols);
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            let s = a[(i, j)];
            for p in 0..br {
                for q in 0..bc {
                    out[(i * br + p, j * bc + q)] = s * b[(p, q)];
                }
            }
        }
    }
    Ok(out)
}

/// Left-to-right Kronecker product of a non-empty factor list.
pub fn kron_all(factors: &[DenseMatrix]) -> Result<DenseMatrix> {
    let (first, rest) = factors
        .split_first()
        .ok_or_else(|| SodaError::Config("empty Kronecker factor list".into()))?;
    rest.iter().try_fold(first.clone(), |acc, f| kron(&acc, f))
}

pub fn frobenius_norm(a: &DenseMatrix) -> f64 {
    a.frobenius_norm()
}

/// `‖aᵀa − I‖_F`, the distance of `a`'s columns from orthonormality.
pub fn orthogonality_defect(a: &DenseMatrix) -> f64 {
    let g = a.tr_matmul(a).expect("aᵀa is always defined");
    let n = g.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            let d = g[(i, j)] - if i == j { 1.0 } else { 0.0 };
            s += d * d;
        }
    }
    s.sqrt()
}

/// Skew-symmetric matrix stored by its strict lower triangle, row-major:
/// entry `(i, j)` with `i > j` lives at `i(i−1)/2 + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct SkewSymmetric {
    dim: usize,
    lower: Vec<f64>,
}

impl SkewSymmetric {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            lower: vec![0.0; dim * dim.saturating_sub(1) / 2],
        }
    }

    pub fn from_lower(dim: usize, lower: Vec<f64>) -> Result<Self> {
        let want = dim * dim.saturating_sub(1) / 2;
        if dim == 0 || lower.len() != want {
            return Err(SodaError::shape(
                "SkewSymmetric::from_lower",
                format!("dim {dim} needs {want} entries, got {}", lower.len()),
            ));
        }
        Ok(Self { dim, lower })
    }

    /// Reads the strict lower triangle of a square matrix.
    pub fn from_lower_of(m: &DenseMatrix) -> Self {
        let dim = m.rows();
        let mut s = Self::zeros(dim);
        for i in 1..dim {
            for j in 0..i {
                s.lower[Self::index(i, j)] = m[(i, j)];
            }
        }
        s
    }

    #[inline]
    fn index(i: usize, j: usize) -> usize {
        i * (i - 1) / 2 + j
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[f64] {
        &self.lower
    }

    pub fn entries_mut(&mut self) -> &mut [f64] {
        &mut self.lower
    }

    pub fn to_matrix(&self) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(self.dim, self.dim);
        for i in 1..self.dim {
            for j in 0..i {
                let v = self.lower[Self::index(i, j)];
                m[(i, j)] = v;
                m[(j, i)] = -v;
            }
        }
        m
    }
}

/// Cayley map `R = (I + S)(I − S)⁻¹`. The two factors commute, so this is
/// computed as the solve `(I − S) R = I + S`.
pub fn cayley(s: &SkewSymmetric) -> Result<DenseMatrix> {
    let sm = s.to_matrix();
    let eye = DenseMatrix::identity(s.dim());
    let plus = eye.add(&sm)?;
    let minus = eye.sub(&sm)?;
    solve(&minus, &plus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive_matmul(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
        let mut c = DenseMatrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a[(i, k)] * b[(k, j)];
                }
                c[(i, j)] = s;
            }
        }
        c
    }

    fn swap2() -> DenseMatrix {
        DenseMatrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]])
    }

    fn matrix_strategy(r: usize, c: usize) -> impl Strategy<Value = DenseMatrix> {
        proptest::collection::vec(-3.0f64..3.0, r * c).prop_map(move |d| DenseMatrix::new(r, c, d).unwrap())
    }

    fn int_matrix(r: usize, c: usize) -> impl Strategy<Value = DenseMatrix> {
        proptest::collection::vec(-4i32..5, r * c)
            .prop_map(move |d| DenseMatrix::new(r, c, d.into_iter().map(f64::from).collect()).unwrap())
    }

    fn rotation2(theta: f64) -> DenseMatrix {
        DenseMatrix::from_rows(&[[theta.cos(), -theta.sin()], [theta.sin(), theta.cos()]])
    }

    #[test]
    fn matmul_examples() {
        let a = DenseMatrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(matmul(&DenseMatrix::identity(2), &a).unwrap(), a);
        assert_eq!(
            matmul(&swap2(), &a).unwrap(),
            DenseMatrix::from_rows(&[[3.0, 4.0], [1.0, 2.0]])
        );
        assert!(matches!(
            matmul(&a, &DenseMatrix::zeros(3, 1)),
            Err(SodaError::Shape { .. })
        ));
    }

    #[test]
    fn kron_examples() {
        assert_eq!(
            kron(&DenseMatrix::identity(2), &DenseMatrix::identity(2)).unwrap(),
            DenseMatrix::identity(4)
        );
        let p = kron(&swap2(), &DenseMatrix::identity(2)).unwrap();
        let expect = DenseMatrix::from_rows(&[
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
        ]);
        assert_eq!(p, expect);
    }

    #[test]
    fn kron_of_orthogonal_is_orthogonal() {
        let q1 = rotation2(0.7);
        let s = SkewSymmetric::from_lower(3, vec![0.3, -1.2, 0.5]).unwrap();
        let q2 = cayley(&s).unwrap();
        let k = kron(&q1, &q2).unwrap();
        let g = naive_matmul(&k.transpose(), &k);
        let defect = g.sub(&DenseMatrix::identity(6)).unwrap().frobenius_norm();
        assert!(defect <= 1e-12, "{defect}");
    }

    #[test]
    fn norm_and_defect_examples() {
        assert_eq!(frobenius_norm(&DenseMatrix::zeros(2, 3)), 0.0);
        assert_eq!(frobenius_norm(&DenseMatrix::identity(3)), 3f64.sqrt());
        assert_eq!(frobenius_norm(&DenseMatrix::from_rows(&[[3.0, 4.0]])), 5.0);
        assert_eq!(orthogonality_defect(&DenseMatrix::identity(4)), 0.0);
        let d = orthogonality_defect(&DenseMatrix::identity(2).scale(2.0));
        assert!((d - 3.0 * 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn cayley_examples() {
        assert_eq!(cayley(&SkewSymmetric::zeros(3)).unwrap(), DenseMatrix::identity(3));
        // one free entry: S[1][0] = -1 gives S = [[0, 1], [-1, 0]]
        let s = SkewSymmetric::from_lower(2, vec![-1.0]).unwrap();
        let r = cayley(&s).unwrap();
        let expect = DenseMatrix::from_rows(&[[0.0, 1.0], [-1.0, 0.0]]);
        assert!(r.sub(&expect).unwrap().max_abs() < 1e-15);

        let s = SkewSymmetric::from_lower(4, vec![0.4, -1.1, 2.0, 0.3, 0.9, -0.7]).unwrap();
        let r = cayley(&s).unwrap();
        assert!(orthogonality_defect(&r) <= 1e-12);
        assert!((determinant(&r).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn skew_symmetric_materializes_exactly() {
        let s = SkewSymmetric::from_lower(3, vec![1.5, -2.0, 0.25]).unwrap();
        let m = s.to_matrix();
        assert_eq!(m.transpose(), m.scale(-1.0));
        assert_eq!(SkewSymmetric::from_lower_of(&m), s);
    }

    proptest! {
        #[test]
        fn matmul_matches_triple_loop(a in matrix_strategy(5, 3), b in matrix_strategy(3, 4)) {
            prop_assert_eq!(matmul(&a, &b).unwrap(), naive_matmul(&a, &b));
        }

        #[test]
        fn kron_is_associative(a in int_matrix(2, 2), b in int_matrix(2, 3), c in int_matrix(3, 2)) {
            let left = kron(&kron(&a, &b).unwrap(), &c).unwrap();
            let right = kron(&a, &kron(&b, &c).unwrap()).unwrap();
            prop_assert_eq!(left, right);
        }

        #[test]
        fn mixed_product(a in matrix_strategy(2, 2), b in matrix_strategy(3, 3),
                         c in matrix_strategy(2, 2), d in matrix_strategy(3, 3)) {
            let lhs = kron(&a, &b).unwrap().matmul(&kron(&c, &d).unwrap()).unwrap();
            let rhs = kron(&a.matmul(&c).unwrap(), &b.matmul(&d).unwrap()).unwrap();
            let err = lhs.sub(&rhs).unwrap().frobenius_norm();
            prop_assert!(err <= 1e-12 * (1.0 + rhs.frobenius_norm()));
        }

        #[test]
        fn svd_of_reconstruction_keeps_sigma(w in matrix_strategy(5, 4)) {
            let d = svd(&w).unwrap();
            let again = svd(&d.reconstruct()).unwrap();
            for (a, b) in d.sigma.iter().zip(&again.sigma) {
                prop_assert!((a - b).abs() <= 1e-10);
            }
        }

        #[test]
        fn frobenius_unitary_invariance(w in matrix_strategy(4, 4), x in matrix_strategy(4, 4),
                                        y in matrix_strategy(4, 4)) {
            let u = qr_orthonormalize(&x).unwrap();
            let v = qr_orthonormalize(&y).unwrap();
            let rotated = u.tr_matmul(&w).unwrap().matmul(&v).unwrap();
            prop_assert!((rotated.frobenius_norm() - w.frobenius_norm()).abs() <= 1e-10);
        }

        #[test]
        fn cayley_is_special_orthogonal(lower in proptest::collection::vec(-5.0f64..5.0, 6)) {
            let r = cayley(&SkewSymmetric::from_lower(4, lower).unwrap()).unwrap();
            prop_assert!(orthogonality_defect(&r) <= 1e-12);
            prop_assert!((determinant(&r).unwrap() - 1.0).abs() <= 1e-10);
        }
    }
}
