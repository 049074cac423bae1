use crate::error::{Result, SodaError};
use crate::linalg::{kron_all, orthogonality_defect, DenseMatrix};

/// Orthogonal matrix stored as the Kronecker product `R₁ ⊗ … ⊗ R_r` of small
/// square factors.
#[derive(Debug, Clone, PartialEq)]
pub struct KroneckerRotation {
    pub factors: Vec<DenseMatrix>,
}

impl KroneckerRotation {
    pub fn identity(sizes: &[usize]) -> Result<Self> {
        if sizes.is_empty() || sizes.contains(&0) {
            return Err(SodaError::Config(format!("invalid Kronecker factor sizes {sizes:?}")));
        }
        Ok(Self {
            factors: sizes.iter().map(|&s| DenseMatrix::identity(s)).collect(),
        })
    }

    pub fn from_factors(factors: Vec<DenseMatrix>) -> Result<Self> {
        if factors.is_empty() {
            return Err(SodaError::Config("empty Kronecker factor list".into()));
        }
        if let Some(f) = factors.iter().find(|f| !f.is_square()) {
            return Err(SodaError::shape(
                "KroneckerRotation",
                format!("factor {:?} is not square", f.shape()),
            ));
        }
        Ok(Self { factors })
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.factors.iter().map(DenseMatrix::rows).collect()
    }

    pub fn dim(&self) -> usize {
        self.factors.iter().map(DenseMatrix::rows).product()
    }

    pub fn materialize(&self) -> DenseMatrix {
        kron_all(&self.factors).expect("factor list is non-empty")
    }

    /// Largest per-factor orthogonality defect.
    pub fn max_factor_defect(&self) -> f64 {
        self.factors.iter().map(orthogonality_defect).fold(0.0, f64::max)
    }
}

/// Gradients of a loss with respect to each Kronecker factor, given the
/// gradient `m` with respect to the materialized product.
///
/// Writing `K = L ⊗ Rᵢ ⊗ T` with `L` the product of the factors before `i`
/// and `T` of those after,
/// `[∂l/∂Rᵢ]_{cd} = Σ_{a,b,e,f} M_{(a·nᵢ+c)·q+e, (b·nᵢ+d)·q+f} · L_{ab} · T_{ef}`.
pub fn kron_factor_gradients(factors: &[DenseMatrix], m: &DenseMatrix) -> Result<Vec<DenseMatrix>> {
    let n: usize = factors.iter().map(DenseMatrix::rows).product();
    if m.shape() != (n, n) {
        return Err(SodaError::shape(
            "kron_factor_gradients",
            format!("gradient {:?} for a {n}x{n} Kronecker product", m.shape()),
        ));
    }
    let one = DenseMatrix::identity(1);
    let mut grads = Vec::with_capacity(factors.len());
    for i in 0..factors.len() {
        let left = if i == 0 { one.clone() } else { kron_all(&factors[..i])? };
        let right = if i + 1 == factors.len() {
            one.clone()
        } else {
            kron_all(&factors[i + 1..])?
        };
        let (p, ni, q) = (left.rows(), factors[i].rows(), right.rows());
        let mut g = DenseMatrix::zeros(ni, ni);
        for a in 0..p {
            for b in 0..p {
                let lab = left[(a, b)];
                if lab == 0.0 {
                    continue;
                }
                for c in 0..ni {
                    for d in 0..ni {
                        let r0 = (a * ni + c) * q;
                        let c0 = (b * ni + d) * q;
                        let mut s = 0.0;
                        for e in 0..q {
                            let mrow = &m.row(r0 + e)[c0..c0 + q];
                            let trow = right.row(e);
                            s += mrow.iter().zip(trow).map(|(x, y)| x * y).sum::<f64>();
                        }
                        g[(c, d)] += lab * s;
                    }
                }
            }
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Splits `n` into `r` factors (each > 1 when `r > 1`) whose product is `n`,
/// picking the most balanced split (smallest max/min ratio). Factors are
/// returned in nonincreasing order.
pub fn choose_kron_factorization(n: usize, r: usize) -> Result<Vec<usize>> {
    if n == 0 || r == 0 {
        return Err(SodaError::Config(format!(
            "Kronecker factorization needs n >= 1 and r >= 1, got n={n}, r={r}"
        )));
    }
    if r == 1 {
        return Ok(vec![n]);
    }
    let mut best: Option<Vec<usize>> = None;
    let mut current = Vec::with_capacity(r);
    enumerate_factorizations(n, r, n, &mut current, &mut |cand| {
        let ratio = |v: &[usize]| v[0] as f64 / v[v.len() - 1] as f64;
        if best.as_ref().is_none_or(|b| ratio(cand) < ratio(b)) {
            best = Some(cand.to_vec());
        }
    });
    best.ok_or_else(|| {
        SodaError::Config(format!(
            "{n} cannot be split into {r} Kronecker factors larger than 1; choose a smaller r"
        ))
    })
}

fn enumerate_factorizations(
    remaining: usize,
    slots: usize,
    max_factor: usize,
    current: &mut Vec<usize>,
    visit: &mut impl FnMut(&[usize]),
) {
    if slots == 1 {
        if remaining >= 2 && remaining <= max_factor {
            current.push(remaining);
            visit(current);
            current.pop();
        }
        return;
    }
    for f in (2..=max_factor.min(remaining)).rev() {
        if remaining.is_multiple_of(f) {
            current.push(f);
            enumerate_factorizations(remaining / f, slots - 1, f, current, visit);
            current.pop();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::{gaussian, seeded};

    #[test]
    fn factorization_examples() {
        assert_eq!(choose_kron_factorization(8, 3).unwrap(), vec![2, 2, 2]);
        assert_eq!(choose_kron_factorization(64, 3).unwrap(), vec![4, 4, 4]);
        assert_eq!(choose_kron_factorization(12, 2).unwrap(), vec![4, 3]);
        assert_eq!(choose_kron_factorization(7, 1).unwrap(), vec![7]);
        assert_eq!(choose_kron_factorization(64, 4).unwrap(), vec![4, 4, 2, 2]);
        assert!(matches!(choose_kron_factorization(7, 2), Err(SodaError::Config(_))));
        assert!(choose_kron_factorization(8, 4).is_err());
    }

    /// Brute force over all ordered r-tuples, as an oracle for the balance rule.
    fn brute_force_best_ratio(n: usize, r: usize) -> f64 {
        fn rec(n: usize, r: usize, acc: &mut Vec<usize>, best: &mut f64) {
            if r == 0 {
                if n == 1 {
                    let mx = *acc.iter().max().unwrap() as f64;
                    let mn = *acc.iter().min().unwrap() as f64;
                    *best = best.min(mx / mn);
                }
                return;
            }
            for f in 2..=n {
                if n.is_multiple_of(f) {
                    acc.push(f);
                    rec(n / f, r - 1, acc, best);
                    acc.pop();
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(n, r, &mut Vec::new(), &mut best);
        best
    }

    #[test]
    fn factorization_is_most_balanced() {
        for n in 2..=96 {
            for r in 2..=4 {
                let oracle = brute_force_best_ratio(n, r);
                match choose_kron_factorization(n, r) {
                    Ok(f) => {
                        assert_eq!(f.iter().product::<usize>(), n);
                        assert!(f.windows(2).all(|w| w[0] >= w[1]));
                        let ratio = f[0] as f64 / f[r - 1] as f64;
                        assert_eq!(ratio, oracle, "n={n} r={r}");
                    }
                    Err(_) => assert!(oracle.is_infinite(), "n={n} r={r}"),
                }
            }
        }
    }

    #[test]
    fn two_factor_gradient_matches_closed_form() {
        let mut rng = seeded(3);
        let r1 = gaussian(&mut rng, 2, 2, 1.0);
        let r2 = gaussian(&mut rng, 3, 3, 1.0);
        let m = gaussian(&mut rng, 6, 6, 1.0);
        let g = kron_factor_gradients(&[r1, r2.clone()], &m).unwrap();
        for a in 0..2 {
            for b in 0..2 {
                let mut s = 0.0;
                for c in 0..3 {
                    for d in 0..3 {
                        s += m[(a * 3 + c, b * 3 + d)] * r2[(c, d)];
                    }
                }
                assert!((g[0][(a, b)] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn factor_gradients_match_finite_differences() {
        let mut rng = seeded(4);
        let factors = vec![
            gaussian(&mut rng, 2, 2, 1.0),
            gaussian(&mut rng, 3, 3, 1.0),
            gaussian(&mut rng, 2, 2, 1.0),
        ];
        let m = gaussian(&mut rng, 12, 12, 1.0);
        let grads = kron_factor_gradients(&factors, &m).unwrap();
        let loss = |fs: &[DenseMatrix]| kron_all(fs).unwrap().inner(&m).unwrap();
        for (i, g) in grads.iter().enumerate() {
            for c in 0..g.rows() {
                for d in 0..g.cols() {
                    let mut plus = factors.clone();
                    let mut minus = factors.clone();
                    plus[i][(c, d)] += 1e-5;
                    minus[i][(c, d)] -= 1e-5;
                    let fd = (loss(&plus) - loss(&minus)) / 2e-5;
                    assert!((fd - g[(c, d)]).abs() <= 1e-6 * fd.abs().max(1.0));
                }
            }
        }
    }
}
