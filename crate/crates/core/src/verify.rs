//! Brute-force checks of the algebra the adapters rely on.
//!
//! Every check draws its own random instances from a seed and compares a
//! library computation against a naive reimplementation (triple-loop
//! products, explicit Kronecker expansion, central differences). The naive
//! oracles here share no code path with the fast kernels they check.

use std::fmt;

use rand::Rng;

use crate::adapters::spectral_projection_delta;
use crate::linalg::{determinant, kron, svd, DenseMatrix};
use crate::random::{gaussian, orthogonal, seeded, SodaRng};

pub type KronFn = fn(&DenseMatrix, &DenseMatrix) -> crate::Result<DenseMatrix>;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub measured: f64,
    pub tolerance: f64,
    pub trials: usize,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &'static str, measured: f64, tolerance: f64, trials: usize, detail: String) -> Self {
        // Non-finite measurements are reported as the largest finite value.
        let measured = if measured.is_finite() { measured } else { f64::MAX };
        Self {
            name,
            passed: measured <= tolerance,
            measured,
            tolerance,
            trials,
            detail,
        }
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<28} {}  measured={:.3e}  tolerance={:.1e}  trials={}",
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.measured,
            self.tolerance,
            self.trials
        )?;
        if !self.detail.is_empty() {
            write!(f, "  {}", self.detail)?;
        }
        Ok(())
    }
}

// Naive oracles.

fn naive_matmul(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    assert_eq!(a.cols(), b.rows());
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

fn naive_kron(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    let (p, q) = a.shape();
    let (r, s) = b.shape();
    DenseMatrix::from_fn(p * r, q * s, |i, j| a[(i / r, j / s)] * b[(i % r, j % s)])
}

fn naive_transpose(a: &DenseMatrix) -> DenseMatrix {
    DenseMatrix::from_fn(a.cols(), a.rows(), |i, j| a[(j, i)])
}

fn sq_norm(a: &DenseMatrix) -> f64 {
    a.data().iter().map(|v| v * v).sum()
}

fn trace(a: &DenseMatrix) -> f64 {
    (0..a.rows().min(a.cols())).map(|i| a[(i, i)]).sum()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

fn diff_norm(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn naive_defect(k: &DenseMatrix) -> f64 {
    let g = naive_matmul(&naive_transpose(k), k);
    diff_norm(&g, &DenseMatrix::identity(g.rows()))
}

fn random_factor_sizes(rng: &mut SodaRng) -> [usize; 3] {
    [rng.gen_range(2..=4), rng.gen_range(2..=4), rng.gen_range(2..=4)]
}

/// Kronecker products of random orthogonal factor triples stay orthogonal.
pub fn check_kron_orthogonality(trials: usize, seed: u64, kron_fn: KronFn) -> CheckResult {
    let mut rng = seeded(seed);
    let mut worst = 0.0_f64;
    let mut worst_at = String::new();
    for t in 0..trials {
        let sizes = random_factor_sizes(&mut rng);
        let f: Vec<DenseMatrix> = sizes.iter().map(|&s| orthogonal(&mut rng, s)).collect();
        let defect = kron_fn(&f[0], &f[1])
            .and_then(|ab| kron_fn(&ab, &f[2]))
            .map_or(f64::INFINITY, |k| naive_defect(&k));
        if defect > worst || !defect.is_finite() {
            worst = defect;
            worst_at = format!("seed={seed} trial={t} sizes={sizes:?}");
        }
    }
    CheckResult::new("kron_orthogonality", worst, 1e-7, trials, worst_at)
}

/// `det(A ⊗ B ⊗ C) = det(A)^{nb·nc} det(B)^{na·nc} det(C)^{na·nb} = ±1` for
/// orthogonal factors.
pub fn check_kron_determinant(trials: usize, seed: u64, kron_fn: KronFn) -> CheckResult {
    let mut rng = seeded(seed ^ 0x5eed);
    let mut worst = 0.0_f64;
    let mut worst_at = String::new();
    for t in 0..trials {
        let sizes = random_factor_sizes(&mut rng);
        let f: Vec<DenseMatrix> = sizes.iter().map(|&s| orthogonal(&mut rng, s)).collect();
        let err = match kron_fn(&f[0], &f[1]).and_then(|ab| kron_fn(&ab, &f[2])) {
            Ok(k) => {
                let det = determinant(&k).unwrap_or(f64::NAN);
                let dets: Vec<f64> = f.iter().map(|x| determinant(x).unwrap_or(f64::NAN)).collect();
                let n: usize = sizes.iter().product();
                let predicted: f64 = dets.iter().zip(&sizes).map(|(d, &s)| d.powi((n / s) as i32)).product();
                let sign = predicted.signum();
                (det - sign).abs().max((det - predicted).abs())
            }
            Err(_) => f64::INFINITY,
        };
        if err > worst || !err.is_finite() {
            worst = err;
            worst_at = format!("seed={seed} trial={t} sizes={sizes:?}");
        }
    }
    CheckResult::new("kron_determinant", worst, 1e-10, trials, worst_at)
}

fn min_gap(sigma: &[f64]) -> f64 {
    sigma
        .windows(2)
        .map(|w| w[0] - w[1])
        .chain(sigma.last().copied())
        .fold(f64::INFINITY, f64::min)
}

/// Analytic singular-value gradient `⟨uᵢ, δh⟩⟨vᵢ, x⟩` against central
/// differences of `l(σ) = ⟨δh, U·diag(σ)·Vᵀ·x⟩`.
pub fn check_sigma_gradient(trials: usize, seed: u64) -> CheckResult {
    const N: usize = 6;
    const STEP: f64 = 1e-5;
    let mut rng = seeded(seed ^ 0x516a);
    let mut worst = 0.0_f64;
    let mut worst_at = String::new();
    for t in 0..trials {
        let mut resamples = 0;
        let dec = loop {
            let w = gaussian(&mut rng, N, N, 1.0);
            match svd(&w) {
                Ok(d) if min_gap(&d.sigma) >= 1e-6 => break Some(d),
                _ if resamples < 100 => resamples += 1,
                _ => break None,
            }
        };
        let Some(dec) = dec else {
            worst = f64::INFINITY;
            worst_at = format!("seed={seed} trial={t}: no non-degenerate sample");
            continue;
        };
        let x = gaussian(&mut rng, N, 1, 1.0);
        let dh = gaussian(&mut rng, N, 1, 1.0);
        let v = naive_transpose(&dec.vt);
        let loss = |sigma: &[f64]| {
            let s = DenseMatrix::from_diag(sigma);
            let w = naive_matmul(&naive_matmul(&dec.u, &s), &dec.vt);
            let h = naive_matmul(&w, &x);
            h.data().iter().zip(dh.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        for i in 0..N {
            let ui_dh: f64 = (0..N).map(|r| dec.u[(r, i)] * dh[(r, 0)]).sum();
            let vi_x: f64 = (0..N).map(|r| v[(r, i)] * x[(r, 0)]).sum();
            let analytic = ui_dh * vi_x;
            let mut plus = dec.sigma.clone();
            let mut minus = dec.sigma.clone();
            plus[i] += STEP;
            minus[i] -= STEP;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * STEP);
            let err = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-3);
            if err > worst {
                worst = err;
                worst_at = format!("seed={seed} trial={t} index={i}");
            }
        }
    }
    CheckResult::new("sigma_gradient", worst, 1e-5, trials, worst_at)
}

/// Every link of
/// `‖ΔW′‖² = tr(ΔW′ΔW′ᵀ) = ‖ΔΣ‖² = ‖(UᵀΔWV)⊙I‖² ≤ ‖UᵀΔWV‖² = tr(UᵀΔWVVᵀΔWᵀU) = ‖ΔW‖²`.
pub fn check_frobenius_inequality(trials: usize, seed: u64) -> CheckResult {
    const N: usize = 8;
    let mut rng = seeded(seed ^ 0xf40b);
    let mut worst = 0.0_f64;
    let mut worst_at = String::new();
    let mut worst_ratio = 0.0_f64;
    let mut ratio_sum = 0.0;
    for t in 0..trials {
        let u = orthogonal(&mut rng, N);
        let v = orthogonal(&mut rng, N);
        let dw = gaussian(&mut rng, N, N, 1.0);
        let Ok(proj) = spectral_projection_delta(&u, &v, &dw) else {
            worst = f64::INFINITY;
            continue;
        };

        let ut = naive_transpose(&u);
        let vt = naive_transpose(&v);
        let rotated = naive_matmul(&naive_matmul(&ut, &dw), &v);
        let masked = DenseMatrix::from_fn(N, N, |i, j| if i == j { rotated[(i, j)] } else { 0.0 });
        let dw_prime = &proj.projected;

        let a = proj.projected_norm * proj.projected_norm;
        let b = trace(&naive_matmul(dw_prime, &naive_transpose(dw_prime)));
        let c = sq_norm(&proj.delta_sigma);
        let d = sq_norm(&masked);
        let e = sq_norm(&rotated);
        let f = trace(&naive_matmul(
            &naive_matmul(&naive_matmul(&ut, &dw), &naive_matmul(&v, &vt)),
            &naive_matmul(&naive_transpose(&dw), &u),
        ));
        let g = sq_norm(&dw);

        let equalities = [rel(a, b), rel(b, c), rel(c, d), rel(e, f), rel(f, g)];
        let violation = (d / e - 1.0).max(0.0);
        let err = equalities.iter().copied().fold(violation, f64::max);
        if err > worst || !err.is_finite() {
            worst = err;
            worst_at = format!("seed={seed} trial={t}");
        }
        let ratio = a / g;
        worst_ratio = worst_ratio.max(ratio);
        ratio_sum += ratio;
    }
    let detail = format!(
        "max ratio={worst_ratio:.4} mean ratio={:.4}{}",
        ratio_sum / trials.max(1) as f64,
        if worst_at.is_empty() {
            String::new()
        } else {
            format!(" worst at {worst_at}")
        }
    );
    CheckResult::new("frobenius_inequality", worst, 1e-10, trials, detail)
}

/// `(A⊗B)(C⊗D) = (AC)⊗(BD)` and three-factor associativity on random
/// non-orthogonal factors.
pub fn check_mixed_product(trials: usize, seed: u64, kron_fn: KronFn) -> CheckResult {
    let mut rng = seeded(seed ^ 0x313d);
    let mut worst = 0.0_f64;
    let mut worst_at = String::new();
    for t in 0..trials {
        let a = gaussian(&mut rng, 2, 3, 1.0);
        let c = gaussian(&mut rng, 3, 2, 1.0);
        let b = gaussian(&mut rng, 3, 2, 1.0);
        let d = gaussian(&mut rng, 2, 3, 1.0);
        let e = gaussian(&mut rng, 2, 2, 1.0);

        let mixed = (|| -> crate::Result<f64> {
            let lhs = kron_fn(&a, &b)?.matmul(&kron_fn(&c, &d)?)?;
            let rhs = naive_kron(&naive_matmul(&a, &c), &naive_matmul(&b, &d));
            let assoc_l = kron_fn(&kron_fn(&a, &b)?, &e)?;
            let assoc_r = naive_kron(&a, &naive_kron(&b, &e));
            Ok((diff_norm(&lhs, &rhs) / rhs.frobenius_norm())
                .max(diff_norm(&assoc_l, &assoc_r) / assoc_r.frobenius_norm()))
        })()
        .unwrap_or(f64::INFINITY);
        if mixed > worst || !mixed.is_finite() {
            worst = mixed;
            worst_at = format!("seed={seed} trial={t}");
        }
    }
    CheckResult::new("mixed_product", worst, 1e-10, trials, worst_at)
}

pub const KRON_TRIALS: usize = 100;
pub const SIGMA_TRIALS: usize = 50;
pub const FROBENIUS_TRIALS: usize = 100;
pub const MIXED_TRIALS: usize = 100;

/// Number of checks [`run_all`] performs.
pub const CHECK_COUNT: usize = 5;

pub fn run_all(seed: u64) -> Vec<CheckResult> {
    run_all_with(seed, kron)
}

/// Runs every check with a caller-supplied Kronecker kernel, for negative
/// controls.
pub fn run_all_with(seed: u64, kron_fn: KronFn) -> Vec<CheckResult> {
    vec![
        check_kron_orthogonality(KRON_TRIALS, seed, kron_fn),
        check_kron_determinant(KRON_TRIALS, seed, kron_fn),
        check_sigma_gradient(SIGMA_TRIALS, seed),
        check_frobenius_inequality(FROBENIUS_TRIALS, seed),
        check_mixed_product(MIXED_TRIALS, seed, kron_fn),
    ]
}

/// A Kronecker kernel with each block transposed (column-reversed when the
/// blocks are not square); breaks the product.
pub fn corrupted_kron(a: &DenseMatrix, b: &DenseMatrix) -> crate::Result<DenseMatrix> {
    let (p, q) = a.shape();
    let (r, s) = b.shape();
    Ok(DenseMatrix::from_fn(p * r, q * s, |i, j| {
        let (bi, bj) = (i % r, j % s);
        let v = if r == s { b[(bj, bi)] } else { b[(bi, s - 1 - bj)] };
        a[(i / r, j / s)] * v
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_factors_have_zero_defect() {
        let eye = DenseMatrix::identity(3);
        let k = kron(&kron(&eye, &eye).unwrap(), &eye).unwrap();
        assert_eq!(naive_defect(&k), 0.0);
    }

    #[test]
    fn plane_rotations_kron_is_orthogonal() {
        let mut rng = seeded(1);
        for _ in 0..20 {
            let rot = |t: f64| DenseMatrix::from_rows(&[[t.cos(), -t.sin()], [t.sin(), t.cos()]]);
            let a = rot(rng.gen_range(0.0..6.3));
            let b = rot(rng.gen_range(0.0..6.3));
            assert!(naive_defect(&kron(&a, &b).unwrap()) <= 1e-12);
        }
    }

    #[test]
    fn sigma_gradient_identity_bases() {
        // U = V = I: δΣ_ii = δh_i · x_i
        let u = DenseMatrix::identity(2);
        let x = [3.0, 4.0];
        let dh = [1.0, 2.0];
        let g: Vec<f64> = (0..2)
            .map(|i| {
                let a: f64 = (0..2).map(|r| u[(r, i)] * dh[r]).sum();
                let b: f64 = (0..2).map(|r| u[(r, i)] * x[r]).sum();
                a * b
            })
            .collect();
        assert_eq!(g, vec![3.0, 8.0]);
    }

    #[test]
    fn sigma_gradient_is_bilinear_in_upstream() {
        let mut rng = seeded(2);
        let w = gaussian(&mut rng, 6, 6, 1.0);
        let d = svd(&w).unwrap();
        let x = gaussian(&mut rng, 6, 1, 1.0);
        let dh = gaussian(&mut rng, 6, 1, 1.0);
        let grad = |dh: &DenseMatrix| -> Vec<f64> {
            let ud = d.u.tr_matmul(dh).unwrap();
            let vx = d.vt.matmul(&x).unwrap();
            (0..6).map(|i| ud[(i, 0)] * vx[(i, 0)]).collect()
        };
        let g1 = grad(&dh);
        let g4 = grad(&dh.scale(4.0));
        for (a, b) in g1.iter().zip(&g4) {
            assert_eq!(4.0 * a, *b);
        }
    }

    #[test]
    fn frobenius_equality_and_zero_cases() {
        let mut rng = seeded(3);
        let u = orthogonal(&mut rng, 5);
        let v = orthogonal(&mut rng, 5);
        let diag = DenseMatrix::from_diag(&[1.0, -2.0, 3.0, 0.5, 0.1]);
        let dw = u.matmul(&diag).unwrap().matmul_tr(&v).unwrap();
        let p = spectral_projection_delta(&u, &v, &dw).unwrap();
        assert!((p.projected_norm.powi(2) / sq_norm(&dw) - 1.0).abs() < 1e-12);

        let off = DenseMatrix::from_fn(5, 5, |i, j| if i == j { 0.0 } else { (i + 2 * j) as f64 });
        let dw = u.matmul(&off).unwrap().matmul_tr(&v).unwrap();
        let p = spectral_projection_delta(&u, &v, &dw).unwrap();
        assert!(p.projected_norm.powi(2) / sq_norm(&dw) < 1e-24);
    }

    #[test]
    fn mixed_product_identity_is_exact() {
        let eye2 = DenseMatrix::identity(2);
        let eye3 = DenseMatrix::identity(3);
        let lhs = kron(&eye2, &eye3)
            .unwrap()
            .matmul(&kron(&eye2, &eye3).unwrap())
            .unwrap();
        assert_eq!(lhs, naive_kron(&eye2, &eye3));
    }

    #[test]
    fn all_checks_pass_on_fixed_seed() {
        let results = run_all(7);
        assert_eq!(results.len(), CHECK_COUNT);
        for r in &results {
            assert!(r.passed, "{r}");
        }
    }

    #[test]
    fn corrupted_kron_is_caught() {
        let results = run_all_with(7, corrupted_kron);
        assert!(results.iter().any(|r| !r.passed));
        assert!(!check_mixed_product(10, 1, corrupted_kron).passed);
    }
}
