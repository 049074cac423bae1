//! Seeded sampling helpers shared by initialization, tasks and checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::linalg::{determinant, qr_orthonormalize, DenseMatrix};

pub type SodaRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SodaRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

pub fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-bound..=bound))
}

/// Haar-ish random orthogonal matrix: QR of a Gaussian matrix.
pub fn orthogonal(rng: &mut impl Rng, n: usize) -> DenseMatrix {
    let g = gaussian(rng, n, n, 1.0);
    qr_orthonormalize(&g).expect("square input")
}

/// Random orthogonal matrix with determinant +1.
pub fn special_orthogonal(rng: &mut impl Rng, n: usize) -> DenseMatrix {
    let mut q = orthogonal(rng, n);
    if determinant(&q).expect("square") < 0.0 {
        for i in 0..n {
            q[(i, 0)] = -q[(i, 0)];
        }
    }
    q
}
