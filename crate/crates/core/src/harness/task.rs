use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::adapters::{choose_kron_factorization, FrozenBase, KroneckerRotation};
use crate::error::{Result, SodaError};
use crate::linalg::{cayley, reconstruct_with, DenseMatrix, SkewSymmetric};
use crate::random::{gaussian, seeded};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    /// `W* = W₀ + E` for a dense random perturbation `E`.
    MatrixRegression,
    /// `W* = W₀ · (R₁* ⊗ … ⊗ R_r*)`.
    RotatedTarget,
    /// `W* = U₀ · diag(σ*) · V₀ᵀ` with a shifted spectrum.
    SpectralTarget,
    /// `W* = W₀ + ΔW₁* + ΔW₂*`: a spectral shift plus a rotation of the
    /// right singular basis.
    ComposedTarget,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::MatrixRegression,
        TaskKind::RotatedTarget,
        TaskKind::SpectralTarget,
        TaskKind::ComposedTarget,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::MatrixRegression => "MATRIX_REGRESSION",
            TaskKind::RotatedTarget => "ROTATED_TARGET",
            TaskKind::SpectralTarget => "SPECTRAL_TARGET",
            TaskKind::ComposedTarget => "COMPOSED_TARGET",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = SodaError;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        TaskKind::ALL.into_iter().find(|k| k.name() == norm).ok_or_else(|| {
            SodaError::Config(format!(
                "unknown task `{s}`; valid: MATRIX_REGRESSION, ROTATED_TARGET, SPECTRAL_TARGET, COMPOSED_TARGET"
            ))
        })
    }
}

/// Recipe for a synthetic fine-tuning problem on an `n×n` layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub n: usize,
    pub samples: usize,
    pub noise: f64,
    pub seed: u64,
    /// Number of Kronecker factors in planted rotations.
    pub kron_factors: usize,
    /// Planted singular-value shifts are drawn from `±shift_scale·σᵢ`.
    pub shift_scale: f64,
    /// Std-dev of the skew entries whose Cayley images form planted rotations.
    pub rotation_scale: f64,
    /// When set, spectral targets flip the sign of the leading singular value
    /// instead of clipping at zero, so no ReLU-constrained adapter can fit them.
    pub negative_spectrum: bool,
}

impl SyntheticTask {
    pub fn new(kind: TaskKind, n: usize, seed: u64) -> Self {
        Self {
            kind,
            n,
            samples: 4 * n,
            noise: 0.0,
            seed,
            kron_factors: 3,
            shift_scale: 0.5,
            rotation_scale: 0.4,
            negative_spectrum: false,
        }
    }

    pub fn with_samples(mut self, samples: usize) -> Self {
        self.samples = samples;
        self
    }

    pub fn with_noise(mut self, noise: f64) -> Self {
        self.noise = noise;
        self
    }

    pub fn with_kron_factors(mut self, r: usize) -> Self {
        self.kron_factors = r;
        self
    }

    pub fn with_negative_spectrum(mut self) -> Self {
        self.negative_spectrum = true;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.samples == 0 {
            return Err(SodaError::Config(format!(
                "task needs positive n and samples, got n={}, samples={}",
                self.n, self.samples
            )));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(SodaError::Config(format!("noise must be >= 0, got {}", self.noise)));
        }
        Ok(())
    }
}

/// Generated dataset plus the planted ground truth.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub spec: SyntheticTask,
    pub base: FrozenBase,
    pub target: DenseMatrix,
    /// Inputs, one sample per column (`n×samples`).
    pub x: DenseMatrix,
    /// Noisy targets `W*·x + ε`.
    pub y: DenseMatrix,
    pub planted_shift: Option<Vec<f64>>,
    pub planted_rotation: Option<KroneckerRotation>,
    /// Residual components; for composed targets `[ΔW₁*, ΔW₂*]`.
    pub components: Vec<DenseMatrix>,
}

fn planted_rotation(rng: &mut impl Rng, dim: usize, r: usize, scale: f64) -> Result<KroneckerRotation> {
    let sizes = choose_kron_factorization(dim, r)?;
    let factors = sizes
        .iter()
        .map(|&s| {
            let count = s * (s - 1) / 2;
            let lower = gaussian(rng, count.max(1), 1, scale).into_data();
            let skew = SkewSymmetric::from_lower(s, lower[..count].to_vec())?;
            cayley(&skew)
        })
        .collect::<Result<Vec<_>>>()?;
    KroneckerRotation::from_factors(factors)
}

fn planted_spectrum(rng: &mut impl Rng, sigma: &[f64], scale: f64, negative: bool) -> (Vec<f64>, Vec<f64>) {
    let shift: Vec<f64> = sigma.iter().map(|&s| scale * s * rng.gen_range(-1.0..=1.0)).collect();
    let mut target: Vec<f64> = sigma.iter().zip(&shift).map(|(s, d)| (s + d).max(0.0)).collect();
    let mut shift = shift;
    if negative {
        shift[0] = -2.0 * sigma[0];
        target[0] = -sigma[0];
    }
    (shift, target)
}

pub fn generate_task(spec: &SyntheticTask) -> Result<TaskData> {
    spec.validate()?;
    let n = spec.n;
    let mut rng = seeded(spec.seed);
    let w0 = gaussian(&mut rng, n, n, 1.0 / (n as f64).sqrt());
    let base = FrozenBase::new(w0);
    let w0 = base.w0();

    let mut planted_shift = None;
    let mut planted_rot = None;
    let mut components = Vec::new();
    let target = match spec.kind {
        TaskKind::MatrixRegression => {
            let e = gaussian(&mut rng, n, n, 0.3 / (n as f64).sqrt());
            let t = w0.add(&e)?;
            components.push(e);
            t
        }
        TaskKind::RotatedTarget => {
            let rot = planted_rotation(&mut rng, n, spec.kron_factors, spec.rotation_scale)?;
            let t = w0.matmul(&rot.materialize())?;
            components.push(t.sub(w0)?);
            planted_rot = Some(rot);
            t
        }
        TaskKind::SpectralTarget => {
            let dec = base.spectral()?;
            let (shift, sigma_t) = planted_spectrum(&mut rng, &dec.sigma, spec.shift_scale, spec.negative_spectrum);
            let t = reconstruct_with(&dec.u, &sigma_t, &dec.vt);
            components.push(t.sub(w0)?);
            planted_shift = Some(shift);
            t
        }
        TaskKind::ComposedTarget => {
            let dec = base.spectral()?;
            let (shift, sigma_t) = planted_spectrum(&mut rng, &dec.sigma, spec.shift_scale, spec.negative_spectrum);
            let rot = planted_rotation(&mut rng, dec.sigma.len(), spec.kron_factors, spec.rotation_scale)?;
            let spectral_only = reconstruct_with(&dec.u, &sigma_t, &dec.vt);
            let vrt = rot.materialize().tr_matmul(&dec.vt)?;
            let combined = reconstruct_with(&dec.u, &sigma_t, &vrt);
            let dw1 = spectral_only.sub(w0)?;
            let dw2 = combined.sub(&spectral_only)?;
            components.push(dw1);
            components.push(dw2);
            planted_shift = Some(shift);
            planted_rot = Some(rot);
            combined
        }
    };

    let x = gaussian(&mut rng, n, spec.samples, 1.0);
    let mut y = target.matmul(&x)?;
    if spec.noise > 0.0 {
        y.axpy(1.0, &gaussian(&mut rng, n, spec.samples, spec.noise))?;
    }
    Ok(TaskData {
        spec: spec.clone(),
        base,
        target,
        x,
        y,
        planted_shift,
        planted_rotation: planted_rot,
        components,
    })
}
