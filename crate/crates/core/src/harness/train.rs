use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;

use super::task::TaskData;
use crate::adapters::{
    backward, effective_spectrum, effective_weight, forward, param_count, AdapterConfig, AdapterState, Constraint,
    Method,
};
use crate::error::{Result, SodaError};
use crate::linalg::DenseMatrix;
use crate::random::seeded;
use crate::stiefel_opt::{
    cayley_step, euclidean_step, stiefel_step, CayleyParameter, EuclideanOptimizerState, StiefelOptimizerState,
};

/// How orthogonal factors are trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum OptimizerChoice {
    #[default]
    Stiefel,
    Cayley,
}

impl OptimizerChoice {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerChoice::Stiefel => "STIEFEL",
            OptimizerChoice::Cayley => "CAYLEY",
        }
    }
}

impl fmt::Display for OptimizerChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OptimizerChoice {
    type Err = SodaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "STIEFEL" => Ok(OptimizerChoice::Stiefel),
            "CAYLEY" => Ok(OptimizerChoice::Cayley),
            _ => Err(SodaError::Config(format!(
                "unknown optimizer `{s}`; valid: STIEFEL, CAYLEY"
            ))),
        }
    }
}

/// Spectral shifts train this many times faster than rotations by default.
pub const SPECTRAL_LR_MULTIPLIER: f64 = 10.0;
pub const DEFAULT_SWEEP_LRS: [f64; 3] = [1e-3, 1e-2, 1e-1];
/// At the identity a Cayley step on `S` moves `R` eight times as far as a
/// Stiefel step with the same rate, so Cayley runs use `lr_rotation` times
/// this factor. Both optimizers then make the same first-order move.
pub const CAYLEY_LR_SCALE: f64 = 0.125;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub r: usize,
    pub constraint: Constraint,
    pub lr_rotation: f64,
    pub lr_spectral: f64,
    pub lr_euclidean: f64,
    pub beta: f64,
    pub steps: usize,
    /// Columns per minibatch; `0` or anything ≥ the sample count means full batch.
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerChoice,
    pub kron_sizes: Option<Vec<usize>>,
}

impl TrainConfig {
    pub fn new(method: Method, r: usize) -> Self {
        Self {
            method,
            r,
            constraint: Constraint::Relu,
            lr_rotation: 1e-2,
            lr_spectral: 1e-2 * SPECTRAL_LR_MULTIPLIER,
            lr_euclidean: 1e-2,
            beta: 0.5,
            steps: 1000,
            batch_size: 0,
            seed: 0,
            optimizer: OptimizerChoice::Stiefel,
            kron_sizes: None,
        }
    }

    /// Sets every parameter group from one base rate, with the spectral
    /// group scaled up by [`SPECTRAL_LR_MULTIPLIER`].
    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr_rotation = lr;
        self.lr_euclidean = lr;
        self.lr_spectral = lr * SPECTRAL_LR_MULTIPLIER;
        self
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_constraint(mut self, c: Constraint) -> Self {
        self.constraint = c;
        self
    }

    pub fn with_optimizer(mut self, o: OptimizerChoice) -> Self {
        self.optimizer = o;
        self
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    /// The learning rate reported for this run: the rate of the method's
    /// main parameter group.
    pub fn reported_lr(&self) -> f64 {
        match self.method {
            Method::Lora => self.lr_euclidean,
            Method::Svdiff => self.lr_spectral,
            _ => self.lr_rotation,
        }
    }

    pub fn adapter_config(&self) -> AdapterConfig {
        let mut cfg = AdapterConfig::new(self.method, self.r).with_constraint(self.constraint);
        cfg.kron_sizes = self.kron_sizes.clone();
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        for (name, lr) in [
            ("lr_rotation", self.lr_rotation),
            ("lr_spectral", self.lr_spectral),
            ("lr_euclidean", self.lr_euclidean),
        ] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(SodaError::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(SodaError::Config(format!("beta must lie in [0, 1), got {}", self.beta)));
        }
        if self.r == 0 {
            return Err(SodaError::Config("r must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Ok,
    /// Loss became non-finite; the run stopped at the recorded step.
    Failed {
        step: usize,
        reason: String,
    },
}

impl RunStatus {
    pub fn is_ok(&self) -> bool {
        matches!(self, RunStatus::Ok)
    }

    pub fn label(&self) -> String {
        match self {
            RunStatus::Ok => "ok".into(),
            RunStatus::Failed { step, .. } => format!("failed@{step}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub method: Method,
    pub n: usize,
    pub r: usize,
    pub lr: f64,
    pub constraint: Constraint,
    pub optimizer: OptimizerChoice,
    pub steps: usize,
    /// Training loss before each update.
    pub losses: Vec<f64>,
    pub initial_fit_error: f64,
    /// `‖W_eff − W*‖_F / ‖W*‖_F` after training.
    pub final_fit_error: f64,
    pub final_defect: f64,
    /// Worst orthogonality defect seen at any step.
    pub max_defect: f64,
    pub param_count: usize,
    /// Effective singular values below zero at the end (SVD methods only).
    pub negative_singular_values: usize,
    pub seconds: f64,
    pub status: RunStatus,
}

enum RotationOpt {
    Stiefel(StiefelOptimizerState),
    Cayley(CayleyParameter),
}

fn fit_error(w: &DenseMatrix, target: &DenseMatrix) -> Result<f64> {
    Ok(w.sub(target)?.frobenius_norm() / target.frobenius_norm().max(f64::MIN_POSITIVE))
}

fn batch_columns(x: &DenseMatrix, start: usize, size: usize) -> DenseMatrix {
    let n = x.cols();
    DenseMatrix::from_fn(x.rows(), size, |i, j| x[(i, (start + j) % n)])
}

/// Trains one adapter on a task with mean-squared-error loss
/// `(1/B)·Σ ‖W·xᵢ − yᵢ‖²` over each batch.
pub fn train(task: &TaskData, config: &TrainConfig) -> Result<RunRecord> {
    train_with_state(task, config).map(|(record, _)| record)
}

/// [`train`], also returning the trained adapter.
pub fn train_with_state(task: &TaskData, config: &TrainConfig) -> Result<(RunRecord, AdapterState)> {
    config.validate()?;
    let started = Instant::now();
    let base = &task.base;
    let (m, n) = base.shape();
    let mut rng = seeded(config.seed);
    let mut state = AdapterState::init(base, &config.adapter_config(), &mut rng)?;
    let count = param_count(config.method, m, n, config.r)?;
    debug_assert!(config.kron_sizes.is_some() || count == state.trainables.scalar_count());
    let count = if config.kron_sizes.is_some() {
        state.trainables.scalar_count()
    } else {
        count
    };

    let mut rot_opts: Vec<RotationOpt> = state
        .trainables
        .rotations()
        .iter()
        .map(|r| {
            Ok(match config.optimizer {
                OptimizerChoice::Stiefel => RotationOpt::Stiefel(StiefelOptimizerState::new(
                    r.rows(),
                    r.cols(),
                    config.lr_rotation,
                    config.beta,
                )?),
                OptimizerChoice::Cayley => RotationOpt::Cayley(CayleyParameter::identity(r.rows())),
            })
        })
        .collect::<Result<_>>()?;
    let mut delta_opt = match state.trainables.delta() {
        Some(d) => Some(EuclideanOptimizerState::new(
            1,
            d.len(),
            config.lr_spectral,
            config.beta,
        )?),
        None => None,
    };
    let mut lora_opts = match state.trainables.lora() {
        Some((b, a)) => Some((
            EuclideanOptimizerState::new(b.rows(), b.cols(), config.lr_euclidean, config.beta)?,
            EuclideanOptimizerState::new(a.rows(), a.cols(), config.lr_euclidean, config.beta)?,
        )),
        None => None,
    };

    let samples = task.x.cols();
    let batch = if config.batch_size == 0 || config.batch_size >= samples {
        samples
    } else {
        config.batch_size
    };
    let initial_fit_error = fit_error(&effective_weight(base, &state)?, &task.target)?;
    let mut losses = Vec::with_capacity(config.steps);
    let mut status = RunStatus::Ok;
    let mut max_defect = state.trainables.max_defect();

    for step in 0..config.steps {
        let (xb, yb) = if batch == samples {
            (task.x.clone(), task.y.clone())
        } else {
            let start = (step * batch) % samples;
            (
                batch_columns(&task.x, start, batch),
                batch_columns(&task.y, start, batch),
            )
        };
        let resid = forward(base, &state, &xb)?.sub(&yb)?;
        let loss = resid.frobenius_norm().powi(2) / batch as f64;
        if !loss.is_finite() {
            status = RunStatus::Failed {
                step,
                reason: "non-finite loss".into(),
            };
            break;
        }
        losses.push(loss);
        let dh = resid.scale(2.0 / batch as f64);
        let grads = match backward(base, &state, &xb, &dh) {
            Ok(g) if g.flatten().iter().all(|v| v.is_finite()) => g,
            _ => {
                status = RunStatus::Failed {
                    step,
                    reason: "non-finite gradient".into(),
                };
                break;
            }
        };

        if let Err(e) = apply_updates(
            &mut state,
            &grads,
            &mut rot_opts,
            &mut delta_opt,
            &mut lora_opts,
            config,
        ) {
            status = RunStatus::Failed {
                step,
                reason: e.to_string(),
            };
            break;
        }
        max_defect = max_defect.max(state.trainables.max_defect());
    }

    let w = effective_weight(base, &state)?;
    let final_fit_error = if w.is_finite() {
        fit_error(&w, &task.target)?
    } else {
        f64::INFINITY
    };
    let negative_singular_values =
        effective_spectrum(base, &state)?.map_or(0, |s| s.iter().filter(|&&v| v < 0.0).count());
    let record = RunRecord {
        method: config.method,
        n,
        r: config.r,
        lr: config.reported_lr(),
        constraint: config.constraint,
        optimizer: config.optimizer,
        steps: config.steps,
        losses,
        initial_fit_error,
        final_fit_error,
        final_defect: state.trainables.max_defect(),
        max_defect,
        param_count: count,
        negative_singular_values,
        seconds: started.elapsed().as_secs_f64(),
        status,
    };
    Ok((record, state))
}

fn apply_updates(
    state: &mut AdapterState,
    grads: &crate::adapters::ParameterGradients,
    rot_opts: &mut [RotationOpt],
    delta_opt: &mut Option<EuclideanOptimizerState>,
    lora_opts: &mut Option<(EuclideanOptimizerState, EuclideanOptimizerState)>,
    config: &TrainConfig,
) -> Result<()> {
    for ((param, grad), opt) in state
        .trainables
        .rotations_mut()
        .iter_mut()
        .zip(grads.rotations())
        .zip(rot_opts.iter_mut())
    {
        match opt {
            RotationOpt::Stiefel(st) => *param = stiefel_step(param, grad, st)?,
            RotationOpt::Cayley(cp) => {
                *cp = cayley_step(cp, grad, config.lr_rotation * CAYLEY_LR_SCALE)?;
                *param = cp.rotation().clone();
            }
        }
    }
    if let (Some(opt), Some(delta), Some(g)) = (delta_opt.as_mut(), state.trainables.delta_mut(), grads.delta()) {
        let p = DenseMatrix::new(1, delta.len(), delta.clone())?;
        let gm = DenseMatrix::new(1, g.len(), g.to_vec())?;
        *delta = euclidean_step(&p, &gm, opt)?.into_data();
    }
    if let (Some((ob, oa)), Some((b, a)), Some((gb, ga))) =
        (lora_opts.as_mut(), state.trainables.lora_mut(), grads.lora())
    {
        *b = euclidean_step(b, gb, ob)?;
        *a = euclidean_step(a, ga, oa)?;
    }
    Ok(())
}

/// One run per learning rate, in input order, sharing seeds. Runs execute
/// in parallel; each owns its state.
pub fn lr_sweep(task: &TaskData, base_config: &TrainConfig, lrs: &[f64]) -> Result<Vec<RunRecord>> {
    lrs.par_iter()
        .map(|&lr| train(task, &base_config.clone().with_lr(lr)))
        .collect()
}

/// Lowest final fit error among successful runs.
pub fn best_of(records: &[RunRecord]) -> Option<&RunRecord> {
    records
        .iter()
        .filter(|r| r.status.is_ok() && r.final_fit_error.is_finite())
        .min_by(|a, b| a.final_fit_error.total_cmp(&b.final_fit_error))
}
