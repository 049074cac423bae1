//! Desk-scale ablations: spectral vs. orthogonal tuning, the spectral
//! constraint, and Stiefel vs. Cayley updates.

use rayon::prelude::*;

use super::task::{generate_task, SyntheticTask, TaskData, TaskKind};
use super::train::{best_of, lr_sweep, train, OptimizerChoice, RunRecord, TrainConfig, DEFAULT_SWEEP_LRS};
use crate::adapters::{Constraint, Method};
use crate::error::{Result, SodaError};

/// Shared knobs for an ablation: which seeds, how large, how long.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationSuite {
    pub n: usize,
    pub r: usize,
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub lrs: Vec<f64>,
}

impl Default for AblationSuite {
    fn default() -> Self {
        Self {
            n: 8,
            r: 3,
            seeds: (0..5).collect(),
            steps: 1000,
            lrs: DEFAULT_SWEEP_LRS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    /// Which planted target the row ran on.
    pub task: String,
    pub seed: u64,
    /// Variant label, e.g. `SODA_SVD`, `RELU`, `CAYLEY`.
    pub variant: String,
    pub record: RunRecord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub name: &'static str,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn records(&self) -> impl Iterator<Item = &RunRecord> {
        self.rows.iter().map(|r| &r.record)
    }

    pub fn find(&self, task: &str, seed: u64, variant: &str) -> Option<&AblationRow> {
        self.rows
            .iter()
            .find(|r| r.task == task && r.seed == seed && r.variant == variant)
    }
}

pub const ABLATION_NAMES: [&str; 3] = ["spectral_vs_orthogonal", "constraint", "optimizer"];

pub fn run_ablation(name: &str, suite: &AblationSuite) -> Result<AblationReport> {
    match name {
        "spectral_vs_orthogonal" => ablation_spectral_vs_orthogonal(suite),
        "constraint" => ablation_constraint(suite),
        "optimizer" => ablation_optimizer(suite),
        other => Err(SodaError::Config(format!(
            "unknown ablation `{other}`; valid: {}",
            ABLATION_NAMES.join(", ")
        ))),
    }
}

fn best_run(task: &TaskData, config: &TrainConfig, lrs: &[f64]) -> Result<RunRecord> {
    let records = lr_sweep(task, config, lrs)?;
    best_of(&records)
        .cloned()
        .or_else(|| records.into_iter().next())
        .ok_or_else(|| SodaError::Config("empty learning-rate list".into()))
}

/// SVDIFF, KOFT and SODA_SVD on spectral-only, rotation-only and combined
/// planted targets. Each cell is the best run of the learning-rate sweep.
pub fn ablation_spectral_vs_orthogonal(suite: &AblationSuite) -> Result<AblationReport> {
    let kinds = [
        ("spectral", TaskKind::SpectralTarget),
        ("rotation", TaskKind::RotatedTarget),
        ("combined", TaskKind::ComposedTarget),
    ];
    let methods = [Method::Svdiff, Method::Koft, Method::SodaSvd];
    let jobs: Vec<_> = suite
        .seeds
        .iter()
        .flat_map(|&seed| {
            kinds
                .iter()
                .flat_map(move |&k| methods.into_iter().map(move |m| (seed, k, m)))
        })
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(seed, (label, kind), method)| {
            let task = generate_task(&SyntheticTask::new(kind, suite.n, seed).with_kron_factors(suite.r))?;
            let cfg = TrainConfig::new(method, suite.r)
                .with_steps(suite.steps)
                .with_seed(seed);
            Ok(AblationRow {
                task: label.to_string(),
                seed,
                variant: method.name().to_string(),
                record: best_run(&task, &cfg, &suite.lrs)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport {
        name: "spectral_vs_orthogonal",
        rows,
    })
}

/// SODA_SVD under each spectral constraint, on a clipped spectral target
/// and on one that needs a negative singular value.
pub fn ablation_constraint(suite: &AblationSuite) -> Result<AblationReport> {
    let jobs: Vec<_> = suite
        .seeds
        .iter()
        .flat_map(|&seed| {
            [false, true]
                .into_iter()
                .flat_map(move |neg| Constraint::ALL.into_iter().map(move |c| (seed, neg, c)))
        })
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(seed, negative, constraint)| {
            let mut spec = SyntheticTask::new(TaskKind::SpectralTarget, suite.n, seed).with_kron_factors(suite.r);
            if negative {
                spec = spec.with_negative_spectrum();
            }
            let task = generate_task(&spec)?;
            let cfg = TrainConfig::new(Method::SodaSvd, suite.r)
                .with_steps(suite.steps)
                .with_seed(seed)
                .with_constraint(constraint);
            Ok(AblationRow {
                task: if negative { "sign_flip" } else { "spectral" }.to_string(),
                seed,
                variant: constraint.name().to_string(),
                record: best_run(&task, &cfg, &suite.lrs)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport {
        name: "constraint",
        rows,
    })
}

/// KOFT trained with Stiefel and Cayley updates at the smallest and largest
/// rate of the suite; one row per (optimizer, lr, seed).
pub fn ablation_optimizer(suite: &AblationSuite) -> Result<AblationReport> {
    let lo = suite.lrs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = suite.lrs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() {
        return Err(SodaError::Config("empty learning-rate list".into()));
    }
    let lrs: Vec<f64> = if lo == hi { vec![lo] } else { vec![lo, hi] };
    let jobs: Vec<_> = suite
        .seeds
        .iter()
        .flat_map(|&seed| {
            let lrs = lrs.clone();
            [OptimizerChoice::Stiefel, OptimizerChoice::Cayley]
                .into_iter()
                .flat_map(move |o| lrs.clone().into_iter().map(move |lr| (seed, o, lr)))
        })
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(seed, optimizer, lr)| {
            let task =
                generate_task(&SyntheticTask::new(TaskKind::RotatedTarget, suite.n, seed).with_kron_factors(suite.r))?;
            let cfg = TrainConfig::new(Method::Koft, suite.r)
                .with_steps(suite.steps)
                .with_seed(seed)
                .with_optimizer(optimizer)
                .with_lr(lr);
            Ok(AblationRow {
                task: "rotation".to_string(),
                seed,
                variant: optimizer.name().to_string(),
                record: train(&task, &cfg)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport {
        name: "optimizer",
        rows,
    })
}
