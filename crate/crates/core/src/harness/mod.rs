//! Synthetic fine-tuning experiments: planted-target tasks, the training
//! loop, learning-rate sweeps and ablations.

mod ablation;
pub mod csv;
mod task;
mod train;

pub use ablation::{
    ablation_constraint, ablation_optimizer, ablation_spectral_vs_orthogonal, run_ablation, AblationReport,
    AblationRow, AblationSuite, ABLATION_NAMES,
};
pub use task::{generate_task, SyntheticTask, TaskData, TaskKind};
pub use train::{
    best_of, lr_sweep, train, train_with_state, OptimizerChoice, RunRecord, RunStatus, TrainConfig, CAYLEY_LR_SCALE,
    DEFAULT_SWEEP_LRS, SPECTRAL_LR_MULTIPLIER,
};
