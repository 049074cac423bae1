//! The `soda` command line.

pub mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use soda_core::adapters::{
    merge, param_count, read_checkpoint, residual, table_formula_count, write_checkpoint, Checkpoint, FrozenBase,
    Method,
};
use soda_core::harness::csv::{format_ablation, format_records};
use soda_core::harness::{
    best_of, generate_task, lr_sweep, run_ablation, train_with_state, AblationSuite, SyntheticTask, TaskData,
    ABLATION_NAMES,
};
use soda_core::linalg::io::{format_matrix, read_matrix, write_matrix};
use soda_core::linalg::{lq, svd, DenseMatrix};
use soda_core::verify::{corrupted_kron, run_all, run_all_with};
use soda_core::SodaError;

use config::{read_config_file, CliConfig, Setting};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Core(#[from] SodaError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "soda",
    version,
    about = "Spectral and orthogonal adapters on synthetic layers"
)]
pub struct Cli {
    /// Flat `key = value` settings file; flags override it.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file or prefix, depending on the command.
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Fill the CSV `seconds` column (makes output time-dependent).
    #[arg(long, global = true)]
    pub timing: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DecomposeMode {
    Svd,
    Lq,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Factor a matrix file and print its singular values or L diagonal.
    Decompose {
        input: PathBuf,
        #[arg(long, value_enum, default_value = "svd")]
        mode: DecomposeMode,
        /// Prefix for the factor files; falls back to `--out`.
        #[arg(long, value_name = "PATH")]
        prefix: Option<PathBuf>,
    },
    /// Train one adapter on a synthetic task.
    #[command(allow_negative_numbers = true)]
    Train(Settings),
    /// Train once per learning rate in `lrs`.
    #[command(allow_negative_numbers = true)]
    Sweep(Settings),
    /// Run a named ablation.
    #[command(allow_negative_numbers = true)]
    Ablate {
        name: String,
        #[command(flatten)]
        settings: Settings,
    },
    /// Trainable parameter counts per method.
    Params {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        r: Option<usize>,
    },
    /// Add the residuals of two checkpoints onto a base weight.
    Merge {
        checkpoint1: PathBuf,
        checkpoint2: PathBuf,
        base: PathBuf,
    },
    /// Run the numerical check battery.
    Verify {
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

/// Per-run keys; each mirrors the config-file key with `-` for `_`.
#[derive(Debug, Clone, Default, Args)]
pub struct Settings {
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub r: Option<String>,
    #[arg(long)]
    pub constraint: Option<String>,
    #[arg(long)]
    pub lr: Option<String>,
    #[arg(long)]
    pub lr_rotation: Option<String>,
    #[arg(long)]
    pub lr_spectral: Option<String>,
    #[arg(long)]
    pub lr_euclidean: Option<String>,
    #[arg(long)]
    pub beta: Option<String>,
    #[arg(long)]
    pub steps: Option<String>,
    #[arg(long)]
    pub batch_size: Option<String>,
    #[arg(long)]
    pub optimizer: Option<String>,
    /// Comma-separated Kronecker factor sizes.
    #[arg(long)]
    pub kron_sizes: Option<String>,
    #[arg(long)]
    pub n: Option<String>,
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub task_factors: Option<String>,
    #[arg(long)]
    pub samples: Option<String>,
    #[arg(long)]
    pub noise: Option<String>,
    /// Comma-separated learning rates for `sweep` and `ablate`.
    #[arg(long)]
    pub lrs: Option<String>,
    /// Comma-separated seeds for `ablate`.
    #[arg(long)]
    pub seeds: Option<String>,
    /// Write the trained adapter here (`train` only).
    #[arg(long)]
    pub checkpoint: Option<String>,
    /// Write the frozen base weight here.
    #[arg(long)]
    pub base_out: Option<String>,
}

impl Settings {
    fn pairs(&self) -> Vec<(&'static str, &Option<String>)> {
        vec![
            ("method", &self.method),
            ("r", &self.r),
            ("constraint", &self.constraint),
            ("lr", &self.lr),
            ("lr_rotation", &self.lr_rotation),
            ("lr_spectral", &self.lr_spectral),
            ("lr_euclidean", &self.lr_euclidean),
            ("beta", &self.beta),
            ("steps", &self.steps),
            ("batch_size", &self.batch_size),
            ("optimizer", &self.optimizer),
            ("kron_sizes", &self.kron_sizes),
            ("n", &self.n),
            ("task", &self.task),
            ("task_factors", &self.task_factors),
            ("samples", &self.samples),
            ("noise", &self.noise),
            ("lrs", &self.lrs),
            ("seeds", &self.seeds),
            ("checkpoint", &self.checkpoint),
            ("base_out", &self.base_out),
        ]
    }
}

fn flag(key: &str, value: String) -> Setting {
    Setting {
        key: key.to_string(),
        value,
        origin: format!("--{}", key.replace('_', "-")),
    }
}

/// File settings first, then flags, so flags win.
pub fn resolve_config(cli: &Cli, settings: Option<&Settings>) -> Result<CliConfig, CliError> {
    let mut all = match &cli.config {
        Some(path) => read_config_file(path)?,
        None => Vec::new(),
    };
    if let Some(s) = settings {
        for (key, value) in s.pairs() {
            if let Some(v) = value {
                all.push(flag(key, v.clone()));
            }
        }
    }
    if let Some(seed) = cli.seed {
        all.push(flag("seed", seed.to_string()));
    }
    if let Some(out) = &cli.out {
        all.push(flag("out", out.display().to_string()));
    }
    if cli.timing {
        all.push(flag("timing", "true".into()));
    }
    CliConfig::from_settings(&all)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(io_err(path))
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Runs a parsed command. Returns the process exit code for non-error
/// outcomes (`1` when a check fails).
pub fn run(cli: &Cli, stdout: &mut dyn Write) -> Result<u8, CliError> {
    match &cli.command {
        Command::Decompose { input, mode, prefix } => {
            let prefix = prefix.clone().or_else(|| cli.out.clone());
            cmd_decompose(input, *mode, prefix.as_deref(), stdout)
        }
        Command::Train(s) => cmd_train(&resolve_config(cli, Some(s))?, stdout),
        Command::Sweep(s) => cmd_sweep(&resolve_config(cli, Some(s))?, stdout),
        Command::Ablate { name, settings } => cmd_ablate(name, &resolve_config(cli, Some(settings))?, stdout),
        Command::Params { n, r } => {
            let cfg = resolve_config(cli, None)?;
            cmd_params(n.unwrap_or(cfg.n), r.unwrap_or(cfg.r), stdout)
        }
        Command::Merge {
            checkpoint1,
            checkpoint2,
            base,
        } => {
            let out = cli
                .out
                .clone()
                .ok_or_else(|| CliError::Usage("merge needs --out <prefix>".into()))?;
            cmd_merge(checkpoint1, checkpoint2, base, &out, stdout)
        }
        Command::Verify { inject_fault } => {
            let cfg = resolve_config(cli, None)?;
            cmd_verify(cfg.seed, *inject_fault, stdout)
        }
    }
}

fn out_line(stdout: &mut dyn Write, line: &str) -> Result<(), CliError> {
    writeln!(stdout, "{line}").map_err(io_err(Path::new("<stdout>")))
}

pub fn cmd_decompose(
    input: &Path,
    mode: DecomposeMode,
    prefix: Option<&Path>,
    stdout: &mut dyn Write,
) -> Result<u8, CliError> {
    let w = read_matrix(input)?;
    let (m, n) = w.shape();
    let (factors, summary, rebuilt): (Vec<(&str, DenseMatrix)>, Vec<f64>, DenseMatrix) = match mode {
        DecomposeMode::Svd => {
            let d = svd(&w)?;
            let sigma = DenseMatrix::new(1, d.sigma.len(), d.sigma.clone())?;
            let rebuilt = d.reconstruct();
            (
                vec![("u", d.u.clone()), ("sigma", sigma), ("vt", d.vt.clone())],
                d.sigma,
                rebuilt,
            )
        }
        DecomposeMode::Lq => {
            let d = lq(&w)?;
            let diag = d.l.diagonal();
            let rebuilt = d.reconstruct();
            (vec![("l", d.l), ("q", d.q)], diag, rebuilt)
        }
    };
    let label = match mode {
        DecomposeMode::Svd => "sigma",
        DecomposeMode::Lq => "l_diagonal",
    };
    let residual = rebuilt.sub(&w)?.frobenius_norm();
    out_line(stdout, &format!("shape {m} {n}"))?;
    out_line(
        stdout,
        &format!(
            "{label} {}",
            summary.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" ")
        ),
    )?;
    out_line(stdout, &format!("reconstruction_residual {residual:?}"))?;
    if let Some(prefix) = prefix {
        for (name, f) in &factors {
            let path = with_suffix(prefix, &format!("_{name}.txt"));
            write_matrix(&path, f)?;
            out_line(stdout, &format!("wrote {}", path.display()))?;
        }
    }
    Ok(0)
}

fn build_task(cfg: &CliConfig) -> Result<TaskData, CliError> {
    let mut spec = SyntheticTask::new(cfg.task, cfg.n, cfg.seed)
        .with_noise(cfg.noise)
        .with_kron_factors(cfg.task_factors);
    if let Some(s) = cfg.samples {
        spec = spec.with_samples(s);
    }
    Ok(generate_task(&spec)?)
}

/// CSV goes to `--out` when given (summary on stdout), else to stdout.
fn emit_csv(cfg: &CliConfig, csv: &str, summary: &str, stdout: &mut dyn Write) -> Result<(), CliError> {
    match &cfg.out {
        Some(path) => {
            write_text(path, csv)?;
            out_line(stdout, summary)
        }
        None => {
            write!(stdout, "{csv}").map_err(io_err(Path::new("<stdout>")))?;
            eprintln!("{summary}");
            Ok(())
        }
    }
}

fn validate_train(cfg: &CliConfig) -> Result<(), CliError> {
    let t = cfg.train_config();
    t.validate()?;
    t.adapter_config().validate(cfg.n, cfg.n)?;
    Ok(())
}

pub fn cmd_train(cfg: &CliConfig, stdout: &mut dyn Write) -> Result<u8, CliError> {
    validate_train(cfg)?;
    let task = build_task(cfg)?;
    let (record, state) = train_with_state(&task, &cfg.train_config())?;
    if let Some(path) = &cfg.checkpoint {
        write_checkpoint(
            path,
            &Checkpoint {
                shape: task.base.shape(),
                state,
            },
        )?;
    }
    if let Some(path) = &cfg.base_out {
        write_matrix(path, task.base.w0())?;
    }
    let summary = format!(
        "{} n={} r={} lr={:?} final_fit_error={:?} final_defect={:?} params={} status={}",
        record.method,
        record.n,
        record.r,
        record.lr,
        record.final_fit_error,
        record.final_defect,
        record.param_count,
        record.status.label()
    );
    emit_csv(cfg, &format_records(&[record], cfg.timing), &summary, stdout)?;
    Ok(0)
}

pub fn cmd_sweep(cfg: &CliConfig, stdout: &mut dyn Write) -> Result<u8, CliError> {
    validate_train(cfg)?;
    let task = build_task(cfg)?;
    let records = lr_sweep(&task, &cfg.train_config(), &cfg.lrs)?;
    let summary = match best_of(&records) {
        Some(b) => format!(
            "{} best lr={:?} final_fit_error={:?} over {} runs",
            b.method,
            b.lr,
            b.final_fit_error,
            records.len()
        ),
        None => format!("{} no successful run over {} runs", cfg.method, records.len()),
    };
    emit_csv(cfg, &format_records(&records, cfg.timing), &summary, stdout)?;
    Ok(0)
}

pub fn cmd_ablate(name: &str, cfg: &CliConfig, stdout: &mut dyn Write) -> Result<u8, CliError> {
    if !ABLATION_NAMES.contains(&name) {
        return Err(CliError::Usage(format!(
            "unknown ablation `{name}`; valid: {}",
            ABLATION_NAMES.join(", ")
        )));
    }
    let suite = AblationSuite {
        n: cfg.n,
        r: cfg.r,
        seeds: cfg.seeds.clone(),
        steps: cfg.steps,
        lrs: cfg.lrs.clone(),
    };
    let report = run_ablation(name, &suite)?;
    let summary = format!("ablation {name}: {} rows", report.rows.len());
    emit_csv(cfg, &format_ablation(&report, cfg.timing), &summary, stdout)?;
    Ok(0)
}

fn formula(method: Method) -> &'static str {
    match method {
        Method::Lora => "2nr",
        Method::Oft => "n^2/r",
        Method::OftShared => "n^2/r^2",
        Method::Koft => "r*n^(2/r)",
        Method::Svdiff => "n",
        Method::SodaSvd | Method::SodaQr => "n+r*n^(2/r)",
    }
}

fn undefined_reason(method: Method, n: usize, r: usize) -> String {
    match method {
        Method::Oft | Method::OftShared => format!("n/a: {r} does not divide {n}"),
        _ => format!("n/a: {n} is not a perfect {r}-th power"),
    }
}

/// Table of `method,formula,table_count,param_count`. `table_count` is the
/// closed form; `param_count` is what an adapter on an `n×n` layer trains.
pub fn params_table(n: usize, r: usize) -> Result<String, CliError> {
    if n == 0 || r == 0 {
        return Err(CliError::Invalid(format!("n and r must be positive, got n={n}, r={r}")));
    }
    let mut out = String::from("method,formula,table_count,param_count\n");
    for method in Method::ALL {
        let table = table_formula_count(method, n, r).map_or_else(|| undefined_reason(method, n, r), |c| c.to_string());
        let actual = param_count(method, n, n, r).map_or_else(|_| "n/a".to_string(), |c| c.to_string());
        out.push_str(&format!("{},{},{table},{actual}\n", method, formula(method)));
    }
    Ok(out)
}

pub fn cmd_params(n: usize, r: usize, stdout: &mut dyn Write) -> Result<u8, CliError> {
    let table = params_table(n, r)?;
    write!(stdout, "{table}").map_err(io_err(Path::new("<stdout>")))?;
    Ok(0)
}

fn load_residual(path: &Path, base: &FrozenBase) -> Result<(Method, DenseMatrix), CliError> {
    let ck = read_checkpoint(path)?;
    if ck.shape != base.shape() {
        return Err(CliError::Invalid(format!(
            "{} was trained for a {}x{} layer but the base is {}x{}",
            path.display(),
            ck.shape.0,
            ck.shape.1,
            base.shape().0,
            base.shape().1
        )));
    }
    let method = ck.state.method();
    let dw = residual(base, &ck.state).map_err(|e| {
        CliError::Invalid(format!(
            "{} ({method}) is incompatible with the base: {e}",
            path.display()
        ))
    })?;
    Ok((method, dw))
}

pub fn cmd_merge(
    checkpoint1: &Path,
    checkpoint2: &Path,
    base: &Path,
    out: &Path,
    stdout: &mut dyn Write,
) -> Result<u8, CliError> {
    let base = FrozenBase::new(read_matrix(base)?);
    let (m1, dw1) = load_residual(checkpoint1, &base)?;
    let (m2, dw2) = load_residual(checkpoint2, &base)?;
    let dw = merge(&dw1, &dw2)?;
    let weight = base.w0().add(&dw)?;
    let weight_path = with_suffix(out, "_weight.txt");
    let residual_path = with_suffix(out, "_residual.txt");
    write_text(&weight_path, &format_matrix(&weight))?;
    write_text(&residual_path, &format_matrix(&dw))?;
    out_line(
        stdout,
        &format!(
            "merged {m1} + {m2}: residual norm {:?}; wrote {} and {}",
            dw.frobenius_norm(),
            weight_path.display(),
            residual_path.display()
        ),
    )?;
    Ok(0)
}

pub fn cmd_verify(seed: u64, inject_fault: bool, stdout: &mut dyn Write) -> Result<u8, CliError> {
    let results = if inject_fault {
        run_all_with(seed, corrupted_kron)
    } else {
        run_all(seed)
    };
    for r in &results {
        out_line(stdout, &r.to_string())?;
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    out_line(stdout, &format!("{} checks, {failed} failed", results.len()))?;
    Ok(if failed == 0 { 0 } else { 1 })
}
