//! Flat `key = value` settings, merged from an optional file and flags.

use std::fs;
use std::path::{Path, PathBuf};

use soda_core::adapters::{Constraint, Method};
use soda_core::harness::{OptimizerChoice, TaskKind, TrainConfig, DEFAULT_SWEEP_LRS};

use crate::CliError;

/// Every recognised key, in documentation order.
pub const KEYS: &[&str] = &[
    "seed",
    "out",
    "timing",
    "method",
    "r",
    "constraint",
    "lr",
    "lr_rotation",
    "lr_spectral",
    "lr_euclidean",
    "beta",
    "steps",
    "batch_size",
    "optimizer",
    "kron_sizes",
    "n",
    "task",
    "task_factors",
    "samples",
    "noise",
    "lrs",
    "seeds",
    "checkpoint",
    "base_out",
];

/// One raw setting and where it came from, for error messages.
#[derive(Debug, Clone, PartialEq)]
pub struct Setting {
    pub key: String,
    pub value: String,
    pub origin: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub timing: bool,
    pub method: Method,
    pub r: usize,
    pub constraint: Constraint,
    pub lr: f64,
    pub lr_rotation: Option<f64>,
    pub lr_spectral: Option<f64>,
    pub lr_euclidean: Option<f64>,
    pub beta: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerChoice,
    pub kron_sizes: Option<Vec<usize>>,
    pub n: usize,
    pub task: TaskKind,
    pub task_factors: usize,
    pub samples: Option<usize>,
    pub noise: f64,
    pub lrs: Vec<f64>,
    pub seeds: Vec<u64>,
    pub checkpoint: Option<PathBuf>,
    pub base_out: Option<PathBuf>,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: None,
            timing: false,
            method: Method::SodaSvd,
            r: 3,
            constraint: Constraint::Relu,
            lr: 1e-2,
            lr_rotation: None,
            lr_spectral: None,
            lr_euclidean: None,
            beta: 0.5,
            steps: 1000,
            batch_size: 0,
            optimizer: OptimizerChoice::Stiefel,
            kron_sizes: None,
            n: 8,
            task: TaskKind::ComposedTarget,
            task_factors: 3,
            samples: None,
            noise: 0.0,
            lrs: DEFAULT_SWEEP_LRS.to_vec(),
            seeds: (0..5).collect(),
            checkpoint: None,
            base_out: None,
        }
    }
}

/// Parses a config file into raw settings. Blank lines and `#` comments are
/// skipped; keys are checked later, together with flags.
pub fn parse_config_text(text: &str, source: &str) -> Result<Vec<Setting>, CliError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let origin = format!("{source}:{}", idx + 1);
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::Invalid(format!("{origin}: expected `key = value`, got `{line}`")))?;
        out.push(Setting {
            key: key.trim().to_string(),
            value: value.trim().to_string(),
            origin,
        });
    }
    Ok(out)
}

pub fn read_config_file(path: &Path) -> Result<Vec<Setting>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Invalid(format!("cannot read config {}: {e}", path.display())))?;
    parse_config_text(&text, &path.display().to_string())
}

fn bad(s: &Setting, what: &str) -> CliError {
    CliError::Invalid(format!("{} ({}): `{}` {what}", s.key, s.origin, s.value))
}

fn parse_num<T: std::str::FromStr>(s: &Setting) -> Result<T, CliError> {
    s.value.parse().map_err(|_| bad(s, "is not a valid number"))
}

fn positive_f64(s: &Setting) -> Result<f64, CliError> {
    let v: f64 = parse_num(s)?;
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(bad(s, "must be a positive finite number"))
    }
}

fn at_least(s: &Setting, min: usize) -> Result<usize, CliError> {
    let v: usize = parse_num(s)?;
    if v >= min {
        Ok(v)
    } else {
        Err(bad(s, &format!("must be at least {min}")))
    }
}

fn list<T>(s: &Setting, item: impl Fn(&Setting) -> Result<T, CliError>) -> Result<Vec<T>, CliError> {
    let items = s
        .value
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| {
            item(&Setting {
                key: s.key.clone(),
                value: t.to_string(),
                origin: s.origin.clone(),
            })
        })
        .collect::<Result<Vec<T>, CliError>>()?;
    if items.is_empty() {
        return Err(bad(s, "must list at least one value"));
    }
    Ok(items)
}

fn named<T: std::str::FromStr>(s: &Setting) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    s.value
        .parse()
        .map_err(|e: T::Err| CliError::Invalid(format!("{} ({}): {e}", s.key, s.origin)))
}

fn path(s: &Setting) -> Result<Option<PathBuf>, CliError> {
    if s.value.is_empty() {
        return Err(bad(s, "must be a path"));
    }
    Ok(Some(PathBuf::from(&s.value)))
}

impl CliConfig {
    /// Applies settings in order, so later entries (flags) override earlier
    /// ones (file).
    pub fn from_settings(settings: &[Setting]) -> Result<Self, CliError> {
        let mut c = CliConfig::default();
        for s in settings {
            match s.key.as_str() {
                "seed" => c.seed = parse_num(s)?,
                "out" => c.out = path(s)?,
                "timing" => c.timing = parse_bool(s)?,
                "method" => c.method = named(s)?,
                "r" => c.r = at_least(s, 1)?,
                "constraint" => c.constraint = named(s)?,
                "lr" => c.lr = positive_f64(s)?,
                "lr_rotation" => c.lr_rotation = Some(positive_f64(s)?),
                "lr_spectral" => c.lr_spectral = Some(positive_f64(s)?),
                "lr_euclidean" => c.lr_euclidean = Some(positive_f64(s)?),
                "beta" => {
                    let v: f64 = parse_num(s)?;
                    if !(0.0..1.0).contains(&v) {
                        return Err(bad(s, "must lie in [0, 1)"));
                    }
                    c.beta = v;
                }
                "steps" => c.steps = at_least(s, 0)?,
                "batch_size" => c.batch_size = at_least(s, 0)?,
                "optimizer" => c.optimizer = named(s)?,
                "kron_sizes" => c.kron_sizes = Some(list(s, |t| at_least(t, 1))?),
                "n" => c.n = at_least(s, 1)?,
                "task" => c.task = named(s)?,
                "task_factors" => c.task_factors = at_least(s, 1)?,
                "samples" => c.samples = Some(at_least(s, 1)?),
                "noise" => {
                    let v: f64 = parse_num(s)?;
                    if !(v.is_finite() && v >= 0.0) {
                        return Err(bad(s, "must be a finite number >= 0"));
                    }
                    c.noise = v;
                }
                "lrs" => c.lrs = list(s, positive_f64)?,
                "seeds" => c.seeds = list(s, parse_num)?,
                "checkpoint" => c.checkpoint = path(s)?,
                "base_out" => c.base_out = path(s)?,
                other => {
                    return Err(CliError::Invalid(format!(
                        "unknown key `{other}` ({}); valid keys: {}",
                        s.origin,
                        KEYS.join(", ")
                    )))
                }
            }
        }
        Ok(c)
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut t = TrainConfig::new(self.method, self.r)
            .with_lr(self.lr)
            .with_steps(self.steps)
            .with_seed(self.seed)
            .with_constraint(self.constraint)
            .with_optimizer(self.optimizer)
            .with_beta(self.beta);
        if let Some(v) = self.lr_rotation {
            t.lr_rotation = v;
        }
        if let Some(v) = self.lr_spectral {
            t.lr_spectral = v;
        }
        if let Some(v) = self.lr_euclidean {
            t.lr_euclidean = v;
        }
        t.batch_size = self.batch_size;
        t.kron_sizes = self.kron_sizes.clone();
        t
    }
}

fn parse_bool(s: &Setting) -> Result<bool, CliError> {
    match s.value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(bad(s, "must be true or false")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn settings(text: &str) -> Vec<Setting> {
        parse_config_text(text, "cfg").unwrap()
    }

    #[test]
    fn comments_and_blank_lines_skipped() {
        let s = settings("# header\n\nsteps = 5  # trailing\nmethod=koft\n");
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].origin, "cfg:3");
        let c = CliConfig::from_settings(&s).unwrap();
        assert_eq!(c.steps, 5);
        assert_eq!(c.method, Method::Koft);
    }

    #[test]
    fn later_settings_win() {
        let mut s = settings("steps = 5\n");
        s.push(Setting {
            key: "steps".into(),
            value: "7".into(),
            origin: "--steps".into(),
        });
        assert_eq!(CliConfig::from_settings(&s).unwrap().steps, 7);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = CliConfig::from_settings(&settings("stepz = 3\n"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("stepz") && err.contains("cfg:1"), "{err}");
    }

    #[test]
    fn ranges_checked() {
        for bad in [
            "lr = 0",
            "lr = -1",
            "beta = 1",
            "r = 0",
            "n = 0",
            "noise = -0.1",
            "lrs = ",
            "steps = x",
        ] {
            assert!(CliConfig::from_settings(&settings(bad)).is_err(), "{bad}");
        }
        assert!(parse_config_text("no equals sign", "cfg").is_err());
    }

    #[test]
    fn lists_and_overrides() {
        let c =
            CliConfig::from_settings(&settings("lrs = 0.1, 0.01\nseeds = 3 4\nlr = 0.05\nlr_spectral = 2\n")).unwrap();
        assert_eq!(c.lrs, vec![0.1, 0.01]);
        assert_eq!(c.seeds, vec![3, 4]);
        let t = c.train_config();
        assert_eq!(t.lr_rotation, 0.05);
        assert_eq!(t.lr_spectral, 2.0);
    }
}
