//! Adapter checkpoint files.
//!
//! ```text
//! soda-checkpoint 1
//! method SODA_SVD
//! shape 8 8
//! rank 3
//! constraint RELU
//! kron_sizes 2 2 2
//! tensor delta
//! 1 8
//! 0.0 0.0 ...
//! tensor rotation.0
//! 2 2
//! ...
//! end
//! ```
//!
//! Every tensor uses the matrix text format; `delta` is stored as a row.

use std::path::Path;

use super::{AdapterState, Constraint, KroneckerRotation, Method, Trainables};
use crate::error::{Result, SodaError};
use crate::linalg::io::{parse_matrix_lines, write_matrix_into};
use crate::linalg::DenseMatrix;

const MAGIC: &str = "soda-checkpoint 1";

/// An adapter together with the base shape it was trained for.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub shape: (usize, usize),
    pub state: AdapterState,
}

fn named_tensors(t: &Trainables) -> Vec<(String, DenseMatrix)> {
    let mut out = Vec::new();
    let row = |d: &[f64]| DenseMatrix::new(1, d.len(), d.to_vec()).expect("non-empty shifts");
    match t {
        Trainables::Lora { b, a } => {
            out.push(("b".to_string(), b.clone()));
            out.push(("a".to_string(), a.clone()));
        }
        Trainables::Oft { blocks } => {
            for (i, b) in blocks.iter().enumerate() {
                out.push((format!("block.{i}"), b.clone()));
            }
        }
        Trainables::OftShared { block } => out.push(("block".to_string(), block.clone())),
        Trainables::Koft { rotation } => {
            for (i, f) in rotation.factors.iter().enumerate() {
                out.push((format!("rotation.{i}"), f.clone()));
            }
        }
        Trainables::Svdiff { delta } => out.push(("delta".to_string(), row(delta))),
        Trainables::SodaSvd { delta, rotation } | Trainables::SodaQr { delta, rotation } => {
            out.push(("delta".to_string(), row(delta)));
            for (i, f) in rotation.factors.iter().enumerate() {
                out.push((format!("rotation.{i}"), f.clone()));
            }
        }
    }
    out
}

pub fn format_checkpoint(ck: &Checkpoint) -> String {
    let mut s = String::new();
    s.push_str(MAGIC);
    s.push('\n');
    s.push_str(&format!("method {}\n", ck.state.method()));
    s.push_str(&format!("shape {} {}\n", ck.shape.0, ck.shape.1));
    s.push_str(&format!("rank {}\n", ck.state.rank));
    s.push_str(&format!("constraint {}\n", ck.state.constraint));
    if let Trainables::Koft { rotation } | Trainables::SodaSvd { rotation, .. } | Trainables::SodaQr { rotation, .. } =
        &ck.state.trainables
    {
        let sizes: Vec<String> = rotation.sizes().iter().map(usize::to_string).collect();
        s.push_str(&format!("kron_sizes {}\n", sizes.join(" ")));
    }
    for (name, m) in named_tensors(&ck.state.trainables) {
        s.push_str(&format!("tensor {name}\n"));
        write_matrix_into(&mut s, &m);
    }
    s.push_str("end\n");
    s
}

pub fn parse_checkpoint(text: &str) -> Result<Checkpoint> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let perr = |line: usize, detail: String| SodaError::Parse { line: line + 1, detail };

    let (i, first) = lines.next().ok_or_else(|| perr(0, "empty checkpoint".into()))?;
    if first.trim() != MAGIC {
        return Err(perr(i, format!("expected `{MAGIC}` header")));
    }

    let mut method = None;
    let mut shape = None;
    let mut rank = None;
    let mut constraint = None;
    let mut tensors: Vec<(String, DenseMatrix)> = Vec::new();
    let mut ended = false;

    while let Some((i, line)) = lines.next() {
        let mut parts = line.split_whitespace();
        let key = parts.next().unwrap_or_default();
        let rest: Vec<&str> = parts.collect();
        let one = |rest: &[&str]| -> Result<String> {
            match rest {
                [v] => Ok(v.to_string()),
                _ => Err(perr(i, format!("`{key}` takes one value"))),
            }
        };
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| perr(i, format!("invalid integer `{s}`")))
        };
        match key {
            "method" => method = Some(one(&rest)?.parse::<Method>().map_err(|e| perr(i, e.to_string()))?),
            "shape" => {
                if rest.len() != 2 {
                    return Err(perr(i, "`shape` takes rows and cols".into()));
                }
                shape = Some((num(rest[0])?, num(rest[1])?));
            }
            "rank" => rank = Some(num(&one(&rest)?)?),
            "constraint" => constraint = Some(one(&rest)?.parse::<Constraint>().map_err(|e| perr(i, e.to_string()))?),
            // Derived from the rotation tensors; checked below.
            "kron_sizes" => {
                for s in &rest {
                    num(s)?;
                }
            }
            "tensor" => {
                let name = one(&rest)?;
                let m = parse_matrix_lines(&mut lines, 0)?;
                tensors.push((name, m));
            }
            "end" => {
                ended = true;
                break;
            }
            other => return Err(perr(i, format!("unknown checkpoint key `{other}`"))),
        }
    }
    if !ended {
        return Err(SodaError::Parse {
            line: text.lines().count(),
            detail: "missing `end`".into(),
        });
    }
    let missing = |what: &str| SodaError::Config(format!("checkpoint is missing `{what}`"));
    let method = method.ok_or_else(|| missing("method"))?;
    let shape = shape.ok_or_else(|| missing("shape"))?;
    let rank = rank.ok_or_else(|| missing("rank"))?;
    let constraint = constraint.ok_or_else(|| missing("constraint"))?;

    let mut take = |name: &str| -> Result<DenseMatrix> {
        let pos = tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| SodaError::Config(format!("checkpoint is missing tensor `{name}`")))?;
        Ok(tensors.remove(pos).1)
    };
    let indexed = |prefix: &str, tensors_left: &mut dyn FnMut(&str) -> Result<DenseMatrix>| {
        let mut out = Vec::new();
        loop {
            match tensors_left(&format!("{prefix}.{}", out.len())) {
                Ok(m) => out.push(m),
                Err(_) if !out.is_empty() => break,
                Err(e) => return Err(e),
            }
        }
        Ok::<_, SodaError>(out)
    };
    let delta_of = |m: DenseMatrix| -> Result<Vec<f64>> {
        if m.rows() != 1 {
            return Err(SodaError::Config("`delta` must be a single row".into()));
        }
        Ok(m.into_data())
    };

    let trainables = match method {
        Method::Lora => {
            let b = take("b")?;
            let a = take("a")?;
            Trainables::Lora { b, a }
        }
        Method::Oft => Trainables::Oft {
            blocks: indexed("block", &mut take)?,
        },
        Method::OftShared => Trainables::OftShared { block: take("block")? },
        Method::Koft => Trainables::Koft {
            rotation: KroneckerRotation::from_factors(indexed("rotation", &mut take)?)?,
        },
        Method::Svdiff => Trainables::Svdiff {
            delta: delta_of(take("delta")?)?,
        },
        Method::SodaSvd => Trainables::SodaSvd {
            delta: delta_of(take("delta")?)?,
            rotation: KroneckerRotation::from_factors(indexed("rotation", &mut take)?)?,
        },
        Method::SodaQr => Trainables::SodaQr {
            delta: delta_of(take("delta")?)?,
            rotation: KroneckerRotation::from_factors(indexed("rotation", &mut take)?)?,
        },
    };
    if let Some((name, _)) = tensors.first() {
        return Err(SodaError::Config(format!("unexpected tensor `{name}` for {method}")));
    }
    let state = AdapterState {
        constraint,
        rank,
        trainables,
    };
    state.check_shape(shape.0, shape.1)?;
    Ok(Checkpoint { shape, state })
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path.as_ref())
        .map_err(|e| SodaError::Io(format!("{}: {e}", path.as_ref().display())))?;
    parse_checkpoint(&text)
}

pub fn write_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    std::fs::write(path.as_ref(), format_checkpoint(ck))
        .map_err(|e| SodaError::Io(format!("{}: {e}", path.as_ref().display())))
}
