//! Plain-text embedding files.
//!
//! ```text
//! # optional comment lines start with '#'
//! <dim> <N>
//! v_1 v_2 ... v_dim        (N lines)
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use super::Embedding;
use crate::error::{Error, Result};

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<Vec<Embedding>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(BufReader::new(file), path)
}

/// Parses an embedding file from any reader. `origin` is only used in error messages.
pub fn parse_embeddings(reader: impl BufRead, origin: impl Into<PathBuf>) -> Result<Vec<Embedding>> {
    let origin = origin.into();
    let err = |line: usize, message: String| Error::Parse {
        path: origin.clone(),
        line,
        message,
    };

    let mut header: Option<(usize, usize)> = None;
    let mut out = Vec::new();
    let mut last_line = 0;
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        last_line = lineno;
        let line = line.map_err(|e| Error::io(&origin, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        match header {
            None => {
                let fields: Vec<_> = trimmed.split_whitespace().collect();
                let parsed = match fields.as_slice() {
                    [d, n] => d.parse::<usize>().ok().zip(n.parse::<usize>().ok()),
                    _ => None,
                };
                let (dim, n) = parsed
                    .ok_or_else(|| err(lineno, format!("expected header `<dim> <N>`, found `{trimmed}`")))?;
                if dim == 0 {
                    return Err(err(lineno, "embedding dimension must be positive".into()));
                }
                header = Some((dim, n));
                out.reserve(n);
            }
            Some((dim, n)) => {
                if out.len() == n {
                    return Err(err(lineno, format!("more than the declared {n} rows")));
                }
                let values = trimmed
                    .split_whitespace()
                    .map(|t| {
                        t.parse::<f64>()
                            .map_err(|_| err(lineno, format!("`{t}` is not a decimal number")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                if values.len() != dim {
                    return Err(err(lineno, format!("expected {dim} values, found {}", values.len())));
                }
                out.push(Embedding::new(values).map_err(|e| err(lineno, e.to_string()))?);
            }
        }
    }
    let (_, n) = header.ok_or_else(|| err(last_line, "missing `<dim> <N>` header".into()))?;
    if out.len() != n {
        return Err(err(last_line, format!("declared {n} rows, found {}", out.len())));
    }
    Ok(out)
}

/// Writes embeddings in the ingestion format. Values use Rust's shortest
/// round-trip decimal representation.
pub fn write_embeddings(mut w: impl Write, embeddings: &[Embedding], comments: &[&str]) -> std::io::Result<()> {
    for c in comments {
        writeln!(w, "# {c}")?;
    }
    let dim = embeddings.first().map(Embedding::dim).unwrap_or(0);
    writeln!(w, "{dim} {}", embeddings.len())?;
    for e in embeddings {
        let mut first = true;
        for v in e.values() {
            if !first {
                w.write_all(b" ")?;
            }
            first = false;
            write!(w, "{v:?}")?;
        }
        w.write_all(b"\n")?;
    }
    Ok(())
}
