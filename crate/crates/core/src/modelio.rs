//! Versioned flat-text serialization for model parameters.
//!
//! Layout: a magic+version line, a `kind` line, `meta <key> <value>` lines,
//! then named tensors as `tensor <name> <rows> <cols>` followed by one
//! whitespace-separated row of decimal values per line, closed by `end`.
//! Values round-trip exactly (shortest f64 representation).

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "protoadapt-model";
const VERSION: u32 = 1;

/// In-memory form of a model file: a kind tag, integer metadata, and named
/// parameter tensors in write order.
#[derive(Debug, Clone, Default)]
pub struct ModelFile {
    pub kind: String,
    pub meta: BTreeMap<String, i64>,
    pub tensors: Vec<(String, Tensor)>,
}

impl ModelFile {
    pub fn new(kind: impl Into<String>) -> Self {
        ModelFile { kind: kind.into(), meta: BTreeMap::new(), tensors: Vec::new() }
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: i64) {
        self.meta.insert(key.into(), value);
    }

    pub fn meta(&self, key: &str) -> Result<i64> {
        self.meta.get(key).copied().ok_or_else(|| {
            Error::invalid_argument(format!("model file is missing meta key {key:?}"))
        })
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.push((name.into(), t));
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| {
                Error::invalid_argument(format!("model file is missing tensor {name:?}"))
            })
    }

    /// All tensors whose name starts with `prefix`, in file order.
    pub fn tensors_with_prefix(&self, prefix: &str) -> Vec<(&str, &Tensor)> {
        self.tensors
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(n, t)| (n.as_str(), t))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        writeln!(w, "{MAGIC} v{VERSION}")?;
        writeln!(w, "kind {}", self.kind)?;
        for (k, v) in &self.meta {
            writeln!(w, "meta {k} {v}")?;
        }
        for (name, t) in &self.tensors {
            let (r, c) = (t.rows(), t.cols());
            writeln!(w, "tensor {name} {r} {c}")?;
            for i in 0..r {
                let row: Vec<String> = t.row(i).iter().map(|v| v.to_string()).collect();
                writeln!(w, "{}", row.join(" "))?;
            }
        }
        writeln!(w, "end")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let reader = BufReader::new(file);
        let mut lines = reader.lines().enumerate();

        let (_, first) = lines
            .next()
            .ok_or_else(|| Error::parse(1, "empty model file"))?;
        let first = first?;
        let expected = format!("{MAGIC} v{VERSION}");
        if first.trim() != expected {
            return Err(Error::parse(1, format!("expected {expected:?}, got {first:?}")));
        }

        let mut out = ModelFile::default();
        let mut pending: Option<(String, usize, usize, Vec<f64>)> = None;
        let mut saw_end = false;

        for (idx, line) in lines {
            let line_no = idx + 1;
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }

            if let Some((name, r, c, values)) = pending.as_mut() {
                for field in trimmed.split_whitespace() {
                    let v: f64 = field.parse().map_err(|_| {
                        Error::parse(line_no, format!("bad value {field:?} in tensor {name}"))
                    })?;
                    values.push(v);
                }
                if values.len() > *r * *c {
                    return Err(Error::parse(
                        line_no,
                        format!("too many values for tensor {name}"),
                    ));
                }
                if values.len() == *r * *c {
                    let (name, r, c, values) = pending.take().unwrap();
                    out.tensors.push((name, Tensor::from_vec(&[r, c], values)?));
                }
                continue;
            }

            let mut parts = trimmed.split_whitespace();
            match parts.next() {
                Some("kind") => {
                    out.kind = parts
                        .next()
                        .ok_or_else(|| Error::parse(line_no, "kind line missing value"))?
                        .to_string();
                }
                Some("meta") => {
                    let key = parts
                        .next()
                        .ok_or_else(|| Error::parse(line_no, "meta line missing key"))?;
                    let value: i64 = parts
                        .next()
                        .ok_or_else(|| Error::parse(line_no, "meta line missing value"))?
                        .parse()
                        .map_err(|_| Error::parse(line_no, "meta value is not an integer"))?;
                    out.meta.insert(key.to_string(), value);
                }
                Some("tensor") => {
                    let name = parts
                        .next()
                        .ok_or_else(|| Error::parse(line_no, "tensor line missing name"))?;
                    let r: usize = parts
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| Error::parse(line_no, "tensor line missing rows"))?;
                    let c: usize = parts
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| Error::parse(line_no, "tensor line missing cols"))?;
                    pending = Some((name.to_string(), r, c, Vec::with_capacity(r * c)));
                }
                Some("end") => {
                    saw_end = true;
                    break;
                }
                Some(other) => {
                    return Err(Error::parse(line_no, format!("unexpected directive {other:?}")));
                }
                None => {}
            }
        }

        if let Some((name, ..)) = pending {
            return Err(Error::parse(0, format!("tensor {name} is truncated")));
        }
        if !saw_end {
            return Err(Error::parse(0, "model file missing end marker"));
        }
        if out.kind.is_empty() {
            return Err(Error::parse(0, "model file missing kind"));
        }
        Ok(out)
    }
}
