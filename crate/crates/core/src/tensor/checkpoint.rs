//! Plain-text checkpoint of named tensors plus string metadata.
//!
//! ```text
//! gatecade-checkpoint 1
//! meta alpha f64:3fe0000000000000
//! meta backbone mlp
//! tensor stem.w 8x16 3fb99999999999a0 bfc3333333333333 ...
//! tensor gc.mask [] 0000000000000000
//! ```
//!
//! Floats are stored as the hex of their IEEE-754 bits, so reading a file
//! back reproduces every value bit for bit. Names and metadata keys may not
//! contain whitespace; metadata values may not contain newlines.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &str = "gatecade-checkpoint 1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn set_f64(&mut self, key: &str, value: f64) {
        self.set(key, format!("f64:{:016x}", value.to_bits()));
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata `{key}`")))
    }

    pub fn get_f64(&self, key: &str) -> Result<f64> {
        let raw = self.get(key)?;
        raw.strip_prefix("f64:")
            .and_then(|h| u64::from_str_radix(h, 16).ok())
            .map(f64::from_bits)
            .ok_or_else(|| Error::Checkpoint(format!("metadata `{key}` is not an f64: {raw}")))
    }

    pub fn get_usize(&self, key: &str) -> Result<usize> {
        let raw = self.get(key)?;
        raw.parse()
            .map_err(|_| Error::Checkpoint(format!("metadata `{key}` is not an integer: {raw}")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))
    }
}

fn check_token(kind: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(char::is_whitespace) {
        return Err(Error::Checkpoint(format!(
            "{kind} `{s}` must be non-empty without whitespace"
        )));
    }
    Ok(())
}

pub fn write_checkpoint<W: Write>(ckpt: &Checkpoint, mut out: W) -> Result<()> {
    writeln!(out, "{MAGIC}")?;
    for (k, v) in &ckpt.meta {
        check_token("metadata key", k)?;
        if v.contains('\n') {
            return Err(Error::Checkpoint(format!(
                "metadata `{k}` contains a newline"
            )));
        }
        writeln!(out, "meta {k} {v}")?;
    }
    for (name, t) in &ckpt.tensors {
        check_token("tensor name", name)?;
        let shape = if t.shape().is_empty() {
            "[]".to_string()
        } else {
            t.shape()
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join("x")
        };
        write!(out, "tensor {name} {shape}")?;
        for v in t.data() {
            write!(out, " {:016x}", v.to_bits())?;
        }
        writeln!(out)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(input: R) -> Result<Checkpoint> {
    let mut lines = input.lines();
    match lines.next() {
        Some(Ok(l)) if l.trim_end() == MAGIC => {}
        _ => return Err(Error::Checkpoint("missing header line".into())),
    }
    let mut ckpt = Checkpoint::default();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        let bad = |msg: &str| Error::Checkpoint(format!("line {}: {msg}", lineno + 2));
        if line.trim().is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("meta ") {
            let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
            ckpt.meta.insert(k.to_string(), v.to_string());
        } else if let Some(rest) = line.strip_prefix("tensor ") {
            let mut parts = rest.split_ascii_whitespace();
            let name = parts.next().ok_or_else(|| bad("missing tensor name"))?;
            let shape_s = parts.next().ok_or_else(|| bad("missing tensor shape"))?;
            let shape: Vec<usize> = if shape_s == "[]" {
                Vec::new()
            } else {
                shape_s
                    .split('x')
                    .map(|d| d.parse().map_err(|_| bad("bad dimension")))
                    .collect::<Result<_>>()?
            };
            let data = parts
                .map(|h| {
                    u64::from_str_radix(h, 16)
                        .map(f64::from_bits)
                        .map_err(|_| bad("bad value"))
                })
                .collect::<Result<Vec<f64>>>()?;
            let t = Tensor::new(shape, data).map_err(|e| bad(&e.to_string()))?;
            ckpt.tensors.push((name.to_string(), t));
        } else {
            return Err(bad("expected `meta` or `tensor`"));
        }
    }
    Ok(ckpt)
}
