//! Plain-text tensor format used for golden fixtures and checkpoints:
//!
//! ```text
//! shape: 2 3
//! 1.0000000000000000e0
//! ...
//! ```
//!
//! One value per line, 17 significant digits, so every `f64` round-trips.

use super::Tensor;
use crate::error::{Error, Result};

pub fn write_text(tensor: &Tensor) -> String {
    let mut out = String::from("shape:");
    for extent in tensor.shape() {
        out.push(' ');
        out.push_str(&extent.to_string());
    }
    out.push('\n');
    for value in tensor.data() {
        out.push_str(&format!("{value:.16e}\n"));
    }
    out
}

pub fn read_text(text: &str) -> Result<Tensor> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty tensor document".into()))?;
    let dims = header
        .strip_prefix("shape:")
        .ok_or_else(|| Error::Parse(format!("expected `shape:` header, found {header:?}")))?;
    let shape = dims
        .split_whitespace()
        .map(|d| {
            d.parse::<usize>()
                .map_err(|e| Error::Parse(format!("bad extent {d:?}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let data = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("bad value {l:?}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::new(shape, data).map_err(|e| Error::Parse(e.to_string()))
}
