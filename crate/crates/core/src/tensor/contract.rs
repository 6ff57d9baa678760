use std::fmt;
use std::str::FromStr;

use super::Tensor;
use crate::error::{Error, Result};

/// Most distinct index letters a single contraction may use.
pub const MAX_INDICES: usize = 8;

/// A parsed two-operand equation such as `"bnd,hdk->bhnk"`.
///
/// Indices are single lowercase letters. An index may not repeat inside one
/// operand (no diagonals), and every output index must come from an input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Equation {
    lhs: Vec<u8>,
    rhs: Vec<u8>,
    out: Vec<u8>,
}

impl Equation {
    pub fn parse(text: &str) -> Result<Self> {
        let err = |why: &str| Error::Parse(format!("contraction {text:?}: {why}"));
        let (inputs, out) = text.split_once("->").ok_or_else(|| err("missing `->`"))?;
        let (lhs, rhs) = inputs
            .split_once(',')
            .ok_or_else(|| err("expected exactly two comma-separated inputs"))?;
        if rhs.contains(',') || out.contains("->") {
            return Err(err("expected exactly two inputs and one output"));
        }
        let mut distinct = [false; 26];
        for part in [lhs, rhs, out] {
            let mut local = [false; 26];
            for c in part.bytes() {
                if !c.is_ascii_lowercase() {
                    return Err(err("indices must be lowercase ascii letters"));
                }
                let slot = (c - b'a') as usize;
                if local[slot] {
                    return Err(err("an index repeats within one operand"));
                }
                local[slot] = true;
                distinct[slot] = true;
            }
        }
        if distinct.iter().filter(|&&d| d).count() > MAX_INDICES {
            return Err(err("more than 8 distinct indices"));
        }
        for c in out.bytes() {
            if !lhs.as_bytes().contains(&c) && !rhs.as_bytes().contains(&c) {
                return Err(err("output index does not appear in any input"));
            }
        }
        Ok(Equation {
            lhs: lhs.bytes().collect(),
            rhs: rhs.bytes().collect(),
            out: out.bytes().collect(),
        })
    }

    pub fn lhs(&self) -> &[u8] {
        &self.lhs
    }

    pub fn rhs(&self) -> &[u8] {
        &self.rhs
    }

    pub fn out(&self) -> &[u8] {
        &self.out
    }

    /// Every index letter used, in first-appearance order.
    pub fn indices(&self) -> Vec<u8> {
        let mut all = Vec::new();
        for &c in self.lhs.iter().chain(&self.rhs).chain(&self.out) {
            if !all.contains(&c) {
                all.push(c);
            }
        }
        all
    }

    /// Extent of every index given operand shapes; rejects mismatches.
    pub fn extents(&self, a: &[usize], b: &[usize]) -> Result<[Option<usize>; 26]> {
        if a.len() != self.lhs.len() || b.len() != self.rhs.len() {
            return Err(Error::Shape(format!(
                "{self} applied to operands of rank {} and {}",
                a.len(),
                b.len()
            )));
        }
        let mut extents = [None; 26];
        for (labels, shape) in [(&self.lhs, a), (&self.rhs, b)] {
            for (&c, &n) in labels.iter().zip(shape) {
                let slot = &mut extents[(c - b'a') as usize];
                match *slot {
                    Some(prev) if prev != n => {
                        return Err(Error::Shape(format!(
                            "{self}: index '{}' has extent {prev} and {n}",
                            c as char
                        )))
                    }
                    _ => *slot = Some(n),
                }
            }
        }
        Ok(extents)
    }

    /// Multiply-adds performed, counted as 2 flops each.
    pub fn flops(&self, a: &[usize], b: &[usize]) -> Result<u64> {
        let extents = self.extents(a, b)?;
        Ok(2 * self
            .indices()
            .iter()
            .map(|&c| extents[(c - b'a') as usize].unwrap_or(1) as u64)
            .product::<u64>())
    }

    fn reversed(&self, lhs: &[u8], rhs: &[u8], out: &[u8]) -> Result<Self> {
        let text = format!(
            "{},{}->{}",
            String::from_utf8_lossy(lhs),
            String::from_utf8_lossy(rhs),
            String::from_utf8_lossy(out)
        );
        Equation::parse(&text)
    }
}

impl FromStr for Equation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Equation::parse(s)
    }
}

impl fmt::Display for Equation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{}->{}",
            String::from_utf8_lossy(&self.lhs),
            String::from_utf8_lossy(&self.rhs),
            String::from_utf8_lossy(&self.out)
        )
    }
}

/// Generalized two-operand contraction.
///
/// Indices shared by both inputs and the output act as batch axes, indices
/// shared by the inputs only are summed, and indices private to one input
/// are either kept (when in the output) or summed away before the product.
/// The product itself runs as a batched row-major matrix multiply whose
/// inner sums accumulate in increasing index order.
pub fn contract(a: &Tensor, b: &Tensor, sig: &Equation) -> Result<Tensor> {
    let extents = sig.extents(a.shape(), b.shape())?;
    let extent = |c: u8| extents[(c - b'a') as usize].unwrap_or(1);

    let in_out = |c: &u8| sig.out.contains(c);
    let (a, lhs) = reduce_private(a, &sig.lhs, |c| in_out(c) || sig.rhs.contains(c))?;
    let (b, rhs) = reduce_private(b, &sig.rhs, |c| in_out(c) || sig.lhs.contains(c))?;

    let batch: Vec<u8> = sig
        .out
        .iter()
        .copied()
        .filter(|c| lhs.contains(c) && rhs.contains(c))
        .collect();
    let a_free: Vec<u8> = sig
        .out
        .iter()
        .copied()
        .filter(|c| lhs.contains(c) && !rhs.contains(c))
        .collect();
    let b_free: Vec<u8> = sig
        .out
        .iter()
        .copied()
        .filter(|c| rhs.contains(c) && !lhs.contains(c))
        .collect();
    let summed: Vec<u8> = lhs
        .iter()
        .copied()
        .filter(|c| rhs.contains(c) && !in_out(c))
        .collect();

    let position = |labels: &[u8], c: u8| labels.iter().position(|&x| x == c).unwrap();
    let a_order: Vec<usize> = batch
        .iter()
        .chain(&a_free)
        .chain(&summed)
        .map(|&c| position(&lhs, c))
        .collect();
    let b_order: Vec<usize> = batch
        .iter()
        .chain(&summed)
        .chain(&b_free)
        .map(|&c| position(&rhs, c))
        .collect();
    let a = a.permute(&a_order)?;
    let b = b.permute(&b_order)?;

    let size = |labels: &[u8]| labels.iter().map(|&c| extent(c)).product::<usize>();
    let (nb, ni, nk, nj) = (size(&batch), size(&a_free), size(&summed), size(&b_free));
    let mut c = vec![0.0; nb * ni * nj];
    batched_matmul(a.data(), b.data(), &mut c, nb, ni, nk, nj);

    let produced: Vec<u8> = batch
        .iter()
        .chain(&a_free)
        .chain(&b_free)
        .copied()
        .collect();
    let shape: Vec<usize> = produced.iter().map(|&c| extent(c)).collect();
    let result = Tensor::new(shape, c)?;
    let to_out: Vec<usize> = sig.out.iter().map(|&c| position(&produced, c)).collect();
    result.permute(&to_out)
}

/// Gradients of `contract(a, b, sig)` with respect to both operands.
///
/// Requires every index of each operand to appear in the other operand or
/// in the output, which holds for every equation in the attention kernels.
pub fn contract_grads(
    a: &Tensor,
    b: &Tensor,
    sig: &Equation,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    for (own, other) in [(&sig.lhs, &sig.rhs), (&sig.rhs, &sig.lhs)] {
        if let Some(&c) = own
            .iter()
            .find(|c| !other.contains(c) && !sig.out.contains(c))
        {
            return Err(Error::Shape(format!(
                "{sig}: gradient through the private summed index '{}' is unsupported",
                c as char
            )));
        }
    }
    let da = contract(grad_out, b, &sig.reversed(&sig.out, &sig.rhs, &sig.lhs)?)?;
    let db = contract(a, grad_out, &sig.reversed(&sig.lhs, &sig.out, &sig.rhs)?)?;
    Ok((da, db))
}

/// Sums `t` over every axis whose label fails `keep`, preserving label order.
fn reduce_private(
    t: &Tensor,
    labels: &[u8],
    keep: impl Fn(&u8) -> bool,
) -> Result<(Tensor, Vec<u8>)> {
    if labels.iter().all(&keep) {
        return Ok((t.clone(), labels.to_vec()));
    }
    let kept: Vec<usize> = (0..labels.len()).filter(|&i| keep(&labels[i])).collect();
    let dropped: Vec<usize> = (0..labels.len()).filter(|&i| !keep(&labels[i])).collect();
    let order: Vec<usize> = kept.iter().chain(&dropped).copied().collect();
    let moved = t.permute(&order)?;
    let inner: usize = dropped.iter().map(|&i| t.shape()[i]).product();
    let shape: Vec<usize> = kept.iter().map(|&i| t.shape()[i]).collect();
    let outer: usize = shape.iter().product();
    let data = (0..outer)
        .map(|o| moved.data()[o * inner..(o + 1) * inner].iter().sum())
        .collect();
    let labels = kept.iter().map(|&i| labels[i]).collect();
    Ok((Tensor::new(shape, data)?, labels))
}

fn batched_matmul(a: &[f64], b: &[f64], c: &mut [f64], nb: usize, ni: usize, nk: usize, nj: usize) {
    if nj == 1 {
        for t in 0..nb {
            let bt = &b[t * nk..(t + 1) * nk];
            for i in 0..ni {
                let row = &a[(t * ni + i) * nk..(t * ni + i + 1) * nk];
                let mut acc = 0.0;
                for (x, y) in row.iter().zip(bt) {
                    acc += x * y;
                }
                c[t * ni + i] = acc;
            }
        }
        return;
    }
    for t in 0..nb {
        let at = &a[t * ni * nk..(t + 1) * ni * nk];
        let bt = &b[t * nk * nj..(t + 1) * nk * nj];
        let ct = &mut c[t * ni * nj..(t + 1) * ni * nj];
        for i in 0..ni {
            let c_row = &mut ct[i * nj..(i + 1) * nj];
            for p in 0..nk {
                let aip = at[i * nk + p];
                let b_row = &bt[p * nj..(p + 1) * nj];
                for (cv, bv) in c_row.iter_mut().zip(b_row) {
                    *cv += aip * bv;
                }
            }
        }
    }
}
