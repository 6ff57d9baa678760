use super::{strides_of, Tensor};
use crate::error::{Error, Result};

/// Softmax over the last axis of `logits + mask`.
///
/// The mask is additive and broadcast against the logits with trailing
/// alignment; `-inf` entries yield exactly zero weight. Every last-axis
/// slice must keep at least one unmasked entry.
pub fn masked_softmax(logits: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    let shape = logits.shape();
    let Some(&width) = shape.last() else {
        return Err(Error::Shape("softmax of a scalar".into()));
    };
    let shifted = match mask {
        Some(mask) => add_broadcast(logits, mask)?,
        None => logits.clone(),
    };
    let mut out = shifted;
    if width == 0 {
        if out.is_empty() {
            return Ok(out);
        }
        return Err(Error::DegenerateSoftmax { slice: 0 });
    }
    for (slice, row) in out.data_mut().chunks_mut(width).enumerate() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateSoftmax { slice });
        }
        if !max.is_finite() || row.iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric {
                tensor: "logits".into(),
            });
        }
        let mut total = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        for x in row.iter_mut() {
            *x /= total;
        }
    }
    Ok(out)
}

/// Gradient of the logits given softmax output `weights` and its incoming
/// gradient. Masked positions have zero weight and so receive zero gradient.
pub fn softmax_backward(weights: &Tensor, grad_weights: &Tensor) -> Result<Tensor> {
    if weights.shape() != grad_weights.shape() {
        return Err(Error::Shape(format!(
            "softmax backward on {:?} and {:?}",
            weights.shape(),
            grad_weights.shape()
        )));
    }
    let width = *weights.shape().last().unwrap_or(&1);
    let mut out = grad_weights.clone();
    if width == 0 {
        return Ok(out);
    }
    for (w, g) in weights
        .data()
        .chunks(width)
        .zip(out.data_mut().chunks_mut(width))
    {
        let dot: f64 = w.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
        for (gi, wi) in g.iter_mut().zip(w) {
            *gi = wi * (*gi - dot);
        }
    }
    Ok(out)
}

/// Elementwise `a + b` with `b` broadcast to `a`'s shape.
fn add_broadcast(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return a.add(b);
    }
    let (ra, rb) = (a.rank(), b.rank());
    if rb > ra {
        return Err(Error::Shape(format!(
            "mask {:?} does not broadcast to {:?}",
            b.shape(),
            a.shape()
        )));
    }
    let b_strides = strides_of(b.shape());
    let mut strides = vec![0usize; ra];
    for i in 0..rb {
        let (ea, eb) = (a.shape()[ra - rb + i], b.shape()[i]);
        if eb == ea {
            strides[ra - rb + i] = b_strides[i];
        } else if eb != 1 {
            return Err(Error::Shape(format!(
                "mask {:?} does not broadcast to {:?}",
                b.shape(),
                a.shape()
            )));
        }
    }
    let expanded = super::gather_strided(b.data(), a.shape(), &strides);
    let data = a.data().iter().zip(expanded).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Concatenates along the second-to-last axis (the position axis of a
/// key or value cache). `a`'s slices come first.
pub fn concat_last_but_one(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let rank = a.rank();
    let compatible = rank >= 2
        && b.rank() == rank
        && a.shape()[..rank - 2] == b.shape()[..rank - 2]
        && a.shape()[rank - 1] == b.shape()[rank - 1];
    if !compatible {
        return Err(Error::Shape(format!(
            "cannot concatenate {:?} and {:?} along the position axis",
            a.shape(),
            b.shape()
        )));
    }
    let outer: usize = a.shape()[..rank - 2].iter().product();
    let block_a = a.shape()[rank - 2] * a.shape()[rank - 1];
    let block_b = b.shape()[rank - 2] * b.shape()[rank - 1];
    let mut data = Vec::with_capacity(a.len() + b.len());
    for o in 0..outer {
        data.extend_from_slice(&a.data()[o * block_a..(o + 1) * block_a]);
        data.extend_from_slice(&b.data()[o * block_b..(o + 1) * block_b]);
    }
    let mut shape = a.shape().to_vec();
    shape[rank - 2] += b.shape()[rank - 2];
    Tensor::new(shape, data)
}
