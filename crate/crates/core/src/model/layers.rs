use super::params::{FeedForward, LayerNorm};
use crate::error::{Error, Result};
use crate::tensor::{contract, contract_grads, Equation, Tensor};

const LN_EPS: f64 = 1e-5;

pub(crate) struct NormCache {
    normalized: Tensor,
    inv_std: Vec<f64>,
}

/// Layer norm over the last axis.
pub(crate) fn layer_norm(x: &Tensor, norm: &LayerNorm) -> (Tensor, NormCache) {
    let d = norm.gain.len();
    let mut normalized = x.clone();
    let mut inv_std = Vec::with_capacity(x.len() / d);
    for row in normalized.data_mut().chunks_mut(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
        inv_std.push(inv);
    }
    let mut y = normalized.clone();
    for row in y.data_mut().chunks_mut(d) {
        for ((v, g), b) in row.iter_mut().zip(norm.gain.data()).zip(norm.bias.data()) {
            *v = *v * g + b;
        }
    }
    (
        y,
        NormCache {
            normalized,
            inv_std,
        },
    )
}

/// Returns `(dx, dgain, dbias)`.
pub(crate) fn layer_norm_backward(
    cache: &NormCache,
    norm: &LayerNorm,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let d = norm.gain.len();
    let mut dgain = Tensor::zeros([d]);
    let mut dbias = Tensor::zeros([d]);
    let mut dx = dy.clone();
    let rows = cache.normalized.data().chunks(d).zip(dy.data().chunks(d));
    for (((xhat, g), dx_row), inv) in rows.zip(dx.data_mut().chunks_mut(d)).zip(&cache.inv_std) {
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            dgain.data_mut()[j] += g[j] * xhat[j];
            dbias.data_mut()[j] += g[j];
            let dxhat = g[j] * norm.gain.data()[j];
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * xhat[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        for j in 0..d {
            let dxhat = g[j] * norm.gain.data()[j];
            dx_row[j] = inv * (dxhat - mean_dxhat - xhat[j] * mean_dxhat_xhat);
        }
    }
    (dx, dgain, dbias)
}

pub(crate) struct FeedForwardCache {
    pre: Tensor,
    hidden: Tensor,
}

fn flat(x: &Tensor) -> Result<Tensor> {
    let d = *x
        .shape()
        .last()
        .ok_or_else(|| Error::Shape("feed-forward on a scalar".into()))?;
    x.reshape([x.len() / d.max(1), d])
}

/// `relu(x · W1) · W2` applied to the last axis of `x`.
pub(crate) fn feed_forward(x: &Tensor, ff: &FeedForward) -> Result<(Tensor, FeedForwardCache)> {
    let rows = flat(x)?;
    let pre = contract(&rows, &ff.w1, &Equation::parse("nd,df->nf")?)?;
    let hidden = pre.map(|v| v.max(0.0));
    let y = contract(&hidden, &ff.w2, &Equation::parse("nf,fd->nd")?)?;
    Ok((
        y.into_shape(x.shape().to_vec())?,
        FeedForwardCache { pre, hidden },
    ))
}

/// Returns `(dx, dW1, dW2)`.
pub(crate) fn feed_forward_backward(
    x: &Tensor,
    cache: &FeedForwardCache,
    ff: &FeedForward,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let rows = flat(x)?;
    let dy_rows = flat(dy)?;
    let (dhidden, dw2) = contract_grads(
        &cache.hidden,
        &ff.w2,
        &Equation::parse("nf,fd->nd")?,
        &dy_rows,
    )?;
    let mut dpre = dhidden;
    for (g, p) in dpre.data_mut().iter_mut().zip(cache.pre.data()) {
        if *p <= 0.0 {
            *g = 0.0;
        }
    }
    let (dx, dw1) = contract_grads(&rows, &ff.w1, &Equation::parse("nd,df->nf")?, &dpre)?;
    Ok((dx.into_shape(x.shape().to_vec())?, dw1, dw2))
}

/// Token plus positional embedding for `tokens` (`rows x cols`) starting at
/// position `offset`: `[rows, cols, d]`.
pub(crate) fn embed(
    embedding: &Tensor,
    positions: &Tensor,
    tokens: &[Vec<u32>],
    offset: usize,
) -> Result<Tensor> {
    let (vocab, d) = (embedding.shape()[0], embedding.shape()[1]);
    let max_len = positions.shape()[0];
    let rows = tokens.len();
    let cols = tokens.first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(rows * cols * d);
    for row in tokens {
        if row.len() != cols {
            return Err(Error::Input("token rows have different lengths".into()));
        }
        for (j, &tok) in row.iter().enumerate() {
            let tok = tok as usize;
            if tok >= vocab {
                return Err(Error::Input(format!(
                    "token {tok} out of range for vocab {vocab}"
                )));
            }
            let pos = offset + j;
            if pos >= max_len {
                return Err(Error::Input(format!(
                    "position {pos} exceeds max_len {max_len}"
                )));
            }
            let e = &embedding.data()[tok * d..(tok + 1) * d];
            let p = &positions.data()[pos * d..(pos + 1) * d];
            data.extend(e.iter().zip(p).map(|(a, b)| a + b));
        }
    }
    Tensor::new([rows, cols, d], data)
}

/// Scatters `grad: [rows, cols, d]` into the embedding and position grads.
pub(crate) fn embed_backward(
    grad: &Tensor,
    tokens: &[Vec<u32>],
    d_embedding: &mut Tensor,
    d_positions: &mut Tensor,
) {
    let d = d_embedding.shape()[1];
    let cols = tokens.first().map_or(0, Vec::len);
    for (i, row) in tokens.iter().enumerate() {
        for (j, &tok) in row.iter().enumerate() {
            let g = &grad.data()[(i * cols + j) * d..(i * cols + j + 1) * d];
            let tok = tok as usize;
            for (a, b) in d_embedding.data_mut()[tok * d..(tok + 1) * d]
                .iter_mut()
                .zip(g)
            {
                *a += b;
            }
            for (a, b) in d_positions.data_mut()[j * d..(j + 1) * d].iter_mut().zip(g) {
                *a += b;
            }
        }
    }
}
