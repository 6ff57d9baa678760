//! Slow, loop-based reference implementations used as independent oracles
//! by the test suites and the `verify` command. Nothing here shares code
//! with the kernels it checks beyond the [`Tensor`] container.

use crate::attention::{AttentionKind, AttentionWeights, MaskShape};
use crate::tensor::Tensor;

/// Broadcasts both operands to the union of their indices, multiplies
/// elementwise and sums every index absent from the output.
pub fn naive_contract(a: &Tensor, b: &Tensor, equation: &str) -> Tensor {
    let (inputs, out) = equation.split_once("->").expect("equation needs ->");
    let (lhs, rhs) = inputs.split_once(',').expect("equation needs two inputs");
    let (lhs, rhs, out): (Vec<char>, Vec<char>, Vec<char>) = (
        lhs.chars().collect(),
        rhs.chars().collect(),
        out.chars().collect(),
    );

    let mut labels: Vec<char> = Vec::new();
    let mut extents: Vec<usize> = Vec::new();
    for (chars, shape) in [(&lhs, a.shape()), (&rhs, b.shape())] {
        for (c, &n) in chars.iter().zip(shape) {
            if let Some(i) = labels.iter().position(|x| x == c) {
                assert_eq!(extents[i], n, "extent mismatch on {c}");
            } else {
                labels.push(*c);
                extents.push(n);
            }
        }
    }
    let pick = |chars: &[char], full: &[usize]| -> Vec<usize> {
        chars
            .iter()
            .map(|c| full[labels.iter().position(|x| x == c).unwrap()])
            .collect()
    };
    let out_shape: Vec<usize> = out
        .iter()
        .map(|c| extents[labels.iter().position(|x| x == c).unwrap()])
        .collect();
    let mut result = Tensor::zeros(out_shape);
    let total: usize = extents.iter().product();
    let mut full = vec![0usize; labels.len()];
    for _ in 0..total {
        let product = a.get(&pick(&lhs, &full)) * b.get(&pick(&rhs, &full));
        let at = pick(&out, &full);
        result.set(&at, result.get(&at) + product);
        for axis in (0..full.len()).rev() {
            full[axis] += 1;
            if full[axis] < extents[axis] {
                break;
            }
            full[axis] = 0;
        }
    }
    result
}

/// `[n, k] x [k, v]` with three nested loops.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, v) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    assert_eq!(b.shape()[0], k);
    let mut out = Tensor::zeros([n, v]);
    for i in 0..n {
        for j in 0..v {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a.get(&[i, p]) * b.get(&[p, j]);
            }
            out.set(&[i, j], acc);
        }
    }
    out
}

/// Softmax-weighted average of `values` rows by `q . key` scores.
pub fn attend_rows(q: &[f64], keys: &[Vec<f64>], values: &[Vec<f64>]) -> Vec<f64> {
    assert!(!keys.is_empty());
    let scores: Vec<f64> = keys
        .iter()
        .map(|key| q.iter().zip(key).map(|(a, b)| a * b).sum())
        .collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut out = vec![0.0; values[0].len()];
    for (e, row) in exps.iter().zip(values) {
        for (o, x) in out.iter_mut().zip(row) {
            *o += e / total * x;
        }
    }
    out
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let width = t.shape()[t.rank() - 1];
    t.data().chunks(width).map(|c| c.to_vec()).collect()
}

/// Row vector `x: [d]` times the `[d, w]` matrix taken from `p` at head
/// `head` (or `p` itself when it has no heads axis).
fn project(x: &[f64], p: &Tensor, head: Option<usize>) -> Vec<f64> {
    let (d, w) = (p.shape()[p.rank() - 2], p.shape()[p.rank() - 1]);
    (0..w)
        .map(|j| {
            (0..d)
                .map(|i| {
                    let coef = match head {
                        Some(h) if p.rank() == 3 => p.get(&[h, i, j]),
                        _ => p.get(&[i, j]),
                    };
                    x[i] * coef
                })
                .sum()
        })
        .collect()
}

/// Attention of one query vector over the given memory rows, computed head by
/// head with scalar loops. Works for both kinds: a headless `P_k`/`P_v` is
/// reused for every head.
pub fn attention_head_loop(x: &[f64], memory: &[Vec<f64>], w: &AttentionWeights) -> Vec<f64> {
    let dims = w.dims();
    let mut y = vec![0.0; dims.model_dim];
    for h in 0..dims.heads {
        let q = project(x, w.p_q(), Some(h));
        let keys: Vec<Vec<f64>> = memory
            .iter()
            .map(|m| project(m, w.p_k(), Some(h)))
            .collect();
        let values: Vec<Vec<f64>> = memory
            .iter()
            .map(|m| project(m, w.p_v(), Some(h)))
            .collect();
        let o = attend_rows(&q, &keys, &values);
        for (dd, yd) in y.iter_mut().enumerate() {
            for (vv, ov) in o.iter().enumerate() {
                *yd += ov * w.p_o().get(&[h, dd, vv]);
            }
        }
    }
    y
}

/// Batched attention recomputed independently for every `(batch, query)`
/// pair over only the memory positions the mask allows.
pub fn attention_position_loop(
    x: &Tensor,
    memory: &Tensor,
    mask: &MaskShape,
    w: &AttentionWeights,
) -> Tensor {
    let (b, n, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let m = memory.shape()[1];
    let mut out = Tensor::zeros([b, n, d]);
    for bi in 0..b {
        let mem = rows(&memory.slice_axis(0, bi..bi + 1).unwrap());
        let queries = rows(&x.slice_axis(0, bi..bi + 1).unwrap());
        for (i, q) in queries.iter().enumerate() {
            let legal: Vec<Vec<f64>> = (0..m)
                .filter(|&j| mask.allows(i, j))
                .map(|j| mem[j].clone())
                .collect();
            let y = attention_head_loop(q, &legal, w);
            for (dd, val) in y.into_iter().enumerate() {
                out.set(&[bi, i, dd], val);
            }
        }
    }
    out
}

/// Size in words of every tensor named in a batched listing, each counted
/// once.
#[allow(clippy::too_many_arguments)]
pub fn declared_tensor_words(
    kind: AttentionKind,
    b: u64,
    n: u64,
    m: u64,
    d: u64,
    h: u64,
    k: u64,
    v: u64,
) -> u64 {
    let kvh = match kind {
        AttentionKind::MultiHead => h,
        AttentionKind::MultiQuery => 1,
    };
    let sizes = [
        b * n * d,       // X
        b * m * d,       // M
        b * h * n * k,   // Q
        b * kvh * m * k, // K
        b * kvh * m * v, // V
        b * h * n * m,   // logits
        b * h * n * m,   // weights
        b * h * n * m,   // mask
        b * h * n * v,   // O
        b * n * d,       // Y
        h * d * k,       // P_q
        kvh * d * k,     // P_k
        kvh * d * v,     // P_v
        h * d * v,       // P_o
    ];
    sizes.iter().sum()
}
