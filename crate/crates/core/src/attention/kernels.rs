//! The attention procedures, written as the same sequence of named
//! contractions as their reference listings. Logits carry no `1/sqrt(k)`
//! factor; it is folded into the query projection at initialization.
//!
//! The incremental listings in the source material project the new key and
//! value from `M` and output-project `O`; the intended operands are the step
//! input `x` and the per-head output `o`, and that is what runs here. The
//! multi-query cache appends along its position axis, which is axis 1 for a
//! headless `[b, m, k]` tensor.

use super::{build_mask, AttentionKind, AttentionWeights, MaskShape};
use crate::error::{Error, Result};
use crate::kv_cache::KvCache;
use crate::tensor::tally::{contract_named, softmax_named};
use crate::tensor::Tensor;

/// Intermediates of one batched attention call, kept for backpropagation.
#[derive(Clone, Debug)]
pub struct AttentionTrace {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub weights: Tensor,
    pub o: Tensor,
    pub y: Tensor,
}

pub(crate) struct Equations {
    pub k: &'static str,
    pub v: &'static str,
    pub logits: &'static str,
    pub o: &'static str,
}

pub(crate) fn batched_equations(kind: AttentionKind) -> Equations {
    match kind {
        AttentionKind::MultiHead => Equations {
            k: "bmd,hdk->bhmk",
            v: "bmd,hdv->bhmv",
            logits: "bhnk,bhmk->bhnm",
            o: "bhnm,bhmv->bhnv",
        },
        AttentionKind::MultiQuery => Equations {
            k: "bmd,dk->bmk",
            v: "bmd,dv->bmv",
            logits: "bhnk,bmk->bhnm",
            o: "bhnm,bmv->bhnv",
        },
    }
}

pub(crate) const Q_EQ: &str = "bnd,hdk->bhnk";
pub(crate) const Y_EQ: &str = "bhnv,hdv->bnd";

fn step_equations(kind: AttentionKind) -> Equations {
    match kind {
        AttentionKind::MultiHead => Equations {
            k: "bd,hdk->bhk",
            v: "bd,hdv->bhv",
            logits: "bhk,bhmk->bhm",
            o: "bhm,bhmv->bhv",
        },
        AttentionKind::MultiQuery => Equations {
            k: "bd,dk->bk",
            v: "bd,dv->bv",
            logits: "bhk,bmk->bhm",
            o: "bhm,bmv->bhv",
        },
    }
}

/// Attention of one query `q: [k]` over `K: [m, k]`, `V: [m, v]`.
pub fn dot_product_attention(q: &Tensor, keys: &Tensor, values: &Tensor) -> Result<Tensor> {
    if keys.rank() != 2 || values.rank() != 2 || keys.shape()[0] != values.shape()[0] {
        return Err(Error::Shape(format!(
            "dot-product attention needs K [m, k] and V [m, v], got {:?} and {:?}",
            keys.shape(),
            values.shape()
        )));
    }
    if keys.shape()[0] == 0 {
        return Err(Error::EmptyMemory);
    }
    let logits = contract_named(q, keys, "k,mk->m", ["q", "K", "logits"])?;
    let weights = softmax_named(&logits, None, ["logits", "mask", "weights"])?;
    contract_named(&weights, values, "m,mv->v", ["weights", "V", "y"])
}

/// Multi-head attention of a single query vector `x: [d]` over `M: [m, d]`.
pub fn multihead_attention_single(
    x: &Tensor,
    memory: &Tensor,
    w: &AttentionWeights,
) -> Result<Tensor> {
    expect_kind(w, AttentionKind::MultiHead)?;
    if memory.rank() == 2 && memory.shape()[0] == 0 {
        return Err(Error::EmptyMemory);
    }
    let q = contract_named(x, w.p_q(), "d,hdk->hk", ["x", "P_q", "q"])?;
    let k = contract_named(memory, w.p_k(), "md,hdk->hmk", ["M", "P_k", "K"])?;
    let v = contract_named(memory, w.p_v(), "md,hdv->hmv", ["M", "P_v", "V"])?;
    let logits = contract_named(&q, &k, "hk,hmk->hm", ["q", "K", "logits"])?;
    let weights = softmax_named(&logits, None, ["logits", "mask", "weights"])?;
    let o = contract_named(&weights, &v, "hm,hmv->hv", ["weights", "V", "o"])?;
    contract_named(&o, w.p_o(), "hv,hdv->d", ["o", "P_o", "y"])
}

/// Batched multi-head attention: `X: [b, n, d]` queries over `M: [b, m, d]`.
pub fn multihead_attention_batched(
    x: &Tensor,
    memory: &Tensor,
    mask: &MaskShape,
    w: &AttentionWeights,
) -> Result<Tensor> {
    expect_kind(w, AttentionKind::MultiHead)?;
    batched(x, memory, mask, w)
}

/// Batched multi-query attention; keys and values are computed once for all
/// heads.
pub fn multiquery_attention_batched(
    x: &Tensor,
    memory: &Tensor,
    mask: &MaskShape,
    w: &AttentionWeights,
) -> Result<Tensor> {
    expect_kind(w, AttentionKind::MultiQuery)?;
    batched(x, memory, mask, w)
}

fn batched(x: &Tensor, memory: &Tensor, mask: &MaskShape, w: &AttentionWeights) -> Result<Tensor> {
    let (b, n, _, m) = check_batched(x, memory, w)?;
    if mask.shape() != [b, w.dims().heads, n, m] {
        return Err(Error::Shape(format!(
            "mask {:?} does not match [b, h, n, m] = {:?}",
            mask.shape(),
            [b, w.dims().heads, n, m]
        )));
    }
    let mask = build_mask(mask)?;
    Ok(attention_forward(x, memory, Some(&mask), w)?.y)
}

fn check_batched(
    x: &Tensor,
    memory: &Tensor,
    w: &AttentionWeights,
) -> Result<(usize, usize, usize, usize)> {
    let d = w.dims().model_dim;
    match (x.shape(), memory.shape()) {
        (&[b, n, dx], &[bm, m, dm]) if b == bm && dx == d && dm == d => {
            if m == 0 {
                return Err(Error::EmptyMemory);
            }
            Ok((b, n, d, m))
        }
        _ => Err(Error::Shape(format!(
            "attention needs X [b, n, {d}] and M [b, m, {d}], got {:?} and {:?}",
            x.shape(),
            memory.shape()
        ))),
    }
}

/// Batched attention of either kind with an optional materialized additive
/// mask `[b, h, n, m]`, returning every intermediate.
pub fn attention_forward(
    x: &Tensor,
    memory: &Tensor,
    mask: Option<&Tensor>,
    w: &AttentionWeights,
) -> Result<AttentionTrace> {
    check_batched(x, memory, w)?;
    let eq = batched_equations(w.kind());
    let q = contract_named(x, w.p_q(), Q_EQ, ["X", "P_q", "Q"])?;
    let k = contract_named(memory, w.p_k(), eq.k, ["M", "P_k", "K"])?;
    let v = contract_named(memory, w.p_v(), eq.v, ["M", "P_v", "V"])?;
    let logits = contract_named(&q, &k, eq.logits, ["Q", "K", "logits"])?;
    let weights = softmax_named(&logits, mask, ["logits", "mask", "weights"])?;
    let o = contract_named(&weights, &v, eq.o, ["weights", "V", "O"])?;
    let y = contract_named(&o, w.p_o(), Y_EQ, ["O", "P_o", "Y"])?;
    Ok(AttentionTrace {
        q,
        k,
        v,
        weights,
        o,
        y,
    })
}

/// One step of multi-head self-attention: `x: [b, d]` is projected to a
/// new key/value appended to `cache`, then its query attends over every
/// cached position including the new one.
pub fn multihead_self_attention_incremental(
    x: &Tensor,
    cache: &KvCache,
    w: &AttentionWeights,
) -> Result<(Tensor, KvCache)> {
    expect_kind(w, AttentionKind::MultiHead)?;
    self_attention_step(x, cache, w)
}

/// One step of multi-query self-attention over a headless `[b, m, k]` cache.
pub fn multiquery_self_attention_incremental(
    x: &Tensor,
    cache: &KvCache,
    w: &AttentionWeights,
) -> Result<(Tensor, KvCache)> {
    expect_kind(w, AttentionKind::MultiQuery)?;
    self_attention_step(x, cache, w)
}

/// Incremental self-attention of either kind, returning the next snapshot.
pub fn self_attention_step(
    x: &Tensor,
    cache: &KvCache,
    w: &AttentionWeights,
) -> Result<(Tensor, KvCache)> {
    check_step(x, cache, w)?;
    let (q, k_new, v_new) = project_step(x, w)?;
    let cache = cache.append(&k_new, &v_new)?;
    let y = attend(&q, &cache, w)?;
    Ok((y, cache))
}

/// [`self_attention_step`] writing into a padded or window cache in place.
/// Outputs are bit-identical to the snapshot path.
pub fn self_attention_step_in_place(
    x: &Tensor,
    cache: &mut KvCache,
    w: &AttentionWeights,
) -> Result<Tensor> {
    check_step(x, cache, w)?;
    let (q, k_new, v_new) = project_step(x, w)?;
    cache.append_in_place(&k_new, &v_new)?;
    attend(&q, cache, w)
}

/// Attention of `x: [b, d]` over a fixed memory cache, e.g. precomputed
/// encoder keys and values. Nothing is appended.
pub fn cross_attention_step(x: &Tensor, memory: &KvCache, w: &AttentionWeights) -> Result<Tensor> {
    check_step(x, memory, w)?;
    if memory.is_empty() {
        return Err(Error::EmptyMemory);
    }
    let q = contract_named(x, w.p_q(), "bd,hdk->bhk", ["x", "P_q", "q"])?;
    attend(&q, memory, w)
}

fn project_step(x: &Tensor, w: &AttentionWeights) -> Result<(Tensor, Tensor, Tensor)> {
    let eq = step_equations(w.kind());
    let q = contract_named(x, w.p_q(), "bd,hdk->bhk", ["x", "P_q", "q"])?;
    let k_new = contract_named(x, w.p_k(), eq.k, ["x", "P_k", "k_new"])?;
    let v_new = contract_named(x, w.p_v(), eq.v, ["x", "P_v", "v_new"])?;
    Ok((q, k_new, v_new))
}

fn attend(q: &Tensor, cache: &KvCache, w: &AttentionWeights) -> Result<Tensor> {
    let eq = step_equations(w.kind());
    let mask = cache.step_mask();
    let logits = contract_named(q, cache.keys(), eq.logits, ["q", "K", "logits"])?;
    let weights = softmax_named(&logits, mask.as_ref(), ["logits", "mask", "weights"])?;
    let o = contract_named(&weights, cache.values(), eq.o, ["weights", "V", "o"])?;
    contract_named(&o, w.p_o(), "bhv,hdv->bd", ["o", "P_o", "y"])
}

fn check_step(x: &Tensor, cache: &KvCache, w: &AttentionWeights) -> Result<()> {
    let dims = w.dims();
    let cd = cache.dims();
    if cache.kind() != w.kind()
        || cd.heads != dims.heads
        || cd.key_dim != dims.key_dim
        || cd.value_dim != dims.value_dim
    {
        return Err(Error::Cache(format!(
            "{} cache {cd:?} does not match {} weights {dims:?}",
            cache.kind(),
            w.kind()
        )));
    }
    if x.shape() != [cd.batch, dims.model_dim] {
        return Err(Error::Shape(format!(
            "step input must be [{}, {}], got {:?}",
            cd.batch,
            dims.model_dim,
            x.shape()
        )));
    }
    Ok(())
}

fn expect_kind(w: &AttentionWeights, kind: AttentionKind) -> Result<()> {
    if w.kind() != kind {
        return Err(Error::Config(format!(
            "expected {kind} weights, got {}",
            w.kind()
        )));
    }
    Ok(())
}
