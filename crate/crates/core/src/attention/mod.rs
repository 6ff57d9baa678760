//! Multi-head and multi-query attention.
//!
//! Multi-query attention keeps per-head query and output projections but
//! shares one key projection and one value projection across all heads, so
//! `P_k` and `P_v` (and the key/value tensors they produce) carry no heads
//! axis.

mod grad;
mod kernels;
mod mask;

pub use grad::{attention_backward, AttentionGrads};
pub use kernels::{
    attention_forward, cross_attention_step, dot_product_attention, multihead_attention_batched,
    multihead_attention_single, multihead_self_attention_incremental, multiquery_attention_batched,
    multiquery_self_attention_incremental, self_attention_step, self_attention_step_in_place,
    AttentionTrace,
};
pub use mask::{build_mask, MaskKind, MaskShape};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    MultiHead,
    MultiQuery,
}

impl AttentionKind {
    pub fn label(self) -> &'static str {
        match self {
            AttentionKind::MultiHead => "multi-head",
            AttentionKind::MultiQuery => "multi-query",
        }
    }

    /// Number of distinct key/value heads.
    pub fn kv_heads(self, heads: usize) -> usize {
        match self {
            AttentionKind::MultiHead => heads,
            AttentionKind::MultiQuery => 1,
        }
    }
}

impl std::fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionDims {
    pub heads: usize,
    pub model_dim: usize,
    pub key_dim: usize,
    pub value_dim: usize,
}

impl AttentionDims {
    pub fn new(heads: usize, model_dim: usize, key_dim: usize, value_dim: usize) -> Result<Self> {
        let dims = AttentionDims {
            heads,
            model_dim,
            key_dim,
            value_dim,
        };
        if heads == 0 || model_dim == 0 || key_dim == 0 || value_dim == 0 {
            return Err(Error::Config(format!(
                "attention dims must be positive: {dims:?}"
            )));
        }
        Ok(dims)
    }

    pub fn key_shape(&self, kind: AttentionKind) -> Vec<usize> {
        match kind {
            AttentionKind::MultiHead => vec![self.heads, self.model_dim, self.key_dim],
            AttentionKind::MultiQuery => vec![self.model_dim, self.key_dim],
        }
    }

    pub fn value_shape(&self, kind: AttentionKind) -> Vec<usize> {
        match kind {
            AttentionKind::MultiHead => vec![self.heads, self.model_dim, self.value_dim],
            AttentionKind::MultiQuery => vec![self.model_dim, self.value_dim],
        }
    }

    /// Projection parameters of one attention layer.
    pub fn param_count(&self, kind: AttentionKind) -> usize {
        let (h, d, k, v) = (self.heads, self.model_dim, self.key_dim, self.value_dim);
        match kind {
            AttentionKind::MultiHead => h * d * (2 * k + 2 * v),
            AttentionKind::MultiQuery => h * d * (k + v) + d * (k + v),
        }
    }
}

/// The projection set `{P_q, P_k, P_v, P_o}` of one attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    kind: AttentionKind,
    dims: AttentionDims,
    p_q: Tensor,
    p_k: Tensor,
    p_v: Tensor,
    p_o: Tensor,
}

impl AttentionWeights {
    /// Validates shapes against `kind`: `P_q` is `[h, d, k]`, `P_o` is
    /// `[h, d, v]`, and `P_k`/`P_v` are `[h, d, k]`/`[h, d, v]` for multi-head
    /// or `[d, k]`/`[d, v]` for multi-query.
    pub fn new(
        kind: AttentionKind,
        p_q: Tensor,
        p_k: Tensor,
        p_v: Tensor,
        p_o: Tensor,
    ) -> Result<Self> {
        let &[h, d, k] = p_q.shape() else {
            return Err(Error::Shape(format!(
                "P_q must be [h, d, k], got {:?}",
                p_q.shape()
            )));
        };
        let &[_, _, v] = p_o.shape() else {
            return Err(Error::Shape(format!(
                "P_o must be [h, d, v], got {:?}",
                p_o.shape()
            )));
        };
        let dims = AttentionDims::new(h, d, k, v)?;
        let expect = [
            ("P_o", &p_o, vec![h, d, v]),
            ("P_k", &p_k, dims.key_shape(kind)),
            ("P_v", &p_v, dims.value_shape(kind)),
        ];
        for (name, t, shape) in expect {
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "{kind} {name} must be {shape:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        for (name, t) in [("P_q", &p_q), ("P_k", &p_k), ("P_v", &p_v), ("P_o", &p_o)] {
            if !t.is_finite() {
                return Err(Error::Numeric {
                    tensor: name.into(),
                });
            }
        }
        Ok(AttentionWeights {
            kind,
            dims,
            p_q,
            p_k,
            p_v,
            p_o,
        })
    }

    /// Uniform entries in `±scale`.
    pub fn random(
        kind: AttentionKind,
        dims: AttentionDims,
        scale: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let (h, d, k, v) = (dims.heads, dims.model_dim, dims.key_dim, dims.value_dim);
        AttentionWeights {
            kind,
            dims,
            p_q: Tensor::uniform([h, d, k], scale, rng),
            p_k: Tensor::uniform(dims.key_shape(kind), scale, rng),
            p_v: Tensor::uniform(dims.value_shape(kind), scale, rng),
            p_o: Tensor::uniform([h, d, v], scale, rng),
        }
    }

    /// Scaled-uniform init with bound `1/sqrt(fan_in)`. The logits carry no
    /// `1/sqrt(k)` factor, so `P_q` absorbs it here instead.
    pub fn init(kind: AttentionKind, dims: AttentionDims, rng: &mut impl Rng) -> Self {
        let (h, d, k, v) = (dims.heads, dims.model_dim, dims.key_dim, dims.value_dim);
        let in_scale = 1.0 / (d as f64).sqrt();
        let out_scale = 1.0 / ((h * v) as f64).sqrt();
        AttentionWeights {
            kind,
            dims,
            p_q: Tensor::uniform([h, d, k], in_scale / (k as f64).sqrt(), rng),
            p_k: Tensor::uniform(dims.key_shape(kind), in_scale, rng),
            p_v: Tensor::uniform(dims.value_shape(kind), in_scale, rng),
            p_o: Tensor::uniform([h, d, v], out_scale, rng),
        }
    }

    pub fn kind(&self) -> AttentionKind {
        self.kind
    }

    pub fn dims(&self) -> AttentionDims {
        self.dims
    }

    pub fn p_q(&self) -> &Tensor {
        &self.p_q
    }

    pub fn p_k(&self) -> &Tensor {
        &self.p_k
    }

    pub fn p_v(&self) -> &Tensor {
        &self.p_v
    }

    pub fn p_o(&self) -> &Tensor {
        &self.p_o
    }

    pub fn param_count(&self) -> usize {
        self.dims.param_count(self.kind)
    }

    /// `[P_q, P_k, P_v, P_o]`; callers must keep the shapes unchanged.
    pub(crate) fn projections_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.p_q, &mut self.p_k, &mut self.p_v, &mut self.p_o]
    }

    pub fn projections(&self) -> [&Tensor; 4] {
        [&self.p_q, &self.p_k, &self.p_v, &self.p_o]
    }

    /// Multi-head weights whose key and value projections are `self`'s
    /// shared ones copied into every head.
    pub fn replicate_heads(&self) -> Result<Self> {
        if self.kind != AttentionKind::MultiQuery {
            return Err(Error::Config(
                "replicate_heads expects multi-query weights".into(),
            ));
        }
        let h = self.dims.heads;
        let tile = |t: &Tensor| {
            let mut data = Vec::with_capacity(h * t.len());
            for _ in 0..h {
                data.extend_from_slice(t.data());
            }
            let mut shape = vec![h];
            shape.extend_from_slice(t.shape());
            Tensor::new(shape, data)
        };
        AttentionWeights::new(
            AttentionKind::MultiHead,
            self.p_q.clone(),
            tile(&self.p_k)?,
            tile(&self.p_v)?,
            self.p_o.clone(),
        )
    }

    /// Collapses multi-head weights whose per-head key and value projections
    /// are all identical into the equivalent multi-query weights.
    pub fn collapse_heads(&self) -> Result<Self> {
        if self.kind != AttentionKind::MultiHead {
            return Err(Error::Config(
                "collapse_heads expects multi-head weights".into(),
            ));
        }
        let first = |t: &Tensor| -> Result<Tensor> {
            let head = t.slice_axis(0, 0..1)?;
            for i in 1..self.dims.heads {
                if t.slice_axis(0, i..i + 1)? != head {
                    return Err(Error::Config(format!("head {i} differs from head 0")));
                }
            }
            head.into_shape(t.shape()[1..].to_vec())
        };
        AttentionWeights::new(
            AttentionKind::MultiQuery,
            self.p_q.clone(),
            first(&self.p_k)?,
            first(&self.p_v)?,
            self.p_o.clone(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn new_validates_shapes_per_kind() {
        let mh = |k: Vec<usize>| {
            AttentionWeights::new(
                AttentionKind::MultiHead,
                Tensor::zeros([2, 4, 3]),
                Tensor::zeros(k),
                Tensor::zeros([2, 4, 5]),
                Tensor::zeros([2, 4, 5]),
            )
        };
        assert!(mh(vec![2, 4, 3]).is_ok());
        assert!(mh(vec![4, 3]).is_err());
        let mq = AttentionWeights::new(
            AttentionKind::MultiQuery,
            Tensor::zeros([2, 4, 3]),
            Tensor::zeros([4, 3]),
            Tensor::zeros([4, 5]),
            Tensor::zeros([2, 4, 5]),
        )
        .unwrap();
        assert_eq!(mq.dims(), AttentionDims::new(2, 4, 3, 5).unwrap());
        let mut bad = Tensor::zeros([2, 4, 3]);
        bad.data_mut()[0] = f64::NAN;
        assert!(AttentionWeights::new(
            AttentionKind::MultiQuery,
            bad,
            Tensor::zeros([4, 3]),
            Tensor::zeros([4, 5]),
            Tensor::zeros([2, 4, 5]),
        )
        .is_err());
    }

    #[test]
    fn replicate_then_collapse_round_trips() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let dims = AttentionDims::new(3, 4, 2, 2).unwrap();
        let mq = AttentionWeights::random(AttentionKind::MultiQuery, dims, 1.0, &mut rng);
        let mh = mq.replicate_heads().unwrap();
        assert_eq!(mh.p_k().shape(), &[3, 4, 2]);
        assert_eq!(mh.collapse_heads().unwrap(), mq);
        let untied = AttentionWeights::random(AttentionKind::MultiHead, dims, 1.0, &mut rng);
        assert!(untied.collapse_heads().is_err());
    }

    #[test]
    fn param_counts() {
        let dims = AttentionDims::new(8, 1024, 128, 128).unwrap();
        assert_eq!(dims.param_count(AttentionKind::MultiHead), 4_194_304);
        assert_eq!(dims.param_count(AttentionKind::MultiQuery), 2_359_296);
        let one = AttentionDims::new(1, 64, 16, 16).unwrap();
        assert_eq!(
            one.param_count(AttentionKind::MultiHead),
            one.param_count(AttentionKind::MultiQuery)
        );
    }
}
