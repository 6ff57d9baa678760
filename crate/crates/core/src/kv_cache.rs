//! Incremental decoding state: the keys and values of every position decoded
//! so far, reloaded by each attention step.
//!
//! Three storage policies:
//!
//! * `Growing` stores exactly the positions seen, `[b, h, m, k]` (or
//!   `[b, m, k]` without a heads axis for multi-query). Each append
//!   returns a new, larger snapshot.
//! * `Padded { max_len }` preallocates `max_len` positions and masks the
//!   unwritten tail with `-inf`, so every step has the same shape and cost.
//! * `Window { size }` is a padded ring of `size` slots for local attention;
//!   position `p` lives in slot `p % size`.
//!
//! Growing and padded caches give bit-identical attention outputs for the
//! same step sequence: the padded tail contributes exact zeros.

use serde::{Deserialize, Serialize};

use crate::attention::AttentionKind;
use crate::error::{Error, Result};
use crate::tensor::{concat_last_but_one, tally, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CachePolicy {
    Growing,
    Padded { max_len: usize },
    Window { size: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CacheDims {
    pub batch: usize,
    pub heads: usize,
    pub key_dim: usize,
    pub value_dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KvCache {
    kind: AttentionKind,
    dims: CacheDims,
    policy: CachePolicy,
    window: Option<usize>,
    keys: Tensor,
    values: Tensor,
    steps: usize,
}

impl KvCache {
    pub fn new(kind: AttentionKind, dims: CacheDims, policy: CachePolicy) -> Result<Self> {
        if dims.batch == 0 || dims.heads == 0 || dims.key_dim == 0 || dims.value_dim == 0 {
            return Err(Error::Config(format!(
                "cache dims must be positive: {dims:?}"
            )));
        }
        let (stored, window) = match policy {
            CachePolicy::Growing => (0, None),
            CachePolicy::Padded { max_len: 0 } => {
                return Err(Error::Config("padded cache needs max_len >= 1".into()))
            }
            CachePolicy::Padded { max_len } => (max_len, None),
            CachePolicy::Window { size: 0 } => {
                return Err(Error::Config("window cache needs size >= 1".into()))
            }
            CachePolicy::Window { size } => (size, Some(size)),
        };
        Ok(KvCache {
            kind,
            dims,
            policy,
            window,
            keys: Tensor::zeros(Self::layout(kind, &dims, stored, dims.key_dim)),
            values: Tensor::zeros(Self::layout(kind, &dims, stored, dims.value_dim)),
            steps: 0,
        })
    }

    /// A fixed cache over a precomputed memory, e.g. encoder keys/values for
    /// cross-attention. `keys` is `[b, h, m, k]` or `[b, m, k]`.
    pub fn from_memory(
        kind: AttentionKind,
        heads: usize,
        keys: Tensor,
        values: Tensor,
    ) -> Result<Self> {
        let headless = kind == AttentionKind::MultiQuery;
        let rank = if headless { 3 } else { 4 };
        if keys.rank() != rank || values.rank() != rank {
            return Err(Error::Cache(format!(
                "{kind} memory needs rank-{rank} keys/values, got {:?} and {:?}",
                keys.shape(),
                values.shape()
            )));
        }
        let (ks, vs) = (keys.shape(), values.shape());
        if ks[..rank - 1] != vs[..rank - 1] || (!headless && ks[1] != heads) {
            return Err(Error::Cache(format!(
                "memory keys {ks:?} and values {vs:?} disagree"
            )));
        }
        let dims = CacheDims {
            batch: ks[0],
            heads,
            key_dim: ks[rank - 1],
            value_dim: vs[rank - 1],
        };
        let steps = ks[rank - 2];
        Ok(KvCache {
            kind,
            dims,
            policy: CachePolicy::Growing,
            window: None,
            keys,
            values,
            steps,
        })
    }

    /// Restricts attention to the `window` most recent positions.
    pub fn with_window(mut self, window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::Config(
                "local attention window must be at least 1".into(),
            ));
        }
        if let CachePolicy::Window { size } = self.policy {
            if size != window {
                return Err(Error::Config(format!(
                    "window cache of size {size} cannot serve a window of {window}"
                )));
            }
        }
        self.window = Some(window);
        Ok(self)
    }

    fn layout(kind: AttentionKind, dims: &CacheDims, positions: usize, width: usize) -> Vec<usize> {
        match kind {
            AttentionKind::MultiHead => vec![dims.batch, dims.heads, positions, width],
            AttentionKind::MultiQuery => vec![dims.batch, positions, width],
        }
    }

    pub fn kind(&self) -> AttentionKind {
        self.kind
    }

    pub fn dims(&self) -> CacheDims {
        self.dims
    }

    pub fn policy(&self) -> CachePolicy {
        self.policy
    }

    pub fn window(&self) -> Option<usize> {
        self.window
    }

    pub fn keys(&self) -> &Tensor {
        &self.keys
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    /// Positions appended over the cache's lifetime.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Positions currently held and visible (before any local window).
    pub fn len(&self) -> usize {
        match self.policy {
            CachePolicy::Growing | CachePolicy::Padded { .. } => self.steps,
            CachePolicy::Window { size } => self.steps.min(size),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.steps == 0
    }

    /// Positions physically stored and scanned by every attention step.
    pub fn stored_positions(&self) -> usize {
        self.keys.shape()[self.keys.rank() - 2]
    }

    pub fn capacity(&self) -> Option<usize> {
        match self.policy {
            CachePolicy::Growing => None,
            CachePolicy::Padded { max_len } => Some(max_len),
            CachePolicy::Window { .. } => None,
        }
    }

    /// Words read from the cache by one attention step over it: every stored
    /// key and value element. For the growing policy this is
    /// `2·b·h·m·k` (multi-head) or `2·b·m·k` (multi-query) when `k = v`.
    pub fn cache_words(&self) -> u64 {
        (self.keys.len() + self.values.len()) as u64
    }

    fn check_slice(&self, k_new: &Tensor, v_new: &Tensor) -> Result<()> {
        let (b, h) = (self.dims.batch, self.dims.heads);
        let (ks, vs) = match self.kind {
            AttentionKind::MultiHead => (
                vec![b, h, self.dims.key_dim],
                vec![b, h, self.dims.value_dim],
            ),
            AttentionKind::MultiQuery => (vec![b, self.dims.key_dim], vec![b, self.dims.value_dim]),
        };
        if k_new.shape() != ks.as_slice() || v_new.shape() != vs.as_slice() {
            return Err(Error::Cache(format!(
                "{} cache expects new key {ks:?} and value {vs:?}, got {:?} and {:?}",
                self.kind,
                k_new.shape(),
                v_new.shape()
            )));
        }
        Ok(())
    }

    fn next_slot(&self) -> Result<usize> {
        match self.policy {
            CachePolicy::Growing => Ok(self.steps),
            CachePolicy::Padded { max_len } if self.steps >= max_len => {
                Err(Error::Capacity { capacity: max_len })
            }
            CachePolicy::Padded { .. } => Ok(self.steps),
            CachePolicy::Window { size } => Ok(self.steps % size),
        }
    }

    fn record_append(k_new: &Tensor, v_new: &Tensor) {
        tally::record(|c| {
            c.add_words("k_new", k_new.len() as u64);
            c.add_words("v_new", v_new.len() as u64);
        });
    }

    /// Returns a new snapshot holding one more position. `k_new` is
    /// `[b, h, k]` (multi-head) or `[b, k]` (multi-query).
    pub fn append(&self, k_new: &Tensor, v_new: &Tensor) -> Result<KvCache> {
        self.check_slice(k_new, v_new)?;
        let slot = self.next_slot()?;
        Self::record_append(k_new, v_new);
        let mut next = self.clone();
        match self.policy {
            CachePolicy::Growing => {
                let unsqueeze = |t: &Tensor| {
                    let mut shape = t.shape().to_vec();
                    shape.insert(shape.len() - 1, 1);
                    t.reshape(shape)
                };
                next.keys = concat_last_but_one(&self.keys, &unsqueeze(k_new)?)?;
                next.values = concat_last_but_one(&self.values, &unsqueeze(v_new)?)?;
            }
            CachePolicy::Padded { .. } | CachePolicy::Window { .. } => {
                write_position(&mut next.keys, slot, k_new);
                write_position(&mut next.values, slot, v_new);
            }
        }
        next.steps += 1;
        Ok(next)
    }

    /// In-place append for fixed-shape caches; growing caches must use
    /// [`KvCache::append`].
    pub fn append_in_place(&mut self, k_new: &Tensor, v_new: &Tensor) -> Result<()> {
        if self.policy == CachePolicy::Growing {
            return Err(Error::Cache(
                "in-place append needs a padded or window cache".into(),
            ));
        }
        self.check_slice(k_new, v_new)?;
        let slot = self.next_slot()?;
        Self::record_append(k_new, v_new);
        write_position(&mut self.keys, slot, k_new);
        write_position(&mut self.values, slot, v_new);
        self.steps += 1;
        Ok(())
    }

    /// Absolute position stored in `slot`, if it holds one.
    fn position_at(&self, slot: usize) -> Option<usize> {
        match self.policy {
            CachePolicy::Growing | CachePolicy::Padded { .. } => {
                (slot < self.steps).then_some(slot)
            }
            CachePolicy::Window { size } => {
                if slot >= self.steps.min(size) {
                    return None;
                }
                // Most recent position in this slot.
                let last = self.steps - 1;
                let back = (last % size + size - slot) % size;
                Some(last - back)
            }
        }
    }

    /// Additive `[b, h, stored]` mask for a query at the most recent
    /// position, or `None` when every stored position is visible.
    pub fn step_mask(&self) -> Option<Tensor> {
        if self.policy == CachePolicy::Growing && self.window.is_none() {
            return None;
        }
        let stored = self.stored_positions();
        let query = self.steps.saturating_sub(1);
        let row: Vec<f64> = (0..stored)
            .map(|slot| match self.position_at(slot) {
                Some(p) if self.window.is_none_or(|w| p + w > query) => 0.0,
                _ => f64::NEG_INFINITY,
            })
            .collect();
        let copies = self.dims.batch * self.dims.heads;
        let mut data = Vec::with_capacity(copies * stored);
        for _ in 0..copies {
            data.extend_from_slice(&row);
        }
        Some(Tensor::new([self.dims.batch, self.dims.heads, stored], data).expect("mask shape"))
    }

    /// Reorders (and possibly duplicates) batch rows, as beam search does
    /// when hypotheses are re-ranked.
    pub fn select_batch(&self, rows: &[usize]) -> Result<KvCache> {
        let mut next = self.clone();
        next.keys = self.keys.select_rows(rows)?;
        next.values = self.values.select_rows(rows)?;
        next.dims.batch = rows.len();
        Ok(next)
    }
}

/// Writes a one-position slice into slot `slot` of a `[..., L, w]` tensor.
fn write_position(store: &mut Tensor, slot: usize, slice: &Tensor) {
    let rank = store.rank();
    let (positions, width) = (store.shape()[rank - 2], store.shape()[rank - 1]);
    let data = store.data_mut();
    for (o, chunk) in slice.data().chunks(width).enumerate() {
        let at = (o * positions + slot) * width;
        data[at..at + width].copy_from_slice(chunk);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(batch: usize, heads: usize, k: usize) -> CacheDims {
        CacheDims {
            batch,
            heads,
            key_dim: k,
            value_dim: k,
        }
    }

    #[test]
    fn new_cache_shapes() {
        let mh = KvCache::new(
            AttentionKind::MultiHead,
            dims(1, 2, 2),
            CachePolicy::Growing,
        )
        .unwrap();
        assert_eq!(mh.keys().shape(), &[1, 2, 0, 2]);
        let mq = KvCache::new(
            AttentionKind::MultiQuery,
            dims(1, 2, 2),
            CachePolicy::Padded { max_len: 4 },
        )
        .unwrap();
        assert_eq!(mq.keys().shape(), &[1, 4, 2]);
        assert_eq!(mq.len(), 0);
        assert!(matches!(
            KvCache::new(
                AttentionKind::MultiQuery,
                dims(1, 2, 2),
                CachePolicy::Padded { max_len: 0 }
            ),
            Err(Error::Config(_))
        ));
        assert!(KvCache::new(
            AttentionKind::MultiQuery,
            dims(0, 2, 2),
            CachePolicy::Growing
        )
        .is_err());
    }

    #[test]
    fn append_to_empty() {
        let cache = KvCache::new(
            AttentionKind::MultiHead,
            dims(1, 2, 2),
            CachePolicy::Growing,
        )
        .unwrap();
        let k = Tensor::from_fn([1, 2, 2], |ix| (ix[1] * 2 + ix[2]) as f64);
        let v = k.scale(-1.0);
        let next = cache.append(&k, &v).unwrap();
        assert_eq!(next.len(), 1);
        assert_eq!(next.keys().data(), k.data());
        assert_eq!(next.values().data(), v.data());
        assert_eq!(cache.len(), 0, "snapshot must be untouched");
    }

    #[test]
    fn padded_overflow_is_capacity_error() {
        let mut cache = KvCache::new(
            AttentionKind::MultiQuery,
            dims(1, 1, 1),
            CachePolicy::Padded { max_len: 2 },
        )
        .unwrap();
        let one = Tensor::zeros([1, 1]);
        cache.append_in_place(&one, &one).unwrap();
        let cache = cache.append(&one, &one).unwrap();
        assert!(matches!(
            cache.append(&one, &one),
            Err(Error::Capacity { capacity: 2 })
        ));
    }

    #[test]
    fn wrong_slice_shape_is_cache_error() {
        let cache = KvCache::new(
            AttentionKind::MultiHead,
            dims(1, 2, 2),
            CachePolicy::Growing,
        )
        .unwrap();
        let bad = Tensor::zeros([1, 2]);
        assert!(matches!(cache.append(&bad, &bad), Err(Error::Cache(_))));
        let mut growing = cache.clone();
        let ok = Tensor::zeros([1, 2, 2]);
        assert!(growing.append_in_place(&ok, &ok).is_err());
    }

    #[test]
    fn cache_words_by_kind() {
        let fill = |kind| {
            let mut c = KvCache::new(kind, dims(1, 4, 2), CachePolicy::Growing).unwrap();
            let (k, v) = match kind {
                AttentionKind::MultiHead => (Tensor::zeros([1, 4, 2]), Tensor::zeros([1, 4, 2])),
                AttentionKind::MultiQuery => (Tensor::zeros([1, 2]), Tensor::zeros([1, 2])),
            };
            for _ in 0..3 {
                c = c.append(&k, &v).unwrap();
            }
            c.cache_words()
        };
        assert_eq!(fill(AttentionKind::MultiHead), 48);
        assert_eq!(fill(AttentionKind::MultiQuery), 12);
    }

    #[test]
    fn padded_mask_hides_tail() {
        let cache = KvCache::new(
            AttentionKind::MultiQuery,
            dims(1, 2, 1),
            CachePolicy::Padded { max_len: 3 },
        )
        .unwrap();
        let one = Tensor::zeros([1, 1]);
        let cache = cache.append(&one, &one).unwrap();
        let mask = cache.step_mask().unwrap();
        assert_eq!(mask.shape(), &[1, 2, 3]);
        assert_eq!(
            mask.data()[..3],
            [0.0, f64::NEG_INFINITY, f64::NEG_INFINITY]
        );
    }

    #[test]
    fn ring_slots_track_positions() {
        let mut cache = KvCache::new(
            AttentionKind::MultiQuery,
            dims(1, 1, 1),
            CachePolicy::Window { size: 3 },
        )
        .unwrap();
        for p in 0..5 {
            let k = Tensor::full([1, 1], p as f64);
            cache.append_in_place(&k, &k).unwrap();
        }
        // positions 3, 4 overwrite slots 0, 1; slot 2 still holds position 2
        assert_eq!(cache.keys().data(), &[3.0, 4.0, 2.0]);
        assert_eq!(cache.len(), 3);
        assert_eq!(cache.step_mask().unwrap().data(), &[0.0, 0.0, 0.0]);
        assert_eq!(
            (0..3).map(|s| cache.position_at(s)).collect::<Vec<_>>(),
            vec![Some(3), Some(4), Some(2)]
        );
    }

    #[test]
    fn growing_window_masks_old_positions() {
        let mut cache = KvCache::new(
            AttentionKind::MultiQuery,
            dims(1, 1, 1),
            CachePolicy::Growing,
        )
        .unwrap()
        .with_window(2)
        .unwrap();
        let one = Tensor::zeros([1, 1]);
        for _ in 0..4 {
            cache = cache.append(&one, &one).unwrap();
        }
        let inf = f64::NEG_INFINITY;
        assert_eq!(cache.step_mask().unwrap().data(), &[inf, inf, 0.0, 0.0]);
    }

    #[test]
    fn select_batch_reorders_rows() {
        let keys = Tensor::from_fn([2, 1, 1], |ix| ix[0] as f64);
        let cache = KvCache::from_memory(AttentionKind::MultiQuery, 4, keys.clone(), keys).unwrap();
        let picked = cache.select_batch(&[1, 1, 0]).unwrap();
        assert_eq!(picked.keys().data(), &[1.0, 1.0, 0.0]);
        assert_eq!(picked.dims().batch, 3);
    }
}
