//! Exact operation and memory-word accounting for the attention variants.
//!
//! Flops are 2 per multiply-add in the contractions; softmax and mask
//! additions cost nothing. Two memory conventions are reported and labeled:
//!
//! * [`Convention::SumOfSizes`]: every declared tensor counted once, the
//!   "sum of the sizes of all tensors involved" summary.
//! * [`Convention::OpTraffic`]: one word per element of every operand and
//!   result of every op, which is what the instrumented kernels record via
//!   [`crate::tensor::tally`]. These closed forms must equal those counters.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionDims, AttentionKind};
use crate::error::{Error, Result};
use crate::kv_cache::CachePolicy;
use crate::model::{ModelConfig, ModelMode};
use crate::tensor::tally::OpCounts;

/// Analysis symbols: batch `b`, query positions `n`, memory positions `m`,
/// model width `d`, heads `h`, key width `k`, value width `v`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeConfig {
    pub b: u64,
    pub n: u64,
    pub m: u64,
    pub d: u64,
    pub h: u64,
    pub k: u64,
    pub v: u64,
}

impl ShapeConfig {
    pub fn new(b: u64, n: u64, m: u64, d: u64, h: u64, k: u64, v: u64) -> Result<Self> {
        let cfg = ShapeConfig {
            b,
            n,
            m,
            d,
            h,
            k,
            v,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `m = n`, `k = v = d/h`.
    pub fn simplified(b: u64, n: u64, d: u64, h: u64) -> Result<Self> {
        if h == 0 || !d.is_multiple_of(h) {
            return Err(Error::Config(format!(
                "d = {d} is not divisible by h = {h}"
            )));
        }
        let cfg = ShapeConfig::new(b, n, n, d, h, d / h, d / h)?;
        cfg.check_simplified()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let ShapeConfig {
            b,
            n,
            m,
            d,
            h,
            k,
            v,
        } = *self;
        if [b, n, m, d, h, k, v].contains(&0) {
            return Err(Error::Config(format!(
                "shape symbols must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    /// The assumptions behind the asymptotic ratios: `m = n`, `k = v = d/h`
    /// and `n <= d`.
    pub fn check_simplified(&self) -> Result<()> {
        self.validate()?;
        if self.m != self.n || self.k != self.v || self.k * self.h != self.d || self.n > self.d {
            return Err(Error::Config(format!(
                "{self:?} violates m = n, k = v = d/h, n <= d"
            )));
        }
        Ok(())
    }

    fn kv_heads(&self, kind: AttentionKind) -> u64 {
        match kind {
            AttentionKind::MultiHead => self.h,
            AttentionKind::MultiQuery => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    SumOfSizes,
    OpTraffic,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostBreakdown {
    pub convention: Convention,
    pub counts: OpCounts,
}

impl CostBreakdown {
    pub fn flops(&self) -> u64 {
        self.counts.total_flops()
    }

    pub fn memory_words(&self) -> u64 {
        self.counts.total_words()
    }

    /// Memory words per flop, exactly.
    pub fn ratio(&self) -> Ratio<u128> {
        Ratio::new(self.memory_words() as u128, self.flops().max(1) as u128)
    }

    pub fn ratio_f64(&self) -> f64 {
        self.memory_words() as f64 / self.flops().max(1) as f64
    }

    /// Words in the key and value tensors.
    pub fn kv_words(&self) -> u64 {
        self.counts.words_of("K") + self.counts.words_of("V")
    }

    /// Words grouped as activations (`b·n·d`-like), logits (`b·h·n·m`-like:
    /// logits, weights, mask) and projections (`d²`-like).
    pub fn groups(&self) -> BTreeMap<&'static str, u64> {
        let mut groups = BTreeMap::from([("activations", 0), ("logits", 0), ("projections", 0)]);
        for (name, words) in &self.counts.words {
            let group = match name.as_str() {
                "logits" | "weights" | "mask" => "logits",
                n if n.starts_with("P_") => "projections",
                _ => "activations",
            };
            *groups.get_mut(group).unwrap() += words;
        }
        groups
    }

    /// `term,words,flops` rows followed by a `total` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("term,words,flops\n");
        for name in self.term_names() {
            let _ = writeln!(
                out,
                "{name},{},{}",
                self.counts.words_of(&name),
                self.counts.flops_of(&name)
            );
        }
        let _ = writeln!(out, "total,{},{}", self.memory_words(), self.flops());
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<10} {:>16} {:>16}", "term", "words", "flops");
        for name in self.term_names() {
            let _ = writeln!(
                out,
                "{name:<10} {:>16} {:>16}",
                self.counts.words_of(&name),
                self.counts.flops_of(&name)
            );
        }
        let _ = writeln!(
            out,
            "{:<10} {:>16} {:>16}",
            "total",
            self.memory_words(),
            self.flops()
        );
        let ratio = self.ratio();
        let _ = writeln!(
            out,
            "ratio (words/flop) = {}/{} = {:.6}",
            ratio.numer(),
            ratio.denom(),
            self.ratio_f64()
        );
        out
    }

    fn term_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.counts.words.keys().cloned().collect();
        for name in self.counts.flops.keys() {
            if !names.contains(name) {
                names.push(name.clone());
            }
        }
        names.sort();
        names
    }
}

struct Builder(OpCounts);

impl Builder {
    fn op(&mut self, flops: u64, out: &str, reads: &[(&str, u64)], writes: u64) -> &mut Self {
        if flops > 0 {
            self.0.add_flops(out, flops);
        }
        for &(name, words) in reads {
            self.words(name, words);
        }
        self.0.add_words(out, writes);
        self
    }

    fn words(&mut self, name: &str, words: u64) -> &mut Self {
        if words > 0 {
            self.0.add_words(name, words);
        }
        self
    }

    fn finish(self, convention: Convention) -> CostBreakdown {
        CostBreakdown {
            convention,
            counts: self.0,
        }
    }
}

/// Flops and per-op traffic of one batched attention call (with its
/// materialized mask). Total flops for `k = v` are `4bhk(d(n+m) + nm)`.
pub fn flops_batched(cfg: &ShapeConfig, kind: AttentionKind) -> CostBreakdown {
    let ShapeConfig {
        b,
        n,
        m,
        d,
        h,
        k,
        v,
    } = *cfg;
    let g = cfg.kv_heads(kind);
    let mut t = Builder(OpCounts::default());
    t.op(
        2 * b * n * d * h * k,
        "Q",
        &[("X", b * n * d), ("P_q", h * d * k)],
        b * h * n * k,
    )
    .op(
        2 * b * m * d * g * k,
        "K",
        &[("M", b * m * d), ("P_k", g * d * k)],
        b * g * m * k,
    )
    .op(
        2 * b * m * d * g * v,
        "V",
        &[("M", b * m * d), ("P_v", g * d * v)],
        b * g * m * v,
    )
    .op(
        2 * b * h * n * m * k,
        "logits",
        &[("Q", b * h * n * k), ("K", b * g * m * k)],
        b * h * n * m,
    )
    .op(
        0,
        "weights",
        &[("logits", b * h * n * m), ("mask", b * h * n * m)],
        b * h * n * m,
    )
    .op(
        2 * b * h * n * m * v,
        "O",
        &[("weights", b * h * n * m), ("V", b * g * m * v)],
        b * h * n * v,
    )
    .op(
        2 * b * n * h * v * d,
        "Y",
        &[("O", b * h * n * v), ("P_o", h * d * v)],
        b * n * d,
    );
    t.finish(Convention::OpTraffic)
}

/// Sum of the sizes of every tensor in the batched listing, each once:
/// X, M, Q, K, V, logits, weights, mask, O, Y and the four projections.
/// Flop terms are those of [`flops_batched`].
pub fn memory_batched(cfg: &ShapeConfig, kind: AttentionKind) -> CostBreakdown {
    let ShapeConfig {
        b,
        n,
        m,
        d,
        h,
        k,
        v,
    } = *cfg;
    let g = cfg.kv_heads(kind);
    let mut counts = OpCounts {
        flops: flops_batched(cfg, kind).counts.flops,
        words: BTreeMap::new(),
    };
    let sizes = [
        ("X", b * n * d),
        ("M", b * m * d),
        ("Q", b * h * n * k),
        ("K", b * g * m * k),
        ("V", b * g * m * v),
        ("logits", b * h * n * m),
        ("weights", b * h * n * m),
        ("mask", b * h * n * m),
        ("O", b * h * n * v),
        ("Y", b * n * d),
        ("P_q", h * d * k),
        ("P_k", g * d * k),
        ("P_v", g * d * v),
        ("P_o", h * d * v),
    ];
    for (name, words) in sizes {
        counts.add_words(name, words);
    }
    CostBreakdown {
        convention: Convention::SumOfSizes,
        counts,
    }
}

/// Positions scanned by the attention at 1-based step `step`.
fn attended(policy: CachePolicy, step: u64) -> Result<u64> {
    match policy {
        CachePolicy::Growing => Ok(step),
        CachePolicy::Padded { max_len } if (max_len as u64) < step => {
            Err(Error::Capacity { capacity: max_len })
        }
        CachePolicy::Padded { max_len } => Ok(max_len as u64),
        CachePolicy::Window { size } => Ok(size as u64),
    }
}

/// Per-op traffic and flops of incremental step `step` (1-based; the cache
/// holds `step` positions after the append). A growing cache is assumed to
/// attend to every position, with no mask.
pub fn cost_step(
    cfg: &ShapeConfig,
    kind: AttentionKind,
    policy: CachePolicy,
    step: u64,
) -> Result<CostBreakdown> {
    let mut t = Builder(OpCounts::default());
    add_step(&mut t, cfg, kind, policy, step)?;
    Ok(t.finish(Convention::OpTraffic))
}

fn add_step(
    t: &mut Builder,
    cfg: &ShapeConfig,
    kind: AttentionKind,
    policy: CachePolicy,
    step: u64,
) -> Result<()> {
    let ShapeConfig { b, d, h, k, v, .. } = *cfg;
    let g = cfg.kv_heads(kind);
    let l = attended(policy, step)?;
    let masked = policy != CachePolicy::Growing;
    let mask_words = if masked { b * h * l } else { 0 };
    t.op(
        2 * b * d * h * k,
        "q",
        &[("x", b * d), ("P_q", h * d * k)],
        b * h * k,
    )
    .op(
        2 * b * d * g * k,
        "k_new",
        &[("x", b * d), ("P_k", g * d * k)],
        b * g * k,
    )
    .op(
        2 * b * d * g * v,
        "v_new",
        &[("x", b * d), ("P_v", g * d * v)],
        b * g * v,
    )
    .words("k_new", b * g * k)
    .words("v_new", b * g * v)
    .op(
        2 * b * h * k * l,
        "logits",
        &[("q", b * h * k), ("K", b * g * l * k)],
        b * h * l,
    )
    .op(
        0,
        "weights",
        &[("logits", b * h * l), ("mask", mask_words)],
        b * h * l,
    )
    .op(
        2 * b * h * l * v,
        "o",
        &[("weights", b * h * l), ("V", b * g * l * v)],
        b * h * v,
    )
    .op(
        2 * b * h * v * d,
        "y",
        &[("o", b * h * v), ("P_o", h * d * v)],
        b * d,
    );
    Ok(())
}

/// Flops and per-op traffic summed over `cfg.n` incremental self-attention
/// steps. With a growing cache the key/value traffic is
/// `b·h·k·n(n+1)` (multi-head, `k = v`) or `b·k·n(n+1)` (multi-query).
/// With a cache padded to `n`, total flops equal [`flops_batched`] at `m = n`.
pub fn cost_incremental(
    cfg: &ShapeConfig,
    kind: AttentionKind,
    policy: CachePolicy,
) -> Result<CostBreakdown> {
    let mut t = Builder(OpCounts::default());
    for step in 1..=cfg.n {
        add_step(&mut t, cfg, kind, policy, step)?;
    }
    Ok(t.finish(Convention::OpTraffic))
}

/// `1/k + 1/(bn)`: order of the batched words-per-flop ratio.
pub fn batched_ratio_order(cfg: &ShapeConfig) -> f64 {
    1.0 / cfg.k as f64 + 1.0 / (cfg.b * cfg.n) as f64
}

/// Order of the incremental words-per-flop ratio: `n/d + 1/b` for
/// multi-head, `1/d + n/(dh) + 1/b` for multi-query.
pub fn incremental_ratio_order(cfg: &ShapeConfig, kind: AttentionKind) -> f64 {
    let (n, d, h, b) = (cfg.n as f64, cfg.d as f64, cfg.h as f64, cfg.b as f64);
    match kind {
        AttentionKind::MultiHead => n / d + 1.0 / b,
        AttentionKind::MultiQuery => 1.0 / d + n / (d * h) + 1.0 / b,
    }
}

/// Projection parameters of one attention layer:
/// `h·d·(2k + 2v)` multi-head, `h·d·(k + v) + d·(k + v)` multi-query.
pub fn param_count_attention(d: usize, h: usize, k: usize, v: usize, kind: AttentionKind) -> usize {
    AttentionDims {
        heads: h,
        model_dim: d,
        key_dim: k,
        value_dim: v,
    }
    .param_count(kind)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Widened {
    /// The variant has fewer attention parameters; its `d_ff` grows.
    Variant,
    /// The variant has more; the baseline's `d_ff` must grow instead.
    Baseline,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Parity {
    pub widened: Widened,
    /// Feed-forward width for the widened model, rounded to nearest.
    pub d_ff: usize,
    /// Whether the rounding was exact.
    pub exact: bool,
    /// Attention parameters saved by the variant (negative if it is larger).
    pub savings: i64,
}

/// Feed-forward width that gives `variant` the same parameter count as
/// `baseline`, assuming `2·d·d_ff` parameters per feed-forward layer.
///
/// Savings are summed over every attention site (encoder self, decoder self
/// and cross for encoder-decoder models; decoder self only otherwise) and
/// spread across all feed-forward layers.
pub fn dff_for_parity(baseline: &ModelConfig, variant: &ModelConfig) -> Result<Parity> {
    if baseline.mode != variant.mode
        || baseline.layers != variant.layers
        || baseline.d_model != variant.d_model
    {
        return Err(Error::Config(
            "parity needs configs that differ only in their attention sites".into(),
        ));
    }
    let savings = baseline.attention_params() as i64 - variant.attention_params() as i64;
    let ff_layers = match baseline.mode {
        ModelMode::EncoderDecoder => 2 * baseline.layers,
        ModelMode::DecoderOnly => baseline.layers,
    } as i64;
    let per_unit = 2 * baseline.d_model as i64 * ff_layers;
    let (widened, base_dff, extra) = if savings >= 0 {
        (Widened::Variant, baseline.d_ff, savings)
    } else {
        (Widened::Baseline, baseline.d_ff, -savings)
    };
    let exact = extra % per_unit == 0;
    let rounded = (extra + per_unit / 2) / per_unit;
    if !exact {
        log::warn!("parity widening {extra}/{per_unit} is not an integer; rounded to {rounded}");
    }
    Ok(Parity {
        widened,
        d_ff: base_dff + rounded as usize,
        exact,
        savings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ShapeConfig {
        ShapeConfig::new(1, 2, 2, 4, 2, 2, 2).unwrap()
    }

    #[test]
    fn toy_batched_counts() {
        assert_eq!(flops_batched(&toy(), AttentionKind::MultiHead).flops(), 320);
        assert_eq!(
            memory_batched(&toy(), AttentionKind::MultiHead).memory_words(),
            144
        );
    }

    #[test]
    fn closed_form_total() {
        for (b, h, n, m, d, k) in [(1, 2, 2, 2, 4, 2), (3, 4, 5, 7, 8, 2), (2, 1, 3, 1, 6, 6)] {
            let cfg = ShapeConfig::new(b, n, m, d, h, k, k).unwrap();
            assert_eq!(
                flops_batched(&cfg, AttentionKind::MultiHead).flops(),
                4 * b * h * k * (d * (n + m) + n * m)
            );
        }
    }

    #[test]
    fn simplified_total_is_8bnd2_plus_4bn2d() {
        for (b, n, d, h) in [(1, 4, 8, 2), (3, 16, 32, 4), (2, 8, 64, 8)] {
            let cfg = ShapeConfig::simplified(b, n, d, h).unwrap();
            assert_eq!(
                flops_batched(&cfg, AttentionKind::MultiHead).flops(),
                8 * b * n * d * d + 4 * b * n * n * d
            );
        }
    }

    #[test]
    fn multi_query_divides_kv_projection_terms_by_h() {
        let cfg = ShapeConfig::new(2, 3, 5, 8, 4, 2, 2).unwrap();
        let mh = flops_batched(&cfg, AttentionKind::MultiHead).counts.flops;
        let mq = flops_batched(&cfg, AttentionKind::MultiQuery).counts.flops;
        for term in ["Q", "logits", "O", "Y"] {
            assert_eq!(mh[term], mq[term]);
        }
        for term in ["K", "V"] {
            assert_eq!(mh[term], 4 * mq[term]);
        }
    }

    #[test]
    fn incremental_kv_terms() {
        let cfg = ShapeConfig::new(1, 3, 3, 8, 4, 2, 2).unwrap();
        let mh = cost_incremental(&cfg, AttentionKind::MultiHead, CachePolicy::Growing).unwrap();
        let mq = cost_incremental(&cfg, AttentionKind::MultiQuery, CachePolicy::Growing).unwrap();
        assert_eq!(mh.kv_words(), 96);
        assert_eq!(mq.kv_words(), 24);
    }

    #[test]
    fn padded_incremental_flops_equal_batched() {
        let cfg = ShapeConfig::new(2, 5, 5, 8, 4, 2, 3).unwrap();
        for kind in [AttentionKind::MultiHead, AttentionKind::MultiQuery] {
            let inc = cost_incremental(&cfg, kind, CachePolicy::Padded { max_len: 5 }).unwrap();
            assert_eq!(inc.flops(), flops_batched(&cfg, kind).flops());
        }
        assert!(cost_incremental(
            &cfg,
            AttentionKind::MultiHead,
            CachePolicy::Padded { max_len: 4 }
        )
        .is_err());
    }

    #[test]
    fn doubling_batch_doubles_all_but_projections() {
        let one = memory_batched(
            &ShapeConfig::new(1, 3, 4, 8, 2, 4, 4).unwrap(),
            AttentionKind::MultiHead,
        );
        let two = memory_batched(
            &ShapeConfig::new(2, 3, 4, 8, 2, 4, 4).unwrap(),
            AttentionKind::MultiHead,
        );
        for (name, words) in &one.counts.words {
            let expect = if name.starts_with("P_") {
                *words
            } else {
                2 * words
            };
            assert_eq!(two.counts.words[name], expect, "{name}");
        }
        assert_eq!(one.groups()["projections"], two.groups()["projections"]);
    }

    #[test]
    fn csv_has_total_row() {
        let csv = flops_batched(&toy(), AttentionKind::MultiHead).to_csv();
        assert!(csv.starts_with("term,words,flops\n"));
        assert!(csv.lines().last().unwrap().starts_with("total,"));
        assert!(csv.contains("\nlogits,"));
    }

    #[test]
    fn rejects_zero_symbols() {
        assert!(ShapeConfig::new(0, 1, 1, 1, 1, 1, 1).is_err());
        assert!(ShapeConfig::simplified(1, 4, 10, 3).is_err());
        assert!(ShapeConfig::simplified(1, 16, 8, 2).is_err());
    }
}
