//! A fast self-check suite: each check compares a kernel or closed form
//! against an independent oracle on small random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    attention_forward, build_mask, multihead_attention_batched, multiquery_attention_batched,
    self_attention_step, self_attention_step_in_place, AttentionDims, AttentionKind,
    AttentionWeights, MaskKind, MaskShape,
};
use crate::cost::{cost_incremental, dff_for_parity, flops_batched, ShapeConfig};
use crate::error::Result;
use crate::kv_cache::{CacheDims, CachePolicy, KvCache};
use crate::model::gradcheck::check_gradients;
use crate::model::{
    beam_decode, greedy_decode, make_batch, DecodeConfig, ModelConfig, ModelMode, ModelParams,
    SiteKinds, Task,
};
use crate::reference::{attention_position_loop, naive_contract};
use crate::tensor::{contract, tally, Equation, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Check = fn(&mut ChaCha8Rng) -> Result<(bool, String)>;

const CHECKS: &[(&str, Check)] = &[
    ("contract matches naive summation", check_contract),
    ("batched attention matches position loop", check_batched),
    ("multi-query equals tied multi-head", check_tied),
    ("incremental equals batched causal", check_incremental),
    ("counters equal closed forms", check_counters),
    ("kv traffic ratio is h", check_kv_ratio),
    ("parity widths 5440 6784 9088", check_parity),
    ("wide local window equals causal", check_window),
    ("gradients match finite differences", check_grads),
    ("beam of one equals greedy", check_beam),
];

pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|(n, _)| *n).collect()
}

/// Runs every check with RNG seeded from `seed`. Errors inside a check are
/// reported as failures.
pub fn run_checks(seed: u64) -> Vec<CheckOutcome> {
    CHECKS
        .iter()
        .map(|(name, check)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (passed, detail) = match check(&mut rng) {
                Ok(v) => v,
                Err(e) => (false, format!("error: {e}")),
            };
            CheckOutcome {
                name,
                passed,
                detail,
            }
        })
        .collect()
}

fn weights(
    rng: &mut ChaCha8Rng,
    kind: AttentionKind,
    h: usize,
    d: usize,
    k: usize,
) -> AttentionWeights {
    AttentionWeights::random(
        kind,
        AttentionDims {
            heads: h,
            model_dim: d,
            key_dim: k,
            value_dim: k,
        },
        0.5,
        rng,
    )
}

fn check_contract(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for eq in [
        "bhnk,bhmk->bhnm",
        "bnd,hdk->bhnk",
        "ij,jk->ik",
        "abc,cb->a",
        "ab,cd->abcd",
    ] {
        let sig = Equation::parse(eq)?;
        let mut extents = [0usize; 26];
        for c in sig.indices() {
            extents[(c - b'a') as usize] = rng.gen_range(1..4);
        }
        let shape =
            |ix: &[u8]| -> Vec<usize> { ix.iter().map(|c| extents[(c - b'a') as usize]).collect() };
        let a = Tensor::uniform(shape(sig.lhs()), 1.0, rng);
        let b = Tensor::uniform(shape(sig.rhs()), 1.0, rng);
        worst = worst.max(contract(&a, &b, &sig)?.max_abs_diff(&naive_contract(&a, &b, eq)));
    }
    Ok((worst <= 1e-12, format!("max diff {worst:.2e}")))
}

fn check_batched(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for kind in [AttentionKind::MultiHead, AttentionKind::MultiQuery] {
        let (b, n, d, h, k) = (2, 4, 6, 3, 2);
        let w = weights(rng, kind, h, d, k);
        let x = Tensor::uniform([b, n, d], 1.0, rng);
        let sig = MaskShape::new(MaskKind::Causal, b, h, n, n);
        let y = match kind {
            AttentionKind::MultiHead => multihead_attention_batched(&x, &x, &sig, &w)?,
            AttentionKind::MultiQuery => multiquery_attention_batched(&x, &x, &sig, &w)?,
        };
        worst = worst.max(y.max_abs_diff(&attention_position_loop(&x, &x, &sig, &w)));
    }
    Ok((worst <= 1e-12, format!("max diff {worst:.2e}")))
}

fn check_tied(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let w = weights(rng, AttentionKind::MultiQuery, 4, 8, 3);
    let x = Tensor::uniform([2, 3, 8], 1.0, rng);
    let m = Tensor::uniform([2, 5, 8], 1.0, rng);
    let a = attention_forward(&x, &m, None, &w)?.y;
    let b = attention_forward(&x, &m, None, &w.replicate_heads()?)?.y;
    let diff = a.max_abs_diff(&b);
    Ok((diff <= 1e-12, format!("max diff {diff:.2e}")))
}

fn check_incremental(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    let (b, n, d, h, k) = (2, 5, 6, 2, 3);
    for kind in [AttentionKind::MultiHead, AttentionKind::MultiQuery] {
        let w = weights(rng, kind, h, d, k);
        let x = Tensor::uniform([b, n, d], 1.0, rng);
        let mask = build_mask(&MaskShape::new(MaskKind::Causal, b, h, n, n))?;
        let batched = attention_forward(&x, &x, Some(&mask), &w)?.y;
        let dims = CacheDims {
            batch: b,
            heads: h,
            key_dim: k,
            value_dim: k,
        };
        for policy in [CachePolicy::Growing, CachePolicy::Padded { max_len: n }] {
            let mut cache = KvCache::new(kind, dims, policy)?;
            for i in 0..n {
                let xi = x.slice_axis(1, i..i + 1)?.into_shape([b, d])?;
                let yi = if policy == CachePolicy::Growing {
                    let (y, next) = self_attention_step(&xi, &cache, &w)?;
                    cache = next;
                    y
                } else {
                    self_attention_step_in_place(&xi, &mut cache, &w)?
                };
                let want = batched.slice_axis(1, i..i + 1)?.into_shape([b, d])?;
                worst = worst.max(yi.max_abs_diff(&want));
            }
        }
    }
    Ok((worst <= 1e-10, format!("max diff {worst:.2e}")))
}

fn check_counters(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let (b, n, m, d, h, k) = (2, 3, 4, 6, 2, 3);
    let cfg = ShapeConfig::new(
        b as u64, n as u64, m as u64, d as u64, h as u64, k as u64, k as u64,
    )?;
    let mut ok = true;
    for kind in [AttentionKind::MultiHead, AttentionKind::MultiQuery] {
        let w = weights(rng, kind, h, d, k);
        let x = Tensor::uniform([b, n, d], 1.0, rng);
        let mem = Tensor::uniform([b, m, d], 1.0, rng);
        let mask = Tensor::zeros([b, h, n, m]);
        let (out, counts) = tally::measure(|| attention_forward(&x, &mem, Some(&mask), &w));
        out?;
        ok &= counts == flops_batched(&cfg, kind).counts;

        let inc = ShapeConfig { m: n as u64, ..cfg };
        let dims = CacheDims {
            batch: b,
            heads: h,
            key_dim: k,
            value_dim: k,
        };
        for policy in [CachePolicy::Growing, CachePolicy::Padded { max_len: n }] {
            let (out, counts) = tally::measure(|| -> Result<()> {
                let mut cache = KvCache::new(kind, dims, policy)?;
                for i in 0..n {
                    let xi = x.slice_axis(1, i..i + 1)?.into_shape([b, d])?;
                    cache = self_attention_step(&xi, &cache, &w)?.1;
                }
                Ok(())
            });
            out?;
            ok &= counts == cost_incremental(&inc, kind, policy)?.counts;
        }
    }
    Ok((ok, String::new()))
}

fn check_kv_ratio(_: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let mut ok = true;
    for h in [1u64, 2, 4, 8] {
        for n in [4u64, 16] {
            let cfg = ShapeConfig::new(2, n, n, 16, h, 4, 4)?;
            let mh =
                cost_incremental(&cfg, AttentionKind::MultiHead, CachePolicy::Growing)?.kv_words();
            let mq =
                cost_incremental(&cfg, AttentionKind::MultiQuery, CachePolicy::Growing)?.kv_words();
            ok &= mh == h * mq;
        }
    }
    Ok((ok, String::new()))
}

fn wmt(kind: AttentionKind, heads: usize, d_k: usize) -> ModelConfig {
    ModelConfig {
        mode: ModelMode::EncoderDecoder,
        layers: 6,
        d_model: 1024,
        d_ff: 4096,
        heads,
        d_k,
        d_v: d_k,
        vocab_size: 32768,
        max_len: 256,
        attention: SiteKinds::uniform(kind),
        local_window: None,
        seed: 0,
    }
}

fn check_parity(_: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let base = wmt(AttentionKind::MultiHead, 8, 128);
    let mq = dff_for_parity(&base, &wmt(AttentionKind::MultiQuery, 8, 128))?.d_ff;
    let reduced = dff_for_parity(&base, &wmt(AttentionKind::MultiHead, 1, 128))?.d_ff;
    let lm = |kind| ModelConfig {
        mode: ModelMode::DecoderOnly,
        d_ff: 8192,
        ..wmt(kind, 8, 128)
    };
    let lm_mq = dff_for_parity(
        &lm(AttentionKind::MultiHead),
        &lm(AttentionKind::MultiQuery),
    )?
    .d_ff;
    Ok((
        (mq, reduced, lm_mq) == (5440, 6784, 9088),
        format!("{mq} {reduced} {lm_mq}"),
    ))
}

fn check_window(rng: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let (b, n, h) = (1, 6, 2);
    let w = weights(rng, AttentionKind::MultiQuery, h, 4, 2);
    let x = Tensor::uniform([b, n, 4], 1.0, rng);
    let causal =
        multiquery_attention_batched(&x, &x, &MaskShape::new(MaskKind::Causal, b, h, n, n), &w)?;
    let local = multiquery_attention_batched(
        &x,
        &x,
        &MaskShape::new(MaskKind::Local { window: n }, b, h, n, n),
        &w,
    )?;
    Ok((causal == local, String::new()))
}

fn tiny_model(kinds: SiteKinds, seed: u64) -> ModelConfig {
    ModelConfig {
        mode: ModelMode::EncoderDecoder,
        layers: 1,
        d_model: 6,
        d_ff: 8,
        heads: 2,
        d_k: 3,
        d_v: 3,
        vocab_size: 6,
        max_len: 4,
        attention: kinds,
        local_window: None,
        seed,
    }
}

fn check_grads(_: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let kinds = SiteKinds {
        encoder_self: AttentionKind::MultiQuery,
        decoder_self: AttentionKind::MultiHead,
        cross: AttentionKind::MultiQuery,
    };
    let params = ModelParams::init(&tiny_model(kinds, 4))?;
    let batch = make_batch(
        &params.config,
        Task::Reverse,
        &[vec![2, 3, 4], vec![5, 5, 2]],
    );
    let report = check_gradients(&params, &batch, 3, 1e-5, 0)?;
    let worst = report.max_relative_error();
    Ok((
        worst < 1e-6,
        format!(
            "{} coordinates, worst relative error {worst:.2e}",
            report.checks.len()
        ),
    ))
}

fn check_beam(_: &mut ChaCha8Rng) -> Result<(bool, String)> {
    let params = ModelParams::init(&tiny_model(
        SiteKinds::uniform(AttentionKind::MultiQuery),
        8,
    ))?;
    let source = vec![2, 3, 4];
    let greedy = greedy_decode(
        &params,
        Some(std::slice::from_ref(&source)),
        &[vec![0]],
        &DecodeConfig::greedy(4),
    )?;
    let beam = beam_decode(&params, Some(&source), &[0], &DecodeConfig::beam(1, 0.0, 4))?;
    Ok((
        greedy.tokens[0] == beam.tokens,
        format!("{:?}", beam.tokens),
    ))
}
