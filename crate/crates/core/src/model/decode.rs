use std::cmp::Ordering;

use super::config::{CacheMode, DecodeConfig, DecodeStrategy};
use super::layers::{embed, feed_forward, layer_norm};
use super::params::ModelParams;
use super::transformer::{encode, log_softmax_rows};
use crate::attention::{
    cross_attention_step, self_attention_step, self_attention_step_in_place, AttentionKind,
};
use crate::error::{Error, Result};
use crate::kv_cache::{CacheDims, CachePolicy, KvCache};
use crate::tensor::tally::contract_named;
use crate::tensor::Tensor;

/// Per-layer key/value caches for one batch of decoder rows. Cross-attention
/// keys and values are projected from the encoder memory once.
#[derive(Clone, Debug)]
pub struct DecoderState<'a> {
    params: &'a ModelParams,
    self_caches: Vec<KvCache>,
    cross_caches: Vec<Option<KvCache>>,
    position: usize,
}

impl<'a> DecoderState<'a> {
    /// `horizon` is the number of positions that will be fed, which sizes
    /// padded caches.
    pub fn new(
        params: &'a ModelParams,
        source: Option<&[Vec<u32>]>,
        rows: usize,
        cache: CacheMode,
        horizon: usize,
    ) -> Result<Self> {
        let config = &params.config;
        if rows == 0 {
            return Err(Error::Input("decoding needs at least one row".into()));
        }
        let memory = match (source, config.has_encoder()) {
            (Some(src), true) if src.len() == rows => Some(encode(params, src)?),
            (None, false) => None,
            (_, true) => {
                return Err(Error::Input(
                    "encoder-decoder decoding needs one source row per row".into(),
                ))
            }
            (Some(_), false) => {
                return Err(Error::Input("decoder-only model takes no source".into()))
            }
        };
        let policy = match (cache, config.local_window) {
            (CacheMode::Growing, _) => CachePolicy::Growing,
            (CacheMode::Padded, Some(size)) if size < horizon => CachePolicy::Window { size },
            (CacheMode::Padded, _) => CachePolicy::Padded {
                max_len: horizon.max(1),
            },
        };
        let mut self_caches = Vec::with_capacity(params.decoder.len());
        let mut cross_caches = Vec::with_capacity(params.decoder.len());
        for layer in &params.decoder {
            let w = &layer.self_attn;
            let dims = CacheDims {
                batch: rows,
                heads: config.heads,
                key_dim: config.d_k,
                value_dim: config.d_v,
            };
            let mut cache = KvCache::new(w.kind(), dims, policy)?;
            if let Some(window) = config.local_window {
                cache = cache.with_window(window)?;
            }
            self_caches.push(cache);
            cross_caches.push(match (&layer.cross, &memory) {
                (Some(block), Some(mem)) => {
                    let (k_eq, v_eq) = match block.attn.kind() {
                        AttentionKind::MultiHead => ("bmd,hdk->bhmk", "bmd,hdv->bhmv"),
                        AttentionKind::MultiQuery => ("bmd,dk->bmk", "bmd,dv->bmv"),
                    };
                    let keys =
                        contract_named(mem, block.attn.p_k(), k_eq, ["M", "P_k", "K_memory"])?;
                    let values =
                        contract_named(mem, block.attn.p_v(), v_eq, ["M", "P_v", "V_memory"])?;
                    Some(KvCache::from_memory(
                        block.attn.kind(),
                        config.heads,
                        keys,
                        values,
                    )?)
                }
                _ => None,
            });
        }
        Ok(DecoderState {
            params,
            self_caches,
            cross_caches,
            position: 0,
        })
    }

    pub fn rows(&self) -> usize {
        self.self_caches[0].dims().batch
    }

    /// Positions fed so far.
    pub fn position(&self) -> usize {
        self.position
    }

    pub fn self_caches(&self) -> &[KvCache] {
        &self.self_caches
    }

    /// Feeds one token per row at the next position and returns the
    /// next-token logits `[rows, vocab]`.
    pub fn step(&mut self, tokens: &[u32]) -> Result<Tensor> {
        let params = self.params;
        let rows = self.rows();
        if tokens.len() != rows {
            return Err(Error::Input(format!(
                "expected {rows} tokens, got {}",
                tokens.len()
            )));
        }
        let column: Vec<Vec<u32>> = tokens.iter().map(|&t| vec![t]).collect();
        let d = params.config.d_model;
        let mut x = embed(&params.embedding, &params.positions, &column, self.position)?
            .into_shape([rows, d])?;
        for (i, layer) in params.decoder.iter().enumerate() {
            let (h, _) = layer_norm(&x, &layer.norm_self);
            let cache = &mut self.self_caches[i];
            let y = if cache.policy() == CachePolicy::Growing {
                let (y, next) = self_attention_step(&h, cache, &layer.self_attn)?;
                *cache = next;
                y
            } else {
                self_attention_step_in_place(&h, cache, &layer.self_attn)?
            };
            x = x.add(&y)?;
            if let (Some(block), Some(memory)) = (&layer.cross, &self.cross_caches[i]) {
                let (h, _) = layer_norm(&x, &block.norm);
                x = x.add(&cross_attention_step(&h, memory, &block.attn)?)?;
            }
            let (h, _) = layer_norm(&x, &layer.norm_ff);
            let (f, _) = feed_forward(&h, &layer.ff)?;
            x = x.add(&f)?;
        }
        let (h, _) = layer_norm(&x, &params.decoder_norm);
        self.position += 1;
        contract_named(
            &h,
            &params.embedding,
            "bd,vd->bv",
            ["h", "embedding", "logits_out"],
        )
    }

    /// Reorders or duplicates rows of every cache.
    pub fn reorder(&mut self, rows: &[usize]) -> Result<()> {
        for cache in self
            .self_caches
            .iter_mut()
            .chain(self.cross_caches.iter_mut().flatten())
        {
            *cache = cache.select_batch(rows)?;
        }
        Ok(())
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug)]
pub struct GreedyOutput {
    /// Generated tokens per row, excluding the prompt.
    pub tokens: Vec<Vec<u32>>,
    /// Logits `[rows, vocab]` after each fed position, prompt included.
    pub step_logits: Vec<Tensor>,
    /// Generation stopped at the model's position limit before `max_steps`.
    pub truncated: bool,
}

fn check_prompt(prompt: &[Vec<u32>]) -> Result<usize> {
    let len = prompt.first().map_or(0, Vec::len);
    if len == 0 || prompt.iter().any(|r| r.len() != len) {
        return Err(Error::Input(
            "prompt rows must be non-empty and equally long".into(),
        ));
    }
    Ok(len)
}

/// Greedy decoding. `prompt` is fed first (e.g. `[BOS]` for an
/// encoder-decoder model); rows that emit `eos` stop growing.
pub fn greedy_decode(
    params: &ModelParams,
    source: Option<&[Vec<u32>]>,
    prompt: &[Vec<u32>],
    cfg: &DecodeConfig,
) -> Result<GreedyOutput> {
    cfg.validate()?;
    let prompt_len = check_prompt(prompt)?;
    let max_len = params.config.max_len;
    if prompt_len > max_len {
        return Err(Error::Input(format!(
            "prompt of {prompt_len} exceeds max_len {max_len}"
        )));
    }
    let steps = cfg.max_steps.min(max_len - prompt_len + 1);
    let truncated = steps < cfg.max_steps;
    let horizon = prompt_len + steps.saturating_sub(1);
    let rows = prompt.len();
    let mut state = DecoderState::new(params, source, rows, cfg.cache, horizon)?;
    let mut step_logits = Vec::with_capacity(horizon);
    let mut logits = Tensor::zeros([0]);
    for j in 0..prompt_len {
        let column: Vec<u32> = prompt.iter().map(|r| r[j]).collect();
        logits = state.step(&column)?;
        step_logits.push(logits.clone());
    }
    let vocab = params.config.vocab_size;
    let mut tokens = vec![Vec::new(); rows];
    let mut done = vec![false; rows];
    for step in 0..steps {
        let next: Vec<u32> = logits
            .data()
            .chunks(vocab)
            .map(|r| argmax(r) as u32)
            .collect();
        for (i, &t) in next.iter().enumerate() {
            if !done[i] {
                tokens[i].push(t);
                done[i] = cfg.eos == Some(t);
            }
        }
        if done.iter().all(|&d| d) || step + 1 == steps {
            break;
        }
        logits = state.step(&next)?;
        step_logits.push(logits.clone());
    }
    Ok(GreedyOutput {
        tokens,
        step_logits,
        truncated,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamOutput {
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    /// `log_prob` divided by the length penalty.
    pub score: f64,
}

#[derive(Clone)]
struct Hypothesis {
    tokens: Vec<u32>,
    log_prob: f64,
}

struct Candidate {
    total: f64,
    local: f64,
    parent: usize,
    token: u32,
}

fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.total
        .total_cmp(&a.total)
        .then(b.local.total_cmp(&a.local))
        .then(a.parent.cmp(&b.parent))
        .then(a.token.cmp(&b.token))
}

/// Beam search for one row. Candidates rank by total log-probability, then
/// by the step's log-probability, parent index and token id, so a beam of
/// one reproduces greedy decoding. Finished hypotheses rank by
/// `log_prob / ((5 + len) / 6)^alpha`.
pub fn beam_decode(
    params: &ModelParams,
    source: Option<&[u32]>,
    prompt: &[u32],
    cfg: &DecodeConfig,
) -> Result<BeamOutput> {
    cfg.validate()?;
    let prompt_rows = [prompt.to_vec()];
    let prompt_len = check_prompt(&prompt_rows)?;
    let max_len = params.config.max_len;
    if prompt_len > max_len {
        return Err(Error::Input(format!(
            "prompt of {prompt_len} exceeds max_len {max_len}"
        )));
    }
    let steps = cfg.max_steps.min(max_len - prompt_len + 1);
    let horizon = prompt_len + steps.saturating_sub(1);
    let source_rows = source.map(|s| vec![s.to_vec()]);
    let mut state = DecoderState::new(params, source_rows.as_deref(), 1, cfg.cache, horizon)?;
    let mut logits = Tensor::zeros([0]);
    for &t in prompt {
        logits = state.step(&[t])?;
    }
    let vocab = params.config.vocab_size;
    let width = if cfg.strategy == DecodeStrategy::Greedy {
        1
    } else {
        cfg.beam_size
    };
    let mut alive = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for step in 0..steps {
        let logp = log_softmax_rows(logits.data(), vocab);
        let mut candidates: Vec<Candidate> = Vec::with_capacity(alive.len() * vocab);
        for (parent, hyp) in alive.iter().enumerate() {
            for (token, &local) in logp[parent * vocab..(parent + 1) * vocab]
                .iter()
                .enumerate()
            {
                candidates.push(Candidate {
                    total: hyp.log_prob + local,
                    local,
                    parent,
                    token: token as u32,
                });
            }
        }
        candidates.sort_by(rank);
        let mut next = Vec::with_capacity(width);
        for c in candidates {
            if next.len() == width {
                break;
            }
            let mut tokens = alive[c.parent].tokens.clone();
            tokens.push(c.token);
            let hyp = Hypothesis {
                tokens,
                log_prob: c.total,
            };
            if cfg.eos == Some(c.token) {
                if finished.len() < width {
                    finished.push(hyp);
                }
            } else {
                next.push((c.parent, c.token, hyp));
            }
        }
        if finished.len() >= width || next.is_empty() || step + 1 == steps {
            alive = next.into_iter().map(|(_, _, h)| h).collect();
            break;
        }
        let parents: Vec<usize> = next.iter().map(|(p, _, _)| *p).collect();
        let tokens: Vec<u32> = next.iter().map(|(_, t, _)| *t).collect();
        alive = next.into_iter().map(|(_, _, h)| h).collect();
        state.reorder(&parents)?;
        logits = state.step(&tokens)?;
    }
    finished.extend(alive);
    let score = |h: &Hypothesis| h.log_prob / cfg.length_penalty(h.tokens.len());
    finished
        .into_iter()
        .map(|h| BeamOutput {
            score: score(&h),
            log_prob: h.log_prob,
            tokens: h.tokens,
        })
        .min_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| a.tokens.cmp(&b.tokens))
        })
        .ok_or_else(|| Error::Input("beam search produced no hypothesis".into()))
}
