use super::config::ModelConfig;
use super::layers::{
    embed, embed_backward, feed_forward, feed_forward_backward, layer_norm, layer_norm_backward,
    FeedForwardCache, NormCache,
};
use super::params::ModelParams;
use crate::attention::{
    attention_backward, attention_forward, build_mask, AttentionTrace, MaskKind, MaskShape,
};
use crate::error::{Error, Result};
use crate::tensor::{contract, contract_grads, Equation, Tensor};

const LOGITS_EQ: &str = "bnd,vd->bnv";

/// One training or evaluation batch. Loss covers target positions
/// `loss_start..` of every row.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Encoder input; required exactly when the model has an encoder.
    pub source: Option<Vec<Vec<u32>>>,
    pub inputs: Vec<Vec<u32>>,
    pub targets: Vec<Vec<u32>>,
    pub loss_start: usize,
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.inputs.len()
    }

    pub fn len(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.rows() == 0 || self.len() == 0
    }

    fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let n = self.len();
        if self
            .inputs
            .iter()
            .chain(&self.targets)
            .any(|r| r.len() != n)
            || self.targets.len() != self.rows()
        {
            return Err(Error::Input(
                "inputs and targets must share one [rows, len] shape".into(),
            ));
        }
        if self.loss_start >= n {
            return Err(Error::Input(format!(
                "loss_start {} leaves no positions of {n}",
                self.loss_start
            )));
        }
        if let Some(&t) = self
            .targets
            .iter()
            .flatten()
            .find(|&&t| t as usize >= config.vocab_size)
        {
            return Err(Error::Input(format!(
                "target {t} out of range for vocab {}",
                config.vocab_size
            )));
        }
        match (&self.source, config.has_encoder()) {
            (Some(src), true)
                if src.len() == self.rows() && !src.is_empty() && !src[0].is_empty() =>
            {
                Ok(())
            }
            (None, false) => Ok(()),
            (_, true) => Err(Error::Input(
                "encoder-decoder batch needs one source row per input row".into(),
            )),
            (Some(_), false) => Err(Error::Input("decoder-only model takes no source".into())),
        }
    }
}

/// Mask kind of decoder self-attention for this config.
pub(crate) fn decoder_mask_kind(config: &ModelConfig) -> MaskKind {
    match config.local_window {
        Some(window) => MaskKind::Local { window },
        None => MaskKind::Causal,
    }
}

struct EncoderTape {
    norm_attn: NormCache,
    normed_attn: Tensor,
    attn: AttentionTrace,
    norm_ff: NormCache,
    normed_ff: Tensor,
    ff: FeedForwardCache,
}

struct CrossTape {
    norm: NormCache,
    normed: Tensor,
    attn: AttentionTrace,
}

struct DecoderTape {
    norm_self: NormCache,
    normed_self: Tensor,
    self_attn: AttentionTrace,
    cross: Option<CrossTape>,
    norm_ff: NormCache,
    normed_ff: Tensor,
    ff: FeedForwardCache,
}

struct Tape {
    encoder: Vec<EncoderTape>,
    encoder_norm: Option<NormCache>,
    memory: Option<Tensor>,
    decoder: Vec<DecoderTape>,
    decoder_norm: NormCache,
    final_hidden: Tensor,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[rows, len, vocab]`.
    pub logits: Tensor,
    /// Mean cross-entropy over the scored positions.
    pub loss: f64,
}

/// Runs the encoder over `source`, returning the normalized memory `[b, m, d]`.
pub fn encode(params: &ModelParams, source: &[Vec<u32>]) -> Result<Tensor> {
    let (memory, _, _) = encode_with_tape(params, source)?;
    Ok(memory)
}

fn encode_with_tape(
    params: &ModelParams,
    source: &[Vec<u32>],
) -> Result<(Tensor, Vec<EncoderTape>, NormCache)> {
    let norm = params
        .encoder_norm
        .as_ref()
        .ok_or_else(|| Error::Config("decoder-only model has no encoder".into()))?;
    let mut x = embed(&params.embedding, &params.positions, source, 0)?;
    let mut tapes = Vec::with_capacity(params.encoder.len());
    for layer in &params.encoder {
        let (normed_attn, norm_attn) = layer_norm(&x, &layer.norm_attn);
        let attn = attention_forward(&normed_attn, &normed_attn, None, &layer.attn)?;
        let mid = x.add(&attn.y)?;
        let (normed_ff, norm_ff) = layer_norm(&mid, &layer.norm_ff);
        let (f, ff) = feed_forward(&normed_ff, &layer.ff)?;
        let out = mid.add(&f)?;
        tapes.push(EncoderTape {
            norm_attn,
            normed_attn,
            attn,
            norm_ff,
            normed_ff,
            ff,
        });
        x = out;
    }
    let (memory, cache) = layer_norm(&x, norm);
    Ok((memory, tapes, cache))
}

fn forward_with_tape(params: &ModelParams, batch: &Batch) -> Result<(Tensor, Tape)> {
    let config = &params.config;
    batch.validate(config)?;
    let (memory, encoder, encoder_norm) = match &batch.source {
        Some(src) => {
            let (m, t, c) = encode_with_tape(params, src)?;
            (Some(m), t, Some(c))
        }
        None => (None, Vec::new(), None),
    };
    let (b, n) = (batch.rows(), batch.len());
    let sig = MaskShape::new(decoder_mask_kind(config), b, config.heads, n, n);
    let mask = build_mask(&sig)?;

    let mut x = embed(&params.embedding, &params.positions, &batch.inputs, 0)?;
    let mut decoder = Vec::with_capacity(params.decoder.len());
    for layer in &params.decoder {
        let (normed_self, norm_self) = layer_norm(&x, &layer.norm_self);
        let self_attn =
            attention_forward(&normed_self, &normed_self, Some(&mask), &layer.self_attn)?;
        x = x.add(&self_attn.y)?;
        let cross = match (&layer.cross, &memory) {
            (Some(block), Some(mem)) => {
                let (normed, norm) = layer_norm(&x, &block.norm);
                let attn = attention_forward(&normed, mem, None, &block.attn)?;
                x = x.add(&attn.y)?;
                Some(CrossTape { norm, normed, attn })
            }
            (None, None) => None,
            _ => {
                return Err(Error::Config(
                    "cross-attention layers and encoder disagree".into(),
                ))
            }
        };
        let (normed_ff, norm_ff) = layer_norm(&x, &layer.norm_ff);
        let (f, ff) = feed_forward(&normed_ff, &layer.ff)?;
        x = x.add(&f)?;
        decoder.push(DecoderTape {
            norm_self,
            normed_self,
            self_attn,
            cross,
            norm_ff,
            normed_ff,
            ff,
        });
    }
    let (final_hidden, decoder_norm) = layer_norm(&x, &params.decoder_norm);
    let logits = contract(
        &final_hidden,
        &params.embedding,
        &Equation::parse(LOGITS_EQ)?,
    )?;
    Ok((
        logits,
        Tape {
            encoder,
            encoder_norm,
            memory,
            decoder,
            decoder_norm,
            final_hidden,
        },
    ))
}

/// Log-softmax of every row of the last axis.
pub(crate) fn log_softmax_rows(logits: &[f64], width: usize) -> Vec<f64> {
    let mut out = logits.to_vec();
    for row in out.chunks_mut(width) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

/// Returns the loss and `dL/dlogits`.
fn cross_entropy(logits: &Tensor, batch: &Batch) -> Result<(f64, Tensor)> {
    let vocab = logits.shape()[2];
    let n = batch.len();
    let logp = log_softmax_rows(logits.data(), vocab);
    let count = (batch.rows() * (n - batch.loss_start)) as f64;
    // Running mean: exact when every position has the same loss.
    let mut loss = 0.0;
    let mut seen = 0.0;
    let mut grad = Tensor::zeros(logits.shape().to_vec());
    for (i, row) in batch.targets.iter().enumerate() {
        for (j, &t) in row.iter().enumerate().skip(batch.loss_start) {
            let base = (i * n + j) * vocab;
            seen += 1.0;
            loss += (-logp[base + t as usize] - loss) / seen;
            let g = &mut grad.data_mut()[base..base + vocab];
            for (gv, lp) in g.iter_mut().zip(&logp[base..base + vocab]) {
                *gv = lp.exp() / count;
            }
            g[t as usize] -= 1.0 / count;
        }
    }
    if !loss.is_finite() {
        return Err(Error::Numeric {
            tensor: "loss".into(),
        });
    }
    Ok((loss, grad))
}

pub fn forward(params: &ModelParams, batch: &Batch) -> Result<ForwardOutput> {
    let (logits, _) = forward_with_tape(params, batch)?;
    let (loss, _) = cross_entropy(&logits, batch)?;
    Ok(ForwardOutput { logits, loss })
}

/// Loss and the gradient of every parameter, in a [`ModelParams`] of the
/// same structure.
pub fn loss_and_grads(params: &ModelParams, batch: &Batch) -> Result<(f64, ModelParams)> {
    let (logits, tape) = forward_with_tape(params, batch)?;
    let (loss, dlogits) = cross_entropy(&logits, batch)?;
    let mut grads = params.zeros_like();

    let (dh, demb) = contract_grads(
        &tape.final_hidden,
        &params.embedding,
        &Equation::parse(LOGITS_EQ)?,
        &dlogits,
    )?;
    grads.embedding.add_assign(&demb)?;
    let (mut dx, dg, db) = layer_norm_backward(&tape.decoder_norm, &params.decoder_norm, &dh);
    grads.decoder_norm.gain = dg;
    grads.decoder_norm.bias = db;

    let mut dmemory = tape
        .memory
        .as_ref()
        .map(|m| Tensor::zeros(m.shape().to_vec()));
    for ((layer, t), g) in params
        .decoder
        .iter()
        .zip(&tape.decoder)
        .zip(&mut grads.decoder)
        .rev()
    {
        let (dn, dw1, dw2) = feed_forward_backward(&t.normed_ff, &t.ff, &layer.ff, &dx)?;
        g.ff.w1 = dw1;
        g.ff.w2 = dw2;
        let (dres, dg, db) = layer_norm_backward(&t.norm_ff, &layer.norm_ff, &dn);
        g.norm_ff.gain = dg;
        g.norm_ff.bias = db;
        dx.add_assign(&dres)?;

        if let (Some(block), Some(ct), Some(gc), Some(dm), Some(mem)) = (
            &layer.cross,
            &t.cross,
            &mut g.cross,
            &mut dmemory,
            &tape.memory,
        ) {
            let ag = attention_backward(&ct.attn, &ct.normed, mem, &block.attn, &dx)?;
            dm.add_assign(&ag.memory)?;
            for (slot, grad) in gc
                .attn
                .projections_mut()
                .into_iter()
                .zip([ag.p_q, ag.p_k, ag.p_v, ag.p_o])
            {
                *slot = grad;
            }
            let (dres, dg, db) = layer_norm_backward(&ct.norm, &block.norm, &ag.x);
            gc.norm.gain = dg;
            gc.norm.bias = db;
            dx.add_assign(&dres)?;
        }

        let ag = attention_backward(
            &t.self_attn,
            &t.normed_self,
            &t.normed_self,
            &layer.self_attn,
            &dx,
        )?;
        let mut dn = ag.x;
        dn.add_assign(&ag.memory)?;
        for (slot, grad) in g
            .self_attn
            .projections_mut()
            .into_iter()
            .zip([ag.p_q, ag.p_k, ag.p_v, ag.p_o])
        {
            *slot = grad;
        }
        let (dres, dg, db) = layer_norm_backward(&t.norm_self, &layer.norm_self, &dn);
        g.norm_self.gain = dg;
        g.norm_self.bias = db;
        dx.add_assign(&dres)?;
    }
    embed_backward(
        &dx,
        &batch.inputs,
        &mut grads.embedding,
        &mut grads.positions,
    );

    if let (Some(dm), Some(src), Some(norm), Some(cache)) = (
        dmemory,
        &batch.source,
        &params.encoder_norm,
        &tape.encoder_norm,
    ) {
        let (mut dx, dg, db) = layer_norm_backward(cache, norm, &dm);
        if let Some(gn) = &mut grads.encoder_norm {
            gn.gain = dg;
            gn.bias = db;
        }
        for ((layer, t), g) in params
            .encoder
            .iter()
            .zip(&tape.encoder)
            .zip(&mut grads.encoder)
            .rev()
        {
            let (dn, dw1, dw2) = feed_forward_backward(&t.normed_ff, &t.ff, &layer.ff, &dx)?;
            g.ff.w1 = dw1;
            g.ff.w2 = dw2;
            let (dres, dg, db) = layer_norm_backward(&t.norm_ff, &layer.norm_ff, &dn);
            g.norm_ff.gain = dg;
            g.norm_ff.bias = db;
            dx.add_assign(&dres)?;

            let ag = attention_backward(&t.attn, &t.normed_attn, &t.normed_attn, &layer.attn, &dx)?;
            let mut dn = ag.x;
            dn.add_assign(&ag.memory)?;
            for (slot, grad) in g
                .attn
                .projections_mut()
                .into_iter()
                .zip([ag.p_q, ag.p_k, ag.p_v, ag.p_o])
            {
                *slot = grad;
            }
            let (dres, dg, db) = layer_norm_backward(&t.norm_attn, &layer.norm_attn, &dn);
            g.norm_attn.gain = dg;
            g.norm_attn.bias = db;
            dx.add_assign(&dres)?;
        }
        embed_backward(&dx, src, &mut grads.embedding, &mut grads.positions);
    }
    grads.check_finite("gradient of")?;
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionKind;
    use crate::model::config::{ModelMode, SiteKinds};

    fn config(mode: ModelMode) -> ModelConfig {
        ModelConfig {
            mode,
            layers: 1,
            d_model: 6,
            d_ff: 8,
            heads: 2,
            d_k: 3,
            d_v: 3,
            vocab_size: 5,
            max_len: 6,
            attention: SiteKinds::uniform(AttentionKind::MultiQuery),
            local_window: None,
            seed: 11,
        }
    }

    fn batch(mode: ModelMode) -> Batch {
        Batch {
            source: (mode == ModelMode::EncoderDecoder).then(|| vec![vec![2, 3, 4], vec![4, 4, 2]]),
            inputs: vec![vec![0, 2, 3], vec![0, 4, 4]],
            targets: vec![vec![2, 3, 4], vec![4, 4, 2]],
            loss_start: 0,
        }
    }

    #[test]
    fn untrained_loss_is_near_uniform() {
        for mode in [ModelMode::EncoderDecoder, ModelMode::DecoderOnly] {
            let params = ModelParams::init(&config(mode)).unwrap();
            let out = forward(&params, &batch(mode)).unwrap();
            assert_eq!(out.logits.shape(), &[2, 3, 5]);
            assert!((out.loss - (5f64).ln()).abs() < 1.0, "{}", out.loss);
        }
    }

    #[test]
    fn rejects_inconsistent_batches() {
        let params = ModelParams::init(&config(ModelMode::EncoderDecoder)).unwrap();
        let mut b = batch(ModelMode::EncoderDecoder);
        b.source = None;
        assert!(matches!(forward(&params, &b), Err(Error::Input(_))));
        let mut b = batch(ModelMode::EncoderDecoder);
        b.loss_start = 3;
        assert!(matches!(forward(&params, &b), Err(Error::Input(_))));
        let mut b = batch(ModelMode::EncoderDecoder);
        b.targets[0][0] = 9;
        assert!(matches!(forward(&params, &b), Err(Error::Input(_))));
    }

    #[test]
    fn decoder_is_causal() {
        let params = ModelParams::init(&config(ModelMode::DecoderOnly)).unwrap();
        let a = batch(ModelMode::DecoderOnly);
        let mut b = a.clone();
        b.inputs[0][2] = 1;
        let (la, lb) = (
            forward(&params, &a).unwrap().logits,
            forward(&params, &b).unwrap().logits,
        );
        let first_two = |t: &Tensor| t.slice_axis(1, 0..2).unwrap();
        assert_eq!(first_two(&la), first_two(&lb));
    }
}
