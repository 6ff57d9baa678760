use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::attention::{AttentionKind, AttentionWeights};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNorm {
    fn new(d: usize) -> Self {
        LayerNorm {
            gain: Tensor::full([d], 1.0),
            bias: Tensor::zeros([d]),
        }
    }
}

/// `relu(x · W1) · W2` with `W1: [d, d_ff]`, `W2: [d_ff, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    pub w1: Tensor,
    pub w2: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub norm_attn: LayerNorm,
    pub attn: AttentionWeights,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossBlock {
    pub norm: LayerNorm,
    pub attn: AttentionWeights,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer {
    pub norm_self: LayerNorm,
    pub self_attn: AttentionWeights,
    pub cross: Option<CrossBlock>,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

/// Pre-norm transformer parameters. The token embedding doubles as the
/// output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub embedding: Tensor,
    pub positions: Tensor,
    pub encoder: Vec<EncoderLayer>,
    pub encoder_norm: Option<LayerNorm>,
    pub decoder: Vec<DecoderLayer>,
    pub decoder_norm: LayerNorm,
}

impl ModelParams {
    /// Scaled-uniform initialization seeded from `config.seed`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, f) = (config.d_model, config.d_ff);
        let dims = config.dims();
        let scale = 1.0 / (d as f64).sqrt();
        let embedding = Tensor::uniform([config.vocab_size, d], scale, &mut rng);
        let positions = Tensor::uniform([config.max_len, d], scale, &mut rng);
        let ff = |rng: &mut ChaCha8Rng| FeedForward {
            w1: Tensor::uniform([d, f], scale, rng),
            w2: Tensor::uniform([f, d], 1.0 / (f as f64).sqrt(), rng),
        };
        let encoder = if config.has_encoder() {
            (0..config.layers)
                .map(|_| EncoderLayer {
                    norm_attn: LayerNorm::new(d),
                    attn: AttentionWeights::init(config.attention.encoder_self, dims, &mut rng),
                    norm_ff: LayerNorm::new(d),
                    ff: ff(&mut rng),
                })
                .collect()
        } else {
            Vec::new()
        };
        let decoder = (0..config.layers)
            .map(|_| DecoderLayer {
                norm_self: LayerNorm::new(d),
                self_attn: AttentionWeights::init(config.attention.decoder_self, dims, &mut rng),
                cross: config.has_encoder().then(|| CrossBlock {
                    norm: LayerNorm::new(d),
                    attn: AttentionWeights::init(config.attention.cross, dims, &mut rng),
                }),
                norm_ff: LayerNorm::new(d),
                ff: ff(&mut rng),
            })
            .collect();
        Ok(ModelParams {
            config: config.clone(),
            embedding,
            positions,
            encoder,
            encoder_norm: config.has_encoder().then(|| LayerNorm::new(d)),
            decoder,
            decoder_norm: LayerNorm::new(d),
        })
    }

    /// Same structure with every tensor zeroed; used to hold gradients.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(|_, t| t.data_mut().fill(0.0));
        z
    }

    /// Every parameter tensor with a stable dotted name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("embedding".into(), &self.embedding),
            ("positions".into(), &self.positions),
        ];
        fn norm<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: String, n: &'a LayerNorm) {
            out.push((format!("{prefix}.gain"), &n.gain));
            out.push((format!("{prefix}.bias"), &n.bias));
        }
        fn attn<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: String, w: &'a AttentionWeights) {
            for (name, t) in ["p_q", "p_k", "p_v", "p_o"]
                .into_iter()
                .zip(w.projections())
            {
                out.push((format!("{prefix}.{name}"), t));
            }
        }
        for (i, layer) in self.encoder.iter().enumerate() {
            norm(&mut out, format!("encoder.{i}.norm_attn"), &layer.norm_attn);
            attn(&mut out, format!("encoder.{i}.attn"), &layer.attn);
            norm(&mut out, format!("encoder.{i}.norm_ff"), &layer.norm_ff);
            out.push((format!("encoder.{i}.ff.w1"), &layer.ff.w1));
            out.push((format!("encoder.{i}.ff.w2"), &layer.ff.w2));
        }
        if let Some(n) = &self.encoder_norm {
            norm(&mut out, "encoder_norm".into(), n);
        }
        for (i, layer) in self.decoder.iter().enumerate() {
            norm(&mut out, format!("decoder.{i}.norm_self"), &layer.norm_self);
            attn(&mut out, format!("decoder.{i}.self_attn"), &layer.self_attn);
            if let Some(cross) = &layer.cross {
                norm(&mut out, format!("decoder.{i}.cross.norm"), &cross.norm);
                attn(&mut out, format!("decoder.{i}.cross.attn"), &cross.attn);
            }
            norm(&mut out, format!("decoder.{i}.norm_ff"), &layer.norm_ff);
            out.push((format!("decoder.{i}.ff.w1"), &layer.ff.w1));
            out.push((format!("decoder.{i}.ff.w2"), &layer.ff.w2));
        }
        norm(&mut out, "decoder_norm".into(), &self.decoder_norm);
        out
    }

    /// Visits tensors in the order of [`ModelParams::tensors`]. The closure
    /// must not change shapes.
    pub fn for_each_mut(&mut self, mut f: impl FnMut(usize, &mut Tensor)) {
        let mut slots: Vec<&mut Tensor> = vec![&mut self.embedding, &mut self.positions];
        for layer in &mut self.encoder {
            slots.extend([&mut layer.norm_attn.gain, &mut layer.norm_attn.bias]);
            slots.extend(layer.attn.projections_mut());
            slots.extend([&mut layer.norm_ff.gain, &mut layer.norm_ff.bias]);
            slots.extend([&mut layer.ff.w1, &mut layer.ff.w2]);
        }
        if let Some(n) = &mut self.encoder_norm {
            slots.extend([&mut n.gain, &mut n.bias]);
        }
        for layer in &mut self.decoder {
            slots.extend([&mut layer.norm_self.gain, &mut layer.norm_self.bias]);
            slots.extend(layer.self_attn.projections_mut());
            if let Some(cross) = &mut layer.cross {
                slots.extend([&mut cross.norm.gain, &mut cross.norm.bias]);
                slots.extend(cross.attn.projections_mut());
            }
            slots.extend([&mut layer.norm_ff.gain, &mut layer.norm_ff.bias]);
            slots.extend([&mut layer.ff.w1, &mut layer.ff.w2]);
        }
        slots.extend([&mut self.decoder_norm.gain, &mut self.decoder_norm.bias]);
        for (i, t) in slots.into_iter().enumerate() {
            f(i, t);
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Names the first tensor holding a NaN or infinity.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.tensors().into_iter().find(|(_, t)| !t.is_finite()) {
            Some((name, _)) => Err(Error::Numeric {
                tensor: format!("{what} {name}"),
            }),
            None => Ok(()),
        }
    }

    /// Attention kinds of every attention layer, for diagnostics.
    pub fn attention_kinds(&self) -> Vec<AttentionKind> {
        let mut kinds: Vec<AttentionKind> = self.encoder.iter().map(|l| l.attn.kind()).collect();
        for layer in &self.decoder {
            kinds.push(layer.self_attn.kind());
            if let Some(c) = &layer.cross {
                kinds.push(c.attn.kind());
            }
        }
        kinds
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::{ModelMode, SiteKinds};

    fn config(mode: ModelMode) -> ModelConfig {
        ModelConfig {
            mode,
            layers: 2,
            d_model: 8,
            d_ff: 12,
            heads: 2,
            d_k: 4,
            d_v: 3,
            vocab_size: 7,
            max_len: 5,
            attention: SiteKinds {
                encoder_self: AttentionKind::MultiHead,
                decoder_self: AttentionKind::MultiQuery,
                cross: AttentionKind::MultiQuery,
            },
            local_window: None,
            seed: 3,
        }
    }

    #[test]
    fn counts_agree_with_config() {
        for mode in [ModelMode::EncoderDecoder, ModelMode::DecoderOnly] {
            let cfg = config(mode);
            let params = ModelParams::init(&cfg).unwrap();
            assert_eq!(params.param_count(), cfg.total_params());
        }
    }

    #[test]
    fn for_each_mut_visits_tensors_in_order() {
        let mut params = ModelParams::init(&config(ModelMode::EncoderDecoder)).unwrap();
        let names: Vec<(String, Vec<usize>)> = params
            .tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        let mut seen = Vec::new();
        params.for_each_mut(|i, t| seen.push((i, t.shape().to_vec())));
        assert_eq!(seen.len(), names.len());
        for ((i, shape), (_, expected)) in seen.iter().zip(&names) {
            assert_eq!(shape, expected, "tensor {i}");
        }
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = config(ModelMode::DecoderOnly);
        assert_eq!(
            ModelParams::init(&cfg).unwrap(),
            ModelParams::init(&cfg).unwrap()
        );
    }
}
