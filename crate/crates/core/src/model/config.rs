use serde::{Deserialize, Serialize};

use crate::attention::{AttentionDims, AttentionKind};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelMode {
    EncoderDecoder,
    DecoderOnly,
}

/// Attention kind at each of the three sites. Decoder-only models ignore
/// `encoder_self` and `cross`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteKinds {
    pub encoder_self: AttentionKind,
    pub decoder_self: AttentionKind,
    pub cross: AttentionKind,
}

impl SiteKinds {
    pub fn uniform(kind: AttentionKind) -> Self {
        SiteKinds {
            encoder_self: kind,
            decoder_self: kind,
            cross: kind,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub mode: ModelMode,
    /// Layers per stack (an encoder-decoder model has this many of each).
    pub layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub attention: SiteKinds,
    /// Restricts decoder self-attention to this many most recent positions.
    #[serde(default)]
    pub local_window: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("layers", self.layers),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("heads", self.heads),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.local_window == Some(0) {
            return Err(Error::Config("local_window must be at least 1".into()));
        }
        Ok(())
    }

    pub fn dims(&self) -> AttentionDims {
        AttentionDims {
            heads: self.heads,
            model_dim: self.d_model,
            key_dim: self.d_k,
            value_dim: self.d_v,
        }
    }

    /// Copy of this config with every attention site set to `kind`.
    pub fn with_kind(&self, kind: AttentionKind) -> Self {
        ModelConfig {
            attention: SiteKinds::uniform(kind),
            ..self.clone()
        }
    }

    pub fn has_encoder(&self) -> bool {
        self.mode == ModelMode::EncoderDecoder
    }

    /// Attention projection parameters summed over every attention layer.
    pub fn attention_params(&self) -> usize {
        let dims = self.dims();
        let per = |kind| dims.param_count(kind);
        let sites = match self.mode {
            ModelMode::EncoderDecoder => {
                per(self.attention.encoder_self)
                    + per(self.attention.decoder_self)
                    + per(self.attention.cross)
            }
            ModelMode::DecoderOnly => per(self.attention.decoder_self),
        };
        self.layers * sites
    }

    pub fn feed_forward_layers(&self) -> usize {
        match self.mode {
            ModelMode::EncoderDecoder => 2 * self.layers,
            ModelMode::DecoderOnly => self.layers,
        }
    }

    fn layer_norms(&self) -> usize {
        match self.mode {
            // two per encoder layer, three per decoder layer, one final norm per stack
            ModelMode::EncoderDecoder => 5 * self.layers + 2,
            ModelMode::DecoderOnly => 2 * self.layers + 1,
        }
    }

    /// Every parameter except token and positional embeddings.
    pub fn non_embedding_params(&self) -> usize {
        self.attention_params()
            + self.feed_forward_layers() * 2 * self.d_model * self.d_ff
            + self.layer_norms() * 2 * self.d_model
    }

    /// All parameters. The token embedding is shared with the output layer.
    pub fn total_params(&self) -> usize {
        self.non_embedding_params() + (self.vocab_size + self.max_len) * self.d_model
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeStrategy {
    Greedy,
    Beam,
}

/// Cache storage used while decoding. `Padded` preallocates the full
/// decode length, or a ring of the local window when one is configured.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheMode {
    Growing,
    Padded,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub strategy: DecodeStrategy,
    pub beam_size: usize,
    /// Length-penalty exponent; hypotheses rank by `log p / ((5 + len) / 6)^alpha`.
    pub alpha: f64,
    pub max_steps: usize,
    #[serde(default)]
    pub eos: Option<u32>,
    pub cache: CacheMode,
}

impl DecodeConfig {
    pub fn greedy(max_steps: usize) -> Self {
        DecodeConfig {
            strategy: DecodeStrategy::Greedy,
            beam_size: 1,
            alpha: 0.0,
            max_steps,
            eos: None,
            cache: CacheMode::Growing,
        }
    }

    pub fn beam(beam_size: usize, alpha: f64, max_steps: usize) -> Self {
        DecodeConfig {
            strategy: DecodeStrategy::Beam,
            beam_size,
            alpha,
            max_steps,
            eos: None,
            cache: CacheMode::Growing,
        }
    }

    pub fn with_cache(mut self, cache: CacheMode) -> Self {
        self.cache = cache;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Config("beam_size must be at least 1".into()));
        }
        if self.strategy == DecodeStrategy::Greedy && self.beam_size != 1 {
            return Err(Error::Config("greedy decoding uses beam_size 1".into()));
        }
        if !self.alpha.is_finite() {
            return Err(Error::Config("alpha must be finite".into()));
        }
        Ok(())
    }

    /// `((5 + len) / 6)^alpha`.
    pub fn length_penalty(&self, len: usize) -> f64 {
        ((5.0 + len as f64) / 6.0).powf(self.alpha)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_unknown_keys() {
        let json = r#"{"mode":"decoder_only","layers":1,"d_model":4,"d_ff":8,"heads":2,"d_k":2,
            "d_v":2,"vocab_size":5,"max_len":8,"attention":{"encoder_self":"multi_head",
            "decoder_self":"multi_query","cross":"multi_head"},"dropout":0.1}"#;
        let err = serde_json::from_str::<ModelConfig>(json).unwrap_err();
        assert!(err.to_string().contains("dropout"));
    }

    #[test]
    fn length_penalty_at_zero_alpha_is_one() {
        let cfg = DecodeConfig::beam(4, 0.0, 10);
        assert_eq!(cfg.length_penalty(7), 1.0);
        let cfg = DecodeConfig::beam(4, 0.6, 10);
        assert!((cfg.length_penalty(1) - 1.0).abs() < 1e-15);
        assert!(cfg.length_penalty(10) > 1.0);
    }
}
