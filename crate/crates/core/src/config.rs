use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderStyle {
    /// self-attention → cross-attention → FFN
    Vanilla,
    /// self-attention → light FFN → cross-attention → light FFN, both light
    /// FFN executions reading one weight group
    Interleaved,
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub enc_ffn_dim: usize,
    pub dec_ffn_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub decoder_style: DecoderStyle,
}

impl ModelConfig {
    /// Standard encoder-decoder with `d_ffn = 4d` on both sides.
    pub fn vanilla(encoder_layers: usize, decoder_layers: usize, model_dim: usize) -> Self {
        Self {
            encoder_layers,
            decoder_layers,
            model_dim,
            heads: 8,
            enc_ffn_dim: 4 * model_dim,
            dec_ffn_dim: 4 * model_dim,
            vocab_size: 32_000,
            max_len: 256,
            decoder_style: DecoderStyle::Vanilla,
        }
    }

    /// 12-layer encoder, 2-layer interleaved decoder with `d_decffn = d/4`.
    pub fn edgeformer(model_dim: usize) -> Self {
        Self {
            dec_ffn_dim: (model_dim / 4).max(1),
            decoder_style: DecoderStyle::Interleaved,
            ..Self::vanilla(12, 2, model_dim)
        }
    }

    /// The desk-scale model used throughout the tests: 4+2 layers, d=32,
    /// 4 heads, vocabulary of 16.
    pub fn mini() -> Self {
        Self {
            encoder_layers: 4,
            decoder_layers: 2,
            model_dim: 32,
            heads: 4,
            enc_ffn_dim: 128,
            dec_ffn_dim: 8,
            vocab_size: 16,
            max_len: 32,
            decoder_style: DecoderStyle::Interleaved,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("model_dim", self.model_dim),
            ("heads", self.heads),
            ("enc_ffn_dim", self.enc_ffn_dim),
            ("dec_ffn_dim", self.dec_ffn_dim),
            ("max_len", self.max_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.decoder_style == DecoderStyle::Interleaved && self.dec_ffn_dim >= self.model_dim {
            return Err(Error::Config(format!(
                "interleaved decoder needs dec_ffn_dim < model_dim ({} >= {})",
                self.dec_ffn_dim, self.model_dim
            )));
        }
        if self.vocab_size < 3 {
            return Err(Error::Config(
                "vocab_size must be at least 3 (pad, bos, eos)".into(),
            ));
        }
        Ok(())
    }

    pub fn specials(&self) -> Specials {
        Specials::for_vocab(self.vocab_size)
    }
}

/// Reserved token ids of a joint vocabulary: padding is 0, BOS and EOS are
/// the two highest ids. Everything in between is ordinary content (or task
/// sentinels, allocated just below BOS).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Specials {
    pub pad: usize,
    pub bos: usize,
    pub eos: usize,
}

impl Specials {
    pub fn for_vocab(vocab: usize) -> Self {
        Self {
            pad: 0,
            bos: vocab - 2,
            eos: vocab - 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::vanilla(6, 6, 512).validate().unwrap();
        ModelConfig::edgeformer(512).validate().unwrap();
        ModelConfig::mini().validate().unwrap();
        assert_eq!(ModelConfig::edgeformer(512).dec_ffn_dim, 128);
    }

    #[test]
    fn rejects_bad_heads_and_wide_light_ffn() {
        let mut c = ModelConfig::mini();
        c.heads = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::mini();
        c.dec_ffn_dim = 32;
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut v = serde_json::to_value(ModelConfig::mini()).unwrap();
        v["bogus"] = serde_json::json!(1);
        assert!(serde_json::from_value::<ModelConfig>(v).is_err());
    }
}
