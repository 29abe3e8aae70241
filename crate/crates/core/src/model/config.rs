use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Feed-forward block variant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedForward {
    /// `relu(x Wi) Wo`, as in the original T5.
    #[default]
    Relu,
    /// `(gelu(x Wi) * (x Wi_linear)) Wo`, as in T5 v1.1 / FLAN-T5.
    GatedGelu,
}

/// Architecture hyperparameters of a T5-style encoder-decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    /// Per-head key/value width. `n_heads * d_kv` need not equal `d_model`.
    pub d_kv: usize,
    pub d_ff: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub vocab_size: usize,
    #[serde(default = "default_buckets")]
    pub rel_pos_buckets: usize,
    #[serde(default = "default_max_distance")]
    pub rel_pos_max_distance: usize,
    #[serde(default = "default_true")]
    pub tie_embeddings: bool,
    #[serde(default)]
    pub feed_forward: FeedForward,
    #[serde(default = "default_eps")]
    pub norm_eps: f64,
    #[serde(default = "default_max_input")]
    pub max_input_len: usize,
}

fn default_buckets() -> usize {
    32
}
fn default_max_distance() -> usize {
    128
}
fn default_true() -> bool {
    true
}
fn default_eps() -> f64 {
    1e-6
}
fn default_max_input() -> usize {
    1024
}

impl ModelConfig {
    /// Small uniform-depth config with `d_kv = d_model / n_heads`.
    pub fn toy(d_model: usize, n_heads: usize, d_ff: usize, layers: usize, vocab_size: usize) -> Self {
        ModelConfig {
            d_model,
            n_heads,
            d_kv: (d_model / n_heads.max(1)).max(1),
            d_ff,
            n_enc_layers: layers,
            n_dec_layers: layers,
            vocab_size,
            rel_pos_buckets: 32,
            rel_pos_max_distance: 128,
            tie_embeddings: true,
            feed_forward: FeedForward::Relu,
            norm_eps: default_eps(),
            max_input_len: default_max_input(),
        }
    }

    fn flan_t5(d_model: usize, n_heads: usize, d_ff: usize, layers: usize) -> Self {
        ModelConfig {
            d_model,
            n_heads,
            d_kv: 64,
            d_ff,
            n_enc_layers: layers,
            n_dec_layers: layers,
            vocab_size: 32128,
            rel_pos_buckets: 32,
            rel_pos_max_distance: 128,
            tie_embeddings: false,
            feed_forward: FeedForward::GatedGelu,
            norm_eps: default_eps(),
            max_input_len: default_max_input(),
        }
    }

    /// Published FLAN-T5-small architecture.
    pub fn flan_t5_small() -> Self {
        Self::flan_t5(512, 6, 1024, 8)
    }

    pub fn flan_t5_base() -> Self {
        Self::flan_t5(768, 12, 2048, 12)
    }

    pub fn flan_t5_large() -> Self {
        Self::flan_t5(1024, 16, 2816, 24)
    }

    pub fn inner_dim(&self) -> usize {
        self.n_heads * self.d_kv
    }

    pub fn validate(&self) -> Result<()> {
        let positive: [(&'static str, usize); 9] = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_kv", self.d_kv),
            ("d_ff", self.d_ff),
            ("n_enc_layers", self.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("rel_pos_max_distance", self.rel_pos_max_distance),
            ("max_input_len", self.max_input_len),
            ("vocab_size", self.vocab_size),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::Config {
                    field,
                    reason: "must be at least 1".into(),
                });
            }
        }
        if self.vocab_size < 4 {
            return Err(Error::Config {
                field: "vocab_size",
                reason: format!("{} < 4 (pad, eos, bos and one symbol)", self.vocab_size),
            });
        }
        if self.rel_pos_buckets < 2 {
            return Err(Error::Config {
                field: "rel_pos_buckets",
                reason: "must be at least 2".into(),
            });
        }
        if !(self.norm_eps.is_finite() && self.norm_eps >= 0.0) {
            return Err(Error::Config {
                field: "norm_eps",
                reason: "must be finite and non-negative".into(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_layer_config_names_the_field() {
        let mut c = ModelConfig::toy(8, 2, 16, 1, 16);
        c.n_dec_layers = 0;
        match c.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "n_dec_layers"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn tiny_vocab_rejected() {
        let c = ModelConfig::toy(8, 2, 16, 1, 3);
        assert!(matches!(c.validate(), Err(Error::Config { field: "vocab_size", .. })));
    }

    #[test]
    fn presets_are_valid() {
        for c in [
            ModelConfig::flan_t5_small(),
            ModelConfig::flan_t5_base(),
            ModelConfig::flan_t5_large(),
        ] {
            c.validate().unwrap();
        }
    }

    #[test]
    fn toml_defaults_fill_optional_fields() {
        let c: ModelConfig = toml::from_str(
            "d_model = 16\nn_heads = 2\nd_kv = 8\nd_ff = 32\nn_enc_layers = 2\nn_dec_layers = 2\nvocab_size = 20\n",
        )
        .unwrap();
        assert_eq!(c.rel_pos_buckets, 32);
        assert_eq!(c.max_input_len, 1024);
        assert!(c.tie_embeddings);
        assert_eq!(c.feed_forward, FeedForward::Relu);
    }
}
