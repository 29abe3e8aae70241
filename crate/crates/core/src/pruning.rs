//! Whole-layer removal from either stack.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::params::{DecoderLayer, EncoderLayer, ParamTree};
use crate::model::ModelWeights;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which layers survive when a stack keeps `k` of `L`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Spread evenly, always keeping the first and (for `k >= 2`) the last.
    #[default]
    EvenlySpaced,
    FirstK,
    LastK,
}

/// Numbers of encoder and decoder layers to keep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PruneSpec {
    pub enc_keep: usize,
    pub dec_keep: usize,
    #[serde(default)]
    pub strategy: Strategy,
}

impl PruneSpec {
    pub fn new(enc_keep: usize, dec_keep: usize) -> Self {
        PruneSpec {
            enc_keep,
            dec_keep,
            strategy: Strategy::EvenlySpaced,
        }
    }

    pub fn is_identity_for(&self, n_enc: usize, n_dec: usize) -> bool {
        self.enc_keep == n_enc && self.dec_keep == n_dec
    }
}

/// Retained layer indices, strictly increasing.
pub fn select_layers(total: usize, keep: usize, strategy: Strategy) -> Result<Vec<usize>> {
    if keep == 0 || keep > total {
        return Err(Error::InvalidArgument(format!(
            "cannot keep {keep} of {total} layers"
        )));
    }
    Ok(match strategy {
        Strategy::FirstK => (0..keep).collect(),
        Strategy::LastK => (total - keep..total).collect(),
        Strategy::EvenlySpaced if keep == 1 => vec![0],
        Strategy::EvenlySpaced => {
            // round_half_up(i (L-1) / (k-1)) in integers
            let den = 2 * (keep - 1);
            (0..keep)
                .map(|i| (2 * i * (total - 1) + (keep - 1)) / den)
                .collect()
        }
    })
}

fn take_layers<L: Clone>(layers: &[L], keep: &[usize]) -> Vec<L> {
    keep.iter().map(|&i| layers[i].clone()).collect()
}

/// Removes layers according to `spec`. Retained tensors are copied
/// verbatim; when layer 0 is dropped its relative-position table moves to
/// the new first layer.
pub fn prune<T: Scalar>(weights: &ModelWeights<T>, spec: &PruneSpec) -> Result<ModelWeights<T>> {
    let cfg = &weights.config;
    let enc_idx = select_layers(cfg.n_enc_layers, spec.enc_keep, spec.strategy)?;
    let dec_idx = select_layers(cfg.n_dec_layers, spec.dec_keep, spec.strategy)?;
    let p = &weights.params;

    let mut encoder: Vec<EncoderLayer<Tensor<T>>> = take_layers(&p.encoder, &enc_idx);
    let enc_table = p.encoder[0].self_attn.rel_bias.clone();
    for l in encoder.iter_mut() {
        l.self_attn.rel_bias = None;
    }
    encoder[0].self_attn.rel_bias = enc_table;

    let mut decoder: Vec<DecoderLayer<Tensor<T>>> = take_layers(&p.decoder, &dec_idx);
    let dec_table = p.decoder[0].self_attn.rel_bias.clone();
    for l in decoder.iter_mut() {
        l.self_attn.rel_bias = None;
    }
    decoder[0].self_attn.rel_bias = dec_table;

    let mut config = cfg.clone();
    config.n_enc_layers = spec.enc_keep;
    config.n_dec_layers = spec.dec_keep;
    Ok(ModelWeights {
        config,
        params: ParamTree {
            embedding: p.embedding.clone(),
            encoder,
            enc_final_norm: p.enc_final_norm.clone(),
            decoder,
            dec_final_norm: p.dec_final_norm.clone(),
            lm_head: p.lm_head.clone(),
        },
    })
}

/// Baseline, decoder-only, encoder-only, then symmetric specs:
/// `1 + 3 (n - 1)` entries.
pub fn enumerate_grid(n_layers: usize) -> Result<Vec<PruneSpec>> {
    if n_layers < 2 {
        return Err(Error::InvalidArgument(format!(
            "grid needs at least 2 layers per stack, got {n_layers}"
        )));
    }
    let n = n_layers;
    let mut out = vec![PruneSpec::new(n, n)];
    out.extend((1..n).rev().map(|k| PruneSpec::new(n, k)));
    out.extend((1..n).rev().map(|k| PruneSpec::new(k, n)));
    out.extend((1..n).rev().map(|k| PruneSpec::new(k, k)));
    Ok(out)
}
