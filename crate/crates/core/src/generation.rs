//! Batched greedy decoding with batch-level EOS completion.
//!
//! A batch keeps stepping until every sequence has emitted EOS or the step
//! cap is hit. Finished sequences stay in the batch, are fed pad, and their
//! outputs are overwritten with pad, so a batch costs as much as its longest
//! member.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{decode_full, decode_step, encode, KvCache, ModelWeights};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    #[default]
    Greedy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub max_input_len: usize,
    pub max_new_tokens: usize,
    /// EOS is masked out for the first `min_new_tokens` steps.
    #[serde(default)]
    pub min_new_tokens: usize,
    pub eos_id: u32,
    pub pad_id: u32,
    pub bos_id: u32,
    #[serde(default)]
    pub decode_mode: DecodeMode,
    /// Keep every step's logits in the result.
    #[serde(default)]
    pub record_logits: bool,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            max_input_len: 1024,
            max_new_tokens: 256,
            min_new_tokens: 0,
            eos_id: crate::corpus::EOS,
            pad_id: crate::corpus::PAD,
            bos_id: crate::corpus::BOS,
            decode_mode: DecodeMode::Greedy,
            record_logits: false,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(Error::Config {
                field: "max_new_tokens",
                reason: "must be at least 1".into(),
            });
        }
        if self.eos_id == self.pad_id {
            return Err(Error::Config {
                field: "eos_id",
                reason: "must differ from pad_id".into(),
            });
        }
        Ok(())
    }
}

/// Timings of one generate call, in microseconds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub encoder_us: f64,
    /// One entry per decoder step actually run.
    pub decoder_us: Vec<f64>,
    /// Tokens emitted per sequence up to and including EOS.
    pub genl: Vec<usize>,
}

impl GenerationTrace {
    pub fn steps(&self) -> usize {
        self.decoder_us.len()
    }

    pub fn decoder_total_us(&self) -> f64 {
        self.decoder_us.iter().sum()
    }

    pub fn total_us(&self) -> f64 {
        self.encoder_us + self.decoder_total_us()
    }
}

#[derive(Clone, Debug)]
pub struct Generation<T> {
    /// `[batch][steps]`, pad after each sequence's EOS.
    pub tokens: Vec<Vec<u32>>,
    pub trace: GenerationTrace,
    /// Per-step `[batch, vocab]` logits when `record_logits` is set.
    pub logits: Vec<Tensor<T>>,
}

impl<T> Generation<T> {
    /// Emitted tokens before EOS, per sequence.
    pub fn summaries(&self, eos: u32) -> Vec<Vec<u32>> {
        self.tokens
            .iter()
            .map(|row| row.iter().take_while(|&&t| t != eos).copied().collect())
            .collect()
    }
}

fn argmax<T: Scalar>(row: &[T], skip: Option<usize>) -> usize {
    let mut best = usize::MAX;
    for (i, &v) in row.iter().enumerate() {
        if Some(i) == skip {
            continue;
        }
        if best == usize::MAX || v > row[best] {
            best = i;
        }
    }
    best
}

enum Path {
    Cached,
    Uncached,
}

fn run<T: Scalar>(
    w: &ModelWeights<T>,
    inputs: &[Vec<u32>],
    cfg: &GenerationConfig,
    forced: Option<&[usize]>,
    path: Path,
) -> Result<Generation<T>> {
    cfg.validate()?;
    if inputs.is_empty() {
        return Err(Error::Empty("generation batch"));
    }
    if let Some(len) = inputs.iter().map(Vec::len).find(|&l| l > cfg.max_input_len) {
        return Err(Error::InvalidArgument(format!(
            "input of {len} tokens exceeds max_input_len {}",
            cfg.max_input_len
        )));
    }
    if let Some(f) = forced {
        if f.len() != inputs.len() || f.iter().any(|&l| l == 0) {
            return Err(Error::InvalidArgument("forced lengths must be positive, one per input".into()));
        }
    }
    let batch = inputs.len();
    let vocab = w.config.vocab_size;
    let eos = cfg.eos_id as usize;

    let t0 = Instant::now();
    let enc = encode(w, inputs, cfg.pad_id)?;
    let encoder_us = t0.elapsed().as_secs_f64() * 1e6;

    let mut cache = KvCache::new(&w.config, &enc);
    let mut prefixes: Vec<Vec<u32>> = vec![Vec::new(); batch];
    let mut next = vec![cfg.bos_id; batch];
    let mut tokens: Vec<Vec<u32>> = vec![Vec::new(); batch];
    let mut genl: Vec<Option<usize>> = vec![None; batch];
    let mut decoder_us = Vec::new();
    let mut logits_log = Vec::new();

    for step in 1..=cfg.max_new_tokens {
        let t = Instant::now();
        let logits = match path {
            Path::Cached => decode_step(w, &enc, &mut cache, &next)?,
            Path::Uncached => {
                for (p, &tok) in prefixes.iter_mut().zip(&next) {
                    p.push(tok);
                }
                let full = decode_full(w, &enc, &prefixes)?;
                let len = step;
                let mut last = Vec::with_capacity(batch * vocab);
                for b in 0..batch {
                    last.extend_from_slice(&full.data()[(b * len + len - 1) * vocab..(b * len + len) * vocab]);
                }
                Tensor::new(vec![batch, vocab], last)?
            }
        };
        for b in 0..batch {
            let tok = if genl[b].is_some() {
                cfg.pad_id
            } else {
                let row = &logits.data()[b * vocab..(b + 1) * vocab];
                let id = match forced {
                    Some(f) if f[b] == step => eos,
                    Some(_) => argmax(row, Some(eos)),
                    None if step <= cfg.min_new_tokens => argmax(row, Some(eos)),
                    None => argmax(row, None),
                };
                if id == eos {
                    genl[b] = Some(step);
                }
                id as u32
            };
            tokens[b].push(tok);
            next[b] = tok;
        }
        decoder_us.push(t.elapsed().as_secs_f64() * 1e6);
        if cfg.record_logits {
            logits_log.push(logits);
        }
        if genl.iter().all(Option::is_some) {
            break;
        }
    }
    let steps = decoder_us.len();
    Ok(Generation {
        tokens,
        trace: GenerationTrace {
            encoder_us,
            decoder_us,
            genl: genl.into_iter().map(|g| g.unwrap_or(steps)).collect(),
        },
        logits: logits_log,
    })
}

/// Greedy generation with a key/value cache.
pub fn generate<T: Scalar>(w: &ModelWeights<T>, inputs: &[Vec<u32>], cfg: &GenerationConfig) -> Result<Generation<T>> {
    run(w, inputs, cfg, None, Path::Cached)
}

/// Greedy generation where sequence `b` emits EOS exactly at step
/// `lengths[b]` (EOS is masked before that). Steps past `max_new_tokens`
/// are never reached.
pub fn generate_forced<T: Scalar>(
    w: &ModelWeights<T>,
    inputs: &[Vec<u32>],
    cfg: &GenerationConfig,
    lengths: &[usize],
) -> Result<Generation<T>> {
    run(w, inputs, cfg, Some(lengths), Path::Cached)
}

/// Same decoding rule as [`generate`] but recomputes the whole decoder
/// every step.
pub fn generate_uncached<T: Scalar>(
    w: &ModelWeights<T>,
    inputs: &[Vec<u32>],
    cfg: &GenerationConfig,
) -> Result<Generation<T>> {
    run(w, inputs, cfg, None, Path::Uncached)
}

/// Mean GenL over every sequence of every trace.
pub fn mean_genl(traces: &[GenerationTrace]) -> Result<f64> {
    let all: Vec<usize> = traces.iter().flat_map(|t| t.genl.iter().copied()).collect();
    if all.is_empty() {
        return Err(Error::Empty("generation traces"));
    }
    Ok(all.iter().sum::<usize>() as f64 / all.len() as f64)
}
