//! Differentiable (tape-recorded) forward pass used for training and as the
//! teacher-forced reference for the inference path.

use super::config::{FeedForward, ModelConfig};
use super::params::{Attention, FeedForwardParams, ModelWeights, ParamTree};
use super::position::bucket_grid;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Additive attention-mask value for disallowed positions.
pub const MASK_VALUE: f64 = -1e9;

/// A padded, teacher-forced batch of (source, summary) pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct Seq2SeqBatch {
    pub batch: usize,
    pub src_len: usize,
    pub src_ids: Vec<usize>,
    pub src_mask: Vec<bool>,
    pub tgt_len: usize,
    /// `[bos, y_0, .., y_{n-1}]` padded.
    pub dec_input: Vec<usize>,
    /// `[y_0, .., y_{n-1}, eos]`, `None` on padding.
    pub targets: Vec<Option<usize>>,
}

impl Seq2SeqBatch {
    pub fn new(pairs: &[(&[u32], &[u32])], pad: u32, bos: u32, eos: u32) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let batch = pairs.len();
        let src_len = pairs.iter().map(|(s, _)| s.len()).max().unwrap_or(0);
        let tgt_len = pairs.iter().map(|(_, t)| t.len() + 1).max().unwrap_or(1);
        if src_len == 0 || pairs.iter().any(|(s, _)| s.is_empty()) {
            return Err(Error::Empty("source sequence"));
        }
        let mut src_ids = vec![pad as usize; batch * src_len];
        let mut src_mask = vec![false; batch * src_len];
        let mut dec_input = vec![pad as usize; batch * tgt_len];
        let mut targets = vec![None; batch * tgt_len];
        for (b, (src, tgt)) in pairs.iter().enumerate() {
            for (i, &t) in src.iter().enumerate() {
                src_ids[b * src_len + i] = t as usize;
                src_mask[b * src_len + i] = true;
            }
            dec_input[b * tgt_len] = bos as usize;
            for (i, &t) in tgt.iter().enumerate() {
                dec_input[b * tgt_len + i + 1] = t as usize;
                targets[b * tgt_len + i] = Some(t as usize);
            }
            targets[b * tgt_len + tgt.len()] = Some(eos as usize);
        }
        Ok(Seq2SeqBatch {
            batch,
            src_len,
            src_ids,
            src_mask,
            tgt_len,
            dec_input,
            targets,
        })
    }

    pub fn target_tokens(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }
}

/// Puts every weight on the tape, trainable or constant.
pub fn bind<T: Scalar>(tape: &mut Tape<T>, weights: &ModelWeights<T>, trainable: bool) -> ParamTree<Var> {
    weights.params.map(|_, t| tape.leaf(t.clone(), trainable))
}

fn split_heads<T: Scalar>(tape: &mut Tape<T>, x: Var, batch: usize, len: usize, cfg: &ModelConfig) -> Result<Var> {
    let x = tape.reshape(x, &[batch, len, cfg.n_heads, cfg.d_kv])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[batch * cfg.n_heads, len, cfg.d_kv])
}

/// `[heads * q_len * k_len]` bias drawn from a `[buckets, heads]` table.
pub fn position_bias<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    table: Var,
    q_len: usize,
    k_len: usize,
    bidirectional: bool,
) -> Result<Var> {
    let ids = bucket_grid(q_len, k_len, 0, bidirectional, cfg.rel_pos_buckets, cfg.rel_pos_max_distance);
    let rows = tape.gather(table, &ids)?;
    let per_head = tape.permute(rows, &[1, 0])?;
    tape.reshape(per_head, &[cfg.n_heads * q_len * k_len])
}

#[allow(clippy::too_many_arguments)]
fn attention<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    att: &Attention<Var>,
    xq: Var,
    xkv: Var,
    batch: usize,
    q_len: usize,
    k_len: usize,
    bias: Option<Var>,
    mask: Var,
) -> Result<Var> {
    let h = cfg.n_heads;
    let q = tape.matmul(xq, att.q)?;
    let k = tape.matmul(xkv, att.k)?;
    let v = tape.matmul(xkv, att.v)?;
    let q = split_heads(tape, q, batch, q_len, cfg)?;
    let k = split_heads(tape, k, batch, k_len, cfg)?;
    let v = split_heads(tape, v, batch, k_len, cfg)?;
    let mut scores = tape.matmul_t(q, k, false, true)?;
    scores = tape.scale(scores, T::lit(1.0 / (cfg.d_kv as f64).sqrt()))?;
    if let Some(bias) = bias {
        scores = tape.reshape(scores, &[batch, h * q_len * k_len])?;
        scores = tape.add_broadcast(scores, bias)?;
        scores = tape.reshape(scores, &[batch * h, q_len, k_len])?;
    }
    scores = tape.add(scores, mask)?;
    let probs = tape.softmax(scores, 2)?;
    let ctx = tape.matmul(probs, v)?;
    let ctx = tape.reshape(ctx, &[batch, h, q_len, cfg.d_kv])?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[batch * q_len, cfg.inner_dim()])?;
    tape.matmul(ctx, att.o)
}

fn feed_forward<T: Scalar>(tape: &mut Tape<T>, cfg: &ModelConfig, ff: &FeedForwardParams<Var>, x: Var) -> Result<Var> {
    let hidden = tape.matmul(x, ff.wi)?;
    let hidden = match (cfg.feed_forward, ff.wi_linear) {
        (FeedForward::Relu, _) => tape.relu(hidden)?,
        (FeedForward::GatedGelu, Some(lin)) => {
            let act = tape.gelu(hidden)?;
            let linear = tape.matmul(x, lin)?;
            tape.mul(act, linear)?
        }
        (FeedForward::GatedGelu, None) => {
            return Err(Error::Format("gated feed-forward without linear branch".into()))
        }
    };
    tape.matmul(hidden, ff.wo)
}

fn mask_tensor<T: Scalar>(
    batch: usize,
    heads: usize,
    q_len: usize,
    k_len: usize,
    allowed: impl Fn(usize, usize, usize) -> bool,
) -> Tensor<T> {
    let neg = T::lit(MASK_VALUE);
    let mut data = Vec::with_capacity(batch * heads * q_len * k_len);
    for b in 0..batch {
        for _ in 0..heads {
            for q in 0..q_len {
                for k in 0..k_len {
                    data.push(if allowed(b, q, k) { T::zero() } else { neg });
                }
            }
        }
    }
    Tensor::new(vec![batch * heads, q_len, k_len], data).expect("mask shape")
}

/// Encoder stack; returns hidden states `[batch * src_len, d_model]`.
pub fn encode_tape<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    p: &ParamTree<Var>,
    ids: &[usize],
    src_mask: &[bool],
    batch: usize,
    src_len: usize,
) -> Result<Var> {
    if src_len > cfg.max_input_len {
        return Err(Error::InvalidArgument(format!(
            "source length {src_len} exceeds max_input_len {}",
            cfg.max_input_len
        )));
    }
    let mut x = tape.gather(p.embedding, ids)?;
    let table = p.encoder[0]
        .self_attn
        .rel_bias
        .ok_or_else(|| Error::Format("encoder layer 0 has no relative-position table".into()))?;
    let bias = position_bias(tape, cfg, table, src_len, src_len, true)?;
    let mask = tape.constant(mask_tensor(batch, cfg.n_heads, src_len, src_len, |b, _, k| {
        src_mask[b * src_len + k]
    }));
    let eps = T::lit(cfg.norm_eps);
    for layer in &p.encoder {
        let h = tape.rms_norm(x, layer.attn_norm, eps)?;
        let a = attention(tape, cfg, &layer.self_attn, h, h, batch, src_len, src_len, Some(bias), mask)?;
        x = tape.add(x, a)?;
        let h = tape.rms_norm(x, layer.ff_norm, eps)?;
        let f = feed_forward(tape, cfg, &layer.ff, h)?;
        x = tape.add(x, f)?;
    }
    tape.rms_norm(x, p.enc_final_norm, eps)
}

/// Teacher-forced decoder; returns logits `[batch * tgt_len, vocab]`.
#[allow(clippy::too_many_arguments)]
pub fn decode_tape<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    p: &ParamTree<Var>,
    enc: Var,
    src_mask: &[bool],
    batch: usize,
    src_len: usize,
    dec_ids: &[usize],
    tgt_len: usize,
) -> Result<Var> {
    let mut y = tape.gather(p.embedding, dec_ids)?;
    let table = p.decoder[0]
        .self_attn
        .rel_bias
        .ok_or_else(|| Error::Format("decoder layer 0 has no relative-position table".into()))?;
    let bias = position_bias(tape, cfg, table, tgt_len, tgt_len, false)?;
    let causal = tape.constant(mask_tensor(batch, cfg.n_heads, tgt_len, tgt_len, |_, q, k| k <= q));
    let cross = tape.constant(mask_tensor(batch, cfg.n_heads, tgt_len, src_len, |b, _, k| {
        src_mask[b * src_len + k]
    }));
    let eps = T::lit(cfg.norm_eps);
    for layer in &p.decoder {
        let h = tape.rms_norm(y, layer.self_norm, eps)?;
        let a = attention(tape, cfg, &layer.self_attn, h, h, batch, tgt_len, tgt_len, Some(bias), causal)?;
        y = tape.add(y, a)?;
        let h = tape.rms_norm(y, layer.cross_norm, eps)?;
        let c = attention(tape, cfg, &layer.cross_attn, h, enc, batch, tgt_len, src_len, None, cross)?;
        y = tape.add(y, c)?;
        let h = tape.rms_norm(y, layer.ff_norm, eps)?;
        let f = feed_forward(tape, cfg, &layer.ff, h)?;
        y = tape.add(y, f)?;
    }
    let y = tape.rms_norm(y, p.dec_final_norm, eps)?;
    match p.lm_head {
        Some(head) => tape.matmul(y, head),
        None => {
            let scaled = tape.scale(y, T::lit(1.0 / (cfg.d_model as f64).sqrt()))?;
            tape.matmul_t(scaled, p.embedding, false, true)
        }
    }
}

/// Logits for a batch; returns the logits variable.
pub fn logits_tape<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    p: &ParamTree<Var>,
    batch: &Seq2SeqBatch,
) -> Result<Var> {
    let enc = encode_tape(tape, cfg, p, &batch.src_ids, &batch.src_mask, batch.batch, batch.src_len)?;
    decode_tape(
        tape,
        cfg,
        p,
        enc,
        &batch.src_mask,
        batch.batch,
        batch.src_len,
        &batch.dec_input,
        batch.tgt_len,
    )
}

/// Mean token cross-entropy of a teacher-forced batch.
pub fn loss_tape<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    p: &ParamTree<Var>,
    batch: &Seq2SeqBatch,
) -> Result<Var> {
    let logits = logits_tape(tape, cfg, p, batch)?;
    tape.cross_entropy(logits, &batch.targets)
}

/// Teacher-forced logits `[batch, tgt_len, vocab]` without gradients.
pub fn teacher_forced_logits<T: Scalar>(weights: &ModelWeights<T>, batch: &Seq2SeqBatch) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let p = bind(&mut tape, weights, false);
    let logits = logits_tape(&mut tape, &weights.config, &p, batch)?;
    tape.value(logits)
        .clone()
        .reshape(&[batch.batch, batch.tgt_len, weights.config.vocab_size])
}

/// Teacher-forced loss without gradients.
pub fn eval_loss<T: Scalar>(weights: &ModelWeights<T>, batch: &Seq2SeqBatch) -> Result<T> {
    let mut tape = Tape::new();
    let p = bind(&mut tape, weights, false);
    let loss = loss_tape(&mut tape, &weights.config, &p, batch)?;
    Ok(tape.value(loss).data()[0])
}
