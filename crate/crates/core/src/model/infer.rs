//! Gradient-free inference: batched encoder pass, incremental decoding with
//! a key/value cache, and a full-recompute decoder used as its oracle.

use super::config::{FeedForward, ModelConfig};
use super::forward::MASK_VALUE;
use super::params::{Attention, FeedForwardParams, ModelWeights};
use super::position::bucket_grid;
use crate::error::{Error, Result};
use crate::scalar::{gemm, Scalar};
use crate::tensor::{gelu, permute, rms_norm_rows, softmax_rows, Tensor};

/// Encoder hidden states for one batch.
#[derive(Clone, Debug)]
pub struct EncoderOutput<T> {
    /// `[batch, src_len, d_model]`
    pub hidden: Tensor<T>,
    /// `[batch * src_len]`, true for real tokens.
    pub mask: Vec<bool>,
    pub batch: usize,
    pub src_len: usize,
}

fn linear<T: Scalar>(x: &[T], rows: usize, w: &Tensor<T>) -> Vec<T> {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![T::zero(); rows * dout];
    gemm(rows, din, dout, x, false, w.data(), false, T::zero(), &mut out);
    out
}

fn norm<T: Scalar>(x: &[T], gain: &Tensor<T>, eps: f64) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    rms_norm_rows(x, gain.data(), T::lit(eps), &mut out);
    out
}

fn add_in_place<T: Scalar>(x: &mut [T], y: &[T]) {
    for (a, &b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

/// `[B*L, H*dk]` rows to `[B, H, L, dk]`.
fn split_heads<T: Scalar>(x: &[T], batch: usize, len: usize, cfg: &ModelConfig) -> Vec<T> {
    permute(x, &[batch, len, cfg.n_heads, cfg.d_kv], &[0, 2, 1, 3]).0
}

fn merge_heads<T: Scalar>(x: &[T], batch: usize, len: usize, cfg: &ModelConfig) -> Vec<T> {
    permute(x, &[batch, cfg.n_heads, len, cfg.d_kv], &[0, 2, 1, 3]).0
}

/// `[heads, q_len, k_len]` position bias.
fn bias_values<T: Scalar>(
    table: &Tensor<T>,
    cfg: &ModelConfig,
    q_len: usize,
    k_len: usize,
    q_offset: usize,
    bidirectional: bool,
) -> Vec<T> {
    let ids = bucket_grid(q_len, k_len, q_offset, bidirectional, cfg.rel_pos_buckets, cfg.rel_pos_max_distance);
    let h = cfg.n_heads;
    let mut out = vec![T::zero(); h * ids.len()];
    for (i, &b) in ids.iter().enumerate() {
        for head in 0..h {
            out[head * ids.len() + i] = table.data()[b * h + head];
        }
    }
    out
}

/// Scaled dot-product attention for every `(batch, head)` block.
///
/// `q` is `[B*H, q_len, dk]`; `keys[bh]`/`values[bh]` are `[k_len, dk]`.
#[allow(clippy::too_many_arguments)]
fn attend<T: Scalar>(
    cfg: &ModelConfig,
    q: &[T],
    keys: &[&[T]],
    values: &[&[T]],
    q_len: usize,
    k_len: usize,
    bias: Option<&[T]>,
    allowed: impl Fn(usize, usize, usize) -> bool,
) -> Vec<T> {
    let (h, dk) = (cfg.n_heads, cfg.d_kv);
    let scale = T::lit(1.0 / (dk as f64).sqrt());
    let neg = T::lit(MASK_VALUE);
    let mut out = vec![T::zero(); keys.len() * q_len * dk];
    let mut scores = vec![T::zero(); q_len * k_len];
    for bh in 0..keys.len() {
        let (b, head) = (bh / h, bh % h);
        let qb = &q[bh * q_len * dk..(bh + 1) * q_len * dk];
        gemm(q_len, dk, k_len, qb, false, keys[bh], true, T::zero(), &mut scores);
        for qi in 0..q_len {
            for ki in 0..k_len {
                let s = &mut scores[qi * k_len + ki];
                *s *= scale;
                if let Some(bias) = bias {
                    *s += bias[(head * q_len + qi) * k_len + ki];
                }
                *s += if allowed(b, qi, ki) { T::zero() } else { neg };
            }
        }
        softmax_rows(&mut scores, k_len);
        gemm(
            q_len,
            k_len,
            dk,
            &scores,
            false,
            values[bh],
            false,
            T::zero(),
            &mut out[bh * q_len * dk..(bh + 1) * q_len * dk],
        );
    }
    out
}

fn feed_forward<T: Scalar>(cfg: &ModelConfig, ff: &FeedForwardParams<Tensor<T>>, x: &[T], rows: usize) -> Result<Vec<T>> {
    let mut hidden = linear(x, rows, &ff.wi);
    match (cfg.feed_forward, &ff.wi_linear) {
        (FeedForward::Relu, _) => {
            for v in hidden.iter_mut() {
                if *v <= T::zero() {
                    *v = T::zero();
                }
            }
        }
        (FeedForward::GatedGelu, Some(lin)) => {
            let linear_branch = linear(x, rows, lin);
            for (v, &l) in hidden.iter_mut().zip(&linear_branch) {
                *v = gelu(*v) * l;
            }
        }
        (FeedForward::GatedGelu, None) => {
            return Err(Error::Format("gated feed-forward without linear branch".into()))
        }
    }
    Ok(linear(&hidden, rows, &ff.wo))
}

fn project_heads<T: Scalar>(x: &[T], batch: usize, len: usize, w: &Tensor<T>, cfg: &ModelConfig) -> Vec<T> {
    split_heads(&linear(x, batch * len, w), batch, len, cfg)
}

fn block_slices<T>(buf: &[T], blocks: usize) -> Vec<&[T]> {
    let size = buf.len() / blocks.max(1);
    buf.chunks(size.max(1)).collect()
}

fn check_ids(ids: &[u32], vocab: usize) -> Result<()> {
    match ids.iter().find(|&&id| id as usize >= vocab) {
        Some(&id) => Err(Error::TokenOutOfRange { id, vocab }),
        None => Ok(()),
    }
}

fn embed<T: Scalar>(w: &ModelWeights<T>, ids: &[u32]) -> Result<Vec<T>> {
    let d = w.config.d_model;
    check_ids(ids, w.config.vocab_size)?;
    let table = w.params.embedding.data();
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        out.extend_from_slice(&table[id as usize * d..(id as usize + 1) * d]);
    }
    Ok(out)
}

/// Pads `inputs` with `pad` and runs the encoder.
pub fn encode<T: Scalar>(w: &ModelWeights<T>, inputs: &[Vec<u32>], pad: u32) -> Result<EncoderOutput<T>> {
    if inputs.is_empty() {
        return Err(Error::Empty("batch"));
    }
    if inputs.iter().any(|s| s.is_empty()) {
        return Err(Error::Empty("source sequence"));
    }
    let batch = inputs.len();
    let src_len = inputs.iter().map(Vec::len).max().unwrap_or(0);
    let mut ids = vec![pad; batch * src_len];
    let mut mask = vec![false; batch * src_len];
    for (b, s) in inputs.iter().enumerate() {
        ids[b * src_len..b * src_len + s.len()].copy_from_slice(s);
        mask[b * src_len..b * src_len + s.len()].iter_mut().for_each(|m| *m = true);
    }
    encode_padded(w, &ids, &mask, batch, src_len)
}

/// One full encoder pass over a padded `[batch, src_len]` id matrix.
pub fn encode_padded<T: Scalar>(
    w: &ModelWeights<T>,
    ids: &[u32],
    mask: &[bool],
    batch: usize,
    src_len: usize,
) -> Result<EncoderOutput<T>> {
    let cfg = &w.config;
    if batch == 0 {
        return Err(Error::Empty("batch"));
    }
    if ids.len() != batch * src_len || mask.len() != ids.len() {
        return Err(Error::Shape {
            op: "encode",
            lhs: vec![batch, src_len],
            rhs: vec![ids.len(), mask.len()],
        });
    }
    if src_len > cfg.max_input_len {
        return Err(Error::InvalidArgument(format!(
            "source length {src_len} exceeds max_input_len {}",
            cfg.max_input_len
        )));
    }
    let rows = batch * src_len;
    let mut x = embed(w, ids)?;
    let table = w.params.encoder[0]
        .self_attn
        .rel_bias
        .as_ref()
        .ok_or_else(|| Error::Format("encoder layer 0 has no relative-position table".into()))?;
    let bias = bias_values(table, cfg, src_len, src_len, 0, true);
    for layer in &w.params.encoder {
        let h = norm(&x, &layer.attn_norm, cfg.norm_eps);
        let a = self_attention_full(cfg, &layer.self_attn, &h, batch, src_len, &bias, |b, _, k| {
            mask[b * src_len + k]
        });
        add_in_place(&mut x, &a);
        let h = norm(&x, &layer.ff_norm, cfg.norm_eps);
        let f = feed_forward(cfg, &layer.ff, &h, rows)?;
        add_in_place(&mut x, &f);
    }
    let hidden = norm(&x, &w.params.enc_final_norm, cfg.norm_eps);
    Ok(EncoderOutput {
        hidden: Tensor::new(vec![batch, src_len, cfg.d_model], hidden)?,
        mask: mask.to_vec(),
        batch,
        src_len,
    })
}

#[allow(clippy::too_many_arguments)]
fn self_attention_full<T: Scalar>(
    cfg: &ModelConfig,
    att: &Attention<Tensor<T>>,
    h: &[T],
    batch: usize,
    len: usize,
    bias: &[T],
    allowed: impl Fn(usize, usize, usize) -> bool,
) -> Vec<T> {
    let q = project_heads(h, batch, len, &att.q, cfg);
    let k = project_heads(h, batch, len, &att.k, cfg);
    let v = project_heads(h, batch, len, &att.v, cfg);
    let bh = batch * cfg.n_heads;
    let ctx = attend(cfg, &q, &block_slices(&k, bh), &block_slices(&v, bh), len, len, Some(bias), allowed);
    linear(&merge_heads(&ctx, batch, len, cfg), batch * len, &att.o)
}

fn cross_kv<T: Scalar>(cfg: &ModelConfig, att: &Attention<Tensor<T>>, enc: &EncoderOutput<T>) -> (Vec<T>, Vec<T>) {
    let k = project_heads(enc.hidden.data(), enc.batch, enc.src_len, &att.k, cfg);
    let v = project_heads(enc.hidden.data(), enc.batch, enc.src_len, &att.v, cfg);
    (k, v)
}

fn output_logits<T: Scalar>(w: &ModelWeights<T>, y: &[T], rows: usize) -> Vec<T> {
    let cfg = &w.config;
    let y = norm(y, &w.params.dec_final_norm, cfg.norm_eps);
    match &w.params.lm_head {
        Some(head) => linear(&y, rows, head),
        None => {
            let s = T::lit(1.0 / (cfg.d_model as f64).sqrt());
            let scaled: Vec<T> = y.iter().map(|&v| v * s).collect();
            let mut out = vec![T::zero(); rows * cfg.vocab_size];
            gemm(
                rows,
                cfg.d_model,
                cfg.vocab_size,
                &scaled,
                false,
                w.params.embedding.data(),
                true,
                T::zero(),
                &mut out,
            );
            out
        }
    }
}

struct LayerCache<T> {
    self_k: Vec<Vec<T>>,
    self_v: Vec<Vec<T>>,
    cross: Option<(Vec<T>, Vec<T>)>,
}

/// Per-layer attention keys and values of one generation session.
pub struct KvCache<T> {
    batch: usize,
    src_len: usize,
    len: usize,
    layers: Vec<LayerCache<T>>,
}

impl<T: Scalar> KvCache<T> {
    pub fn new(cfg: &ModelConfig, enc: &EncoderOutput<T>) -> Self {
        let bh = enc.batch * cfg.n_heads;
        KvCache {
            batch: enc.batch,
            src_len: enc.src_len,
            len: 0,
            layers: (0..cfg.n_dec_layers)
                .map(|_| LayerCache {
                    self_k: vec![Vec::new(); bh],
                    self_v: vec![Vec::new(); bh],
                    cross: None,
                })
                .collect(),
        }
    }

    /// Number of decoder positions already processed.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// Runs the decoder for one new token per sequence and returns the
/// next-token logits `[batch, vocab]`. Cross-attention keys and values are
/// computed on the first step and reused afterwards.
pub fn decode_step<T: Scalar>(
    w: &ModelWeights<T>,
    enc: &EncoderOutput<T>,
    cache: &mut KvCache<T>,
    tokens: &[u32],
) -> Result<Tensor<T>> {
    let cfg = &w.config;
    if cache.batch != enc.batch
        || cache.src_len != enc.src_len
        || cache.layers.len() != w.params.decoder.len()
        || tokens.len() != enc.batch
    {
        return Err(Error::Shape {
            op: "decode_step cache",
            lhs: vec![cache.batch, cache.src_len, cache.layers.len()],
            rhs: vec![enc.batch, enc.src_len, w.params.decoder.len(), tokens.len()],
        });
    }
    let batch = enc.batch;
    let pos = cache.len;
    let dk = cfg.d_kv;
    let mut y = embed(w, tokens)?;
    let table = w.params.decoder[0]
        .self_attn
        .rel_bias
        .as_ref()
        .ok_or_else(|| Error::Format("decoder layer 0 has no relative-position table".into()))?;
    let bias = bias_values(table, cfg, 1, pos + 1, pos, false);
    let src_len = enc.src_len;
    for (layer, lc) in w.params.decoder.iter().zip(cache.layers.iter_mut()) {
        let h = norm(&y, &layer.self_norm, cfg.norm_eps);
        let q = project_heads(&h, batch, 1, &layer.self_attn.q, cfg);
        let k = project_heads(&h, batch, 1, &layer.self_attn.k, cfg);
        let v = project_heads(&h, batch, 1, &layer.self_attn.v, cfg);
        for bh in 0..batch * cfg.n_heads {
            lc.self_k[bh].extend_from_slice(&k[bh * dk..(bh + 1) * dk]);
            lc.self_v[bh].extend_from_slice(&v[bh * dk..(bh + 1) * dk]);
        }
        let keys: Vec<&[T]> = lc.self_k.iter().map(Vec::as_slice).collect();
        let values: Vec<&[T]> = lc.self_v.iter().map(Vec::as_slice).collect();
        let ctx = attend(cfg, &q, &keys, &values, 1, pos + 1, Some(&bias), |_, _, _| true);
        let a = linear(&merge_heads(&ctx, batch, 1, cfg), batch, &layer.self_attn.o);
        add_in_place(&mut y, &a);

        let h = norm(&y, &layer.cross_norm, cfg.norm_eps);
        if lc.cross.is_none() {
            lc.cross = Some(cross_kv(cfg, &layer.cross_attn, enc));
        }
        let (ck, cv) = lc.cross.as_ref().expect("cross cache");
        let bh = batch * cfg.n_heads;
        let q = project_heads(&h, batch, 1, &layer.cross_attn.q, cfg);
        let ctx = attend(cfg, &q, &block_slices(ck, bh), &block_slices(cv, bh), 1, src_len, None, |b, _, k| {
            enc.mask[b * src_len + k]
        });
        let c = linear(&merge_heads(&ctx, batch, 1, cfg), batch, &layer.cross_attn.o);
        add_in_place(&mut y, &c);

        let h = norm(&y, &layer.ff_norm, cfg.norm_eps);
        let f = feed_forward(cfg, &layer.ff, &h, batch)?;
        add_in_place(&mut y, &f);
    }
    cache.len += 1;
    let logits = output_logits(w, &y, batch);
    let out = Tensor::new(vec![batch, cfg.vocab_size], logits)?;
    out.ensure_finite("decode_step")?;
    Ok(out)
}

/// Recomputes the decoder over whole prefixes (all of equal length) with a
/// causal mask and no cache; returns logits `[batch, len, vocab]`.
pub fn decode_full<T: Scalar>(w: &ModelWeights<T>, enc: &EncoderOutput<T>, prefixes: &[Vec<u32>]) -> Result<Tensor<T>> {
    let cfg = &w.config;
    let batch = enc.batch;
    if prefixes.len() != batch {
        return Err(Error::Shape {
            op: "decode_full",
            lhs: vec![batch],
            rhs: vec![prefixes.len()],
        });
    }
    let len = prefixes[0].len();
    if len == 0 || prefixes.iter().any(|p| p.len() != len) {
        return Err(Error::InvalidArgument("prefixes must be non-empty and of equal length".into()));
    }
    let flat: Vec<u32> = prefixes.iter().flatten().copied().collect();
    let rows = batch * len;
    let mut y = embed(w, &flat)?;
    let table = w.params.decoder[0]
        .self_attn
        .rel_bias
        .as_ref()
        .ok_or_else(|| Error::Format("decoder layer 0 has no relative-position table".into()))?;
    let bias = bias_values(table, cfg, len, len, 0, false);
    let src_len = enc.src_len;
    let bh = batch * cfg.n_heads;
    for layer in &w.params.decoder {
        let h = norm(&y, &layer.self_norm, cfg.norm_eps);
        let a = self_attention_full(cfg, &layer.self_attn, &h, batch, len, &bias, |_, q, k| k <= q);
        add_in_place(&mut y, &a);

        let h = norm(&y, &layer.cross_norm, cfg.norm_eps);
        let (ck, cv) = cross_kv(cfg, &layer.cross_attn, enc);
        let q = project_heads(&h, batch, len, &layer.cross_attn.q, cfg);
        let ctx = attend(cfg, &q, &block_slices(&ck, bh), &block_slices(&cv, bh), len, src_len, None, |b, _, k| {
            enc.mask[b * src_len + k]
        });
        let c = linear(&merge_heads(&ctx, batch, len, cfg), rows, &layer.cross_attn.o);
        add_in_place(&mut y, &c);

        let h = norm(&y, &layer.ff_norm, cfg.norm_eps);
        let f = feed_forward(cfg, &layer.ff, &h, rows)?;
        add_in_place(&mut y, &f);
    }
    let logits = output_logits(w, &y, rows);
    let out = Tensor::new(vec![batch, len, cfg.vocab_size], logits)?;
    out.ensure_finite("decode_full")?;
    Ok(out)
}
