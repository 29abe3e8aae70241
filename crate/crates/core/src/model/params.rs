//! The parameter tree of an encoder-decoder and its weight container.
//!
//! [`ParamTree`] is generic over the leaf type so the same structure holds
//! tensor shapes (the layout), concrete tensors, or tape variables.

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use super::config::{FeedForward, ModelConfig};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Attention<P> {
    pub q: P,
    pub k: P,
    pub v: P,
    pub o: P,
    /// Relative-position bias table `[buckets, heads]`; only the first
    /// self-attention layer of each stack carries one.
    pub rel_bias: Option<P>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForwardParams<P> {
    pub wi: P,
    /// Linear branch of a gated block.
    pub wi_linear: Option<P>,
    pub wo: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer<P> {
    pub attn_norm: P,
    pub self_attn: Attention<P>,
    pub ff_norm: P,
    pub ff: FeedForwardParams<P>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer<P> {
    pub self_norm: P,
    pub self_attn: Attention<P>,
    pub cross_norm: P,
    pub cross_attn: Attention<P>,
    pub ff_norm: P,
    pub ff: FeedForwardParams<P>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamTree<P> {
    pub embedding: P,
    pub encoder: Vec<EncoderLayer<P>>,
    pub enc_final_norm: P,
    pub decoder: Vec<DecoderLayer<P>>,
    pub dec_final_norm: P,
    /// Separate output projection `[d_model, vocab]`; `None` when tied.
    pub lm_head: Option<P>,
}

/// Disjoint partition of the parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StackPart {
    Encoder,
    Decoder,
    Embedding,
    Head,
}

impl StackPart {
    pub const ALL: [StackPart; 4] = [
        StackPart::Encoder,
        StackPart::Decoder,
        StackPart::Embedding,
        StackPart::Head,
    ];

    pub fn of(name: &str) -> StackPart {
        if name.starts_with("encoder.") {
            StackPart::Encoder
        } else if name.starts_with("decoder.") {
            StackPart::Decoder
        } else if name == "lm_head" {
            StackPart::Head
        } else {
            StackPart::Embedding
        }
    }
}

/// How stack sizes are attributed when comparing encoder and decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Attribution {
    /// Stacks own only their layers and final norms.
    Disjoint,
    /// Each stack also counts the shared token embedding, as a framework's
    /// `encoder.parameters()` would.
    SharedEmbeddingInStacks,
}

impl<P> Attention<P> {
    fn map<Q>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Q) -> Attention<Q> {
        Attention {
            q: f(&format!("{prefix}.q"), &self.q),
            k: f(&format!("{prefix}.k"), &self.k),
            v: f(&format!("{prefix}.v"), &self.v),
            o: f(&format!("{prefix}.o"), &self.o),
            rel_bias: self.rel_bias.as_ref().map(|b| f(&format!("{prefix}.rel_bias"), b)),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut P)) {
        f(&format!("{prefix}.q"), &mut self.q);
        f(&format!("{prefix}.k"), &mut self.k);
        f(&format!("{prefix}.v"), &mut self.v);
        f(&format!("{prefix}.o"), &mut self.o);
        if let Some(b) = &mut self.rel_bias {
            f(&format!("{prefix}.rel_bias"), b);
        }
    }
}

impl<P> FeedForwardParams<P> {
    fn map<Q>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Q) -> FeedForwardParams<Q> {
        FeedForwardParams {
            wi: f(&format!("{prefix}.wi"), &self.wi),
            wi_linear: self.wi_linear.as_ref().map(|w| f(&format!("{prefix}.wi_linear"), w)),
            wo: f(&format!("{prefix}.wo"), &self.wo),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut P)) {
        f(&format!("{prefix}.wi"), &mut self.wi);
        if let Some(w) = &mut self.wi_linear {
            f(&format!("{prefix}.wi_linear"), w);
        }
        f(&format!("{prefix}.wo"), &mut self.wo);
    }
}

impl<P> EncoderLayer<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Q) -> EncoderLayer<Q> {
        EncoderLayer {
            attn_norm: f(&format!("{prefix}.attn_norm"), &self.attn_norm),
            self_attn: self.self_attn.map(&format!("{prefix}.self_attn"), f),
            ff_norm: f(&format!("{prefix}.ff_norm"), &self.ff_norm),
            ff: self.ff.map(&format!("{prefix}.ff"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut P)) {
        f(&format!("{prefix}.attn_norm"), &mut self.attn_norm);
        self.self_attn.visit_mut(&format!("{prefix}.self_attn"), f);
        f(&format!("{prefix}.ff_norm"), &mut self.ff_norm);
        self.ff.visit_mut(&format!("{prefix}.ff"), f);
    }
}

impl<P> DecoderLayer<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut impl FnMut(&str, &P) -> Q) -> DecoderLayer<Q> {
        DecoderLayer {
            self_norm: f(&format!("{prefix}.self_norm"), &self.self_norm),
            self_attn: self.self_attn.map(&format!("{prefix}.self_attn"), f),
            cross_norm: f(&format!("{prefix}.cross_norm"), &self.cross_norm),
            cross_attn: self.cross_attn.map(&format!("{prefix}.cross_attn"), f),
            ff_norm: f(&format!("{prefix}.ff_norm"), &self.ff_norm),
            ff: self.ff.map(&format!("{prefix}.ff"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(&str, &mut P)) {
        f(&format!("{prefix}.self_norm"), &mut self.self_norm);
        self.self_attn.visit_mut(&format!("{prefix}.self_attn"), f);
        f(&format!("{prefix}.cross_norm"), &mut self.cross_norm);
        self.cross_attn.visit_mut(&format!("{prefix}.cross_attn"), f);
        f(&format!("{prefix}.ff_norm"), &mut self.ff_norm);
        self.ff.visit_mut(&format!("{prefix}.ff"), f);
    }
}

impl<P> ParamTree<P> {
    /// Maps every leaf in canonical order, passing its dotted name.
    pub fn map<Q>(&self, mut f: impl FnMut(&str, &P) -> Q) -> ParamTree<Q> {
        let f = &mut f;
        let embedding = f("shared.embedding", &self.embedding);
        let encoder = self
            .encoder
            .iter()
            .enumerate()
            .map(|(i, l)| l.map(&format!("encoder.{i}"), f))
            .collect();
        let enc_final_norm = f("encoder.final_norm", &self.enc_final_norm);
        let decoder = self
            .decoder
            .iter()
            .enumerate()
            .map(|(i, l)| l.map(&format!("decoder.{i}"), f))
            .collect();
        let dec_final_norm = f("decoder.final_norm", &self.dec_final_norm);
        let lm_head = self.lm_head.as_ref().map(|h| f("lm_head", h));
        ParamTree {
            embedding,
            encoder,
            enc_final_norm,
            decoder,
            dec_final_norm,
            lm_head,
        }
    }

    pub fn visit(&self, mut f: impl FnMut(&str, &P)) {
        self.map(|name, p| f(name, p));
    }

    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut P)) {
        let f = &mut f;
        f("shared.embedding", &mut self.embedding);
        for (i, l) in self.encoder.iter_mut().enumerate() {
            l.visit_mut(&format!("encoder.{i}"), f);
        }
        f("encoder.final_norm", &mut self.enc_final_norm);
        for (i, l) in self.decoder.iter_mut().enumerate() {
            l.visit_mut(&format!("decoder.{i}"), f);
        }
        f("decoder.final_norm", &mut self.dec_final_norm);
        if let Some(h) = &mut self.lm_head {
            f("lm_head", h);
        }
    }

    pub fn leaves(&self) -> Vec<(String, &P)> {
        let mut out = Vec::new();
        // `map` hands out short-lived references, so walk the structure directly.
        let names = self.map(|name, _| name.to_string());
        let mut refs: Vec<&P> = Vec::new();
        refs.push(&self.embedding);
        for l in &self.encoder {
            refs.push(&l.attn_norm);
            push_attention(&mut refs, &l.self_attn);
            refs.push(&l.ff_norm);
            push_ff(&mut refs, &l.ff);
        }
        refs.push(&self.enc_final_norm);
        for l in &self.decoder {
            refs.push(&l.self_norm);
            push_attention(&mut refs, &l.self_attn);
            refs.push(&l.cross_norm);
            push_attention(&mut refs, &l.cross_attn);
            refs.push(&l.ff_norm);
            push_ff(&mut refs, &l.ff);
        }
        refs.push(&self.dec_final_norm);
        if let Some(h) = &self.lm_head {
            refs.push(h);
        }
        let mut name_list = Vec::new();
        names.visit(|_, n| name_list.push(n.clone()));
        debug_assert_eq!(name_list.len(), refs.len());
        for (n, r) in name_list.into_iter().zip(refs) {
            out.push((n, r));
        }
        out
    }

    pub fn leaves_mut(&mut self) -> Vec<(String, &mut P)> {
        let names = self.map(|name, _| name.to_string());
        let mut name_list = Vec::new();
        names.visit(|_, n| name_list.push(n.clone()));
        let mut refs: Vec<&mut P> = Vec::new();
        refs.push(&mut self.embedding);
        for l in &mut self.encoder {
            refs.push(&mut l.attn_norm);
            push_attention_mut(&mut refs, &mut l.self_attn);
            refs.push(&mut l.ff_norm);
            push_ff_mut(&mut refs, &mut l.ff);
        }
        refs.push(&mut self.enc_final_norm);
        for l in &mut self.decoder {
            refs.push(&mut l.self_norm);
            push_attention_mut(&mut refs, &mut l.self_attn);
            refs.push(&mut l.cross_norm);
            push_attention_mut(&mut refs, &mut l.cross_attn);
            refs.push(&mut l.ff_norm);
            push_ff_mut(&mut refs, &mut l.ff);
        }
        refs.push(&mut self.dec_final_norm);
        if let Some(h) = &mut self.lm_head {
            refs.push(h);
        }
        debug_assert_eq!(name_list.len(), refs.len());
        name_list.into_iter().zip(refs).collect()
    }
}

fn push_attention<'a, P>(refs: &mut Vec<&'a P>, a: &'a Attention<P>) {
    refs.extend([&a.q, &a.k, &a.v, &a.o]);
    if let Some(b) = &a.rel_bias {
        refs.push(b);
    }
}

fn push_ff<'a, P>(refs: &mut Vec<&'a P>, ff: &'a FeedForwardParams<P>) {
    refs.push(&ff.wi);
    if let Some(w) = &ff.wi_linear {
        refs.push(w);
    }
    refs.push(&ff.wo);
}

fn push_attention_mut<'a, P>(refs: &mut Vec<&'a mut P>, a: &'a mut Attention<P>) {
    refs.push(&mut a.q);
    refs.push(&mut a.k);
    refs.push(&mut a.v);
    refs.push(&mut a.o);
    if let Some(b) = &mut a.rel_bias {
        refs.push(b);
    }
}

fn push_ff_mut<'a, P>(refs: &mut Vec<&'a mut P>, ff: &'a mut FeedForwardParams<P>) {
    refs.push(&mut ff.wi);
    if let Some(w) = &mut ff.wi_linear {
        refs.push(w);
    }
    refs.push(&mut ff.wo);
}

/// Tensor shapes of every parameter for `config`.
pub fn layout(config: &ModelConfig) -> ParamTree<Vec<usize>> {
    let d = config.d_model;
    let inner = config.inner_dim();
    let attention = |with_bias: bool| Attention {
        q: vec![d, inner],
        k: vec![d, inner],
        v: vec![d, inner],
        o: vec![inner, d],
        rel_bias: with_bias.then(|| vec![config.rel_pos_buckets, config.n_heads]),
    };
    let ff = || FeedForwardParams {
        wi: vec![d, config.d_ff],
        wi_linear: (config.feed_forward == FeedForward::GatedGelu).then(|| vec![d, config.d_ff]),
        wo: vec![config.d_ff, d],
    };
    ParamTree {
        embedding: vec![config.vocab_size, d],
        encoder: (0..config.n_enc_layers)
            .map(|i| EncoderLayer {
                attn_norm: vec![d],
                self_attn: attention(i == 0),
                ff_norm: vec![d],
                ff: ff(),
            })
            .collect(),
        enc_final_norm: vec![d],
        decoder: (0..config.n_dec_layers)
            .map(|i| DecoderLayer {
                self_norm: vec![d],
                self_attn: attention(i == 0),
                cross_norm: vec![d],
                cross_attn: attention(false),
                ff_norm: vec![d],
                ff: ff(),
            })
            .collect(),
        dec_final_norm: vec![d],
        lm_head: (!config.tie_embeddings).then(|| vec![d, config.vocab_size]),
    }
}

fn is_norm(name: &str) -> bool {
    name.ends_with("norm")
}

/// Parameter count of `part` computed from shapes alone.
pub fn count_params_for(config: &ModelConfig, part: StackPart) -> usize {
    let mut total = 0;
    layout(config).visit(|name, shape| {
        if StackPart::of(name) == part {
            total += shape.iter().product::<usize>();
        }
    });
    total
}

pub fn total_params_for(config: &ModelConfig) -> usize {
    StackPart::ALL.iter().map(|&p| count_params_for(config, p)).sum()
}

/// Encoder and decoder sizes under an attribution rule.
pub fn stack_sizes(config: &ModelConfig, attribution: Attribution) -> (usize, usize) {
    let enc = count_params_for(config, StackPart::Encoder);
    let dec = count_params_for(config, StackPart::Decoder);
    match attribution {
        Attribution::Disjoint => (enc, dec),
        Attribution::SharedEmbeddingInStacks => {
            let emb = count_params_for(config, StackPart::Embedding);
            (enc + emb, dec + emb)
        }
    }
}

/// Encoder-to-decoder parameter ratio.
pub fn enc_dec_ratio(config: &ModelConfig, attribution: Attribution) -> f64 {
    let (e, d) = stack_sizes(config, attribution);
    e as f64 / d as f64
}

/// Weights of one encoder-decoder model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<T> {
    pub config: ModelConfig,
    pub params: ParamTree<Tensor<T>>,
}

impl<T: Scalar> ModelWeights<T> {
    /// Deterministic initialization.
    ///
    /// Parameters are drawn in canonical name order from one
    /// xoshiro256++ stream seeded with `seed`, each tensor row-major:
    /// norm gains are exactly 1, the token embedding is standard normal, and
    /// every other matrix is normal with std `1/sqrt(rows)` (its fan-in).
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let params = layout(config).map(|name, shape| {
            if is_norm(name) {
                Tensor::full(shape, T::one())
            } else {
                let std = if name == "shared.embedding" {
                    1.0
                } else {
                    1.0 / (shape[0] as f64).sqrt()
                };
                Tensor::from_fn(shape, |_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    T::lit(z * std)
                })
            }
        });
        Ok(ModelWeights {
            config: config.clone(),
            params,
        })
    }

    pub fn count_params(&self, part: StackPart) -> usize {
        let mut total = 0;
        self.params.visit(|name, t| {
            if StackPart::of(name) == part {
                total += t.numel();
            }
        });
        total
    }

    pub fn total_params(&self) -> usize {
        let mut total = 0;
        self.params.visit(|_, t| total += t.numel());
        total
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        self.params.leaves()
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.params.leaves_mut()
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.params.visit(|_, t| ok &= t.is_finite());
        ok
    }

    pub fn cast<U: Scalar>(&self) -> ModelWeights<U> {
        ModelWeights {
            config: self.config.clone(),
            params: self.params.map(|_, t| t.cast()),
        }
    }
}
