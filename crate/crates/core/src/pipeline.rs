//! Train, prune, re-fine-tune, evaluate and benchmark.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::bench::{measure, speedup, LatencyReport, Workload};
use crate::corpus::{Corpus, Pair, EOS, PAD};
use crate::error::{Error, Result};
use crate::generation::{generate, mean_genl, GenerationConfig};
use crate::metrics::{compare, score_corpus, Comparison, RougeScores};
use crate::model::forward::{bind, loss_tape};
use crate::model::{eval_loss, teacher_forced_logits, ModelConfig, ModelWeights, Seq2SeqBatch};
use crate::optim::{AdamConfig, OptimizerState};
use crate::pruning::{enumerate_grid, prune, PruneSpec};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    /// Sequences per optimizer step, reached by gradient accumulation.
    pub effective_batch: usize,
    pub micro_batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Upper bound on passes over the training split.
    pub epochs: usize,
    /// Validation evaluations without improvement before stopping.
    pub patience: usize,
    /// Optimizer steps between validation evaluations; once per epoch when unset.
    pub eval_every: Option<usize>,
    pub max_steps: Option<usize>,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            effective_batch: 64,
            micro_batch: 16,
            lr: 1e-4,
            weight_decay: 0.01,
            epochs: 10,
            patience: 2,
            eval_every: None,
            max_steps: None,
            seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn accumulation_steps(&self) -> usize {
        self.effective_batch / self.micro_batch.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.micro_batch == 0 || self.effective_batch == 0 || self.effective_batch % self.micro_batch != 0 {
            return Err(Error::Config {
                field: "micro_batch",
                reason: format!(
                    "{} must divide effective_batch {}",
                    self.micro_batch, self.effective_batch
                ),
            });
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config {
                field: "lr",
                reason: "must be positive".into(),
            });
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config {
                field: "weight_decay",
                reason: "must be non-negative".into(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    /// Mean loss of each optimizer step.
    pub curve: Vec<f64>,
    /// Validation loss at each evaluation.
    pub valid_curve: Vec<f64>,
    pub best_valid_loss: f64,
    pub steps: usize,
    pub stopped_early: bool,
}

fn make_batch(pairs: &[&Pair]) -> Result<Seq2SeqBatch> {
    let refs: Vec<(&[u32], &[u32])> = pairs.iter().map(|p| (p.source.as_slice(), p.summary.as_slice())).collect();
    Seq2SeqBatch::new(&refs, PAD, crate::corpus::BOS, EOS)
}

/// Token-weighted mean teacher-forced loss over `pairs`.
pub fn mean_loss<T: Scalar>(w: &ModelWeights<T>, pairs: &[Pair], micro: usize) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("loss evaluation set"));
    }
    let (mut total, mut tokens) = (0.0, 0usize);
    for chunk in pairs.chunks(micro.max(1)) {
        let refs: Vec<&Pair> = chunk.iter().collect();
        let batch = make_batch(&refs)?;
        let n = batch.target_tokens();
        total += eval_loss(w, &batch)?.as_f64() * n as f64;
        tokens += n;
    }
    Ok(total / tokens as f64)
}

/// Teacher-forced next-token accuracy over non-padding targets.
pub fn token_accuracy<T: Scalar>(w: &ModelWeights<T>, pairs: &[Pair], micro: usize) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("accuracy evaluation set"));
    }
    let vocab = w.config.vocab_size;
    let (mut right, mut total) = (0usize, 0usize);
    for chunk in pairs.chunks(micro.max(1)) {
        let refs: Vec<&Pair> = chunk.iter().collect();
        let batch = make_batch(&refs)?;
        let logits = teacher_forced_logits(w, &batch)?;
        for (i, target) in batch.targets.iter().enumerate() {
            let Some(t) = target else { continue };
            let row = &logits.data()[i * vocab..(i + 1) * vocab];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            right += usize::from(best == *t);
            total += 1;
        }
    }
    Ok(right as f64 / total as f64)
}

/// Teacher-forced cross-entropy training with patience-based early
/// stopping on validation loss. The best validation weights are restored
/// at the end.
pub fn train<T: Scalar>(w: &mut ModelWeights<T>, corpus: &Corpus, hyper: &Hyperparams) -> Result<TrainOutcome> {
    hyper.validate()?;
    if corpus.train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let valid: &[Pair] = if corpus.valid.is_empty() { &corpus.train } else { &corpus.valid };
    let mut opt = OptimizerState::<T>::new(AdamConfig {
        learning_rate: hyper.lr,
        weight_decay: hyper.weight_decay,
        ..AdamConfig::default()
    });
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(hyper.seed);
    let mut order: Vec<usize> = (0..corpus.train.len()).collect();
    let mut curve = Vec::new();
    let mut valid_curve = Vec::new();
    let mut best = mean_loss(w, valid, hyper.micro_batch)?;
    let mut best_weights = w.clone();
    let mut since_best = 0;
    let mut steps = 0;
    let mut stopped_early = false;
    let max_steps = hyper.max_steps.unwrap_or(usize::MAX);

    'epochs: for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let chunks: Vec<&[usize]> = order.chunks(hyper.effective_batch).collect();
        for (i, chunk) in chunks.iter().enumerate() {
            if steps >= max_steps {
                break 'epochs;
            }
            let loss = accumulate_step(w, &mut opt, corpus, chunk, hyper.micro_batch)
                .map_err(|e| match e {
                    Error::NonFinite { .. } => Error::Divergence { step: steps },
                    e => e,
                })?;
            if !loss.is_finite() {
                return Err(Error::Divergence { step: steps });
            }
            curve.push(loss);
            steps += 1;
            let end_of_epoch = i + 1 == chunks.len();
            let due = match hyper.eval_every {
                Some(k) => steps % k.max(1) == 0,
                None => end_of_epoch,
            };
            if due {
                let v = mean_loss(w, valid, hyper.micro_batch)?;
                valid_curve.push(v);
                if v < best {
                    best = v;
                    best_weights = w.clone();
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= hyper.patience {
                        stopped_early = true;
                        break 'epochs;
                    }
                }
            }
        }
    }
    if steps > 0 {
        let v = mean_loss(w, valid, hyper.micro_batch)?;
        if v < best {
            best = v;
            best_weights = w.clone();
        }
        *w = best_weights;
    }
    Ok(TrainOutcome {
        curve,
        valid_curve,
        best_valid_loss: best,
        steps,
        stopped_early,
    })
}

/// One optimizer step over `indices`, split into micro-batches whose
/// losses are weighted by their share of target tokens.
fn accumulate_step<T: Scalar>(
    w: &mut ModelWeights<T>,
    opt: &mut OptimizerState<T>,
    corpus: &Corpus,
    indices: &[usize],
    micro: usize,
) -> Result<f64> {
    let batches: Vec<Seq2SeqBatch> = indices
        .chunks(micro)
        .map(|c| make_batch(&c.iter().map(|&i| &corpus.train[i]).collect::<Vec<_>>()))
        .collect::<Result<_>>()?;
    let total_tokens: usize = batches.iter().map(Seq2SeqBatch::target_tokens).sum();
    let mut acc: Option<Vec<Tensor<T>>> = None;
    let mut loss_sum = 0.0;
    for batch in &batches {
        let weight = batch.target_tokens() as f64 / total_tokens as f64;
        let mut tape = Tape::new();
        let p = bind(&mut tape, w, true);
        let vars: Vec<Var> = p.leaves().into_iter().map(|(_, &v)| v).collect();
        let loss = loss_tape(&mut tape, &w.config, &p, batch)?;
        loss_sum += tape.value(loss).data()[0].as_f64() * weight;
        let scaled = tape.scale(loss, T::lit(weight))?;
        let mut grads = tape.backward(scaled)?;
        let gs: Vec<Tensor<T>> = vars.iter().map(|&v| grads.take(v).expect("trainable leaf")).collect();
        match &mut acc {
            None => acc = Some(gs),
            Some(a) => {
                for (t, g) in a.iter_mut().zip(gs) {
                    for (x, y) in t.data_mut().iter_mut().zip(g.data()) {
                        *x += *y;
                    }
                }
            }
        }
    }
    let grads = acc.expect("at least one micro-batch");
    let grad_refs: Vec<&Tensor<T>> = grads.iter().collect();
    let mut params = w.named_tensors_mut();
    opt.step(&mut params, &grad_refs)?;
    Ok(loss_sum)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    /// Test pairs scored; all when unset.
    pub max_pairs: Option<usize>,
    pub max_new_tokens: usize,
    pub batch_size: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            max_pairs: None,
            max_new_tokens: 64,
            batch_size: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchSettings {
    pub enabled: bool,
    pub batch_sizes: Vec<usize>,
    /// Inputs drawn from the test split, cycled if the split is smaller.
    pub n_inputs: usize,
    /// Decoder steps forced for every input.
    pub steps: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings {
            enabled: true,
            batch_sizes: vec![1],
            n_inputs: 8,
            steps: 32,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSettings {
    pub eval: EvalSettings,
    pub bench: BenchSettings,
    /// Fine-tune variants whose spec equals the unpruned shape as well.
    pub finetune_identity: bool,
}

fn eval_pairs<'a>(corpus: &'a Corpus, settings: &EvalSettings) -> &'a [Pair] {
    let test: &[Pair] = if corpus.test.is_empty() { &corpus.train } else { &corpus.test };
    &test[..settings.max_pairs.unwrap_or(test.len()).min(test.len())]
}

/// Greedy-decodes the test split and scores it against the references.
pub fn evaluate<T: Scalar>(w: &ModelWeights<T>, corpus: &Corpus, settings: &EvalSettings) -> Result<RougeScores> {
    let pairs = eval_pairs(corpus, settings);
    if pairs.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let gen = GenerationConfig {
        max_new_tokens: settings.max_new_tokens,
        max_input_len: w.config.max_input_len,
        ..GenerationConfig::default()
    };
    let mut candidates = Vec::with_capacity(pairs.len());
    let mut traces = Vec::new();
    for chunk in pairs.chunks(settings.batch_size.max(1)) {
        let inputs: Vec<Vec<u32>> = chunk.iter().map(|p| p.source.clone()).collect();
        let g = generate(w, &inputs, &gen)?;
        candidates.extend(g.summaries(gen.eos_id));
        traces.push(g.trace);
    }
    let references: Vec<Vec<u32>> = pairs.iter().map(|p| p.summary.clone()).collect();
    let sep = corpus.vocab.tokens().iter().position(|t| t == crate::corpus::SENTENCE_SEP).map(|i| i as u32);
    let mut scores = score_corpus(&candidates, &references, sep.as_ref())?;
    scores.genl = mean_genl(&traces)?;
    Ok(scores)
}

pub fn bench_workload(corpus: &Corpus, bench: &BenchSettings) -> Result<Workload> {
    let pool: &[Pair] = if corpus.test.is_empty() { &corpus.train } else { &corpus.test };
    if pool.is_empty() || bench.n_inputs == 0 {
        return Err(Error::Empty("benchmark inputs"));
    }
    let inputs = (0..bench.n_inputs).map(|i| pool[i % pool.len()].source.clone()).collect();
    Ok(Workload::fixed_length(inputs, GenerationConfig::default(), bench.steps))
}

pub fn benchmark<T: Scalar>(w: &ModelWeights<T>, workload: &Workload, bench: &BenchSettings) -> Result<Vec<LatencyReport>> {
    if !bench.enabled {
        return Ok(Vec::new());
    }
    bench.batch_sizes.iter().map(|&b| measure(w, workload, b)).collect()
}

/// One grid cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub scale: String,
    pub spec: PruneSpec,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub total_params: usize,
    pub scores: RougeScores,
    /// Relative to the baseline's R-2 F1 and latency.
    pub comparison: Comparison,
    pub latency: Vec<LatencyReport>,
    /// Speedup over the baseline for each entry of `latency`.
    pub speedups: Vec<f64>,
    pub curve: Vec<f64>,
    pub valid_loss: f64,
}

impl ExperimentRecord {
    pub fn is_baseline(&self) -> bool {
        self.spec.enc_keep == self.n_enc_layers && self.spec.dec_keep == self.n_dec_layers
    }

    pub fn latency_at(&self, batch_size: usize) -> Option<&LatencyReport> {
        self.latency.iter().find(|r| r.batch_size == batch_size)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Speedups per batch size of `latency` against `baseline`.
fn speedups(baseline: &[LatencyReport], latency: &[LatencyReport]) -> Result<Vec<f64>> {
    latency
        .iter()
        .map(|r| {
            let b = baseline
                .iter()
                .find(|b| b.batch_size == r.batch_size)
                .ok_or_else(|| Error::InvalidArgument(format!("baseline lacks batch size {}", r.batch_size)))?;
            speedup(b, r)
        })
        .collect()
}

/// Output of the fine-tune stage, before benchmarking.
pub struct Trained<T> {
    pub spec: PruneSpec,
    pub weights: ModelWeights<T>,
    pub outcome: Option<TrainOutcome>,
}

/// Prune and (unless the spec is the identity) re-fine-tune.
pub fn shrink<T: Scalar>(
    baseline: &ModelWeights<T>,
    spec: &PruneSpec,
    corpus: &Corpus,
    hyper: &Hyperparams,
    settings: &RunSettings,
) -> Result<Trained<T>> {
    let mut w = prune(baseline, spec)?;
    let identity = spec.is_identity_for(baseline.config.n_enc_layers, baseline.config.n_dec_layers);
    let outcome = if identity && !settings.finetune_identity {
        None
    } else {
        Some(train(&mut w, corpus, hyper)?)
    };
    Ok(Trained {
        spec: *spec,
        weights: w,
        outcome,
    })
}

/// Evaluates and benchmarks a trained variant and assembles its record.
/// `reference` is the baseline record; `None` makes this the baseline.
pub fn assemble<T: Scalar>(
    scale: &str,
    base_config: &ModelConfig,
    trained: &Trained<T>,
    corpus: &Corpus,
    settings: &RunSettings,
    workload: Option<&Workload>,
    reference: Option<&ExperimentRecord>,
) -> Result<ExperimentRecord> {
    let w = &trained.weights;
    let scores = evaluate(w, corpus, &settings.eval)?;
    let latency = match workload {
        Some(wl) => benchmark(w, wl, &settings.bench)?,
        None => Vec::new(),
    };
    let (comparison, speedups) = match reference {
        None => (Comparison::baseline(), vec![1.0; latency.len()]),
        Some(base) => {
            let c = if base.scores.r2.f1 > 0.0 {
                compare(scores.r2.f1, base.scores.r2.f1)?
            } else {
                Comparison::undefined()
            };
            let s = speedups(&base.latency, &latency)?;
            let headline = latency
                .iter()
                .position(|r| r.batch_size == 1)
                .or(if s.is_empty() { None } else { Some(0) });
            match headline {
                Some(i) => (c.with_speedup(s[i]), s),
                None => (c, s),
            }
        }
    };
    let valid: &[Pair] = if corpus.valid.is_empty() { &corpus.train } else { &corpus.valid };
    let valid_loss = match &trained.outcome {
        Some(o) => o.best_valid_loss,
        None => mean_loss(w, valid, 16)?,
    };
    Ok(ExperimentRecord {
        scale: scale.to_string(),
        spec: trained.spec,
        n_enc_layers: base_config.n_enc_layers,
        n_dec_layers: base_config.n_dec_layers,
        total_params: w.total_params(),
        scores,
        comparison,
        latency,
        speedups,
        curve: trained.outcome.as_ref().map(|o| o.curve.clone()).unwrap_or_default(),
        valid_loss,
    })
}

/// Prune, fine-tune, evaluate, benchmark.
pub fn shrink_then_finetune<T: Scalar>(
    scale: &str,
    baseline: &ModelWeights<T>,
    spec: &PruneSpec,
    corpus: &Corpus,
    hyper: &Hyperparams,
    settings: &RunSettings,
    reference: Option<&ExperimentRecord>,
) -> Result<ExperimentRecord> {
    let trained = shrink(baseline, spec, corpus, hyper, settings)?;
    let workload = if settings.bench.enabled {
        Some(bench_workload(corpus, &settings.bench)?)
    } else {
        None
    };
    assemble(scale, &baseline.config, &trained, corpus, settings, workload.as_ref(), reference)
}

/// Worker count from `ASYMPRUNE_THREADS`, at least 1.
pub fn worker_threads() -> usize {
    std::env::var("ASYMPRUNE_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Runs `f` over `items` on up to `threads` workers, keeping input order.
fn parallel_map<I: Sync, O: Send>(items: &[I], threads: usize, f: impl Fn(&I) -> Result<O> + Sync) -> Result<Vec<O>> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<O>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.min(items.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every slot filled"))
        .collect()
}

/// A named model size in a grid or sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scale {
    pub name: String,
    pub model: ModelConfig,
}

/// Called with each finished record and the baseline checkpoint of each
/// scale, so callers can persist results as they appear.
pub trait GridSink<T> {
    fn baseline(&mut self, _scale: &str, _weights: &ModelWeights<T>) -> Result<()> {
        Ok(())
    }
    fn record(&mut self, _record: &ExperimentRecord) -> Result<()> {
        Ok(())
    }
}

impl<T> GridSink<T> for () {}

/// Baseline training plus the full pruning grid for every scale.
///
/// Fine-tuning of the variants runs on [`worker_threads`] workers; every
/// benchmark runs afterwards on the calling thread alone.
pub fn run_grid(
    scales: &[Scale],
    corpus: &Corpus,
    hyper: &Hyperparams,
    settings: &RunSettings,
    sink: &mut dyn GridSink<f64>,
) -> Result<Vec<ExperimentRecord>> {
    if scales.is_empty() {
        return Err(Error::Empty("grid scales"));
    }
    let threads = worker_threads();
    let workload = if settings.bench.enabled {
        Some(bench_workload(corpus, &settings.bench)?)
    } else {
        None
    };
    let mut records = Vec::new();
    for scale in scales {
        let cfg = &scale.model;
        if cfg.n_enc_layers != cfg.n_dec_layers {
            return Err(Error::Config {
                field: "n_dec_layers",
                reason: format!("grid needs equal stacks, got {}+{}", cfg.n_enc_layers, cfg.n_dec_layers),
            });
        }
        let specs = enumerate_grid(cfg.n_enc_layers)?;
        let mut base = ModelWeights::<f64>::init(cfg, hyper.seed)?;
        let outcome = train(&mut base, corpus, hyper)?;
        sink.baseline(&scale.name, &base)?;
        let base_trained = Trained {
            spec: specs[0],
            weights: base.clone(),
            outcome: Some(outcome),
        };
        let base_record = assemble(&scale.name, cfg, &base_trained, corpus, settings, workload.as_ref(), None)?;
        sink.record(&base_record)?;
        let variants = parallel_map(&specs[1..], threads, |spec| shrink(&base, spec, corpus, hyper, settings))?;
        records.push(base_record);
        let base_record = records.last().expect("just pushed").clone();
        for trained in &variants {
            let r = assemble(&scale.name, cfg, trained, corpus, settings, workload.as_ref(), Some(&base_record))?;
            sink.record(&r)?;
            records.push(r);
        }
    }
    Ok(records)
}

/// One point of the size-versus-quality curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalePoint {
    pub scale: String,
    pub total_params: usize,
    pub r2_f1: f64,
    /// `100 * (score / smallest - 1)`
    pub gain_pct: f64,
}

/// Relative gain of each score against the first.
pub fn scale_gains(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.len() < 2 {
        return Err(Error::InvalidArgument("a sweep needs at least 2 scales".into()));
    }
    scores.iter().map(|&s| Ok(compare(s, scores[0])?.impact_pct)).collect()
}

/// Trains each scale once and reports R-2 gains over the smallest.
pub fn run_scale_sweep(
    scales: &[Scale],
    corpus: &Corpus,
    hyper: &Hyperparams,
    settings: &RunSettings,
) -> Result<Vec<ScalePoint>> {
    if scales.len() < 2 {
        return Err(Error::InvalidArgument("a sweep needs at least 2 scales".into()));
    }
    let sizes: Vec<usize> = scales.iter().map(|s| crate::model::total_params_for(&s.model)).collect();
    if sizes.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidArgument("sweep scales must be ordered by parameter count".into()));
    }
    let trained = parallel_map(scales, worker_threads(), |s| {
        let mut w = ModelWeights::<f64>::init(&s.model, hyper.seed)?;
        train(&mut w, corpus, hyper)?;
        evaluate(&w, corpus, &settings.eval)
    })?;
    let r2: Vec<f64> = trained.iter().map(|s| s.r2.f1).collect();
    let gains = scale_gains(&r2)?;
    Ok(scales
        .iter()
        .zip(sizes)
        .zip(r2.iter().zip(gains))
        .map(|((s, n), (&r, g))| ScalePoint {
            scale: s.name.clone(),
            total_params: n,
            r2_f1: r,
            gain_pct: g,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_gain_example() {
        let g = scale_gains(&[29.03, 34.19]).unwrap();
        assert_eq!(g[0], 0.0);
        assert!((g[1] - 17.77).abs() < 0.01);
        assert!(scale_gains(&[1.0]).is_err());
    }

    #[test]
    fn accumulation_must_divide() {
        let h = Hyperparams {
            micro_batch: 10,
            ..Hyperparams::default()
        };
        assert!(matches!(h.validate(), Err(Error::Config { field: "micro_batch", .. })));
        assert_eq!(Hyperparams::default().accumulation_steps(), 4);
    }

    #[test]
    fn parallel_map_keeps_order() {
        let items: Vec<usize> = (0..20).collect();
        let out = parallel_map(&items, 4, |&i| Ok(i * i)).unwrap();
        assert_eq!(out, items.iter().map(|i| i * i).collect::<Vec<_>>());
    }
}
