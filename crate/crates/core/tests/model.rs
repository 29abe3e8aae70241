use asymprune::autodiff::Tape;
use asymprune::gradcheck;
use asymprune::model::forward::loss_tape;
use asymprune::model::{
    decode_full, decode_step, encode, teacher_forced_logits, FeedForward, KvCache, ModelConfig, ModelWeights,
    Seq2SeqBatch,
};
use asymprune::Tensor;

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn configs() -> Vec<ModelConfig> {
    let mut gated = ModelConfig::toy(16, 2, 24, 2, 30);
    gated.feed_forward = FeedForward::GatedGelu;
    gated.tie_embeddings = false;
    gated.d_kv = 5;
    let mut small_buckets = ModelConfig::toy(12, 3, 20, 3, 25);
    small_buckets.rel_pos_buckets = 6;
    small_buckets.rel_pos_max_distance = 5;
    vec![ModelConfig::toy(16, 2, 32, 2, 30), gated, small_buckets]
}

#[test]
fn cached_decoding_matches_full_recompute() {
    for cfg in configs() {
        let w = ModelWeights::<f64>::init(&cfg, 5).unwrap();
        let src = vec![vec![5, 6, 7, 8, 9, 10, 11], vec![12, 13, 14]];
        let enc = encode(&w, &src, 0).unwrap();
        let steps = [[2u32, 2], [7, 8], [9, 1], [15, 16], [4, 4], [20, 21]];
        let mut cache = KvCache::new(&cfg, &enc);
        let mut prefixes = vec![Vec::new(), Vec::new()];
        for step in steps {
            let cached = decode_step(&w, &enc, &mut cache, &step).unwrap();
            for b in 0..2 {
                prefixes[b].push(step[b]);
            }
            let full = decode_full(&w, &enc, &prefixes).unwrap();
            let t = prefixes[0].len();
            let v = cfg.vocab_size;
            for b in 0..2 {
                let last = &full.data()[(b * t + t - 1) * v..(b * t + t) * v];
                let got = &cached.data()[b * v..(b + 1) * v];
                assert!(max_abs_diff(last, got) < 1e-9, "{cfg:?}");
            }
        }
    }
}

#[test]
fn inference_path_matches_tape_forward() {
    for cfg in configs() {
        let w = ModelWeights::<f64>::init(&cfg, 9).unwrap();
        let pairs: Vec<(Vec<u32>, Vec<u32>)> = vec![(vec![5, 6, 7, 8, 9], vec![7, 9, 11]), (vec![10, 11], vec![12, 13, 14, 15])];
        let refs: Vec<(&[u32], &[u32])> = pairs.iter().map(|(s, t)| (s.as_slice(), t.as_slice())).collect();
        let batch = Seq2SeqBatch::new(&refs, 0, 2, 1).unwrap();
        let tape_logits = teacher_forced_logits(&w, &batch).unwrap();
        let enc = encode(&w, &pairs.iter().map(|p| p.0.clone()).collect::<Vec<_>>(), 0).unwrap();
        let prefixes: Vec<Vec<u32>> = batch
            .dec_input
            .chunks(batch.tgt_len)
            .map(|c| c.iter().map(|&x| x as u32).collect())
            .collect();
        let full = decode_full(&w, &enc, &prefixes).unwrap();
        assert!(max_abs_diff(full.data(), tape_logits.data()) < 1e-9);
    }
}

#[test]
fn model_loss_passes_gradcheck() {
    let mut cfg = ModelConfig::toy(6, 2, 8, 1, 9);
    cfg.feed_forward = FeedForward::GatedGelu;
    cfg.tie_embeddings = false;
    cfg.rel_pos_buckets = 4;
    cfg.rel_pos_max_distance = 4;
    let w = ModelWeights::<f64>::init(&cfg, 2).unwrap();
    let pairs: Vec<(Vec<u32>, Vec<u32>)> = vec![(vec![4, 5, 6], vec![7, 8]), (vec![8], vec![5])];
    let refs: Vec<(&[u32], &[u32])> = pairs.iter().map(|(s, t)| (s.as_slice(), t.as_slice())).collect();
    let batch = Seq2SeqBatch::new(&refs, 0, 2, 1).unwrap();
    let inputs: Vec<Tensor<f64>> = w.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
    let result = gradcheck::check(&inputs, 1e-5, |tape: &mut Tape<f64>, vars| {
        let mut it = vars.iter().copied();
        let p = w.params.map(|_, _| it.next().unwrap());
        loss_tape(tape, &cfg, &p, &batch)
    })
    .unwrap();
    assert!(result.max_rel_error() < 1e-4, "{}", result.max_rel_error());
}
