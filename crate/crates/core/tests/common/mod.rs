#![allow(dead_code)]

//! Slow, obviously-correct reference implementations shared by the
//! integration tests.

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

pub fn ratio(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Clipped n-gram matching by removing each matched reference n-gram from a list.
pub fn rouge_n(cand: &[u8], refr: &[u8], n: usize) -> (f64, f64, f64) {
    let grams = |s: &[u8]| -> Vec<Vec<u8>> {
        if n == 0 || s.len() < n {
            Vec::new()
        } else {
            (0..=s.len() - n).map(|i| s[i..i + n].to_vec()).collect()
        }
    };
    let cg = grams(cand);
    let mut rg = grams(refr);
    let total_ref = rg.len();
    let mut hits = 0;
    for g in &cg {
        if let Some(pos) = rg.iter().position(|x| x == g) {
            rg.remove(pos);
            hits += 1;
        }
    }
    let p = ratio(hits, cg.len());
    let r = ratio(hits, total_ref);
    (p, r, f1(p, r))
}

pub fn is_subsequence(sub: &[u8], s: &[u8]) -> bool {
    let mut it = s.iter();
    sub.iter().all(|x| it.any(|y| y == x))
}

/// LCS length by trying every subsequence of the shorter side.
pub fn lcs_brute(a: &[u8], b: &[u8]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let mut best = 0;
    for mask in 0u32..(1 << short.len()) {
        let k = mask.count_ones() as usize;
        if k <= best {
            continue;
        }
        let sub: Vec<u8> = (0..short.len()).filter(|i| mask >> i & 1 == 1).map(|i| short[i]).collect();
        if is_subsequence(&sub, long) {
            best = k;
        }
    }
    best
}

/// LCS length by memoized recursion over suffixes.
pub fn lcs_memo(a: &[u8], b: &[u8]) -> usize {
    fn go(a: &[u8], b: &[u8], i: usize, j: usize, memo: &mut Vec<Vec<Option<usize>>>) -> usize {
        if i == a.len() || j == b.len() {
            return 0;
        }
        if let Some(v) = memo[i][j] {
            return v;
        }
        let v = if a[i] == b[j] {
            1 + go(a, b, i + 1, j + 1, memo)
        } else {
            go(a, b, i + 1, j, memo).max(go(a, b, i, j + 1, memo))
        };
        memo[i][j] = Some(v);
        v
    }
    let mut memo = vec![vec![None; b.len()]; a.len()];
    go(a, b, 0, 0, &mut memo)
}

/// Summary-level LCS as computed by the `rouge_score` package: nested-list
/// DP table, backtrack from the end, per-token budget counters.
pub fn rouge_lsum(cand: &[Vec<u8>], refs: &[Vec<u8>]) -> (f64, f64, f64) {
    fn table(r: &[u8], c: &[u8]) -> Vec<Vec<usize>> {
        let mut t = vec![vec![0; c.len() + 1]; r.len() + 1];
        for i in 1..=r.len() {
            for j in 1..=c.len() {
                t[i][j] = if r[i - 1] == c[j - 1] {
                    t[i - 1][j - 1] + 1
                } else {
                    t[i - 1][j].max(t[i][j - 1])
                };
            }
        }
        t
    }
    fn backtrack(t: &[Vec<usize>], r: &[u8], c: &[u8]) -> Vec<usize> {
        let (mut i, mut j) = (r.len(), c.len());
        let mut lcs = Vec::new();
        while i > 0 && j > 0 {
            if r[i - 1] == c[j - 1] {
                lcs.insert(0, i - 1);
                i -= 1;
                j -= 1;
            } else if t[i][j - 1] > t[i - 1][j] {
                j -= 1;
            } else {
                i -= 1;
            }
        }
        lcs
    }
    let m: usize = refs.iter().map(Vec::len).sum();
    let n: usize = cand.iter().map(Vec::len).sum();
    if m == 0 || n == 0 {
        return (0.0, 0.0, 0.0);
    }
    let mut cnt_r = [0usize; 256];
    let mut cnt_c = [0usize; 256];
    for &t in refs.iter().flatten() {
        cnt_r[t as usize] += 1;
    }
    for &t in cand.iter().flatten() {
        cnt_c[t as usize] += 1;
    }
    let mut hits = 0;
    for r in refs {
        let mut idx: Vec<usize> = Vec::new();
        for c in cand {
            for i in backtrack(&table(r, c), r, c) {
                if !idx.contains(&i) {
                    idx.push(i);
                }
            }
        }
        idx.sort();
        for i in idx {
            let t = r[i] as usize;
            if cnt_c[t] > 0 && cnt_r[t] > 0 {
                hits += 1;
                cnt_c[t] -= 1;
                cnt_r[t] -= 1;
            }
        }
    }
    let p = hits as f64 / n as f64;
    let r = hits as f64 / m as f64;
    (p, r, f1(p, r))
}

pub fn split(s: &[u8], sep: u8) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    for &t in s {
        if t == sep {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else {
            cur.push(t);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Every sequence over `0..alphabet` of exactly `len` symbols.
pub fn all_sequences(alphabet: u8, len: usize) -> Vec<Vec<u8>> {
    let count = (alphabet as usize).pow(len as u32);
    (0..count)
        .map(|mut code| {
            (0..len)
                .map(|_| {
                    let s = (code % alphabet as usize) as u8;
                    code /= alphabet as usize;
                    s
                })
                .collect()
        })
        .collect()
}

/// Splitmix64, for test data independent of the crate's own RNG use.
pub struct Rng(pub u64);

impl Rng {
    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }
    pub fn seq(&mut self, alphabet: u8, len: usize) -> Vec<u8> {
        (0..len).map(|_| self.below(alphabet as usize) as u8).collect()
    }
}

/// Compares every ROUGE variant of the crate against the oracles above,
/// treating `sep` as the sentence separator for ROUGE-Lsum.
pub fn check_rouge_pair(c: &[u8], r: &[u8], sep: u8, exhaustive_lcs: bool) -> Result<(), String> {
    use asymprune::metrics::{lcs_indices, lcs_len, rouge_l_sentence, rouge_lsum as lsum, rouge_n as rn, Prf};
    let close = |got: Prf, want: (f64, f64, f64), what: &str| -> Result<(), String> {
        let d = (got.precision - want.0).abs().max((got.recall - want.1).abs()).max((got.f1 - want.2).abs());
        if d > 1e-12 {
            Err(format!("{what} {c:?} vs {r:?}: got {got:?}, want {want:?}"))
        } else {
            Ok(())
        }
    };
    for n in 1..=3 {
        close(rn(c, r, n), rouge_n(c, r, n), &format!("rouge-{n}"))?;
    }
    let l = if exhaustive_lcs { lcs_brute(c, r) } else { lcs_memo(c, r) };
    if lcs_len(c, r) != l {
        return Err(format!("lcs {c:?} vs {r:?}: got {}, want {l}", lcs_len(c, r)));
    }
    let idx = lcs_indices(r, c);
    let sub: Vec<u8> = idx.iter().map(|&i| r[i]).collect();
    if idx.len() != l || idx.windows(2).any(|w| w[0] >= w[1]) || !is_subsequence(&sub, c) {
        return Err(format!("lcs indices {idx:?} for {r:?} / {c:?}"));
    }
    let (p, rec) = (ratio(l, c.len()), ratio(l, r.len()));
    close(rouge_l_sentence(c, r), (p, rec, f1(p, rec)), "rouge-l")?;
    let (cs, rs) = (split(c, sep), split(r, sep));
    close(lsum(&cs, &rs), rouge_lsum(&cs, &rs), "rouge-lsum")
}

/// A random small model and a batch of 1 to 3 random inputs.
pub fn random_case(seed: u64) -> (asymprune::Weights64, Vec<Vec<u32>>) {
    use asymprune::model::{FeedForward, ModelConfig, ModelWeights};
    let mut rng = Rng(seed);
    let heads = 1 + rng.below(3);
    let d = heads * (2 + rng.below(4));
    let layers_e = 1 + rng.below(3);
    let layers_d = 1 + rng.below(3);
    let vocab = 12 + rng.below(20);
    let mut cfg = ModelConfig::toy(d, heads, d + rng.below(2 * d), layers_e, vocab);
    cfg.n_dec_layers = layers_d;
    cfg.rel_pos_buckets = 4 + rng.below(12);
    cfg.rel_pos_max_distance = 4 + rng.below(20);
    if rng.below(2) == 1 {
        cfg.feed_forward = FeedForward::GatedGelu;
        cfg.tie_embeddings = false;
    }
    let w = ModelWeights::<f64>::init(&cfg, seed ^ 0xabc).unwrap();
    let batch = 1 + rng.below(3);
    let inputs = (0..batch)
        .map(|_| {
            let len = 1 + rng.below(12);
            (0..len).map(|_| 3 + rng.below(vocab - 3) as u32).collect()
        })
        .collect();
    (w, inputs)
}

/// Cached and uncached greedy generation on one random case: token
/// agreement and the largest per-step logit difference.
pub fn cache_equivalence(seed: u64) -> Result<f64, String> {
    use asymprune::generation::{generate, generate_uncached, GenerationConfig};
    let (w, inputs) = random_case(seed);
    let cfg = GenerationConfig {
        max_new_tokens: 10,
        record_logits: true,
        ..GenerationConfig::default()
    };
    let a = generate(&w, &inputs, &cfg).map_err(|e| e.to_string())?;
    let b = generate_uncached(&w, &inputs, &cfg).map_err(|e| e.to_string())?;
    if a.tokens != b.tokens {
        return Err(format!("case {seed}: tokens {:?} vs {:?}", a.tokens, b.tokens));
    }
    if a.logits.len() != b.logits.len() {
        return Err(format!("case {seed}: step counts differ"));
    }
    let mut worst = 0.0f64;
    for (x, y) in a.logits.iter().zip(&b.logits) {
        for (p, q) in x.data().iter().zip(y.data()) {
            worst = worst.max((p - q).abs());
        }
    }
    Ok(worst)
}

fn random_tensor(rng: &mut Rng, shape: &[usize]) -> asymprune::Tensor<f64> {
    asymprune::Tensor::from_fn(shape, |_| (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0)
}

/// Worst relative gradcheck error for every tape primitive. Each output is
/// reduced as `sum(out * R)` with a fixed random `R`, so every output
/// element carries a distinct upstream gradient.
pub fn primitive_gradchecks() -> Vec<(&'static str, f64)> {
    use asymprune::autodiff::{Tape, Var};
    use asymprune::gradcheck::check;
    use asymprune::Result;

    type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;
    let mut rng = Rng(7);
    let mut cases: Vec<(&'static str, Vec<Vec<usize>>, Build)> = vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("matmul_ta", vec![vec![2, 4, 3], vec![2, 4, 5]], Box::new(|t, v| t.matmul_t(v[0], v[1], true, false))),
        ("matmul_tb", vec![vec![2, 3, 4], vec![2, 5, 4]], Box::new(|t, v| t.matmul_t(v[0], v[1], false, true))),
        ("matmul_tab", vec![vec![4, 3], vec![5, 4]], Box::new(|t, v| t.matmul_t(v[0], v[1], true, true))),
        ("add", vec![vec![3, 4], vec![3, 4]], Box::new(|t, v| t.add(v[0], v[1]))),
        ("add_broadcast", vec![vec![2, 3, 4], vec![3, 4]], Box::new(|t, v| t.add_broadcast(v[0], v[1]))),
        ("mul", vec![vec![3, 4], vec![3, 4]], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("scale", vec![vec![5]], Box::new(|t, v| t.scale(v[0], -1.7))),
        ("relu", vec![vec![4, 5]], Box::new(|t, v| t.relu(v[0]))),
        ("gelu", vec![vec![4, 5]], Box::new(|t, v| t.gelu(v[0]))),
        ("softmax_0", vec![vec![3, 4]], Box::new(|t, v| t.softmax(v[0], 0))),
        ("softmax_last", vec![vec![2, 3, 4]], Box::new(|t, v| t.softmax(v[0], 2))),
        ("softmax_mid", vec![vec![2, 3, 4]], Box::new(|t, v| t.softmax(v[0], 1))),
        ("rms_norm", vec![vec![3, 5], vec![5]], Box::new(|t, v| t.rms_norm(v[0], v[1], 1e-6))),
        ("gather", vec![vec![5, 3]], Box::new(|t, v| t.gather(v[0], &[4, 0, 4, 2]))),
        ("permute", vec![vec![2, 3, 4]], Box::new(|t, v| t.permute(v[0], &[2, 0, 1]))),
        ("reshape", vec![vec![2, 6]], Box::new(|t, v| t.reshape(v[0], &[3, 4]))),
        ("sum", vec![vec![2, 3]], Box::new(|t, v| t.sum(v[0]))),
        (
            "cross_entropy",
            vec![vec![4, 6]],
            Box::new(|t, v| t.cross_entropy(v[0], &[Some(1), None, Some(5), Some(1)])),
        ),
    ];
    let mut out = Vec::new();
    for (name, shapes, build) in cases.drain(..) {
        let inputs: Vec<_> = shapes.iter().map(|s| random_tensor(&mut rng, s)).collect();
        let probe = {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
            let y = build(&mut tape, &vars).unwrap();
            tape.value(y).shape().to_vec()
        };
        let weights = random_tensor(&mut rng, &probe);
        let r = check(&inputs, 1e-5, |tape, vars| {
            let y = build(tape, vars)?;
            let w = tape.constant(weights.clone());
            let y = tape.mul(y, w)?;
            tape.sum(y)
        })
        .unwrap();
        out.push((name, r.max_rel_error()));
    }
    out
}

/// Gradcheck of the full loss of a one-encoder-layer, one-decoder-layer
/// model with respect to every parameter.
pub fn model_gradcheck(ff: asymprune::model::FeedForward, tied: bool) -> f64 {
    use asymprune::autodiff::Tape;
    use asymprune::model::forward::loss_tape;
    use asymprune::model::{ModelConfig, ModelWeights, Seq2SeqBatch};

    let mut cfg = ModelConfig::toy(6, 2, 8, 1, 9);
    cfg.feed_forward = ff;
    cfg.tie_embeddings = tied;
    cfg.rel_pos_buckets = 4;
    cfg.rel_pos_max_distance = 4;
    let w = ModelWeights::<f64>::init(&cfg, 2).unwrap();
    let pairs: Vec<(Vec<u32>, Vec<u32>)> = vec![(vec![4, 5, 6], vec![7, 8]), (vec![8], vec![5])];
    let refs: Vec<(&[u32], &[u32])> = pairs.iter().map(|(s, t)| (s.as_slice(), t.as_slice())).collect();
    let batch = Seq2SeqBatch::new(&refs, 0, 2, 1).unwrap();
    let inputs: Vec<_> = w.named_tensors().into_iter().map(|(_, t)| t.clone()).collect();
    asymprune::gradcheck::check(&inputs, 1e-5, |tape: &mut Tape<f64>, vars| {
        let mut it = vars.iter().copied();
        let p = w.params.map(|_, _| it.next().unwrap());
        loss_tape(tape, &cfg, &p, &batch)
    })
    .unwrap()
    .max_rel_error()
}
