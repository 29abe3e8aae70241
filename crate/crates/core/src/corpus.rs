//! Source/summary corpora: synthetic tasks, TSV ingestion, statistics and a
//! binary cache.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const EOS: u32 = 1;
pub const BOS: u32 = 2;
pub const UNK: u32 = 3;
/// Sentinel used by keyword extraction.
pub const MARK: u32 = 4;
pub const N_SPECIAL: u32 = 5;
/// Sentence separator inside TSV text.
pub const SENTENCE_SEP: &str = "<n>";

const SPECIAL_NAMES: [&str; 5] = ["<pad>", "</s>", "<s>", "<unk>", "<mark>"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    /// Vocabulary holding only the special tokens.
    pub fn new() -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for s in SPECIAL_NAMES {
            v.insert(s);
        }
        v
    }

    /// Specials plus `s5 .. s{size-1}`.
    pub fn synthetic(size: usize) -> Self {
        let mut v = Self::new();
        for i in N_SPECIAL as usize..size {
            v.insert(&format!("s{i}"));
        }
        v
    }

    pub fn insert(&mut self, token: &str) -> u32 {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len() as u32;
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map(String::as_str).unwrap_or("<unk>")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pair {
    pub source: Vec<u32>,
    pub summary: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub vocab: Vocab,
    pub train: Vec<Pair>,
    pub valid: Vec<Pair>,
    pub test: Vec<Pair>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.train.len() + self.valid.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all_pairs(&self) -> impl Iterator<Item = &Pair> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }

    /// Seeded shuffle of every pair into train/valid/test.
    pub fn resplit(self, seed: u64, valid_frac: f64, test_frac: f64) -> Result<Corpus> {
        if !(0.0..1.0).contains(&(valid_frac + test_frac)) || valid_frac < 0.0 || test_frac < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "split fractions {valid_frac} + {test_frac} must lie in [0, 1)"
            )));
        }
        let Corpus {
            vocab,
            train,
            valid,
            test,
        } = self;
        let mut pairs: Vec<Pair> = train.into_iter().chain(valid).chain(test).collect();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        pairs.shuffle(&mut rng);
        let n = pairs.len();
        let n_valid = (n as f64 * valid_frac).round() as usize;
        let n_test = (n as f64 * test_frac).round() as usize;
        let test = pairs.split_off(n - n_test);
        let valid = pairs.split_off(n - n_test - n_valid);
        Ok(Corpus {
            vocab,
            train: pairs,
            valid,
            test,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Copy the tokens flanked by `MARK` on both sides.
    KeywordExtract,
    /// Copy the first k tokens.
    LeadK,
    /// Emit the distinct source tokens in ascending order.
    SortedUnique,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub task: Task,
    pub seed: u64,
    pub n_pairs: usize,
    pub vocab_size: usize,
    pub src_len_min: usize,
    pub src_len_max: usize,
    pub compression_target: f64,
    #[serde(default = "default_frac")]
    pub valid_frac: f64,
    #[serde(default = "default_frac")]
    pub test_frac: f64,
}

fn default_frac() -> f64 {
    0.1
}

pub fn lead_k(source: &[u32], k: usize) -> Vec<u32> {
    source[..k.min(source.len())].to_vec()
}

pub fn sorted_unique(source: &[u32]) -> Vec<u32> {
    source.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
}

/// Tokens appearing as `MARK x MARK`, scanning left to right so that a
/// closing sentinel is never reused as an opening one.
pub fn keyword_extract(source: &[u32]) -> Vec<u32> {
    let mut out = Vec::new();
    let mut i = 0;
    while i + 2 < source.len() {
        if source[i] == MARK && source[i + 1] != MARK && source[i + 2] == MARK {
            out.push(source[i + 1]);
            i += 3;
        } else {
            i += 1;
        }
    }
    out
}

fn summary_len(src_len: usize, target: f64) -> usize {
    ((src_len as f64 / target).round() as usize).max(1)
}

fn check_feasible(spec: &SynthSpec) -> Result<()> {
    let symbols = spec.vocab_size.saturating_sub(N_SPECIAL as usize);
    let fail = |msg: String| Err(Error::Infeasible(msg));
    if !(spec.compression_target > 1.0) {
        return fail(format!("compression target {} must exceed 1", spec.compression_target));
    }
    if spec.src_len_min < 2 || spec.src_len_min > spec.src_len_max {
        return fail(format!("source length range {}..={}", spec.src_len_min, spec.src_len_max));
    }
    if symbols < 2 {
        return fail(format!("vocabulary of {} leaves fewer than 2 symbols", spec.vocab_size));
    }
    for len in spec.src_len_min..=spec.src_len_max {
        let k = summary_len(len, spec.compression_target);
        match spec.task {
            Task::LeadK if k >= len => return fail(format!("summary of {k} for source of {len}")),
            Task::KeywordExtract if 3 * k > len => {
                return fail(format!("{k} keywords need {} tokens, source has {len}", 3 * k))
            }
            Task::SortedUnique if k > symbols || k >= len => {
                return fail(format!("{k} distinct symbols in {len} tokens from {symbols}"))
            }
            _ => {}
        }
    }
    Ok(())
}

fn synth_pair(spec: &SynthSpec, rng: &mut Xoshiro256PlusPlus) -> Pair {
    let lo = N_SPECIAL;
    let hi = spec.vocab_size as u32;
    let len = rng.random_range(spec.src_len_min..=spec.src_len_max);
    let k = summary_len(len, spec.compression_target);
    match spec.task {
        Task::LeadK => {
            let source: Vec<u32> = (0..len).map(|_| rng.random_range(lo..hi)).collect();
            let summary = lead_k(&source, k);
            Pair { source, summary }
        }
        Task::SortedUnique => {
            let mut pool: Vec<u32> = (lo..hi).collect();
            pool.shuffle(rng);
            pool.truncate(k);
            let mut source = pool.clone();
            source.extend((k..len).map(|_| pool[rng.random_range(0..k)]));
            source.shuffle(rng);
            let summary = sorted_unique(&source);
            Pair { source, summary }
        }
        Task::KeywordExtract => {
            // k keyword slots of width 3 at random non-overlapping offsets
            let free = len - 3 * k;
            let mut cuts: Vec<usize> = (0..k).map(|_| rng.random_range(0..=free)).collect();
            cuts.sort_unstable();
            let mut source = Vec::with_capacity(len);
            let mut placed = 0;
            for &c in &cuts {
                while placed < c {
                    source.push(rng.random_range(lo..hi));
                    placed += 1;
                }
                source.extend([MARK, rng.random_range(lo..hi), MARK]);
            }
            while source.len() < len {
                source.push(rng.random_range(lo..hi));
            }
            let summary = keyword_extract(&source);
            Pair { source, summary }
        }
    }
}

/// Deterministic synthetic corpus.
pub fn synth_generate(spec: &SynthSpec) -> Result<Corpus> {
    check_feasible(spec)?;
    if spec.n_pairs == 0 {
        return Err(Error::Empty("synthetic corpus"));
    }
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(spec.seed);
    let pairs: Vec<Pair> = (0..spec.n_pairs).map(|_| synth_pair(spec, &mut rng)).collect();
    Corpus {
        vocab: Vocab::synthetic(spec.vocab_size),
        train: pairs,
        valid: Vec::new(),
        test: Vec::new(),
    }
    .resplit(spec.seed ^ 0x5eed, spec.valid_frac, spec.test_frac)
}

fn parse_line<'a>(line: &'a str, path: &Path, lineno: usize) -> Result<(&'a str, &'a str)> {
    let err = |msg: &str| Error::Parse {
        path: path.to_path_buf(),
        line: lineno,
        msg: msg.to_string(),
    };
    let mut parts = line.split('\t');
    let (src, sum) = match (parts.next(), parts.next(), parts.next()) {
        (Some(a), Some(b), None) => (a, b),
        (_, None, _) => return Err(err("expected a tab between source and summary")),
        _ => return Err(err("more than one tab")),
    };
    if src.split_whitespace().next().is_none() {
        return Err(err("empty source"));
    }
    if sum.split_whitespace().next().is_none() {
        return Err(err("empty summary"));
    }
    Ok((src, sum))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

/// Loads `source<TAB>summary` lines, building the vocabulary in order of
/// first appearance. All pairs land in `train`.
pub fn load_tsv(path: &Path) -> Result<Corpus> {
    let mut vocab = Vocab::new();
    let pairs = load_tsv_extending(path, &mut vocab)?;
    Ok(Corpus {
        vocab,
        train: pairs,
        valid: Vec::new(),
        test: Vec::new(),
    })
}

/// Like [`load_tsv`], adding unseen tokens to an existing vocabulary.
pub fn load_tsv_extending(path: &Path, vocab: &mut Vocab) -> Result<Vec<Pair>> {
    let text = read_text(path)?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let (src, sum) = parse_line(line, path, i + 1)?;
        let source = src.split_whitespace().map(|t| vocab.insert(t)).collect();
        let summary = sum.split_whitespace().map(|t| vocab.insert(t)).collect();
        pairs.push(Pair { source, summary });
    }
    Ok(pairs)
}

/// Loads pairs against a fixed vocabulary; unknown tokens become `UNK`.
pub fn load_tsv_with_vocab(path: &Path, vocab: &Vocab) -> Result<Vec<Pair>> {
    let text = read_text(path)?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let (src, sum) = parse_line(line, path, i + 1)?;
            Ok(Pair {
                source: vocab.encode(src),
                summary: vocab.encode(sum),
            })
        })
        .collect()
}

pub fn write_tsv(path: &Path, vocab: &Vocab, pairs: &[Pair]) -> Result<()> {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&vocab.decode(&p.source));
        out.push('\t');
        out.push_str(&vocab.decode(&p.summary));
        out.push('\n');
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub mean_source_len: f64,
    pub mean_summary_len: f64,
    /// Mean over pairs of `source_len / summary_len`.
    pub compression_factor: f64,
}

pub fn stats(corpus: &Corpus) -> Result<CorpusStats> {
    let n = corpus.len();
    if n == 0 {
        return Err(Error::Empty("corpus"));
    }
    let (mut src, mut sum, mut ratio) = (0.0, 0.0, 0.0);
    for p in corpus.all_pairs() {
        src += p.source.len() as f64;
        sum += p.summary.len() as f64;
        ratio += p.source.len() as f64 / p.summary.len() as f64;
    }
    let n_f = n as f64;
    Ok(CorpusStats {
        n_train: corpus.train.len(),
        n_valid: corpus.valid.len(),
        n_test: corpus.test.len(),
        mean_source_len: src / n_f,
        mean_summary_len: sum / n_f,
        compression_factor: ratio / n_f,
    })
}

impl CorpusStats {
    pub const TABLE_HEADER: &'static str =
        "| Dataset | Train | Validation | Test | Source | Summary | Compression |\n|---|---|---|---|---|---|---|";

    pub fn table_row(&self, name: &str) -> String {
        format!(
            "| {name} | {} | {} | {} | {:.2} | {:.2} | {:.2} |",
            self.n_train, self.n_valid, self.n_test, self.mean_source_len, self.mean_summary_len, self.compression_factor
        )
    }
}

const CACHE_MAGIC: &[u8; 8] = b"ASYMPRCO";
const CACHE_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_ids(out: &mut Vec<u8>, ids: &[u32]) {
    put_u32(out, ids.len() as u32);
    for &i in ids {
        put_u32(out, i);
    }
}

pub fn cache_bytes(corpus: &Corpus) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CACHE_MAGIC);
    put_u32(&mut out, CACHE_VERSION);
    put_u32(&mut out, corpus.vocab.len() as u32);
    for t in corpus.vocab.tokens() {
        put_u32(&mut out, t.len() as u32);
        out.extend_from_slice(t.as_bytes());
    }
    for split in [&corpus.train, &corpus.valid, &corpus.test] {
        out.extend_from_slice(&(split.len() as u64).to_le_bytes());
        for p in split {
            put_ids(&mut out, &p.source);
            put_ids(&mut out, &p.summary);
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("corpus cache truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn ids(&mut self, vocab: usize) -> Result<Vec<u32>> {
        let n = self.u32()? as usize;
        let raw = self.take(n * 4)?;
        let ids: Vec<u32> = raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if let Some(&id) = ids.iter().find(|&&i| i as usize >= vocab) {
            return Err(Error::TokenOutOfRange { id, vocab });
        }
        Ok(ids)
    }
}

pub fn corpus_from_cache(bytes: &[u8]) -> Result<Corpus> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    if c.take(8)? != CACHE_MAGIC {
        return Err(Error::Format("not a corpus cache (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != CACHE_VERSION {
        return Err(Error::Format(format!("unsupported corpus cache version {version}")));
    }
    let n_vocab = c.u32()? as usize;
    let mut vocab = Vocab {
        tokens: Vec::new(),
        index: HashMap::new(),
    };
    for _ in 0..n_vocab {
        let len = c.u32()? as usize;
        let tok = std::str::from_utf8(c.take(len)?).map_err(|_| Error::Format("vocab entry is not UTF-8".into()))?;
        vocab.insert(tok);
    }
    if vocab.len() != n_vocab || vocab.tokens[..SPECIAL_NAMES.len()] != SPECIAL_NAMES {
        return Err(Error::Format("corpus cache vocabulary is malformed".into()));
    }
    let mut splits = Vec::new();
    for _ in 0..3 {
        let n = u64::from_le_bytes(c.take(8)?.try_into().expect("8 bytes")) as usize;
        let mut pairs = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let source = c.ids(n_vocab)?;
            let summary = c.ids(n_vocab)?;
            pairs.push(Pair { source, summary });
        }
        splits.push(pairs);
    }
    if c.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after corpus cache".into()));
    }
    let test = splits.pop().expect("3 splits");
    let valid = splits.pop().expect("3 splits");
    let train = splits.pop().expect("3 splits");
    Ok(Corpus {
        vocab,
        train,
        valid,
        test,
    })
}

pub fn save_cache(corpus: &Corpus, path: &Path) -> Result<()> {
    fs::write(path, cache_bytes(corpus)).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_cache(path: &Path) -> Result<Corpus> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    corpus_from_cache(&bytes)
}
