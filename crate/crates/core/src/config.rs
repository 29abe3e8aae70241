//! Experiment configuration files (TOML).
//!
//! ```toml
//! name = "toy"
//! seed = 7
//! out_dir = "runs"
//! grid = true
//!
//! [[scales]]
//! name = "small"
//! [scales.model]
//! d_model = 32
//! n_heads = 4
//! d_kv = 8
//! d_ff = 64
//! n_enc_layers = 6
//! n_dec_layers = 6
//! vocab_size = 64
//!
//! [corpus.synth]
//! task = "keyword_extract"
//! seed = 1
//! n_pairs = 600
//! vocab_size = 64
//! src_len_min = 12
//! src_len_max = 24
//! compression_target = 4.0
//!
//! [hyper]
//! lr = 1e-3
//! epochs = 10
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{load_cache, load_tsv, save_cache, synth_generate, Corpus, SynthSpec};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::pipeline::{Hyperparams, RunSettings, Scale};
use crate::pruning::PruneSpec;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSource {
    pub synth: Option<SynthSpec>,
    /// Tab-separated `source<TAB>summary` lines.
    pub tsv: Option<PathBuf>,
    /// Binary cache, read when present and written after the first load.
    pub cache: Option<PathBuf>,
    #[serde(default = "default_frac")]
    pub valid_frac: f64,
    #[serde(default = "default_frac")]
    pub test_frac: f64,
    #[serde(default)]
    pub split_seed: u64,
}

fn default_frac() -> f64 {
    0.1
}

impl CorpusSource {
    pub fn load(&self) -> Result<Corpus> {
        if let Some(cache) = &self.cache {
            if cache.exists() {
                return load_cache(cache);
            }
        }
        let corpus = match (&self.synth, &self.tsv) {
            (Some(spec), None) => synth_generate(spec)?,
            (None, Some(path)) => load_tsv(path)?.resplit(self.split_seed, self.valid_frac, self.test_frac)?,
            _ => {
                return Err(Error::Config {
                    field: "corpus",
                    reason: "set exactly one of `synth` or `tsv`".into(),
                })
            }
        };
        if let Some(cache) = &self.cache {
            if let Some(dir) = cache.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
            }
            save_cache(&corpus, cache)?;
        }
        Ok(corpus)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Overrides `hyper.seed` when set.
    pub seed: Option<u64>,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    /// Single-scale shorthand for `scales`.
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub scales: Vec<Scale>,
    pub corpus: CorpusSource,
    #[serde(default)]
    pub hyper: Hyperparams,
    #[serde(default)]
    pub run: RunSettings,
    #[serde(default = "default_true")]
    pub grid: bool,
    /// Used by `prune` and `finetune`.
    pub prune: Option<PruneSpec>,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config, resolving relative corpus paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.corpus.tsv, &mut cfg.corpus.cache].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config {
                field: "name",
                reason: format!("{:?} is not a plain directory name", self.name),
            });
        }
        if self.model.is_some() && !self.scales.is_empty() {
            return Err(Error::Config {
                field: "model",
                reason: "give either `model` or `scales`, not both".into(),
            });
        }
        for s in self.scales() {
            s.model.validate()?;
        }
        self.hyper.validate()
    }

    /// All scales, with the `model` shorthand named after the experiment.
    pub fn scales(&self) -> Vec<Scale> {
        match &self.model {
            Some(m) => vec![Scale {
                name: self.name.clone(),
                model: m.clone(),
            }],
            None => self.scales.clone(),
        }
    }

    pub fn first_scale(&self) -> Result<Scale> {
        self.scales().into_iter().next().ok_or(Error::Config {
            field: "scales",
            reason: "no model configured".into(),
        })
    }

    pub fn apply_seed(&mut self, seed: Option<u64>) {
        if let Some(s) = seed.or(self.seed) {
            self.seed = Some(s);
            self.hyper.seed = s;
        }
    }

    /// Hyperparameters with the top-level seed applied.
    pub fn hyperparams(&self) -> Hyperparams {
        let mut h = self.hyper.clone();
        if let Some(s) = self.seed {
            h.seed = s;
        }
        h
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
name = "toy"
seed = 7

[model]
d_model = 16
n_heads = 2
d_kv = 8
d_ff = 32
n_enc_layers = 2
n_dec_layers = 2
vocab_size = 40

[corpus.synth]
task = "lead_k"
seed = 1
n_pairs = 20
vocab_size = 40
src_len_min = 8
src_len_max = 12
compression_target = 4.0

[hyper]
lr = 0.001
micro_batch = 8
effective_batch = 16

[run.bench]
enabled = false
"#;

    #[test]
    fn parses_and_applies_seed() {
        let cfg = ExperimentConfig::from_toml(SAMPLE).unwrap();
        assert_eq!(cfg.hyperparams().seed, 7);
        assert_eq!(cfg.hyper.effective_batch, 16);
        assert!(!cfg.run.bench.enabled);
        assert_eq!(cfg.scales()[0].name, "toy");
        assert_eq!(cfg.run_dir(), PathBuf::from("runs/toy"));
        assert_eq!(cfg.corpus.load().unwrap().len(), 20);
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = ExperimentConfig::from_toml(SAMPLE).unwrap();
        let again = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_names() {
        let bad = SAMPLE.replace("seed = 7", "seed = 7\nbogus = 1");
        assert!(matches!(ExperimentConfig::from_toml(&bad), Err(Error::Toml(_))));
        let bad = SAMPLE.replace("name = \"toy\"", "name = \"a/b\"");
        assert!(matches!(ExperimentConfig::from_toml(&bad), Err(Error::Config { field: "name", .. })));
    }
}
