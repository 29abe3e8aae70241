use std::path::{Path, PathBuf};
use std::process::ExitCode;

use asymprune::config::ExperimentConfig;
use asymprune::corpus::{load_tsv, load_tsv_extending, Corpus, EOS};
use asymprune::generation::{generate, GenerationConfig};
use asymprune::metrics::score_corpus;
use asymprune::model::{checkpoint, ModelWeights};
use asymprune::pipeline::{bench_workload, benchmark, evaluate, run_grid, run_scale_sweep, train};
use asymprune::pruning::{prune, PruneSpec, Strategy};
use asymprune::report::{RunDir, RunWriter};
use asymprune::{Error, Weights64};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "asymprune", version, about = "Asymmetric encoder/decoder pruning experiments")]
struct Cli {
    /// Overrides the seed of the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory; defaults to `<out_dir>/<name>` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the baseline of the first configured scale.
    Train,
    /// Remove layers from a checkpoint.
    Prune(PruneArgs),
    /// Continue training a checkpoint on the configured corpus.
    Finetune(CheckpointArg),
    /// Greedy-decode sources with a checkpoint.
    Generate(GenerateArgs),
    /// Score summaries against references, or a checkpoint on the test split.
    Evaluate(EvaluateArgs),
    /// Time greedy generation of a checkpoint.
    Benchmark(BenchmarkArgs),
    /// Baseline plus the full pruning grid for every scale.
    Grid,
    /// Train every scale once and report gains over the smallest.
    Sweep,
    /// Rebuild report files from stored records.
    Report(ReportArgs),
}

#[derive(Args)]
struct CheckpointArg {
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    EvenlySpaced,
    FirstK,
    LastK,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    enc_keep: Option<usize>,
    #[arg(long)]
    dec_keep: Option<usize>,
    #[arg(long, value_enum)]
    strategy: Option<StrategyArg>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// One whitespace-tokenized source per line; the test split when absent.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    max_new_tokens: usize,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Reference TSV (`source<TAB>summary`).
    #[arg(long, requires = "hyp", conflicts_with = "checkpoint")]
    r#ref: Option<PathBuf>,
    /// Hypothesis TSV, line-aligned with `--ref`.
    #[arg(long, requires = "ref")]
    hyp: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct BenchmarkArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_delimiter = ',')]
    batch_sizes: Option<Vec<usize>>,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    runs: PathBuf,
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

type Outcome = Result<(), Failure>;

struct Ctx {
    seed: Option<u64>,
    config: Option<PathBuf>,
    out: Option<PathBuf>,
}

impl Ctx {
    fn config(&self) -> Result<ExperimentConfig, Failure> {
        let path = self
            .config
            .as_ref()
            .ok_or_else(|| Failure::Usage("this command needs --config".into()))?;
        let mut cfg = ExperimentConfig::load(path)?;
        cfg.apply_seed(self.seed);
        Ok(cfg)
    }

    fn run_dir(&self, cfg: Option<&ExperimentConfig>) -> Result<RunDir, Failure> {
        let root = match (&self.out, cfg) {
            (Some(o), _) => o.clone(),
            (None, Some(c)) => c.run_dir(),
            (None, None) => return Err(Failure::Usage("this command needs --out or --config".into())),
        };
        Ok(RunDir::create(root)?)
    }
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
}

fn cmd_train(ctx: &Ctx) -> Outcome {
    let cfg = ctx.config()?;
    let scale = cfg.first_scale()?;
    let corpus = cfg.corpus.load()?;
    let dir = ctx.run_dir(Some(&cfg))?;
    let hyper = cfg.hyperparams();
    let mut w = Weights64::init(&scale.model, hyper.seed)?;
    let o = train(&mut w, &corpus, &hyper)?;
    let path = dir.checkpoint_path(&format!("{}_baseline", scale.name));
    checkpoint::save(&w, &path)?;
    println!(
        "trained steps={} best_valid_loss={:.4} stopped_early={} checkpoint={}",
        o.steps,
        o.best_valid_loss,
        o.stopped_early,
        path.display()
    );
    Ok(())
}

fn cmd_prune(ctx: &Ctx, a: &PruneArgs) -> Outcome {
    let cfg = ctx.config.as_ref().map(|_| ctx.config()).transpose()?;
    let from_cfg = cfg.as_ref().and_then(|c| c.prune);
    let mut spec = match (a.enc_keep, a.dec_keep, from_cfg) {
        (Some(e), Some(d), base) => PruneSpec {
            strategy: base.map(|b| b.strategy).unwrap_or_default(),
            ..PruneSpec::new(e, d)
        },
        (None, None, Some(s)) => s,
        _ => return Err(Failure::Usage("give --enc-keep and --dec-keep, or a [prune] table".into())),
    };
    if let Some(s) = a.strategy {
        spec.strategy = match s {
            StrategyArg::EvenlySpaced => Strategy::EvenlySpaced,
            StrategyArg::FirstK => Strategy::FirstK,
            StrategyArg::LastK => Strategy::LastK,
        };
    }
    let dir = ctx.run_dir(cfg.as_ref())?;
    let w: Weights64 = checkpoint::load(&a.checkpoint)?;
    let pruned = prune(&w, &spec)?;
    let path = dir.checkpoint_path(&format!("{}_e{}_d{}", stem(&a.checkpoint), spec.enc_keep, spec.dec_keep));
    checkpoint::save(&pruned, &path)?;
    println!(
        "pruned params={} -> {} checkpoint={}",
        w.total_params(),
        pruned.total_params(),
        path.display()
    );
    Ok(())
}

fn cmd_finetune(ctx: &Ctx, a: &CheckpointArg) -> Outcome {
    let cfg = ctx.config()?;
    let corpus = cfg.corpus.load()?;
    let dir = ctx.run_dir(Some(&cfg))?;
    let mut w: Weights64 = checkpoint::load(&a.checkpoint)?;
    let o = train(&mut w, &corpus, &cfg.hyperparams())?;
    let path = dir.checkpoint_path(&format!("{}_ft", stem(&a.checkpoint)));
    checkpoint::save(&w, &path)?;
    println!(
        "finetuned steps={} best_valid_loss={:.4} checkpoint={}",
        o.steps,
        o.best_valid_loss,
        path.display()
    );
    Ok(())
}

fn read_sources(path: &Path, corpus: &Corpus) -> Result<Vec<Vec<u32>>, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let lines: Vec<Vec<u32>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| corpus.vocab.encode(l.split('\t').next().unwrap_or("")))
        .collect();
    if lines.is_empty() {
        return Err(Error::Empty("generation input").into());
    }
    Ok(lines)
}

fn cmd_generate(ctx: &Ctx, a: &GenerateArgs) -> Outcome {
    let cfg = ctx.config()?;
    let corpus = cfg.corpus.load()?;
    let w: Weights64 = checkpoint::load(&a.checkpoint)?;
    let inputs = match &a.input {
        Some(p) => read_sources(p, &corpus)?,
        None => corpus.test.iter().map(|p| p.source.clone()).collect(),
    };
    let gen = GenerationConfig {
        max_new_tokens: a.max_new_tokens,
        max_input_len: w.config.max_input_len,
        ..GenerationConfig::default()
    };
    for chunk in inputs.chunks(16) {
        let g = generate(&w, chunk, &gen)?;
        for (src, out) in chunk.iter().zip(g.summaries(EOS)) {
            println!("{}\t{}", corpus.vocab.decode(src), corpus.vocab.decode(&out));
        }
    }
    Ok(())
}

fn cmd_evaluate(ctx: &Ctx, a: &EvaluateArgs) -> Outcome {
    let scores = match (&a.r#ref, &a.hyp, &a.checkpoint) {
        (Some(r), Some(h), None) => {
            let mut refs = load_tsv(r)?;
            let hyps = load_tsv_extending(h, &mut refs.vocab)?;
            if hyps.len() != refs.train.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} has {} lines, {} has {}",
                    r.display(),
                    refs.train.len(),
                    h.display(),
                    hyps.len()
                ))
                .into());
            }
            let sep = refs.vocab.tokens().iter().position(|t| t == asymprune::corpus::SENTENCE_SEP).map(|i| i as u32);
            let cands: Vec<Vec<u32>> = hyps.into_iter().map(|p| p.summary).collect();
            let gold: Vec<Vec<u32>> = refs.train.into_iter().map(|p| p.summary).collect();
            score_corpus(&cands, &gold, sep.as_ref())?
        }
        (None, None, Some(c)) => {
            let cfg = ctx.config()?;
            let corpus = cfg.corpus.load()?;
            let w: Weights64 = checkpoint::load(c)?;
            evaluate(&w, &corpus, &cfg.run.eval)?
        }
        _ => return Err(Failure::Usage("give --ref and --hyp, or --checkpoint".into())),
    };
    println!(
        "r1_f1={:.4} r2_f1={:.4} rl_f1={:.4} rlsum_f1={:.4} r2_recall={:.4} genl={:.2}",
        scores.r1.f1, scores.r2.f1, scores.rl.f1, scores.rlsum.f1, scores.r2.recall, scores.genl
    );
    Ok(())
}

fn cmd_benchmark(ctx: &Ctx, a: &BenchmarkArgs) -> Outcome {
    let cfg = ctx.config()?;
    let corpus = cfg.corpus.load()?;
    let mut bench = cfg.run.bench.clone();
    if let Some(b) = &a.batch_sizes {
        bench.batch_sizes = b.clone();
    }
    if let Some(s) = a.steps {
        bench.steps = s;
    }
    bench.enabled = true;
    let w: ModelWeights<f64> = checkpoint::load(&a.checkpoint)?;
    let workload = bench_workload(&corpus, &bench)?;
    for r in benchmark(&w, &workload, &bench)? {
        println!(
            "batch_size={} mean_ms={:.2} std_ms={:.2} encoder_share={:.3} decoder_share={:.3}",
            r.batch_size, r.mean_ms, r.std_ms, r.encoder_share, r.decoder_share
        );
    }
    Ok(())
}

fn cmd_grid(ctx: &Ctx) -> Outcome {
    let cfg = ctx.config()?;
    if !cfg.grid {
        return Err(Error::Config {
            field: "grid",
            reason: "grid is disabled in this config".into(),
        }
        .into());
    }
    let corpus = cfg.corpus.load()?;
    let dir = ctx.run_dir(Some(&cfg))?;
    let mut sink = RunWriter { dir: dir.clone() };
    let records = run_grid(&cfg.scales(), &corpus, &cfg.hyperparams(), &cfg.run, &mut sink)?;
    dir.write_report(&records)?;
    println!("grid records={} report={}", records.len(), dir.report_csv().display());
    Ok(())
}

fn cmd_sweep(ctx: &Ctx) -> Outcome {
    let cfg = ctx.config()?;
    let corpus = cfg.corpus.load()?;
    let dir = ctx.run_dir(Some(&cfg))?;
    let points = run_scale_sweep(&cfg.scales(), &corpus, &cfg.hyperparams(), &cfg.run)?;
    dir.write_sweep(&points)?;
    for p in &points {
        println!(
            "scale={} params={} r2_f1={:.4} gain_pct={:.2}",
            p.scale, p.total_params, p.r2_f1, p.gain_pct
        );
    }
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> Outcome {
    let dir = RunDir::open(&a.runs)?;
    let records = dir.read_records()?;
    if records.is_empty() {
        return Err(Error::Empty("records").into());
    }
    dir.write_report(&records)?;
    println!("report records={} csv={}", records.len(), dir.report_csv().display());
    Ok(())
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let ctx = Ctx {
        seed: cli.seed,
        config: cli.config,
        out: cli.out,
    };
    let result = match &cli.command {
        Command::Train => cmd_train(&ctx),
        Command::Prune(a) => cmd_prune(&ctx, a),
        Command::Finetune(a) => cmd_finetune(&ctx, a),
        Command::Generate(a) => cmd_generate(&ctx, a),
        Command::Evaluate(a) => cmd_evaluate(&ctx, a),
        Command::Benchmark(a) => cmd_benchmark(&ctx, a),
        Command::Grid => cmd_grid(&ctx),
        Command::Sweep => cmd_sweep(&ctx),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: usage: {}", one_line(&msg));
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {}: {}", e.kind(), one_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}
