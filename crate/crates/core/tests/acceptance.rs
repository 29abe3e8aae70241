//! One PASS/FAIL line per acceptance criterion. `ACCEPTANCE_ONLY=6,7`
//! restricts the run to the listed criteria.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use asymprune::bench::{fit_cost_model, measure, predict_speedup, speedup_ms, Measurement, Workload};
use asymprune::corpus::{synth_generate, Corpus, SynthSpec, Task};
use asymprune::generation::GenerationConfig;
use asymprune::metrics::compare;
use asymprune::model::{enc_dec_ratio, Attribution, FeedForward, ModelConfig};
use asymprune::pipeline::{
    run_grid, shrink_then_finetune, train, BenchSettings, EvalSettings, ExperimentRecord, Hyperparams, RunSettings,
    Scale,
};
use asymprune::pruning::{prune, PruneSpec};
use asymprune::report::{RunDir, RunWriter};
use asymprune::Weights64;
use common::Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst = ("", 0.0f64);
    for (name, e) in common::primitive_gradchecks() {
        if !(e < 1e-4) {
            return Err(format!("{name} rel err {e:.2e}"));
        }
        if e > worst.1 {
            worst = (name, e);
        }
    }
    let relu = common::model_gradcheck(FeedForward::Relu, true);
    let gated = common::model_gradcheck(FeedForward::GatedGelu, false);
    let secs = start.elapsed().as_secs_f64();
    ensure(
        relu < 1e-4 && gated < 1e-4 && secs < 120.0,
        format!(
            "worst primitive {} {:.1e}, model relu {relu:.1e}, gated {gated:.1e}, {secs:.1}s",
            worst.0, worst.1
        ),
    )
}

fn criterion_2() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..50 {
        worst = worst.max(common::cache_equivalence(seed)?);
    }
    ensure(worst < 1e-9, format!("50 cases, max logit diff {worst:.1e}"))
}

fn criterion_3() -> Outcome {
    let mut n = 0usize;
    for total in 0..=8 {
        for lc in 0..=total {
            for c in &common::all_sequences(4, lc) {
                for r in &common::all_sequences(4, total - lc) {
                    common::check_rouge_pair(c, r, 3, true)?;
                    n += 1;
                }
            }
        }
    }
    let mut rng = Rng(42);
    for _ in 0..200 {
        let (lc, lr) = (9 + rng.below(30), 9 + rng.below(30));
        let (c, r) = (rng.seq(5, lc), rng.seq(5, lr));
        common::check_rouge_pair(&c, &r, 4, false)?;
    }
    Ok(format!("{n} exhaustive pairs, 200 random pairs"))
}

fn criterion_4() -> Outcome {
    let r = compare(27.94, 29.03).map_err(err)?.recall_pct;
    let s1 = speedup_ms(1430.0, 373.0).map_err(err)?;
    let s2 = speedup_ms(445.0, 89.7).map_err(err)?;
    ensure(
        (r - 96.24).abs() <= 0.01 && (s1 - 3.83).abs() <= 0.01 && (s2 - 4.96).abs() <= 0.01,
        format!("R {r:.2}%, speedups {s1:.2} {s2:.2}"),
    )
}

fn criterion_5() -> Outcome {
    let cases = [
        ("small", ModelConfig::flan_t5_small(), 0.849),
        ("base", ModelConfig::flan_t5_base(), 0.795),
        ("large", ModelConfig::flan_t5_large(), 0.772),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, cfg, want) in cases {
        let shared = enc_dec_ratio(&cfg, Attribution::SharedEmbeddingInStacks);
        let disjoint = enc_dec_ratio(&cfg, Attribution::Disjoint);
        ok &= (shared - want).abs() <= 0.03 && disjoint < 1.0;
        parts.push(format!("{name} {shared:.3} (structural {disjoint:.3})"));
    }
    ensure(ok, parts.join(", "))
}

/// Mean latency of each model, as the median over five interleaved
/// `measure` calls so slow drifts of the host hit every model alike.
fn latencies(models: &[Weights64], wl: &Workload, batch: usize) -> Result<Vec<f64>, String> {
    let mut runs = vec![Vec::new(); models.len()];
    for _ in 0..5 {
        for (m, out) in models.iter().zip(runs.iter_mut()) {
            out.push(measure(m, wl, batch).map_err(err)?.mean_ms);
        }
    }
    Ok(runs.into_iter().map(median).collect())
}

fn pruned(w: &Weights64, shapes: &[(usize, usize)]) -> Result<Vec<Weights64>, String> {
    shapes.iter().map(|&(e, d)| prune(w, &PruneSpec::new(e, d)).map_err(err)).collect()
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig::toy(128, 2, 512, 6, 1000);
    let w = Weights64::init(&cfg, 1).map_err(err)?;
    let mut rng = Rng(6);
    let input: Vec<u32> = (0..512).map(|_| 3 + rng.below(997) as u32).collect();
    let wl = Workload::fixed_length(vec![input], GenerationConfig::default(), 128);
    let ms = latencies(&pruned(&w, &[(6, 6), (6, 1), (1, 6), (1, 1)])?, &wl, 1)?;
    let (dec, enc, both) = (ms[0] / ms[1], ms[0] / ms[2], ms[0] / ms[3]);
    let secs = start.elapsed().as_secs_f64();
    ensure(
        dec >= 2.0 && enc <= 1.3 && both >= dec && secs < 600.0,
        format!(
            "baseline {:.0} ms, decoder 6->1 {dec:.2}x, encoder 6->1 {enc:.2}x, both {both:.2}x, {secs:.0}s",
            ms[0]
        ),
    )
}

/// Sixteen inputs whose EOS steps spread over 24..=40.
fn straggler_workload(vocab: usize, input_len: usize) -> Workload {
    let mut rng = Rng(7);
    let inputs: Vec<Vec<u32>> = (0..16)
        .map(|_| (0..input_len).map(|_| 3 + rng.below(vocab - 3) as u32).collect())
        .collect();
    let lengths: Vec<usize> = (0..16).map(|_| 24 + rng.below(17)).collect();
    let mut g = GenerationConfig::default();
    g.max_new_tokens = *lengths.iter().max().unwrap();
    Workload::with_lengths(inputs, g, lengths)
}

fn criterion_7() -> Outcome {
    let cfg = ModelConfig::toy(64, 1, 256, 6, 256);
    let w = Weights64::init(&cfg, 2).map_err(err)?;
    let wl = straggler_workload(cfg.vocab_size, 64);
    let models = pruned(&w, &[(6, 6), (1, 6), (6, 1)])?;
    let b1 = latencies(&models, &wl, 1)?;
    let b16 = latencies(&models, &wl, 16)?;
    let (e1, e16) = (b1[0] / b1[1], b16[0] / b16[1]);
    let (d1, d16) = (b1[0] / b1[2], b16[0] / b16[2]);
    ensure(
        e16 > e1 && d16 < d1,
        format!("(1,6) {e1:.2}x -> {e16:.2}x, (6,1) {d1:.2}x -> {d16:.2}x at batch 1 -> 16"),
    )
}

fn criterion_8() -> Outcome {
    let mut exact = 0.0f64;
    for (a, be, bd, steps) in [(12.0, 3.5, 0.25, 128.0), (0.4, 40.0, 0.01, 32.0)] {
        let data: Vec<Measurement> = (1..=6)
            .flat_map(|e| (1..=6).map(move |d| (e, d)))
            .map(|(e, d)| Measurement {
                l_enc: e,
                l_dec: d,
                steps,
                batch_size: 1,
                mean_ms: a + be * e as f64 + bd * d as f64 * steps,
            })
            .collect();
        let m = fit_cost_model(&data).map_err(err)?;
        for (got, want) in [(m.alpha, a), (m.beta_enc, be), (m.beta_dec, bd)] {
            exact = exact.max(((got - want) / want).abs());
        }
    }

    let cfg = ModelConfig::toy(64, 4, 256, 6, 1000);
    let w = Weights64::init(&cfg, 3).map_err(err)?;
    let mut rng = Rng(8);
    let steps = 32;
    let inputs: Vec<Vec<u32>> = (0..4).map(|_| (0..128).map(|_| 3 + rng.below(997) as u32).collect()).collect();
    let wl = Workload::fixed_length(inputs, GenerationConfig::default(), steps);
    let grid: Vec<(usize, usize)> = asymprune::pruning::enumerate_grid(6)
        .map_err(err)?
        .iter()
        .map(|s| (s.enc_keep, s.dec_keep))
        .collect();
    let held_out = [(5, 2), (2, 5), (4, 3), (3, 4)];
    let shapes: Vec<(usize, usize)> = grid.iter().chain(&held_out).copied().collect();
    let ms = latencies(&pruned(&w, &shapes)?, &wl, 1)?;
    let measured: BTreeMap<(usize, usize), Measurement> = shapes
        .iter()
        .zip(ms)
        .map(|(&(e, d), mean_ms)| (
            (e, d),
            Measurement { l_enc: e, l_dec: d, steps: steps as f64, batch_size: 1, mean_ms },
        ))
        .collect();
    let fit_data: Vec<Measurement> = grid.iter().map(|s| measured[s]).collect();
    let m = fit_cost_model(&fit_data).map_err(err)?;
    if std::env::var("ACCEPTANCE_VERBOSE").is_ok() {
        for (x, r) in fit_data.iter().zip(m.residuals(&fit_data)) {
            println!("  ({}, {}) {:.2} ms, residual {r:+.2}", x.l_enc, x.l_dec, x.mean_ms);
        }
    }
    let base_ms = measured[&(6, 6)].mean_ms;
    let mut worst = 0.0f64;
    for shape in held_out {
        let actual = base_ms / measured[&shape].mean_ms;
        let predicted = predict_speedup(&m, (6, 6), shape, measured[&shape].steps);
        worst = worst.max((predicted / actual - 1.0).abs());
    }
    ensure(
        exact < 1e-6 && m.r2 >= 0.98 && worst <= 0.15,
        format!(
            "noise-free rel err {exact:.1e}, measured R^2 {:.4}, worst held-out speedup error {:.1}%",
            m.r2,
            100.0 * worst
        ),
    )
}

fn keyword_corpus(seed: u64, n_pairs: usize) -> Result<Corpus, String> {
    synth_generate(&SynthSpec {
        task: Task::KeywordExtract,
        seed,
        n_pairs,
        vocab_size: 24,
        src_len_min: 8,
        src_len_max: 12,
        compression_target: 4.0,
        valid_frac: 0.1,
        test_frac: 0.1,
    })
    .map_err(err)
}

fn small_model(d: usize, vocab: usize) -> ModelConfig {
    let mut cfg = ModelConfig::toy(d, 2, 2 * d, 6, vocab);
    cfg.rel_pos_buckets = 16;
    cfg.rel_pos_max_distance = 32;
    cfg
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

fn criterion_9() -> Outcome {
    let start = Instant::now();
    let corpus = keyword_corpus(1, 4000)?;
    let cfg = small_model(16, 24);
    let hyper = Hyperparams {
        lr: 3e-3,
        epochs: 25,
        patience: 2,
        ..Default::default()
    };
    let finetune = Hyperparams { epochs: 2, ..hyper.clone() };
    let settings = RunSettings {
        bench: BenchSettings { enabled: false, ..Default::default() },
        ..Default::default()
    };
    let mut r63 = Vec::new();
    let mut r33 = Vec::new();
    for seed in [0, 1, 2] {
        let mut w = Weights64::init(&cfg, seed).map_err(err)?;
        train(&mut w, &corpus, &Hyperparams { seed, ..hyper.clone() }).map_err(err)?;
        let ft = Hyperparams { seed, ..finetune.clone() };
        let base = shrink_then_finetune("s", &w, &PruneSpec::new(6, 6), &corpus, &ft, &settings, None).map_err(err)?;
        for (spec, out) in [((6, 3), &mut r63), ((3, 3), &mut r33)] {
            let r = shrink_then_finetune("s", &w, &PruneSpec::new(spec.0, spec.1), &corpus, &ft, &settings, Some(&base))
                .map_err(err)?;
            out.push(r.comparison.recall_pct);
        }
    }
    let (m63, m33) = (median(r63.clone()), median(r33.clone()));
    let train_secs = start.elapsed().as_secs_f64();

    let mut counts = Vec::new();
    let tiny = Hyperparams {
        lr: 1e-3,
        max_steps: Some(1),
        epochs: 1,
        micro_batch: 16,
        effective_batch: 16,
        ..Default::default()
    };
    let quick = RunSettings {
        eval: EvalSettings { max_pairs: Some(4), max_new_tokens: 6, ..Default::default() },
        bench: BenchSettings { enabled: false, ..Default::default() },
        ..Default::default()
    };
    let small = keyword_corpus(2, 60)?;
    let scales: Vec<Scale> = [8, 12, 16]
        .iter()
        .map(|&d| Scale { name: format!("d{d}"), model: small_model(d, 24) })
        .collect();
    let tmp = tempfile::tempdir().map_err(err)?;
    let mut writer = RunWriter { dir: RunDir::create(tmp.path().join("grid")).map_err(err)? };
    let records = run_grid(&scales, &small, &tiny, &quick, &mut writer).map_err(err)?;
    for s in &scales {
        counts.push(records.iter().filter(|r| r.scale == s.name).count());
    }
    let files = fs::read_dir(writer.dir.records_dir()).map_err(err)?.count();

    ensure(
        m63 <= 100.0 && m63 >= m33 && counts.iter().all(|&c| c == 16) && files == 48,
        format!(
            "median R% (6,6) 100.00 >= (6,3) {m63:.2} >= (3,3) {m33:.2} [{:?} / {:?}], records per scale {counts:?}, files {files}, {train_secs:.0}s",
            r63.iter().map(|r| format!("{r:.2}")).collect::<Vec<_>>(),
            r33.iter().map(|r| format!("{r:.2}")).collect::<Vec<_>>(),
        ),
    )
}

fn pipeline_run(root: &Path) -> Result<(String, Vec<ExperimentRecord>), String> {
    let corpus = keyword_corpus(3, 120)?;
    let hyper = Hyperparams {
        lr: 3e-3,
        max_steps: Some(3),
        epochs: 1,
        effective_batch: 16,
        micro_batch: 8,
        seed: 11,
        ..Default::default()
    };
    let settings = RunSettings {
        eval: EvalSettings { max_pairs: Some(8), max_new_tokens: 8, ..Default::default() },
        bench: BenchSettings { enabled: true, batch_sizes: vec![1, 4], n_inputs: 4, steps: 32 },
        ..Default::default()
    };
    let scales = [Scale { name: "d32".into(), model: small_model(32, 24) }];
    let mut writer = RunWriter { dir: RunDir::create(root).map_err(err)? };
    let records = run_grid(&scales, &corpus, &hyper, &settings, &mut writer).map_err(err)?;
    writer.dir.write_report(&records).map_err(err)?;
    let csv = fs::read_to_string(writer.dir.report_csv()).map_err(err)?;
    Ok((csv, records))
}

fn mask_latency(csv: &str) -> Vec<String> {
    csv.lines()
        .map(|line| {
            line.split(',')
                .enumerate()
                .map(|(i, c)| if (3..=5).contains(&i) { "*" } else { c })
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect()
}

/// Pairwise latency orderings that the timing criteria rely on.
fn orderings(records: &[ExperimentRecord]) -> Vec<(usize, bool, bool)> {
    let find = |e: usize, d: usize| records.iter().find(|r| r.spec.enc_keep == e && r.spec.dec_keep == d).unwrap();
    let (dec, enc, both) = (find(6, 1), find(1, 6), find(1, 1));
    dec.latency
        .iter()
        .zip(&enc.speedups)
        .enumerate()
        .map(|(i, (l, &enc_s))| (l.batch_size, dec.speedups[i] > enc_s, both.speedups[i] > enc_s))
        .collect()
}

fn criterion_10() -> Outcome {
    let tmp = tempfile::tempdir().map_err(err)?;
    let (a, ra) = pipeline_run(&tmp.path().join("a"))?;
    let (b, rb) = pipeline_run(&tmp.path().join("b"))?;
    let (ma, mb) = (mask_latency(&a), mask_latency(&b));
    let differing = ma.iter().zip(&mb).filter(|(x, y)| x != y).count() + ma.len().abs_diff(mb.len());
    let (oa, ob) = (orderings(&ra), orderings(&rb));
    ensure(
        differing == 0 && oa == ob && oa.iter().all(|o| o.1 && o.2),
        format!("{} csv rows, {differing} differ outside latency columns, orderings {oa:?} vs {ob:?}", ma.len()),
    )
}

fn main() {
    std::env::set_var("ASYMPRUNE_THREADS", "1");
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [(usize, &str, fn() -> Outcome); 10] = [
        (1, "gradcheck", criterion_1),
        (2, "cached generation", criterion_2),
        (3, "rouge oracles", criterion_3),
        (4, "published cells", criterion_4),
        (5, "parameter ratios", criterion_5),
        (6, "toy latency", criterion_6),
        (7, "batch crossover", criterion_7),
        (8, "cost model", criterion_8),
        (9, "directional accuracy", criterion_9),
        (10, "reproducibility", criterion_10),
    ];
    let mut failed = 0;
    for (n, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {n} {name}: {tag} ({detail}; {secs:.1}s)");
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
