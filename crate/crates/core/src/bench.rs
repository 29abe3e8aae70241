//! Latency measurement and a linear latency cost model.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generation::{generate, generate_forced, GenerationConfig};
use crate::model::ModelWeights;
use crate::scalar::Scalar;

pub const TIMED_RUNS: usize = 7;
pub const WARMUP_RUNS: usize = 1;

/// Fixed inputs and decoding settings shared by every model under test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    pub inputs: Vec<Vec<u32>>,
    pub generation: GenerationConfig,
    /// Per-input EOS step, for workloads with controlled lengths.
    #[serde(default)]
    pub forced_lengths: Option<Vec<usize>>,
}

impl Workload {
    pub fn new(inputs: Vec<Vec<u32>>, generation: GenerationConfig) -> Self {
        Workload {
            inputs,
            generation,
            forced_lengths: None,
        }
    }

    /// Every input decodes exactly `steps` tokens.
    pub fn fixed_length(inputs: Vec<Vec<u32>>, mut generation: GenerationConfig, steps: usize) -> Self {
        generation.max_new_tokens = steps;
        let n = inputs.len();
        Workload {
            inputs,
            generation,
            forced_lengths: Some(vec![steps; n]),
        }
    }

    pub fn with_lengths(inputs: Vec<Vec<u32>>, generation: GenerationConfig, lengths: Vec<usize>) -> Self {
        Workload {
            inputs,
            generation,
            forced_lengths: Some(lengths),
        }
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.inputs.hash(&mut h);
        self.forced_lengths.hash(&mut h);
        let g = &self.generation;
        (g.max_input_len, g.max_new_tokens, g.min_new_tokens, g.eos_id, g.pad_id, g.bos_id).hash(&mut h);
        h.finish()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub batch_size: usize,
    pub runs: usize,
    /// Wall time of one pass over the whole workload.
    pub mean_ms: f64,
    /// Sample standard deviation over the timed runs.
    pub std_ms: f64,
    pub encoder_share: f64,
    pub decoder_share: f64,
    /// Mean decoder steps per batch.
    pub mean_steps: f64,
    pub run_ms: Vec<f64>,
    pub workload: u64,
}

fn one_pass<T: Scalar>(w: &ModelWeights<T>, workload: &Workload, batch_size: usize) -> Result<(f64, f64, f64, usize, usize)> {
    let mut enc_us = 0.0;
    let mut dec_us = 0.0;
    let mut steps = 0;
    let mut batches = 0;
    let start = Instant::now();
    for (i, chunk) in workload.inputs.chunks(batch_size).enumerate() {
        let g = match &workload.forced_lengths {
            Some(lengths) => {
                let lens = &lengths[i * batch_size..i * batch_size + chunk.len()];
                generate_forced(w, chunk, &workload.generation, lens)?
            }
            None => generate(w, chunk, &workload.generation)?,
        };
        enc_us += g.trace.encoder_us;
        dec_us += g.trace.decoder_total_us();
        steps += g.trace.steps();
        batches += 1;
    }
    let total_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok((total_ms, enc_us / 1e3, dec_us / 1e3, steps, batches))
}

/// One discarded warm-up pass, then [`TIMED_RUNS`] timed passes.
pub fn measure<T: Scalar>(w: &ModelWeights<T>, workload: &Workload, batch_size: usize) -> Result<LatencyReport> {
    if workload.inputs.is_empty() {
        return Err(Error::Empty("benchmark workload"));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    if let Some(l) = &workload.forced_lengths {
        if l.len() != workload.inputs.len() {
            return Err(Error::InvalidArgument("one forced length per input required".into()));
        }
    }
    for _ in 0..WARMUP_RUNS {
        one_pass(w, workload, batch_size)?;
    }
    let mut run_ms = Vec::with_capacity(TIMED_RUNS);
    let (mut enc, mut dec, mut total) = (0.0, 0.0, 0.0);
    let mut steps = 0;
    let mut batches = 0;
    for _ in 0..TIMED_RUNS {
        let (t, e, d, s, b) = one_pass(w, workload, batch_size)?;
        run_ms.push(t);
        total += t;
        enc += e;
        dec += d;
        steps += s;
        batches += b;
    }
    let (mean_ms, std_ms) = mean_std(&run_ms);
    Ok(LatencyReport {
        batch_size,
        runs: TIMED_RUNS,
        mean_ms,
        std_ms,
        encoder_share: enc / total,
        decoder_share: dec / total,
        mean_steps: steps as f64 / batches as f64,
        run_ms,
        workload: workload.fingerprint(),
    })
}

/// Mean and sample (n-1) standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// `baseline.mean_ms / candidate.mean_ms` on the same workload and batch size.
pub fn speedup(baseline: &LatencyReport, candidate: &LatencyReport) -> Result<f64> {
    if baseline.batch_size != candidate.batch_size || baseline.workload != candidate.workload {
        return Err(Error::InvalidArgument(format!(
            "reports measure different workloads (batch {} vs {})",
            baseline.batch_size, candidate.batch_size
        )));
    }
    speedup_ms(baseline.mean_ms, candidate.mean_ms)
}

pub fn speedup_ms(baseline_ms: f64, candidate_ms: f64) -> Result<f64> {
    if !(baseline_ms > 0.0 && candidate_ms > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "latencies must be positive ({baseline_ms}, {candidate_ms})"
        )));
    }
    Ok(baseline_ms / candidate_ms)
}

/// One timed configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub l_enc: usize,
    pub l_dec: usize,
    /// Decoder steps per batch.
    pub steps: f64,
    pub batch_size: usize,
    pub mean_ms: f64,
}

/// `mean_ms ~ alpha + beta_enc * l_enc + beta_dec * l_dec * steps`
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub batch_size: usize,
    pub alpha: f64,
    pub beta_enc: f64,
    pub beta_dec: f64,
    pub r2: f64,
}

impl CostModel {
    pub fn predict(&self, l_enc: usize, l_dec: usize, steps: f64) -> f64 {
        self.alpha + self.beta_enc * l_enc as f64 + self.beta_dec * l_dec as f64 * steps
    }

    pub fn residuals(&self, data: &[Measurement]) -> Vec<f64> {
        data.iter()
            .map(|m| m.mean_ms - self.predict(m.l_enc, m.l_dec, m.steps))
            .collect()
    }
}

/// Solves the 3x3 system `a x = b` by Gaussian elimination with partial
/// pivoting; `None` when a pivot vanishes relative to the matrix scale.
fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Option<[f64; 3]> {
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return None;
    }
    for col in 0..3 {
        let pivot = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() <= 1e-10 * scale {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..3 {
            let f = a[row][col] / a[col][col];
            for k in col..3 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let s: f64 = (row + 1..3).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

/// Least-squares fit through the normal equations for one batch size.
pub fn fit_cost_model(data: &[Measurement]) -> Result<CostModel> {
    let Some(first) = data.first() else {
        return Err(Error::Empty("cost-model measurements"));
    };
    if data.iter().any(|m| m.batch_size != first.batch_size) {
        return Err(Error::InvalidArgument("cost model fit mixes batch sizes".into()));
    }
    let mut shapes: Vec<(usize, usize)> = data.iter().map(|m| (m.l_enc, m.l_dec)).collect();
    shapes.sort_unstable();
    shapes.dedup();
    if shapes.len() < 4 {
        return Err(Error::InvalidArgument(format!(
            "need at least 4 distinct (l_enc, l_dec) points, got {}",
            shapes.len()
        )));
    }
    // columns are rescaled to unit max so the pivot test is scale-free
    let rows: Vec<[f64; 3]> = data
        .iter()
        .map(|m| [1.0, m.l_enc as f64, m.l_dec as f64 * m.steps])
        .collect();
    let mut col_scale = [0.0f64; 3];
    for r in &rows {
        for k in 0..3 {
            col_scale[k] = col_scale[k].max(r[k].abs());
        }
    }
    if col_scale.iter().any(|&s| s == 0.0) {
        return Err(Error::RankDeficient);
    }
    let mut xtx = [[0.0; 3]; 3];
    let mut xty = [0.0; 3];
    for (r, m) in rows.iter().zip(data) {
        let z = [r[0] / col_scale[0], r[1] / col_scale[1], r[2] / col_scale[2]];
        for i in 0..3 {
            for j in 0..3 {
                xtx[i][j] += z[i] * z[j];
            }
            xty[i] += z[i] * m.mean_ms;
        }
    }
    let beta = solve3(xtx, xty).ok_or(Error::RankDeficient)?;
    let mut model = CostModel {
        batch_size: first.batch_size,
        alpha: beta[0] / col_scale[0],
        beta_enc: beta[1] / col_scale[1],
        beta_dec: beta[2] / col_scale[2],
        r2: 0.0,
    };
    let mean = data.iter().map(|m| m.mean_ms).sum::<f64>() / data.len() as f64;
    let ss_tot: f64 = data.iter().map(|m| (m.mean_ms - mean).powi(2)).sum();
    let ss_res: f64 = model.residuals(data).iter().map(|r| r * r).sum();
    model.r2 = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res == 0.0 {
        1.0
    } else {
        0.0
    };
    Ok(model)
}

/// One model per batch size, ascending.
pub fn fit_per_batch(data: &[Measurement]) -> Result<Vec<CostModel>> {
    let mut groups: BTreeMap<usize, Vec<Measurement>> = BTreeMap::new();
    for m in data {
        groups.entry(m.batch_size).or_default().push(*m);
    }
    groups.values().map(|g| fit_cost_model(g)).collect()
}

/// Predicted latency ratio of `baseline` over `candidate`, each given as
/// `(l_enc, l_dec)`.
pub fn predict_speedup(model: &CostModel, baseline: (usize, usize), candidate: (usize, usize), steps: f64) -> f64 {
    model.predict(baseline.0, baseline.1, steps) / model.predict(candidate.0, candidate.1, steps)
}

/// Pearson correlation; 0 when either side is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len()) as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic(alpha: f64, be: f64, bd: f64, steps: f64) -> Vec<Measurement> {
        let mut out = Vec::new();
        for e in 1..=6 {
            for d in 1..=6 {
                out.push(Measurement {
                    l_enc: e,
                    l_dec: d,
                    steps,
                    batch_size: 1,
                    mean_ms: alpha + be * e as f64 + bd * d as f64 * steps,
                });
            }
        }
        out
    }

    #[test]
    fn exact_recovery_on_noise_free_data() {
        let m = fit_cost_model(&synthetic(12.5, 3.25, 0.0625, 128.0)).unwrap();
        assert!((m.alpha / 12.5 - 1.0).abs() < 1e-9);
        assert!((m.beta_enc / 3.25 - 1.0).abs() < 1e-9);
        assert!((m.beta_dec / 0.0625 - 1.0).abs() < 1e-9);
        assert!((m.r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_shift_moves_only_alpha() {
        let base = synthetic(1.0, 2.0, 0.5, 10.0);
        let shifted: Vec<Measurement> = base.iter().map(|m| Measurement { mean_ms: m.mean_ms + 7.0, ..*m }).collect();
        let a = fit_cost_model(&base).unwrap();
        let b = fit_cost_model(&shifted).unwrap();
        assert!((b.alpha - a.alpha - 7.0).abs() < 1e-9);
        assert!((b.beta_enc - a.beta_enc).abs() < 1e-9);
        assert!((b.beta_dec - a.beta_dec).abs() < 1e-9);
    }

    #[test]
    fn collinear_design_is_rank_deficient() {
        // l_enc == l_dec with constant steps makes the two slope columns proportional
        let data: Vec<Measurement> = (1..=6)
            .map(|k| Measurement {
                l_enc: k,
                l_dec: k,
                steps: 4.0,
                batch_size: 1,
                mean_ms: k as f64,
            })
            .collect();
        assert!(matches!(fit_cost_model(&data), Err(Error::RankDeficient)));
        assert!(fit_cost_model(&data[..3]).is_err());
    }

    #[test]
    fn published_speedups() {
        assert!((speedup_ms(1430.0, 373.0).unwrap() - 3.83).abs() < 0.01);
        assert!((speedup_ms(445.0, 89.7).unwrap() - 4.96).abs() < 0.01);
    }

    #[test]
    fn predicted_ordering() {
        let m = CostModel {
            batch_size: 1,
            alpha: 1.0,
            beta_enc: 1.0,
            beta_dec: 1.0,
            r2: 1.0,
        };
        assert_eq!(predict_speedup(&m, (6, 6), (6, 6), 128.0), 1.0);
        assert!(predict_speedup(&m, (6, 6), (6, 1), 128.0) >= 2.0);
        assert!(predict_speedup(&m, (6, 6), (1, 6), 128.0) <= 1.3);
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }
}
