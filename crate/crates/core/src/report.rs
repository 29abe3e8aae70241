//! Run directories, record files, CSV/markdown tables and curve data.

use std::cmp::Reverse;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::metrics::fmt4;
use crate::model::{checkpoint, ModelWeights};
use crate::pipeline::{ExperimentRecord, GridSink, ScalePoint};

pub const CSV_HEADER: &str = "l_enc,l_dec,batch_size,mean_ms,std_ms,speedup,r2_score,recall_pct,impact_pct,genl";

/// `<out>/<name>/` with `records/`, `checkpoints/` and the report files.
#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p.display().to_string(), e))
}

fn write_file(p: &Path, contents: &[u8]) -> Result<()> {
    fs::write(p, contents).map_err(|e| Error::io(p.display().to_string(), e))
}

impl RunDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let dir = RunDir { root: root.into() };
        mkdir(&dir.records_dir())?;
        mkdir(&dir.checkpoints_dir())?;
        Ok(dir)
    }

    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let dir = RunDir { root: root.into() };
        if !dir.records_dir().is_dir() {
            return Err(Error::InvalidArgument(format!(
                "{} has no records directory",
                dir.root.display()
            )));
        }
        Ok(dir)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
    pub fn records_dir(&self) -> PathBuf {
        self.root.join("records")
    }
    pub fn checkpoints_dir(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn report_csv(&self) -> PathBuf {
        self.root.join("report.csv")
    }
    pub fn report_md(&self) -> PathBuf {
        self.root.join("report.md")
    }
    pub fn curves_csv(&self) -> PathBuf {
        self.root.join("curves.csv")
    }
    pub fn sweep_csv(&self) -> PathBuf {
        self.root.join("sweep.csv")
    }

    pub fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.checkpoints_dir().join(format!("{name}.ckpt"))
    }

    /// Writes a new record file; an existing one is never overwritten.
    pub fn write_record(&self, record: &ExperimentRecord) -> Result<PathBuf> {
        let path = self.records_dir().join(format!("{}.rec", record_name(record)));
        let mut f = fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(record.to_json()?.as_bytes())
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(path)
    }

    /// All records, in report order.
    pub fn read_records(&self) -> Result<Vec<ExperimentRecord>> {
        let dir = self.records_dir();
        let mut records = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(dir.display().to_string(), e))? {
            let path = entry.map_err(|e| Error::io(dir.display().to_string(), e))?.path();
            if path.extension().is_some_and(|e| e == "rec") {
                let text = fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
                records.push(
                    ExperimentRecord::from_json(&text)
                        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?,
                );
            }
        }
        sort_records(&mut records);
        Ok(records)
    }

    /// Writes `report.csv`, `report.md` and, when every record has
    /// latency data, `curves.csv`.
    pub fn write_report(&self, records: &[ExperimentRecord]) -> Result<()> {
        let mut sorted = records.to_vec();
        sort_records(&mut sorted);
        write_file(&self.report_csv(), csv(&sorted).as_bytes())?;
        write_file(&self.report_md(), markdown(&sorted).as_bytes())?;
        if sorted
            .iter()
            .all(|r| r.is_baseline() || (r.comparison.speedup.is_some() && r.comparison.is_defined()))
        {
            let curves = emit_curves(&sorted)?;
            write_file(&self.curves_csv(), curves_csv(&curves).as_bytes())?;
        }
        Ok(())
    }

    pub fn write_sweep(&self, points: &[ScalePoint]) -> Result<()> {
        write_file(&self.sweep_csv(), sweep_csv(points).as_bytes())
    }
}

/// Persists checkpoints and records as a grid produces them.
pub struct RunWriter {
    pub dir: RunDir,
}

impl GridSink<f64> for RunWriter {
    fn baseline(&mut self, scale: &str, weights: &ModelWeights<f64>) -> Result<()> {
        checkpoint::save(weights, &self.dir.checkpoint_path(&format!("{scale}_baseline")))
    }
    fn record(&mut self, record: &ExperimentRecord) -> Result<()> {
        self.dir.write_record(record).map(|_| ())
    }
}

pub fn record_name(r: &ExperimentRecord) -> String {
    format!("{}_e{}_d{}", r.scale, r.spec.enc_keep, r.spec.dec_keep)
}

/// Which pruning direction a record belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Series {
    Baseline,
    Decoder,
    Encoder,
    Both,
}

pub fn series_of(r: &ExperimentRecord) -> Series {
    let e = r.spec.enc_keep < r.n_enc_layers;
    let d = r.spec.dec_keep < r.n_dec_layers;
    match (e, d) {
        (false, false) => Series::Baseline,
        (false, true) => Series::Decoder,
        (true, false) => Series::Encoder,
        (true, true) => Series::Both,
    }
}

/// Scales by baseline size, then baseline, decoder-only, encoder-only and
/// symmetric rows, each from the mildest pruning down.
pub fn sort_records(records: &mut [ExperimentRecord]) {
    let mut size: BTreeMap<String, usize> = BTreeMap::new();
    for r in records.iter() {
        let e = size.entry(r.scale.clone()).or_insert(usize::MAX);
        if r.is_baseline() {
            *e = r.total_params;
        }
    }
    for r in records.iter() {
        let e = size.get_mut(&r.scale).expect("inserted above");
        if *e == usize::MAX {
            *e = records.iter().filter(|x| x.scale == r.scale).map(|x| x.total_params).max().unwrap_or(0);
        }
    }
    records.sort_by_key(|r| {
        (
            size[&r.scale],
            r.scale.clone(),
            series_of(r),
            Reverse(r.spec.enc_keep + r.spec.dec_keep),
            Reverse(r.spec.enc_keep),
        )
    });
}

fn fmt2(x: f64) -> String {
    format!("{x:.2}")
}

/// Blank for a comparison against a zero baseline.
fn pct(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        fmt2(x)
    }
}

/// One row per record and measured batch size.
pub fn csv(records: &[ExperimentRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        let tail = format!(
            "{},{},{},{}",
            fmt4(r.scores.r2.f1),
            pct(r.comparison.recall_pct),
            pct(r.comparison.impact_pct),
            fmt2(r.scores.genl)
        );
        if r.latency.is_empty() {
            let _ = writeln!(out, "{},{},,,,,{tail}", r.spec.enc_keep, r.spec.dec_keep);
        }
        for (i, l) in r.latency.iter().enumerate() {
            let s = r.speedups.get(i).map(|&s| fmt2(s)).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{s},{tail}",
                r.spec.enc_keep,
                r.spec.dec_keep,
                l.batch_size,
                fmt2(l.mean_ms),
                fmt2(l.std_ms)
            );
        }
    }
    out
}

/// Appendix-style tables, one per scale, latency at the first batch size.
pub fn markdown(records: &[ExperimentRecord]) -> String {
    let mut out = String::new();
    let mut current: Option<&str> = None;
    for r in records {
        if current != Some(r.scale.as_str()) {
            if current.is_some() {
                out.push('\n');
            }
            current = Some(&r.scale);
            let _ = writeln!(out, "## {}\n", r.scale);
            out.push_str("| l_enc | l_dec | R-1 | R-2 | R-L | R-Lsum | GenL | R (%) | Impact (%) | Latency (ms) | Speedup |\n");
            out.push_str("|---|---|---|---|---|---|---|---|---|---|---|\n");
        }
        let (lat, sp) = match r.latency.first() {
            Some(l) => (fmt2(l.mean_ms), r.speedups.first().map(|&s| fmt2(s)).unwrap_or_default()),
            None => (String::new(), String::new()),
        };
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {lat} | {sp} |",
            r.spec.enc_keep,
            r.spec.dec_keep,
            fmt4(r.scores.r1.f1),
            fmt4(r.scores.r2.f1),
            fmt4(r.scores.rl.f1),
            fmt4(r.scores.rlsum.f1),
            fmt2(r.scores.genl),
            pct(r.comparison.recall_pct),
            pct(r.comparison.impact_pct),
        );
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub l_enc: usize,
    pub l_dec: usize,
    pub speedup: f64,
    pub impact_pct: f64,
}

/// Speedup-versus-impact series of one scale, each starting from the baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct Curves {
    pub scale: String,
    pub decoder: Vec<CurvePoint>,
    pub encoder: Vec<CurvePoint>,
    pub both: Vec<CurvePoint>,
}

impl Curves {
    pub fn series(&self, s: Series) -> &[CurvePoint] {
        match s {
            Series::Decoder => &self.decoder,
            Series::Encoder => &self.encoder,
            Series::Both => &self.both,
            Series::Baseline => &self.decoder[..1],
        }
    }
}

pub fn emit_curves(records: &[ExperimentRecord]) -> Result<Vec<Curves>> {
    let mut by_scale: Vec<Curves> = Vec::new();
    for r in records {
        let point = |speedup| CurvePoint {
            l_enc: r.spec.enc_keep,
            l_dec: r.spec.dec_keep,
            speedup,
            impact_pct: r.comparison.impact_pct,
        };
        let series = series_of(r);
        if !r.comparison.is_defined() {
            return Err(Error::InvalidArgument(format!(
                "record {} has no score relative to its baseline",
                record_name(r)
            )));
        }
        let speedup = match (series, r.comparison.speedup) {
            (Series::Baseline, _) => 1.0,
            (_, Some(s)) => s,
            (_, None) => {
                return Err(Error::InvalidArgument(format!(
                    "record {} has no latency data",
                    record_name(r)
                )))
            }
        };
        let idx = match by_scale.iter().position(|c| c.scale == r.scale) {
            Some(i) => i,
            None => {
                by_scale.push(Curves {
                    scale: r.scale.clone(),
                    decoder: Vec::new(),
                    encoder: Vec::new(),
                    both: Vec::new(),
                });
                by_scale.len() - 1
            }
        };
        let c = &mut by_scale[idx];
        match series {
            Series::Baseline => {
                let p = CurvePoint {
                    speedup: 1.0,
                    impact_pct: 0.0,
                    ..point(1.0)
                };
                c.decoder.push(p);
                c.encoder.push(p);
                c.both.push(p);
            }
            Series::Decoder => c.decoder.push(point(speedup)),
            Series::Encoder => c.encoder.push(point(speedup)),
            Series::Both => c.both.push(point(speedup)),
        }
    }
    for c in &mut by_scale {
        for s in [&mut c.decoder, &mut c.encoder, &mut c.both] {
            if !s.iter().any(|p| p.speedup == 1.0 && p.impact_pct == 0.0) {
                return Err(Error::InvalidArgument(format!("scale {} has no baseline record", c.scale)));
            }
            s.sort_by(|a, b| a.speedup.total_cmp(&b.speedup));
        }
    }
    Ok(by_scale)
}

pub fn curves_csv(curves: &[Curves]) -> String {
    let mut out = String::from("scale,series,l_enc,l_dec,speedup,impact_pct\n");
    for c in curves {
        for (name, s) in [("decoder", &c.decoder), ("encoder", &c.encoder), ("both", &c.both)] {
            for p in s {
                let _ = writeln!(
                    out,
                    "{},{name},{},{},{},{}",
                    c.scale,
                    p.l_enc,
                    p.l_dec,
                    fmt2(p.speedup),
                    fmt2(p.impact_pct)
                );
            }
        }
    }
    out
}

/// Impact of `series` at `speedup` by linear interpolation; `None` outside
/// the measured range. `series` must be sorted by speedup.
pub fn interpolate(series: &[CurvePoint], speedup: f64) -> Option<f64> {
    let first = series.first()?;
    let last = series.last()?;
    if speedup < first.speedup || speedup > last.speedup {
        return None;
    }
    for w in series.windows(2) {
        let (a, b) = (w[0], w[1]);
        if speedup >= a.speedup && speedup <= b.speedup {
            if b.speedup == a.speedup {
                return Some(a.impact_pct.max(b.impact_pct));
            }
            let t = (speedup - a.speedup) / (b.speedup - a.speedup);
            return Some(a.impact_pct + t * (b.impact_pct - a.impact_pct));
        }
    }
    Some(last.impact_pct)
}

/// Points of `lower` at or beyond `min_speedup` that lie within the range of
/// `upper`, and those among them where `upper` is not at least as good.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dominance {
    pub checked: usize,
    pub violations: Vec<CurvePoint>,
}

pub fn dominance(upper: &[CurvePoint], lower: &[CurvePoint], min_speedup: f64) -> Dominance {
    let mut d = Dominance::default();
    for p in lower.iter().filter(|p| p.speedup >= min_speedup) {
        if let Some(u) = interpolate(upper, p.speedup) {
            d.checked += 1;
            if u < p.impact_pct {
                d.violations.push(*p);
            }
        }
    }
    d
}

pub fn sweep_csv(points: &[ScalePoint]) -> String {
    let mut out = String::from("scale,total_params,r2_score,gain_pct\n");
    for p in points {
        let _ = writeln!(out, "{},{},{},{}", p.scale, p.total_params, fmt4(p.r2_f1), fmt2(p.gain_pct));
    }
    out
}
