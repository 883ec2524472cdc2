//! Proportional bias change of each multi-agent system against each of its
//! constituents, pooled quantile summaries and histograms, and the report
//! files built from them.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::debate::Paradigm;
use crate::fairness::{Evaluation, FairnessDeltas, MetricName};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("quantiles of an empty sample")]
    Empty,
    #[error("quantile level {0} outside [0, 1]")]
    BadLevel(f64),
    #[error("non-finite sample value")]
    NonFinite,
    #[error("system `{system}`: {message}")]
    Report { system: String, message: String },
    #[error("invalid histogram range")]
    BadHistogram,
    #[error("{path}: {message}")]
    Input { path: String, message: String },
    #[error("failed to write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub name: String,
    pub agents: Vec<String>,
    pub paradigms: Vec<Paradigm>,
}

/// `(mas - single) / single`, or `None` (excluded) when the baseline is zero
/// or either value is missing.
pub fn proportional_change(mas: Option<f64>, single: Option<f64>) -> Option<f64> {
    let (mas, single) = (mas?, single?);
    (single != 0.0).then(|| (mas - single) / single)
}

/// Linear-interpolation quantiles: sort ascending and interpolate at
/// fractional index `(n - 1) * q`.
pub fn quantiles(samples: &[f64], levels: &[f64]) -> Result<Vec<f64>, AnalysisError> {
    if samples.is_empty() {
        return Err(AnalysisError::Empty);
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(AnalysisError::NonFinite);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let last = sorted.len() - 1;
    levels
        .iter()
        .map(|&q| {
            if !(0.0..=1.0).contains(&q) {
                return Err(AnalysisError::BadLevel(q));
            }
            let h = last as f64 * q;
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(last);
            Ok(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
        })
        .collect()
}

/// `|p99| / |median|`, `None` when the median is zero.
pub fn max_med_ratio(median: f64, p99: f64) -> Option<f64> {
    (median != 0.0).then(|| p99.abs() / median.abs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasSample {
    pub system: String,
    pub paradigm: Paradigm,
    pub constituent: String,
    pub metric: MetricName,
    pub mas_value: Option<f64>,
    pub single_value: Option<f64>,
}

impl BiasSample {
    pub fn change(&self) -> Option<f64> {
        proportional_change(self.mas_value, self.single_value)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileSummary {
    pub metric: MetricName,
    pub median: Option<f64>,
    pub p95: Option<f64>,
    pub p99: Option<f64>,
    pub max_med_ratio: Option<f64>,
    pub n_samples: usize,
    pub n_excluded: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramConfig {
    pub bin_width: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Default for HistogramConfig {
    fn default() -> Self {
        Self {
            bin_width: 0.25,
            lo: -1.5,
            hi: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_width: f64,
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
    pub n_out_of_range: usize,
}

impl Histogram {
    /// Bins are `[lo + i*w, lo + (i+1)*w)`; `hi` itself falls in the last
    /// bin.
    pub fn build(values: &[f64], config: HistogramConfig) -> Result<Self, AnalysisError> {
        let HistogramConfig { bin_width, lo, hi } = config;
        if !(bin_width > 0.0 && lo.is_finite() && hi.is_finite() && hi > lo) {
            return Err(AnalysisError::BadHistogram);
        }
        let n_bins = ((hi - lo) / bin_width).ceil() as usize;
        let mut counts = vec![0usize; n_bins];
        let mut n_out_of_range = 0;
        for &v in values {
            if !(lo..=hi).contains(&v) {
                n_out_of_range += 1;
                continue;
            }
            let idx = (((v - lo) / bin_width).floor() as usize).min(n_bins - 1);
            counts[idx] += 1;
        }
        Ok(Self {
            bin_width,
            lo,
            hi,
            counts,
            n_out_of_range,
        })
    }

    pub fn bins(&self) -> impl Iterator<Item = (f64, f64, usize)> + '_ {
        self.counts.iter().enumerate().map(move |(i, &c)| {
            let a = self.lo + i as f64 * self.bin_width;
            let b = (self.lo + (i + 1) as f64 * self.bin_width).min(self.hi);
            (a, b, c)
        })
    }
}

pub fn summarize(samples: &[BiasSample], metric: MetricName) -> QuantileSummary {
    let changes: Vec<f64> = samples
        .iter()
        .filter(|s| s.metric == metric)
        .filter_map(BiasSample::change)
        .collect();
    let total = samples.iter().filter(|s| s.metric == metric).count();
    let q = quantiles(&changes, &[0.5, 0.95, 0.99]).ok();
    let (median, p95, p99) = match q.as_deref() {
        Some([m, a, b]) => (Some(*m), Some(*a), Some(*b)),
        _ => (None, None, None),
    };
    QuantileSummary {
        metric,
        median,
        p95,
        p99,
        max_med_ratio: median.zip(p99).and_then(|(m, p)| max_med_ratio(m, p)),
        n_samples: changes.len(),
        n_excluded: total - changes.len(),
    }
}

/// Quantile summaries and histograms of pooled samples, one per metric.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledAnalysis {
    pub summaries: Vec<QuantileSummary>,
    pub histograms: Vec<(MetricName, Histogram)>,
}

pub fn analyze_samples(
    samples: &[BiasSample],
    hist: HistogramConfig,
) -> Result<PooledAnalysis, AnalysisError> {
    let mut summaries = Vec::new();
    let mut histograms = Vec::new();
    for metric in MetricName::ALL {
        summaries.push(summarize(samples, metric));
        let changes: Vec<f64> = samples
            .iter()
            .filter(|s| s.metric == metric)
            .filter_map(BiasSample::change)
            .collect();
        histograms.push((metric, Histogram::build(&changes, hist)?));
    }
    Ok(PooledAnalysis {
        summaries,
        histograms,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    /// `Agent i`, `Memory` or `CollRef`.
    pub row: String,
    /// Constituent agent id; empty for system rows.
    pub model: String,
    pub deltas: FairnessDeltas,
    pub evaluated: usize,
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemBlock {
    pub system: String,
    pub rows: Vec<ReportRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportBundle {
    pub blocks: Vec<SystemBlock>,
    pub samples: Vec<BiasSample>,
    pub pooled: PooledAnalysis,
}

fn row(row: String, model: &str, eval: &Evaluation) -> ReportRow {
    ReportRow {
        row,
        model: model.to_string(),
        deltas: eval.deltas,
        evaluated: eval.evaluated(),
        excluded: eval.excluded(),
    }
}

/// Assembles per-system blocks (constituents then paradigm rows) and pools
/// one proportional-change sample per (system, paradigm, constituent,
/// metric).
pub fn build_report(
    single: &BTreeMap<String, Evaluation>,
    mas: &BTreeMap<(String, Paradigm), Evaluation>,
    systems: &[SystemSpec],
    hist: HistogramConfig,
) -> Result<ReportBundle, AnalysisError> {
    let mut blocks = Vec::new();
    let mut samples = Vec::new();
    for system in systems {
        let mut rows = Vec::new();
        for (i, agent) in system.agents.iter().enumerate() {
            let eval = single.get(agent).ok_or_else(|| AnalysisError::Report {
                system: system.name.clone(),
                message: format!("no single-agent baseline for constituent `{agent}`"),
            })?;
            rows.push(row(format!("Agent {}", i + 1), agent, eval));
        }
        for &paradigm in &system.paradigms {
            let eval =
                mas.get(&(system.name.clone(), paradigm))
                    .ok_or_else(|| AnalysisError::Report {
                        system: system.name.clone(),
                        message: format!("no {paradigm} results"),
                    })?;
            rows.push(row(paradigm.to_string(), "", eval));
            for agent in &system.agents {
                let base = &single[agent];
                for metric in MetricName::ALL {
                    samples.push(BiasSample {
                        system: system.name.clone(),
                        paradigm,
                        constituent: agent.clone(),
                        metric,
                        mas_value: eval.deltas.get(metric),
                        single_value: base.deltas.get(metric),
                    });
                }
            }
        }
        blocks.push(SystemBlock {
            system: system.name.clone(),
            rows,
        });
    }
    let pooled = analyze_samples(&samples, hist)?;
    Ok(ReportBundle {
        blocks,
        samples,
        pooled,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}"))
        .unwrap_or_else(|| "NA".to_string())
}

fn fmt_opt3(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3}"))
        .unwrap_or_else(|| "NA".to_string())
}

fn parse_opt(s: &str) -> Result<Option<f64>, String> {
    if s == "NA" || s.is_empty() {
        Ok(None)
    } else {
        s.parse::<f64>()
            .map(Some)
            .map_err(|e| format!("`{s}`: {e}"))
    }
}

pub fn render_markdown(bundle: &ReportBundle) -> String {
    let mut md = String::from("# Fairness report\n");
    let header = MetricName::ALL.map(|m| m.label()).join(" | ");
    for block in &bundle.blocks {
        let _ = write!(
            md,
            "\n## {}\n\n| Row | Model | {header} | Evaluated | Excluded |\n|---|---|{}---|---|\n",
            block.system,
            "---|".repeat(MetricName::ALL.len())
        );
        for r in &block.rows {
            let cells = MetricName::ALL
                .map(|m| fmt_opt3(r.deltas.get(m)))
                .join(" | ");
            let _ = writeln!(
                md,
                "| {} | {} | {cells} | {} | {} |",
                r.row, r.model, r.evaluated, r.excluded
            );
        }
    }
    md.push_str(&quantile_markdown(&bundle.pooled.summaries));
    md
}

fn quantile_markdown(summaries: &[QuantileSummary]) -> String {
    let mut md = String::from(
        "\n## Proportional bias change\n\n| Metric | Median | 95th | 99th | Max/Med | Samples | Excluded |\n|---|---|---|---|---|---|---|\n",
    );
    for s in summaries {
        let ratio = s
            .max_med_ratio
            .map(|r| format!("{r:.1}×"))
            .unwrap_or_else(|| "NA".into());
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {ratio} | {} | {} |",
            s.metric.label(),
            fmt_opt3(s.median),
            fmt_opt3(s.p95),
            fmt_opt3(s.p99),
            s.n_samples,
            s.n_excluded
        );
    }
    md
}

fn write_file(path: &Path, contents: &str) -> Result<(), AnalysisError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|source| AnalysisError::Io {
            path: parent.display().to_string(),
            source,
        })?;
    }
    std::fs::write(path, contents).map_err(|source| AnalysisError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn csv_line(cells: &[String]) -> String {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(cells).expect("in-memory csv write");
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("utf-8 csv")
}

pub fn systems_csv(bundle: &ReportBundle) -> String {
    let mut header = vec!["system".to_string(), "row".into(), "model".into()];
    header.extend(MetricName::ALL.map(|m| m.as_str().to_string()));
    header.extend(["evaluated".to_string(), "excluded".into()]);
    let mut out = csv_line(&header);
    for block in &bundle.blocks {
        for r in &block.rows {
            let mut cells = vec![block.system.clone(), r.row.clone(), r.model.clone()];
            cells.extend(MetricName::ALL.map(|m| fmt_opt(r.deltas.get(m))));
            cells.extend([r.evaluated.to_string(), r.excluded.to_string()]);
            out.push_str(&csv_line(&cells));
        }
    }
    out
}

const SAMPLE_HEADER: [&str; 7] = [
    "system",
    "paradigm",
    "constituent",
    "metric",
    "mas_value",
    "single_value",
    "change",
];

pub fn samples_csv(samples: &[BiasSample]) -> String {
    let mut out = csv_line(&SAMPLE_HEADER.map(String::from));
    for s in samples {
        out.push_str(&csv_line(&[
            s.system.clone(),
            s.paradigm.slug().to_string(),
            s.constituent.clone(),
            s.metric.as_str().to_string(),
            fmt_opt(s.mas_value),
            fmt_opt(s.single_value),
            fmt_opt(s.change()),
        ]));
    }
    out
}

/// Reads samples written by [`samples_csv`]. The `change` column is
/// ignored and recomputed from the two bias values.
pub fn read_samples_csv(path: &Path) -> Result<Vec<BiasSample>, AnalysisError> {
    let input = |message: String| AnalysisError::Input {
        path: path.display().to_string(),
        message,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| input(e.to_string()))?;
    let headers = rdr.headers().map_err(|e| input(e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| input(format!("missing column `{name}`")))
    };
    let idx: Vec<usize> = SAMPLE_HEADER[..6]
        .iter()
        .map(|n| col(n))
        .collect::<Result<_, _>>()?;
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| input(e.to_string()))?;
        let get = |i: usize| rec.get(idx[i]).unwrap_or("");
        let bad = |m: String| input(format!("row {}: {m}", line + 1));
        let paradigm = match get(1) {
            "memory" => Paradigm::Memory,
            "collref" => Paradigm::CollRef,
            other => return Err(bad(format!("unknown paradigm `{other}`"))),
        };
        out.push(BiasSample {
            system: get(0).to_string(),
            paradigm,
            constituent: get(2).to_string(),
            metric: get(3).parse().map_err(bad)?,
            mas_value: parse_opt(get(4)).map_err(bad)?,
            single_value: parse_opt(get(5)).map_err(bad)?,
        });
    }
    Ok(out)
}

pub fn quantiles_csv(summaries: &[QuantileSummary]) -> String {
    let mut out = csv_line(
        &[
            "metric",
            "median",
            "p95",
            "p99",
            "max_med_ratio",
            "n_samples",
            "n_excluded",
        ]
        .map(String::from),
    );
    for s in summaries {
        out.push_str(&csv_line(&[
            s.metric.as_str().to_string(),
            fmt_opt(s.median),
            fmt_opt(s.p95),
            fmt_opt(s.p99),
            fmt_opt(s.max_med_ratio),
            s.n_samples.to_string(),
            s.n_excluded.to_string(),
        ]));
    }
    out
}

pub fn histogram_csv(h: &Histogram) -> String {
    let mut out = String::from("bin_lo,bin_hi,count\n");
    for (a, b, c) in h.bins() {
        let _ = writeln!(out, "{a},{b},{c}");
    }
    out
}

#[derive(Serialize)]
struct Summary<'a> {
    quantiles: &'a [QuantileSummary],
    histogram: Option<HistogramConfig>,
}

/// Writes `summary.json`, `tables/quantiles.csv` and one
/// `tables/hist_<metric>.csv` per metric under `dir`.
pub fn write_pooled(pooled: &PooledAnalysis, dir: &Path) -> Result<Vec<PathBuf>, AnalysisError> {
    let mut written = Vec::new();
    let tables = dir.join("tables");
    let path = tables.join("quantiles.csv");
    write_file(&path, &quantiles_csv(&pooled.summaries))?;
    written.push(path);
    for (metric, h) in &pooled.histograms {
        let path = tables.join(format!("hist_{metric}.csv"));
        write_file(&path, &histogram_csv(h))?;
        written.push(path);
    }
    let summary = Summary {
        quantiles: &pooled.summaries,
        histogram: pooled.histograms.first().map(|(_, h)| HistogramConfig {
            bin_width: h.bin_width,
            lo: h.lo,
            hi: h.hi,
        }),
    };
    let mut json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    json.push('\n');
    let path = dir.join("summary.json");
    write_file(&path, &json)?;
    written.push(path);
    Ok(written)
}

/// Writes the full report: `report.md`, `tables/systems.csv`,
/// `tables/samples.csv` and everything [`write_pooled`] writes.
pub fn write_report(bundle: &ReportBundle, dir: &Path) -> Result<Vec<PathBuf>, AnalysisError> {
    let mut written = Vec::new();
    let path = dir.join("report.md");
    write_file(&path, &render_markdown(bundle))?;
    written.push(path);
    let path = dir.join("tables").join("systems.csv");
    write_file(&path, &systems_csv(bundle))?;
    written.push(path);
    let path = dir.join("tables").join("samples.csv");
    write_file(&path, &samples_csv(&bundle.samples))?;
    written.push(path);
    written.extend(write_pooled(&bundle.pooled, dir)?);
    Ok(written)
}
