//! Aggregated experiment results and their csv / json / markdown renderings.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Metric;
use crate::train::Method;

pub const REPORT_FORMAT: &str = "dascl-report";
pub const REPORT_VERSION: u32 = 1;

/// Result of one (target, method, seed) cell, as stored in `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub run_id: String,
    pub config_hash: String,
    pub target_id: usize,
    pub target: String,
    pub method: Method,
    pub seed: u64,
    pub metric: Metric,
    pub value: f64,
    pub target_accuracy: f64,
    pub source_val_accuracy: f64,
    /// Reads of the target samples observed just before the final
    /// evaluation; anything but 0 is a leak.
    pub target_reads_before_eval: usize,
    pub epochs: usize,
    /// Seconds since the Unix epoch.
    pub finished_at: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub target: String,
    pub method: Method,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub key: CellKey,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetInfo {
    pub domain_id: usize,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedValue {
    pub seed: u64,
    pub value: f64,
}

/// Mean and sample standard deviation over seeds for one (method, target).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub method: Method,
    pub target: String,
    pub values: Vec<SeedValue>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

/// A method's average over targets: `mean` is the mean of the per-target
/// means, `std` the sample std over seeds of the per-seed target averages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AverageSummary {
    pub method: Method,
    pub per_seed: Vec<SeedValue>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub format: String,
    pub version: u32,
    pub metric: Metric,
    pub config_hash: String,
    pub methods: Vec<Method>,
    pub targets: Vec<TargetInfo>,
    pub seeds: Vec<u64>,
    pub cells: Vec<CellSummary>,
    pub averages: Vec<AverageSummary>,
    pub missing: Vec<CellKey>,
    pub failures: Vec<CellFailure>,
    /// Earliest and latest cell completion times.
    pub started_at: Option<u64>,
    pub finished_at: Option<u64>,
}

pub fn mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

/// Sample standard deviation (n − 1 denominator); `None` below 2 values.
pub fn sample_std(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs)?;
    let ss: f64 = xs.iter().map(|x| (x - m).powi(2)).sum();
    Some((ss / (xs.len() - 1) as f64).sqrt())
}

impl MetricsReport {
    /// Summarise cell results over the full (target × method × seed) grid.
    pub fn aggregate(
        metric: Metric,
        config_hash: &str,
        methods: &[Method],
        targets: &[TargetInfo],
        seeds: &[u64],
        results: &[CellMetrics],
        failures: Vec<CellFailure>,
    ) -> Self {
        let find = |m: Method, t: &str, s: u64| {
            results
                .iter()
                .find(|r| r.method == m && r.target == t && r.seed == s)
                .map(|r| r.value)
        };
        let mut cells = Vec::new();
        let mut averages = Vec::new();
        let mut missing = Vec::new();
        for &m in methods {
            let mut target_means = Vec::new();
            for t in targets {
                let values: Vec<SeedValue> = seeds
                    .iter()
                    .filter_map(|&s| {
                        let v = find(m, &t.name, s);
                        if v.is_none() {
                            missing.push(CellKey {
                                target: t.name.clone(),
                                method: m,
                                seed: s,
                            });
                        }
                        v.map(|value| SeedValue { seed: s, value })
                    })
                    .collect();
                let raw: Vec<f64> = values.iter().map(|v| v.value).collect();
                let mu = mean(&raw);
                target_means.push(mu);
                cells.push(CellSummary {
                    method: m,
                    target: t.name.clone(),
                    values,
                    mean: mu,
                    std: sample_std(&raw),
                });
            }
            let per_seed: Vec<SeedValue> = seeds
                .iter()
                .filter_map(|&s| {
                    let vs: Option<Vec<f64>> =
                        targets.iter().map(|t| find(m, &t.name, s)).collect();
                    vs.and_then(|v| mean(&v))
                        .map(|value| SeedValue { seed: s, value })
                })
                .collect();
            let complete: Option<Vec<f64>> = target_means.into_iter().collect();
            let raw: Vec<f64> = per_seed.iter().map(|v| v.value).collect();
            averages.push(AverageSummary {
                method: m,
                mean: complete.and_then(|v| mean(&v)),
                std: sample_std(&raw),
                per_seed,
            });
        }
        missing.sort();
        MetricsReport {
            format: REPORT_FORMAT.into(),
            version: REPORT_VERSION,
            metric,
            config_hash: config_hash.into(),
            methods: methods.to_vec(),
            targets: targets.to_vec(),
            seeds: seeds.to_vec(),
            cells,
            averages,
            missing,
            failures,
            started_at: results.iter().map(|r| r.finished_at).min(),
            finished_at: results.iter().map(|r| r.finished_at).max(),
        }
    }

    pub fn cell(&self, method: Method, target: &str) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.method == method && c.target == target)
    }

    pub fn average(&self, method: Method) -> Option<&AverageSummary> {
        self.averages.iter().find(|a| a.method == method)
    }

    pub fn is_complete(&self) -> bool {
        self.missing.is_empty()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Json {
            path: path.into(),
            source: e,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
    Markdown,
}

impl ReportFormat {
    pub const ALL: [ReportFormat; 3] = [
        ReportFormat::Json,
        ReportFormat::Csv,
        ReportFormat::Markdown,
    ];

    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
            ReportFormat::Markdown => "md",
        }
    }
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            _ => Err(Error::contract(format!("unknown report format {s:?}"))),
        }
    }
}

pub fn render(report: &MetricsReport, format: ReportFormat) -> Result<Vec<u8>> {
    Ok(match format {
        ReportFormat::Json => {
            let mut v = serde_json::to_vec_pretty(report)?;
            v.push(b'\n');
            v
        }
        ReportFormat::Csv => render_csv(report).into_bytes(),
        ReportFormat::Markdown => render_markdown(report).into_bytes(),
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn render_csv(r: &MetricsReport) -> String {
    let mut s = String::from("method,target,mean,std,n\n");
    for c in &r.cells {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            c.method,
            c.target,
            opt(c.mean),
            opt(c.std),
            c.values.len()
        );
    }
    for a in &r.averages {
        let _ = writeln!(
            s,
            "{},Average,{},{},{}",
            a.method,
            opt(a.mean),
            opt(a.std),
            a.per_seed.len()
        );
    }
    s
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{:.2}", 100.0 * x))
}

/// Targets as columns followed by Average; one row per method, then one
/// Std.dev row per method. The best mean in each column is bold.
fn render_markdown(r: &MetricsReport) -> String {
    let mut columns: Vec<Vec<Option<f64>>> = r
        .targets
        .iter()
        .map(|t| {
            r.methods
                .iter()
                .map(|&m| r.cell(m, &t.name).and_then(|c| c.mean))
                .collect()
        })
        .collect();
    columns.push(
        r.methods
            .iter()
            .map(|&m| r.average(m).and_then(|a| a.mean))
            .collect(),
    );
    let best: Vec<Option<f64>> = columns
        .iter()
        .map(|col| col.iter().flatten().copied().reduce(f64::max))
        .collect();

    let mut s = format!(
        "Target-domain {} (%), mean over {} seed(s).\n\n| Method |",
        r.metric,
        r.seeds.len()
    );
    for t in &r.targets {
        let _ = write!(s, " {} |", t.name);
    }
    s.push_str(" Average |\n|---|");
    for _ in 0..=r.targets.len() {
        s.push_str("---:|");
    }
    s.push('\n');
    for (mi, m) in r.methods.iter().enumerate() {
        let _ = write!(s, "| {m} |");
        for (ci, col) in columns.iter().enumerate() {
            let cell = pct(col[mi]);
            if col[mi].is_some() && col[mi] == best[ci] {
                let _ = write!(s, " **{cell}** |");
            } else {
                let _ = write!(s, " {cell} |");
            }
        }
        s.push('\n');
    }
    for &m in &r.methods {
        let _ = write!(s, "| {m} Std.dev |");
        for t in &r.targets {
            let _ = write!(s, " {} |", pct(r.cell(m, &t.name).and_then(|c| c.std)));
        }
        let _ = writeln!(s, " {} |", pct(r.average(m).and_then(|a| a.std)));
    }
    if !r.missing.is_empty() {
        let _ = writeln!(s, "\n{} cell(s) missing.", r.missing.len());
    }
    s
}
