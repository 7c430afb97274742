//! Retrieval metrics and per-mode evaluation reports.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregator::{AggregatorConfig, AggregatorParams};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::similarity::{rank, score_query, QueryMode, Ranking};
use crate::store::{DualSpaceDatabase, QueryBundle};

fn check_relevance(ranking: &Ranking, relevant: &[bool]) -> Result<usize> {
    if ranking.len() != relevant.len() {
        return Err(Error::dim("relevance mask", ranking.len(), relevant.len()));
    }
    Ok(relevant.iter().filter(|&&r| r).count())
}

/// Mean over relevant items of the precision at their rank. `relevant` is a
/// mask over database indices and `ranking` must be full-length.
pub fn average_precision(ranking: &Ranking, relevant: &[bool]) -> Result<f64> {
    let total = check_relevance(ranking, relevant)?;
    if total == 0 {
        return Err(Error::Empty("average precision needs a relevant item".into()));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, &idx) in ranking.order.iter().enumerate() {
        if relevant[idx] {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    Ok(sum / total as f64)
}

fn hits_at(ranking: &Ranking, relevant: &[bool], k: usize) -> usize {
    ranking.order.iter().take(k).filter(|&&i| relevant[i]).count()
}

/// Fraction of the top `k` that is relevant. `k` past the end uses every item
/// but still divides by `k`.
pub fn precision_at_k(ranking: &Ranking, relevant: &[bool], k: usize) -> Result<f64> {
    check_relevance(ranking, relevant)?;
    if k == 0 {
        return Err(Error::InvalidArgument("K must be >= 1".into()));
    }
    Ok(hits_at(ranking, relevant, k) as f64 / k as f64)
}

pub fn recall_at_k(ranking: &Ranking, relevant: &[bool], k: usize) -> Result<f64> {
    let total = check_relevance(ranking, relevant)?;
    if k == 0 {
        return Err(Error::InvalidArgument("K must be >= 1".into()));
    }
    if total == 0 {
        return Err(Error::Empty("recall needs a relevant item".into()));
    }
    Ok(hits_at(ranking, relevant, k) as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryScore {
    pub query_id: u64,
    pub label: u32,
    pub ap: f64,
    pub precision_at: Vec<f64>,
    pub recall_at: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub mode: QueryMode,
    pub map: f64,
    /// Mean P@K, aligned with the report's `k_list`.
    pub precision_at: Vec<f64>,
    pub recall_at: Vec<f64>,
    pub queries: Vec<QueryScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Free-form tag for the query set, e.g. "generated" or "real-images".
    pub variant: String,
    pub seed: Option<u64>,
    pub checkpoint_hash: Option<String>,
    pub config: serde_json::Value,
    pub tie_rule: String,
    pub k_list: Vec<usize>,
    pub lambda: Option<f64>,
    pub num_queries: usize,
    /// Queries whose class has no database item; excluded from every mean.
    pub skipped_queries: Vec<u64>,
    pub modes: Vec<ModeReport>,
}

impl EvalReport {
    pub fn mode(&self, mode: QueryMode) -> Option<&ModeReport> {
        self.modes.iter().find(|m| m.mode == mode)
    }

    pub fn map(&self, mode: QueryMode) -> Option<f64> {
        self.mode(mode).map(|m| m.map)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(Error::InvalidArgument(format!("unknown report format {other:?}"))),
        }
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Scores every bundle under every mode and aggregates AP, P@K and R@K. All
/// modes see the same bundles, so per-query deltas between modes are paired.
pub fn evaluate(
    db: &DualSpaceDatabase,
    bundles: &[QueryBundle],
    params: Option<&AggregatorParams>,
    config: &AggregatorConfig,
    modes: &[QueryMode],
    k_list: &[usize],
) -> Result<EvalReport> {
    if db.is_empty() {
        return Err(Error::Empty("database is empty".into()));
    }
    if k_list.contains(&0) {
        return Err(Error::InvalidArgument("K values must be >= 1".into()));
    }
    let labels: Vec<u32> = bundles
        .iter()
        .map(|b| {
            b.label
                .ok_or_else(|| Error::InvalidArgument(format!("query {} has no label", b.query_id)))
        })
        .collect::<Result<_>>()?;

    let mut skipped = Vec::new();
    let mut kept = Vec::new();
    for (b, &label) in bundles.iter().zip(&labels) {
        if db.labels().contains(&label) {
            kept.push((b, label));
        } else {
            skipped.push(b.query_id);
        }
    }

    // per bundle, per mode
    let rows: Vec<Vec<QueryScore>> = kept
        .par_iter()
        .map(|&(bundle, label)| {
            let relevant: Vec<bool> = db.labels().iter().map(|&l| l == label).collect();
            modes
                .iter()
                .map(|&mode| {
                    let scores = score_query(bundle, db, params, config, mode)?;
                    let ranking = rank(&scores, None)?;
                    Ok(QueryScore {
                        query_id: bundle.query_id,
                        label,
                        ap: average_precision(&ranking, &relevant)?,
                        precision_at: k_list
                            .iter()
                            .map(|&k| precision_at_k(&ranking, &relevant, k))
                            .collect::<Result<_>>()?,
                        recall_at: k_list
                            .iter()
                            .map(|&k| recall_at_k(&ranking, &relevant, k))
                            .collect::<Result<_>>()?,
                    })
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let mode_reports = modes
        .iter()
        .enumerate()
        .map(|(mi, &mode)| {
            let queries: Vec<QueryScore> = rows.iter().map(|r| r[mi].clone()).collect();
            ModeReport {
                mode,
                map: mean(queries.iter().map(|q| q.ap)),
                precision_at: (0..k_list.len())
                    .map(|ki| mean(queries.iter().map(|q| q.precision_at[ki])))
                    .collect(),
                recall_at: (0..k_list.len())
                    .map(|ki| mean(queries.iter().map(|q| q.recall_at[ki])))
                    .collect(),
                queries,
            }
        })
        .collect();

    Ok(EvalReport {
        variant: "generated".into(),
        seed: None,
        checkpoint_hash: None,
        config: serde_json::to_value(config)?,
        tie_rule: Ranking::TIE_RULE.into(),
        k_list: k_list.to_vec(),
        lambda: params.map(AggregatorParams::lambda),
        num_queries: bundles.len(),
        skipped_queries: skipped,
        modes: mode_reports,
    })
}

/// One `mode,metric,value` row per aggregate. Floats use the shortest
/// representation that parses back to the same value.
pub fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from("mode,metric,value\n");
    for m in &report.modes {
        let _ = writeln!(out, "{},mAP,{:?}", m.mode, m.map);
        for (ki, k) in report.k_list.iter().enumerate() {
            let _ = writeln!(out, "{},P@{k},{:?}", m.mode, m.precision_at[ki]);
        }
        for (ki, k) in report.k_list.iter().enumerate() {
            let _ = writeln!(out, "{},R@{k},{:?}", m.mode, m.recall_at[ki]);
        }
    }
    out
}

/// Per-query AP with one column per mode.
pub fn per_query_ap_csv(report: &EvalReport) -> String {
    let mut out = String::from("query_id,label");
    for m in &report.modes {
        let _ = write!(out, ",{}", m.mode);
    }
    out.push('\n');
    let n = report.modes.first().map_or(0, |m| m.queries.len());
    for qi in 0..n {
        let q = &report.modes[0].queries[qi];
        let _ = write!(out, "{},{}", q.query_id, q.label);
        for m in &report.modes {
            let _ = write!(out, ",{:?}", m.queries[qi].ap);
        }
        out.push('\n');
    }
    out
}

pub fn report_json(report: &EvalReport) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(report)?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn write_report(report: &EvalReport, path: &Path, format: ReportFormat) -> Result<()> {
    let bytes = match format {
        ReportFormat::Json => report_json(report)?,
        ReportFormat::Csv => report_csv(report).into_bytes(),
    };
    fsutil::write_atomic(path, &bytes)
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let bytes = fsutil::read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Malformed {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}
