//! Transfer reports: per-module norm breakdowns, source-vs-transferred norm
//! correlations, pairing score matrices, and their JSON/CSV emission.

use serde::{Deserialize, Serialize};

use crate::decompose::DecomposedDelta;
use crate::error::{Error, Result};
use crate::similarity::{Combine, ModulePairing, ScoreMatrix, SimilarityScore};
use crate::transfer::{TransferMode, TransferredDelta};

pub const REPORT_SCHEMA: &str = "report/1";
pub const PAIRING_SCHEMA: &str = "pairing/1";
pub const CORRELATION_STATISTIC: &str = "pearson";

/// One transferred module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleRecord {
    pub source_module: String,
    pub target_module: String,
    pub mode: TransferMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub similarity: Option<SimilarityScore>,
    pub source_norm: f64,
    pub source_par_norm: f64,
    pub source_perp_norm: f64,
    pub residual_norm: f64,
    pub transferred_norm: f64,
    pub transferred_par_norm: f64,
    pub transferred_perp_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recompression_residual: Option<f64>,
}

/// Pearson correlations of source against transferred norms. A field is
/// absent when either series is constant or has fewer than two points.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct NormCorrelations {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub overall: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subspace: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nullspace: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub schema: String,
    pub statistic: String,
    pub threshold: f64,
    pub correlations: NormCorrelations,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elapsed_seconds: Option<f64>,
    #[serde(default)]
    pub unmatched_sources: Vec<String>,
    pub records: Vec<ModuleRecord>,
}

/// Inputs for one record of [`build_report`].
#[derive(Debug, Clone, Copy)]
pub struct TransferInput<'a> {
    pub transferred: &'a TransferredDelta,
    pub decomposed: &'a DecomposedDelta,
    pub recompression_residual: Option<f64>,
}

/// `None` for fewer than two points or a constant series.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len();
    if n < 2 || ys.len() != n {
        return None;
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
    let (mx, my) = (mean(xs), mean(ys));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

impl NormCorrelations {
    pub fn from_records(records: &[ModuleRecord]) -> Self {
        let series = |f: fn(&ModuleRecord) -> (f64, f64)| -> Option<f64> {
            let (xs, ys): (Vec<f64>, Vec<f64>) = records.iter().map(f).unzip();
            pearson(&xs, &ys)
        };
        Self {
            overall: series(|r| (r.source_norm, r.transferred_norm)),
            subspace: series(|r| (r.source_par_norm, r.transferred_par_norm)),
            nullspace: series(|r| (r.source_perp_norm, r.transferred_perp_norm)),
        }
    }
}

/// Records are sorted by (source, target) module id.
pub fn build_report(transfers: &[TransferInput<'_>], pairing: &ModulePairing) -> Result<TransferReport> {
    if transfers.is_empty() {
        return Err(Error::EmptyReport);
    }
    let mut records: Vec<ModuleRecord> = transfers
        .iter()
        .map(|t| {
            let d = t.decomposed;
            let x = t.transferred;
            ModuleRecord {
                source_module: x.source_module.clone(),
                target_module: x.target_module.clone(),
                mode: x.mode,
                similarity: pairing.score_for(&x.source_module, &x.target_module),
                source_norm: d.norms.total,
                source_par_norm: d.norms.par,
                source_perp_norm: d.norms.perp,
                residual_norm: d.norms.residual,
                transferred_norm: x.dense.norm(),
                transferred_par_norm: x.par_component.norm(),
                transferred_perp_norm: x.perp_component.norm(),
                recompression_residual: t.recompression_residual,
            }
        })
        .collect();
    records.sort_by(|a, b| (&a.source_module, &a.target_module).cmp(&(&b.source_module, &b.target_module)));
    Ok(TransferReport {
        schema: REPORT_SCHEMA.into(),
        statistic: CORRELATION_STATISTIC.into(),
        threshold: pairing.threshold,
        correlations: NormCorrelations::from_records(&records),
        elapsed_seconds: None,
        unmatched_sources: pairing.unmatched_sources.clone(),
        records,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Json,
    Csv,
}

impl Format {
    /// CSV for a `.csv` extension, JSON otherwise.
    pub fn for_path(path: &std::path::Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => Format::Csv,
            _ => Format::Json,
        }
    }
}

/// Column order of the per-module CSV.
pub const REPORT_COLUMNS: [&str; 15] = [
    "source_module",
    "target_module",
    "mode",
    "similarity_left",
    "similarity_right",
    "similarity_combined",
    "source_norm",
    "source_par_norm",
    "source_perp_norm",
    "residual_norm",
    "transferred_norm",
    "transferred_par_norm",
    "transferred_perp_norm",
    "recompression_residual",
    "threshold",
];

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub(crate) fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("report types serialize infallibly");
    out.push(b'\n');
    out
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    // writing to a Vec cannot fail
    w.write_record(header).unwrap();
    for row in rows {
        w.write_record(&row).unwrap();
    }
    w.into_inner().unwrap()
}

pub fn emit(report: &TransferReport, format: Format) -> Vec<u8> {
    match format {
        Format::Json => json_bytes(report),
        Format::Csv => csv_bytes(
            &REPORT_COLUMNS,
            report.records.iter().map(|r| {
                vec![
                    r.source_module.clone(),
                    r.target_module.clone(),
                    r.mode.to_string(),
                    opt(r.similarity.map(|s| s.left)),
                    opt(r.similarity.map(|s| s.right)),
                    opt(r.similarity.map(|s| s.combined)),
                    r.source_norm.to_string(),
                    r.source_par_norm.to_string(),
                    r.source_perp_norm.to_string(),
                    r.residual_norm.to_string(),
                    r.transferred_norm.to_string(),
                    r.transferred_par_norm.to_string(),
                    r.transferred_perp_norm.to_string(),
                    opt(r.recompression_residual),
                    report.threshold.to_string(),
                ]
            }),
        ),
    }
}

/// Per-module decomposition of an adapter against its base weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionRow {
    pub module: String,
    pub rows: usize,
    pub cols: usize,
    pub rank: usize,
    pub total_norm: f64,
    pub par_norm: f64,
    pub perp_norm: f64,
    pub residual_norm: f64,
}

pub const DECOMPOSITION_COLUMNS: [&str; 8] = [
    "module",
    "rows",
    "cols",
    "rank",
    "total_norm",
    "par_norm",
    "perp_norm",
    "residual_norm",
];

pub fn emit_decomposition(rows: &[DecompositionRow], format: Format) -> Vec<u8> {
    match format {
        Format::Json => json_bytes(&rows),
        Format::Csv => csv_bytes(
            &DECOMPOSITION_COLUMNS,
            rows.iter().map(|r| {
                vec![
                    r.module.clone(),
                    r.rows.to_string(),
                    r.cols.to_string(),
                    r.rank.to_string(),
                    r.total_norm.to_string(),
                    r.par_norm.to_string(),
                    r.perp_norm.to_string(),
                    r.residual_norm.to_string(),
                ]
            }),
        ),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub source: String,
    pub target: String,
    pub score: SimilarityScore,
}

/// Score matrix plus selected pairs, as written by the `pair` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairingReport {
    pub schema: String,
    pub threshold: f64,
    pub combine: Combine,
    pub sources: Vec<String>,
    pub targets: Vec<String>,
    /// `scores[i][j]` for source `i` against target `j`; null where shapes differ.
    pub scores: Vec<Vec<Option<SimilarityScore>>>,
    pub pairs: Vec<PairEntry>,
    pub unmatched_sources: Vec<String>,
}

impl PairingReport {
    pub fn new(scores: &ScoreMatrix, pairing: &ModulePairing, combine: Combine) -> Self {
        Self {
            schema: PAIRING_SCHEMA.into(),
            threshold: pairing.threshold,
            combine,
            sources: scores.sources.clone(),
            targets: scores.targets.clone(),
            scores: scores.scores.clone(),
            pairs: pairing
                .pairs
                .iter()
                .map(|p| PairEntry {
                    source: p.source.clone(),
                    target: p.target.clone(),
                    score: p.score,
                })
                .collect(),
            unmatched_sources: pairing.unmatched_sources.clone(),
        }
    }

    pub fn to_json(&self) -> Vec<u8> {
        json_bytes(self)
    }
}
