//! Long-format result tables: a fixed column set, comment-embedded
//! provenance, deterministic CSV bytes, and a grouped summary view.
//!
//! Wall-clock runtime is deliberately kept out of the CSV (it lives in the
//! JSON sidecar) so that re-running an experiment with the same config and
//! seed reproduces the tables byte for byte.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::Mask;
use crate::stats;

pub const RESULT_COLUMNS: [&str; 17] = [
    "experiment",
    "method",
    "mask",
    "k",
    "alpha",
    "rho",
    "gamma",
    "epsilon",
    "lambda",
    "seed",
    "replicate",
    "fold",
    "welfare",
    "allocated_items",
    "congestion",
    "distortion",
    "kendalls_w",
];

/// One observation. Optional fields stay empty in the CSV when a column
/// does not apply to the method or experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub method: String,
    /// Deployed mask as a bit string (methods that commit to one mask).
    pub mask: Option<String>,
    pub k: Option<usize>,
    pub alpha: Option<f64>,
    pub rho: Option<f64>,
    pub gamma: Option<f64>,
    pub epsilon: Option<f64>,
    pub lambda: Option<f64>,
    /// Master seed of the run; identical on every row of a table.
    pub seed: u64,
    /// Instance (mixture) or sample-set (pool) index.
    pub replicate: Option<usize>,
    pub fold: Option<usize>,
    pub welfare: f64,
    pub allocated_items: Option<f64>,
    pub congestion: Option<f64>,
    pub distortion: Option<f64>,
    pub kendalls_w: Option<f64>,
}

impl ResultRow {
    /// Empty row skeleton; runners fill what applies.
    pub fn new(experiment: &str, method: &str, seed: u64, welfare: f64) -> Self {
        ResultRow {
            experiment: experiment.to_string(),
            method: method.to_string(),
            mask: None,
            k: None,
            alpha: None,
            rho: None,
            gamma: None,
            epsilon: None,
            lambda: None,
            seed,
            replicate: None,
            fold: None,
            welfare,
            allocated_items: None,
            congestion: None,
            distortion: None,
            kendalls_w: None,
        }
    }
}

/// Render a mask as the `mask` column token.
pub fn mask_token(mask: &Mask) -> String {
    mask.bits().iter().map(|&b| char::from(b'0' + b)).collect()
}

/// Parse a `mask` column token back into a mask.
pub fn parse_mask_token(token: &str) -> Result<Mask> {
    let bits: Result<Vec<u8>> = token
        .chars()
        .map(|c| match c {
            '0' => Ok(0),
            '1' => Ok(1),
            _ => Err(Error::invalid(format!("invalid mask token {token:?}"))),
        })
        .collect();
    Mask::new(bits?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultTable {
    pub experiment: String,
    pub config_hash: String,
    pub master_seed: u64,
    pub rows: Vec<ResultRow>,
}

fn fmt_f64_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn fmt_usize_opt(v: Option<usize>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_opt<T: std::str::FromStr>(field: &str, token: &str) -> Result<Option<T>> {
    if token.is_empty() {
        return Ok(None);
    }
    token
        .parse::<T>()
        .map(Some)
        .map_err(|_| Error::invalid(format!("bad {field} value {token:?}")))
}

impl ResultTable {
    pub fn new(experiment: &str, config_hash: &str, master_seed: u64) -> Self {
        ResultTable {
            experiment: experiment.to_string(),
            config_hash: config_hash.to_string(),
            master_seed,
            rows: Vec::new(),
        }
    }

    /// CSV with provenance comments. Fails rather than emit a token that
    /// would corrupt the comma-separated layout or a non-finite number.
    pub fn to_csv_string(&self) -> Result<String> {
        let mut out = String::new();
        out.push_str(&format!("# config_hash={}\n", self.config_hash));
        out.push_str(&format!("# master_seed={}\n", self.master_seed));
        out.push_str(&RESULT_COLUMNS.join(","));
        out.push('\n');
        for row in &self.rows {
            if !row.welfare.is_finite() {
                return Err(Error::NonFinite("result row welfare"));
            }
            let fields = [
                row.experiment.clone(),
                row.method.clone(),
                row.mask.clone().unwrap_or_default(),
                fmt_usize_opt(row.k),
                fmt_f64_opt(row.alpha),
                fmt_f64_opt(row.rho),
                fmt_f64_opt(row.gamma),
                fmt_f64_opt(row.epsilon),
                fmt_f64_opt(row.lambda),
                row.seed.to_string(),
                fmt_usize_opt(row.replicate),
                fmt_usize_opt(row.fold),
                row.welfare.to_string(),
                fmt_f64_opt(row.allocated_items),
                fmt_f64_opt(row.congestion),
                fmt_f64_opt(row.distortion),
                fmt_f64_opt(row.kendalls_w),
            ];
            for field in &fields {
                if field.contains(',') || field.contains('\n') || field.contains('"') {
                    return Err(Error::invalid(format!(
                        "table field {field:?} would corrupt the CSV layout"
                    )));
                }
            }
            out.push_str(&fields.join(","));
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(self.to_csv_string()?.as_bytes())?;
        Ok(())
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut config_hash = None;
        let mut master_seed = None;
        let mut header_seen = false;
        let mut rows = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if let Some(rest) = line.strip_prefix("# ") {
                if let Some(v) = rest.strip_prefix("config_hash=") {
                    config_hash = Some(v.to_string());
                } else if let Some(v) = rest.strip_prefix("master_seed=") {
                    master_seed = Some(v.parse::<u64>().map_err(|_| {
                        Error::invalid(format!("bad master_seed comment {v:?}"))
                    })?);
                }
                continue;
            }
            if !header_seen {
                if line != RESULT_COLUMNS.join(",") {
                    return Err(Error::invalid(format!(
                        "unexpected header at line {}: {line:?}",
                        lineno + 1
                    )));
                }
                header_seen = true;
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != RESULT_COLUMNS.len() {
                return Err(Error::invalid(format!(
                    "line {} has {} fields, expected {}",
                    lineno + 1,
                    fields.len(),
                    RESULT_COLUMNS.len()
                )));
            }
            rows.push(ResultRow {
                experiment: fields[0].to_string(),
                method: fields[1].to_string(),
                mask: (!fields[2].is_empty()).then(|| fields[2].to_string()),
                k: parse_opt("k", fields[3])?,
                alpha: parse_opt("alpha", fields[4])?,
                rho: parse_opt("rho", fields[5])?,
                gamma: parse_opt("gamma", fields[6])?,
                epsilon: parse_opt("epsilon", fields[7])?,
                lambda: parse_opt("lambda", fields[8])?,
                seed: fields[9]
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad seed {:?}", fields[9])))?,
                replicate: parse_opt("replicate", fields[10])?,
                fold: parse_opt("fold", fields[11])?,
                welfare: fields[12]
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad welfare {:?}", fields[12])))?,
                allocated_items: parse_opt("allocated_items", fields[13])?,
                congestion: parse_opt("congestion", fields[14])?,
                distortion: parse_opt("distortion", fields[15])?,
                kendalls_w: parse_opt("kendalls_w", fields[16])?,
            });
        }
        let experiment = rows
            .first()
            .map(|r| r.experiment.clone())
            .unwrap_or_default();
        Ok(ResultTable {
            experiment,
            config_hash: config_hash
                .ok_or_else(|| Error::invalid("missing # config_hash comment"))?,
            master_seed: master_seed
                .ok_or_else(|| Error::invalid("missing # master_seed comment"))?,
            rows,
        })
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::from_csv_str(&std::fs::read_to_string(path)?)
    }
}

/// Aggregate over replicates and folds: one row per
/// (method, k, alpha, rho, gamma, epsilon, lambda) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub experiment: String,
    pub method: String,
    pub k: Option<usize>,
    pub alpha: Option<f64>,
    pub rho: Option<f64>,
    pub gamma: Option<f64>,
    pub epsilon: Option<f64>,
    pub lambda: Option<f64>,
    pub cells: usize,
    pub welfare_mean: f64,
    /// Half-width of the 95% interval: 1.96 × SE over cells.
    pub welfare_se95: f64,
    /// Mean welfare relative to the random baseline of the same cell
    /// (absent when no random rows share the cell).
    pub welfare_rel_random: Option<f64>,
}

const SUMMARY_COLUMNS: [&str; 12] = [
    "experiment",
    "method",
    "k",
    "alpha",
    "rho",
    "gamma",
    "epsilon",
    "lambda",
    "cells",
    "welfare_mean",
    "welfare_se95",
    "welfare_rel_random",
];

/// Group rows and compute mean / 95% half-interval / random-relative
/// welfare. Grouping keys are formatted strings, so the output order is
/// deterministic and exactly reflects the CSV tokens.
pub fn summarize(table: &ResultTable) -> Vec<SummaryRow> {
    type Key = (String, Vec<String>);
    let mut groups: BTreeMap<Key, Vec<&ResultRow>> = BTreeMap::new();
    for row in &table.rows {
        let cell = vec![
            fmt_usize_opt(row.k),
            fmt_f64_opt(row.alpha),
            fmt_f64_opt(row.rho),
            fmt_f64_opt(row.gamma),
            fmt_f64_opt(row.epsilon),
            fmt_f64_opt(row.lambda),
        ];
        groups.entry((row.method.clone(), cell)).or_default().push(row);
    }

    // Random-baseline mean per cell, for the relative column.
    let mut random_mean: BTreeMap<Vec<String>, f64> = BTreeMap::new();
    for ((method, cell), rows) in &groups {
        if method == "random" {
            let welfare: Vec<f64> = rows.iter().map(|r| r.welfare).collect();
            random_mean.insert(cell.clone(), stats::mean(&welfare));
        }
    }

    let mut out = Vec::new();
    for ((method, cell), rows) in &groups {
        let welfare: Vec<f64> = rows.iter().map(|r| r.welfare).collect();
        let mean = stats::mean(&welfare);
        let se95 = 1.96 * stats::standard_error(&welfare);
        let sample = rows[0];
        out.push(SummaryRow {
            experiment: sample.experiment.clone(),
            method: method.clone(),
            k: sample.k,
            alpha: sample.alpha,
            rho: sample.rho,
            gamma: sample.gamma,
            epsilon: sample.epsilon,
            lambda: sample.lambda,
            cells: rows.len(),
            welfare_mean: mean,
            welfare_se95: se95,
            welfare_rel_random: random_mean.get(cell).map(|rm| mean / rm),
        });
    }
    out
}

/// Summary rows as CSV with the same provenance comments.
pub fn summary_csv(table: &ResultTable) -> Result<String> {
    let mut out = String::new();
    out.push_str(&format!("# config_hash={}\n", table.config_hash));
    out.push_str(&format!("# master_seed={}\n", table.master_seed));
    out.push_str(&SUMMARY_COLUMNS.join(","));
    out.push('\n');
    for row in summarize(table) {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            row.experiment,
            row.method,
            fmt_usize_opt(row.k),
            fmt_f64_opt(row.alpha),
            fmt_f64_opt(row.rho),
            fmt_f64_opt(row.gamma),
            fmt_f64_opt(row.epsilon),
            fmt_f64_opt(row.lambda),
            row.cells,
            row.welfare_mean,
            row.welfare_se95,
            fmt_f64_opt(row.welfare_rel_random),
        ));
    }
    Ok(out)
}

/// Run facts that may legitimately differ between reproductions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMetadata {
    pub schema_version: u32,
    pub experiment: String,
    pub config_hash: String,
    pub master_seed: u64,
    pub row_count: usize,
    pub runtime_seconds: f64,
}

pub fn write_metadata(path: &Path, metadata: &RunMetadata) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(serde_json::to_string_pretty(metadata)?.as_bytes())?;
    Ok(())
}
