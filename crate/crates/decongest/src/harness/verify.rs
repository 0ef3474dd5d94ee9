//! Post-hoc audit of a written experiment run: re-derive a deterministic
//! sample of mask-carrying rows from the config alone and compare every
//! reported number bit-for-bit, then recompute the summary table from the
//! raw rows.
//!
//! This works because all row seeds are structural functions of the master
//! seed and the row coordinates (replicate, fold, k, grid point), never of
//! execution order.

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::config::{ExperimentConfig, ExperimentId};
use crate::harness::table::{
    parse_mask_token, summary_csv, ResultRow, ResultTable, RunMetadata,
};
use crate::harness::{enumstudy, learnstudy, run_paths};
use crate::market;

/// How many mask rows to re-derive by default. Each learn-family check
/// rebuilds the pool and one market set, so this stays small.
pub const DEFAULT_SAMPLE: usize = 8;

#[derive(Debug, Clone)]
pub struct VerifyReport {
    pub experiment: String,
    pub rows_total: usize,
    pub rows_checked: usize,
    pub summary_checked: bool,
    pub mismatches: Vec<String>,
}

impl VerifyReport {
    pub fn ok(&self) -> bool {
        self.mismatches.is_empty()
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{}: re-derived {}/{} rows{}",
            self.experiment,
            self.rows_checked,
            self.rows_total,
            if self.summary_checked { ", summary recomputed" } else { "" }
        )?;
        if self.mismatches.is_empty() {
            write!(f, "verdict: OK")
        } else {
            for m in &self.mismatches {
                writeln!(f, "mismatch: {m}")?;
            }
            write!(f, "verdict: FAILED ({} mismatches)", self.mismatches.len())
        }
    }
}

fn field_eq(expected: Option<f64>, got: f64) -> bool {
    match expected {
        None => true,
        Some(e) => e == got,
    }
}

fn grid_position(grid: &[f64], value: f64, name: &str) -> Result<usize> {
    grid.iter()
        .position(|&g| g == value)
        .ok_or_else(|| Error::invalid(format!("{name}={value} is not on the config grid")))
}

/// Recompute one mask-enum row (main table or per-mask extras) from scratch.
fn check_enum_row(config: &ExperimentConfig, row: &ResultRow) -> Result<Vec<String>> {
    let mut bad = Vec::new();
    let alpha = row.alpha.ok_or_else(|| Error::invalid("enum row without alpha"))?;
    let rho = row.rho.ok_or_else(|| Error::invalid("enum row without rho"))?;
    let replicate =
        row.replicate.ok_or_else(|| Error::invalid("enum row without replicate"))?;
    let alpha_pos = grid_position(&config.data.alpha_grid, alpha, "alpha")?;
    let rho_pos = grid_position(&config.data.rho_grid, rho, "rho")?;
    let cell_index = (replicate * config.data.alpha_grid.len() + alpha_pos)
        * config.data.rho_grid.len()
        + rho_pos;

    let market = enumstudy::instance_market(config, replicate, alpha, rho, cell_index)?;
    let mask = parse_mask_token(row.mask.as_ref().expect("sampled rows carry masks"))?;
    let outcome = market::mask_outcome(&market, &mask, market::Impute::Zero)?;
    if outcome.welfare != row.welfare {
        bad.push(format!(
            "welfare {} reported, {} recomputed",
            row.welfare, outcome.welfare
        ));
    }
    if !field_eq(row.allocated_items, outcome.allocated_items as f64) {
        bad.push("allocated_items differs".into());
    }
    if !field_eq(row.congestion, outcome.congestion as f64) {
        bad.push("congestion differs".into());
    }
    if let Some(reported) = row.distortion {
        let recomputed = market::perceptive_distortion(
            &market,
            &mask,
            &crate::pricing::PriceScheme::CeMid,
        )?;
        if reported != recomputed {
            bad.push(format!("distortion {reported} reported, {recomputed} recomputed"));
        }
    }
    if let Some(reported) = row.kendalls_w {
        let recomputed = market::kendalls_w(&outcome.view)?;
        if reported != recomputed {
            bad.push(format!("kendalls_w {reported} reported, {recomputed} recomputed"));
        }
    }
    Ok(bad)
}

/// Recompute one learn-family mask row: rebuild the pool, the market set
/// and the fold split, then re-score the stored mask on the test fold.
fn check_learn_row(config: &ExperimentConfig, row: &ResultRow) -> Result<Vec<String>> {
    let mut bad = Vec::new();
    let set = row.replicate.ok_or_else(|| Error::invalid("learn row without set"))?;
    let fold = row.fold.ok_or_else(|| Error::invalid("learn row without fold"))?;
    let point = match config.experiment {
        ExperimentId::Learn => learnstudy::GridPoint::BASE,
        ExperimentId::Prices => learnstudy::GridPoint {
            gamma: row.gamma,
            epsilon: row.epsilon,
            lambda: None,
        },
        ExperimentId::Lambda => learnstudy::GridPoint {
            gamma: None,
            epsilon: None,
            lambda: row.lambda,
        },
        ExperimentId::MaskEnum => unreachable!("dispatched earlier"),
    };
    let pool = learnstudy::build_pool(config)?;
    let markets = learnstudy::set_markets(config, &pool, set, point)?;
    let (_, test) = learnstudy::split_markets(config, &markets, set, fold)?;
    let mask = parse_mask_token(row.mask.as_ref().expect("sampled rows carry masks"))?;
    if let Some(k) = row.k {
        if mask.k() != k {
            bad.push(format!("mask has {} active features, row says k={k}", mask.k()));
        }
    }
    let metrics = learnstudy::mask_metrics(&test, &mask)?;
    for (name, reported, recomputed) in [
        ("welfare", Some(row.welfare), metrics.welfare),
        ("allocated_items", row.allocated_items, metrics.allocated_items),
        ("congestion", row.congestion, metrics.congestion),
        ("distortion", row.distortion, metrics.distortion),
        ("kendalls_w", row.kendalls_w, metrics.kendalls_w),
    ] {
        if !field_eq(reported, recomputed) {
            bad.push(format!(
                "{name} {} reported, {recomputed} recomputed",
                reported.expect("checked fields are present")
            ));
        }
    }
    Ok(bad)
}

/// Deterministic row sample: stride through the mask-carrying candidates,
/// anchored at the config hash so repeated audits pick identical rows.
fn sample_indices(hash: &str, candidates: usize, sample: usize) -> Vec<usize> {
    if candidates <= sample {
        return (0..candidates).collect();
    }
    let anchor = u64::from_str_radix(&hash[..hash.len().min(16)], 16).unwrap_or(0);
    let start = (anchor as usize) % candidates;
    let stride = (candidates / sample).max(1);
    let mut picked = Vec::with_capacity(sample);
    for j in 0..sample {
        picked.push((start + j * stride) % candidates);
    }
    picked.sort_unstable();
    picked.dedup();
    picked
}

/// Audit one parsed table against the config it claims to come from.
pub fn verify_table(
    config: &ExperimentConfig,
    table: &ResultTable,
    sample: usize,
) -> Result<VerifyReport> {
    let mut report = VerifyReport {
        experiment: table.experiment.clone(),
        rows_total: table.rows.len(),
        rows_checked: 0,
        summary_checked: false,
        mismatches: Vec::new(),
    };
    let expected_hash = config.content_hash()?;
    if table.config_hash != expected_hash {
        report.mismatches.push(format!(
            "config hash {} in table, {expected_hash} from config",
            table.config_hash
        ));
        return Ok(report);
    }
    if table.master_seed != config.master_seed {
        report.mismatches.push(format!(
            "master seed {} in table, {} in config",
            table.master_seed, config.master_seed
        ));
    }
    if table.experiment != config.experiment.label() {
        report.mismatches.push(format!(
            "experiment {} in table, {} in config",
            table.experiment,
            config.experiment.label()
        ));
        return Ok(report);
    }

    let candidates: Vec<usize> = table
        .rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.mask.is_some())
        .map(|(i, _)| i)
        .collect();
    for pick in sample_indices(&expected_hash, candidates.len(), sample) {
        let idx = candidates[pick];
        let row = &table.rows[idx];
        if row.seed != config.master_seed {
            report
                .mismatches
                .push(format!("row {idx}: seed {} differs from master", row.seed));
            continue;
        }
        let bad = match config.experiment {
            ExperimentId::MaskEnum => check_enum_row(config, row),
            _ => check_learn_row(config, row),
        }?;
        report.rows_checked += 1;
        for b in bad {
            report
                .mismatches
                .push(format!("row {idx} ({}, {}): {b}", row.experiment, row.method));
        }
    }
    Ok(report)
}

/// Audit a full written run directory: raw table, per-mask extras when
/// present, the summary CSV, and the metadata sidecar.
pub fn verify_run(
    config: &ExperimentConfig,
    dir: &Path,
    sample: usize,
) -> Result<VerifyReport> {
    let paths = run_paths(dir, &config.experiment.label());
    let table = ResultTable::read_csv(&paths.raw)?;
    let mut report = verify_table(config, &table, sample)?;

    if paths.summary.exists() {
        let stored = std::fs::read_to_string(&paths.summary)?;
        let recomputed = summary_csv(&table)?;
        if stored != recomputed {
            report
                .mismatches
                .push("summary CSV does not match a recomputation from the raw rows".into());
        }
        report.summary_checked = true;
    }

    for extra in paths.extras_present() {
        let extra_table = ResultTable::read_csv(&extra)?;
        let sub = verify_table(config, &extra_table, sample)?;
        report.rows_total += sub.rows_total;
        report.rows_checked += sub.rows_checked;
        let name = extra.file_name().map(|n| n.to_string_lossy().into_owned());
        for m in sub.mismatches {
            report
                .mismatches
                .push(format!("{}: {m}", name.as_deref().unwrap_or("extras")));
        }
    }

    if paths.metadata.exists() {
        let meta: RunMetadata =
            serde_json::from_str(&std::fs::read_to_string(&paths.metadata)?)?;
        if meta.config_hash != table.config_hash {
            report.mismatches.push("metadata config hash differs from the table".into());
        }
        if meta.master_seed != table.master_seed {
            report.mismatches.push("metadata master seed differs from the table".into());
        }
        if meta.row_count != table.rows.len() {
            report.mismatches.push(format!(
                "metadata says {} rows, table has {}",
                meta.row_count,
                table.rows.len()
            ));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::ExperimentId;
    use crate::harness::{run_experiment, write_all};

    fn temp_dir(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir()
            .join(format!("decongest-verify-{tag}-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn tiny_enum_config() -> ExperimentConfig {
        let mut config = ExperimentConfig::defaults_for(ExperimentId::MaskEnum);
        config.data.n = 4;
        config.data.m = 4;
        config.data.d = 6;
        config.data.instances = 2;
        config.data.alpha_grid = vec![0.0, 0.2];
        config.data.rho_grid = vec![1.0];
        config.learner.k_list = vec![3];
        config
    }

    #[test]
    fn clean_enum_run_verifies_bit_for_bit() {
        let config = tiny_enum_config();
        let output = run_experiment(&config).unwrap();
        let dir = temp_dir("enum-clean");
        write_all(&output, &dir, 0.0).unwrap();
        let report = verify_run(&config, &dir, 6).unwrap();
        assert!(report.ok(), "{report}");
        assert!(report.rows_checked >= 6);
        assert!(report.summary_checked);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn tampered_welfare_is_caught() {
        let config = tiny_enum_config();
        let mut output = run_experiment(&config).unwrap();
        let victim = output
            .main
            .rows
            .iter()
            .position(|r| r.mask.is_some())
            .expect("enum rows carry masks");
        // Nudge every mask row so the deterministic sample must hit one.
        for row in output.main.rows.iter_mut().filter(|r| r.mask.is_some()) {
            row.welfare += 1e-3;
        }
        let _ = victim;
        let dir = temp_dir("enum-tampered");
        write_all(&output, &dir, 0.0).unwrap();
        let report = verify_run(&config, &dir, 4).unwrap();
        assert!(!report.ok());
        assert!(report.mismatches.iter().any(|m| m.contains("welfare")));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn learn_rows_re_derive_from_row_coordinates_alone() {
        let config = crate::harness::learnstudy::tests::tiny_learn_config();
        let output = run_experiment(&config).unwrap();
        let dir = temp_dir("learn-clean");
        write_all(&output, &dir, 1.5).unwrap();
        let report = verify_run(&config, &dir, 5).unwrap();
        assert!(report.ok(), "{report}");
        assert!(report.rows_checked >= 5);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn summary_tampering_is_caught() {
        let config = tiny_enum_config();
        let output = run_experiment(&config).unwrap();
        let dir = temp_dir("summary-tampered");
        let paths = write_all(&output, &dir, 0.0).unwrap();
        let mut summary = std::fs::read_to_string(&paths.summary).unwrap();
        summary.push_str("mask-enum,welfare_oracle,3,,,,,,1,0.9,0,\n");
        std::fs::write(&paths.summary, summary).unwrap();
        let report = verify_run(&config, &dir, 2).unwrap();
        assert!(report.mismatches.iter().any(|m| m.contains("summary")));
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn foreign_config_is_rejected_up_front() {
        let config = tiny_enum_config();
        let output = run_experiment(&config).unwrap();
        let dir = temp_dir("foreign-config");
        write_all(&output, &dir, 0.0).unwrap();
        let mut other = tiny_enum_config();
        other.master_seed += 1;
        let report = verify_run(&other, &dir, 2).unwrap();
        assert!(!report.ok());
        assert_eq!(report.rows_checked, 0);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn row_sampling_is_deterministic_and_in_range() {
        let picks = sample_indices("00000000000000ff", 37, 8);
        assert_eq!(picks, sample_indices("00000000000000ff", 37, 8));
        assert!(picks.iter().all(|&i| i < 37));
        assert!(!picks.is_empty());
        assert_eq!(sample_indices("ab", 3, 10), vec![0, 1, 2]);
    }
}
