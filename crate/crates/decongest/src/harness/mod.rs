//! Experiment harness: declarative TOML configs, deterministic runners for
//! the four studies (mask enumeration, learning, pricing sweeps, trade-off
//! sweeps), a flat CSV result schema, and a post-hoc verifier that
//! re-derives reported rows from the config alone.
//!
//! Determinism contract: a (config, master seed) pair fixes every CSV byte.
//! Wall-clock facts live only in the metadata sidecar.

pub mod config;
pub mod enumstudy;
pub mod learnstudy;
pub mod table;
pub mod verify;

use std::path::{Path, PathBuf};

pub use config::{ExperimentConfig, ExperimentId};
pub use learnstudy::{mask_metrics, MaskMetrics};
pub use table::{ResultRow, ResultTable};
pub use verify::{verify_run, VerifyReport};

use crate::error::Result;
use table::RunMetadata;

pub const SCHEMA_VERSION: u32 = 1;

/// Tables produced by one experiment run: the main result table plus any
/// named side tables (e.g. per-mask diagnostics).
pub struct ExperimentOutput {
    pub main: ResultTable,
    pub extras: Vec<(&'static str, ResultTable)>,
}

/// Dispatch on the experiment kind. Validation happens inside each runner.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    match config.experiment {
        ExperimentId::MaskEnum => enumstudy::run_mask_enum(config),
        ExperimentId::Learn => learnstudy::run_learn(config),
        ExperimentId::Prices => learnstudy::run_prices(config),
        ExperimentId::Lambda => learnstudy::run_lambda(config),
    }
}

/// Canonical file layout of one run inside its output directory.
pub struct RunPaths {
    dir: PathBuf,
    label: String,
    pub raw: PathBuf,
    pub summary: PathBuf,
    pub metadata: PathBuf,
}

impl RunPaths {
    pub fn extra(&self, name: &str) -> PathBuf {
        self.dir.join(format!("{}_{name}.csv", self.label))
    }

    /// Side tables found on disk: every `<label>_*.csv` that is neither the
    /// raw table nor the summary, in sorted order.
    pub fn extras_present(&self) -> Vec<PathBuf> {
        let mut found = Vec::new();
        let Ok(entries) = std::fs::read_dir(&self.dir) else {
            return found;
        };
        for entry in entries.flatten() {
            let path = entry.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
                continue;
            };
            if name.starts_with(&format!("{}_", self.label))
                && name.ends_with(".csv")
                && path != self.raw
                && path != self.summary
            {
                found.push(path);
            }
        }
        found.sort();
        found
    }
}

pub fn run_paths(dir: &Path, label: &str) -> RunPaths {
    RunPaths {
        dir: dir.to_path_buf(),
        label: label.to_string(),
        raw: dir.join(format!("{label}_raw.csv")),
        summary: dir.join(format!("{label}_summary.csv")),
        metadata: dir.join(format!("{label}.meta.json")),
    }
}

/// Write raw rows, the recomputed summary, side tables, and the metadata
/// sidecar. Only the sidecar carries non-reproducible facts (runtime).
pub fn write_all(
    output: &ExperimentOutput,
    dir: &Path,
    runtime_seconds: f64,
) -> Result<RunPaths> {
    std::fs::create_dir_all(dir)?;
    let paths = run_paths(dir, &output.main.experiment);
    output.main.write_csv(&paths.raw)?;
    std::fs::write(&paths.summary, table::summary_csv(&output.main)?)?;
    for (name, extra_table) in &output.extras {
        // Side tables can legitimately come back empty (e.g. diagnostics
        // keyed to a grid point the config does not visit).
        if !extra_table.rows.is_empty() {
            extra_table.write_csv(&paths.extra(name))?;
        }
    }
    table::write_metadata(
        &paths.metadata,
        &RunMetadata {
            schema_version: SCHEMA_VERSION,
            experiment: output.main.experiment.clone(),
            config_hash: output.main.config_hash.clone(),
            master_seed: output.main.master_seed,
            row_count: output.main.rows.len(),
            runtime_seconds,
        },
    )?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn write_all_lays_out_raw_summary_extras_and_metadata() {
        let mut table = ResultTable::new("mask-enum", "deadbeefdeadbeef", 7);
        let mut row = ResultRow::new("mask-enum", "random", 7, 0.5);
        row.k = Some(2);
        table.rows.push(row.clone());
        let mut extras = ResultTable::new("mask-enum", "deadbeefdeadbeef", 7);
        extras.rows.push(row);
        let empty = ResultTable::new("mask-enum", "deadbeefdeadbeef", 7);
        let output = ExperimentOutput {
            main: table,
            extras: vec![("per_mask", extras), ("unvisited", empty)],
        };
        let dir = std::env::temp_dir()
            .join(format!("decongest-layout-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();

        let paths = write_all(&output, &dir, 2.25).unwrap();
        assert!(paths.raw.exists());
        assert!(paths.summary.exists());
        assert!(paths.metadata.exists());
        assert_eq!(paths.extras_present(), vec![paths.extra("per_mask")]);

        let round = ResultTable::read_csv(&paths.raw).unwrap();
        assert_eq!(round, output.main);
        let meta: RunMetadata = serde_json::from_str(
            &std::fs::read_to_string(&paths.metadata).unwrap(),
        )
        .unwrap();
        assert_eq!(meta.row_count, 1);
        assert_eq!(meta.runtime_seconds, 2.25);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
