//! Exhaustive mask-enumeration study on mixture markets: every k-subset
//! mask is scored under all six objectives across the preference-alignment
//! and dispersion grids, and the per-mask diagnostics of one α are exported
//! for the welfare-vs-distortion correlation analysis.

use rayon::prelude::*;

use crate::data::{self, MixtureSpec};
use crate::error::Result;
use crate::harness::config::ExperimentConfig;
use crate::harness::table::{mask_token, ResultRow, ResultTable};
use crate::harness::ExperimentOutput;
use crate::market::Market;
use crate::objectives::default_lambda;
use crate::pricing;
use crate::seed;
use crate::sweep::{self, MaskRecord, ObjectiveKind, SweepOptions};

/// All six enumeration objectives, in a fixed reporting order.
pub fn enumeration_objectives(lambda: f64) -> [ObjectiveKind; 6] {
    [
        ObjectiveKind::WelfareOracle,
        ObjectiveKind::PredictiveOracle,
        ObjectiveKind::Proxy { lambda },
        ObjectiveKind::SelectionOnly,
        ObjectiveKind::DecongestionOnly,
        ObjectiveKind::LowerBound,
    ]
}

/// Rebuild the market of one (instance, α, ρ) cell. The instance seed is
/// shared across the whole grid so curves vary only through α and ρ, and
/// noisy pricing schemes get a per-cell noise stream.
pub fn instance_market(
    config: &ExperimentConfig,
    replicate: usize,
    alpha: f64,
    rho: f64,
    cell_index: usize,
) -> Result<Market> {
    let instance_seed =
        seed::derive_seed(config.master_seed, "enum-instance", replicate as u64);
    let spec = MixtureSpec {
        n: config.data.n,
        m: config.data.m,
        d: config.data.d,
        alpha,
        rho,
        seed: instance_seed,
    };
    let market = data::make_mixture_market(&spec)?;
    let scheme = data::per_market_scheme(&config.pricing.scheme(config.master_seed), cell_index);
    let prices = pricing::scheme_prices(&market.values()?, &scheme)?;
    market.with_prices(prices)
}

fn record_row(
    config: &ExperimentConfig,
    method: &str,
    record: &MaskRecord,
    k: usize,
    alpha: f64,
    rho: f64,
    replicate: usize,
) -> ResultRow {
    let mut row = ResultRow::new("mask-enum", method, config.master_seed, record.welfare);
    row.mask = Some(mask_token(&record.mask));
    row.k = Some(k);
    row.alpha = Some(alpha);
    row.rho = Some(rho);
    row.replicate = Some(replicate);
    row.allocated_items = Some(record.allocated_items as f64);
    row.congestion = Some(record.congestion as f64);
    row.distortion = record.distortion;
    row.kendalls_w = record.kendalls_w;
    row
}

pub fn run_mask_enum(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    config.validate()?;
    let hash = config.content_hash()?;
    let d = config.data.d;
    let k = config.learner.k_list[0];
    let lambda = config.learner.lambda.unwrap_or_else(|| default_lambda(k, d));
    let kinds = enumeration_objectives(lambda);
    let options = SweepOptions {
        cap: config.evaluation.enumeration_cap,
        with_distortion: true,
        with_kendalls_w: true,
        ..SweepOptions::default()
    };

    struct Cell {
        replicate: usize,
        alpha: f64,
        rho: f64,
        index: usize,
    }
    let mut cells = Vec::new();
    for replicate in 0..config.data.instances {
        for &alpha in &config.data.alpha_grid {
            for &rho in &config.data.rho_grid {
                let index = cells.len();
                cells.push(Cell { replicate, alpha, rho, index });
            }
        }
    }

    let per_cell: Vec<(Vec<ResultRow>, Vec<ResultRow>)> = cells
        .par_iter()
        .map(|cell| -> Result<(Vec<ResultRow>, Vec<ResultRow>)> {
            let market =
                instance_market(config, cell.replicate, cell.alpha, cell.rho, cell.index)?;
            let sweeps = sweep::sweep(&market, k, &kinds, &options)?;

            let mut rows = Vec::new();
            for result in &sweeps {
                rows.push(record_row(
                    config,
                    &result.kind.label(),
                    result.best(),
                    k,
                    cell.alpha,
                    cell.rho,
                    cell.replicate,
                ));
                if matches!(result.kind, ObjectiveKind::DecongestionOnly) {
                    rows.push(record_row(
                        config,
                        "decongestion_only_worst",
                        result.worst_tied(),
                        k,
                        cell.alpha,
                        cell.rho,
                        cell.replicate,
                    ));
                }
            }

            // Per-mask diagnostics at the correlation α (dispersion off):
            // the diagnostics are shared across objectives, so any sweep
            // result carries them.
            let mut per_mask = Vec::new();
            if (cell.alpha - config.data.correlation_alpha).abs() < 1e-12
                && (cell.rho - 1.0).abs() < 1e-12
            {
                for record in &sweeps[0].records {
                    per_mask.push(record_row(
                        config,
                        "mask-metrics",
                        record,
                        k,
                        cell.alpha,
                        cell.rho,
                        cell.replicate,
                    ));
                }
            }
            Ok((rows, per_mask))
        })
        .collect::<Result<_>>()?;

    let mut main = ResultTable::new("mask-enum", &hash, config.master_seed);
    let mut per_mask = ResultTable::new("mask-enum", &hash, config.master_seed);
    for (rows, extra) in per_cell {
        main.rows.extend(rows);
        per_mask.rows.extend(extra);
    }
    Ok(ExperimentOutput { main, extras: vec![("per_mask", per_mask)] })
}
