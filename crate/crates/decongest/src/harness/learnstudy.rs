//! The learning-study pipeline behind the learn / prices / lambda
//! experiments: factorized pool → sampled markets → logged-choice dataset
//! under π₀ → choice predictor → mask learner → deployments and baselines
//! on held-out folds.
//!
//! Every cell (sample set × fold × mask size × grid point) derives its seeds
//! structurally from the master seed and the row coordinates, so any row can
//! be re-derived in isolation — the verify pass depends on this.

use itertools::Itertools;
use ndarray::{Array1, Array2};
use rayon::prelude::*;

use crate::baselines;
use crate::data::{self, DatasetOptions, FactorizedPool};
use crate::error::{Error, Result};
use crate::harness::config::{DataSource, ExperimentConfig, ExperimentId};
use crate::harness::table::{mask_token, ResultRow, ResultTable};
use crate::harness::ExperimentOutput;
use crate::learner::{self, ChoiceModel, DeployMode};
use crate::market::{self, Impute, Market, Mask};
use crate::predictor;
use crate::pricing::PriceScheme;
use crate::seed;
use crate::stats;

/// One pricing/trade-off variation of the base pipeline. `None` entries
/// leave the corresponding base-config value untouched and the CSV column
/// empty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub gamma: Option<f64>,
    pub epsilon: Option<f64>,
    pub lambda: Option<f64>,
}

impl GridPoint {
    pub const BASE: GridPoint = GridPoint { gamma: None, epsilon: None, lambda: None };
}

/// Load or synthesize the factorized pool. Pure function of the config and
/// master seed; built once per run and shared by every cell.
pub fn build_pool(config: &ExperimentConfig) -> Result<FactorizedPool> {
    if config.data.source != DataSource::Pool {
        return Err(Error::invalid("this experiment needs a factorized pool"));
    }
    let pool = match &config.data.pool_path {
        Some(path) => FactorizedPool::from_json(&std::fs::read_to_string(path)?)?,
        None => {
            let ratings = data::synthetic_ratings(
                config.data.pool_users,
                config.data.pool_items,
                config.data.pool_rank,
                config.data.pool_density,
                seed::derive_seed(config.master_seed, "pool-ratings", 0),
            )?;
            data::factorize(
                &ratings,
                config.data.d,
                config.data.nmf_iters,
                seed::derive_seed(config.master_seed, "pool-factorize", 0),
            )?
            .pool
        }
    };
    if pool.d() != config.data.d {
        return Err(Error::ShapeMismatch {
            context: "pool feature dimension",
            expected: format!("d={}", config.data.d),
            got: format!("d={}", pool.d()),
        });
    }
    if pool.n_users() < config.data.n || pool.n_items() < config.data.m {
        return Err(Error::invalid(format!(
            "pool of {} users x {} items cannot supply n={}, m={}",
            pool.n_users(),
            pool.n_items(),
            config.data.n,
            config.data.m
        )));
    }
    Ok(pool)
}

/// Pricing scheme of one grid point: γ overrides switch to the CE
/// interpolation, ε overrides to noisy mid-CE prices, and the base scheme
/// applies otherwise.
fn point_scheme(config: &ExperimentConfig, point: GridPoint) -> PriceScheme {
    if let Some(gamma) = point.gamma {
        return PriceScheme::CeInterpolated { gamma };
    }
    if let Some(epsilon) = point.epsilon {
        return PriceScheme::CeNoisyPrices {
            epsilon,
            noise_seed: seed::derive_seed(config.master_seed, "price-noise", 0),
        };
    }
    config.pricing.scheme(config.master_seed)
}

/// Markets of one sample set under one grid point. The sampling seed
/// depends only on the set, so grid points see identical items and users
/// and differ purely through prices.
pub fn set_markets(
    config: &ExperimentConfig,
    pool: &FactorizedPool,
    set: usize,
    point: GridPoint,
) -> Result<Vec<Market>> {
    data::sample_markets(
        pool,
        config.data.m,
        config.data.n,
        config.data.markets,
        &point_scheme(config, point),
        seed::derive_seed(config.master_seed, "learn-markets", set as u64),
    )
}

/// Train/test split of one (set, fold) cell.
pub fn split_markets(
    config: &ExperimentConfig,
    markets: &[Market],
    set: usize,
    fold: usize,
) -> Result<(Vec<Market>, Vec<Market>)> {
    let folds = data::fold_partition(
        markets.len(),
        config.data.folds,
        seed::derive_seed(config.master_seed, "learn-folds", set as u64),
    )?;
    let test_idx = &folds[fold];
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, market) in markets.iter().enumerate() {
        if test_idx.binary_search(&i).is_ok() {
            test.push(market.clone());
        } else {
            train.push(market.clone());
        }
    }
    Ok((train, test))
}

fn opt_tag(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "-".into())
}

/// Root seed of one cell, derived structurally from the row coordinates so
/// a single row can be recomputed without replaying the whole run.
pub fn cell_seed(
    master_seed: u64,
    set: usize,
    fold: usize,
    k: usize,
    gamma: Option<f64>,
    epsilon: Option<f64>,
    lambda: f64,
) -> u64 {
    let a = seed::derive_seed(master_seed, "learn-set", set as u64);
    let b = seed::derive_seed(a, "learn-fold", fold as u64);
    let c = seed::derive_seed(b, "learn-k", k as u64);
    let domain = format!("point-g{}-e{}-l{}", opt_tag(gamma), opt_tag(epsilon), lambda);
    seed::derive_seed(c, &domain, 0)
}

/// Item features and prices pooled across markets (m·L rows), the training
/// data of the price regressor.
pub fn stacked_item_pool(markets: &[Market]) -> (Array2<f64>, Array1<f64>) {
    let m: usize = markets.iter().map(|mk| mk.m()).sum();
    let d = markets[0].d();
    let mut features = Array2::zeros((m, d));
    let mut prices = Array1::zeros(m);
    let mut row = 0;
    for market in markets {
        for j in 0..market.m() {
            features.row_mut(row).assign(&market.item_features().row(j));
            prices[row] = market.prices()[j];
            row += 1;
        }
    }
    (features, prices)
}

/// Observable user features pooled across markets (n·L rows).
pub fn stacked_user_pool(markets: &[Market]) -> Array2<f64> {
    let n: usize = markets.iter().map(|mk| mk.n()).sum();
    let d_user = markets[0].user_features().ncols();
    let mut users = Array2::zeros((n, d_user));
    let mut row = 0;
    for market in markets {
        for i in 0..market.n() {
            users.row_mut(row).assign(&market.user_features().row(i));
            row += 1;
        }
    }
    users
}

/// Mean per-market diagnostics of a fixed mask over a market set.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct MaskMetrics {
    pub welfare: f64,
    pub allocated_items: f64,
    pub congestion: f64,
    pub distortion: f64,
    pub kendalls_w: f64,
}

pub fn mask_metrics(markets: &[Market], mask: &Mask) -> Result<MaskMetrics> {
    let mut welfare = 0.0;
    let mut allocated = 0.0;
    let mut congestion = 0.0;
    let mut distortion = 0.0;
    let mut kendall = 0.0;
    for market in markets {
        let outcome = market::mask_outcome(market, mask, Impute::Zero)?;
        welfare += outcome.welfare;
        allocated += outcome.allocated_items as f64;
        congestion += outcome.congestion as f64;
        distortion += market::perceptive_distortion(market, mask, &PriceScheme::CeMid)?;
        kendall += market::kendalls_w(&outcome.view)?;
    }
    let count = markets.len() as f64;
    Ok(MaskMetrics {
        welfare: welfare / count,
        allocated_items: allocated / count,
        congestion: congestion / count,
        distortion: distortion / count,
        kendalls_w: kendall / count,
    })
}

/// Best k-mask by mean true welfare over `markets`, by full enumeration
/// (ties to the lexicographically first mask).
pub fn pooled_oracle_mask(markets: &[Market], k: usize, cap: u64) -> Result<(Mask, f64)> {
    if markets.is_empty() {
        return Err(Error::EmptyDataset("oracle enumeration needs markets"));
    }
    let d = markets[0].d();
    let count: u128 = {
        let k64 = (k as u64).min(d as u64 - k as u64);
        let mut acc: u128 = 1;
        for i in 0..k64 {
            acc = acc * (d as u64 - i) as u128 / (i + 1) as u128;
        }
        acc
    };
    if count > cap as u128 {
        return Err(Error::EnumerationTooLarge(format!(
            "C({d},{k}) = {count} masks exceeds the cap of {cap}"
        )));
    }
    let masks: Vec<Mask> = (0..d)
        .combinations(k)
        .map(|on| Mask::from_indices(d, &on).expect("valid combination"))
        .collect();
    let welfare: Vec<f64> = masks
        .par_iter()
        .map(|mask| -> Result<f64> {
            let mut total = 0.0;
            for market in markets {
                total += market::mask_outcome(market, mask, Impute::Zero)?.welfare;
            }
            Ok(total / markets.len() as f64)
        })
        .collect::<Result<_>>()?;
    let best = welfare
        .iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| a.total_cmp(b).then(ib.cmp(ia)))
        .map(|(i, _)| i)
        .expect("at least one mask");
    Ok((masks[best].clone(), welfare[best]))
}

/// Everything one (set, fold, k, grid-point) cell contributes to the table.
pub struct CellSpec {
    pub set: usize,
    pub fold: usize,
    pub k: usize,
    pub point: GridPoint,
}

/// Methods that commit to one mask carry it (and its diagnostics) in the
/// row; sampling methods report the bare welfare mean.
fn mask_row(
    base: &ResultRow,
    method: &str,
    markets: &[Market],
    mask: &Mask,
) -> Result<ResultRow> {
    let metrics = mask_metrics(markets, mask)?;
    let mut row = base.clone();
    row.method = method.to_string();
    row.mask = Some(mask_token(mask));
    row.welfare = metrics.welfare;
    row.allocated_items = Some(metrics.allocated_items);
    row.congestion = Some(metrics.congestion);
    row.distortion = Some(metrics.distortion);
    row.kendalls_w = Some(metrics.kendalls_w);
    Ok(row)
}

pub fn run_cell(
    config: &ExperimentConfig,
    pool: &FactorizedPool,
    experiment: &str,
    spec: &CellSpec,
) -> Result<Vec<ResultRow>> {
    let d = config.data.d;
    let k = spec.k;
    let markets = set_markets(config, pool, spec.set, spec.point)?;
    let (train, test) = split_markets(config, &markets, spec.set, spec.fold)?;

    let mut learner_config = config.learner.to_config(k, d, 0);
    if let Some(lambda) = spec.point.lambda {
        learner_config.lambda = lambda;
    }
    let lambda = learner_config.lambda;
    let root = cell_seed(
        config.master_seed,
        spec.set,
        spec.fold,
        k,
        spec.point.gamma,
        spec.point.epsilon,
        lambda,
    );
    learner_config.seed = seed::derive_seed(root, "fit", 0);

    // Logged choices under the default policy π₀ (concentrated on the
    // price-predictive mask), then the choice predictor trained on them.
    let (pool_features, pool_prices) = stacked_item_pool(&train);
    let default_mask = baselines::price_pred_mask(&pool_features, &pool_prices, k)?;
    let policy = data::default_policy(&default_mask);
    let options = DatasetOptions {
        masks_per_market: config.predictor.masks_per_market,
        propensity_samples: (config.predictor.propensity_samples > 0)
            .then_some(config.predictor.propensity_samples),
    };
    let dataset = data::sample_dataset(
        &train,
        &policy,
        k,
        &options,
        seed::derive_seed(root, "logged-data", 0),
    )?;
    let trained = predictor::train(
        &dataset,
        &config.predictor.to_config(seed::derive_seed(root, "predictor", 0)),
    )?;
    let weights = &trained.weights;

    let fit = learner::fit(&train, weights, &learner_config)?;
    let deploy_seed = seed::derive_seed(root, "deploy", 0);

    let mut base = ResultRow::new(experiment, "", config.master_seed, f64::NAN);
    base.k = Some(k);
    base.gamma = spec.point.gamma;
    base.epsilon = spec.point.epsilon;
    base.lambda = Some(lambda);
    base.replicate = Some(spec.set);
    base.fold = Some(spec.fold);

    let mut rows = Vec::new();

    let topk = learner::deploy(
        &fit.policy,
        DeployMode::TopK,
        &test,
        &train,
        &ChoiceModel::Truth,
        lambda,
        deploy_seed,
    )?;
    let topk_mask = topk.chosen.expect("top-k deployment commits to a mask");
    rows.push(mask_row(&base, "dbr-topk", &test, &topk_mask)?);

    let committed = learner::deploy(
        &fit.policy,
        DeployMode::CommittedSample { draws: config.evaluation.committed_draws },
        &test,
        &train,
        &ChoiceModel::Predictor(weights),
        lambda,
        deploy_seed,
    )?;
    let committed_mask = committed.chosen.expect("committed deployment chooses a mask");
    rows.push(mask_row(&base, "dbr-committed", &test, &committed_mask)?);

    let policy_report = learner::deploy(
        &fit.policy,
        DeployMode::Policy { draws: config.evaluation.policy_draws },
        &test,
        &train,
        &ChoiceModel::Truth,
        lambda,
        deploy_seed,
    )?;
    let mut policy_row = base.clone();
    policy_row.method = "dbr-policy".into();
    policy_row.welfare = policy_report.welfare;
    rows.push(policy_row);

    rows.push(mask_row(&base, "price-pred", &test, &default_mask)?);

    let choice_mask = baselines::choice_pred_mask(weights, &stacked_user_pool(&train), k)?;
    rows.push(mask_row(&base, "choice-pred", &test, &choice_mask)?);

    let random = baselines::random_baseline(
        &test,
        k,
        config.evaluation.random_draws,
        seed::derive_seed(root, "random-baseline", 0),
    )?;
    let mut random_row = base.clone();
    random_row.method = "random".into();
    random_row.welfare = random.mean;
    rows.push(random_row);

    if config.evaluation.oracle_k == k {
        match pooled_oracle_mask(&test, k, config.evaluation.enumeration_cap) {
            Ok((mask, _)) => rows.push(mask_row(&base, "oracle", &test, &mask)?),
            Err(Error::EnumerationTooLarge(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(rows)
}

fn run_cells(
    config: &ExperimentConfig,
    experiment: &str,
    cells: Vec<CellSpec>,
) -> Result<ExperimentOutput> {
    let pool = build_pool(config)?;
    let per_cell: Vec<Vec<ResultRow>> = cells
        .par_iter()
        .map(|spec| run_cell(config, &pool, experiment, spec))
        .collect::<Result<_>>()?;
    let mut table =
        ResultTable::new(experiment, &config.content_hash()?, config.master_seed);
    for rows in per_cell {
        table.rows.extend(rows);
    }
    Ok(ExperimentOutput { main: table, extras: Vec::new() })
}

pub fn run_learn(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    config.validate()?;
    let mut cells = Vec::new();
    for set in 0..config.data.sample_sets {
        for fold in 0..config.data.folds {
            for &k in &config.learner.k_list {
                cells.push(CellSpec { set, fold, k, point: GridPoint::BASE });
            }
        }
    }
    run_cells(config, ExperimentId::Learn.label(), cells)
}

pub fn run_prices(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    config.validate()?;
    let k = config.learner.k_list[0];
    let mut points = Vec::new();
    for &gamma in &config.evaluation.gamma_grid {
        points.push(GridPoint { gamma: Some(gamma), epsilon: None, lambda: None });
    }
    for &epsilon in &config.evaluation.epsilon_grid {
        points.push(GridPoint { gamma: None, epsilon: Some(epsilon), lambda: None });
    }
    let mut cells = Vec::new();
    for point in points {
        for set in 0..config.data.sample_sets {
            for fold in 0..config.data.folds {
                cells.push(CellSpec { set, fold, k, point });
            }
        }
    }
    run_cells(config, ExperimentId::Prices.label(), cells)
}

pub fn run_lambda(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    config.validate()?;
    let k = config.learner.k_list[0];
    let mut cells = Vec::new();
    for &lambda in &config.evaluation.lambda_grid {
        let point = GridPoint { gamma: None, epsilon: None, lambda: Some(lambda) };
        for set in 0..config.data.sample_sets {
            for fold in 0..config.data.folds {
                cells.push(CellSpec { set, fold, k, point });
            }
        }
    }
    run_cells(config, ExperimentId::Lambda.label(), cells)
}

/// Pooled standard-error comparison of two method columns: |mean_a − mean_b|
/// against `z` × sqrt(SE_a² + SE_b²). Used by the sweep-trend checks.
pub fn within_pooled_se(a: &[f64], b: &[f64], z: f64) -> bool {
    let gap = (stats::mean(a) - stats::mean(b)).abs();
    let pooled =
        (stats::standard_error(a).powi(2) + stats::standard_error(b).powi(2)).sqrt();
    gap <= z * pooled
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::harness::table::parse_mask_token;

    pub(crate) fn tiny_learn_config() -> ExperimentConfig {
        let mut config = ExperimentConfig::defaults_for(ExperimentId::Learn);
        config.data.n = 4;
        config.data.m = 4;
        config.data.d = 5;
        config.data.markets = 6;
        config.data.sample_sets = 1;
        config.data.folds = 2;
        config.data.pool_users = 12;
        config.data.pool_items = 8;
        config.data.pool_rank = 3;
        config.data.nmf_iters = 60;
        config.learner.k_list = vec![2];
        config.learner.epochs = 15;
        config.learner.masks_per_step = 6;
        config.learner.eval_draws = 8;
        config.predictor.epochs = 40;
        config.predictor.batch_size = 8;
        config.evaluation.random_draws = 20;
        config.evaluation.committed_draws = 5;
        config.evaluation.policy_draws = 5;
        config.evaluation.oracle_k = 2;
        config
    }

    #[test]
    fn learn_study_emits_every_method_and_is_deterministic() {
        let config = tiny_learn_config();
        let output = run_learn(&config).unwrap();
        // 1 set × 2 folds × 1 k × 7 methods (oracle included at k=2).
        assert_eq!(output.main.rows.len(), 14);
        let methods: Vec<&str> =
            output.main.rows.iter().map(|r| r.method.as_str()).collect();
        for expected in [
            "dbr-topk",
            "dbr-committed",
            "dbr-policy",
            "price-pred",
            "choice-pred",
            "random",
            "oracle",
        ] {
            assert_eq!(
                methods.iter().filter(|&&m| m == expected).count(),
                2,
                "missing rows for {expected}"
            );
        }
        let again = run_learn(&config).unwrap();
        assert_eq!(
            output.main.to_csv_string().unwrap(),
            again.main.to_csv_string().unwrap()
        );
    }

    #[test]
    fn oracle_rows_dominate_mask_methods_within_their_cell() {
        let config = tiny_learn_config();
        let output = run_learn(&config).unwrap();
        for fold in 0..2 {
            let cell: Vec<_> = output
                .main
                .rows
                .iter()
                .filter(|r| r.fold == Some(fold))
                .collect();
            let oracle = cell.iter().find(|r| r.method == "oracle").unwrap().welfare;
            for row in &cell {
                if row.mask.is_some() {
                    assert!(
                        oracle >= row.welfare - 1e-12,
                        "{} beat the oracle in fold {fold}",
                        row.method
                    );
                }
            }
        }
    }

    #[test]
    fn stored_masks_reproduce_their_row_welfare() {
        let config = tiny_learn_config();
        let output = run_learn(&config).unwrap();
        let pool = build_pool(&config).unwrap();
        for row in output.main.rows.iter().filter(|r| r.mask.is_some()) {
            let markets = set_markets(
                &config,
                &pool,
                row.replicate.unwrap(),
                GridPoint::BASE,
            )
            .unwrap();
            let (_, test) =
                split_markets(&config, &markets, row.replicate.unwrap(), row.fold.unwrap())
                    .unwrap();
            let mask = parse_mask_token(row.mask.as_ref().unwrap()).unwrap();
            let metrics = mask_metrics(&test, &mask).unwrap();
            assert_eq!(metrics.welfare, row.welfare, "row {:?}", row.method);
        }
    }

    #[test]
    fn grid_points_share_markets_and_differ_only_in_prices() {
        let config = tiny_learn_config();
        let pool = build_pool(&config).unwrap();
        let base = set_markets(&config, &pool, 0, GridPoint::BASE).unwrap();
        let seller = set_markets(
            &config,
            &pool,
            0,
            GridPoint { gamma: Some(1.0), epsilon: None, lambda: None },
        )
        .unwrap();
        for (a, b) in base.iter().zip(&seller) {
            assert_eq!(a.item_features(), b.item_features());
            assert_eq!(a.user_features(), b.user_features());
        }
        // Seller-optimal prices dominate the midpoint.
        let higher = base
            .iter()
            .zip(&seller)
            .all(|(a, b)| (0..a.m()).all(|j| b.prices()[j] >= a.prices()[j] - 1e-12));
        assert!(higher);
    }

    #[test]
    fn pooled_oracle_matches_direct_enumeration() {
        let config = tiny_learn_config();
        let pool = build_pool(&config).unwrap();
        let markets = set_markets(&config, &pool, 0, GridPoint::BASE).unwrap();
        let (mask, welfare) = pooled_oracle_mask(&markets, 2, 1000).unwrap();
        let mut best = f64::NEG_INFINITY;
        for on in (0..5).combinations(2) {
            let candidate = Mask::from_indices(5, &on).unwrap();
            let mean = markets
                .iter()
                .map(|mk| {
                    market::mask_outcome(mk, &candidate, Impute::Zero)
                        .unwrap()
                        .welfare
                })
                .sum::<f64>()
                / markets.len() as f64;
            best = best.max(mean);
        }
        assert_eq!(welfare, best);
        assert_eq!(mask.k(), 2);
        assert!(pooled_oracle_mask(&markets, 2, 3).is_err());
    }

    #[test]
    fn lambda_sweep_tags_rows_with_their_grid_value() {
        let mut config = tiny_learn_config();
        config.experiment = ExperimentId::Lambda;
        config.evaluation.lambda_grid = vec![0.2, 0.8];
        config.evaluation.oracle_k = 0;
        config.learner.epochs = 8;
        let output = run_lambda(&config).unwrap();
        // 2 λ × 1 set × 2 folds × 6 methods.
        assert_eq!(output.main.rows.len(), 24);
        for row in &output.main.rows {
            assert!(row.lambda == Some(0.2) || row.lambda == Some(0.8));
            assert_eq!(row.experiment, "lambda");
        }
    }
}
