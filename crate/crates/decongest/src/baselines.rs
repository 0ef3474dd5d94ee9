//! Non-learned comparison mask selectors.
//!
//! Three reference points bracket the learned policies: a lasso-path price
//! regressor that ranks features by how early they start explaining item
//! prices, an "average user" ranking read off the trained choice predictor,
//! and the uniform random-mask baseline.

use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{self, Impute, Market, Mask};
use crate::predictor::PredictorWeights;
use crate::seed;
use crate::stats;

const LASSO_GRID_POINTS: usize = 100;
const LASSO_MIN_RATIO: f64 = 1e-3;
const LASSO_TOL: f64 = 1e-8;
const LASSO_MAX_SWEEPS: usize = 1000;
// Coefficients below this are treated as never having entered the path.
const ACTIVATION_EPS: f64 = 1e-12;

/// Where a feature-importance ranking came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderingSource {
    LassoPath,
    ChoicePred,
}

/// Feature indices ranked most-important first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureOrdering {
    order: Vec<usize>,
    source: OrderingSource,
}

impl FeatureOrdering {
    fn new(order: Vec<usize>, source: OrderingSource) -> Result<Self> {
        let d = order.len();
        let mut seen = vec![false; d];
        for &f in &order {
            if f >= d || seen[f] {
                return Err(Error::invalid(format!(
                    "feature ordering is not a permutation of 0..{d}"
                )));
            }
            seen[f] = true;
        }
        Ok(FeatureOrdering { order, source })
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn source(&self) -> OrderingSource {
        self.source
    }

    pub fn d(&self) -> usize {
        self.order.len()
    }

    /// Mask keeping the k most important features.
    pub fn top_k(&self, k: usize) -> Result<Mask> {
        if k > self.d() {
            return Err(Error::invalid(format!(
                "cannot keep {k} of {} features",
                self.d()
            )));
        }
        Mask::from_indices(self.d(), &self.order[..k])
    }
}

/// Rank features by how early they activate on the lasso path of a linear
/// price regressor over the item pool.
///
/// Columns are standardized (centered, scaled to Σz² = N) and prices
/// centered; the path runs down a geometric grid of 100 penalties from
/// λ_max to 1e-3·λ_max with warm-started cyclic coordinate descent.
/// Features are ordered by first-activation grid index, then by absolute
/// final coefficient, then by absolute correlation with the centered
/// prices (this keeps exact duplicates adjacent: the twin that the
/// descent pins at zero still carries the full correlation), then by index.
pub fn price_pred_ordering(
    item_features: &Array2<f64>,
    prices: &Array1<f64>,
) -> Result<FeatureOrdering> {
    let (rows, d) = item_features.dim();
    if prices.len() != rows {
        return Err(Error::ShapeMismatch {
            context: "lasso price targets",
            expected: format!("{rows}"),
            got: format!("{}", prices.len()),
        });
    }
    if rows < 2 {
        return Err(Error::Degenerate(format!(
            "lasso path needs at least 2 items, got {rows}"
        )));
    }
    if item_features.iter().any(|v| !v.is_finite()) || prices.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("lasso inputs"));
    }

    let n = rows as f64;
    let y_mean = prices.mean().unwrap_or(0.0);
    let y: Vec<f64> = prices.iter().map(|&p| p - y_mean).collect();

    // z_j = (x_j − mean) / scale with Σ z² = N; (near-)constant columns
    // stay identically zero rather than blowing up on roundoff.
    let mut z = Array2::<f64>::zeros((rows, d));
    for j in 0..d {
        let col = item_features.column(j);
        let mu = col.mean().unwrap_or(0.0);
        let var: f64 = col.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n;
        let scale = var.sqrt();
        if scale > 1e-12 * (1.0 + mu.abs()) {
            for i in 0..rows {
                z[(i, j)] = (col[i] - mu) / scale;
            }
        }
    }

    // Marginal correlations (1/N)·z_jᵀy; λ_max is their largest magnitude.
    let mut corr = vec![0.0_f64; d];
    for j in 0..d {
        corr[j] = (0..rows).map(|i| z[(i, j)] * y[i]).sum::<f64>() / n;
    }
    let lambda_max = corr.iter().fold(0.0_f64, |a, &c| a.max(c.abs()));
    if lambda_max <= 1e-300 {
        // Nothing explains the prices; fall back to index order.
        return FeatureOrdering::new((0..d).collect(), OrderingSource::LassoPath);
    }

    let unit_col = |j: usize| z.column(j).iter().any(|&v| v != 0.0);
    let mut beta = vec![0.0_f64; d];
    let mut residual = y.clone();
    let mut first_active: Vec<Option<usize>> = vec![None; d];
    for t in 0..LASSO_GRID_POINTS {
        let frac = t as f64 / (LASSO_GRID_POINTS - 1) as f64;
        let lambda = lambda_max * LASSO_MIN_RATIO.powf(frac);
        for _ in 0..LASSO_MAX_SWEEPS {
            let mut max_delta = 0.0_f64;
            for j in 0..d {
                if !unit_col(j) {
                    continue;
                }
                let old = beta[j];
                // ρ = (1/N)·z_jᵀ(residual + z_j·β_j); unit columns make the
                // curvature term exactly 1.
                let rho =
                    (0..rows).map(|i| z[(i, j)] * residual[i]).sum::<f64>() / n + old;
                let new = rho.signum() * (rho.abs() - lambda).max(0.0);
                if new != old {
                    for i in 0..rows {
                        residual[i] += z[(i, j)] * (old - new);
                    }
                    beta[j] = new;
                    max_delta = max_delta.max((new - old).abs());
                }
            }
            if max_delta < LASSO_TOL {
                break;
            }
        }
        for j in 0..d {
            if first_active[j].is_none() && beta[j].abs() > ACTIVATION_EPS {
                first_active[j] = Some(t);
            }
        }
    }

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        let act_a = first_active[a].unwrap_or(usize::MAX);
        let act_b = first_active[b].unwrap_or(usize::MAX);
        act_a
            .cmp(&act_b)
            .then_with(|| beta[b].abs().total_cmp(&beta[a].abs()))
            .then_with(|| corr[b].abs().total_cmp(&corr[a].abs()))
            .then_with(|| a.cmp(&b))
    });
    FeatureOrdering::new(order, OrderingSource::LassoPath)
}

/// Top-k features by lasso-path price importance.
pub fn price_pred_mask(
    item_features: &Array2<f64>,
    prices: &Array1<f64>,
    k: usize,
) -> Result<Mask> {
    price_pred_ordering(item_features, prices)?.top_k(k)
}

/// Rank features by the mean estimated preference vector β̂_i = u_i Ŵ
/// averaged over the user pool (largest first, ties to the lowest index).
pub fn choice_pred_ordering(
    weights: &PredictorWeights,
    user_features: &Array2<f64>,
) -> Result<FeatureOrdering> {
    let (n_users, d_user) = user_features.dim();
    if n_users == 0 {
        return Err(Error::EmptyDataset("choice-pred needs at least one user"));
    }
    if weights.w.nrows() != d_user {
        return Err(Error::ShapeMismatch {
            context: "choice-pred user features",
            expected: format!("{}xd", weights.w.nrows()),
            got: format!("{n_users}x{d_user}"),
        });
    }
    let betas = user_features.dot(&weights.w);
    let mean = betas
        .mean_axis(Axis(0))
        .expect("at least one user present");
    if mean.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("mean estimated preferences"));
    }
    let mut order: Vec<usize> = (0..mean.len()).collect();
    order.sort_by(|&a, &b| mean[b].total_cmp(&mean[a]).then_with(|| a.cmp(&b)));
    FeatureOrdering::new(order, OrderingSource::ChoicePred)
}

/// Top-k features of the average estimated preference vector.
pub fn choice_pred_mask(
    weights: &PredictorWeights,
    user_features: &Array2<f64>,
    k: usize,
) -> Result<Mask> {
    choice_pred_ordering(weights, user_features)?.top_k(k)
}

/// Summary of true welfare over uniformly random k-subset masks. Each draw
/// is scored by its mean welfare across the given markets; the statistics
/// are over draws.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WelfareStats {
    pub mean: f64,
    pub std: f64,
    pub standard_error: f64,
    pub draws: usize,
}

/// Average true welfare of `draws` uniformly random k-feature masks, each
/// deployed across all markets under zero-imputed choice.
pub fn random_baseline(
    markets: &[Market],
    k: usize,
    draws: usize,
    seed: u64,
) -> Result<WelfareStats> {
    if markets.is_empty() {
        return Err(Error::EmptyDataset("random baseline needs markets"));
    }
    if draws == 0 {
        return Err(Error::invalid("random baseline needs at least one draw"));
    }
    let d = markets[0].d();
    for market in markets {
        if market.d() != d {
            return Err(Error::ShapeMismatch {
                context: "random baseline markets",
                expected: format!("d={d}"),
                got: format!("d={}", market.d()),
            });
        }
    }
    if k > d {
        return Err(Error::invalid(format!("cannot select {k} of {d} features")));
    }
    let per_draw: Vec<f64> = (0..draws)
        .into_par_iter()
        .map(|draw| -> Result<f64> {
            let mut rng = seed::rng(seed::derive_seed(seed, "random-baseline", draw as u64));
            let mask = Mask::random(d, k, &mut rng)?;
            let mut total = 0.0;
            for market in markets {
                total += market::mask_outcome(market, &mask, Impute::Zero)?.welfare;
            }
            Ok(total / markets.len() as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(WelfareStats {
        mean: stats::mean(&per_draw),
        std: stats::sample_std(&per_draw),
        standard_error: stats::standard_error(&per_draw),
        draws,
    })
}
