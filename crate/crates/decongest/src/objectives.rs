//! The decongestion welfare proxy.
//!
//! True welfare is unobservable at decision time (it depends on private
//! values), but two observable statistics bracket it from below when
//! perceived values never exceed true ones (zero imputation):
//!
//! * selection   Σ_i p_{y_i}           — revenue at demanded items,
//! * decongestion Σ_j max(0, n_j − c_j) — excess demand over supply.
//!
//! Their difference is a certified lower bound on expected welfare; the
//! trainable objective trades them off as
//! (1−λ)·selection − λ·(decongestion + no-choice count).

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{self, ChoiceProfile, Impute, Market, Mask};

/// Itemized proxy value for one choice profile at posted prices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProxyBreakdown {
    /// Σ over choosers of the price of their chosen item.
    pub selection: f64,
    /// Σ_j max(0, n_j − c_j) excess demand (unit supply unless overridden).
    pub decongestion: f64,
    /// Number of users taking the outside option.
    pub no_choice_penalty: f64,
    /// Trade-off weight used for `combined`.
    pub lambda: f64,
    /// selection − decongestion: a lower bound on expected welfare whenever
    /// perceived values are dominated by true values.
    pub lower_bound: f64,
    /// (1−λ)·selection − λ·(decongestion + no_choice_penalty).
    pub combined: f64,
}

/// Default trade-off weight λ = 1 − k/(2d): 1 at the fully hidden end,
/// 1/2 at full transparency.
pub fn default_lambda(k: usize, d: usize) -> f64 {
    assert!(d > 0 && k <= d, "need 0 <= k <= d");
    1.0 - k as f64 / (2.0 * d as f64)
}

/// Proxy under unit supply.
pub fn proxy(prices: &Array1<f64>, choices: &ChoiceProfile, lambda: f64) -> Result<ProxyBreakdown> {
    let supply = vec![1usize; choices.m()];
    proxy_with_supply(prices, choices, lambda, &supply)
}

/// Proxy with per-item supplies c_j; congestion is demand in excess of c_j.
pub fn proxy_with_supply(
    prices: &Array1<f64>,
    choices: &ChoiceProfile,
    lambda: f64,
    supply: &[usize],
) -> Result<ProxyBreakdown> {
    if prices.len() != choices.m() {
        return Err(Error::ShapeMismatch {
            context: "proxy prices",
            expected: format!("{}", choices.m()),
            got: format!("{}", prices.len()),
        });
    }
    if supply.len() != choices.m() {
        return Err(Error::ShapeMismatch {
            context: "proxy supply",
            expected: format!("{}", choices.m()),
            got: format!("{}", supply.len()),
        });
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda must be in [0,1], got {lambda}")));
    }
    let selection: f64 = choices
        .demand_counts()
        .iter()
        .zip(prices.iter())
        .map(|(&n_j, &p_j)| n_j as f64 * p_j)
        .sum();
    let decongestion: f64 = choices
        .demand_counts()
        .iter()
        .zip(supply.iter())
        .map(|(&n_j, &c_j)| n_j.saturating_sub(c_j) as f64)
        .sum();
    let no_choice_penalty = choices.no_choice_count() as f64;
    Ok(ProxyBreakdown {
        selection,
        decongestion,
        no_choice_penalty,
        lambda,
        lower_bound: selection - decongestion,
        combined: (1.0 - lambda) * selection - lambda * (decongestion + no_choice_penalty),
    })
}

/// W − W̃ for a market under a mask with zero imputation: expected welfare
/// minus the proxy lower bound. Non-negative whenever values lie in [0,1].
pub fn lower_bound_gap(market: &Market, mask: &Mask) -> Result<f64> {
    let outcome = market::mask_outcome(market, mask, Impute::Zero)?;
    let breakdown = proxy(market.prices(), &outcome.choices, 0.5)?;
    Ok(outcome.welfare - breakdown.lower_bound)
}
