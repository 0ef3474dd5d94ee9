//! Assignment-market pricing.
//!
//! Solves the unit-demand assignment problem (maximum-weight matching with
//! free disposal) and recovers the lattice of competitive-equilibrium (CE)
//! price vectors supported by it: the buyer-optimal (componentwise minimal)
//! and seller-optimal (componentwise maximal) duals, their midpoint, and a
//! family of perturbed / heuristic schemes used as experiment treatments.
//!
//! CE here means: every user best-responds at the posted prices (taking the
//! outside option of buying nothing when all utilities are non-positive),
//! and every item with a strictly positive price is allocated.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Numerical slack for all equilibrium checks.
pub const CE_TOL: f64 = 1e-9;

/// A priced assignment: the optimal matching, item prices, per-user profits
/// π_i = v_{i,σ(i)} − p_{σ(i)} (0 for unmatched users), and the matching
/// objective Σ v_{i,σ(i)}.
///
/// For the heuristic and noisy schemes the prices need not clear the market;
/// profits are then simply utilities at the reference matching.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PricingSolution {
    pub assignment: Vec<Option<usize>>,
    pub prices: Vec<f64>,
    pub profits: Vec<f64>,
    pub objective: f64,
}

/// The CE lattice for one value matrix.
#[derive(Debug, Clone)]
pub struct CeSolution {
    pub assignment: Vec<Option<usize>>,
    pub objective: f64,
    pub buyer_prices: Array1<f64>,
    pub seller_prices: Array1<f64>,
}

impl CeSolution {
    /// Midpoint of the two lattice extremes. The dual optimal set is convex,
    /// so this is itself a CE price vector.
    pub fn mid_prices(&self) -> Array1<f64> {
        (&self.buyer_prices + &self.seller_prices) * 0.5
    }
}

/// How to turn a value matrix into posted prices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum PriceScheme {
    /// Midpoint of buyer- and seller-optimal CE prices.
    CeMid,
    /// gamma=0 buyer-optimal, 0.5 midpoint, 1 seller-optimal; piecewise
    /// linear in between.
    CeInterpolated { gamma: f64 },
    /// Mid CE prices of a value matrix perturbed by U[0, epsilon) noise.
    CeNoisyValues { epsilon: f64, noise_seed: u64 },
    /// Mid CE prices plus U[0, epsilon) per-item noise, clipped at zero.
    CeNoisyPrices { epsilon: f64, noise_seed: u64 },
    /// Population heuristic p_j = (1/n) Σ_i v_ij; generally not CE.
    HeuristicAvgValue,
    /// Convex combination (1−w)·mid-CE + w·heuristic.
    InterpolateToHeuristic { weight: f64 },
}

/// Maximum-weight matching of users to items, leaving either side unmatched
/// when beneficial. Jonker-Volgenant shortest augmenting paths on the padded
/// square min-cost problem; O(s^3) for s = n + m.
pub fn max_weight_matching(values: &Array2<f64>) -> Result<(Vec<Option<usize>>, f64)> {
    let (n, m) = values.dim();
    if n == 0 || m == 0 {
        return Err(Error::invalid("matching needs at least one user and item"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matching values"));
    }
    // Pad with n dummy items and m dummy users at cost 0 so the min-cost
    // perfect matching on the s x s negated matrix never forces a bad pair.
    let s = n + m;
    let cost = |i: usize, j: usize| -> f64 {
        if i < n && j < m {
            -values[(i, j)]
        } else {
            0.0
        }
    };

    // e-maxx formulation, 1-indexed with a virtual column 0.
    let mut u = vec![0.0f64; s + 1];
    let mut v = vec![0.0f64; s + 1];
    let mut p = vec![0usize; s + 1]; // p[j]: row matched to column j
    let mut way = vec![0usize; s + 1];
    for i in 1..=s {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; s + 1];
        let mut used = vec![false; s + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=s {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=s {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![None; n];
    let mut objective = 0.0;
    for j in 1..=s {
        let i = p[j];
        if i >= 1 && i <= n && j <= m && values[(i - 1, j - 1)] != 0.0 {
            assignment[i - 1] = Some(j - 1);
            objective += values[(i - 1, j - 1)];
        }
    }
    Ok((assignment, objective))
}

/// Check that (assignment, prices) form a competitive equilibrium for
/// `values` within `tol`: non-negative prices, every user best-responding
/// (including the empty outside option), and positively priced items sold.
pub fn verify_ce(
    values: &Array2<f64>,
    assignment: &[Option<usize>],
    prices: &Array1<f64>,
    tol: f64,
) -> Result<()> {
    let (n, m) = values.dim();
    for j in 0..m {
        if prices[j] < -tol {
            return Err(Error::Pricing(format!("negative price p[{j}] = {}", prices[j])));
        }
    }
    let mut allocated = vec![false; m];
    for i in 0..n {
        let profit = match assignment[i] {
            Some(j) => {
                allocated[j] = true;
                values[(i, j)] - prices[j]
            }
            None => 0.0,
        };
        if profit < -tol {
            return Err(Error::Pricing(format!("user {i} takes a losing item (profit {profit})")));
        }
        for j in 0..m {
            if values[(i, j)] - prices[j] > profit + tol {
                return Err(Error::Pricing(format!(
                    "user {i} envies item {j}: {} > {profit}",
                    values[(i, j)] - prices[j]
                )));
            }
        }
    }
    for j in 0..m {
        if prices[j] > tol && !allocated[j] {
            return Err(Error::Pricing(format!("unsold item {j} has positive price {}", prices[j])));
        }
    }
    Ok(())
}

/// Solve the assignment market and recover buyer- and seller-optimal CE
/// prices. Both extremes are verified as equilibria and against strong
/// duality before returning.
pub fn solve_ce(values: &Array2<f64>) -> Result<CeSolution> {
    let (assignment, objective) = max_weight_matching(values)?;
    let (n, m) = values.dim();

    let matched: Vec<(usize, usize)> =
        assignment.iter().enumerate().filter_map(|(i, j)| j.map(|j| (i, j))).collect();
    let mut item_taken = vec![false; m];
    for &(_, j) in &matched {
        item_taken[j] = true;
    }
    let unmatched_users: Vec<usize> =
        (0..n).filter(|&i| assignment[i].is_none()).collect();

    // The CE price set, given the fixed optimal matching sigma, is the
    // polyhedron
    //   p_j >= 0,                         p_j = 0 for unsold j,
    //   p_sigma(i) <= v_{i,sigma(i)},
    //   p_sigma(i) - p_j <= v_{i,sigma(i)} - v_{ij}      (no envy),
    //   p_j >= v_{ij}                     for unmatched users i,
    // a lattice whose extremes are reachable by monotone constraint
    // propagation from the loosest bounds.

    // Buyer-optimal: start from lower bounds and raise prices only where a
    // no-envy constraint forces it. Unsold items stay at zero.
    let mut buyer = Array1::zeros(m);
    for &i in &unmatched_users {
        for j in 0..m {
            if item_taken[j] && values[(i, j)] > buyer[j] {
                buyer[j] = values[(i, j)];
            }
        }
    }
    relax_to_fixpoint(m, &matched, values, &item_taken, &mut buyer, Direction::Raise);

    // Seller-optimal: start from the individual-rationality caps and lower
    // prices wherever no-envy requires it.
    let mut seller = Array1::zeros(m);
    for &(i, j) in &matched {
        seller[j] = values[(i, j)];
    }
    relax_to_fixpoint(m, &matched, values, &item_taken, &mut seller, Direction::Lower);

    for p in [&mut buyer, &mut seller] {
        p.mapv_inplace(|x| if x.abs() < CE_TOL { 0.0 } else { x });
    }

    for (label, prices) in [("buyer", &buyer), ("seller", &seller)] {
        verify_ce(values, &assignment, prices, CE_TOL)
            .map_err(|e| Error::Pricing(format!("{label}-optimal prices invalid: {e}")))?;
        // Strong duality: total profit plus total price revenue equals the
        // matching objective (unsold items carry zero price).
        let profits: f64 = matched.iter().map(|&(i, j)| values[(i, j)] - prices[j]).sum();
        let revenue: f64 = prices.sum();
        let gap = (profits + revenue - objective).abs();
        if gap > CE_TOL {
            return Err(Error::Pricing(format!("{label} duality gap {gap}")));
        }
    }
    for j in 0..m {
        if buyer[j] > seller[j] + CE_TOL {
            return Err(Error::Pricing(format!(
                "lattice inversion at item {j}: buyer {} > seller {}",
                buyer[j], seller[j]
            )));
        }
    }

    Ok(CeSolution { assignment, objective, buyer_prices: buyer, seller_prices: seller })
}

enum Direction {
    Raise,
    Lower,
}

/// Propagate the pairwise no-envy difference constraints
/// p_sigma(i) − p_j <= v_{i,sigma(i)} − v_{ij} to a fixpoint.
/// Raising computes the least solution above the initial lower bounds;
/// lowering the greatest solution below the initial caps. Both terminate
/// within m passes (Bellman-Ford over a graph with m nodes).
fn relax_to_fixpoint(
    m: usize,
    matched: &[(usize, usize)],
    values: &Array2<f64>,
    item_taken: &[bool],
    prices: &mut Array1<f64>,
    direction: Direction,
) {
    for _ in 0..=m {
        let mut changed = false;
        for &(i, jstar) in matched {
            for j in 0..m {
                if j == jstar {
                    continue;
                }
                let slack = values[(i, jstar)] - values[(i, j)];
                match direction {
                    Direction::Raise => {
                        // p_j must be at least p_jstar − slack; unsold items
                        // are pinned at zero (consistent at the optimum).
                        let bound = prices[jstar] - slack;
                        if item_taken[j] && bound > prices[j] {
                            prices[j] = bound;
                            changed = true;
                        }
                    }
                    Direction::Lower => {
                        let bound = prices[j] + slack;
                        if bound < prices[jstar] {
                            prices[jstar] = bound;
                            changed = true;
                        }
                    }
                }
            }
            if let Direction::Lower = direction {
                // Outside option of the matched user: p_jstar <= v_{i,jstar}.
                if prices[jstar] > values[(i, jstar)] {
                    prices[jstar] = values[(i, jstar)];
                }
            }
        }
        if !changed {
            break;
        }
    }
}

/// Prices only, for callers that don't need the matching.
pub fn scheme_prices(values: &Array2<f64>, scheme: &PriceScheme) -> Result<Array1<f64>> {
    Ok(Array1::from_vec(price_market(values, scheme)?.prices))
}

/// Solve the market and post prices according to `scheme`. The assignment
/// and objective always refer to the optimal matching of `values` itself.
pub fn price_market(values: &Array2<f64>, scheme: &PriceScheme) -> Result<PricingSolution> {
    let ce = solve_ce(values)?;
    let prices = match scheme {
        PriceScheme::CeMid => ce.mid_prices(),
        PriceScheme::CeInterpolated { gamma } => {
            if !(0.0..=1.0).contains(gamma) {
                return Err(Error::invalid(format!("gamma must be in [0,1], got {gamma}")));
            }
            let mid = ce.mid_prices();
            if *gamma <= 0.5 {
                let w = gamma / 0.5;
                &ce.buyer_prices * (1.0 - w) + &mid * w
            } else {
                let w = (gamma - 0.5) / 0.5;
                &mid * (1.0 - w) + &ce.seller_prices * w
            }
        }
        PriceScheme::CeNoisyValues { epsilon, noise_seed } => {
            if *epsilon < 0.0 {
                return Err(Error::invalid("epsilon must be non-negative"));
            }
            let mut rng = seed::rng(*noise_seed);
            let noisy = values.mapv(|v| v + epsilon * rng.random::<f64>());
            solve_ce(&noisy)?.mid_prices()
        }
        PriceScheme::CeNoisyPrices { epsilon, noise_seed } => {
            if *epsilon < 0.0 {
                return Err(Error::invalid("epsilon must be non-negative"));
            }
            let mut rng = seed::rng(*noise_seed);
            ce.mid_prices().mapv(|p| (p + epsilon * rng.random::<f64>()).max(0.0))
        }
        PriceScheme::HeuristicAvgValue => heuristic_prices(values),
        PriceScheme::InterpolateToHeuristic { weight } => {
            if !(0.0..=1.0).contains(weight) {
                return Err(Error::invalid(format!("weight must be in [0,1], got {weight}")));
            }
            let h = heuristic_prices(values);
            ce.mid_prices() * (1.0 - *weight) + h * *weight
        }
    };
    let profits = ce
        .assignment
        .iter()
        .enumerate()
        .map(|(i, slot)| slot.map_or(0.0, |j| values[(i, j)] - prices[j]))
        .collect();
    Ok(PricingSolution {
        assignment: ce.assignment,
        prices: prices.to_vec(),
        profits,
        objective: ce.objective,
    })
}

/// p_j = (1/n) Σ_i v_ij.
fn heuristic_prices(values: &Array2<f64>) -> Array1<f64> {
    values.mean_axis(Axis(0)).expect("non-empty value matrix")
}
