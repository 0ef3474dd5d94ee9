//! Executable structural theory: congestion monotonicity, margins,
//! admissibility, the five sufficient conditions for welfare-safe masking,
//! restricted optimality, and the ordering theorem for product-structure
//! randomized allocations.
//!
//! Everything here is a checker, not a solver: each operation verifies a
//! claimed property of a concrete instance exactly (enumeration or direct
//! inequality evaluation), so the asymptotic statements can be audited
//! empirically on random instance sweeps.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{self, Allocation, Impute, Market, Mask};
use crate::pricing;

/// Reported in place of an infinite margin (a lone allocated agent faces no
/// competing allocated item).
pub const MARGIN_CAP: f64 = 1e6;

/// Sufficient condition for congestion monotonicity:
/// (v_max − v_min)/v_min ≤ 1/(m−1). Requires strictly positive values;
/// vacuously true for a single item.
pub fn prop1_condition(values: &Array2<f64>) -> Result<bool> {
    let m = values.ncols();
    if values.is_empty() {
        return Err(Error::invalid("empty value matrix"));
    }
    let v_min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let v_max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if v_min <= 0.0 {
        return Err(Error::invalid("congestion-monotonicity bound needs positive values"));
    }
    if m == 1 {
        return Ok(true);
    }
    Ok((v_max - v_min) / v_min <= 1.0 / (m as f64 - 1.0))
}

/// Exhaustive congestion monotonicity: every feasible allocation of s items
/// yields weakly higher welfare than any allocation of fewer items.
/// Enumerates all partial injective assignments; n, m ≤ 6.
pub fn brute_force_monotone(values: &Array2<f64>) -> Result<bool> {
    let (n, m) = values.dim();
    if n > 6 || m > 6 {
        return Err(Error::EnumerationTooLarge(format!(
            "monotonicity enumeration supports n,m <= 6, got {n}x{m}"
        )));
    }
    // min and max welfare attainable at each allocation size
    let mut min_at = vec![f64::INFINITY; m.min(n) + 1];
    let mut max_at = vec![f64::NEG_INFINITY; m.min(n) + 1];
    let mut stack: Vec<(usize, u32, usize, f64)> = vec![(0, 0, 0, 0.0)];
    while let Some((user, taken, size, welfare)) = stack.pop() {
        if user == n {
            if welfare < min_at[size] {
                min_at[size] = welfare;
            }
            if welfare > max_at[size] {
                max_at[size] = welfare;
            }
            continue;
        }
        stack.push((user + 1, taken, size, welfare));
        for j in 0..m {
            if taken & (1 << j) == 0 {
                stack.push((user + 1, taken | (1 << j), size + 1, welfare + values[(user, j)]));
            }
        }
    }
    for s in 1..min_at.len() {
        if min_at[s].is_finite()
            && max_at[s - 1].is_finite()
            && min_at[s] < max_at[s - 1] - 1e-12
        {
            return Ok(false);
        }
    }
    Ok(true)
}

/// The allocated (agent, item) pairs of an integral allocation, plus the
/// perceived-value view, after verifying admissibility: every allocated
/// agent must hold exactly the item the choice rule would pick for it.
fn admissible_pairs(
    market: &Market,
    mask: &Mask,
    alloc: &Allocation,
) -> Result<(Vec<(usize, usize)>, market::ValueView)> {
    let view = market::perceived_values(market, mask, Impute::Zero)?;
    let choices = market::choose_from_utilities(&view.perceived_values, market.prices())?;
    let assignment = alloc.assignment();
    if assignment.len() != market.n() {
        return Err(Error::ShapeMismatch {
            context: "allocation",
            expected: format!("{} users", market.n()),
            got: format!("{}", assignment.len()),
        });
    }
    let mut pairs = Vec::new();
    for (i, slot) in assignment.iter().enumerate() {
        if let Some(j) = *slot {
            if choices.item_of(i) != Some(j) {
                return Err(Error::invalid(format!(
                    "allocation is not admissible: agent {i} holds item {j} but best-responds to {:?}",
                    choices.item_of(i)
                )));
            }
            pairs.push((i, j));
        }
    }
    Ok((pairs, view))
}

/// Margin Δ: the smallest gap, over allocated agents, between the perceived
/// utility of the agent's own item and the best perceived utility among the
/// *other* allocated items. Floored at 0; capped at [`MARGIN_CAP`] when an
/// agent faces no competing allocated item.
pub fn margin(market: &Market, mask: &Mask, alloc: &Allocation) -> Result<f64> {
    let (pairs, view) = admissible_pairs(market, mask, alloc)?;
    if pairs.is_empty() {
        return Err(Error::Degenerate("margin of an empty allocation".into()));
    }
    let prices = market.prices();
    let mut delta = f64::INFINITY;
    for &(i, own) in &pairs {
        let own_utility = view.perceived_values[(i, own)] - prices[own];
        let best_other = pairs
            .iter()
            .filter(|&&(_, j)| j != own)
            .map(|&(_, j)| view.perceived_values[(i, j)] - prices[j])
            .fold(f64::NEG_INFINITY, f64::max);
        if best_other.is_finite() {
            delta = delta.min(own_utility - best_other);
        }
    }
    if !delta.is_finite() {
        return Ok(MARGIN_CAP);
    }
    Ok(delta.clamp(0.0, MARGIN_CAP))
}

/// Outcome of one inequality family: whether it held everywhere, and the
/// worst slack (negative = the most violated instance).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ConditionCheck {
    pub holds: bool,
    pub slack: f64,
}

impl ConditionCheck {
    fn from_slack(slack: f64) -> Self {
        // Vacuous families (no pair to compare) report the cap, not +inf,
        // so the JSON stays finite.
        ConditionCheck { holds: slack >= -1e-12, slack: slack.min(MARGIN_CAP) }
    }
}

/// Joint report of the five masking conditions and the dominance lemmas,
/// all evaluated at a given margin Δ over the allocated sub-economy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionReport {
    pub margin: f64,
    /// Hidden item heterogeneity: |(1−μ)⊙(x_j−x_j')|_1 ≤ Δ over allocated pairs.
    pub condition1: ConditionCheck,
    /// Agent indifference to hidden features: |(1−μ)⊙β_i|_1 ≤ Δ.
    pub condition2: ConditionCheck,
    /// Perceived-top items keep near-top hidden value.
    pub condition3_value_consistency: ConditionCheck,
    /// Allocated prices vary by at most Δ.
    pub condition3_price_variation: ConditionCheck,
    /// Hidden features are small: |(1−μ)⊙x_j|_1 ≤ Δ.
    pub condition4: ConditionCheck,
    /// Hidden preference heterogeneity: |(1−μ)⊙(β_i−β_i')|_1 ≤ Δ.
    pub condition5: ConditionCheck,
    /// Every allocated agent's item maximizes *true* utility among
    /// allocated items.
    pub pointing_consistency: bool,
    /// Stricter variant: maximizes true utility among all items.
    pub pointing_consistency_all_items: bool,
    /// v^H_{i,a_i} ≥ v^H_{ij} − Δ for allocated agents across allocated items.
    pub row_dominance: ConditionCheck,
    /// v^H_{ij} ≥ v^H_{i'j} − Δ for each allocated item against all
    /// allocated agents.
    pub column_dominance: ConditionCheck,
}

impl ConditionReport {
    /// Both clauses of the third condition.
    pub fn condition3(&self) -> bool {
        self.condition3_value_consistency.holds && self.condition3_price_variation.holds
    }

    /// True when at least one of the five sufficient conditions holds.
    pub fn any_condition_holds(&self) -> bool {
        self.condition1.holds
            || self.condition2.holds
            || self.condition3()
            || self.condition4.holds
            || self.condition5.holds
    }
}

/// Evaluate Conditions 1–5, pointing consistency, and the hidden-value
/// dominance inequalities for an admissible allocation at margin `delta`.
pub fn check_conditions(
    market: &Market,
    mask: &Mask,
    alloc: &Allocation,
    delta: f64,
) -> Result<ConditionReport> {
    let (pairs, view) = admissible_pairs(market, mask, alloc)?;
    if pairs.is_empty() {
        return Err(Error::Degenerate("conditions of an empty allocation".into()));
    }
    let b = market.preferences().ok_or(Error::MissingPreferences("masking conditions"))?;
    let x = market.item_features();
    let prices = market.prices();
    let hidden = mask.complement();
    let agents: Vec<usize> = pairs.iter().map(|&(i, _)| i).collect();
    let items: Vec<usize> = pairs.iter().map(|&(_, j)| j).collect();

    fn hidden_l1(row: ndarray::ArrayView1<'_, f64>, hidden_bits: &[u8]) -> f64 {
        row.iter().zip(hidden_bits).map(|(v, &h)| if h == 1 { v.abs() } else { 0.0 }).sum()
    }
    let hbits = hidden.bits();

    // Condition 1: hidden parts of allocated items are mutually close.
    let mut worst1 = f64::INFINITY;
    for (a, &j) in items.iter().enumerate() {
        for &j2 in &items[a + 1..] {
            let diff = &x.row(j) - &x.row(j2);
            worst1 = worst1.min(delta - hidden_l1(diff.view(), hbits));
        }
    }
    // Condition 2: allocated agents barely weight hidden features.
    let mut worst2 = f64::INFINITY;
    for &i in &agents {
        worst2 = worst2.min(delta - hidden_l1(b.row(i), hbits));
    }
    // Condition 3a: among allocated items, an agent's perceived-top item is
    // within Δ of the top hidden value.
    let mut worst3a = f64::INFINITY;
    for &i in &agents {
        let top_perceived = items
            .iter()
            .map(|&j| view.perceived_values[(i, j)])
            .fold(f64::NEG_INFINITY, f64::max);
        let top_hidden =
            items.iter().map(|&j| view.hidden_values[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
        for &j in &items {
            if view.perceived_values[(i, j)] >= top_perceived {
                worst3a = worst3a.min(view.hidden_values[(i, j)] + delta - top_hidden);
            }
        }
    }
    // Condition 3b: allocated prices are within Δ of each other.
    let mut worst3b = f64::INFINITY;
    for (a, &j) in items.iter().enumerate() {
        for &j2 in &items[a + 1..] {
            worst3b = worst3b.min(delta - (prices[j] - prices[j2]).abs());
        }
    }
    // Condition 4: hidden parts of allocated items are small outright.
    let mut worst4 = f64::INFINITY;
    for &j in &items {
        worst4 = worst4.min(delta - hidden_l1(x.row(j), hbits));
    }
    // Condition 5: allocated agents agree on hidden features.
    let mut worst5 = f64::INFINITY;
    for (a, &i) in agents.iter().enumerate() {
        for &i2 in &agents[a + 1..] {
            let diff = &b.row(i) - &b.row(i2);
            worst5 = worst5.min(delta - hidden_l1(diff.view(), hbits));
        }
    }

    // Pointing consistency: own item is a true-utility best response.
    let true_utility = |i: usize, j: usize| view.true_values[(i, j)] - prices[j];
    let mut pointing_restricted = true;
    let mut pointing_all = true;
    for &(i, own) in &pairs {
        let own_u = true_utility(i, own);
        for &j in &items {
            if true_utility(i, j) > own_u + 1e-12 {
                pointing_restricted = false;
            }
        }
        for j in 0..market.m() {
            if true_utility(i, j) > own_u + 1e-12 {
                pointing_all = false;
            }
        }
    }

    // Hidden-value dominance.
    let mut worst_row = f64::INFINITY;
    for &(i, own) in &pairs {
        for &j in &items {
            worst_row =
                worst_row.min(view.hidden_values[(i, own)] + delta - view.hidden_values[(i, j)]);
        }
    }
    let mut worst_col = f64::INFINITY;
    for &(i, j) in &pairs {
        for &i2 in &agents {
            worst_col =
                worst_col.min(view.hidden_values[(i, j)] + delta - view.hidden_values[(i2, j)]);
        }
    }

    Ok(ConditionReport {
        margin: delta,
        condition1: ConditionCheck::from_slack(worst1),
        condition2: ConditionCheck::from_slack(worst2),
        condition3_value_consistency: ConditionCheck::from_slack(worst3a),
        condition3_price_variation: ConditionCheck::from_slack(worst3b),
        condition4: ConditionCheck::from_slack(worst4),
        condition5: ConditionCheck::from_slack(worst5),
        pointing_consistency: pointing_restricted,
        pointing_consistency_all_items: pointing_all,
        row_dominance: ConditionCheck::from_slack(worst_row),
        column_dominance: ConditionCheck::from_slack(worst_col),
    })
}

/// Whether an integral allocation is welfare-optimal at true values within
/// the economy restricted to its own allocated agents and items.
pub fn restricted_optimal(market: &Market, alloc: &Allocation) -> Result<bool> {
    let values = market.values()?;
    restricted_optimal_values(&values, &alloc.assignment())
}

/// Same check on a raw value matrix and user→item map.
pub fn restricted_optimal_values(
    values: &Array2<f64>,
    assignment: &[Option<usize>],
) -> Result<bool> {
    let pairs: Vec<(usize, usize)> =
        assignment.iter().enumerate().filter_map(|(i, j)| j.map(|j| (i, j))).collect();
    if pairs.is_empty() {
        return Ok(true);
    }
    let agents: Vec<usize> = pairs.iter().map(|&(i, _)| i).collect();
    let items: Vec<usize> = pairs.iter().map(|&(_, j)| j).collect();
    let sub = Array2::from_shape_fn((agents.len(), items.len()), |(a, b)| {
        values[(agents[a], items[b])]
    });
    let (_, best) = pricing::max_weight_matching(&sub)?;
    let actual: f64 = pairs.iter().map(|&(i, j)| values[(i, j)]).sum();
    Ok(actual >= best - 1e-9)
}

/// A randomized allocation with product structure: disjoint competitor sets
/// N_j, one per allocated item, each resolved by an independent uniform draw.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RandomizedAllocation {
    groups: Vec<(usize, Vec<usize>)>,
}

impl RandomizedAllocation {
    pub fn new(groups: Vec<(usize, Vec<usize>)>) -> Result<Self> {
        let mut seen_items = std::collections::BTreeSet::new();
        let mut seen_agents = std::collections::BTreeSet::new();
        for (item, competitors) in &groups {
            if !seen_items.insert(*item) {
                return Err(Error::invalid(format!("item {item} appears in two groups")));
            }
            if competitors.is_empty() {
                return Err(Error::invalid(format!("item {item} has an empty competitor set")));
            }
            for &agent in competitors {
                if !seen_agents.insert(agent) {
                    return Err(Error::invalid(format!(
                        "agent {agent} competes for more than one item"
                    )));
                }
            }
        }
        Ok(RandomizedAllocation { groups })
    }

    pub fn groups(&self) -> &[(usize, Vec<usize>)] {
        &self.groups
    }

    pub fn items(&self) -> Vec<usize> {
        self.groups.iter().map(|(j, _)| *j).collect()
    }

    pub fn win_probability(&self, agent: usize) -> f64 {
        for (_, competitors) in &self.groups {
            if competitors.contains(&agent) {
                return 1.0 / competitors.len() as f64;
            }
        }
        0.0
    }

    fn support_size(&self) -> u128 {
        self.groups.iter().map(|(_, c)| c.len() as u128).product()
    }

    /// Every deterministic allocation in the support: one winner per group.
    pub fn support(&self) -> Result<Vec<Vec<(usize, usize)>>> {
        if self.support_size() > 1_000_000 {
            return Err(Error::EnumerationTooLarge(format!(
                "support of size {} is too large to enumerate",
                self.support_size()
            )));
        }
        let mut out = vec![Vec::new()];
        for (item, competitors) in &self.groups {
            let mut next = Vec::with_capacity(out.len() * competitors.len());
            for partial in &out {
                for &agent in competitors {
                    let mut extended = partial.clone();
                    extended.push((agent, *item));
                    next.push(extended);
                }
            }
            out = next;
        }
        Ok(out)
    }

    /// Exact expected welfare: enumerate the product distribution and
    /// average realized welfare (all outcomes equiprobable within a group).
    pub fn expected_welfare(&self, values: &Array2<f64>) -> Result<f64> {
        let support = self.support()?;
        let total: f64 = support
            .iter()
            .map(|alloc| {
                let w: f64 = alloc.iter().map(|&(i, j)| values[(i, j)]).sum();
                w
            })
            .sum();
        Ok(total / support.len() as f64)
    }
}

/// Result of checking the welfare ordering between two randomized
/// allocations where one extends the other.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Theorem1Verdict {
    HypothesesNotMet { reason: String },
    Holds { welfare_a: f64, welfare_b: f64, strict: bool },
    Violated { welfare_a: f64, welfare_b: f64 },
}

/// Check the ordering: if B allocates a superset of items, no agent's win
/// probability drops, and every allocation in B's support is welfare-optimal
/// in B's restricted economy, then W(B) ≥ W(A).
pub fn theorem1_check(
    a: &RandomizedAllocation,
    b: &RandomizedAllocation,
    values: &Array2<f64>,
) -> Result<Theorem1Verdict> {
    let items_a: std::collections::BTreeSet<usize> = a.items().into_iter().collect();
    let items_b: std::collections::BTreeSet<usize> = b.items().into_iter().collect();
    if !items_a.is_subset(&items_b) {
        return Ok(Theorem1Verdict::HypothesesNotMet {
            reason: "B does not allocate every item A allocates".into(),
        });
    }
    for (_, competitors) in a.groups() {
        for &agent in competitors {
            if b.win_probability(agent) < a.win_probability(agent) - 1e-12 {
                return Ok(Theorem1Verdict::HypothesesNotMet {
                    reason: format!("agent {agent} faces more congestion under B"),
                });
            }
        }
    }
    let n = values.nrows();
    for alloc in b.support()? {
        let mut assignment = vec![None; n];
        for (i, j) in alloc {
            assignment[i] = Some(j);
        }
        if !restricted_optimal_values(values, &assignment)? {
            return Ok(Theorem1Verdict::HypothesesNotMet {
                reason: "a support allocation of B is not restricted-optimal".into(),
            });
        }
    }
    let welfare_a = a.expected_welfare(values)?;
    let welfare_b = b.expected_welfare(values)?;
    if welfare_b >= welfare_a - 1e-12 {
        Ok(Theorem1Verdict::Holds {
            welfare_a,
            welfare_b,
            strict: welfare_b > welfare_a + 1e-12,
        })
    } else {
        Ok(Theorem1Verdict::Violated { welfare_a, welfare_b })
    }
}

/// Tally of one randomized soundness sweep.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct SoundnessSweep {
    /// Instances generated.
    pub trials: usize,
    /// Instances where the sufficient condition (or hypotheses) held.
    pub fired: usize,
    /// Instances where the implied property held too.
    pub sound: usize,
    /// Instances where the condition held but the implication failed —
    /// must be zero for the theory to stand.
    pub unsound: usize,
}

/// Random positive-value markets (sides in 2..=`max_side`): whenever the
/// value-spread condition holds, congestion monotonicity must hold by
/// brute force.
pub fn prop1_soundness_sweep(
    trials: usize,
    max_side: usize,
    seed_value: u64,
) -> Result<SoundnessSweep> {
    if !(2..=6).contains(&max_side) {
        return Err(Error::invalid("monotonicity enumeration needs sides in 2..=6"));
    }
    use rand::Rng;
    let mut rng = crate::seed::rng(crate::seed::derive_seed(seed_value, "prop1-sweep", 0));
    let mut sweep = SoundnessSweep { trials, ..Default::default() };
    for _ in 0..trials {
        let n = rng.random_range(2..=max_side);
        let m = rng.random_range(2..=max_side);
        let values = Array2::from_shape_fn((n, m), |_| 0.5 + 0.5 * rng.random::<f64>());
        if prop1_condition(&values)? {
            sweep.fired += 1;
            if brute_force_monotone(&values)? {
                sweep.sound += 1;
            } else {
                sweep.unsound += 1;
            }
        }
    }
    Ok(sweep)
}

/// Random masked markets with shrunken hidden features, pushed until the
/// sufficient conditions fire `target_fired` times: every firing instance
/// must have a restricted-optimal realized allocation. Errs when the trial
/// budget runs out first.
pub fn condition_soundness_sweep(
    target_fired: usize,
    max_trials: usize,
    seed_value: u64,
) -> Result<SoundnessSweep> {
    use rand::Rng;
    let mut rng =
        crate::seed::rng(crate::seed::derive_seed(seed_value, "condition-sweep", 0));
    let mut sweep = SoundnessSweep::default();
    while sweep.fired < target_fired {
        if sweep.trials >= max_trials {
            return Err(Error::Degenerate(format!(
                "conditions fired only {} times in {} trials",
                sweep.fired, sweep.trials
            )));
        }
        sweep.trials += 1;
        let (n, m, d) = (4, 4, 4);
        let mut x = Array2::from_shape_fn((m, d), |_| rng.random::<f64>());
        for j in 2..d {
            x.column_mut(j).mapv_inplace(|v| v * 1e-3);
        }
        let mut b = Array2::from_shape_fn((n, d), |_| rng.random::<f64>());
        let scale = b.dot(&x.t()).iter().fold(0.0f64, |a, &v| a.max(v));
        b.mapv_inplace(|v| v / scale.max(1.0));
        let prices =
            ndarray::Array1::from_shape_fn(m, |_| 0.2 * rng.random::<f64>());
        let market =
            Market::new(x, prices, Array2::zeros((n, 1)), Some(b))?;
        let mask = Mask::from_indices(d, &[0, 1])?;
        let choices = market::choose(&market, &mask, Impute::Zero)?;
        if choices.demanded_items().is_empty() {
            continue;
        }
        let alloc =
            market::allocate(&choices, market::AllocationKind::Realized, rng.random());
        let delta = margin(&market, &mask, &alloc)?;
        let report = check_conditions(&market, &mask, &alloc, delta)?;
        if report.any_condition_holds() {
            sweep.fired += 1;
            if restricted_optimal(&market, &alloc)? {
                sweep.sound += 1;
            } else {
                sweep.unsound += 1;
            }
        }
    }
    Ok(sweep)
}

/// Random ordered pairs (A, B) built to satisfy the ordering theorem's
/// hypotheses — B a restricted-optimal matching, A a strictly smaller
/// sub-allocation with possibly merged competitor groups — checked until
/// `target_checked` pairs pass the hypothesis screen. With all-positive
/// values the ordering must hold strictly every time.
pub fn theorem1_soundness_sweep(
    target_checked: usize,
    max_trials: usize,
    seed_value: u64,
) -> Result<SoundnessSweep> {
    use rand::seq::SliceRandom;
    use rand::Rng;
    let mut rng =
        crate::seed::rng(crate::seed::derive_seed(seed_value, "ordering-sweep", 0));
    let mut sweep = SoundnessSweep::default();
    while sweep.fired < target_checked {
        if sweep.trials >= max_trials {
            return Err(Error::Degenerate(format!(
                "only {} hypothesis-satisfying pairs in {} trials",
                sweep.fired, sweep.trials
            )));
        }
        sweep.trials += 1;
        let n = rng.random_range(2..=5);
        let m = rng.random_range(2..=5);
        let values = Array2::from_shape_fn((n, m), |_| 0.1 + 0.9 * rng.random::<f64>());

        // B: a max-weight matching on a random item subset. Restricting a
        // global optimum to its own matched agents and items keeps it
        // optimal there, so B satisfies the support hypothesis.
        let mut items: Vec<usize> = (0..m).collect();
        items.shuffle(&mut rng);
        items.truncate(rng.random_range(1..=m));
        let sub = Array2::from_shape_fn((n, items.len()), |(i, c)| values[(i, items[c])]);
        let (assignment, _) = pricing::max_weight_matching(&sub)?;
        let pairs: Vec<(usize, usize)> = assignment
            .iter()
            .enumerate()
            .filter_map(|(i, j)| j.map(|j| (i, items[j])))
            .collect();
        if pairs.len() < 2 {
            continue;
        }
        let b = RandomizedAllocation::new(
            pairs.iter().map(|&(i, j)| (j, vec![i])).collect(),
        )?;

        // A: drop at least one pair, then sometimes let a dropped agent
        // compete for a kept item (win probabilities can only grow in B).
        let mut kept = pairs.clone();
        kept.shuffle(&mut rng);
        let dropped = kept.split_off(rng.random_range(1..kept.len()));
        let mut groups: Vec<(usize, Vec<usize>)> =
            kept.iter().map(|&(i, j)| (j, vec![i])).collect();
        if rng.random::<f64>() < 0.5 {
            groups[0].1.push(dropped[0].0);
        }
        let a = RandomizedAllocation::new(groups)?;

        match theorem1_check(&a, &b, &values)? {
            Theorem1Verdict::HypothesesNotMet { .. } => {}
            Theorem1Verdict::Holds { strict, .. } => {
                sweep.fired += 1;
                if strict {
                    sweep.sound += 1;
                } else {
                    sweep.unsound += 1;
                }
            }
            Theorem1Verdict::Violated { .. } => {
                sweep.fired += 1;
                sweep.unsound += 1;
            }
        }
    }
    Ok(sweep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::AllocationKind;
    use crate::seed;
    use ndarray::{arr2, Array1};
    use rand::Rng;

    #[test]
    fn prop1_examples() {
        let mut rng = seed::rng(21);
        let narrow = Array2::from_shape_fn((3, 2), |_| 1.0 + 0.4 * rng.random::<f64>());
        assert!(prop1_condition(&narrow).unwrap());
        let counter = arr2(&[[5.0, 2.0], [2.0, 1.0]]);
        assert!(!prop1_condition(&counter).unwrap());
        assert!(prop1_condition(&arr2(&[[5.0], [0.1]])).unwrap()); // m = 1
        assert!(prop1_condition(&arr2(&[[0.0, 1.0]])).is_err());
    }

    #[test]
    fn monotonicity_enumeration_examples() {
        let mut rng = seed::rng(22);
        let narrow = Array2::from_shape_fn((3, 2), |_| 1.0 + 0.4 * rng.random::<f64>());
        assert!(brute_force_monotone(&narrow).unwrap());
        // Allocating only the (1,1)=5 pair beats allocating both items.
        let counter = arr2(&[[5.0, 2.0], [2.0, 1.0]]);
        assert!(!brute_force_monotone(&counter).unwrap());
        let flat = Array2::from_elem((4, 4), 0.3);
        assert!(brute_force_monotone(&flat).unwrap());
        assert!(brute_force_monotone(&Array2::from_elem((7, 7), 0.3)).is_err());
    }

    #[test]
    fn prop1_implies_monotone_on_random_instances() {
        let mut rng = seed::rng(23);
        let mut positives = 0;
        for _ in 0..200 {
            let n = 2 + (rng.random::<f64>() * 3.0) as usize;
            let m = 2 + (rng.random::<f64>() * 3.0) as usize;
            let values = Array2::from_shape_fn((n, m), |_| 0.5 + 0.5 * rng.random::<f64>());
            if prop1_condition(&values).unwrap() {
                positives += 1;
                assert!(brute_force_monotone(&values).unwrap());
            }
        }
        assert!(positives > 5, "condition never fired ({positives})");
    }

    fn margin_market() -> (Market, Allocation) {
        // Agent 0: utilities (0.5, 0.3); agent 1: (0.35, 0.4).
        let x = Array2::eye(2);
        let b = arr2(&[[0.5, 0.3], [0.35, 0.4]]);
        let market =
            Market::new(x, Array1::zeros(2), Array2::zeros((2, 1)), Some(b)).unwrap();
        let alloc = Allocation::from_assignment(&[Some(0), Some(1)], 2).unwrap();
        (market, alloc)
    }

    #[test]
    fn margin_takes_worst_allocated_gap() {
        let (market, alloc) = margin_market();
        let delta = margin(&market, &Mask::full(2), &alloc).unwrap();
        assert!((delta - 0.05).abs() < 1e-12);
    }

    #[test]
    fn margin_rejects_non_admissible_allocations() {
        let (market, _) = margin_market();
        let swapped = Allocation::from_assignment(&[Some(1), Some(0)], 2).unwrap();
        assert!(margin(&market, &Mask::full(2), &swapped).is_err());
    }

    #[test]
    fn lone_agent_margin_is_capped() {
        let x = Array2::eye(2);
        let b = arr2(&[[0.5, 0.3]]);
        let market = Market::new(x, Array1::zeros(2), Array2::zeros((1, 1)), Some(b)).unwrap();
        let alloc = Allocation::from_assignment(&[Some(0)], 2).unwrap();
        assert_eq!(margin(&market, &Mask::full(2), &alloc).unwrap(), MARGIN_CAP);
    }

    #[test]
    fn full_mask_satisfies_zero_hidden_conditions() {
        let (market, alloc) = margin_market();
        let delta = margin(&market, &Mask::full(2), &alloc).unwrap();
        let report = check_conditions(&market, &Mask::full(2), &alloc, delta).unwrap();
        assert!(report.condition1.holds);
        assert!(report.condition2.holds);
        assert!(report.condition4.holds);
        assert!(report.condition5.holds);
        assert!(report.pointing_consistency);
        assert!(report.row_dominance.holds && report.column_dominance.holds);
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"margin\""));
    }

    #[test]
    fn homogeneous_hidden_features_satisfy_condition1_exactly() {
        // Items share the identical hidden column, so hidden differences
        // vanish; condition 1 slack equals Δ itself. Prices separate the
        // two agents onto distinct items despite the common ranking of x.
        let x = arr2(&[[0.6, 0.25], [0.2, 0.25]]);
        let b = arr2(&[[0.9, 0.2], [0.3, 0.2]]);
        let prices = Array1::from_vec(vec![0.2, 0.0]);
        let market = Market::new(x, prices, Array2::zeros((2, 1)), Some(b)).unwrap();
        let mask = Mask::from_indices(2, &[0]).unwrap();
        let choices = market::choose(&market, &mask, Impute::Zero).unwrap();
        assert_eq!(choices.choices(), &[1, 2]);
        let alloc = market::allocate(&choices, AllocationKind::Realized, 1);
        let delta = margin(&market, &mask, &alloc).unwrap();
        assert!((delta - 0.08).abs() < 1e-12);
        let report = check_conditions(&market, &mask, &alloc, delta).unwrap();
        assert!(report.condition1.holds);
        assert!((report.condition1.slack - delta).abs() < 1e-12);
    }

    #[test]
    fn restricted_optimality_catches_a_bad_swap() {
        let x = Array2::eye(2);
        let b = arr2(&[[0.9, 0.8], [0.1, 0.8]]);
        let market = Market::new(x, Array1::zeros(2), Array2::zeros((2, 1)), Some(b)).unwrap();
        let bad = Allocation::from_assignment(&[Some(1), Some(0)], 2).unwrap();
        assert!(!restricted_optimal(&market, &bad).unwrap());
        let good = Allocation::from_assignment(&[Some(0), Some(1)], 2).unwrap();
        assert!(restricted_optimal(&market, &good).unwrap());
        let single = Allocation::from_assignment(&[Some(0), None], 2).unwrap();
        assert!(restricted_optimal(&market, &single).unwrap());
    }

    #[test]
    fn ce_allocations_are_restricted_optimal() {
        let mut rng = seed::rng(31);
        for _ in 0..50 {
            let (n, m) = (4, 5);
            let x = Array2::from_shape_fn((m, 3), |_| rng.random::<f64>());
            let mut b = Array2::from_shape_fn((n, 3), |_| rng.random::<f64>());
            let scale = b.dot(&x.t()).iter().fold(0.0f64, |a, &v| a.max(v));
            b.mapv_inplace(|v| v / scale.max(1.0));
            let values = b.dot(&x.t());
            let ce = pricing::solve_ce(&values).unwrap();
            let market =
                Market::new(x, Array1::zeros(m), Array2::zeros((n, 1)), Some(b)).unwrap();
            let alloc = Allocation::from_assignment(&ce.assignment, m).unwrap();
            assert!(restricted_optimal(&market, &alloc).unwrap());
        }
    }

    #[test]
    fn conditions_imply_restricted_optimality_on_random_instances() {
        // Hidden features are scaled down until some condition fires; the
        // implication must then hold with zero counterexamples.
        let mut rng = seed::rng(32);
        let mut fired = 0;
        for _ in 0..150 {
            let (n, m, d) = (4, 4, 4);
            let mut x = Array2::from_shape_fn((m, d), |_| rng.random::<f64>());
            for j in 2..d {
                x.column_mut(j).mapv_inplace(|v| v * 1e-3);
            }
            let mut b = Array2::from_shape_fn((n, d), |_| rng.random::<f64>());
            let scale = b.dot(&x.t()).iter().fold(0.0f64, |a, &v| a.max(v));
            b.mapv_inplace(|v| v / scale.max(1.0));
            let prices = Array1::from_shape_fn(m, |_| 0.2 * rng.random::<f64>());
            let market = Market::new(x, prices, Array2::zeros((n, 1)), Some(b)).unwrap();
            let mask = Mask::from_indices(d, &[0, 1]).unwrap();
            let choices = market::choose(&market, &mask, Impute::Zero).unwrap();
            if choices.demanded_items().is_empty() {
                continue;
            }
            let alloc = market::allocate(&choices, AllocationKind::Realized, rng.random());
            let delta = margin(&market, &mask, &alloc).unwrap();
            let report = check_conditions(&market, &mask, &alloc, delta).unwrap();
            if report.any_condition_holds() {
                fired += 1;
                assert!(
                    restricted_optimal(&market, &alloc).unwrap(),
                    "condition held but allocation is not restricted-optimal"
                );
            }
        }
        assert!(fired >= 50, "conditions rarely fired ({fired})");
    }

    #[test]
    fn randomized_allocation_validates_product_structure() {
        assert!(RandomizedAllocation::new(vec![(0, vec![0, 1]), (1, vec![2])]).is_ok());
        assert!(RandomizedAllocation::new(vec![(0, vec![0]), (0, vec![1])]).is_err());
        assert!(RandomizedAllocation::new(vec![(0, vec![0]), (1, vec![0])]).is_err());
        assert!(RandomizedAllocation::new(vec![(0, vec![])]).is_err());
    }

    #[test]
    fn expected_welfare_matches_linear_formula() {
        let values = arr2(&[[0.8, 0.1], [0.6, 0.5], [0.2, 0.9]]);
        let ra = RandomizedAllocation::new(vec![(0, vec![0, 1]), (1, vec![2])]).unwrap();
        let direct = ra.expected_welfare(&values).unwrap();
        let linear = 0.5 * (0.8 + 0.6) + 0.9;
        assert!((direct - linear).abs() < 1e-12);
        assert_eq!(ra.support().unwrap().len(), 2);
    }

    #[test]
    fn soundness_sweeps_fire_and_stay_clean() {
        let paired = prop1_soundness_sweep(150, 4, 91).unwrap();
        assert_eq!(paired.trials, 150);
        assert!(paired.fired > 5, "spread condition never fired");
        assert_eq!(paired.unsound, 0);
        assert_eq!(paired.sound, paired.fired);
        assert!(prop1_soundness_sweep(10, 9, 91).is_err());

        let conditions = condition_soundness_sweep(40, 2000, 91).unwrap();
        assert_eq!(conditions.fired, 40);
        assert_eq!(conditions.unsound, 0);
        assert!(condition_soundness_sweep(1000, 30, 91).is_err());

        let ordering = theorem1_soundness_sweep(40, 2000, 91).unwrap();
        assert_eq!(ordering.fired, 40);
        assert_eq!(ordering.unsound, 0, "ordering held only weakly or failed");

        // Determinism of the tallies.
        let again = theorem1_soundness_sweep(40, 2000, 91).unwrap();
        assert_eq!(again.trials, ordering.trials);
        assert_eq!(again.sound, ordering.sound);
    }

    #[test]
    fn theorem1_equality_extension_and_rejection() {
        let values = arr2(&[[0.8, 0.1], [0.7, 0.5]]);
        // A: both compete for item 0. B: each gets its own item.
        let a = RandomizedAllocation::new(vec![(0, vec![0, 1])]).unwrap();
        let b = RandomizedAllocation::new(vec![(0, vec![0]), (1, vec![1])]).unwrap();

        match theorem1_check(&a, &a, &values).unwrap() {
            Theorem1Verdict::Holds { welfare_a, welfare_b, strict } => {
                assert_eq!(welfare_a, welfare_b);
                assert!(!strict);
            }
            other => panic!("unexpected {other:?}"),
        }
        match theorem1_check(&a, &b, &values).unwrap() {
            Theorem1Verdict::Holds { welfare_a, welfare_b, strict } => {
                assert!((welfare_a - 0.75).abs() < 1e-12);
                assert!((welfare_b - 1.3).abs() < 1e-12);
                assert!(strict);
            }
            other => panic!("unexpected {other:?}"),
        }
        // Reversed: B drops an item.
        match theorem1_check(&b, &a, &values).unwrap() {
            Theorem1Verdict::HypothesesNotMet { .. } => {}
            other => panic!("unexpected {other:?}"),
        }
        // Extension that is not restricted optimal: item 1 to agent 0,
        // item 0 to agent 1 (swap is better).
        let bad =
            RandomizedAllocation::new(vec![(0, vec![1]), (1, vec![0])]).unwrap();
        match theorem1_check(&a, &bad, &values).unwrap() {
            Theorem1Verdict::HypothesesNotMet { reason } => {
                assert!(reason.contains("restricted-optimal"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
