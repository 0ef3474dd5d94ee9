//! Domain types and ground-truth market mechanics.
//!
//! A market has `m` indivisible items with features and prices, and `n`
//! unit-demand users with private preference vectors. Users see items only
//! through a k-hot feature mask, derive perceived values, and each demands
//! its single best item (or nothing). Demanded items are allocated uniformly
//! at random among their choosers; welfare is always computed at true values.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pricing::{self, PriceScheme};
use crate::seed;
use crate::stats::average_ranks;

/// Slack tolerated when validating that values lie in [0,1].
const VALUE_TOL: f64 = 1e-9;

/// Current on-disk schema version for serialized markets.
pub const MARKET_SCHEMA_VERSION: u32 = 1;

/// How masked-out features enter perceived values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Impute {
    /// Masked features contribute nothing: v~_ij = beta_i . (x_j ⊙ mu).
    Zero,
    /// Masked feature l of every item is replaced by the item-population
    /// mean x̄_l = (1/m) Σ_j x_jl before the inner product. Under this mode
    /// perceived values may exceed true values and the proxy lower bound
    /// no longer holds.
    Mean,
}

/// A k-hot binary feature selector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct Mask {
    bits: Vec<u8>,
    cardinality: usize,
}

impl Mask {
    /// Build from a 0/1 bit vector. Cardinality may be 0 (the degenerate
    /// all-hidden representation) up to d.
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::invalid("mask must have at least one feature slot"));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::invalid("mask bits must be 0 or 1"));
        }
        let cardinality = bits.iter().map(|&b| b as usize).sum();
        Ok(Mask { bits, cardinality })
    }

    pub fn from_indices(d: usize, on: &[usize]) -> Result<Self> {
        let mut bits = vec![0u8; d];
        for &i in on {
            if i >= d {
                return Err(Error::invalid(format!("mask index {i} out of range for d={d}")));
            }
            bits[i] = 1;
        }
        Mask::new(bits)
    }

    pub fn full(d: usize) -> Self {
        Mask { bits: vec![1; d], cardinality: d }
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn d(&self) -> usize {
        self.bits.len()
    }

    pub fn k(&self) -> usize {
        self.cardinality
    }

    pub fn is_on(&self, feature: usize) -> bool {
        self.bits[feature] == 1
    }

    /// Indices of revealed features, ascending.
    pub fn on_indices(&self) -> Vec<usize> {
        self.bits.iter().enumerate().filter(|(_, &b)| b == 1).map(|(i, _)| i).collect()
    }

    pub fn complement(&self) -> Mask {
        let bits: Vec<u8> = self.bits.iter().map(|&b| 1 - b).collect();
        let cardinality = self.d() - self.cardinality;
        Mask { bits, cardinality }
    }

    /// Item features with hidden columns zeroed: X ⊙ mu, row-wise.
    pub fn masked_features(&self, item_features: &Array2<f64>) -> Array2<f64> {
        let mut out = item_features.clone();
        for (l, &b) in self.bits.iter().enumerate() {
            if b == 0 {
                out.column_mut(l).fill(0.0);
            }
        }
        out
    }

    /// Item features with hidden columns replaced by their item-mean.
    pub fn mean_imputed_features(&self, item_features: &Array2<f64>) -> Array2<f64> {
        let mut out = item_features.clone();
        let means = item_features.mean_axis(Axis(0)).expect("non-empty item matrix");
        for (l, &b) in self.bits.iter().enumerate() {
            if b == 0 {
                out.column_mut(l).fill(means[l]);
            }
        }
        out
    }

    /// Uniformly random k-subset mask.
    pub fn random(d: usize, k: usize, rng: &mut impl Rng) -> Result<Self> {
        if k > d {
            return Err(Error::invalid(format!("cannot select {k} of {d} features")));
        }
        // Partial Fisher-Yates over feature indices.
        let mut idx: Vec<usize> = (0..d).collect();
        for i in 0..k {
            let j = rng.random_range(i..d);
            idx.swap(i, j);
        }
        Mask::from_indices(d, &idx[..k])
    }
}

impl TryFrom<Vec<u8>> for Mask {
    type Error = Error;
    fn try_from(bits: Vec<u8>) -> Result<Self> {
        Mask::new(bits)
    }
}

impl From<Mask> for Vec<u8> {
    fn from(m: Mask) -> Vec<u8> {
        m.bits
    }
}

/// One sampled economy instance.
///
/// `preferences` may be absent for revealed-preference-only data. A value
/// override, when present, replaces the true-value matrix B X^T (used by the
/// dispersion transform, which is not representable in feature space);
/// perceived values always remain structural in the features.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "MarketJson", into = "MarketJson")]
pub struct Market {
    item_features: Array2<f64>,
    prices: Array1<f64>,
    user_features: Array2<f64>,
    preferences: Option<Array2<f64>>,
    value_override: Option<Array2<f64>>,
}

impl Market {
    pub fn new(
        item_features: Array2<f64>,
        prices: Array1<f64>,
        user_features: Array2<f64>,
        preferences: Option<Array2<f64>>,
    ) -> Result<Self> {
        let m = item_features.nrows();
        let d = item_features.ncols();
        let n = user_features.nrows();
        if m == 0 || d == 0 || n == 0 {
            return Err(Error::invalid("market must have items, users, and features"));
        }
        if prices.len() != m {
            return Err(Error::ShapeMismatch {
                context: "prices",
                expected: format!("{m}"),
                got: format!("{}", prices.len()),
            });
        }
        if let Some(b) = &preferences {
            if b.nrows() != n || b.ncols() != d {
                return Err(Error::ShapeMismatch {
                    context: "preferences",
                    expected: format!("{n}x{d}"),
                    got: format!("{}x{}", b.nrows(), b.ncols()),
                });
            }
        }
        let market = Market { item_features, prices, user_features, preferences, value_override: None };
        market.validate()?;
        Ok(market)
    }

    fn validate(&self) -> Result<()> {
        let all_finite = self.item_features.iter().all(|v| v.is_finite())
            && self.prices.iter().all(|v| v.is_finite())
            && self.user_features.iter().all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::NonFinite("market fields"));
        }
        if self.item_features.iter().any(|&v| v < 0.0) {
            return Err(Error::invalid("item features must be non-negative"));
        }
        if self.prices.iter().any(|&p| p < 0.0) {
            return Err(Error::invalid("prices must be non-negative"));
        }
        if let Some(b) = &self.preferences {
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("preferences"));
            }
            if b.iter().any(|&v| v < 0.0) {
                return Err(Error::invalid("preferences must be non-negative"));
            }
            let values = b.dot(&self.item_features.t());
            if values.iter().any(|&v| !(-VALUE_TOL..=1.0 + VALUE_TOL).contains(&v)) {
                return Err(Error::invalid("values beta_i . x_j must lie in [0,1]"));
            }
        }
        if let Some(v) = &self.value_override {
            if v.nrows() != self.n() || v.ncols() != self.m() {
                return Err(Error::ShapeMismatch {
                    context: "value override",
                    expected: format!("{}x{}", self.n(), self.m()),
                    got: format!("{}x{}", v.nrows(), v.ncols()),
                });
            }
            if v.iter().any(|&x| !(-VALUE_TOL..=1.0 + VALUE_TOL).contains(&x)) {
                return Err(Error::invalid("value override must lie in [0,1]"));
            }
        }
        Ok(())
    }

    pub fn m(&self) -> usize {
        self.item_features.nrows()
    }

    pub fn n(&self) -> usize {
        self.user_features.nrows()
    }

    pub fn d(&self) -> usize {
        self.item_features.ncols()
    }

    /// Dimensionality of the observable user features u_i.
    pub fn d_user(&self) -> usize {
        self.user_features.ncols()
    }

    pub fn item_features(&self) -> &Array2<f64> {
        &self.item_features
    }

    pub fn prices(&self) -> &Array1<f64> {
        &self.prices
    }

    pub fn user_features(&self) -> &Array2<f64> {
        &self.user_features
    }

    pub fn preferences(&self) -> Option<&Array2<f64>> {
        self.preferences.as_ref()
    }

    pub fn value_override(&self) -> Option<&Array2<f64>> {
        self.value_override.as_ref()
    }

    /// True values: the override when present, else B X^T.
    pub fn values(&self) -> Result<Array2<f64>> {
        if let Some(v) = &self.value_override {
            return Ok(v.clone());
        }
        let b = self.preferences.as_ref().ok_or(Error::MissingPreferences("true values"))?;
        Ok(b.dot(&self.item_features.t()))
    }

    pub fn with_prices(&self, prices: Array1<f64>) -> Result<Market> {
        let mut market = self.clone();
        if prices.len() != market.m() {
            return Err(Error::ShapeMismatch {
                context: "prices",
                expected: format!("{}", market.m()),
                got: format!("{}", prices.len()),
            });
        }
        market.prices = prices;
        market.validate()?;
        Ok(market)
    }

    /// Replace the true-value matrix (values stay in [0,1]); perceived values
    /// keep their structural definition in the features.
    pub fn with_value_override(&self, values: Array2<f64>) -> Result<Market> {
        let mut market = self.clone();
        market.value_override = Some(values);
        market.validate()?;
        Ok(market)
    }

    /// Additively perturb preferences by uniform noise in [0, magnitude).
    /// Breaks exact argmax ties for experiments that need genericity.
    pub fn with_perturbed_preferences(&self, magnitude: f64, seed_value: u64) -> Result<Market> {
        let b = self.preferences.as_ref().ok_or(Error::MissingPreferences("perturbation"))?;
        let mut rng = seed::rng(seed_value);
        let perturbed = b.mapv(|v| v + magnitude * rng.random::<f64>());
        // Perturbed values may poke above 1 by up to magnitude * |x|_1; the
        // constructor tolerance absorbs magnitudes at the intended 1e-9 scale.
        let mut market = self.clone();
        market.preferences = Some(perturbed);
        market.validate()?;
        Ok(market)
    }
}

/// Serialized form: plain row-major arrays plus a schema version.
#[derive(Serialize, Deserialize)]
struct MarketJson {
    schema_version: u32,
    item_features: Vec<Vec<f64>>,
    prices: Vec<f64>,
    user_features: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    preferences: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    value_override: Option<Vec<Vec<f64>>>,
}

fn to_rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

fn from_rows(rows: &[Vec<f64>], context: &'static str) -> Result<Array2<f64>> {
    if rows.is_empty() {
        return Err(Error::invalid(format!("{context}: empty matrix")));
    }
    let cols = rows[0].len();
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::invalid(format!("{context}: ragged rows")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((rows.len(), cols), flat).map_err(|e| Error::invalid(format!("{context}: {e}")))
}

impl From<Market> for MarketJson {
    fn from(m: Market) -> MarketJson {
        MarketJson {
            schema_version: MARKET_SCHEMA_VERSION,
            item_features: to_rows(&m.item_features),
            prices: m.prices.to_vec(),
            user_features: to_rows(&m.user_features),
            preferences: m.preferences.as_ref().map(to_rows),
            value_override: m.value_override.as_ref().map(to_rows),
        }
    }
}

impl TryFrom<MarketJson> for Market {
    type Error = Error;
    fn try_from(j: MarketJson) -> Result<Market> {
        if j.schema_version != MARKET_SCHEMA_VERSION {
            return Err(Error::invalid(format!(
                "unsupported market schema version {} (expected {MARKET_SCHEMA_VERSION})",
                j.schema_version
            )));
        }
        let mut market = Market::new(
            from_rows(&j.item_features, "item_features")?,
            Array1::from_vec(j.prices),
            from_rows(&j.user_features, "user_features")?,
            j.preferences.as_deref().map(|rows| from_rows(rows, "preferences")).transpose()?,
        )?;
        if let Some(rows) = &j.value_override {
            market = market.with_value_override(from_rows(rows, "value_override")?)?;
        }
        Ok(market)
    }
}

/// Per-user choices. Index 0 is the no-choice option; item j is stored as j+1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceProfile {
    choices: Vec<usize>,
    demand_counts: Vec<usize>,
}

impl ChoiceProfile {
    pub fn new(choices: Vec<usize>, m: usize) -> Result<Self> {
        if choices.iter().any(|&c| c > m) {
            return Err(Error::invalid("choice index out of range"));
        }
        let mut demand_counts = vec![0usize; m];
        for &c in &choices {
            if c > 0 {
                demand_counts[c - 1] += 1;
            }
        }
        Ok(ChoiceProfile { choices, demand_counts })
    }

    pub fn n(&self) -> usize {
        self.choices.len()
    }

    pub fn m(&self) -> usize {
        self.demand_counts.len()
    }

    /// Raw encoded choices: 0 = no choice, j+1 = item j.
    pub fn choices(&self) -> &[usize] {
        &self.choices
    }

    /// The item chosen by user i, if any.
    pub fn item_of(&self, user: usize) -> Option<usize> {
        match self.choices[user] {
            0 => None,
            c => Some(c - 1),
        }
    }

    /// Number of users demanding item j.
    pub fn demand_counts(&self) -> &[usize] {
        &self.demand_counts
    }

    pub fn no_choice_count(&self) -> usize {
        self.choices.iter().filter(|&&c| c == 0).count()
    }

    /// Items with at least one chooser.
    pub fn demanded_items(&self) -> Vec<usize> {
        self.demand_counts.iter().enumerate().filter(|(_, &c)| c > 0).map(|(j, _)| j).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocationKind {
    Expected,
    Realized,
}

/// An (expected or realized) feasible assignment of items to users.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Allocation {
    pub kind: AllocationKind,
    /// n×m; realized entries in {0,1}, expected entries y_ij / n_j.
    pub matrix: Array2<f64>,
}

impl Allocation {
    /// Integral allocation from an explicit user -> item assignment.
    pub fn from_assignment(assignment: &[Option<usize>], m: usize) -> Result<Self> {
        let n = assignment.len();
        let mut matrix = Array2::zeros((n, m));
        let mut taken = vec![false; m];
        for (i, slot) in assignment.iter().enumerate() {
            if let Some(j) = *slot {
                if j >= m {
                    return Err(Error::invalid("assigned item out of range"));
                }
                if taken[j] {
                    return Err(Error::invalid("item assigned twice"));
                }
                taken[j] = true;
                matrix[(i, j)] = 1.0;
            }
        }
        Ok(Allocation { kind: AllocationKind::Realized, matrix })
    }

    /// The user -> item map of a realized allocation.
    pub fn assignment(&self) -> Vec<Option<usize>> {
        self.matrix
            .outer_iter()
            .map(|row| row.iter().position(|&v| v > 0.5))
            .collect()
    }

    /// Items receiving positive allocation mass.
    pub fn allocated_items(&self) -> Vec<usize> {
        (0..self.matrix.ncols())
            .filter(|&j| self.matrix.column(j).iter().any(|&v| v > 0.0))
            .collect()
    }

    /// Users receiving positive allocation mass.
    pub fn allocated_users(&self) -> Vec<usize> {
        (0..self.matrix.nrows())
            .filter(|&i| self.matrix.row(i).iter().any(|&v| v > 0.0))
            .collect()
    }
}

/// True, perceived, and hidden values for one (market, mask, impute) triple.
#[derive(Debug, Clone)]
pub struct ValueView {
    pub true_values: Array2<f64>,
    pub perceived_values: Array2<f64>,
    pub hidden_values: Array2<f64>,
}

/// Perceived values v~ under a mask, together with true and hidden values.
pub fn perceived_values(market: &Market, mask: &Mask, impute: Impute) -> Result<ValueView> {
    let b = market.preferences().ok_or(Error::MissingPreferences("perceived values"))?;
    if mask.d() != market.d() {
        return Err(Error::ShapeMismatch {
            context: "mask",
            expected: format!("{}", market.d()),
            got: format!("{}", mask.d()),
        });
    }
    let features = match impute {
        Impute::Zero => mask.masked_features(market.item_features()),
        Impute::Mean => mask.mean_imputed_features(market.item_features()),
    };
    let perceived = b.dot(&features.t());
    let true_values = market.values()?;
    let hidden_values = &true_values - &perceived;
    Ok(ValueView { true_values, perceived_values: perceived, hidden_values })
}

/// The choice rule: each user demands its best item by perceived utility
/// v~_ij − p_j when that utility is strictly positive, else chooses nothing.
/// Ties break to the lowest item index.
pub fn choose(market: &Market, mask: &Mask, impute: Impute) -> Result<ChoiceProfile> {
    let view = perceived_values(market, mask, impute)?;
    choose_from_utilities(&view.perceived_values, market.prices())
}

/// Choice rule applied to an explicit perceived-value matrix.
pub fn choose_from_utilities(perceived: &Array2<f64>, prices: &Array1<f64>) -> Result<ChoiceProfile> {
    let (n, m) = perceived.dim();
    if prices.len() != m {
        return Err(Error::ShapeMismatch {
            context: "prices",
            expected: format!("{m}"),
            got: format!("{}", prices.len()),
        });
    }
    let mut choices = Vec::with_capacity(n);
    for i in 0..n {
        let mut best_j = 0usize;
        let mut best_u = f64::NEG_INFINITY;
        for j in 0..m {
            let u = perceived[(i, j)] - prices[j];
            if u > best_u {
                best_u = u;
                best_j = j;
            }
        }
        choices.push(if best_u > 0.0 { best_j + 1 } else { 0 });
    }
    ChoiceProfile::new(choices, m)
}

/// Random single-round allocation: each demanded item goes to one of its
/// choosers, uniformly at random in realized mode, as the exact expectation
/// a-bar_ij = y_ij / n_j in expected mode.
pub fn allocate(choices: &ChoiceProfile, mode: AllocationKind, rng_seed: u64) -> Allocation {
    let (n, m) = (choices.n(), choices.m());
    let mut matrix = Array2::zeros((n, m));
    match mode {
        AllocationKind::Expected => {
            for i in 0..n {
                if let Some(j) = choices.item_of(i) {
                    matrix[(i, j)] = 1.0 / choices.demand_counts()[j] as f64;
                }
            }
        }
        AllocationKind::Realized => {
            let mut rng = seed::rng(rng_seed);
            for j in choices.demanded_items() {
                let choosers: Vec<usize> =
                    (0..n).filter(|&i| choices.item_of(i) == Some(j)).collect();
                let winner = choosers[rng.random_range(0..choosers.len())];
                matrix[(winner, j)] = 1.0;
            }
        }
    }
    Allocation { kind: mode, matrix }
}

/// Expected (or realized) welfare: allocation-weighted sum of *true* values.
pub fn welfare(alloc: &Allocation, values: &ValueView) -> f64 {
    (&alloc.matrix * &values.true_values).sum()
}

/// Total excess demand Σ_j max(0, n_j − 1).
pub fn congestion_count(choices: &ChoiceProfile) -> usize {
    choices.demand_counts().iter().map(|&c| c.saturating_sub(1)).sum()
}

/// Simulate choices under a mask and return the expected welfare plus the
/// realized choice diagnostics most experiments report together.
pub fn mask_outcome(market: &Market, mask: &Mask, impute: Impute) -> Result<MaskOutcome> {
    let view = perceived_values(market, mask, impute)?;
    let choices = choose_from_utilities(&view.perceived_values, market.prices())?;
    let alloc = allocate(&choices, AllocationKind::Expected, 0);
    let welfare = welfare(&alloc, &view);
    let congestion = congestion_count(&choices);
    let allocated_items = choices.demanded_items().len();
    Ok(MaskOutcome { welfare, congestion, allocated_items, choices, view })
}

/// Bundled per-mask simulation result.
#[derive(Debug, Clone)]
pub struct MaskOutcome {
    pub welfare: f64,
    pub congestion: usize,
    pub allocated_items: usize,
    pub choices: ChoiceProfile,
    pub view: ValueView,
}

/// Kendall's coefficient of concordance over users' perceived-value rankings
/// of items, with average ranks on ties. 1 = identical rankings.
pub fn kendalls_w(view: &ValueView) -> Result<f64> {
    kendalls_w_matrix(&view.perceived_values)
}

/// Kendall's W of the row rankings of an arbitrary score matrix.
pub fn kendalls_w_matrix(scores: &Array2<f64>) -> Result<f64> {
    let (n, m) = scores.dim();
    if m < 2 || n < 2 {
        return Err(Error::Degenerate(format!("Kendall's W needs n,m >= 2, got {n}x{m}")));
    }
    let mut rank_sums = vec![0.0; m];
    for row in scores.outer_iter() {
        let ranks = average_ranks(row.as_slice().expect("contiguous row"));
        for (j, r) in ranks.iter().enumerate() {
            rank_sums[j] += r;
        }
    }
    let mean_rank = n as f64 * (m as f64 + 1.0) / 2.0;
    let s: f64 = rank_sums.iter().map(|r| (r - mean_rank) * (r - mean_rank)).sum();
    let n2 = (n * n) as f64;
    let m3 = (m * m * m - m) as f64;
    Ok(12.0 * s / (n2 * m3))
}

/// Mean absolute gap between market prices and the prices the same scheme
/// would set if values were the perceived ones: (1/m) |p~ − p|_1.
/// Perceived values use zero imputation, matching the enumeration study.
pub fn perceptive_distortion(market: &Market, mask: &Mask, pricer: &PriceScheme) -> Result<f64> {
    let view = perceived_values(market, mask, Impute::Zero)?;
    let p_tilde = pricing::scheme_prices(&view.perceived_values, pricer)?;
    let diff: f64 = p_tilde
        .iter()
        .zip(market.prices().iter())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(diff / market.m() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};

    fn simple_market(x: Array2<f64>, p: Vec<f64>, b: Array2<f64>) -> Market {
        let n = b.nrows();
        let u = Array2::zeros((n, 1));
        Market::new(x, arr1(&p), u, Some(b)).unwrap()
    }

    #[test]
    fn full_mask_recovers_true_values() {
        let market = simple_market(
            arr2(&[[1.0, 0.0], [0.0, 1.0]]),
            vec![0.0, 0.0],
            arr2(&[[1.0, 0.0]]),
        );
        let view = perceived_values(&market, &Mask::full(2), Impute::Zero).unwrap();
        assert_eq!(view.perceived_values, arr2(&[[1.0, 0.0]]));
        assert_eq!(view.hidden_values, arr2(&[[0.0, 0.0]]));
    }

    #[test]
    fn masking_all_valued_features_zeroes_perception() {
        let market = simple_market(arr2(&[[1.0, 0.0]]), vec![0.0], arr2(&[[1.0, 0.0]]));
        let mask = Mask::from_indices(2, &[1]).unwrap();
        let view = perceived_values(&market, &mask, Impute::Zero).unwrap();
        assert_eq!(view.perceived_values[(0, 0)], 0.0);
        assert_eq!(view.hidden_values[(0, 0)], 1.0);
    }

    #[test]
    fn mean_imputation_substitutes_population_mean() {
        // Feature 1 masked; its item mean is (0.4+0.8)/2 = 0.6.
        let market = simple_market(
            arr2(&[[0.4, 0.0], [0.8, 0.0]]),
            vec![0.0, 0.0],
            arr2(&[[1.0, 0.0]]),
        );
        let mask = Mask::from_indices(2, &[1]).unwrap();
        let view = perceived_values(&market, &mask, Impute::Mean).unwrap();
        assert!((view.perceived_values[(0, 0)] - 0.6).abs() < 1e-12);
        assert!((view.perceived_values[(0, 1)] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn choose_picks_best_positive_utility() {
        let market = simple_market(
            arr2(&[[1.0, 0.0], [0.0, 1.0]]),
            vec![0.5, 0.1],
            arr2(&[[1.0, 0.0]]),
        );
        let choices = choose(&market, &Mask::full(2), Impute::Zero).unwrap();
        assert_eq!(choices.item_of(0), Some(0)); // utilities 0.5 vs -0.1
    }

    #[test]
    fn zero_or_negative_utility_means_no_choice() {
        let market = simple_market(arr2(&[[0.5]]), vec![0.5], arr2(&[[1.0]]));
        let choices = choose(&market, &Mask::full(1), Impute::Zero).unwrap();
        assert_eq!(choices.item_of(0), None);
        assert_eq!(choices.no_choice_count(), 1);
    }

    #[test]
    fn mask_can_flip_choices() {
        // Full mask: utilities 0.25 vs 0.3 -> item 2. Only feature 1: 0.25 vs 0.05 -> item 1.
        let market = simple_market(
            arr2(&[[0.9, 0.0], [0.5, 0.5]]),
            vec![0.2, 0.2],
            arr2(&[[0.5, 0.5]]),
        );
        let full = choose(&market, &Mask::full(2), Impute::Zero).unwrap();
        assert_eq!(full.item_of(0), Some(1));
        let masked = choose(&market, &Mask::from_indices(2, &[0]).unwrap(), Impute::Zero).unwrap();
        assert_eq!(masked.item_of(0), Some(0));
    }

    #[test]
    fn ties_break_to_lowest_index() {
        let market = simple_market(
            arr2(&[[0.5, 0.0], [0.5, 0.0]]),
            vec![0.1, 0.1],
            arr2(&[[1.0, 0.0]]),
        );
        let choices = choose(&market, &Mask::full(2), Impute::Zero).unwrap();
        assert_eq!(choices.item_of(0), Some(0));
    }

    #[test]
    fn expected_allocation_splits_contested_items() {
        let choices = ChoiceProfile::new(vec![1, 1], 2).unwrap();
        let alloc = allocate(&choices, AllocationKind::Expected, 0);
        assert_eq!(alloc.matrix[(0, 0)], 0.5);
        assert_eq!(alloc.matrix[(1, 0)], 0.5);
    }

    #[test]
    fn distinct_choices_allocate_deterministically() {
        let choices = ChoiceProfile::new(vec![1, 2], 2).unwrap();
        let expected = allocate(&choices, AllocationKind::Expected, 0);
        let realized = allocate(&choices, AllocationKind::Realized, 7);
        assert_eq!(expected.matrix, realized.matrix);
        assert_eq!(expected.matrix[(0, 0)], 1.0);
        assert_eq!(expected.matrix[(1, 1)], 1.0);
    }

    #[test]
    fn realized_draws_converge_to_uniform_thirds() {
        let choices = ChoiceProfile::new(vec![1, 1, 1], 1).unwrap();
        let draws = 100_000;
        let mut wins = [0usize; 3];
        for s in 0..draws {
            let alloc = allocate(&choices, AllocationKind::Realized, s as u64);
            for i in 0..3 {
                if alloc.matrix[(i, 0)] > 0.5 {
                    wins[i] += 1;
                }
            }
        }
        for w in wins {
            let rate = w as f64 / draws as f64;
            assert!((rate - 1.0 / 3.0).abs() < 0.01, "win rate {rate}");
        }
    }

    #[test]
    fn welfare_of_contested_item_averages_winners() {
        let choices = ChoiceProfile::new(vec![1, 1], 1).unwrap();
        let alloc = allocate(&choices, AllocationKind::Expected, 0);
        let view = ValueView {
            true_values: arr2(&[[0.8], [0.6]]),
            perceived_values: arr2(&[[0.8], [0.6]]),
            hidden_values: arr2(&[[0.0], [0.0]]),
        };
        assert!((welfare(&alloc, &view) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn welfare_sums_diagonal() {
        let alloc = Allocation::from_assignment(&[Some(0), Some(1)], 2).unwrap();
        let view = ValueView {
            true_values: arr2(&[[0.9, 0.0], [0.0, 0.4]]),
            perceived_values: arr2(&[[0.9, 0.0], [0.0, 0.4]]),
            hidden_values: arr2(&[[0.0, 0.0], [0.0, 0.0]]),
        };
        assert!((welfare(&alloc, &view) - 1.3).abs() < 1e-12);
        let empty = Allocation::from_assignment(&[None, None], 2).unwrap();
        assert_eq!(welfare(&empty, &view), 0.0);
    }

    #[test]
    fn congestion_counts_excess_demand() {
        assert_eq!(congestion_count(&ChoiceProfile::new(vec![1, 2, 3], 3).unwrap()), 0);
        assert_eq!(congestion_count(&ChoiceProfile::new(vec![1, 1, 1, 2], 2).unwrap()), 2);
        // counts (4, 0, 1) -> 3
        assert_eq!(congestion_count(&ChoiceProfile::new(vec![1, 1, 1, 1, 3], 3).unwrap()), 3);
    }

    #[test]
    fn kendalls_w_extremes() {
        let identical = arr2(&[[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]]);
        assert!((kendalls_w_matrix(&identical).unwrap() - 1.0).abs() < 1e-12);
        let reversed = arr2(&[[0.1, 0.2, 0.3], [0.6, 0.5, 0.4]]);
        assert!(kendalls_w_matrix(&reversed).unwrap().abs() < 1e-12);
        assert!(kendalls_w_matrix(&arr2(&[[1.0], [2.0]])).is_err());
    }

    #[test]
    fn kendalls_w_matches_rank_sum_oracle() {
        let mut rng = seed::rng(42);
        let scores = Array2::from_shape_fn((5, 5), |_| rng.random::<f64>());
        // Independent oracle: recompute from scratch with a fresh ranking loop.
        let (n, m) = (5usize, 5usize);
        let mut rank_sums = vec![0.0f64; m];
        for i in 0..n {
            let row: Vec<f64> = (0..m).map(|j| scores[(i, j)]).collect();
            for j in 0..m {
                let less = row.iter().filter(|&&v| v < row[j]).count();
                let equal = row.iter().filter(|&&v| v == row[j]).count();
                rank_sums[j] += less as f64 + (equal as f64 + 1.0) / 2.0;
            }
        }
        let mean_rank = n as f64 * (m as f64 + 1.0) / 2.0;
        let s: f64 = rank_sums.iter().map(|r| (r - mean_rank).powi(2)).sum();
        let oracle = 12.0 * s / ((n * n) as f64 * ((m * m * m - m) as f64));
        let got = kendalls_w_matrix(&scores).unwrap();
        assert!((got - oracle).abs() < 1e-12);
    }

    #[test]
    fn market_serialization_round_trips() {
        let market = simple_market(
            arr2(&[[0.4, 0.1], [0.2, 0.3]]),
            vec![0.2, 0.0],
            arr2(&[[0.5, 0.5], [1.0, 0.0]]),
        );
        let json = serde_json::to_string(&market).unwrap();
        assert!(json.contains("\"schema_version\":1"));
        let back: Market = serde_json::from_str(&json).unwrap();
        assert_eq!(back.item_features(), market.item_features());
        assert_eq!(back.prices(), market.prices());
        assert_eq!(back.preferences(), market.preferences());
    }

    #[test]
    fn constructor_rejects_out_of_range_values() {
        let x = arr2(&[[2.0]]);
        let b = arr2(&[[2.0]]); // value 4 > 1
        assert!(Market::new(x, arr1(&[0.0]), Array2::zeros((1, 1)), Some(b)).is_err());
        let neg = Market::new(arr2(&[[-0.1]]), arr1(&[0.0]), Array2::zeros((1, 1)), None);
        assert!(neg.is_err());
    }

    #[test]
    fn monotone_mask_refinement_increases_perception() {
        let mut rng = seed::rng(3);
        for _ in 0..50 {
            let x = Array2::from_shape_fn((4, 6), |_| rng.random::<f64>() * 0.3);
            let b = Array2::from_shape_fn((3, 6), |_| rng.random::<f64>() * 0.5);
            let market = Market::new(x, Array1::zeros(4), Array2::zeros((3, 1)), Some(b)).unwrap();
            let coarse = Mask::random(6, 2, &mut rng).unwrap();
            let mut refined_bits = coarse.bits().to_vec();
            for bit in refined_bits.iter_mut() {
                if *bit == 0 && rng.random::<f64>() < 0.5 {
                    *bit = 1;
                }
            }
            let refined = Mask::new(refined_bits).unwrap();
            let v_coarse = perceived_values(&market, &coarse, Impute::Zero).unwrap();
            let v_refined = perceived_values(&market, &refined, Impute::Zero).unwrap();
            for (a, b) in v_refined.perceived_values.iter().zip(v_coarse.perceived_values.iter()) {
                assert!(a + 1e-12 >= *b);
            }
            for (v, t) in v_refined.perceived_values.iter().zip(v_refined.true_values.iter()) {
                assert!(v <= &(t + 1e-12));
            }
        }
    }
}
