//! Market generation and dataset plumbing.
//!
//! Two families of instances feed the experiments. Mixture markets
//! interpolate between a fully heterogeneous circulant value profile (every
//! user tops a different item) and a fully homogeneous one (everyone shares
//! a ranking); the interpolation weight α controls preference alignment and
//! a dispersion power ρ < 1 compresses values upward. Ratings-derived pools
//! come from masked non-negative matrix factorization of a sparse rating
//! table; markets are sampled from the pool with a fixed item set and fresh
//! user draws, and a default masking policy π₀ simulates the logged choice
//! data that the predictor trains on.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{self, Impute, Market, Mask};
use crate::predictor::{self, ChoiceDataset, ChoiceSample};
use crate::pricing::{self, PriceScheme};
use crate::seed;
use crate::tape::softmax_tempered;

// ---------------------------------------------------------------------------
// Mixture markets

/// Recipe for one synthetic mixture market.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub n: usize,
    pub m: usize,
    pub d: usize,
    /// Preference-alignment weight: 0 = heterogeneous circulant targets,
    /// 1 = a single shared ranking.
    pub alpha: f64,
    /// Dispersion power applied to values (ρ = 1 leaves them untouched).
    pub rho: f64,
    pub seed: u64,
}

impl MixtureSpec {
    pub fn new(n: usize, m: usize, d: usize, alpha: f64, seed: u64) -> Self {
        MixtureSpec { n, m, d, alpha, rho: 1.0, seed }
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 || self.d == 0 {
            return Err(Error::invalid("mixture market dimensions must be positive"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid("alpha must lie in [0, 1]"));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::invalid("dispersion power rho must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Circulant heterogeneous targets: user i values item i highest, with the
/// normalized ladder (m, m−1, …, 1)/m wrapping around the items.
pub fn heterogeneous_targets(n: usize, m: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, m), |(i, j)| {
        let lag = (j as isize - i as isize).rem_euclid(m as isize) as f64;
        (m as f64 - lag) / m as f64
    })
}

/// Homogeneous targets: every user holds the same ranking (m, m−1, …, 1)/m.
pub fn homogeneous_targets(n: usize, m: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, m), |(_, j)| (m - j) as f64 / m as f64)
}

/// Non-negative least squares min_{B ≥ 0} ‖B Xᵀ − V‖²_F by projected
/// gradient with Armijo backtracking. Stops when the projected-gradient norm
/// falls below 1e-8 or after 5000 iterations.
pub fn nnls(x: &Array2<f64>, targets: &Array2<f64>) -> Result<Array2<f64>> {
    let (m, d) = x.dim();
    let (n, m2) = targets.dim();
    if m2 != m {
        return Err(Error::ShapeMismatch {
            context: "nnls targets",
            expected: format!("{n}x{m}"),
            got: format!("{n}x{m2}"),
        });
    }
    let objective = |b: &Array2<f64>| -> f64 {
        let r = b.dot(&x.t()) - targets;
        r.iter().map(|v| v * v).sum()
    };
    let mut b = Array2::<f64>::zeros((n, d));
    let mut f = objective(&b);
    let f0 = f;
    let mut step = 1.0;
    for _ in 0..5000 {
        let grad = (b.dot(&x.t()) - targets).dot(x) * 2.0;
        // Projected-gradient norm: free coordinates plus inward-pointing
        // components on the boundary.
        let pg_norm: f64 = b
            .iter()
            .zip(grad.iter())
            .map(|(&bi, &gi)| {
                let pg = if bi > 0.0 { gi } else { gi.min(0.0) };
                pg * pg
            })
            .sum::<f64>()
            .sqrt();
        if pg_norm <= 1e-8 {
            break;
        }
        step *= 2.0; // probe a larger step before backtracking
        let mut accepted = false;
        for _ in 0..60 {
            let candidate = (&b - &(&grad * step)).mapv(|v| v.max(0.0));
            let f_new = objective(&candidate);
            let decrease: f64 = grad
                .iter()
                .zip(b.iter().zip(candidate.iter()))
                .map(|(&g, (&old, &new))| g * (new - old))
                .sum();
            if f_new <= f + 1e-4 * decrease {
                b = candidate;
                f = f_new;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break; // step underflow: as converged as floating point allows
        }
    }
    if !f.is_finite() || f > f0 + 1e-12 {
        return Err(Error::Factorization(format!(
            "nnls diverged: residual {f} from initial {f0}"
        )));
    }
    Ok(b)
}

/// Build a mixture market: random item features X = X₍₁₎ + X₍₂₎, preference
/// matrices fit by NNLS to the heterogeneous and homogeneous targets, users
/// blended as B_α = (1−α) B_het + α B_hom, and values rescaled into [0,1]
/// when the fit overshoots. Users' observable features are their preference
/// vectors; prices start at zero (attach a pricing scheme downstream).
pub fn make_mixture_market(spec: &MixtureSpec) -> Result<Market> {
    spec.validate()?;
    let mut rng = seed::rng(spec.seed);
    let x1 = Array2::from_shape_fn((spec.m, spec.d), |_| rng.random::<f64>());
    let x2 = Array2::from_shape_fn((spec.m, spec.d), |_| rng.random::<f64>());
    let x = x1 + x2;
    let b_het = nnls(&x, &heterogeneous_targets(spec.n, spec.m))?;
    let b_hom = nnls(&x, &homogeneous_targets(spec.n, spec.m))?;
    let mut b = b_het * (1.0 - spec.alpha) + b_hom * spec.alpha;
    let vmax = b.dot(&x.t()).iter().copied().fold(0.0_f64, f64::max);
    if vmax > 1.0 {
        b /= vmax;
    }
    let market = Market::new(
        x,
        Array1::zeros(spec.m),
        b.clone(),
        Some(b),
    )?;
    apply_dispersion(&market, spec.rho)
}

/// Compress values upward by v ← v^ρ (ρ ∈ (0,1]; identity at ρ = 1).
/// Realized as an exact value-matrix override since the powered matrix is
/// not expressible through preferences.
pub fn apply_dispersion(market: &Market, rho: f64) -> Result<Market> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::invalid("dispersion power rho must lie in (0, 1]"));
    }
    if rho == 1.0 {
        return Ok(market.clone());
    }
    let powered = market.values()?.mapv(|v| v.powf(rho));
    market.with_value_override(powered)
}

// ---------------------------------------------------------------------------
// Ratings ingestion

/// One observed rating with dense (re-mapped) indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatingTriple {
    pub user: usize,
    pub item: usize,
    pub rating: u8,
}

/// A sparse rating table plus the original-id maps (dense index → raw id,
/// in order of first appearance).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratings {
    pub triples: Vec<RatingTriple>,
    pub user_ids: Vec<u64>,
    pub item_ids: Vec<u64>,
}

impl Ratings {
    pub fn n_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn n_items(&self) -> usize {
        self.item_ids.len()
    }
}

/// Parse tab-separated "user<TAB>item<TAB>rating<TAB>timestamp" lines.
/// Ratings must be integers in 1..=5; any malformed line aborts with its
/// 1-based line number.
pub fn parse_ratings(text: &str) -> Result<Ratings> {
    use std::collections::HashMap;
    let mut triples = Vec::new();
    let mut user_ids = Vec::new();
    let mut item_ids = Vec::new();
    let mut user_index: HashMap<u64, usize> = HashMap::new();
    let mut item_index: HashMap<u64, usize> = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Ingestion {
                line: line_no,
                reason: format!("expected 4 tab-separated fields, got {}", fields.len()),
            });
        }
        let user_id: u64 = fields[0].parse().map_err(|_| Error::Ingestion {
            line: line_no,
            reason: format!("invalid user id {:?}", fields[0]),
        })?;
        let item_id: u64 = fields[1].parse().map_err(|_| Error::Ingestion {
            line: line_no,
            reason: format!("invalid item id {:?}", fields[1]),
        })?;
        let rating: u8 = fields[2].parse().map_err(|_| Error::Ingestion {
            line: line_no,
            reason: format!("invalid rating {:?}", fields[2]),
        })?;
        if !(1..=5).contains(&rating) {
            return Err(Error::Ingestion {
                line: line_no,
                reason: format!("rating {rating} outside 1..=5"),
            });
        }
        // Timestamp (field 4) is carried by the format but unused.
        let user = *user_index.entry(user_id).or_insert_with(|| {
            user_ids.push(user_id);
            user_ids.len() - 1
        });
        let item = *item_index.entry(item_id).or_insert_with(|| {
            item_ids.push(item_id);
            item_ids.len() - 1
        });
        triples.push(RatingTriple { user, item, rating });
    }
    if triples.is_empty() {
        return Err(Error::Ingestion { line: 0, reason: "no rating lines found".into() });
    }
    Ok(Ratings { triples, user_ids, item_ids })
}

pub fn ingest_ratings(path: &std::path::Path) -> Result<Ratings> {
    parse_ratings(&std::fs::read_to_string(path)?)
}

/// Inverse of [`parse_ratings`] (timestamps written as 0).
pub fn write_ratings(path: &std::path::Path, ratings: &Ratings) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for t in &ratings.triples {
        writeln!(
            out,
            "{}\t{}\t{}\t0",
            ratings.user_ids[t.user], ratings.item_ids[t.item], t.rating
        )?;
    }
    Ok(())
}

/// Synthesize a sparse rating table from a planted low-rank model: scores
/// S = A·Cᵀ with non-negative uniform factors, normalized by the largest
/// score and quantized onto the 1..=5 scale. Each entry is observed with
/// probability `density`; every user's and every item's strongest entry is
/// always kept so the table covers the whole pool.
pub fn synthetic_ratings(
    users: usize,
    items: usize,
    rank: usize,
    density: f64,
    seed: u64,
) -> Result<Ratings> {
    if users == 0 || items == 0 || rank == 0 {
        return Err(Error::invalid("synthetic rating dimensions must be positive"));
    }
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::invalid("observation density must lie in (0, 1]"));
    }
    let mut factor_rng = seed::rng(seed::derive_seed(seed, "rating-factors", 0));
    let a = Array2::from_shape_fn((users, rank), |_| factor_rng.random::<f64>());
    let c = Array2::from_shape_fn((items, rank), |_| factor_rng.random::<f64>());
    let scores = a.dot(&c.t());
    let smax = scores.iter().copied().fold(0.0_f64, f64::max);
    if smax <= 0.0 {
        return Err(Error::Degenerate("all synthetic scores vanished".into()));
    }

    let mut observe_rng = seed::rng(seed::derive_seed(seed, "rating-observe", 0));
    let mut keep = Array2::<bool>::from_elem((users, items), false);
    for i in 0..users {
        for j in 0..items {
            if observe_rng.random::<f64>() < density {
                keep[(i, j)] = true;
            }
        }
    }
    for i in 0..users {
        let j_best = (0..items)
            .max_by(|&a_j, &b_j| scores[(i, a_j)].total_cmp(&scores[(i, b_j)]))
            .expect("items > 0");
        keep[(i, j_best)] = true;
    }
    for j in 0..items {
        let i_best = (0..users)
            .max_by(|&a_i, &b_i| scores[(a_i, j)].total_cmp(&scores[(b_i, j)]))
            .expect("users > 0");
        keep[(i_best, j)] = true;
    }

    let mut triples = Vec::new();
    for i in 0..users {
        for j in 0..items {
            if keep[(i, j)] {
                let rating = 1 + (4.0 * scores[(i, j)] / smax).round() as u8;
                triples.push(RatingTriple { user: i, item: j, rating: rating.clamp(1, 5) });
            }
        }
    }
    Ok(Ratings {
        triples,
        user_ids: (1..=users as u64).collect(),
        item_ids: (1..=items as u64).collect(),
    })
}

// ---------------------------------------------------------------------------
// Factorization

/// Feature pool recovered from ratings: item features X, user preferences B
/// (rescaled so pool values stay in [0,1]), observable user features U, and
/// the d′×d map T with U·T ≈ B.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactorizedPool {
    pub schema_version: u32,
    pub x: Array2<f64>,
    pub b: Array2<f64>,
    pub u: Array2<f64>,
    pub t: Array2<f64>,
}

impl FactorizedPool {
    pub fn n_users(&self) -> usize {
        self.b.nrows()
    }

    pub fn n_items(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn d_user(&self) -> usize {
        self.u.ncols()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let pool: FactorizedPool = serde_json::from_str(text)?;
        if pool.schema_version != 1 {
            return Err(Error::invalid(format!(
                "unsupported pool schema version {}",
                pool.schema_version
            )));
        }
        Ok(pool)
    }
}

/// Factorization result: the pool plus per-iteration objective traces and
/// the total scale applied to the raw preference factor (1/5 for the rating
/// scale, shrunk further if pool values overshoot 1).
#[derive(Debug, Clone)]
pub struct Factorization {
    pub pool: FactorizedPool,
    pub rating_objective: Vec<f64>,
    pub preference_objective: Vec<f64>,
    pub value_scale: f64,
}

impl Factorization {
    /// Reconstruction of the raw rating matrix from the stored factors.
    pub fn rating_reconstruction(&self) -> Array2<f64> {
        self.pool.b.dot(&self.pool.x.t()) / self.value_scale
    }
}

/// Masked multiplicative-update NMF: target ≈ L·R minimizing squared error
/// over entries where `observed` is 1. Returns (L, R, per-iteration losses).
fn masked_nmf(
    target: &Array2<f64>,
    observed: &Array2<f64>,
    rank: usize,
    iters: usize,
    rng: &mut impl Rng,
) -> (Array2<f64>, Array2<f64>, Vec<f64>) {
    let (rows, cols) = target.dim();
    // Entries in [0.1, 1.1): bounded away from the multiplicative fixed
    // point at zero.
    let mut l = Array2::from_shape_fn((rows, rank), |_| 0.1 + rng.random::<f64>());
    let mut r = Array2::from_shape_fn((rank, cols), |_| 0.1 + rng.random::<f64>());
    let masked_target = observed * target;
    let loss = |l: &Array2<f64>, r: &Array2<f64>| -> f64 {
        let diff = (target - &l.dot(r)) * observed;
        diff.iter().map(|v| v * v).sum()
    };
    let mut losses = Vec::with_capacity(iters);
    for _ in 0..iters {
        let masked_pred = observed * &l.dot(&r);
        let numer = masked_target.dot(&r.t());
        let denom = masked_pred.dot(&r.t()) + 1e-12;
        l = l * numer / denom;
        let masked_pred = observed * &l.dot(&r);
        let numer = l.t().dot(&masked_target);
        let denom = l.t().dot(&masked_pred) + 1e-12;
        r = r * numer / denom;
        losses.push(loss(&l, &r));
    }
    (l, r, losses)
}

/// Factorize a rating table into a market pool.
///
/// The observed entries of the n×m rating matrix are fit by masked
/// multiplicative-update NMF of rank d (objective non-increasing per
/// iteration); the recovered preferences are divided by the rating ceiling 5
/// (and shrunk further if any pool value still exceeds 1), and then
/// factorized once more into observable user features U (d′ = d/2) and the
/// map T with U·T ≈ B.
pub fn factorize(ratings: &Ratings, d: usize, iters: usize, factor_seed: u64) -> Result<Factorization> {
    let (n, m) = (ratings.n_users(), ratings.n_items());
    if d == 0 || d > n.min(m) {
        return Err(Error::Factorization(format!(
            "rank d={d} must lie in 1..={} for a {n}x{m} rating matrix",
            n.min(m)
        )));
    }
    let mut r = Array2::<f64>::zeros((n, m));
    let mut w = Array2::<f64>::zeros((n, m));
    for t in &ratings.triples {
        r[(t.user, t.item)] = t.rating as f64;
        w[(t.user, t.item)] = 1.0;
    }
    let mut rng = seed::rng(seed::derive_seed(factor_seed, "nmf-init", 0));
    let (b_raw, x_t, rating_objective) = masked_nmf(&r, &w, d, iters, &mut rng);
    let x = x_t.t().to_owned();
    let mut scale = 5.0;
    let b = &b_raw / scale;
    let vmax = b.dot(&x.t()).iter().copied().fold(0.0_f64, f64::max);
    let b = if vmax > 1.0 {
        scale *= vmax;
        b / vmax
    } else {
        b
    };
    let d_user = (d / 2).max(1);
    let ones = Array2::ones((n, d));
    let mut rng2 = seed::rng(seed::derive_seed(factor_seed, "nmf-pref-init", 0));
    let (u, t, preference_objective) = masked_nmf(&b, &ones, d_user, iters, &mut rng2);
    Ok(Factorization {
        pool: FactorizedPool { schema_version: 1, x, b, u, t },
        rating_objective,
        preference_objective,
        value_scale: 1.0 / scale,
    })
}

// ---------------------------------------------------------------------------
// Market sampling from a pool

fn choose_indices(total: usize, count: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..total).collect();
    for i in 0..count {
        let j = rng.random_range(i..total);
        idx.swap(i, j);
    }
    idx.truncate(count);
    idx
}

fn take_rows(source: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), source.ncols()), |(i, j)| source[(rows[i], j)])
}

/// Sample `l` markets from a pool: one item set fixed across all markets,
/// a fresh user set per market, and prices from `pricer` computed per
/// market on its true values.
pub fn sample_markets(
    pool: &FactorizedPool,
    m: usize,
    n: usize,
    l: usize,
    pricer: &PriceScheme,
    sample_seed: u64,
) -> Result<Vec<Market>> {
    if m == 0 || n == 0 || l == 0 {
        return Err(Error::invalid("market sample sizes must be positive"));
    }
    if m > pool.n_items() || n > pool.n_users() {
        return Err(Error::invalid(format!(
            "pool of {} users x {} items cannot supply n={n}, m={m}",
            pool.n_users(),
            pool.n_items()
        )));
    }
    let mut item_rng = seed::rng(seed::derive_seed(sample_seed, "pool-items", 0));
    let items = choose_indices(pool.n_items(), m, &mut item_rng);
    let x = take_rows(&pool.x, &items);
    let mut markets = Vec::with_capacity(l);
    for market_index in 0..l {
        let mut user_rng =
            seed::rng(seed::derive_seed(sample_seed, "pool-users", market_index as u64));
        let users = choose_indices(pool.n_users(), n, &mut user_rng);
        let b = take_rows(&pool.b, &users);
        let u = take_rows(&pool.u, &users);
        let values = b.dot(&x.t());
        let prices = pricing::scheme_prices(&values, &per_market_scheme(pricer, market_index))?;
        markets.push(Market::new(x.clone(), prices, u, Some(b))?);
    }
    Ok(markets)
}

/// Noisy pricing schemes get an independent noise stream per market; the
/// non-random schemes pass through untouched.
pub(crate) fn per_market_scheme(pricer: &PriceScheme, market_index: usize) -> PriceScheme {
    let fan_out = |noise_seed: u64| {
        seed::derive_seed(noise_seed, "per-market-price-noise", market_index as u64)
    };
    match *pricer {
        PriceScheme::CeNoisyValues { epsilon, noise_seed } => {
            PriceScheme::CeNoisyValues { epsilon, noise_seed: fan_out(noise_seed) }
        }
        PriceScheme::CeNoisyPrices { epsilon, noise_seed } => {
            PriceScheme::CeNoisyPrices { epsilon, noise_seed: fan_out(noise_seed) }
        }
        ref other => other.clone(),
    }
}

// ---------------------------------------------------------------------------
// Default masking policy and logged-choice datasets

/// The behavior policy π₀ that generated the logged masks: logits 3 on the
/// default mask, 1 elsewhere, sharpened by temperature 0.05, sampled
/// sequentially without replacement.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DefaultPolicy {
    theta: Vec<f64>,
    temperature: f64,
}

/// π₀ from the platform's default mask.
pub fn default_policy(default_mask: &Mask) -> DefaultPolicy {
    let theta = default_mask
        .bits()
        .iter()
        .map(|&b| if b == 1 { 3.0 } else { 1.0 })
        .collect();
    DefaultPolicy { theta, temperature: 0.05 }
}

impl DefaultPolicy {
    pub fn d(&self) -> usize {
        self.theta.len()
    }

    /// Temperature-scaled logits fed to the sequential sampler.
    pub fn effective_logits(&self) -> Vec<f64> {
        self.theta.iter().map(|&t| t / self.temperature).collect()
    }

    /// Per-feature first-round probabilities; all strictly positive, so the
    /// policy has full support over masks.
    pub fn feature_probabilities(&self) -> Vec<f64> {
        softmax_tempered(&self.theta, self.temperature)
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_probabilities().iter().any(|&p| !(p > 0.0)) {
            return Err(Error::Degenerate(
                "default policy lost full support over features".into(),
            ));
        }
        Ok(())
    }

    pub fn sample_mask(&self, k: usize, rng: &mut impl Rng) -> Result<Mask> {
        if k > self.d() {
            return Err(Error::invalid(format!("k={k} exceeds d={}", self.d())));
        }
        let picked = predictor::sample_subset_sequential(&self.effective_logits(), k, rng);
        Mask::from_indices(self.d(), &picked)
    }
}

/// Options for simulating a logged-choice dataset under π₀.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetOptions {
    /// Masks drawn (each with its simulated choices) per market.
    pub masks_per_market: usize,
    /// Monte-Carlo sample count for propensity estimates; None skips them.
    pub propensity_samples: Option<usize>,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        DatasetOptions { masks_per_market: 1, propensity_samples: None }
    }
}

/// Draw masks from π₀ for every market and simulate the users' true choices
/// under each. Monte-Carlo propensities, when requested, are floored at
/// 1/(2·samples) so a rare mask cannot produce a degenerate zero weight.
pub fn sample_dataset(
    markets: &[Market],
    policy: &DefaultPolicy,
    k: usize,
    options: &DatasetOptions,
    dataset_seed: u64,
) -> Result<ChoiceDataset> {
    if markets.is_empty() {
        return Err(Error::EmptyDataset("dataset sampling needs markets"));
    }
    if options.masks_per_market == 0 {
        return Err(Error::invalid("masks_per_market must be positive"));
    }
    policy.validate()?;
    let logits = policy.effective_logits();
    let mut samples = Vec::with_capacity(markets.len() * options.masks_per_market);
    for (market_index, market) in markets.iter().enumerate() {
        if market.d() != policy.d() {
            return Err(Error::ShapeMismatch {
                context: "policy logits vs market features",
                expected: format!("{}", market.d()),
                got: format!("{}", policy.d()),
            });
        }
        for draw in 0..options.masks_per_market {
            let counter = (market_index * options.masks_per_market + draw) as u64;
            let mut rng = seed::rng(seed::derive_seed(dataset_seed, "dataset-mask", counter));
            let picked = predictor::sample_subset_sequential(&logits, k, &mut rng);
            let mask = Mask::from_indices(market.d(), &picked)?;
            let choices = market::choose(market, &mask, Impute::Zero)?;
            let propensity = match options.propensity_samples {
                None => None,
                Some(mc) => {
                    let estimate = predictor::mask_probability(
                        &mask,
                        &logits,
                        mc,
                        seed::derive_seed(dataset_seed, "dataset-propensity", counter),
                    )?;
                    Some(estimate.max(0.5 / mc as f64))
                }
            };
            samples.push(ChoiceSample { market_index, mask, choices, propensity });
        }
    }
    ChoiceDataset::new(markets.to_vec(), samples)
}

// ---------------------------------------------------------------------------
// Fold splitting

/// Partition 0..count into `folds` disjoint, near-equal, seed-reproducible
/// index sets (each sorted ascending).
pub fn fold_partition(count: usize, folds: usize, split_seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds == 0 || folds > count {
        return Err(Error::invalid(format!(
            "cannot split {count} markets into {folds} folds"
        )));
    }
    let mut rng = seed::rng(seed::derive_seed(split_seed, "fold-split", 0));
    let mut idx: Vec<usize> = (0..count).collect();
    for i in (1..count).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    let base = count / folds;
    let extra = count % folds;
    let mut out = Vec::with_capacity(folds);
    let mut cursor = 0;
    for f in 0..folds {
        let size = base + usize::from(f < extra);
        let mut fold: Vec<usize> = idx[cursor..cursor + size].to_vec();
        fold.sort_unstable();
        out.push(fold);
        cursor += size;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::kendalls_w_matrix;

    #[test]
    fn circulant_targets_place_each_user_on_their_own_item() {
        let het = heterogeneous_targets(4, 4);
        assert_eq!(het.row(0).to_vec(), vec![1.0, 0.75, 0.5, 0.25]);
        assert_eq!(het.row(1).to_vec(), vec![0.25, 1.0, 0.75, 0.5]);
        let hom = homogeneous_targets(3, 4);
        for i in 0..3 {
            assert_eq!(hom.row(i).to_vec(), vec![1.0, 0.75, 0.5, 0.25]);
        }
        // More users than items wraps around.
        let tall = heterogeneous_targets(5, 3);
        assert_eq!(tall.row(3).to_vec(), tall.row(0).to_vec());
    }

    #[test]
    fn nnls_beats_the_zero_solution_and_respects_nonnegativity() {
        let mut rng = seed::rng(31);
        let x = Array2::from_shape_fn((5, 8), |_| rng.random::<f64>());
        let v = heterogeneous_targets(5, 5);
        let b = nnls(&x, &v).unwrap();
        assert!(b.iter().all(|&e| e >= 0.0));
        let residual: f64 = (b.dot(&x.t()) - &v).iter().map(|e| e * e).sum();
        let at_zero: f64 = v.iter().map(|e| e * e).sum();
        assert!(residual < at_zero, "residual {residual} vs {at_zero} at B=0");
        // The circulant rows need not lie in the cone spanned by X's columns,
        // so the optimum can be far from zero; certify it through the KKT
        // conditions instead (free coordinates flat, bound coordinates with
        // non-negative gradient).
        let grad = (b.dot(&x.t()) - &v).dot(&x) * 2.0;
        let pg_norm: f64 = b
            .iter()
            .zip(grad.iter())
            .map(|(&bi, &gi)| {
                let pg = if bi > 0.0 { gi } else { gi.min(0.0) };
                pg * pg
            })
            .sum::<f64>()
            .sqrt();
        assert!(pg_norm < 1e-6, "projected-gradient norm {pg_norm}");
    }

    #[test]
    fn nnls_recovers_consistent_systems_exactly() {
        // When V = B_true Xᵀ with B_true ≥ 0 the optimum is an exact fit.
        let mut rng = seed::rng(77);
        let x = Array2::from_shape_fn((5, 8), |_| rng.random::<f64>());
        let b_true = Array2::from_shape_fn((4, 8), |_| rng.random::<f64>() * 0.3);
        let v = b_true.dot(&x.t());
        let b = nnls(&x, &v).unwrap();
        let residual: f64 = (b.dot(&x.t()) - &v).iter().map(|e| e * e).sum();
        assert!(residual < 1e-10, "residual {residual} on a consistent system");
    }

    #[test]
    fn heterogeneous_mixture_tracks_the_diagonal_argmax_up_to_fit_error() {
        // The fitted values follow the circulant target only up to the NNLS
        // residual: a user may stray from their own item, but never by more
        // than twice the worst per-entry fit error of their row.
        let mut exact_diagonals = 0;
        for seed_v in [3u64, 14, 159] {
            let spec = MixtureSpec::new(6, 6, 10, 0.0, seed_v);
            let market = make_mixture_market(&spec).unwrap();
            let values = market.values().unwrap();

            // Re-derive the fit to measure per-row error against the target.
            let mut rng = seed::rng(seed_v);
            let x1 = Array2::from_shape_fn((6, 10), |_| rng.random::<f64>());
            let x2 = Array2::from_shape_fn((6, 10), |_| rng.random::<f64>());
            let x = x1 + x2;
            let target = heterogeneous_targets(6, 6);
            let fitted = nnls(&x, &target).unwrap().dot(&x.t());

            for i in 0..6 {
                let row_err = (0..6)
                    .map(|j| (fitted[(i, j)] - target[(i, j)]).abs())
                    .fold(0.0_f64, f64::max);
                let best = (0..6)
                    .map(|j| fitted[(i, j)])
                    .fold(f64::NEG_INFINITY, f64::max);
                assert!(
                    best - fitted[(i, i)] <= 2.0 * row_err + 1e-9,
                    "seed {seed_v}: user {i} strays beyond the residual bound \
                     ({best} vs {} with row error {row_err})",
                    fitted[(i, i)]
                );
                if best - fitted[(i, i)] < 1e-12 {
                    exact_diagonals += 1;
                }
                // Rescaling into [0,1] must not reorder the row.
                let market_best = (0..6)
                    .map(|j| values[(i, j)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let fitted_argmax =
                    (0..6).max_by(|&a, &b| fitted[(i, a)].total_cmp(&fitted[(i, b)])).unwrap();
                assert!((values[(i, fitted_argmax)] - market_best).abs() < 1e-12);
            }
        }
        // The bound alone would pass vacuously on a terrible fit; demand that
        // a solid share of users do top their own item.
        assert!(
            exact_diagonals >= 6,
            "only {exact_diagonals}/18 users kept the diagonal argmax"
        );
    }

    #[test]
    fn homogeneous_mixture_aligns_all_rankings() {
        let spec = MixtureSpec::new(6, 6, 10, 1.0, 12);
        let market = make_mixture_market(&spec).unwrap();
        let w = kendalls_w_matrix(&market.values().unwrap()).unwrap();
        assert!(w > 0.99, "Kendall's W {w}");
    }

    #[test]
    fn alignment_increases_with_alpha() {
        let grid = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];
        let mut means = Vec::new();
        for &alpha in &grid {
            let mut total = 0.0;
            for seed_v in 0..10u64 {
                let spec = MixtureSpec::new(6, 6, 10, alpha, 1000 + seed_v);
                let market = make_mixture_market(&spec).unwrap();
                total += kendalls_w_matrix(&market.values().unwrap()).unwrap();
            }
            means.push(total / 10.0);
        }
        for pair in means.windows(2) {
            assert!(
                pair[1] >= pair[0] - 1e-9,
                "mean Kendall's W not monotone: {means:?}"
            );
        }
    }

    #[test]
    fn dispersion_lifts_values_pointwise() {
        let spec = MixtureSpec::new(4, 4, 8, 0.4, 5);
        let market = make_mixture_market(&spec).unwrap();
        let same = apply_dispersion(&market, 1.0).unwrap();
        assert_eq!(market.values().unwrap(), same.values().unwrap());

        let dispersed = apply_dispersion(&market, 0.5).unwrap();
        let before = market.values().unwrap();
        let after = dispersed.values().unwrap();
        for (&v, &vr) in before.iter().zip(after.iter()) {
            assert!((vr - v.sqrt()).abs() < 1e-12);
            assert!(vr >= v - 1e-12, "power should not lower values in [0,1]");
            assert!(vr <= 1.0 + 1e-12);
        }
        assert!(apply_dispersion(&market, 0.0).is_err());
        assert!(apply_dispersion(&market, 1.5).is_err());

        // Spot value: 0.25^0.5 = 0.5.
        let quarter = market.with_value_override(Array2::from_elem((4, 4), 0.25)).unwrap();
        let rooted = apply_dispersion(&quarter, 0.5).unwrap();
        assert!((rooted.values().unwrap()[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn ratings_parse_the_tab_separated_format() {
        let ratings = parse_ratings("1\t5\t4\t881250949\n2\t5\t3\t881250950\n1\t7\t5\t0").unwrap();
        assert_eq!(ratings.user_ids, vec![1, 2]);
        assert_eq!(ratings.item_ids, vec![5, 7]);
        assert_eq!(
            ratings.triples[0],
            RatingTriple { user: 0, item: 0, rating: 4 }
        );
        assert_eq!(
            ratings.triples[2],
            RatingTriple { user: 0, item: 1, rating: 5 }
        );
    }

    #[test]
    fn ratings_errors_carry_line_numbers() {
        match parse_ratings("1\t5\t4\t0\n1\t5\t9\t0") {
            Err(Error::Ingestion { line, reason }) => {
                assert_eq!(line, 2);
                assert!(reason.contains("9"));
            }
            other => panic!("expected ingestion error, got {other:?}"),
        }
        match parse_ratings("1\t5\t4") {
            Err(Error::Ingestion { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected ingestion error, got {other:?}"),
        }
        assert!(parse_ratings("").is_err());
        match parse_ratings("a\t5\t4\t0") {
            Err(Error::Ingestion { line, reason }) => {
                assert_eq!(line, 1);
                assert!(reason.contains("user id"));
            }
            other => panic!("expected ingestion error, got {other:?}"),
        }
    }

    #[test]
    fn ratings_round_trip_through_disk() {
        let ratings = parse_ratings("10\t50\t4\t111\n20\t50\t3\t222\n10\t70\t5\t333").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ratings.tsv");
        write_ratings(&path, &ratings).unwrap();
        let back = ingest_ratings(&path).unwrap();
        assert_eq!(ratings, back);
    }

    #[test]
    fn rank_one_matrix_is_recovered_exactly() {
        // R = a bᵀ with factors in {1, 2}, so every product is an integer
        // rating in 1..=4 and the table is exactly rank one.
        let a = [1u8, 2, 2, 1, 2, 1];
        let bv = [2u8, 1, 2, 2, 1];
        let mut lines = String::new();
        for (i, &ai) in a.iter().enumerate() {
            for (j, &bj) in bv.iter().enumerate() {
                lines.push_str(&format!("{}\t{}\t{}\t0\n", i + 1, j + 1, ai * bj));
            }
        }
        let ratings = parse_ratings(&lines).unwrap();
        let fact = factorize(&ratings, 1, 800, 7).unwrap();
        let last = *fact.rating_objective.last().unwrap();
        assert!(last < 1e-5, "final masked squared error {last}");
        assert!(fact.pool.x.iter().all(|&v| v >= 0.0));
        assert!(fact.pool.b.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn exact_rank_one_values_reconstruct_to_high_precision() {
        // Bypass integer ratings: drive masked_nmf directly on a true
        // rank-1 target to freeze the reconstruction oracle.
        let a = [1.0, 2.0, 0.5, 1.5];
        let bv = [2.0, 1.0, 1.5, 0.4, 1.0];
        let target = Array2::from_shape_fn((4, 5), |(i, j)| a[i] * bv[j]);
        let observed = Array2::ones((4, 5));
        let mut rng = seed::rng(3);
        let (l, r, losses) = masked_nmf(&target, &observed, 1, 600, &mut rng);
        let err: f64 = (&target - &l.dot(&r)).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(err < 1e-3, "frobenius error {err}");
        assert!(losses.last().unwrap() < &1e-6);
    }

    #[test]
    fn synthetic_ratings_cover_the_pool_and_respect_the_scale() {
        let ratings = synthetic_ratings(30, 18, 5, 0.3, 44).unwrap();
        assert_eq!(ratings.n_users(), 30);
        assert_eq!(ratings.n_items(), 18);
        assert!(ratings.triples.iter().all(|t| (1..=5).contains(&t.rating)));
        // Every user and item keeps at least their strongest entry.
        let mut user_seen = vec![false; 30];
        let mut item_seen = vec![false; 18];
        for t in &ratings.triples {
            user_seen[t.user] = true;
            item_seen[t.item] = true;
        }
        assert!(user_seen.iter().all(|&s| s));
        assert!(item_seen.iter().all(|&s| s));
        // Roughly the requested density, padded by the forced entries.
        let count = ratings.triples.len() as f64;
        let expected = 0.3 * 30.0 * 18.0;
        assert!(count >= expected * 0.7 && count <= expected * 1.6, "count {count}");

        let again = synthetic_ratings(30, 18, 5, 0.3, 44).unwrap();
        assert_eq!(ratings, again);
        assert!(synthetic_ratings(0, 5, 2, 0.5, 1).is_err());
        assert!(synthetic_ratings(5, 5, 2, 0.0, 1).is_err());

        // The planted table factorizes cleanly enough to build a pool.
        let fact = factorize(&ratings, 6, 200, 9).unwrap();
        assert_eq!(fact.pool.d(), 6);
        assert!(fact.pool.b.dot(&fact.pool.x.t()).iter().all(|&v| v <= 1.0 + 1e-9));
    }

    #[test]
    fn nmf_objective_never_increases() {
        let mut rng = seed::rng(99);
        let mut lines = String::new();
        for user in 0..20 {
            for item in 0..20 {
                if rng.random::<f64>() < 0.5 {
                    let rating = 1 + (rng.random::<f64>() * 5.0) as u8;
                    lines.push_str(&format!(
                        "{}\t{}\t{}\t0\n",
                        user + 1,
                        item + 1,
                        rating.min(5)
                    ));
                }
            }
        }
        let ratings = parse_ratings(&lines).unwrap();
        let fact = factorize(&ratings, 4, 500, 13).unwrap();
        for pair in fact.rating_objective.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-10, "objective rose: {} -> {}", pair[0], pair[1]);
        }
        for pair in fact.preference_objective.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-10);
        }
        // Pool invariants: non-negative features, values in [0,1].
        assert!(fact.pool.x.iter().all(|&v| v >= 0.0));
        assert!(fact.pool.b.iter().all(|&v| v >= 0.0));
        let values = fact.pool.b.dot(&fact.pool.x.t());
        assert!(values.iter().all(|&v| (0.0..=1.0 + 1e-9).contains(&v)));
        assert_eq!(fact.pool.u.ncols(), 2);
        assert_eq!(fact.pool.t.dim(), (2, 4));
        // Rank larger than the matrix is rejected.
        assert!(matches!(factorize(&ratings, 21, 10, 0), Err(Error::Factorization(_))));
    }

    fn small_pool() -> FactorizedPool {
        let mut rng = seed::rng(400);
        let x = Array2::from_shape_fn((12, 6), |_| rng.random::<f64>() * 0.4);
        let b = Array2::from_shape_fn((30, 6), |_| rng.random::<f64>() * 0.4);
        let u = Array2::from_shape_fn((30, 3), |_| rng.random::<f64>());
        let t = Array2::from_shape_fn((3, 6), |_| rng.random::<f64>());
        FactorizedPool { schema_version: 1, x, b, u, t }
    }

    #[test]
    fn sampled_markets_share_items_and_refresh_users() {
        let pool = small_pool();
        let markets = sample_markets(&pool, 5, 8, 4, &PriceScheme::CeMid, 77).unwrap();
        assert_eq!(markets.len(), 4);
        for market in &markets {
            assert_eq!(market.item_features(), markets[0].item_features());
            assert!(market.prices().iter().all(|&p| p.is_finite() && p >= 0.0));
        }
        // Fresh user draws: identical 8-user subsets across two markets are
        // vanishingly unlikely.
        assert_ne!(markets[0].user_features(), markets[1].user_features());

        assert!(sample_markets(&pool, 13, 8, 1, &PriceScheme::CeMid, 0).is_err());
        assert!(sample_markets(&pool, 5, 31, 1, &PriceScheme::CeMid, 0).is_err());
    }

    #[test]
    fn pool_json_round_trips_with_schema_check() {
        let pool = small_pool();
        let text = pool.to_json().unwrap();
        let back = FactorizedPool::from_json(&text).unwrap();
        assert_eq!(pool.x, back.x);
        assert_eq!(pool.t, back.t);
        let bad = text.replace("\"schema_version\":1", "\"schema_version\":9");
        assert!(FactorizedPool::from_json(&bad).is_err());
    }

    #[test]
    fn default_policy_concentrates_on_the_default_mask() {
        let mask = Mask::from_indices(6, &[1, 3, 4]).unwrap();
        let policy = default_policy(&mask);
        let probs = policy.feature_probabilities();
        assert!(probs.iter().all(|&p| p > 0.0));
        policy.validate().unwrap();
        // Logit gap 2 at temperature 0.05: on/off ratio e^40.
        let ratio = probs[1] / probs[0];
        assert!(((ratio.ln()) - 40.0).abs() < 1e-9, "ratio ln {}", ratio.ln());
    }

    #[test]
    fn dataset_sampling_is_reproducible_and_respects_k() {
        let pool = small_pool();
        let markets = sample_markets(&pool, 5, 6, 3, &PriceScheme::CeMid, 8).unwrap();
        let policy = default_policy(&Mask::from_indices(6, &[0, 2, 5]).unwrap());
        let options = DatasetOptions { masks_per_market: 2, propensity_samples: Some(400) };
        let ds1 = sample_dataset(&markets, &policy, 3, &options, 55).unwrap();
        let ds2 = sample_dataset(&markets, &policy, 3, &options, 55).unwrap();
        assert_eq!(ds1.samples.len(), 6);
        for (a, b) in ds1.samples.iter().zip(&ds2.samples) {
            assert_eq!(a.mask, b.mask);
            assert_eq!(a.choices.choices(), b.choices.choices());
            assert_eq!(a.propensity, b.propensity);
            let rho = a.propensity.unwrap();
            assert!(rho > 0.0 && rho <= 1.0);
            assert_eq!(a.mask.k(), 3);
        }
        // k = d always yields the full mask.
        let full = sample_dataset(&markets, &policy, 6, &DatasetOptions::default(), 1).unwrap();
        assert!(full.samples.iter().all(|s| s.mask == Mask::full(6)));
    }

    #[test]
    fn folds_partition_without_overlap() {
        let folds = fold_partition(20, 6, 3).unwrap();
        assert_eq!(folds.len(), 6);
        let mut seen = vec![false; 20];
        for fold in &folds {
            assert!(fold.len() == 3 || fold.len() == 4);
            for &i in fold {
                assert!(!seen[i], "index {i} in two folds");
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
        assert_eq!(fold_partition(20, 6, 3).unwrap(), folds);
        assert_ne!(fold_partition(20, 6, 4).unwrap(), folds);
        assert!(fold_partition(3, 6, 0).is_err());
    }
}
