//! Bilinear choice prediction from revealed choices.
//!
//! The predictor scores item j for user i as s_ij = u_iᵀ W (x_j ⊙ μ) − p_j
//! with a fixed null-option score of 0 (the utility of choosing nothing),
//! turns scores into soft choice distributions with a temperature softmax,
//! and is trained by cross-entropy on observed (market, mask, choices)
//! samples. Also hosts the Monte-Carlo propensity machinery for the
//! feature-sampling policies that generate those masks.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{ChoiceProfile, Market, Mask};
use crate::opt::Adam;
use crate::seed;

/// The bilinear form. Shape d'×d: user features on the left, (masked) item
/// features on the right.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictorWeights {
    pub w: Array2<f64>,
}

impl PredictorWeights {
    pub fn zeros(d_user: usize, d_item: usize) -> Self {
        PredictorWeights { w: Array2::zeros((d_user, d_item)) }
    }

    /// i.i.d. uniform in [−s, s], s = (d·d')^{-1/2}.
    pub fn random_init(d_user: usize, d_item: usize, init_seed: u64) -> Self {
        let s = 1.0 / ((d_user * d_item) as f64).sqrt();
        let mut rng = seed::rng(init_seed);
        PredictorWeights {
            w: Array2::from_shape_fn((d_user, d_item), |_| s * (2.0 * rng.random::<f64>() - 1.0)),
        }
    }
}

/// One observation: which mask was shown on which market, and what every
/// user picked. `propensity` is the behavior policy's probability of the
/// mask, kept for inverse-propensity weighting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChoiceSample {
    pub market_index: usize,
    pub mask: Mask,
    pub choices: ChoiceProfile,
    pub propensity: Option<f64>,
}

/// A pool of markets plus observations over them. All samples share one
/// mask cardinality.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChoiceDataset {
    pub markets: Vec<Market>,
    pub samples: Vec<ChoiceSample>,
}

impl ChoiceDataset {
    pub fn new(markets: Vec<Market>, samples: Vec<ChoiceSample>) -> Result<Self> {
        if markets.is_empty() {
            return Err(Error::EmptyDataset("no markets"));
        }
        let k = samples.first().map(|s| s.mask.k());
        for (idx, s) in samples.iter().enumerate() {
            let market = markets.get(s.market_index).ok_or_else(|| {
                Error::invalid(format!("sample {idx}: market index {} out of range", s.market_index))
            })?;
            if s.mask.d() != market.d() {
                return Err(Error::invalid(format!("sample {idx}: mask dimension mismatch")));
            }
            if Some(s.mask.k()) != k {
                return Err(Error::invalid(format!("sample {idx}: inconsistent mask cardinality")));
            }
            if s.choices.n() != market.n() || s.choices.m() != market.m() {
                return Err(Error::invalid(format!("sample {idx}: choice shape mismatch")));
            }
            if let Some(p) = s.propensity {
                if !(p > 0.0 && p <= 1.0) {
                    return Err(Error::invalid(format!("sample {idx}: propensity {p} out of (0,1]")));
                }
            }
        }
        Ok(ChoiceDataset { markets, samples })
    }

    pub fn k(&self) -> Option<usize> {
        self.samples.first().map(|s| s.mask.k())
    }

    pub fn market_of(&self, sample: &ChoiceSample) -> &Market {
        &self.markets[sample.market_index]
    }
}

/// Class index layout: items 0..m, null option at index m.
pub fn class_of_choice(choice: usize, m: usize) -> usize {
    if choice == 0 {
        m
    } else {
        choice - 1
    }
}

/// Scores for one user: m item scores then the fixed 0 for the null option.
pub fn scores(
    weights: &PredictorWeights,
    market: &Market,
    mask: &Mask,
    user_index: usize,
) -> Result<Vec<f64>> {
    let all = score_matrix(weights, market, mask)?;
    Ok(all.row(user_index).to_vec())
}

/// All users at once: n×(m+1) with the null column last.
pub fn score_matrix(
    weights: &PredictorWeights,
    market: &Market,
    mask: &Mask,
) -> Result<Array2<f64>> {
    if weights.w.nrows() != market.d_user() || weights.w.ncols() != market.d() {
        return Err(Error::ShapeMismatch {
            context: "predictor weights",
            expected: format!("{}x{}", market.d_user(), market.d()),
            got: format!("{}x{}", weights.w.nrows(), weights.w.ncols()),
        });
    }
    let z = mask.masked_features(market.item_features()); // m×d
    let item_scores = market.user_features().dot(&weights.w).dot(&z.t()); // n×m
    let (n, m) = item_scores.dim();
    let mut out = Array2::zeros((n, m + 1));
    for i in 0..n {
        for j in 0..m {
            out[(i, j)] = item_scores[(i, j)] - market.prices()[j];
        }
    }
    Ok(out)
}

/// Row-stochastic soft predictions: softmax(scores/τ_f) per user.
pub fn predict_soft(
    weights: &PredictorWeights,
    market: &Market,
    mask: &Mask,
    temperature: f64,
) -> Result<Array2<f64>> {
    if temperature <= 0.0 {
        return Err(Error::invalid("softmax temperature must be positive"));
    }
    let mut s = score_matrix(weights, market, mask)?;
    for mut row in s.rows_mut() {
        softmax_inplace(row.as_slice_mut().expect("contiguous row"), temperature);
    }
    Ok(s)
}

/// Hard predictions as choice encoding (0 = null, j+1 = item j).
pub fn predict_hard(
    weights: &PredictorWeights,
    market: &Market,
    mask: &Mask,
) -> Result<ChoiceProfile> {
    let s = score_matrix(weights, market, mask)?;
    let m = market.m();
    let choices = s
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = m; // null
            let mut best_v = row[m];
            for (j, &v) in row.iter().enumerate().take(m) {
                if v > best_v {
                    best_v = v;
                    best = j;
                }
            }
            if best == m {
                0
            } else {
                best + 1
            }
        })
        .collect();
    ChoiceProfile::new(choices, m)
}

fn softmax_inplace(row: &mut [f64], temperature: f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = ((*v - max) / temperature).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Softmax temperature of the training loss.
    pub temperature: f64,
    /// Weight samples by inverse behavior-policy propensity.
    pub ipw: bool,
    pub seed: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            learning_rate: 1e-3,
            epochs: 150,
            batch_size: 20,
            temperature: 5e-4,
            ipw: false,
            seed: 0,
        }
    }
}

/// Weights plus the per-epoch mean training loss curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainedPredictor {
    pub weights: PredictorWeights,
    pub epoch_losses: Vec<f64>,
}

/// Minimize (optionally propensity-weighted) cross-entropy of the soft
/// predictions against observed choices with mini-batch Adam.
pub fn train(dataset: &ChoiceDataset, config: &PredictorConfig) -> Result<TrainedPredictor> {
    if dataset.samples.is_empty() {
        return Err(Error::EmptyDataset("choice training set"));
    }
    if config.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let d_user = dataset.markets[0].d_user();
    let d_item = dataset.markets[0].d();

    // Mean-normalized inverse propensities; uniform when IPW is off.
    let sample_weights: Vec<f64> = if config.ipw {
        let raw: Vec<f64> = dataset
            .samples
            .iter()
            .map(|s| {
                s.propensity
                    .map(|p| 1.0 / p)
                    .ok_or(Error::invalid("ipw requires propensities on every sample"))
            })
            .collect::<Result<_>>()?;
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        raw.into_iter().map(|w| w / mean).collect()
    } else {
        vec![1.0; dataset.samples.len()]
    };

    let mut weights = PredictorWeights::random_init(
        d_user,
        d_item,
        seed::derive_seed(config.seed, "predictor-init", 0),
    );
    let mut adam = Adam::new(config.learning_rate, d_user * d_item);
    let mut order: Vec<usize> = (0..dataset.samples.len()).collect();
    let mut shuffle_rng = seed::rng(seed::derive_seed(config.seed, "predictor-shuffle", 0));
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        // Fisher-Yates with the epoch-persistent stream.
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut epoch_users = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grad = Array2::<f64>::zeros((d_user, d_item));
            let mut batch_loss = 0.0;
            for &idx in batch {
                let sample = &dataset.samples[idx];
                let market = dataset.market_of(sample);
                let (loss, g) = sample_loss_grad(&weights, market, sample, config.temperature)?;
                let w = sample_weights[idx];
                batch_loss += w * loss;
                grad.scaled_add(w / batch.len() as f64, &g);
                epoch_loss += w * loss * market.n() as f64;
                epoch_users += market.n() as f64;
            }
            if !batch_loss.is_finite() {
                return Err(Error::TrainingAborted(format!(
                    "non-finite choice loss at epoch {epoch}"
                )));
            }
            adam.step(
                weights.w.as_slice_mut().expect("contiguous weights"),
                grad.as_slice().expect("contiguous grad"),
            );
        }
        epoch_losses.push(epoch_loss / epoch_users);
    }
    Ok(TrainedPredictor { weights, epoch_losses })
}

/// Mean per-user cross-entropy of one sample and its gradient in W.
fn sample_loss_grad(
    weights: &PredictorWeights,
    market: &Market,
    sample: &ChoiceSample,
    temperature: f64,
) -> Result<(f64, Array2<f64>)> {
    let n = market.n();
    let m = market.m();
    let z = sample.mask.masked_features(market.item_features());
    let probs = predict_soft(weights, market, &sample.mask, temperature)?;
    let mut loss = 0.0;
    // dL/ds_ij = (q_ij − 1[y_i = j]) / (τ_f · n) for item classes; the null
    // score is constant so its column never reaches W.
    let mut delta = Array2::<f64>::zeros((n, m));
    for i in 0..n {
        let target = class_of_choice(sample.choices.choices()[i], m);
        loss -= probs[(i, target)].max(1e-300).ln();
        for j in 0..m {
            let indicator = if j == target { 1.0 } else { 0.0 };
            delta[(i, j)] = (probs[(i, j)] - indicator) / (temperature * n as f64);
        }
    }
    let grad = market.user_features().t().dot(&delta).dot(&z); // d'×d
    Ok((loss / n as f64, grad))
}

/// Fraction of users whose hard prediction matches the observed choice,
/// over every sample in the dataset.
pub fn accuracy(weights: &PredictorWeights, dataset: &ChoiceDataset) -> Result<f64> {
    if dataset.samples.is_empty() {
        return Err(Error::EmptyDataset("accuracy evaluation set"));
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for sample in &dataset.samples {
        let market = dataset.market_of(sample);
        let predicted = predict_hard(weights, market, &sample.mask)?;
        for (p, y) in predicted.choices().iter().zip(sample.choices.choices()) {
            hits += (p == y) as usize;
            total += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}

/// Draw a k-subset by sequential softmax sampling without replacement:
/// at each step pick among remaining features with probability
/// softmax(θ restricted to remaining).
pub fn sample_subset_sequential(theta: &[f64], k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let d = theta.len();
    assert!(k <= d, "cannot draw {k} of {d}");
    let mut remaining: Vec<usize> = (0..d).collect();
    let mut picked = Vec::with_capacity(k);
    for _ in 0..k {
        let max = remaining.iter().map(|&i| theta[i]).fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = remaining.iter().map(|&i| (theta[i] - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut chosen = remaining.len() - 1;
        for (slot, w) in weights.iter().enumerate() {
            if u < *w {
                chosen = slot;
                break;
            }
            u -= w;
        }
        picked.push(remaining.swap_remove(chosen));
    }
    picked.sort_unstable();
    picked
}

/// Monte-Carlo probability that sequential sampling under θ yields exactly
/// this mask.
pub fn mask_probability(mask: &Mask, theta: &[f64], mc_samples: usize, mc_seed: u64) -> Result<f64> {
    if theta.len() != mask.d() {
        return Err(Error::ShapeMismatch {
            context: "policy logits",
            expected: format!("{}", mask.d()),
            got: format!("{}", theta.len()),
        });
    }
    let target = mask.on_indices();
    let mut rng = seed::rng(mc_seed);
    let mut hits = 0usize;
    for _ in 0..mc_samples {
        if sample_subset_sequential(theta, mask.k(), &mut rng) == target {
            hits += 1;
        }
    }
    Ok(hits as f64 / mc_samples as f64)
}

/// Importance ratio P_target(μ)/P_behavior(μ), both estimated by
/// `mc_samples` Monte-Carlo draws. A zero behavior estimate is an error:
/// the behavior policy must have full support.
pub fn propensity_ratio(
    mask: &Mask,
    theta_target: &[f64],
    theta_behavior: &[f64],
    mc_samples: usize,
    mc_seed: u64,
) -> Result<f64> {
    let p_target = mask_probability(mask, theta_target, mc_samples, seed::derive_seed(mc_seed, "propensity-target", 0))?;
    let p_behavior = mask_probability(mask, theta_behavior, mc_samples, seed::derive_seed(mc_seed, "propensity-behavior", 0))?;
    if p_behavior == 0.0 {
        return Err(Error::Degenerate(
            "behavior policy probability estimated at zero; cannot form the importance ratio".into(),
        ));
    }
    Ok(p_target / p_behavior)
}
