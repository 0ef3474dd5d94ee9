//! Decongestion-by-representation: learning a feature-mask distribution.
//!
//! Instead of searching the combinatorial space of k-hot masks directly, we
//! learn a distribution π_θ over features and optimize θ by stochastic
//! gradient ascent on a differentiable surrogate of the proxy welfare. Masks
//! are drawn with the Gumbel top-k trick and relaxed through successive
//! tempered-softmax selection rounds, the frozen choice predictor supplies
//! soft demand, and the λ-combined objective (selection revenue minus
//! congestion and no-choice penalties) is averaged over masks and markets.
//! With the Gumbel noise reparametrized out of the sampling process the whole
//! estimator is a deterministic differentiable function of θ, and exact
//! gradients come off the reverse-mode tape in [`crate::tape`].

use std::sync::Arc;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{self, Impute, Market, Mask};
use crate::objectives;
use crate::opt::Adam;
use crate::predictor::{self, PredictorWeights};
use crate::seed;
use crate::tape::{softmax_tempered, NodeId, Tape};

/// Tolerance on Σ weights = k for relaxed masks.
pub const SOFT_MASK_SUM_TOL: f64 = 1e-6;

/// Multinomial feature-selection distribution: weight θ_r per feature,
/// selection probabilities softmax(θ/τ).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskDistribution {
    theta: Vec<f64>,
    temperature: f64,
}

impl MaskDistribution {
    pub fn new(theta: Vec<f64>, temperature: f64) -> Result<Self> {
        if theta.is_empty() {
            return Err(Error::invalid("mask distribution needs at least one feature"));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mask distribution parameters"));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::invalid("distribution temperature must be positive"));
        }
        Ok(MaskDistribution { theta, temperature })
    }

    /// Uniform distribution over d features (θ = 0, τ = 1).
    pub fn uniform(d: usize) -> Self {
        MaskDistribution { theta: vec![0.0; d], temperature: 1.0 }
    }

    pub fn d(&self) -> usize {
        self.theta.len()
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    /// Feature-selection probabilities softmax(θ/τ); sums to 1.
    pub fn probabilities(&self) -> Vec<f64> {
        softmax_tempered(&self.theta, self.temperature)
    }
}

/// Relaxed k-hot mask: entries in [0,1].
///
/// The un-clipped selection rounds always distribute exactly k units of mass
/// (each round's soft selection sums to 1), but at moderate temperatures a
/// dominant feature can be re-selected across rounds and accumulate more
/// than a unit; clipping then sheds the excess. So Σ weights ≤ k always,
/// with equality whenever no entry saturated — in particular in the
/// τ_topk → 0 limit. [`SoftMask::budget_deficit`] reports the shed mass.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SoftMask {
    weights: Vec<f64>,
    k: usize,
}

impl SoftMask {
    /// Build from already-clipped weights; the full budget must be present.
    pub fn new(weights: Vec<f64>, k: usize) -> Result<Self> {
        let mask = SoftMask::from_rounds(weights, k)?;
        if mask.budget_deficit() > SOFT_MASK_SUM_TOL {
            return Err(Error::invalid(format!(
                "soft mask weights sum to {}, expected {k}",
                k as f64 - mask.budget_deficit()
            )));
        }
        Ok(mask)
    }

    /// Build from raw selection-round accumulations: validates that the
    /// pre-clip mass equals k, then clips entries to [0,1].
    pub fn from_rounds(mut raw: Vec<f64>, k: usize) -> Result<Self> {
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("soft mask weights"));
        }
        if raw.iter().any(|&v| v < -1e-9) {
            return Err(Error::invalid("soft mask weights must be nonnegative"));
        }
        let sum: f64 = raw.iter().sum();
        if (sum - k as f64).abs() > SOFT_MASK_SUM_TOL {
            return Err(Error::invalid(format!(
                "relaxed selection rounds produced total mass {sum}, expected {k}"
            )));
        }
        for w in &mut raw {
            *w = w.clamp(0.0, 1.0);
        }
        Ok(SoftMask { weights: raw, k })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Mass shed by clipping: k − Σ weights (zero when nothing saturated).
    pub fn budget_deficit(&self) -> f64 {
        self.k as f64 - self.weights.iter().sum::<f64>()
    }

    /// Hard mask of the k largest weights (ties broken by lowest index).
    pub fn hardened(&self) -> Result<Mask> {
        Mask::from_indices(self.weights.len(), &top_indices(&self.weights, self.k))
    }
}

/// Trainer hyperparameters. `new` fills in the published defaults; all
/// fields are public so callers (and the CLI, whose flags mirror these keys)
/// can override any of them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearnerConfig {
    /// Mask cardinality to deploy.
    pub k: usize,
    /// Trade-off weight on congestion + no-choice vs selection revenue.
    pub lambda: f64,
    /// Masks sampled per optimizer step; shared across all markets.
    pub masks_per_step: usize,
    /// Scale on the Gumbel perturbations.
    pub tau_gumbel: f64,
    /// Temperature of each top-k selection round.
    pub tau_topk: f64,
    /// Temperature of the soft choice predictions.
    pub tau_f: f64,
    /// Softmax temperature of the mask distribution itself.
    pub dist_temperature: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// When k > d/2, learn the (d−k)-hot complement and invert at the end.
    pub invert_when_k_large: bool,
    /// Fixed held-out noise draws for the evaluation-mode objective.
    pub eval_draws: usize,
    /// Log an evaluation-mode value every this many epochs.
    pub eval_every: usize,
    pub seed: u64,
}

impl LearnerConfig {
    pub fn new(k: usize, lambda: f64) -> Self {
        LearnerConfig {
            k,
            lambda,
            masks_per_step: 20,
            tau_gumbel: 2.0,
            tau_topk: 0.2,
            tau_f: 0.01,
            dist_temperature: 1.0,
            learning_rate: 1e-2,
            epochs: 300,
            invert_when_k_large: true,
            eval_draws: 64,
            eval_every: 10,
            seed: 0,
        }
    }

    fn validate(&self, d: usize) -> Result<()> {
        if self.k == 0 || self.k > d {
            return Err(Error::invalid(format!(
                "mask cardinality k={} must satisfy 1 <= k <= d={d}",
                self.k
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid("lambda must lie in [0, 1]"));
        }
        if self.masks_per_step == 0 || self.eval_draws == 0 || self.eval_every == 0 {
            return Err(Error::invalid("sample counts must be positive"));
        }
        for (name, t) in [
            ("tau_gumbel", self.tau_gumbel),
            ("tau_topk", self.tau_topk),
            ("tau_f", self.tau_f),
            ("dist_temperature", self.dist_temperature),
        ] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        Ok(())
    }
}

/// `draws` rows of d i.i.d. standard Gumbel variates from a seeded stream.
pub fn gumbel_noise(d: usize, draws: usize, noise_seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seed::rng(noise_seed);
    let gumbel = Gumbel::new(0.0, 1.0).expect("unit Gumbel is well-formed");
    (0..draws)
        .map(|_| (0..d).map(|_| gumbel.sample(&mut rng)).collect())
        .collect()
}

/// Relaxed-mask subgraph handles: the usable mask node plus the raw
/// pre-clip accumulation (whose mass is exactly the round count).
struct MaskNodes {
    mask: NodeId,
    raw: NodeId,
}

/// Builds the relaxed-mask subgraph on `tape`: perturbed log-probabilities,
/// `rounds` tempered selection rounds with log(1−α) suppression, accumulation
/// clipped to [0,1], and optional inversion.
fn relaxed_mask_node(
    tape: &mut Tape,
    theta_node: NodeId,
    noise: &[f64],
    rounds: usize,
    dist_temperature: f64,
    tau_gumbel: f64,
    tau_topk: f64,
    invert: bool,
) -> MaskNodes {
    debug_assert!(rounds >= 1);
    let probs = tape.softmax(theta_node, dist_temperature);
    let log_probs = tape.log(probs);
    let shift = Arc::new(noise.iter().map(|&g| tau_gumbel * g).collect::<Vec<_>>());
    let mut scores = tape.add_const_vec(log_probs, shift);
    let mut acc: Option<NodeId> = None;
    for round in 0..rounds {
        let alpha = tape.softmax(scores, tau_topk);
        acc = Some(match acc {
            None => alpha,
            Some(prev) => tape.add_vec(prev, alpha),
        });
        if round + 1 < rounds {
            let suppression = tape.log1m_clamped(alpha);
            scores = tape.add_vec(scores, suppression);
        }
    }
    let raw = acc.expect("at least one round");
    let clipped = tape.clamp_unit(raw);
    let mask = if invert { tape.one_minus(clipped) } else { clipped };
    MaskNodes { mask, raw }
}

/// One relaxed mask from π_θ via the Gumbel top-k construction.
///
/// Perturbed scores r = log softmax_τ(θ) + τ_gumbel·g are pushed through k
/// successive softmax(r̃/τ_topk) selection rounds, each suppressing its own
/// selected mass; the accumulated selections, clipped to [0,1], form the
/// mask. As τ_topk → 0 this recovers the exact k-hot top-k of r; k = d
/// short-circuits to the all-ones mask (the only k-subset).
pub fn sample_relaxed_mask(
    dist: &MaskDistribution,
    k: usize,
    tau_gumbel: f64,
    tau_topk: f64,
    noise_seed: u64,
) -> Result<SoftMask> {
    let d = dist.d();
    if k > d {
        return Err(Error::invalid(format!("k={k} exceeds feature count d={d}")));
    }
    if !(tau_gumbel > 0.0 && tau_topk > 0.0) {
        return Err(Error::invalid("relaxation temperatures must be positive"));
    }
    if k == d {
        return SoftMask::new(vec![1.0; d], k);
    }
    if k == 0 {
        return SoftMask::new(vec![0.0; d], 0);
    }
    let noise = gumbel_noise(d, 1, noise_seed);
    let mut tape = Tape::new();
    let theta_node = tape.input(dist.theta().to_vec());
    let nodes = relaxed_mask_node(
        &mut tape,
        theta_node,
        &noise[0],
        k,
        dist.temperature(),
        tau_gumbel,
        tau_topk,
        false,
    );
    SoftMask::from_rounds(tape.value(nodes.raw).to_vec(), k)
}

/// Per-market constants of the soft objective, precomputed once.
struct MarketTerms {
    /// (n·m)×d coefficients: row (i,j) is (u_i W) ⊙ x_j, so scores = C·mask − p.
    coeff: Arc<Array2<f64>>,
    neg_prices: Arc<Vec<f64>>,
    /// Price weights over the n×(m+1) soft predictions (0 on the null column).
    selection_w: Arc<Vec<f64>>,
    /// Indicator of the null column.
    null_w: Arc<Vec<f64>>,
    n: usize,
    m: usize,
}

/// Value, exact gradient, and per-draw values of the soft proxy estimator.
#[derive(Debug, Clone)]
pub struct SoftEval {
    pub value: f64,
    pub grad: Vec<f64>,
    /// Objective of each noise draw (averaged over markets); useful for
    /// Monte Carlo standard errors.
    pub per_draw: Vec<f64>,
}

/// The differentiable proxy objective for a fixed set of markets and a
/// frozen predictor. Reusable across evaluations; each call rebuilds the
/// (static-topology) tape with fresh values.
pub struct SoftObjective {
    terms: Vec<MarketTerms>,
    d: usize,
    /// Selection rounds actually run: k, or d−k when inverted, or 0 for the
    /// constant all-ones mask at k = d.
    rounds: usize,
    inverted: bool,
    lambda: f64,
    dist_temperature: f64,
    tau_gumbel: f64,
    tau_topk: f64,
    tau_f: f64,
}

impl SoftObjective {
    pub fn new(
        markets: &[Market],
        weights: &PredictorWeights,
        config: &LearnerConfig,
    ) -> Result<Self> {
        if markets.is_empty() {
            return Err(Error::EmptyDataset("soft objective needs at least one market"));
        }
        let d = markets[0].d();
        config.validate(d)?;
        let mut terms = Vec::with_capacity(markets.len());
        for market in markets {
            if market.d() != d {
                return Err(Error::ShapeMismatch {
                    context: "soft objective markets",
                    expected: format!("d={d}"),
                    got: format!("d={}", market.d()),
                });
            }
            if weights.w.nrows() != market.d_user() || weights.w.ncols() != d {
                return Err(Error::ShapeMismatch {
                    context: "predictor weights for soft objective",
                    expected: format!("{}x{}", market.d_user(), d),
                    got: format!("{}x{}", weights.w.nrows(), weights.w.ncols()),
                });
            }
            let (n, m) = (market.n(), market.m());
            let a = market.user_features().dot(&weights.w); // n×d
            let x = market.item_features();
            let coeff = Array2::from_shape_fn((n * m, d), |(row, l)| {
                a[(row / m, l)] * x[(row % m, l)]
            });
            let prices = market.prices();
            let neg_prices = (0..n * m).map(|idx| -prices[idx % m]).collect();
            let selection_w = (0..n * (m + 1))
                .map(|idx| {
                    let col = idx % (m + 1);
                    if col < m {
                        prices[col]
                    } else {
                        0.0
                    }
                })
                .collect();
            let null_w = (0..n * (m + 1))
                .map(|idx| if idx % (m + 1) == m { 1.0 } else { 0.0 })
                .collect();
            terms.push(MarketTerms {
                coeff: Arc::new(coeff),
                neg_prices: Arc::new(neg_prices),
                selection_w: Arc::new(selection_w),
                null_w: Arc::new(null_w),
                n,
                m,
            });
        }
        let complement = d - config.k;
        let inverted = config.invert_when_k_large && config.k > complement && config.k < d;
        let rounds = if config.k == d {
            0
        } else if inverted {
            complement
        } else {
            config.k
        };
        Ok(SoftObjective {
            terms,
            d,
            rounds,
            inverted,
            lambda: config.lambda,
            dist_temperature: config.dist_temperature,
            tau_gumbel: config.tau_gumbel,
            tau_topk: config.tau_topk,
            tau_f: config.tau_f,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Whether θ parametrizes the hidden-feature complement.
    pub fn inverted(&self) -> bool {
        self.inverted
    }

    /// Forward value and exact reverse-mode gradient under fixed Gumbel noise
    /// (one length-d row per mask draw).
    pub fn eval(&self, theta: &[f64], noise: &[Vec<f64>]) -> Result<SoftEval> {
        if theta.len() != self.d {
            return Err(Error::ShapeMismatch {
                context: "soft objective parameters",
                expected: format!("{}", self.d),
                got: format!("{}", theta.len()),
            });
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("soft objective parameters"));
        }
        if noise.is_empty() {
            return Err(Error::invalid("soft objective needs at least one noise draw"));
        }
        let draws: Vec<(f64, Vec<f64>)> = noise
            .par_iter()
            .map(|g| self.eval_one_draw(theta, g))
            .collect::<Result<Vec<_>>>()?;
        // Serial reduction in draw order keeps results bit-reproducible.
        let count = draws.len() as f64;
        let mut grad = vec![0.0; self.d];
        let mut per_draw = Vec::with_capacity(draws.len());
        for (value, g) in &draws {
            per_draw.push(*value);
            for (acc, &gi) in grad.iter_mut().zip(g) {
                *acc += gi;
            }
        }
        for gi in &mut grad {
            *gi /= count;
        }
        let value = per_draw.iter().sum::<f64>() / count;
        if !value.is_finite() {
            return Err(Error::NonFinite("soft proxy forward value"));
        }
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("soft proxy gradient"));
        }
        Ok(SoftEval { value, grad, per_draw })
    }

    fn eval_one_draw(&self, theta: &[f64], noise: &[f64]) -> Result<(f64, Vec<f64>)> {
        if noise.len() != self.d {
            return Err(Error::ShapeMismatch {
                context: "gumbel noise draw",
                expected: format!("{}", self.d),
                got: format!("{}", noise.len()),
            });
        }
        let mut tape = Tape::new();
        let theta_node = tape.input(theta.to_vec());
        let mask = if self.rounds == 0 {
            tape.constant(vec![1.0; self.d])
        } else {
            relaxed_mask_node(
                &mut tape,
                theta_node,
                noise,
                self.rounds,
                self.dist_temperature,
                self.tau_gumbel,
                self.tau_topk,
                self.inverted,
            )
            .mask
        };
        let market_weight = 1.0 / self.terms.len() as f64;
        let mut combined = Vec::with_capacity(self.terms.len());
        for t in &self.terms {
            let mv = tape.mat_vec(t.coeff.clone(), mask);
            let scores = tape.add_const_vec(mv, t.neg_prices.clone());
            let soft = tape.softmax_rows_with_null(scores, t.n, t.m, self.tau_f);
            let selection = tape.dot(soft, t.selection_w.clone());
            let demand = tape.col_sums_drop_last(soft, t.n, t.m + 1);
            let excess = tape.add_scalar_to_all(demand, -1.0);
            let over = tape.relu(excess);
            let decongestion = tape.sum(over);
            let no_choice = tape.dot(soft, t.null_w.clone());
            let market_obj = tape.affine(
                vec![
                    (selection, 1.0 - self.lambda),
                    (decongestion, -self.lambda),
                    (no_choice, -self.lambda),
                ],
                0.0,
            );
            combined.push((market_obj, market_weight));
        }
        let root = tape.affine(combined, 0.0);
        let value = tape.scalar(root);
        if !value.is_finite() {
            return Err(Error::NonFinite("soft proxy forward value"));
        }
        let grad = tape.gradient(root, theta_node);
        Ok((value, grad))
    }
}

/// One-shot estimator: the soft proxy value and gradient at θ, with the
/// Gumbel noise drawn from `config.seed` (so repeated calls with the same
/// config are a fixed deterministic function of θ).
pub fn soft_proxy(
    theta: &[f64],
    markets: &[Market],
    weights: &PredictorWeights,
    config: &LearnerConfig,
) -> Result<SoftEval> {
    let objective = SoftObjective::new(markets, weights, config)?;
    let noise = gumbel_noise(
        objective.d(),
        config.masks_per_step,
        seed::derive_seed(config.seed, "soft-proxy-noise", 0),
    );
    objective.eval(theta, &noise)
}

/// One row of the training log.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LogEntry {
    pub epoch: usize,
    /// Pre-step objective on this epoch's noise batch (absent on the final
    /// post-training row).
    pub train_objective: Option<f64>,
    /// Evaluation-mode objective on the fixed held-out noise set.
    pub eval_objective: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct TrainingLog {
    pub entries: Vec<LogEntry>,
}

impl TrainingLog {
    /// Evaluation-mode value at initialization.
    pub fn first_eval(&self) -> Option<f64> {
        self.entries.iter().find_map(|e| e.eval_objective)
    }

    /// Evaluation-mode value after the last step.
    pub fn final_eval(&self) -> Option<f64> {
        self.entries.iter().rev().find_map(|e| e.eval_objective)
    }
}

/// Learned mask policy: the fitted distribution plus enough context to
/// sample and harden masks of the requested cardinality.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearnedPolicy {
    pub distribution: MaskDistribution,
    /// Deployed mask cardinality.
    pub k: usize,
    /// When true θ scores features to HIDE (d−k selected internally) and
    /// every produced mask is the complement of the internal selection.
    pub inverted: bool,
    pub tau_gumbel: f64,
}

impl LearnedPolicy {
    pub fn d(&self) -> usize {
        self.distribution.d()
    }

    fn internal_count(&self) -> usize {
        if self.inverted {
            self.d() - self.k
        } else {
            self.k
        }
    }

    /// Deterministic mask of the k largest (or, inverted, complement of the
    /// d−k largest) θ entries; ties broken by lowest index.
    pub fn top_k_mask(&self) -> Result<Mask> {
        let inner = Mask::from_indices(
            self.d(),
            &top_indices(self.distribution.theta(), self.internal_count()),
        )?;
        Ok(if self.inverted { inner.complement() } else { inner })
    }

    /// Hard mask drawn from π_θ̂ (Gumbel top-k on the perturbed scores, the
    /// exact-zero-temperature limit of the training-time relaxation).
    pub fn sample_mask(&self, rng: &mut ChaCha8Rng) -> Result<Mask> {
        let probs = self.distribution.probabilities();
        let gumbel = Gumbel::new(0.0, 1.0).expect("unit Gumbel is well-formed");
        let scores: Vec<f64> = probs
            .iter()
            .map(|&p| p.ln() + self.tau_gumbel * gumbel.sample(rng))
            .collect();
        let inner = Mask::from_indices(self.d(), &top_indices(&scores, self.internal_count()))?;
        Ok(if self.inverted { inner.complement() } else { inner })
    }
}

/// Indices of the `count` largest values, ties broken by lowest index.
fn top_indices(values: &[f64], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    order.truncate(count);
    order
}

/// Result of [`fit`]: the learned policy and its training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub policy: LearnedPolicy,
    pub log: TrainingLog,
}

/// Adam ascent on the soft proxy. Each epoch samples `masks_per_step` fresh
/// Gumbel draws (shared across all markets), takes one step, and logs the
/// pre-step batch objective; evaluation-mode values on a fixed 64-draw noise
/// set are logged every `eval_every` epochs and after the final step. When
/// k > d/2 and inversion is enabled, training runs on the (d−k)-complement
/// parametrization and the returned policy carries inverted semantics.
pub fn fit(
    markets: &[Market],
    weights: &PredictorWeights,
    config: &LearnerConfig,
) -> Result<FitResult> {
    let objective = SoftObjective::new(markets, weights, config)?;
    let d = objective.d();
    let eval_noise = gumbel_noise(
        d,
        config.eval_draws,
        seed::derive_seed(config.seed, "learner-eval-noise", 0),
    );
    let mut theta = vec![0.0; d];
    let mut adam = Adam::new(config.learning_rate, d);
    let mut entries = Vec::with_capacity(config.epochs + 1);
    for epoch in 0..config.epochs {
        let noise = gumbel_noise(
            d,
            config.masks_per_step,
            seed::derive_seed(config.seed, "learner-noise", epoch as u64 + 1),
        );
        let batch = objective.eval(&theta, &noise)?;
        let eval_objective = if epoch % config.eval_every == 0 {
            Some(objective.eval(&theta, &eval_noise)?.value)
        } else {
            None
        };
        entries.push(LogEntry {
            epoch,
            train_objective: Some(batch.value),
            eval_objective,
        });
        adam.step_ascent(&mut theta, &batch.grad);
    }
    entries.push(LogEntry {
        epoch: config.epochs,
        train_objective: None,
        eval_objective: Some(objective.eval(&theta, &eval_noise)?.value),
    });
    let policy = LearnedPolicy {
        distribution: MaskDistribution::new(theta, config.dist_temperature)?,
        k: config.k,
        inverted: objective.inverted(),
        tau_gumbel: config.tau_gumbel,
    };
    Ok(FitResult { policy, log: TrainingLog { entries } })
}

/// Test-time variants of the learned policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DeployMode {
    /// Commit to the k largest θ̂ entries.
    TopK,
    /// Draw masks and commit to the one with the best proxy objective on the
    /// training markets.
    CommittedSample { draws: usize },
    /// Keep sampling masks at test time; report the mean over draws.
    Policy { draws: usize },
}

impl DeployMode {
    pub fn committed_sample() -> Self {
        DeployMode::CommittedSample { draws: 20 }
    }

    pub fn policy() -> Self {
        DeployMode::Policy { draws: 50 }
    }
}

/// Choice model used to score committed-sample candidates.
pub enum ChoiceModel<'a> {
    /// Hard argmax predictions from trained predictor weights.
    Predictor(&'a PredictorWeights),
    /// True preference-driven choices (zero imputation).
    Truth,
}

impl ChoiceModel<'_> {
    fn choices(&self, market: &Market, mask: &Mask) -> Result<crate::market::ChoiceProfile> {
        match self {
            ChoiceModel::Predictor(w) => predictor::predict_hard(w, market, mask),
            ChoiceModel::Truth => market::choose(market, mask, Impute::Zero),
        }
    }
}

/// Outcome of deploying a learned policy on evaluation markets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeployReport {
    pub mode: DeployMode,
    /// Masks evaluated (a single mask for top-k).
    pub masks: Vec<Mask>,
    /// Mean true welfare of each mask across the evaluation markets.
    pub mask_welfare: Vec<f64>,
    /// Proxy score of each candidate on the training markets
    /// (committed-sample mode only).
    pub mask_proxy: Option<Vec<f64>>,
    /// Committed mask (absent in policy mode).
    pub chosen: Option<Mask>,
    /// Headline welfare: the committed mask's, or the mean over draws.
    pub welfare: f64,
}

fn mean_true_welfare(markets: &[Market], mask: &Mask) -> Result<f64> {
    let mut total = 0.0;
    for market in markets {
        total += market::mask_outcome(market, mask, Impute::Zero)?.welfare;
    }
    Ok(total / markets.len() as f64)
}

/// Evaluate a learned policy on held-out markets under the chosen test-time
/// variant. `train_markets` scores committed-sample candidates (falling back
/// to the evaluation markets when empty); `lambda` weights the proxy there.
pub fn deploy(
    policy: &LearnedPolicy,
    mode: DeployMode,
    eval_markets: &[Market],
    train_markets: &[Market],
    choice_model: &ChoiceModel<'_>,
    lambda: f64,
    deploy_seed: u64,
) -> Result<DeployReport> {
    if eval_markets.is_empty() {
        return Err(Error::EmptyDataset("deploy needs at least one evaluation market"));
    }
    match mode {
        DeployMode::TopK => {
            let mask = policy.top_k_mask()?;
            let welfare = mean_true_welfare(eval_markets, &mask)?;
            Ok(DeployReport {
                mode,
                masks: vec![mask.clone()],
                mask_welfare: vec![welfare],
                mask_proxy: None,
                chosen: Some(mask),
                welfare,
            })
        }
        DeployMode::CommittedSample { draws } => {
            if draws == 0 {
                return Err(Error::invalid("committed-sample mode needs at least one draw"));
            }
            let scoring = if train_markets.is_empty() { eval_markets } else { train_markets };
            let mut rng = seed::rng(seed::derive_seed(deploy_seed, "deploy-committed", 0));
            let mut masks = Vec::with_capacity(draws);
            let mut proxies = Vec::with_capacity(draws);
            let mut welfares = Vec::with_capacity(draws);
            for _ in 0..draws {
                let mask = policy.sample_mask(&mut rng)?;
                let mut proxy_total = 0.0;
                for market in scoring {
                    let choices = choice_model.choices(market, &mask)?;
                    proxy_total += objectives::proxy(market.prices(), &choices, lambda)?.combined;
                }
                proxies.push(proxy_total / scoring.len() as f64);
                welfares.push(mean_true_welfare(eval_markets, &mask)?);
                masks.push(mask);
            }
            let best = proxies
                .iter()
                .enumerate()
                .max_by(|(ia, a), (ib, b)| {
                    a.partial_cmp(b).expect("finite proxy").then(ib.cmp(ia))
                })
                .map(|(i, _)| i)
                .expect("at least one draw");
            Ok(DeployReport {
                mode,
                chosen: Some(masks[best].clone()),
                welfare: welfares[best],
                masks,
                mask_welfare: welfares.clone(),
                mask_proxy: Some(proxies),
            })
        }
        DeployMode::Policy { draws } => {
            if draws == 0 {
                return Err(Error::invalid("policy mode needs at least one draw"));
            }
            let mut rng = seed::rng(seed::derive_seed(deploy_seed, "deploy-policy", 0));
            let mut masks = Vec::with_capacity(draws);
            let mut welfares = Vec::with_capacity(draws);
            for _ in 0..draws {
                let mask = policy.sample_mask(&mut rng)?;
                welfares.push(mean_true_welfare(eval_markets, &mask)?);
                masks.push(mask);
            }
            let welfare = welfares.iter().sum::<f64>() / draws as f64;
            Ok(DeployReport {
                mode,
                masks,
                mask_welfare: welfares,
                mask_proxy: None,
                chosen: None,
                welfare,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats;
    use ndarray::{array, Array1};

    /// Two users, two items, d = 2. Revealing feature 1 alone spreads the
    /// users across both items (selection 0.22, no congestion); feature 2
    /// alone sends both users to item 2 (congested, zero selection).
    fn toy_market() -> (Market, PredictorWeights) {
        let x = array![[1.0, 0.8], [0.5, 0.79]];
        let b = array![[0.35, 0.2], [0.55, 0.35]];
        let prices = Array1::from_vec(vec![0.22, 0.0]);
        // Users' observable features are their preference vectors, so the
        // identity weight matrix makes predictor scores the true utilities.
        let market = Market::new(x, prices, b.clone(), Some(b)).unwrap();
        let weights = PredictorWeights { w: Array2::eye(2) };
        (market, weights)
    }

    fn random_market(n: usize, m: usize, d: usize, d_user: usize, seed_v: u64) -> Market {
        use rand::Rng;
        let mut rng = seed::rng(seed_v);
        let x = Array2::from_shape_fn((m, d), |_| rng.random::<f64>() * 0.5);
        let b = Array2::from_shape_fn((n, d), |_| rng.random::<f64>() * 0.3 / d as f64 * 2.0);
        let u = Array2::from_shape_fn((n, d_user), |_| rng.random::<f64>());
        let prices = Array1::from_shape_fn(m, |_| rng.random::<f64>() * 0.3);
        Market::new(x, prices, u, Some(b)).unwrap()
    }

    #[test]
    fn relaxed_mask_at_low_temperature_is_k_hot_of_perturbed_scores() {
        let dist = MaskDistribution::new(vec![0.4, -0.8, 1.2, 0.0, -0.3, 0.6], 1.0).unwrap();
        let (k, tau_gumbel, noise_seed) = (3, 2.0, 7u64);
        let soft = sample_relaxed_mask(&dist, k, tau_gumbel, 1e-4, noise_seed).unwrap();

        // Oracle: recompute the perturbed scores and take the hard top-k.
        let gumbel = Gumbel::new(0.0, 1.0).unwrap();
        let mut rng = seed::rng(noise_seed);
        let probs = dist.probabilities();
        let r: Vec<f64> = probs
            .iter()
            .map(|&p| p.ln() + tau_gumbel * gumbel.sample(&mut rng))
            .collect();
        let top = top_indices(&r, k);
        for (i, &w) in soft.weights().iter().enumerate() {
            let expect = if top.contains(&i) { 1.0 } else { 0.0 };
            assert!(
                (w - expect).abs() < 1e-6,
                "entry {i}: {w} vs {expect} (top = {top:?})"
            );
        }
    }

    #[test]
    fn full_cardinality_mask_is_all_ones_for_any_theta() {
        for theta in [vec![0.0; 5], vec![3.0, -2.0, 0.5, 8.0, -4.0]] {
            let dist = MaskDistribution::new(theta, 1.0).unwrap();
            let soft = sample_relaxed_mask(&dist, 5, 2.0, 0.2, 99).unwrap();
            assert_eq!(soft.weights(), &[1.0; 5]);
        }
    }

    #[test]
    fn relaxed_mask_weights_carry_the_full_budget_within_the_unit_box() {
        let dist = MaskDistribution::new(vec![0.3, -0.5, 0.9, 0.1, -1.2, 0.0, 0.7], 1.0).unwrap();
        for k in [1usize, 2, 4, 6] {
            for noise_seed in 0..10u64 {
                // Construction places exactly k units of mass (validated by
                // from_rounds inside the sampler); clipping can only shed it.
                let soft = sample_relaxed_mask(&dist, k, 2.0, 0.2, noise_seed).unwrap();
                let sum: f64 = soft.weights().iter().sum();
                assert!(sum <= k as f64 + SOFT_MASK_SUM_TOL, "k={k}: sum {sum}");
                assert!((sum + soft.budget_deficit() - k as f64).abs() <= SOFT_MASK_SUM_TOL);
                assert!(soft.weights().iter().all(|&w| (0.0..=1.0).contains(&w)));
            }
        }
        // Near the hard limit nothing saturates early, so the full budget
        // survives clipping.
        for k in [1usize, 3, 6] {
            for noise_seed in 0..10u64 {
                let soft = sample_relaxed_mask(&dist, k, 2.0, 1e-3, noise_seed).unwrap();
                assert!(
                    soft.budget_deficit().abs() <= SOFT_MASK_SUM_TOL,
                    "k={k} seed {noise_seed}: deficit {}",
                    soft.budget_deficit()
                );
            }
        }
    }

    #[test]
    fn soft_proxy_gradient_matches_finite_differences() {
        let market = random_market(4, 4, 6, 3, 4242);
        let weights = PredictorWeights::random_init(3, 6, 77);
        let mut config = LearnerConfig::new(3, 0.5);
        config.masks_per_step = 6;
        config.seed = 2024;
        let markets = vec![market];

        for (probe, theta) in [
            vec![0.0; 6],
            vec![0.4, -0.7, 0.2, 1.1, -0.3, 0.05],
        ]
        .into_iter()
        .enumerate()
        {
            let eval = soft_proxy(&theta, &markets, &weights, &config).unwrap();
            let h = 1e-5;
            let mut fd = vec![0.0; 6];
            for i in 0..6 {
                let mut hi = theta.clone();
                let mut lo = theta.clone();
                hi[i] += h;
                lo[i] -= h;
                let vh = soft_proxy(&hi, &markets, &weights, &config).unwrap().value;
                let vl = soft_proxy(&lo, &markets, &weights, &config).unwrap().value;
                fd[i] = (vh - vl) / (2.0 * h);
            }
            let diff: f64 = fd
                .iter()
                .zip(&eval.grad)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let scale: f64 = fd.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!(
                diff <= 1e-4 * scale.max(1e-8),
                "probe {probe}: fd {fd:?} vs analytic {:?}",
                eval.grad
            );
        }
    }

    #[test]
    fn objective_is_affine_in_lambda() {
        let (market, weights) = toy_market();
        let markets = vec![market];
        let theta = vec![0.3, -0.2];
        let value_at = |lambda: f64| {
            let mut config = LearnerConfig::new(1, lambda);
            config.seed = 5;
            soft_proxy(&theta, &markets, &weights, &config).unwrap().value
        };
        let (v0, v1, v25) = (value_at(0.0), value_at(1.0), value_at(0.25));
        assert!((v25 - (0.75 * v0 + 0.25 * v1)).abs() < 1e-12);
    }

    #[test]
    fn pure_penalty_objective_ignores_prices_once_choices_are_sharp() {
        // With lambda = 1 the selection term carries weight zero, so prices
        // enter only through the predicted choices; in the sharp-tau_f regime
        // a perturbation too small to flip any hard choice leaves the value
        // unchanged.
        let (market, weights) = toy_market();
        let mut config = LearnerConfig::new(1, 1.0);
        config.tau_f = 1e-4;
        config.seed = 13;
        let theta = vec![0.1, -0.4];
        let base = soft_proxy(&theta, &[market.clone()], &weights, &config)
            .unwrap()
            .value;
        let bumped = market
            .with_prices(Array1::from_vec(vec![0.22 + 1e-4, 1e-4]))
            .unwrap();
        let perturbed = soft_proxy(&theta, &[bumped], &weights, &config)
            .unwrap()
            .value;
        assert!((base - perturbed).abs() < 1e-6, "{base} vs {perturbed}");
    }

    #[test]
    fn monte_carlo_estimates_concentrate() {
        let (market, weights) = toy_market();
        let config = LearnerConfig::new(1, 0.5);
        let objective = SoftObjective::new(&[market], &weights, &config).unwrap();
        let theta = vec![0.2, -0.1];
        let a = objective
            .eval(&theta, &gumbel_noise(2, 512, 1001))
            .unwrap();
        let b = objective
            .eval(&theta, &gumbel_noise(2, 512, 2002))
            .unwrap();
        let pooled = (stats::standard_error(&a.per_draw).powi(2)
            + stats::standard_error(&b.per_draw).powi(2))
        .sqrt();
        assert!(
            (a.value - b.value).abs() < 3.0 * pooled,
            "{} vs {} (pooled SE {pooled})",
            a.value,
            b.value
        );
    }

    #[test]
    fn training_identifies_the_decongesting_feature() {
        let (market, weights) = toy_market();
        let mut config = LearnerConfig::new(1, 0.5);
        config.seed = 11;
        let fitted = fit(&[market], &weights, &config).unwrap();
        assert!(!fitted.policy.inverted);
        let probs = fitted.policy.distribution.probabilities();
        assert!(probs[0] > 0.9, "P(feature 1) = {} after training", probs[0]);
        assert_eq!(fitted.policy.top_k_mask().unwrap(), Mask::from_indices(2, &[0]).unwrap());
        // Evaluation-mode objective should not have degraded over training.
        let first = fitted.log.first_eval().unwrap();
        let last = fitted.log.final_eval().unwrap();
        assert!(last >= first, "eval went {first} -> {last}");
    }

    #[test]
    fn training_log_is_bitwise_reproducible() {
        let (market, weights) = toy_market();
        let mut config = LearnerConfig::new(1, 0.5);
        config.epochs = 25;
        config.seed = 99;
        let run1 = fit(&[market.clone()], &weights, &config).unwrap();
        let run2 = fit(&[market], &weights, &config).unwrap();
        assert_eq!(
            serde_json::to_string(&run1.log).unwrap(),
            serde_json::to_string(&run2.log).unwrap()
        );
        let bits1: Vec<u64> = run1.policy.distribution.theta().iter().map(|v| v.to_bits()).collect();
        let bits2: Vec<u64> = run2.policy.distribution.theta().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits1, bits2);
    }

    #[test]
    fn theta_translation_leaves_the_policy_unchanged() {
        let theta = vec![0.5, -1.0, 0.25, 0.0];
        let shifted: Vec<f64> = theta.iter().map(|v| v + 3.7).collect();
        let d1 = MaskDistribution::new(theta.clone(), 1.0).unwrap();
        let d2 = MaskDistribution::new(shifted.clone(), 1.0).unwrap();
        for (p, q) in d1.probabilities().iter().zip(d2.probabilities()) {
            assert!((p - q).abs() < 1e-12);
        }
        let s1 = sample_relaxed_mask(&d1, 2, 2.0, 0.2, 42).unwrap();
        let s2 = sample_relaxed_mask(&d2, 2, 2.0, 0.2, 42).unwrap();
        for (a, b) in s1.weights().iter().zip(s2.weights()) {
            assert!((a - b).abs() < 1e-12);
        }

        let (market, weights) = toy_market();
        let config = LearnerConfig::new(1, 0.5);
        let objective = SoftObjective::new(&[market], &weights, &config).unwrap();
        let noise = gumbel_noise(2, 16, 3);
        let v1 = objective.eval(&[0.4, -0.6], &noise).unwrap().value;
        let v2 = objective
            .eval(&[0.4 + 3.7, -0.6 + 3.7], &noise)
            .unwrap()
            .value;
        assert!((v1 - v2).abs() < 1e-9);
    }

    #[test]
    fn soft_objective_approaches_hard_proxy_as_temperatures_vanish() {
        let (market, weights) = toy_market();
        let mut config = LearnerConfig::new(1, 0.5);
        config.tau_topk = 1e-4;
        config.tau_f = 1e-4;
        let objective = SoftObjective::new(&[market.clone()], &weights, &config).unwrap();
        let theta = vec![0.6, -0.2];
        for noise_seed in [3u64, 8, 21] {
            let noise = gumbel_noise(2, 1, noise_seed);
            let soft_value = objective.eval(&theta, &noise).unwrap().value;
            let dist = MaskDistribution::new(theta.clone(), 1.0).unwrap();
            let hard_mask = sample_relaxed_mask(&dist, 1, config.tau_gumbel, 1e-4, noise_seed)
                .unwrap()
                .hardened()
                .unwrap();
            let choices = predictor::predict_hard(&weights, &market, &hard_mask).unwrap();
            let hard_value = objectives::proxy(market.prices(), &choices, 0.5)
                .unwrap()
                .combined;
            assert!(
                (soft_value - hard_value).abs() < 1e-3,
                "seed {noise_seed}: soft {soft_value} vs hard {hard_value}"
            );
        }
    }

    #[test]
    fn top_k_deployment_picks_the_largest_entries() {
        let policy = LearnedPolicy {
            distribution: MaskDistribution::new(vec![3.0, 1.0, 2.0, 0.5], 1.0).unwrap(),
            k: 2,
            inverted: false,
            tau_gumbel: 2.0,
        };
        assert_eq!(
            policy.top_k_mask().unwrap(),
            Mask::from_indices(4, &[0, 2]).unwrap()
        );
    }

    #[test]
    fn concentrated_distribution_makes_all_deploy_modes_agree() {
        let market = random_market(3, 3, 4, 2, 555);
        let policy = LearnedPolicy {
            distribution: MaskDistribution::new(vec![50.0, 0.0, 0.0, 0.0], 1.0).unwrap(),
            k: 1,
            inverted: false,
            tau_gumbel: 2.0,
        };
        let markets = vec![market];
        let expect = Mask::from_indices(4, &[0]).unwrap();
        let topk = deploy(&policy, DeployMode::TopK, &markets, &[], &ChoiceModel::Truth, 0.5, 1)
            .unwrap();
        let committed = deploy(
            &policy,
            DeployMode::committed_sample(),
            &markets,
            &[],
            &ChoiceModel::Truth,
            0.5,
            1,
        )
        .unwrap();
        let sampled = deploy(
            &policy,
            DeployMode::policy(),
            &markets,
            &[],
            &ChoiceModel::Truth,
            0.5,
            1,
        )
        .unwrap();
        assert_eq!(topk.chosen.as_ref(), Some(&expect));
        assert_eq!(committed.chosen.as_ref(), Some(&expect));
        assert!(sampled.masks.iter().all(|m| m == &expect));
        assert!((topk.welfare - committed.welfare).abs() < 1e-15);
        assert!((topk.welfare - sampled.welfare).abs() < 1e-15);
    }

    #[test]
    fn policy_mode_welfare_is_the_mean_of_independent_recomputation() {
        let (market, _) = toy_market();
        let policy = LearnedPolicy {
            distribution: MaskDistribution::new(vec![0.3, -0.2], 1.0).unwrap(),
            k: 1,
            inverted: false,
            tau_gumbel: 2.0,
        };
        let markets = vec![market.clone()];
        let report = deploy(
            &policy,
            DeployMode::Policy { draws: 10 },
            &markets,
            &[],
            &ChoiceModel::Truth,
            0.5,
            7,
        )
        .unwrap();
        assert_eq!(report.masks.len(), 10);
        let mut total = 0.0;
        for (mask, &recorded) in report.masks.iter().zip(&report.mask_welfare) {
            let direct = market::mask_outcome(&market, mask, Impute::Zero)
                .unwrap()
                .welfare;
            assert!((direct - recorded).abs() < 1e-15);
            total += direct;
        }
        assert!((report.welfare - total / 10.0).abs() < 1e-15);
    }

    #[test]
    fn inverted_policies_always_deploy_cardinality_k() {
        let market = random_market(4, 4, 6, 3, 808);
        let weights = PredictorWeights::random_init(3, 6, 9);
        let mut config = LearnerConfig::new(5, 0.5);
        config.epochs = 3;
        config.seed = 17;
        let fitted = fit(&[market], &weights, &config).unwrap();
        assert!(fitted.policy.inverted);
        assert_eq!(fitted.policy.top_k_mask().unwrap().k(), 5);
        let mut rng = seed::rng(31);
        for _ in 0..20 {
            assert_eq!(fitted.policy.sample_mask(&mut rng).unwrap().k(), 5);
        }
    }

    #[test]
    fn committed_sampling_prefers_higher_proxy_candidates() {
        let (market, weights) = toy_market();
        // Spread-out distribution so both masks appear among 20 draws.
        let policy = LearnedPolicy {
            distribution: MaskDistribution::new(vec![0.0, 0.0], 1.0).unwrap(),
            k: 1,
            inverted: false,
            tau_gumbel: 2.0,
        };
        let report = deploy(
            &policy,
            DeployMode::committed_sample(),
            &[market.clone()],
            &[market],
            &ChoiceModel::Predictor(&weights),
            0.5,
            4,
        )
        .unwrap();
        let feature1 = Mask::from_indices(2, &[0]).unwrap();
        let drew_both = report.masks.iter().any(|m| m != &feature1);
        assert!(drew_both, "both candidate masks should appear among 20 draws");
        // Feature 1 decongests (proxy 0.11) while feature 2 congests (−0.5).
        assert_eq!(report.chosen.as_ref(), Some(&feature1));
        let proxies = report.mask_proxy.as_ref().unwrap();
        for (mask, &p) in report.masks.iter().zip(proxies) {
            let expect = if mask == &feature1 { 0.11 } else { -0.5 };
            assert!((p - expect).abs() < 1e-12, "mask {mask:?}: proxy {p}");
        }
    }

    #[test]
    fn learner_config_rejects_degenerate_settings() {
        let (market, weights) = toy_market();
        let bad_k = LearnerConfig::new(3, 0.5);
        assert!(SoftObjective::new(&[market.clone()], &weights, &bad_k).is_err());
        let mut bad_lambda = LearnerConfig::new(1, 0.5);
        bad_lambda.lambda = 1.5;
        assert!(SoftObjective::new(&[market.clone()], &weights, &bad_lambda).is_err());
        let config = LearnerConfig::new(1, 0.5);
        assert!(matches!(
            fit(&[], &weights, &config),
            Err(Error::EmptyDataset(_))
        ));
        let _ = market;
    }
}
