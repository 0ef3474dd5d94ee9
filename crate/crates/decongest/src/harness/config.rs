//! Experiment configuration: a documented TOML surface with per-experiment
//! defaults, validation, and a canonical content hash for provenance.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::default_lambda;
use crate::learner::LearnerConfig;
use crate::predictor::PredictorConfig;
use crate::pricing::PriceScheme;
use crate::seed;

/// Which study a config drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentId {
    /// Exhaustive mask enumeration on mixture markets across the
    /// preference-alignment grid.
    MaskEnum,
    /// Full learning pipeline on a factorized pool across mask sizes.
    Learn,
    /// Learning pipeline across pricing-scheme perturbations (γ and ε grids).
    Prices,
    /// Learning pipeline across the proxy trade-off weight λ.
    Lambda,
}

impl ExperimentId {
    pub fn label(self) -> &'static str {
        match self {
            ExperimentId::MaskEnum => "mask-enum",
            ExperimentId::Learn => "learn",
            ExperimentId::Prices => "prices",
            ExperimentId::Lambda => "lambda",
        }
    }
}

/// Where markets come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    /// Synthetic mixture markets (enumeration study).
    Mixture,
    /// Markets sampled from a factorized rating pool (learning studies);
    /// the pool is loaded from `pool_path` or synthesized when absent.
    Pool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Pre-factorized pool JSON; None synthesizes a rating table instead.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pool_path: Option<PathBuf>,
    /// Users per market.
    pub n: usize,
    /// Items per market.
    pub m: usize,
    /// Item feature dimension.
    pub d: usize,
    /// Markets per sample set (pool source).
    pub markets: usize,
    /// Independent pool/market replicates (pool source).
    pub sample_sets: usize,
    /// Cross-validation folds per sample set (pool source).
    pub folds: usize,
    /// Independent instances (mixture source).
    pub instances: usize,
    /// Preference-alignment grid (mixture source).
    pub alpha_grid: Vec<f64>,
    /// Dispersion-power grid (mixture source).
    pub rho_grid: Vec<f64>,
    /// α at which the per-mask diagnostics table is exported.
    pub correlation_alpha: f64,
    /// Synthetic rating pool shape (pool source without `pool_path`).
    pub pool_users: usize,
    pub pool_items: usize,
    pub pool_rank: usize,
    pub pool_density: f64,
    /// Multiplicative-update iterations for both factorization stages.
    pub nmf_iters: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Pool,
            pool_path: None,
            n: 20,
            m: 20,
            d: 12,
            markets: 60,
            sample_sets: 3,
            folds: 3,
            instances: 10,
            alpha_grid: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
            rho_grid: vec![1.0, 0.5],
            correlation_alpha: 0.2,
            pool_users: 120,
            pool_items: 60,
            pool_rank: 8,
            pool_density: 0.35,
            nmf_iters: 400,
        }
    }
}

/// Pricing scheme by name plus its parameters; noise seeds are derived from
/// the master seed at run time, never stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeKind {
    CeMid,
    CeInterpolated,
    CeNoisyValues,
    CeNoisyPrices,
    HeuristicAvgValue,
    InterpolateToHeuristic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PricingConfig {
    pub scheme: SchemeKind,
    /// Buyer(0) → seller(1) interpolation weight (ce-interpolated).
    pub gamma: f64,
    /// Noise amplitude (ce-noisy-values / ce-noisy-prices).
    pub epsilon: f64,
    /// Blend toward the average-value heuristic (interpolate-to-heuristic).
    pub heuristic_weight: f64,
}

impl Default for PricingConfig {
    fn default() -> Self {
        PricingConfig {
            scheme: SchemeKind::CeMid,
            gamma: 0.5,
            epsilon: 0.0,
            heuristic_weight: 0.0,
        }
    }
}

impl PricingConfig {
    pub fn scheme(&self, master_seed: u64) -> PriceScheme {
        let noise_seed = seed::derive_seed(master_seed, "price-noise", 0);
        match self.scheme {
            SchemeKind::CeMid => PriceScheme::CeMid,
            SchemeKind::CeInterpolated => PriceScheme::CeInterpolated { gamma: self.gamma },
            SchemeKind::CeNoisyValues => {
                PriceScheme::CeNoisyValues { epsilon: self.epsilon, noise_seed }
            }
            SchemeKind::CeNoisyPrices => {
                PriceScheme::CeNoisyPrices { epsilon: self.epsilon, noise_seed }
            }
            SchemeKind::HeuristicAvgValue => PriceScheme::HeuristicAvgValue,
            SchemeKind::InterpolateToHeuristic => {
                PriceScheme::InterpolateToHeuristic { weight: self.heuristic_weight }
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::invalid("pricing gamma must lie in [0, 1]"));
        }
        if self.epsilon < 0.0 || !self.epsilon.is_finite() {
            return Err(Error::invalid("pricing epsilon must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.heuristic_weight) {
            return Err(Error::invalid("heuristic weight must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearnerSection {
    /// Mask sizes to study.
    pub k_list: Vec<usize>,
    /// Trade-off weight; None uses 1 − k/2d per k.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    pub epochs: usize,
    pub masks_per_step: usize,
    pub learning_rate: f64,
    pub tau_gumbel: f64,
    pub tau_topk: f64,
    pub tau_f: f64,
    pub dist_temperature: f64,
    pub eval_draws: usize,
    pub eval_every: usize,
    pub invert_when_k_large: bool,
}

impl Default for LearnerSection {
    fn default() -> Self {
        let base = LearnerConfig::new(1, 0.5);
        LearnerSection {
            k_list: vec![4, 6, 8],
            lambda: None,
            epochs: base.epochs,
            masks_per_step: base.masks_per_step,
            learning_rate: base.learning_rate,
            tau_gumbel: base.tau_gumbel,
            tau_topk: base.tau_topk,
            tau_f: base.tau_f,
            dist_temperature: base.dist_temperature,
            eval_draws: base.eval_draws,
            eval_every: base.eval_every,
            invert_when_k_large: base.invert_when_k_large,
        }
    }
}

impl LearnerSection {
    /// Concrete learner config for one mask size.
    pub fn to_config(&self, k: usize, d: usize, fit_seed: u64) -> LearnerConfig {
        let lambda = self.lambda.unwrap_or_else(|| default_lambda(k, d));
        LearnerConfig {
            k,
            lambda,
            masks_per_step: self.masks_per_step,
            tau_gumbel: self.tau_gumbel,
            tau_topk: self.tau_topk,
            tau_f: self.tau_f,
            dist_temperature: self.dist_temperature,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            invert_when_k_large: self.invert_when_k_large,
            eval_draws: self.eval_draws,
            eval_every: self.eval_every,
            seed: fit_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub temperature: f64,
    /// Weight the training loss by inverse behavior-policy propensities.
    pub ipw: bool,
    /// Logged masks drawn per training market.
    pub masks_per_market: usize,
    /// Monte-Carlo samples for propensity estimates (0 disables them).
    pub propensity_samples: usize,
}

impl Default for PredictorSection {
    fn default() -> Self {
        let base = PredictorConfig::default();
        PredictorSection {
            epochs: base.epochs,
            learning_rate: base.learning_rate,
            batch_size: base.batch_size,
            temperature: base.temperature,
            ipw: false,
            masks_per_market: 4,
            propensity_samples: 0,
        }
    }
}

impl PredictorSection {
    pub fn to_config(&self, train_seed: u64) -> PredictorConfig {
        PredictorConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            temperature: self.temperature,
            ipw: self.ipw,
            seed: train_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    /// Buyer→seller interpolation grid (prices experiment).
    pub gamma_grid: Vec<f64>,
    /// Additive price-noise grid (prices experiment).
    pub epsilon_grid: Vec<f64>,
    /// Trade-off weight grid (lambda experiment).
    pub lambda_grid: Vec<f64>,
    /// Candidate masks for the committed-sample deployment.
    pub committed_draws: usize,
    /// Masks per market for the sampling-policy deployment.
    pub policy_draws: usize,
    /// Uniform masks behind the random baseline.
    pub random_draws: usize,
    /// Mask size at which the exhaustive oracle column is computed; 0
    /// disables it. Also skipped when C(d,k) exceeds `enumeration_cap`.
    pub oracle_k: usize,
    pub enumeration_cap: u64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            gamma_grid: vec![0.0, 0.5, 0.75, 1.0],
            epsilon_grid: vec![0.0, 0.05, 0.1, 0.2],
            lambda_grid: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            committed_draws: 20,
            policy_draws: 50,
            random_draws: 100,
            oracle_k: 6,
            enumeration_cap: 1_000_000,
        }
    }
}

/// One experiment, fully specified. Everything an output row needs to be
/// re-derived lives here plus the master seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentId,
    #[serde(default = "default_master_seed")]
    pub master_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub pricing: PricingConfig,
    #[serde(default)]
    pub learner: LearnerSection,
    #[serde(default)]
    pub predictor: PredictorSection,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
}

fn default_master_seed() -> u64 {
    17
}

impl ExperimentConfig {
    /// Ready-to-run defaults for one experiment.
    pub fn defaults_for(experiment: ExperimentId) -> Self {
        let mut config = ExperimentConfig {
            experiment,
            master_seed: default_master_seed(),
            output_dir: None,
            data: DataConfig::default(),
            pricing: PricingConfig::default(),
            learner: LearnerSection::default(),
            predictor: PredictorSection::default(),
            evaluation: EvaluationConfig::default(),
        };
        match experiment {
            ExperimentId::MaskEnum => {
                config.data.source = DataSource::Mixture;
                config.data.n = 8;
                config.data.m = 8;
                config.data.d = 14;
                config.learner.k_list = vec![6];
            }
            ExperimentId::Learn => {}
            ExperimentId::Prices | ExperimentId::Lambda => {
                // Single mask size, fewer replicates: sweeps multiply cells.
                config.learner.k_list = vec![6];
                config.data.sample_sets = 2;
                config.data.folds = 2;
                config.evaluation.oracle_k = 0;
            }
        }
        config
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text)
            .map_err(|e| Error::invalid(format!("config parse error: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::invalid(format!("config serialize: {e}")))
    }

    /// FNV-1a hash of the canonical JSON form; stable across TOML
    /// formatting, comments, and key order.
    pub fn content_hash(&self) -> Result<String> {
        let canonical = serde_json::to_string(self)?;
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for byte in canonical.as_bytes() {
            hash ^= u64::from(*byte);
            hash = hash.wrapping_mul(0x100_0000_01b3);
        }
        Ok(format!("{hash:016x}"))
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.data.d;
        if self.data.n == 0 || self.data.m == 0 || d == 0 {
            return Err(Error::invalid("market dimensions must be positive"));
        }
        if self.learner.k_list.is_empty() {
            return Err(Error::invalid("k_list must name at least one mask size"));
        }
        for &k in &self.learner.k_list {
            if k > d {
                return Err(Error::invalid(format!("k={k} exceeds d={d}")));
            }
        }
        if let Some(lambda) = self.learner.lambda {
            if !(0.0..=1.0).contains(&lambda) {
                return Err(Error::invalid("lambda must lie in [0, 1]"));
            }
        }
        self.pricing.validate()?;
        match self.data.source {
            DataSource::Mixture => {
                if self.data.instances == 0 {
                    return Err(Error::invalid("mixture study needs instances >= 1"));
                }
                if self.data.alpha_grid.is_empty()
                    || self.data.alpha_grid.iter().any(|a| !(0.0..=1.0).contains(a))
                {
                    return Err(Error::invalid("alpha_grid must be non-empty within [0, 1]"));
                }
                if self.data.rho_grid.is_empty()
                    || self.data.rho_grid.iter().any(|&r| !(r > 0.0 && r <= 1.0))
                {
                    return Err(Error::invalid("rho_grid must be non-empty within (0, 1]"));
                }
            }
            DataSource::Pool => {
                if self.data.sample_sets == 0 {
                    return Err(Error::invalid("pool study needs sample_sets >= 1"));
                }
                if self.data.folds < 2 || self.data.folds > self.data.markets {
                    return Err(Error::invalid(format!(
                        "folds must lie in 2..={} to leave both train and test markets",
                        self.data.markets
                    )));
                }
                match &self.data.pool_path {
                    Some(path) => {
                        if !path.exists() {
                            return Err(Error::invalid(format!(
                                "pool file {} does not exist",
                                path.display()
                            )));
                        }
                    }
                    None => {
                        if self.data.pool_users < self.data.n
                            || self.data.pool_items < self.data.m
                        {
                            return Err(Error::invalid(
                                "synthetic pool is smaller than one market",
                            ));
                        }
                        if self.data.pool_rank == 0 || self.data.nmf_iters == 0 {
                            return Err(Error::invalid(
                                "synthetic pool needs a positive rank and NMF iterations",
                            ));
                        }
                        if !(self.data.pool_density > 0.0 && self.data.pool_density <= 1.0) {
                            return Err(Error::invalid("pool density must lie in (0, 1]"));
                        }
                    }
                }
            }
        }
        let eval = &self.evaluation;
        if eval.committed_draws == 0 || eval.policy_draws == 0 || eval.random_draws == 0 {
            return Err(Error::invalid("deployment draw counts must be positive"));
        }
        match self.experiment {
            ExperimentId::MaskEnum => {
                if self.data.source != DataSource::Mixture {
                    return Err(Error::invalid(
                        "mask-enum runs on mixture markets; set data.source = \"mixture\"",
                    ));
                }
            }
            ExperimentId::Learn => {
                if self.data.source != DataSource::Pool {
                    return Err(Error::invalid("learn runs on a factorized pool"));
                }
            }
            ExperimentId::Prices => {
                if self.data.source != DataSource::Pool {
                    return Err(Error::invalid("prices runs on a factorized pool"));
                }
                if eval.gamma_grid.is_empty() && eval.epsilon_grid.is_empty() {
                    return Err(Error::invalid("prices needs a gamma or epsilon grid"));
                }
                if eval.gamma_grid.iter().any(|g| !(0.0..=1.0).contains(g)) {
                    return Err(Error::invalid("gamma_grid must lie in [0, 1]"));
                }
                if eval.epsilon_grid.iter().any(|&e| e < 0.0 || !e.is_finite()) {
                    return Err(Error::invalid("epsilon_grid must be finite and >= 0"));
                }
            }
            ExperimentId::Lambda => {
                if self.data.source != DataSource::Pool {
                    return Err(Error::invalid("lambda runs on a factorized pool"));
                }
                if eval.lambda_grid.is_empty()
                    || eval.lambda_grid.iter().any(|l| !(0.0..=1.0).contains(l))
                {
                    return Err(Error::invalid("lambda_grid must be non-empty within [0, 1]"));
                }
            }
        }
        Ok(())
    }
}

/// Annotated config reference plus a ready default block per experiment.
pub fn config_schema() -> String {
    let mut out = String::from(
        "\
# Experiment configuration (TOML).
#
# experiment    one of \"mask-enum\" | \"learn\" | \"prices\" | \"lambda\"
# master_seed   every random stream in the run derives from this one seed
# output_dir    optional output directory (CLI --out and DECONGEST_OUT override)
#
# [data]
#   source             \"mixture\" (mask-enum) or \"pool\" (learning studies)
#   pool_path          pre-factorized pool JSON; omit to synthesize ratings
#   n, m, d            users, items, item-feature dimension per market
#   markets            markets per sample set (pool)
#   sample_sets        independent replicates (pool)
#   folds              cross-validation folds per sample set (pool)
#   instances          independent instances (mixture)
#   alpha_grid         preference-alignment grid in [0,1] (mixture)
#   rho_grid           dispersion powers in (0,1] (mixture)
#   correlation_alpha  alpha whose per-mask diagnostics are exported
#   pool_users/pool_items/pool_rank/pool_density  synthetic rating table shape
#   nmf_iters          multiplicative-update iterations per factorization
#
# [pricing]
#   scheme            \"ce-mid\" | \"ce-interpolated\" | \"ce-noisy-values\" |
#                     \"ce-noisy-prices\" | \"heuristic-avg-value\" |
#                     \"interpolate-to-heuristic\"
#   gamma             buyer(0)->seller(1) weight for ce-interpolated
#   epsilon           noise amplitude for the noisy schemes
#   heuristic_weight  blend toward average-value prices
#
# [learner]
#   k_list            mask sizes; lambda defaults to 1 - k/(2d) per k
#   epochs, masks_per_step, learning_rate, tau_gumbel, tau_topk, tau_f,
#   dist_temperature, eval_draws, eval_every, invert_when_k_large
#
# [predictor]
#   epochs, learning_rate, batch_size, temperature, ipw,
#   masks_per_market, propensity_samples
#
# [evaluation]
#   gamma_grid, epsilon_grid, lambda_grid   sweep grids per experiment
#   committed_draws, policy_draws, random_draws
#   oracle_k          mask size for the exhaustive-oracle column (0 = off)
#   enumeration_cap   refuse enumerations beyond this many masks
",
    );
    for id in [
        ExperimentId::MaskEnum,
        ExperimentId::Learn,
        ExperimentId::Prices,
        ExperimentId::Lambda,
    ] {
        let block = ExperimentConfig::defaults_for(id)
            .to_toml_string()
            .expect("default configs serialize");
        out.push_str(&format!("\n# ---- defaults for `{}` ----\n{block}", id.label()));
    }
    out
}
