//! Command-line front end for the decongestion laboratory.
//!
//! Pipeline subcommands (ratings → pool → markets → predictor → learned
//! mask → evaluation) exchange JSON artifacts; the `experiment` subcommand
//! runs the config-driven studies end to end and writes CSV tables;
//! `verify` re-derives sampled rows of a finished run from its config.
//!
//! Output paths resolve against `$DECONGEST_OUT` (default: the working
//! directory). Every command is deterministic in `--seed`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;

use decongest::baselines;
use decongest::data::{self, DatasetOptions, FactorizedPool, MixtureSpec};
use decongest::harness::{self, config::config_schema, ExperimentConfig, ExperimentId};
use decongest::learner::{self, ChoiceModel, DeployMode, FitResult, LearnerConfig};
use decongest::market::{Market, Mask};
use decongest::objectives::default_lambda;
use decongest::predictor::{self, PredictorConfig, TrainedPredictor};
use decongest::pricing::{self, PriceScheme};
use decongest::seed::derive_seed;
use decongest::sweep::{self, ObjectiveKind, SweepOptions};
use decongest::theory;

#[derive(Parser)]
#[command(
    name = "decongest",
    version,
    about = "Feature-masking laboratory for decongesting unit-demand markets"
)]
struct Cli {
    /// Print the annotated experiment-config reference and exit.
    #[arg(long)]
    print_config_schema: bool,

    /// Master seed (default 17). For `experiment`/`verify` this overrides
    /// the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a sparse low-rank rating table.
    GenSynthetic(GenSynthetic),
    /// Validate a tab-separated rating file and report its shape.
    IngestRatings(IngestRatings),
    /// Factorize ratings into a market feature pool (masked NMF).
    Factorize(Factorize),
    /// Sample priced markets from a pool or the synthetic mixture model.
    MakeMarkets(MakeMarkets),
    /// Price one value matrix: assignment, prices, profits, objective.
    Price(Price),
    /// Train the choice predictor on logged choices under the default policy.
    TrainPredictor(TrainPredictor),
    /// Fit the differentiable mask learner against a trained predictor.
    LearnMask(LearnMask),
    /// Score a fixed mask or deploy a learned policy on markets.
    Evaluate(Evaluate),
    /// Enumerate every k-mask of one market under chosen objectives.
    SweepMasks(SweepMasks),
    /// Randomized soundness sweeps of the structural theory.
    TheoryCheck(TheoryCheck),
    /// Run a config-driven experiment and write its result tables.
    Experiment(Experiment),
    /// Re-derive sampled rows of a finished run from its config.
    Verify(Verify),
}

// ---------------------------------------------------------------------------
// Shared argument groups

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SchemeName {
    CeMid,
    CeInterpolated,
    CeNoisyValues,
    CeNoisyPrices,
    HeuristicAvgValue,
    InterpolateToHeuristic,
}

#[derive(Args, Clone)]
struct SchemeArgs {
    /// Pricing scheme applied to true values.
    #[arg(long, value_enum, default_value_t = SchemeName::CeMid)]
    scheme: SchemeName,
    /// Buyer→seller interpolation weight (ce-interpolated).
    #[arg(long, default_value_t = 0.5)]
    gamma: f64,
    /// Noise magnitude (ce-noisy-values / ce-noisy-prices).
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    /// Mid-CE→heuristic blend weight (interpolate-to-heuristic).
    #[arg(long, default_value_t = 0.5)]
    heuristic_weight: f64,
}

impl SchemeArgs {
    fn build(&self, noise_seed: u64) -> PriceScheme {
        match self.scheme {
            SchemeName::CeMid => PriceScheme::CeMid,
            SchemeName::CeInterpolated => PriceScheme::CeInterpolated { gamma: self.gamma },
            SchemeName::CeNoisyValues => {
                PriceScheme::CeNoisyValues { epsilon: self.epsilon, noise_seed }
            }
            SchemeName::CeNoisyPrices => {
                PriceScheme::CeNoisyPrices { epsilon: self.epsilon, noise_seed }
            }
            SchemeName::HeuristicAvgValue => PriceScheme::HeuristicAvgValue,
            SchemeName::InterpolateToHeuristic => {
                PriceScheme::InterpolateToHeuristic { weight: self.heuristic_weight }
            }
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ExperimentArg {
    MaskEnum,
    Learn,
    Prices,
    Lambda,
}

impl From<ExperimentArg> for ExperimentId {
    fn from(arg: ExperimentArg) -> Self {
        match arg {
            ExperimentArg::MaskEnum => ExperimentId::MaskEnum,
            ExperimentArg::Learn => ExperimentId::Learn,
            ExperimentArg::Prices => ExperimentId::Prices,
            ExperimentArg::Lambda => ExperimentId::Lambda,
        }
    }
}

// ---------------------------------------------------------------------------
// Subcommand arguments

#[derive(Args)]
struct GenSynthetic {
    #[arg(long, default_value_t = 120)]
    users: usize,
    #[arg(long, default_value_t = 60)]
    items: usize,
    /// Planted rank of the score model.
    #[arg(long, default_value_t = 8)]
    rank: usize,
    /// Observation probability per entry.
    #[arg(long, default_value_t = 0.35)]
    density: f64,
    /// Rating file to write (tab-separated, one observation per line).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct IngestRatings {
    /// Tab-separated input: user, item, rating (1..=5), timestamp.
    #[arg(long)]
    input: PathBuf,
    /// Optional canonicalized copy (dense ids re-mapped, timestamps zeroed).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Factorize {
    /// Rating file (see ingest-ratings).
    #[arg(long)]
    ratings: PathBuf,
    /// Feature dimension of the recovered pool.
    #[arg(long, default_value_t = 12)]
    d: usize,
    /// Multiplicative-update iterations.
    #[arg(long, default_value_t = 400)]
    iters: usize,
    /// Pool JSON to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MakeMarkets {
    /// Factorized pool JSON (mutually exclusive with --mixture).
    #[arg(long, conflicts_with = "mixture")]
    pool: Option<PathBuf>,
    /// Use the synthetic heterogeneous/homogeneous mixture instead.
    #[arg(long)]
    mixture: bool,
    #[arg(long, default_value_t = 20)]
    n: usize,
    #[arg(long, default_value_t = 20)]
    m: usize,
    /// Feature dimension (mixture mode; pools carry their own).
    #[arg(long, default_value_t = 14)]
    d: usize,
    /// Heterogeneous↔homogeneous mixing weight (mixture mode).
    #[arg(long, default_value_t = 0.2)]
    alpha: f64,
    /// Preference dispersion exponent (mixture mode).
    #[arg(long, default_value_t = 1.0)]
    rho: f64,
    /// Markets to sample.
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[command(flatten)]
    pricing: SchemeArgs,
    /// Market list JSON to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Price {
    /// CSV matrix of values, one user per row.
    #[arg(long)]
    values: PathBuf,
    #[command(flatten)]
    pricing: SchemeArgs,
    /// Optional JSON file (also printed to stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainPredictor {
    /// Market list JSON (training markets).
    #[arg(long)]
    markets: PathBuf,
    /// Mask cardinality of the logged default policy.
    #[arg(long)]
    k: usize,
    /// Logged masks sampled per market.
    #[arg(long, default_value_t = 4)]
    masks_per_market: usize,
    /// Monte-Carlo samples for logged propensities (0 = skip).
    #[arg(long, default_value_t = 0)]
    propensity_samples: usize,
    #[arg(long, default_value_t = 150)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    #[arg(long, default_value_t = 20)]
    batch_size: usize,
    /// Temperature of the softmax likelihood.
    #[arg(long, default_value_t = 5e-4)]
    temperature: f64,
    /// Weight the loss by inverse propensities.
    #[arg(long)]
    ipw: bool,
    /// Trained-predictor JSON to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LearnMask {
    /// Market list JSON (training markets).
    #[arg(long)]
    markets: PathBuf,
    /// Trained-predictor JSON driving the soft choice model.
    #[arg(long)]
    predictor: PathBuf,
    /// Mask cardinality to deploy.
    #[arg(long)]
    k: usize,
    /// Trade-off weight (default: 1 − k/2d).
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, default_value_t = 20)]
    masks_per_step: usize,
    #[arg(long, default_value_t = 2.0)]
    tau_gumbel: f64,
    #[arg(long, default_value_t = 0.2)]
    tau_topk: f64,
    #[arg(long, default_value_t = 0.01)]
    tau_f: f64,
    #[arg(long, default_value_t = 1.0)]
    dist_temperature: f64,
    #[arg(long, default_value_t = 1e-2)]
    learning_rate: f64,
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    /// Learn the (d−k)-complement when k > d/2.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    invert_when_k_large: bool,
    #[arg(long, default_value_t = 64)]
    eval_draws: usize,
    #[arg(long, default_value_t = 10)]
    eval_every: usize,
    /// Fit-result JSON (policy + training log) to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum EvalMode {
    TopK,
    Committed,
    Policy,
}

#[derive(Args)]
struct Evaluate {
    /// Market list JSON (evaluation markets).
    #[arg(long)]
    markets: PathBuf,
    /// Fixed mask as a bit string, e.g. 101100.
    #[arg(long, conflicts_with = "policy")]
    mask: Option<String>,
    /// Fit-result JSON from learn-mask.
    #[arg(long)]
    policy: Option<PathBuf>,
    /// Deployment variant for --policy.
    #[arg(long, value_enum, default_value_t = EvalMode::TopK)]
    mode: EvalMode,
    /// Draws for committed/policy modes.
    #[arg(long, default_value_t = 20)]
    draws: usize,
    /// Trained-predictor JSON scoring committed candidates (default: true
    /// choices).
    #[arg(long)]
    predictor: Option<PathBuf>,
    /// Proxy trade-off for committed scoring (default: 1 − k/2d).
    #[arg(long)]
    lambda: Option<f64>,
    /// Optional JSON file (also printed to stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ObjectiveArg {
    WelfareOracle,
    PredictiveOracle,
    SelectionOnly,
    DecongestionOnly,
    LowerBound,
    Proxy,
}

#[derive(Args)]
struct SweepMasks {
    /// Market list JSON.
    #[arg(long)]
    markets: PathBuf,
    /// Which market in the list to sweep.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Mask cardinality.
    #[arg(long)]
    k: usize,
    /// Objectives to enumerate (default: all).
    #[arg(long, value_enum, num_args = 1..)]
    objectives: Option<Vec<ObjectiveArg>>,
    /// Proxy trade-off (default: 1 − k/2d).
    #[arg(long)]
    lambda: Option<f64>,
    /// Refuse to enumerate more than this many masks.
    #[arg(long, default_value_t = 1_000_000)]
    cap: u64,
    /// Record per-mask price distortion under re-derived mid-CE prices.
    #[arg(long)]
    with_distortion: bool,
    /// Record per-mask cross-user rank concordance.
    #[arg(long)]
    with_kendalls_w: bool,
    /// Directory for one CSV per objective.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TheoryCheck {
    /// Random instances for the value-spread and masking-condition sweeps.
    #[arg(long, default_value_t = 500)]
    trials: usize,
    /// Hypothesis-satisfying allocation pairs for the ordering sweep.
    #[arg(long, default_value_t = 200)]
    pairs: usize,
}

#[derive(Args)]
struct Experiment {
    /// Experiment to run with default settings.
    #[arg(value_enum)]
    experiment: Option<ExperimentArg>,
    /// TOML config (see --print-config-schema); overrides the positional
    /// experiment, which must then agree if given.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: config output_dir, then the experiment
    /// label under $DECONGEST_OUT).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct Verify {
    /// Experiment whose defaults produced the run.
    #[arg(value_enum)]
    experiment: Option<ExperimentArg>,
    /// TOML config the run was produced from.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding the run's tables.
    #[arg(long)]
    dir: PathBuf,
    /// Rows to re-derive per table.
    #[arg(long, default_value_t = decongest::harness::verify::DEFAULT_SAMPLE)]
    sample: usize,
}

// ---------------------------------------------------------------------------
// Helpers

fn out_root() -> PathBuf {
    std::env::var_os("DECONGEST_OUT").map(PathBuf::from).unwrap_or_else(|| ".".into())
}

/// Resolve an output path against $DECONGEST_OUT and create its parent.
fn resolve_out(path: &Path) -> Result<PathBuf> {
    let full = if path.is_absolute() { path.to_path_buf() } else { out_root().join(path) };
    if let Some(parent) = full.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
    }
    Ok(full)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {what} from {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {what} JSON"))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<PathBuf> {
    let full = resolve_out(path)?;
    std::fs::write(&full, serde_json::to_string(value)?)
        .with_context(|| format!("writing {}", full.display()))?;
    Ok(full)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn read_csv_matrix(path: &Path) -> Result<Array2<f64>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|tok| {
                tok.trim()
                    .parse::<f64>()
                    .with_context(|| format!("line {}: bad number {tok:?}", lineno + 1))
            })
            .collect::<Result<_>>()?;
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                bail!("line {}: expected {} columns, got {}", lineno + 1, first.len(), row.len());
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        bail!("{} contains no rows", path.display());
    }
    let (n, m) = (rows.len(), rows[0].len());
    Ok(Array2::from_shape_fn((n, m), |(i, j)| rows[i][j]))
}

fn parse_mask_bits(token: &str) -> Result<Mask> {
    Ok(decongest::harness::table::parse_mask_token(token)?)
}

fn load_markets(path: &Path) -> Result<Vec<Market>> {
    let markets: Vec<Market> = read_json(path, "markets")?;
    if markets.is_empty() {
        bail!("{} holds an empty market list", path.display());
    }
    Ok(markets)
}

/// Config from --config TOML or experiment defaults, with the seed override.
fn load_config(
    config_path: Option<&Path>,
    experiment: Option<ExperimentArg>,
    seed: Option<u64>,
) -> Result<ExperimentConfig> {
    let mut config = match (config_path, experiment) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            let config = ExperimentConfig::from_toml_str(&text)?;
            if let Some(arg) = experiment {
                if config.experiment != ExperimentId::from(arg) {
                    bail!(
                        "config is for {}, but {} was requested",
                        config.experiment.label(),
                        ExperimentId::from(arg).label()
                    );
                }
            }
            config
        }
        (None, Some(arg)) => ExperimentConfig::defaults_for(arg.into()),
        (None, None) => bail!("pass an experiment name or --config"),
    };
    if let Some(seed) = seed {
        config.master_seed = seed;
    }
    config.validate()?;
    Ok(config)
}

// ---------------------------------------------------------------------------
// Command bodies

fn gen_synthetic(cmd: &GenSynthetic, seed: u64) -> Result<()> {
    let ratings =
        data::synthetic_ratings(cmd.users, cmd.items, cmd.rank, cmd.density, seed)?;
    let full = resolve_out(&cmd.out)?;
    data::write_ratings(&full, &ratings)?;
    print_json(&serde_json::json!({
        "users": ratings.n_users(),
        "items": ratings.n_items(),
        "ratings": ratings.triples.len(),
        "path": full,
    }))
}

fn ingest_ratings(cmd: &IngestRatings) -> Result<()> {
    let ratings = data::ingest_ratings(&cmd.input)?;
    let path = match &cmd.out {
        Some(out) => {
            let full = resolve_out(out)?;
            data::write_ratings(&full, &ratings)?;
            Some(full)
        }
        None => None,
    };
    print_json(&serde_json::json!({
        "users": ratings.n_users(),
        "items": ratings.n_items(),
        "ratings": ratings.triples.len(),
        "path": path,
    }))
}

fn factorize(cmd: &Factorize, seed: u64) -> Result<()> {
    let ratings = data::ingest_ratings(&cmd.ratings)?;
    let fact = data::factorize(&ratings, cmd.d, cmd.iters, seed)?;
    let full = resolve_out(&cmd.out)?;
    std::fs::write(&full, fact.pool.to_json()?)?;
    print_json(&serde_json::json!({
        "users": fact.pool.n_users(),
        "items": fact.pool.n_items(),
        "d": fact.pool.d(),
        "d_user": fact.pool.d_user(),
        "rating_objective": fact.rating_objective.last(),
        "preference_objective": fact.preference_objective.last(),
        "value_scale": fact.value_scale,
        "path": full,
    }))
}

fn make_markets(cmd: &MakeMarkets, seed: u64) -> Result<()> {
    let markets: Vec<Market> = if let Some(pool_path) = &cmd.pool {
        let pool = FactorizedPool::from_json(&std::fs::read_to_string(pool_path)?)?;
        data::sample_markets(
            &pool,
            cmd.m,
            cmd.n,
            cmd.count,
            &cmd.pricing.build(derive_seed(seed, "price-noise", 0)),
            derive_seed(seed, "cli-markets", 0),
        )?
    } else if cmd.mixture {
        (0..cmd.count)
            .map(|i| {
                let spec = MixtureSpec {
                    n: cmd.n,
                    m: cmd.m,
                    d: cmd.d,
                    alpha: cmd.alpha,
                    rho: cmd.rho,
                    seed: derive_seed(seed, "cli-mixture", i as u64),
                };
                let market = data::make_mixture_market(&spec)?;
                let scheme = cmd.pricing.build(derive_seed(seed, "price-noise", i as u64));
                let prices = pricing::scheme_prices(&market.values()?, &scheme)?;
                market.with_prices(prices)
            })
            .collect::<decongest::Result<_>>()?
    } else {
        bail!("pass --pool <file> or --mixture");
    };
    let full = write_json(&cmd.out, &markets)?;
    print_json(&serde_json::json!({
        "markets": markets.len(),
        "n": markets[0].n(),
        "m": markets[0].m(),
        "d": markets[0].d(),
        "path": full,
    }))
}

fn price(cmd: &Price, seed: u64) -> Result<()> {
    let values = read_csv_matrix(&cmd.values)?;
    let scheme = cmd.pricing.build(derive_seed(seed, "price-noise", 0));
    let solution = pricing::price_market(&values, &scheme)?;
    if let Some(out) = &cmd.out {
        write_json(out, &solution)?;
    }
    print_json(&solution)
}

fn train_predictor(cmd: &TrainPredictor, seed: u64) -> Result<()> {
    let markets = load_markets(&cmd.markets)?;
    let (features, prices) = harness::learnstudy::stacked_item_pool(&markets);
    let default_mask = baselines::price_pred_mask(&features, &prices, cmd.k)?;
    let policy = data::default_policy(&default_mask);
    let options = DatasetOptions {
        masks_per_market: cmd.masks_per_market,
        propensity_samples: (cmd.propensity_samples > 0).then_some(cmd.propensity_samples),
    };
    let dataset = data::sample_dataset(
        &markets,
        &policy,
        cmd.k,
        &options,
        derive_seed(seed, "logged-data", 0),
    )?;
    let config = PredictorConfig {
        learning_rate: cmd.learning_rate,
        epochs: cmd.epochs,
        batch_size: cmd.batch_size,
        temperature: cmd.temperature,
        ipw: cmd.ipw,
        seed: derive_seed(seed, "predictor", 0),
    };
    let trained = predictor::train(&dataset, &config)?;
    let accuracy = predictor::accuracy(&trained.weights, &dataset)?;
    let full = write_json(&cmd.out, &trained)?;
    print_json(&serde_json::json!({
        "samples": dataset.samples.len(),
        "default_mask": mask_bits(&default_mask),
        "final_loss": trained.epoch_losses.last(),
        "train_accuracy": accuracy,
        "path": full,
    }))
}

fn mask_bits(mask: &Mask) -> String {
    mask.bits().iter().map(|&b| char::from(b'0' + b)).collect()
}

fn learn_mask(cmd: &LearnMask, seed: u64) -> Result<()> {
    let markets = load_markets(&cmd.markets)?;
    let trained: TrainedPredictor = read_json(&cmd.predictor, "trained predictor")?;
    let d = markets[0].d();
    let config = LearnerConfig {
        k: cmd.k,
        lambda: cmd.lambda.unwrap_or_else(|| default_lambda(cmd.k, d)),
        masks_per_step: cmd.masks_per_step,
        tau_gumbel: cmd.tau_gumbel,
        tau_topk: cmd.tau_topk,
        tau_f: cmd.tau_f,
        dist_temperature: cmd.dist_temperature,
        learning_rate: cmd.learning_rate,
        epochs: cmd.epochs,
        invert_when_k_large: cmd.invert_when_k_large,
        eval_draws: cmd.eval_draws,
        eval_every: cmd.eval_every,
        seed: derive_seed(seed, "fit", 0),
    };
    let fit = learner::fit(&markets, &trained.weights, &config)?;
    let full = write_json(&cmd.out, &fit)?;
    print_json(&serde_json::json!({
        "k": cmd.k,
        "lambda": config.lambda,
        "epochs": config.epochs,
        "topk_mask": mask_bits(&fit.policy.top_k_mask()?),
        "final_eval_objective": fit.log.entries.last().and_then(|e| e.eval_objective),
        "path": full,
    }))
}

fn evaluate(cmd: &Evaluate, seed: u64) -> Result<()> {
    let markets = load_markets(&cmd.markets)?;
    if let Some(token) = &cmd.mask {
        let mask = parse_mask_bits(token)?;
        let metrics = harness::mask_metrics(&markets, &mask)?;
        if let Some(out) = &cmd.out {
            write_json(out, &metrics)?;
        }
        return print_json(&serde_json::json!({
            "mask": token,
            "metrics": metrics,
        }));
    }
    let Some(policy_path) = &cmd.policy else {
        bail!("pass --mask <bits> or --policy <fit.json>");
    };
    let fit: FitResult = read_json(policy_path, "fit result")?;
    let trained: Option<TrainedPredictor> = match &cmd.predictor {
        Some(path) => Some(read_json(path, "trained predictor")?),
        None => None,
    };
    let mode = match cmd.mode {
        EvalMode::TopK => DeployMode::TopK,
        EvalMode::Committed => DeployMode::CommittedSample { draws: cmd.draws },
        EvalMode::Policy => DeployMode::Policy { draws: cmd.draws },
    };
    let choice_model = match &trained {
        Some(t) => ChoiceModel::Predictor(&t.weights),
        None => ChoiceModel::Truth,
    };
    let d = markets[0].d();
    let lambda = cmd.lambda.unwrap_or_else(|| default_lambda(fit.policy.k, d));
    let report = learner::deploy(
        &fit.policy,
        mode,
        &markets,
        &[],
        &choice_model,
        lambda,
        derive_seed(seed, "deploy", 0),
    )?;
    if let Some(out) = &cmd.out {
        write_json(out, &report)?;
    }
    print_json(&report)
}

fn sweep_masks(cmd: &SweepMasks, _seed: u64) -> Result<()> {
    let markets = load_markets(&cmd.markets)?;
    let market = markets
        .get(cmd.index)
        .with_context(|| format!("market index {} out of range", cmd.index))?;
    let lambda = cmd.lambda.unwrap_or_else(|| default_lambda(cmd.k, market.d()));
    let chosen = cmd.objectives.clone().unwrap_or_else(|| {
        vec![
            ObjectiveArg::WelfareOracle,
            ObjectiveArg::PredictiveOracle,
            ObjectiveArg::SelectionOnly,
            ObjectiveArg::DecongestionOnly,
            ObjectiveArg::LowerBound,
            ObjectiveArg::Proxy,
        ]
    });
    let kinds: Vec<ObjectiveKind> = chosen
        .iter()
        .map(|arg| match arg {
            ObjectiveArg::WelfareOracle => ObjectiveKind::WelfareOracle,
            ObjectiveArg::PredictiveOracle => ObjectiveKind::PredictiveOracle,
            ObjectiveArg::SelectionOnly => ObjectiveKind::SelectionOnly,
            ObjectiveArg::DecongestionOnly => ObjectiveKind::DecongestionOnly,
            ObjectiveArg::LowerBound => ObjectiveKind::LowerBound,
            ObjectiveArg::Proxy => ObjectiveKind::Proxy { lambda },
        })
        .collect();
    let options = SweepOptions {
        cap: cmd.cap,
        with_distortion: cmd.with_distortion,
        distortion_pricer: PriceScheme::CeMid,
        with_kendalls_w: cmd.with_kendalls_w,
    };
    let results = sweep::sweep(market, cmd.k, &kinds, &options)?;
    let dir = resolve_out(&cmd.out)?;
    std::fs::create_dir_all(&dir)?;
    let mut summary = Vec::new();
    for result in &results {
        let path = dir.join(format!("sweep_{}.csv", result.kind.label()));
        let mut buf = Vec::new();
        result.write_csv(&mut buf)?;
        std::fs::write(&path, buf)?;
        let best = result.best();
        summary.push(serde_json::json!({
            "objective": result.kind.label(),
            "best_mask": mask_bits(&best.mask),
            "best_value": best.objective,
            "best_welfare": best.welfare,
            "csv": path,
        }));
    }
    print_json(&summary)
}

fn theory_check(cmd: &TheoryCheck, seed: u64) -> Result<()> {
    let spread = theory::prop1_soundness_sweep(cmd.trials, 4, seed)?;
    let conditions =
        theory::condition_soundness_sweep(cmd.trials, cmd.trials.saturating_mul(50), seed)?;
    let ordering =
        theory::theorem1_soundness_sweep(cmd.pairs, cmd.pairs.saturating_mul(100), seed)?;
    print_json(&serde_json::json!({
        "value_spread_monotonicity": spread,
        "masking_conditions": conditions,
        "allocation_ordering": ordering,
    }))?;
    if spread.unsound + conditions.unsound + ordering.unsound > 0 {
        bail!("soundness sweep found counterexamples");
    }
    Ok(())
}

fn experiment(cmd: &Experiment, seed: Option<u64>) -> Result<()> {
    let config = load_config(cmd.config.as_deref(), cmd.experiment, seed)?;
    let label = config.experiment.label();
    let dir = match (&cmd.out, &config.output_dir) {
        (Some(out), _) => resolve_out(out)?,
        (None, Some(out)) => resolve_out(out)?,
        (None, None) => resolve_out(Path::new(label))?,
    };
    let start = Instant::now();
    let output = harness::run_experiment(&config)?;
    let runtime = start.elapsed().as_secs_f64();
    let paths = harness::write_all(&output, &dir, runtime)?;
    print_json(&serde_json::json!({
        "experiment": label,
        "config_hash": output.main.config_hash,
        "master_seed": config.master_seed,
        "rows": output.main.rows.len(),
        "runtime_seconds": runtime,
        "raw": paths.raw,
        "summary": paths.summary,
        "metadata": paths.metadata,
    }))
}

fn verify(cmd: &Verify, seed: Option<u64>) -> Result<()> {
    let config = load_config(cmd.config.as_deref(), cmd.experiment, seed)?;
    let dir = if cmd.dir.is_absolute() { cmd.dir.clone() } else { out_root().join(&cmd.dir) };
    let report = harness::verify_run(&config, &dir, cmd.sample)?;
    println!("{report}");
    if !report.ok() {
        bail!("verification failed");
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if cli.print_config_schema {
        print!("{}", config_schema());
        return Ok(());
    }
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let seed = cli.seed.unwrap_or(17);
    match &cli.command {
        None => bail!("no subcommand given (try --help or --print-config-schema)"),
        Some(Command::GenSynthetic(cmd)) => gen_synthetic(cmd, seed),
        Some(Command::IngestRatings(cmd)) => ingest_ratings(cmd),
        Some(Command::Factorize(cmd)) => factorize(cmd, seed),
        Some(Command::MakeMarkets(cmd)) => make_markets(cmd, seed),
        Some(Command::Price(cmd)) => price(cmd, seed),
        Some(Command::TrainPredictor(cmd)) => train_predictor(cmd, seed),
        Some(Command::LearnMask(cmd)) => learn_mask(cmd, seed),
        Some(Command::Evaluate(cmd)) => evaluate(cmd, seed),
        Some(Command::SweepMasks(cmd)) => sweep_masks(cmd, seed),
        Some(Command::TheoryCheck(cmd)) => theory_check(cmd, seed),
        Some(Command::Experiment(cmd)) => experiment(cmd, cli.seed),
        Some(Command::Verify(cmd)) => verify(cmd, cli.seed),
    }
}
