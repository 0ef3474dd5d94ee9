//! Exhaustive mask search on small markets.
//!
//! Enumerates all C(d,k) masks in lexicographic order, scores each under a
//! family of objectives — the welfare oracle down to the observable proxy —
//! and reports per-mask diagnostics for correlation studies. Intended for
//! d small enough to enumerate; the gradient-based search in [`crate::learner`]
//! covers the rest.

use std::io::Write;
use std::sync::Arc;

use itertools::Itertools;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{self, Impute, Market, Mask};
use crate::objectives;
use crate::pricing::PriceScheme;

/// Objectives a mask can be optimized for. All are maximized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ObjectiveKind {
    /// Expected true welfare of the induced choices (needs preferences).
    WelfareOracle,
    /// Σ_i v_{i, y_i(μ)}: each user's true value at its chosen item,
    /// ignoring supply conflicts (needs preferences).
    PredictiveOracle,
    /// Price revenue of demanded items only.
    SelectionOnly,
    /// Negated excess demand, so that 0 (no congestion) is the maximum.
    DecongestionOnly,
    /// selection − congestion: the certified welfare lower bound.
    LowerBound,
    /// (1−λ)·selection − λ·(congestion + no-choice count).
    Proxy { lambda: f64 },
}

impl ObjectiveKind {
    pub fn label(&self) -> String {
        match self {
            ObjectiveKind::WelfareOracle => "welfare_oracle".into(),
            ObjectiveKind::PredictiveOracle => "predictive_oracle".into(),
            ObjectiveKind::SelectionOnly => "selection_only".into(),
            ObjectiveKind::DecongestionOnly => "decongestion_only".into(),
            ObjectiveKind::LowerBound => "lower_bound".into(),
            ObjectiveKind::Proxy { lambda } => format!("proxy_lambda_{lambda}"),
        }
    }

    fn needs_preferences(&self) -> bool {
        matches!(self, ObjectiveKind::WelfareOracle | ObjectiveKind::PredictiveOracle)
    }
}

/// Score one mask under one objective, using the market's own rational
/// choices (equivalently: a perfectly accurate choice predictor).
pub fn evaluate_mask(market: &Market, mask: &Mask, kind: ObjectiveKind) -> Result<f64> {
    let outcome = market::mask_outcome(market, mask, Impute::Zero)?;
    evaluate_outcome(market, &outcome, kind)
}

fn evaluate_outcome(market: &Market, outcome: &market::MaskOutcome, kind: ObjectiveKind) -> Result<f64> {
    if kind.needs_preferences() && market.preferences().is_none() && market.value_override().is_none()
    {
        return Err(Error::MissingPreferences("value-dependent mask objective"));
    }
    let value = match kind {
        ObjectiveKind::WelfareOracle => outcome.welfare,
        ObjectiveKind::PredictiveOracle => {
            let values = &outcome.view.true_values;
            (0..market.n())
                .filter_map(|i| outcome.choices.item_of(i).map(|j| values[(i, j)]))
                .sum()
        }
        ObjectiveKind::SelectionOnly => {
            objectives::proxy(market.prices(), &outcome.choices, 0.5)?.selection
        }
        ObjectiveKind::DecongestionOnly => -(outcome.congestion as f64),
        ObjectiveKind::LowerBound => {
            objectives::proxy(market.prices(), &outcome.choices, 0.5)?.lower_bound
        }
        ObjectiveKind::Proxy { lambda } => {
            objectives::proxy(market.prices(), &outcome.choices, lambda)?.combined
        }
    };
    Ok(value)
}

/// One enumerated mask with its score and diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskRecord {
    pub mask: Mask,
    pub objective: f64,
    pub welfare: f64,
    pub congestion: usize,
    pub allocated_items: usize,
    pub distortion: Option<f64>,
    pub kendalls_w: Option<f64>,
}

/// Full enumeration under one objective. `records` is in lexicographic
/// mask order; `argmax` indexes every record within 1e-12 of the maximum.
#[derive(Debug, Clone)]
pub struct MaskSweepResult {
    pub kind: ObjectiveKind,
    pub records: Vec<MaskRecord>,
    pub argmax: Vec<usize>,
}

impl MaskSweepResult {
    /// The lexicographically first maximizer.
    pub fn best(&self) -> &MaskRecord {
        &self.records[self.argmax[0]]
    }

    /// Among tied maximizers, the one with the lowest true welfare —
    /// the adversarial representative of the argmax set.
    pub fn worst_tied(&self) -> &MaskRecord {
        self.argmax
            .iter()
            .map(|&i| &self.records[i])
            .min_by(|a, b| a.welfare.total_cmp(&b.welfare))
            .expect("argmax set non-empty")
    }

    /// One row per mask. Columns: mask bits, objective value, true welfare,
    /// congestion, allocated item count, distortion, Kendall's W, argmax flag.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "mask,objective,welfare,congestion,allocated_items,distortion,kendalls_w,is_argmax")?;
        for (idx, r) in self.records.iter().enumerate() {
            let bits: String = r.mask.bits().iter().map(|b| char::from(b'0' + b)).collect();
            writeln!(
                w,
                "{bits},{},{},{},{},{},{},{}",
                r.objective,
                r.welfare,
                r.congestion,
                r.allocated_items,
                r.distortion.map_or(String::new(), |v| v.to_string()),
                r.kendalls_w.map_or(String::new(), |v| v.to_string()),
                self.argmax.binary_search(&idx).is_ok() as u8,
            )?;
        }
        Ok(())
    }
}

/// Optional work per mask and the enumeration size guard.
#[derive(Debug, Clone)]
pub struct SweepOptions {
    /// Refuse to enumerate more than this many masks.
    pub cap: u64,
    /// Record (1/m)|p~ − p|_1 with prices re-derived from perceived values.
    pub with_distortion: bool,
    pub distortion_pricer: PriceScheme,
    /// Record cross-user rank concordance of perceived values.
    pub with_kendalls_w: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            cap: 1_000_000,
            with_distortion: false,
            distortion_pricer: PriceScheme::CeMid,
            with_kendalls_w: false,
        }
    }
}

fn binomial(d: u64, k: u64) -> u128 {
    if k > d {
        return 0;
    }
    let k = k.min(d - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (d - i) as u128 / (i + 1) as u128;
    }
    acc
}

/// Enumerate every k-subset mask and score it under each objective.
/// Diagnostics are shared across objectives; records come back in
/// lexicographic order regardless of parallel execution.
pub fn sweep(
    market: &Market,
    k: usize,
    kinds: &[ObjectiveKind],
    options: &SweepOptions,
) -> Result<Vec<MaskSweepResult>> {
    let d = market.d();
    if k > d {
        return Err(Error::invalid(format!("k={k} exceeds d={d}")));
    }
    if kinds.is_empty() {
        return Err(Error::invalid("sweep needs at least one objective"));
    }
    let count = binomial(d as u64, k as u64);
    if count > options.cap as u128 {
        return Err(Error::EnumerationTooLarge(format!(
            "C({d},{k}) = {count} masks exceeds the cap of {}; use the gradient-based mask search instead",
            options.cap
        )));
    }

    let masks: Vec<Mask> = (0..d)
        .combinations(k)
        .map(|on| Mask::from_indices(d, &on).expect("valid combination"))
        .collect();

    let market = Arc::new(market.clone());
    let rows: Vec<Result<(Vec<f64>, MaskRecord)>> = masks
        .into_par_iter()
        .map(|mask| {
            let outcome = market::mask_outcome(&market, &mask, Impute::Zero)?;
            let objectives: Vec<f64> = kinds
                .iter()
                .map(|&kind| evaluate_outcome(&market, &outcome, kind))
                .collect::<Result<_>>()?;
            let distortion = if options.with_distortion {
                Some(market::perceptive_distortion(&market, &mask, &options.distortion_pricer)?)
            } else {
                None
            };
            let kendalls_w = if options.with_kendalls_w {
                Some(market::kendalls_w(&outcome.view)?)
            } else {
                None
            };
            let record = MaskRecord {
                mask,
                objective: f64::NAN,
                welfare: outcome.welfare,
                congestion: outcome.congestion,
                allocated_items: outcome.allocated_items,
                distortion,
                kendalls_w,
            };
            Ok((objectives, record))
        })
        .collect();

    let mut per_mask: Vec<(Vec<f64>, MaskRecord)> = Vec::with_capacity(rows.len());
    for row in rows {
        per_mask.push(row?);
    }

    let results = kinds
        .iter()
        .enumerate()
        .map(|(kind_idx, &kind)| {
            let records: Vec<MaskRecord> = per_mask
                .iter()
                .map(|(objs, rec)| MaskRecord { objective: objs[kind_idx], ..rec.clone() })
                .collect();
            let max = records.iter().map(|r| r.objective).fold(f64::NEG_INFINITY, f64::max);
            let argmax: Vec<usize> = records
                .iter()
                .enumerate()
                .filter(|(_, r)| r.objective >= max - 1e-12)
                .map(|(i, _)| i)
                .collect();
            MaskSweepResult { kind, records, argmax }
        })
        .collect();
    Ok(results)
}

/// Convenience: best mask for a single objective.
pub fn best_mask(market: &Market, k: usize, kind: ObjectiveKind, options: &SweepOptions) -> Result<Mask> {
    let results = sweep(market, k, &[kind], options)?;
    Ok(results[0].best().mask.clone())
}
