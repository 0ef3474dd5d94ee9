//! Decongestion laboratory for unit-demand markets.
//!
//! Items are shown to users through a k-hot feature mask; users choose
//! greedily at posted prices, contested items are rationed uniformly, and
//! welfare is measured at true values. The crate provides the ground-truth
//! market mechanics, competitive-equilibrium pricing, the decongestion
//! welfare proxy, exhaustive mask enumeration, a differentiable mask
//! learner with its choice predictor, data generation and ingestion
//! pipelines, reference baselines, structural theory checks, and the
//! experiment harness behind the CLI.

pub mod baselines;
pub mod data;
pub mod error;
pub mod harness;
pub mod learner;
pub mod market;
pub mod objectives;
pub mod opt;
pub mod predictor;
pub mod pricing;
pub mod seed;
pub mod stats;
pub mod sweep;
pub mod tape;
pub mod theory;

pub use error::{Error, Result};
pub use market::{Allocation, AllocationKind, ChoiceProfile, Impute, Market, Mask, ValueView};
pub use pricing::{PriceScheme, PricingSolution};
