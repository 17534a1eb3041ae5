//! Propensity-score stratification and clone matching for unit-level causal
//! effects of a binary intervention.
//!
//! The workflow follows the usual design-before-outcomes discipline:
//!
//! 1. [`dataset::load_dataset`] reads covariates, the intervention flag and a
//!    sealed outcome column.
//! 2. [`propensity::fit_propensity`] fits `e = P(Z=1|X)` by penalized logistic
//!    maximum likelihood and [`propensity::score`] produces `e` and the linear
//!    propensity `lp = log(e / (1 - e))`.
//! 3. [`design`] bins on `lp`, checks covariate balance within bins, trims
//!    units off common support and freezes the design.
//! 4. [`matching::match_units`] builds clone groups on `lp`.
//! 5. Only then does [`dataset::release_escrow`] expose outcomes, and
//!    [`effects`] turns clone groups into unit-level effects, targeting
//!    lists and decile comparisons.
//!
//! [`simulate`] generates synthetic populations with known effects for
//! checking the estimator end to end.

pub mod dataset;
pub mod design;
pub mod digest;
pub mod effects;
pub mod error;
pub mod linalg;
pub mod matching;
pub mod pipeline;
pub mod propensity;
pub mod simulate;
pub mod stats;

pub use error::{Error, Result};
