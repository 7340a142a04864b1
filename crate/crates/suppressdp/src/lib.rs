//! Differential privacy under Poisson sampling and record suppression.
//!
//! The crate bundles noise mechanisms, sampling and suppression algorithms,
//! closed-form accounting for amplification and degradation, exact oracles
//! that evaluate privacy loss on small explicit systems, and an experiment
//! harness for privacy/utility comparisons.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accounting;
pub mod domain;
pub mod error;
pub mod harness;
pub mod mechanisms;
pub mod oracle;
pub mod suppression;

pub use domain::{Database, PrivacyParams, RandomStream, Record, ValueBounds};
pub use error::{Error, Result};
