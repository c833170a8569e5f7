//! Bias auditing and case-prompting mitigation for LLM-based ICU mortality
//! prediction.

pub mod baseline;
pub mod caselib;
pub mod client;
pub mod cohort;
pub mod error;
pub mod fairness;
pub mod judge;
pub mod metrics;
pub mod pipeline;
pub mod prompting;
pub mod reliance;
pub mod retrieval;
pub mod util;

pub use error::{Error, Result};
