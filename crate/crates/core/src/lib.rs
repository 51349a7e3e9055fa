//! Token-level reward reinforcement learning for attribute-controllable
//! sequence generation, at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! - [`types`]: vocabulary, sequences and annotated trajectories.
//! - [`scorers`]: attribute classifiers and the per-token probability-shift reward.
//! - [`pool`]: the exploration data pool with per-entry lifetimes.
//! - [`shaping`]: quantile bucketing followed by bounded in-interval noise.
//! - [`policy`]: a small k-gram autoregressive policy with analytic gradients.
//! - [`learner`]: the entropy/KL regularised policy-gradient update and the
//!   explore / shape / learn episode loop.
//! - [`weigher`]: learned per-token aggregation of several attribute rewards.
//! - [`oracle`]: exact brute-force references used by tests and `oracle-check`.
//! - [`metrics`] and [`experiment`]: evaluation metrics, configs, runs and sweeps.

pub mod error;
pub mod experiment;
pub mod learner;
pub mod metrics;
pub mod optim;
pub mod oracle;
pub mod policy;
pub mod pool;
pub mod rng;
pub mod scorers;
pub mod shaping;
pub mod task;
pub mod types;
pub mod weigher;

pub use error::{Error, Result};
pub use types::{Sequence, TokenId, Trajectory, Vocabulary};

/// Logistic sigmoid.
#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
