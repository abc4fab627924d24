//! Demand-response budget allocation under an exponential response model.
//!
//! - [`model`]: reduction probability, jumps and the expected-reduction objective.
//! - [`allocator`]: greedy maximum-jump allocation, its weighted group variant,
//!   the uniform baseline and brute-force oracles.
//! - [`estimator`]: offer/success history and grid-search rate fitting.
//! - [`bandit`]: the optimistic learn-and-allocate loop and regret tracking.
//! - [`experiments`]: seeded multi-run drivers and their CSV/JSON output.
//! - [`gridsim`]: a synthetic grid of customer groups with capacity penalties.

pub mod allocator;
pub mod bandit;
pub mod error;
pub mod estimator;
pub mod experiments;
pub mod gridsim;
pub mod model;

pub use allocator::{
    brute_force_allocate, mjs_allocate, uniform_allocate, weighted_mjs_allocate, weighted_mjs_allocate_with,
    SelectionRule,
};
pub use bandit::{compute_regret, run_bandit, BanditConfig, BernoulliEnv, Environment, Learner, RegretTrace};
pub use error::{Error, Result};
pub use estimator::{linear_search, EstimatorState, History, LinearSearch, RateGrid};
pub use model::{expected_reduction, jump, reduction_probability, AgentProfile, Allocation, DiscountScale};
