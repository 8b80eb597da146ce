//! Bid landscape forecasting and CPA-constrained bid optimization.

pub mod auction_log;
pub mod baselines;
pub mod evalkit;
pub mod gsp_sim;
pub mod landscape;
pub mod optimizer;
