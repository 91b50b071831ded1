//! Baselines and post-hoc analysis of rater scores.

pub mod baselines;
pub mod distributions;
pub mod flops;
pub mod heuristics;
pub mod regression;
