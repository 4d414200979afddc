//! Privacy mechanisms and accounting: randomized response with loss
//! debiasing, per-example clipping with Gaussian noise, Poisson sampling,
//! the Rényi accountant for the subsampled Gaussian mechanism, budget
//! splitting and group privacy.

mod budget;
mod mechanisms;
mod rdp;

pub use budget::{group_privacy, split_budget, user_level_calibrate, BudgetSplit, PrivacyBudget};
pub use mechanisms::{
    clip_and_noise, debias_coefficients, keep_probability, poisson_sample, randomized_response,
    ClipAccumulator,
};
pub use rdp::{
    calibrate_sigma, calibrate_sigma_with, compose_and_convert, default_orders, epsilon_for_sigma,
    rdp_subsampled_gaussian, Conversion, DpSgdParams, RdpCurve, SIGMA_BRACKET,
};
