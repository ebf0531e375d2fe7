//! Q-space posteriors: tabular and function-approximation variants.

pub mod continuous;
pub(crate) mod finite;
mod unknown;

pub use finite::{
    greedy_policy_matrix, joint_kernel, log_det_term, log_likelihood, log_posterior_finite, policy_from_q,
    reward_from_q, ContinuationPolicy, DetCache, DetMode, FinitePosterior, FinitePosteriorSpec, NormalPrior,
    ValueSpace,
};
pub use unknown::{
    empirical_transition_shortcut, EmpiricalTransitions, UnknownTransitionPosterior, UnknownTransitionSpec,
};

use std::cell::RefCell;

use crate::error::Result;
use crate::sampler::{nuts_sample, ChainResult, SamplerConfig};
use continuous::ContinuousPosterior;

/// NUTS over Q-values. Draws carry the implied reward as aux.
pub fn valuewalk_nuts(post: &FinitePosterior, config: &SamplerConfig) -> Result<ChainResult> {
    let cache = RefCell::new(DetCache::default());
    nuts_sample(|theta: &[f64]| post.evaluate(theta, &mut cache.borrow_mut()), config)
}

/// NUTS over Q-network parameters; aux holds the rewards at the evaluation points.
pub fn valuewalk_continuous_nuts(post: &ContinuousPosterior, config: &SamplerConfig) -> Result<ChainResult> {
    nuts_sample(|theta: &[f64]| post.evaluate(theta), config)
}
