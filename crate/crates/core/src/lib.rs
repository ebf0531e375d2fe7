//! Bayesian inverse reinforcement learning by Markov chain Monte Carlo in
//! Q-value space.
//!
//! Rather than proposing rewards and solving a planning problem at every
//! step, the samplers here propose Q-values (or the parameters of a Q-network)
//! and invert the Bellman equation to recover the matching reward, which is
//! cheap and differentiable. Reward-space baselines (random-walk PolicyWalk
//! and its HMC variant) are included for comparison.
//!
//! Module map:
//! - [`mdp`]: finite MDPs, gridworlds, value iteration, expert rollouts, LineWorld
//! - [`grad`]: reverse-mode gradient tape
//! - [`sampler`]: NUTS, random-walk Metropolis, R-hat and ESS
//! - [`valuewalk`]: finite and continuous Q-space posteriors
//! - [`policywalk`]: reward-space baselines
//! - [`eval`]: KS tests, held-out metrics, brute-force oracles, reports
//! - [`experiment`]: demonstration generation, multi-chain runs, timing sweeps

pub mod error;
pub mod eval;
pub mod experiment;
pub mod grad;
pub mod linalg;
pub mod mdp;
pub mod policywalk;
pub mod sampler;
pub mod valuewalk;

pub use error::{Error, Result};
