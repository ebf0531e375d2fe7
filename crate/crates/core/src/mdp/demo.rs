use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::FiniteMdp;
use crate::error::{Error, Result};
use crate::linalg;

pub const DEMO_SCHEMA_VERSION: u32 = 1;

/// One observed step. Serialized as `[state, action, next_state]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "(S, usize, S)", into = "(S, usize, S)")]
pub struct Transition<S: Copy> {
    pub state: S,
    pub action: usize,
    pub next_state: S,
}

impl<S: Copy> From<(S, usize, S)> for Transition<S> {
    fn from((state, action, next_state): (S, usize, S)) -> Self {
        Transition { state, action, next_state }
    }
}

impl<S: Copy> From<Transition<S>> for (S, usize, S) {
    fn from(t: Transition<S>) -> Self {
        (t.state, t.action, t.next_state)
    }
}

/// Expert demonstrations over discrete (`S = usize`) or real (`S = f64`) states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Demonstration<S: Copy = usize> {
    pub schema_version: u32,
    pub env_id: String,
    pub alpha: f64,
    pub seed: u64,
    pub transitions: Vec<Transition<S>>,
}

impl<S: Copy> Demonstration<S> {
    pub fn new(env_id: impl Into<String>, alpha: f64, seed: u64, transitions: Vec<Transition<S>>) -> Self {
        Demonstration {
            schema_version: DEMO_SCHEMA_VERSION,
            env_id: env_id.into(),
            alpha,
            seed,
            transitions,
        }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn with_env_id(mut self, id: impl Into<String>) -> Self {
        self.env_id = id.into();
        self
    }
}

impl Demonstration<usize> {
    /// Checks indices and that every step is possible under `mdp`.
    pub fn validate(&self, mdp: &FiniteMdp) -> Result<()> {
        for t in &self.transitions {
            if t.state >= mdp.n_states() || t.next_state >= mdp.n_states() || t.action >= mdp.n_actions() {
                return Err(Error::InvalidModel(format!("transition {t:?} out of bounds")));
            }
            if mdp.prob(t.state, t.action, t.next_state) <= 0.0 {
                return Err(Error::InvalidModel(format!("transition {t:?} has zero probability")));
            }
        }
        Ok(())
    }
}

fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // round-off: last index with positive mass
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}

/// Rolls out a stochastic policy `policy[s * |A| + a]` for exactly `n_steps`
/// transitions. Reaching a terminal state ends the episode and the next one
/// starts from the initial distribution; no action is recorded at terminals.
///
/// Each step consumes exactly one uniform for the action and one for the
/// successor, so policies that agree on the sampled action yield the same path.
pub fn rollout_with_policy(mdp: &FiniteMdp, policy: &[f64], n_steps: usize, seed: u64) -> Vec<Transition<usize>> {
    assert_eq!(policy.len(), mdp.n_pairs());
    let na = mdp.n_actions();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_steps);
    let mut s = sample_index(mdp.initial_dist(), rng.random());
    while out.len() < n_steps {
        if mdp.is_terminal(s) {
            s = sample_index(mdp.initial_dist(), rng.random());
            continue;
        }
        let a = sample_index(&policy[s * na..(s + 1) * na], rng.random());
        let next = sample_index(mdp.transition_row(s, a), rng.random());
        out.push(Transition { state: s, action: a, next_state: next });
        s = next;
    }
    out
}

/// Boltzmann-rational expert: `P(a|s) ∝ exp(alpha Q(s, a))`.
pub fn boltzmann_expert_rollout(mdp: &FiniteMdp, q: &[f64], alpha: f64, n_steps: usize, seed: u64) -> Demonstration {
    assert!(alpha >= 0.0, "rationality must be non-negative");
    let policy: Vec<f64> = q
        .chunks(mdp.n_actions())
        .flat_map(|row| linalg::softmax(row, alpha))
        .collect();
    let transitions = rollout_with_policy(mdp, &policy, n_steps, seed);
    Demonstration::new("custom", alpha, seed, transitions)
}
