//! Finite MDPs, forward planning and expert demonstrations.

mod demo;
mod gridworld;
mod lineworld;
mod solve;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use demo::{boltzmann_expert_rollout, rollout_with_policy, Demonstration, Transition};
pub use gridworld::{build_gridworld, gridworld_by_size, Action, Cell, Gridworld};
pub use lineworld::{
    lineworld_expert, lineworld_rollout, LineAction, LineRollout, LineWorld, StartDistribution,
};
pub use solve::{
    greedy_policy, optimal_q, policy_q_values, value_iteration, value_iteration_from,
    PolicyEvaluator,
};

use crate::error::{Error, Result};
use crate::linalg::CsrMatrix;

const ROW_TOL: f64 = 1e-9;

/// Tabular environment.
///
/// `transitions` is indexed `[s][a][s']`, flattened row-major. Terminal states
/// self-loop in the tensor, but the Bellman backups in this crate treat them
/// as episode ends: `Q(s, a) = R(s, a)` there.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "RawMdp", into = "RawMdp")]
pub struct FiniteMdp {
    n_states: usize,
    n_actions: usize,
    transitions: Vec<f64>,
    discount: f64,
    terminal: Vec<bool>,
    initial: Vec<f64>,
    features: Option<Vec<Vec<f64>>>,
    continuation: Arc<CsrMatrix>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMdp {
    n_states: usize,
    n_actions: usize,
    transitions: Vec<f64>,
    discount: f64,
    terminal_mask: Vec<bool>,
    initial_dist: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feature_map: Option<Vec<Vec<f64>>>,
}

impl TryFrom<RawMdp> for FiniteMdp {
    type Error = Error;

    fn try_from(raw: RawMdp) -> Result<Self> {
        let mdp = FiniteMdp::new(
            raw.n_states,
            raw.n_actions,
            raw.transitions,
            raw.discount,
            raw.terminal_mask,
            raw.initial_dist,
        )?;
        match raw.feature_map {
            Some(f) => mdp.with_features(f),
            None => Ok(mdp),
        }
    }
}

impl From<FiniteMdp> for RawMdp {
    fn from(m: FiniteMdp) -> Self {
        RawMdp {
            n_states: m.n_states,
            n_actions: m.n_actions,
            transitions: m.transitions,
            discount: m.discount,
            terminal_mask: m.terminal,
            initial_dist: m.initial,
            feature_map: m.features,
        }
    }
}

impl FiniteMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transitions: Vec<f64>,
        discount: f64,
        terminal: Vec<bool>,
        initial: Vec<f64>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::InvalidModel("need at least one state and action".into()));
        }
        if transitions.len() != n_states * n_actions * n_states {
            return Err(Error::Dimension {
                expected: n_states * n_actions * n_states,
                got: transitions.len(),
            });
        }
        // discount 0 is allowed: it is the myopic limit used by several checks
        if !(0.0..1.0).contains(&discount) {
            return Err(Error::InvalidModel(format!("discount {discount} not in [0, 1)")));
        }
        if terminal.len() != n_states || initial.len() != n_states {
            return Err(Error::Dimension { expected: n_states, got: terminal.len().min(initial.len()) });
        }
        for s in 0..n_states {
            for a in 0..n_actions {
                let row = &transitions[(s * n_actions + a) * n_states..][..n_states];
                if row.iter().any(|p| !(*p >= 0.0)) {
                    return Err(Error::InvalidModel(format!("negative probability in row ({s}, {a})")));
                }
                let total: f64 = row.iter().sum();
                if (total - 1.0).abs() > ROW_TOL {
                    return Err(Error::InvalidModel(format!("row ({s}, {a}) sums to {total}")));
                }
                if terminal[s] && (row[s] - 1.0).abs() > ROW_TOL {
                    return Err(Error::InvalidModel(format!("terminal state {s} must self-loop")));
                }
            }
        }
        let init_total: f64 = initial.iter().sum();
        if (init_total - 1.0).abs() > ROW_TOL || initial.iter().any(|p| *p < 0.0) {
            return Err(Error::InvalidModel("initial distribution is not a probability vector".into()));
        }
        let continuation = Arc::new(continuation_matrix(n_states, n_actions, &transitions, &terminal));
        Ok(FiniteMdp {
            n_states,
            n_actions,
            transitions,
            discount,
            terminal,
            initial,
            features: None,
            continuation,
        })
    }

    pub fn with_features(mut self, features: Vec<Vec<f64>>) -> Result<Self> {
        if features.len() != self.n_states {
            return Err(Error::Dimension { expected: self.n_states, got: features.len() });
        }
        self.features = Some(features);
        Ok(self)
    }

    /// Same dynamics with another discount.
    pub fn with_discount(&self, discount: f64) -> Result<Self> {
        let mut m = FiniteMdp::new(
            self.n_states,
            self.n_actions,
            self.transitions.clone(),
            discount,
            self.terminal.clone(),
            self.initial.clone(),
        )?;
        m.features = self.features.clone();
        Ok(m)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_pairs(&self) -> usize {
        self.n_states * self.n_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    pub fn terminal_mask(&self) -> &[bool] {
        &self.terminal
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial
    }

    pub fn features(&self) -> Option<&[Vec<f64>]> {
        self.features.as_deref()
    }

    /// Flat index of a state-action pair.
    #[inline]
    pub fn sa(&self, s: usize, a: usize) -> usize {
        s * self.n_actions + a
    }

    pub fn prob(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transitions[(s * self.n_actions + a) * self.n_states + next]
    }

    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        &self.transitions[(s * self.n_actions + a) * self.n_states..][..self.n_states]
    }

    pub fn transitions(&self) -> &[f64] {
        &self.transitions
    }

    /// `(|S||A|) x |S|` matrix of `p(s'|s,a)` with terminal source rows zeroed,
    /// i.e. the part of the dynamics that carries future value.
    pub fn continuation(&self) -> &Arc<CsrMatrix> {
        &self.continuation
    }

    /// True when every `(s, a)` has exactly one successor.
    pub fn is_deterministic(&self) -> bool {
        (0..self.n_pairs()).all(|i| {
            self.transitions[i * self.n_states..(i + 1) * self.n_states]
                .iter()
                .filter(|p| **p > 0.0)
                .count()
                == 1
        })
    }
}

fn continuation_matrix(n_states: usize, n_actions: usize, transitions: &[f64], terminal: &[bool]) -> CsrMatrix {
    let rows: Vec<Vec<(usize, f64)>> = (0..n_states * n_actions)
        .map(|i| {
            let s = i / n_actions;
            if terminal[s] {
                return Vec::new();
            }
            transitions[i * n_states..(i + 1) * n_states]
                .iter()
                .enumerate()
                .filter(|(_, p)| **p > 0.0)
                .map(|(j, p)| (j, *p))
                .collect()
        })
        .collect();
    CsrMatrix::from_rows(n_states, &rows)
}

/// Reward per state-action pair, state-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardTable {
    pub values: Vec<f64>,
    pub n_actions: usize,
}

impl RewardTable {
    pub fn new(values: Vec<f64>, n_actions: usize) -> Self {
        assert!(n_actions > 0 && values.len() % n_actions == 0);
        RewardTable { values, n_actions }
    }

    /// State-only reward replicated across actions.
    pub fn from_state_rewards(state_rewards: &[f64], n_actions: usize) -> Self {
        let values = state_rewards
            .iter()
            .flat_map(|&r| std::iter::repeat_n(r, n_actions))
            .collect();
        RewardTable { values, n_actions }
    }

    pub fn n_states(&self) -> usize {
        self.values.len() / self.n_actions
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    /// First action's reward per state; the state reward when replicated.
    pub fn state_rewards(&self) -> Vec<f64> {
        self.values.iter().step_by(self.n_actions).copied().collect()
    }
}

/// Environment addressed by string id.
#[derive(Debug, Clone)]
pub enum Environment {
    Grid(Gridworld),
    Line(LineWorld),
}

impl Environment {
    pub const IDS: [&'static str; 4] = ["gridworld3x3", "gridworld6x6", "gridworld12x12", "lineworld"];

    pub fn from_id(id: &str) -> Result<Self> {
        match id {
            "gridworld3x3" => Ok(Environment::Grid(gridworld_by_size(3)?)),
            "gridworld6x6" => Ok(Environment::Grid(gridworld_by_size(6)?)),
            "gridworld12x12" => Ok(Environment::Grid(gridworld_by_size(12)?)),
            "lineworld" => Ok(Environment::Line(LineWorld::default())),
            other => Err(Error::InvalidModel(format!(
                "unknown environment `{other}`; expected one of {:?}",
                Self::IDS
            ))),
        }
    }
}
