use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::gp::EvalPoint;
use crate::error::{Error, Result};
use crate::linalg::CsrMatrix;
use crate::mdp::{FiniteMdp, LineWorld};

/// One observed step in feature space. `done` means the episode ended on
/// arrival, so the successor contributes no future value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousTransition {
    pub features: Vec<f64>,
    pub action: usize,
    pub next_features: Vec<f64>,
    #[serde(default)]
    pub done: bool,
}

/// Generative model of the dynamics in feature space.
pub trait TransitionModel: Send + Sync {
    /// Draws successor features and whether the episode ends there.
    fn sample(&self, features: &[f64], action: usize, rng: &mut dyn RngCore) -> Result<(Vec<f64>, bool)>;

    /// Log density of a successor, when the model has one.
    fn log_density(&self, _features: &[f64], _action: usize, _next: &[f64]) -> Option<f64> {
        None
    }
}

/// How successor states are chosen for the Bellman backup at each
/// evaluation point. Draws are made once, when the posterior is built.
#[derive(Clone)]
pub enum SuccessorModel {
    /// The observed successors of the same state and action.
    Singleton,
    /// `n_draws` equally weighted draws from a model.
    Sampler { model: Arc<dyn TransitionModel>, n_draws: usize, seed: u64 },
    /// Draws from `proposal` weighted by `target / proposal` densities.
    Importance {
        target: Arc<dyn TransitionModel>,
        proposal: Arc<dyn TransitionModel>,
        n_draws: usize,
        seed: u64,
    },
}

impl fmt::Debug for SuccessorModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SuccessorModel::Singleton => write!(f, "Singleton"),
            SuccessorModel::Sampler { n_draws, seed, .. } => write!(f, "Sampler {{ n_draws: {n_draws}, seed: {seed} }}"),
            SuccessorModel::Importance { n_draws, seed, .. } => {
                write!(f, "Importance {{ n_draws: {n_draws}, seed: {seed} }}")
            }
        }
    }
}

pub(crate) fn feature_key(features: &[f64]) -> Vec<u64> {
    features.iter().map(|x| if *x == 0.0 { 0 } else { x.to_bits() }).collect()
}

/// Successor features and the averaging weights that map their values to
/// one continuation per evaluation point.
pub(crate) struct SuccessorSets {
    pub features: Vec<Vec<f64>>,
    pub averaging: CsrMatrix,
}

pub(crate) fn resolve(
    model: &SuccessorModel,
    points: &[EvalPoint],
    transitions: &[ContinuousTransition],
) -> Result<SuccessorSets> {
    let mut features = Vec::new();
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::with_capacity(points.len());
    let mut observed: HashMap<(Vec<u64>, usize), Vec<usize>> = HashMap::new();
    if matches!(model, SuccessorModel::Singleton) {
        for (i, t) in transitions.iter().enumerate() {
            observed.entry((feature_key(&t.features), t.action)).or_default().push(i);
        }
    }
    for (i, p) in points.iter().enumerate() {
        let mut row = Vec::new();
        if p.terminal {
            rows.push(row);
            continue;
        }
        // (features, done, weight) before averaging
        let draws: Vec<(Vec<f64>, bool, f64)> = match model {
            SuccessorModel::Singleton => observed
                .get(&(feature_key(&p.features), p.action))
                .ok_or(Error::UnobservedEvalPoint(i))?
                .iter()
                .map(|&k| (transitions[k].next_features.clone(), transitions[k].done, 1.0))
                .collect(),
            SuccessorModel::Sampler { model, n_draws, seed } => {
                let mut rng = point_rng(*seed, i);
                (0..*n_draws)
                    .map(|_| model.sample(&p.features, p.action, &mut rng).map(|(f, d)| (f, d, 1.0)))
                    .collect::<Result<_>>()?
            }
            SuccessorModel::Importance { target, proposal, n_draws, seed } => {
                let mut rng = point_rng(*seed, i);
                let mut out = Vec::with_capacity(*n_draws);
                for _ in 0..*n_draws {
                    let (f, d) = proposal.sample(&p.features, p.action, &mut rng)?;
                    let lt = target.log_density(&p.features, p.action, &f);
                    let lq = proposal.log_density(&p.features, p.action, &f);
                    let (Some(lt), Some(lq)) = (lt, lq) else {
                        return Err(Error::InvalidModel("importance weighting needs model densities".into()));
                    };
                    let w = (lt - lq).exp();
                    if !w.is_finite() {
                        return Err(Error::InvalidModel(format!("importance weight {w} at evaluation point {i}")));
                    }
                    out.push((f, d, w));
                }
                out
            }
        };
        if draws.is_empty() {
            return Err(Error::InvalidModel("successor models need at least one draw".into()));
        }
        let n = draws.len() as f64;
        for (f, done, w) in draws {
            if !done {
                row.push((features.len(), w / n));
                features.push(f);
            }
        }
        rows.push(row);
    }
    Ok(SuccessorSets { averaging: CsrMatrix::from_rows(features.len(), &rows), features })
}

fn point_rng(seed: u64, point: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(point as u64);
    rng
}

impl TransitionModel for LineWorld {
    fn sample(&self, features: &[f64], action: usize, _rng: &mut dyn RngCore) -> Result<(Vec<f64>, bool)> {
        let (next, _, done) = self.step(features[0], action);
        Ok((self.features(next), done))
    }
}

/// A finite MDP seen through per-state feature vectors. Successors are never
/// marked done; terminal states are handled by the evaluation points.
#[derive(Debug, Clone)]
pub struct FiniteMdpModel {
    mdp: FiniteMdp,
    features: Vec<Vec<f64>>,
    index: HashMap<Vec<u64>, usize>,
}

impl FiniteMdpModel {
    pub fn new(mdp: FiniteMdp, features: Vec<Vec<f64>>) -> Result<Self> {
        if features.len() != mdp.n_states() {
            return Err(Error::Dimension { expected: mdp.n_states(), got: features.len() });
        }
        let index: HashMap<Vec<u64>, usize> = features.iter().enumerate().map(|(s, f)| (feature_key(f), s)).collect();
        if index.len() != features.len() {
            return Err(Error::InvalidModel("state features must be distinct".into()));
        }
        Ok(FiniteMdpModel { mdp, features, index })
    }

    pub fn state_of(&self, features: &[f64]) -> Option<usize> {
        self.index.get(&feature_key(features)).copied()
    }
}

impl TransitionModel for FiniteMdpModel {
    fn sample(&self, features: &[f64], action: usize, rng: &mut dyn RngCore) -> Result<(Vec<f64>, bool)> {
        let s = self
            .state_of(features)
            .ok_or_else(|| Error::InvalidModel("features do not match any state".into()))?;
        let row = self.mdp.transition_row(s, action);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut next = row.len() - 1;
        for (j, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                next = j;
                break;
            }
        }
        Ok((self.features[next].clone(), false))
    }

    fn log_density(&self, features: &[f64], action: usize, next: &[f64]) -> Option<f64> {
        let s = self.state_of(features)?;
        let n = self.state_of(next)?;
        Some(self.mdp.prob(s, action, n).ln())
    }
}
