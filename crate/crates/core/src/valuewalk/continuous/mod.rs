//! ValueWalk with a Q-network: MCMC over network parameters with a
//! Gaussian-process prior on the rewards they imply at evaluation points.

mod actions;
mod gp;
mod mlp;
mod successor;

use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

pub use actions::{discretize_actions, discretized_log_likelihood, ActionBox};
pub use gp::{gp_log_prior, EvalPoint, GpFactor, GpRewardPrior, RewardKernel};
pub use mlp::{q_forward, MlpArchitecture};
pub use successor::{ContinuousTransition, FiniteMdpModel, SuccessorModel, TransitionModel};

use super::finite::likelihood_on_tape;
use crate::error::{Error, Result};
use crate::grad::{grad_with, Shape, Tape, Var};
use crate::linalg::CsrMatrix;
use crate::mdp::{Demonstration, FiniteMdp, LineWorld};
use crate::sampler::Evaluation;
use mlp::TapeMlp;
use successor::feature_key;

/// Everything that defines the continuous posterior.
#[derive(Debug, Clone)]
pub struct ContinuousPosteriorSpec {
    pub arch: MlpArchitecture,
    /// Expert transitions; these drive the likelihood.
    pub demos: Vec<ContinuousTransition>,
    /// Further transitions available to the singleton successor model.
    pub extra: Vec<ContinuousTransition>,
    pub eval_points: Vec<EvalPoint>,
    pub prior: GpRewardPrior,
    pub model: SuccessorModel,
    pub alpha: f64,
    pub discount: f64,
    /// Independent normal prior on every network parameter. Without it,
    /// directions that leave the rewards and the likelihood unchanged (dead
    /// hidden units, for one) make the posterior improper.
    pub weight_prior_std: Option<f64>,
}

impl ContinuousPosteriorSpec {
    /// Defaults: evaluation points are the distinct demonstrated state-action
    /// pairs, singleton successors, RBF prior, `alpha = 3`.
    pub fn new(arch: MlpArchitecture, demos: Vec<ContinuousTransition>, discount: f64) -> Self {
        let eval_points = distinct_pairs(&demos);
        ContinuousPosteriorSpec {
            arch,
            demos,
            extra: Vec::new(),
            eval_points,
            prior: GpRewardPrior::default(),
            model: SuccessorModel::Singleton,
            alpha: 3.0,
            discount,
            weight_prior_std: Some(1.0),
        }
    }

    /// LineWorld setup: one hidden layer of 8 units over the position.
    pub fn lineworld(world: &LineWorld, demo: &Demonstration<f64>) -> Self {
        let arch = MlpArchitecture::new(1, vec![8], LineWorld::N_ACTIONS);
        Self::new(arch, line_transitions(world, demo), world.discount)
    }

    /// A finite MDP embedded in feature space: a linear Q head, one
    /// evaluation point per state-action pair, successors drawn from the true
    /// dynamics and an independent `N(0, prior_std^2)` reward prior.
    pub fn finite_embedding(
        mdp: &FiniteMdp,
        features: Vec<Vec<f64>>,
        demos: &Demonstration,
        prior_std: f64,
        n_draws: usize,
        seed: u64,
    ) -> Result<Self> {
        demos.validate(mdp)?;
        let dim = features.first().map_or(0, Vec::len);
        let model = FiniteMdpModel::new(mdp.clone(), features.clone())?;
        let demos_c = demos
            .transitions
            .iter()
            .map(|t| ContinuousTransition {
                features: features[t.state].clone(),
                action: t.action,
                next_features: features[t.next_state].clone(),
                done: false,
            })
            .collect();
        let eval_points = (0..mdp.n_pairs())
            .map(|i| {
                let s = i / mdp.n_actions();
                EvalPoint { features: features[s].clone(), action: i % mdp.n_actions(), terminal: mdp.is_terminal(s) }
            })
            .collect();
        Ok(ContinuousPosteriorSpec {
            arch: MlpArchitecture::linear(dim, mdp.n_actions()),
            demos: demos_c,
            extra: Vec::new(),
            eval_points,
            prior: GpRewardPrior::diagonal(prior_std * prior_std),
            model: SuccessorModel::Sampler { model: Arc::new(model), n_draws, seed },
            alpha: 3.0,
            discount: mdp.discount(),
            weight_prior_std: None,
        })
    }

    /// Evaluation points at every action of each demonstrated state, with
    /// successors drawn from `model`. Rewards of actions the expert never took
    /// then carry the prior too, which pins down their Q-values.
    pub fn with_all_actions(mut self, model: Arc<dyn TransitionModel>, n_draws: usize, seed: u64) -> Self {
        let mut points: Vec<EvalPoint> = Vec::new();
        let mut seen = HashMap::new();
        for t in &self.demos {
            if seen.insert(feature_key(&t.features), ()).is_none() {
                points.extend((0..self.arch.output_dim).map(|a| EvalPoint::new(t.features.clone(), a)));
            }
        }
        self.eval_points = points;
        self.model = SuccessorModel::Sampler { model, n_draws, seed };
        self
    }

    pub fn dim(&self) -> usize {
        self.arch.n_params()
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if !(self.alpha >= 0.0) || !(0.0..1.0).contains(&self.discount) {
            return Err(Error::InvalidModel(format!(
                "need alpha >= 0 and discount in [0, 1), got {} and {}",
                self.alpha, self.discount
            )));
        }
        if self.eval_points.is_empty() {
            return Err(Error::InvalidModel("no evaluation points".into()));
        }
        if let Some(sd) = self.weight_prior_std {
            if !(sd > 0.0) {
                return Err(Error::InvalidModel(format!("weight prior std {sd} must be positive")));
            }
        }
        let (d, na) = (self.arch.input_dim, self.arch.output_dim);
        let check = |f: &[f64], a: usize| -> Result<()> {
            if f.len() != d {
                return Err(Error::Dimension { expected: d, got: f.len() });
            }
            if a >= na {
                return Err(Error::InvalidModel(format!("action {a} out of range for {na} actions")));
            }
            Ok(())
        };
        for t in self.demos.iter().chain(&self.extra) {
            check(&t.features, t.action)?;
            check(&t.next_features, 0)?;
        }
        for p in &self.eval_points {
            check(&p.features, p.action)?;
        }
        Ok(())
    }
}

/// Distinct `(features, action)` pairs in order of first appearance.
pub fn distinct_pairs(transitions: &[ContinuousTransition]) -> Vec<EvalPoint> {
    let mut seen = HashMap::new();
    let mut out = Vec::new();
    for t in transitions {
        if seen.insert((feature_key(&t.features), t.action), ()).is_none() {
            out.push(EvalPoint::new(t.features.clone(), t.action));
        }
    }
    out
}

/// LineWorld positions mapped to features; arriving in the goal ends the episode.
pub fn line_transitions(world: &LineWorld, demo: &Demonstration<f64>) -> Vec<ContinuousTransition> {
    demo.transitions
        .iter()
        .map(|t| ContinuousTransition {
            features: world.features(t.state),
            action: t.action,
            next_features: world.features(t.next_state),
            done: world.in_goal(t.next_state),
        })
        .collect()
}

/// Precomputed continuous posterior; immutable and shareable across chains.
///
/// Demonstrated states, evaluation points and successor states are stacked
/// into one feature matrix so each evaluation runs the network once.
#[derive(Debug, Clone)]
pub struct ContinuousPosterior {
    spec: ContinuousPosteriorSpec,
    net: TapeMlp,
    stacked: Vec<f64>,
    n_rows: usize,
    demo_idx: Arc<[usize]>,
    eval_idx: Arc<[usize]>,
    succ_idx: Arc<[usize]>,
    n_demo_states: usize,
    n_succ: usize,
    counts_sa: Vec<f64>,
    counts_s: Vec<f64>,
    averaging: Arc<CsrMatrix>,
    factor: GpFactor,
}

impl ContinuousPosterior {
    pub fn new(spec: ContinuousPosteriorSpec) -> Result<Self> {
        spec.validate()?;
        let na = spec.arch.output_dim;
        let mut pool = spec.demos.clone();
        pool.extend(spec.extra.iter().cloned());
        let succ = if spec.discount == 0.0 {
            // no continuation, so no successors are needed
            successor::resolve(&spec.model, &[], &pool)?
        } else {
            successor::resolve(&spec.model, &spec.eval_points, &pool)?
        };
        let factor = spec.prior.factorize(&spec.eval_points)?;

        let mut states: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut stacked = Vec::new();
        let mut counts_sa = Vec::new();
        let mut counts_s = Vec::new();
        for t in &spec.demos {
            let k = *states.entry(feature_key(&t.features)).or_insert_with(|| {
                stacked.extend_from_slice(&t.features);
                counts_sa.extend(std::iter::repeat_n(0.0, na));
                counts_s.push(0.0);
                counts_s.len() - 1
            });
            counts_sa[k * na + t.action] += 1.0;
            counts_s[k] += 1.0;
        }
        let n_demo_states = counts_s.len();
        let demo_idx = (0..n_demo_states * na).collect();
        let eval_idx = spec
            .eval_points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                stacked.extend_from_slice(&p.features);
                (n_demo_states + i) * na + p.action
            })
            .collect();
        let first_succ = n_demo_states + spec.eval_points.len();
        for f in &succ.features {
            stacked.extend_from_slice(f);
        }
        let n_succ = succ.features.len();
        let succ_idx = (first_succ * na..(first_succ + n_succ) * na).collect();
        Ok(ContinuousPosterior {
            net: TapeMlp::new(&spec.arch),
            n_rows: first_succ + n_succ,
            stacked,
            demo_idx,
            eval_idx,
            succ_idx,
            n_demo_states,
            n_succ,
            counts_sa,
            counts_s,
            averaging: Arc::new(succ.averaging),
            factor,
            spec,
        })
    }

    pub fn spec(&self) -> &ContinuousPosteriorSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.dim()
    }

    pub fn n_eval_points(&self) -> usize {
        self.spec.eval_points.len()
    }

    fn rewards_on_tape(&self, t: &mut Tape, theta: Var) -> (Var, Var) {
        let na = self.spec.arch.output_dim;
        let x = t.constant(self.stacked.clone(), Shape::new(self.n_rows, self.spec.arch.input_dim));
        let q = self.net.forward(t, theta, x);
        let q = t.reshape(q, Shape::col(self.n_rows * na));
        let q_eval = t.gather(q, &self.eval_idx);
        let reward = if self.n_succ > 0 && self.spec.discount > 0.0 {
            let qs = t.gather(q, &self.succ_idx);
            let qs = t.reshape(qs, Shape::new(self.n_succ, na));
            let v = t.row_max(qs);
            let cont = t.sparse_matvec(&self.averaging, v);
            let cont = t.scale(cont, self.spec.discount);
            t.sub(q_eval, cont)
        } else {
            q_eval
        };
        (q, reward)
    }

    /// Log posterior and gradient; aux holds the reward at each evaluation point.
    pub fn evaluate(&self, theta: &[f64]) -> Result<Evaluation> {
        self.spec.arch.check_theta(theta)?;
        let na = self.spec.arch.output_dim;
        let (logp, grad, aux) = grad_with(theta, |t, x| {
            let (q, reward) = self.rewards_on_tape(t, x);
            let mut lp = self.factor.on_tape(t, reward);
            if self.n_demo_states > 0 {
                let qd = t.gather(q, &self.demo_idx);
                let qd = t.reshape(qd, Shape::new(self.n_demo_states, na));
                let ll = likelihood_on_tape(t, qd, self.spec.alpha, &self.counts_sa, &self.counts_s);
                lp = t.add(lp, ll);
            }
            if let Some(sd) = self.spec.weight_prior_std {
                let ss = t.dot(x, x);
                let wp = t.scale(ss, -0.5 / (sd * sd));
                let c = t.scalar(-(theta.len() as f64) * (sd.ln() + 0.5 * (2.0 * PI).ln()));
                let wp = t.add(wp, c);
                lp = t.add(lp, wp);
            }
            (lp, t.value(reward).to_vec())
        })?;
        Ok(Evaluation::new(logp, grad).with_aux(aux))
    }

    pub fn log_density(&self, theta: &[f64]) -> Result<f64> {
        Ok(self.evaluate(theta)?.logp)
    }

    /// Reward candidate at each evaluation point.
    pub fn reward_candidates(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.spec.arch.check_theta(theta)?;
        let mut t = Tape::new();
        let x = t.input(theta);
        let (_, r) = self.rewards_on_tape(&mut t, x);
        Ok(t.value(r).to_vec())
    }

    /// Mean Boltzmann log-likelihood per transition of held-out data.
    pub fn mean_log_likelihood(&self, theta: &[f64], data: &[ContinuousTransition]) -> Result<f64> {
        let mut total = 0.0;
        for tr in data {
            let q = q_forward(&self.spec.arch, theta, &tr.features)?;
            total += action_log_prob(&q, tr.action, self.spec.alpha);
        }
        Ok(total / data.len().max(1) as f64)
    }
}

pub(crate) fn action_log_prob(q: &[f64], action: usize, alpha: f64) -> f64 {
    let scaled: Vec<f64> = q.iter().map(|x| alpha * x).collect();
    scaled[action] - crate::linalg::logsumexp(&scaled)
}

/// Log posterior and reward candidates for a single parameter vector.
pub fn log_posterior_continuous(theta: &[f64], spec: &ContinuousPosteriorSpec) -> Result<(f64, Vec<f64>)> {
    let post = ContinuousPosterior::new(spec.clone())?;
    let e = post.evaluate(theta)?;
    Ok((e.logp, e.aux.unwrap_or_default()))
}

/// Reward at each evaluation point implied by `theta`.
pub fn reward_candidates(theta: &[f64], spec: &ContinuousPosteriorSpec) -> Result<Vec<f64>> {
    ContinuousPosterior::new(spec.clone())?.reward_candidates(theta)
}

/// Acts by the largest per-action posterior median of Q; ties go to the
/// lowest action index.
#[derive(Debug, Clone)]
pub struct Apprentice {
    arch: MlpArchitecture,
    samples: Vec<Vec<f64>>,
}

impl Apprentice {
    pub fn new(arch: MlpArchitecture, samples: Vec<Vec<f64>>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidModel("the apprentice needs at least one posterior sample".into()));
        }
        for s in &samples {
            arch.check_theta(s)?;
        }
        Ok(Apprentice { arch, samples })
    }

    pub fn median_q(&self, features: &[f64]) -> Result<Vec<f64>> {
        let mut per_action = vec![Vec::with_capacity(self.samples.len()); self.arch.output_dim];
        for theta in &self.samples {
            for (a, q) in q_forward(&self.arch, theta, features)?.into_iter().enumerate() {
                per_action[a].push(q);
            }
        }
        Ok(per_action.into_iter().map(|mut v| median(&mut v)).collect())
    }

    pub fn act(&self, features: &[f64]) -> Result<usize> {
        let m = self.median_q(features)?;
        let mut best = 0;
        for (a, q) in m.iter().enumerate() {
            if *q > m[best] {
                best = a;
            }
        }
        Ok(best)
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Action chosen by the posterior-median rule at one feature vector.
pub fn apprentice_policy(arch: &MlpArchitecture, samples: &[Vec<f64>], features: &[f64]) -> Result<usize> {
    Apprentice::new(arch.clone(), samples.to_vec())?.act(features)
}
