//! Experiment plumbing shared by the command-line driver and the
//! acceptance suite: demonstration generation, multi-chain runs of every
//! method, timing sweeps and held-out splits.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{heldout_metrics, HeldoutMetrics};
use crate::mdp::{
    boltzmann_expert_rollout, gridworld_by_size, lineworld_expert, lineworld_rollout, optimal_q, Demonstration,
    Gridworld, LineRollout, LineWorld,
};
use crate::policywalk::{policywalk_hmc, policywalk_vanilla_adaptive, PolicyWalkPosterior, TimingRow};
use crate::sampler::{ess_chains, r_hat, run_chains, ChainResult, Exec, Metric, SamplerConfig};
use crate::valuewalk::continuous::{Apprentice, ContinuousPosterior, ContinuousPosteriorSpec};
use crate::valuewalk::{
    valuewalk_continuous_nuts, valuewalk_nuts, DetMode, FinitePosterior, FinitePosteriorSpec, NormalPrior,
    ValueSpace,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    #[serde(rename = "valuewalk")]
    ValueWalk,
    #[serde(rename = "valuewalk-cont")]
    ValueWalkCont,
    #[serde(rename = "policywalk")]
    PolicyWalk,
    #[serde(rename = "policywalk-hmc")]
    PolicyWalkHmc,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::ValueWalk, Method::ValueWalkCont, Method::PolicyWalk, Method::PolicyWalkHmc];

    pub fn name(self) -> &'static str {
        match self {
            Method::ValueWalk => "valuewalk",
            Method::ValueWalkCont => "valuewalk-cont",
            Method::PolicyWalk => "policywalk",
            Method::PolicyWalkHmc => "policywalk-hmc",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`; expected one of valuewalk, valuewalk-cont, policywalk, policywalk-hmc")))
    }
}

/// Chain layout shared by every method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub n_chains: usize,
    pub n_warmup: usize,
    pub n_samples: usize,
    pub thin: usize,
    pub seed: u64,
    pub exec: Exec,
    /// Initial random-walk scale for PolicyWalk; tuned during warmup.
    pub proposal_scale: f64,
    /// Random-walk acceptance target.
    pub rw_target_accept: f64,
    /// NUTS metric.
    pub metric: Metric,
}

impl RunSettings {
    pub fn new(n_chains: usize, n_warmup: usize, n_samples: usize, seed: u64) -> Self {
        RunSettings {
            n_chains,
            n_warmup,
            n_samples,
            thin: 1,
            seed,
            exec: Exec::Parallel,
            proposal_scale: 1.0,
            rw_target_accept: 0.234,
            metric: Metric::Dense,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_chains == 0 || self.n_samples == 0 || self.thin == 0 {
            return Err(Error::Config("n_chains, n_samples and thin must be positive".into()));
        }
        Ok(())
    }

    fn config(&self, init: Vec<f64>, chain: u64) -> SamplerConfig {
        SamplerConfig::new(init, self.n_warmup, self.n_samples, self.seed)
            .with_chain(chain)
            .with_thin(self.thin)
            .with_metric(self.metric)
    }
}

/// Boltzmann-rational demonstrations on a predefined gridworld, with the
/// expert acting on the optimal Q-values of the true reward.
pub fn gridworld_demos(env_id: &str, world: &Gridworld, alpha: f64, n_steps: usize, seed: u64) -> Result<Demonstration> {
    let (q, _) = optimal_q(&world.mdp, &world.reward, None, 1e-12)?;
    Ok(boltzmann_expert_rollout(&world.mdp, &q, alpha, n_steps, seed).with_env_id(env_id))
}

/// Gridworld by id (`gridworld3x3`, `gridworld6x6`, `gridworld12x12`).
pub fn gridworld_by_id(env_id: &str) -> Result<Gridworld> {
    match env_id {
        "gridworld3x3" => gridworld_by_size(3),
        "gridworld6x6" => gridworld_by_size(6),
        "gridworld12x12" => gridworld_by_size(12),
        other => Err(Error::Config(format!("`{other}` is not a gridworld id"))),
    }
}

/// State-reward posterior on a gridworld: `N(mean, std^2)` prior, Boltzmann
/// rationality `alpha`.
pub fn gridworld_spec(world: &Gridworld, demos: Demonstration, alpha: f64, prior: NormalPrior, det: DetMode) -> FinitePosteriorSpec {
    FinitePosteriorSpec::new(world.mdp.clone(), demos)
        .with_value_space(ValueSpace::StateOnly)
        .with_alpha(alpha)
        .with_prior(prior)
        .with_det_mode(det)
}

/// Chains of one method and their reward draws (`[chain][draw][dim]`).
#[derive(Debug, Clone)]
pub struct FiniteRun {
    pub method: Method,
    pub chains: Vec<ChainResult>,
    pub rewards: Vec<Vec<Vec<f64>>>,
}

impl FiniteRun {
    /// Reward draws of all chains, concatenated.
    pub fn pooled_rewards(&self) -> Vec<Vec<f64>> {
        self.rewards.iter().flatten().cloned().collect()
    }

    pub fn reward_column(&self, d: usize) -> Vec<f64> {
        self.rewards.iter().flatten().map(|r| r[d]).collect()
    }

    pub fn r_hat(&self) -> Result<Vec<f64>> {
        r_hat(&self.rewards)
    }

    pub fn ess(&self) -> Vec<f64> {
        ess_chains(&self.rewards)
    }

    /// Sampling-phase wall time summed over chains.
    pub fn sampling_seconds(&self) -> f64 {
        self.chains.iter().map(|c| c.sampling_time.as_secs_f64()).sum()
    }

    pub fn min_ess(&self) -> f64 {
        self.ess().into_iter().fold(f64::INFINITY, f64::min)
    }

    pub fn seconds_per_ess(&self) -> f64 {
        self.sampling_seconds() / self.min_ess()
    }
}

/// Runs a finite-state method. ValueWalk and PolicyWalk-HMC use NUTS;
/// PolicyWalk is adaptive random-walk Metropolis. Chains start at zero.
pub fn run_finite(method: Method, spec: &FinitePosteriorSpec, settings: &RunSettings) -> Result<FiniteRun> {
    settings.validate()?;
    let dim = spec.dim();
    let chains = match method {
        Method::ValueWalk => {
            let post = FinitePosterior::new(spec.clone())?;
            run_chains(settings.n_chains, settings.exec, |c| valuewalk_nuts(&post, &settings.config(vec![0.0; dim], c)))?
        }
        Method::PolicyWalk => {
            let post = PolicyWalkPosterior::new(spec.clone())?;
            run_chains(settings.n_chains, settings.exec, |c| {
                policywalk_vanilla_adaptive(
                    &post,
                    settings.proposal_scale,
                    settings.rw_target_accept,
                    &settings.config(vec![0.0; dim], c),
                )
            })?
        }
        Method::PolicyWalkHmc => {
            let post = PolicyWalkPosterior::new(spec.clone())?;
            run_chains(settings.n_chains, settings.exec, |c| policywalk_hmc(&post, &settings.config(vec![0.0; dim], c)))?
        }
        Method::ValueWalkCont => {
            return Err(Error::Config("valuewalk-cont runs on continuous environments".into()));
        }
    };
    let rewards = chains
        .iter()
        .map(|c| match method {
            Method::ValueWalk => c.aux_samples.clone().unwrap_or_default(),
            _ => c.samples.clone(),
        })
        .collect();
    Ok(FiniteRun { method, chains, rewards })
}

/// One timing row per (size, method): seconds per effective sample of the
/// worst reward dimension, over the sampling phase only.
pub fn bench_scaling(
    sizes: &[usize],
    methods: &[(Method, RunSettings)],
    alpha: f64,
    n_demo_steps: usize,
    seed: u64,
) -> Result<Vec<TimingRow>> {
    let mut rows = Vec::new();
    for &n in sizes {
        let id = format!("gridworld{n}x{n}");
        let world = gridworld_by_size(n)?;
        let demos = gridworld_demos(&id, &world, alpha, n_demo_steps, seed)?;
        let spec = gridworld_spec(&world, demos, alpha, NormalPrior::default(), DetMode::Detached);
        for (method, settings) in methods {
            let run = run_finite(*method, &spec, settings)?;
            rows.push(TimingRow::new(method.name(), world.n_states(), run.sampling_seconds(), run.min_ess()));
        }
    }
    Ok(rows)
}

/// LineWorld expert episodes. The recorded `alpha` is the expert's.
pub fn lineworld_demos(world: &LineWorld, alpha: f64, n_episodes: usize, seed: u64) -> Result<LineRollout> {
    let expert = lineworld_expert(world, alpha)?;
    let mut out = lineworld_rollout(world, expert, n_episodes, seed);
    out.demo.alpha = alpha;
    Ok(out)
}

/// LineWorld posterior with evaluation points at every action of the
/// demonstrated states and successors from the true dynamics.
pub fn lineworld_spec(world: &LineWorld, demo: &Demonstration<f64>) -> ContinuousPosteriorSpec {
    ContinuousPosteriorSpec::lineworld(world, demo).with_all_actions(Arc::new(world.clone()), 1, 0)
}

/// Continuous ValueWalk chains; each chain starts from its own network
/// initialisation. Returns the posterior and the chains (aux: rewards).
pub fn run_continuous(spec: &ContinuousPosteriorSpec, settings: &RunSettings) -> Result<(ContinuousPosterior, Vec<ChainResult>)> {
    settings.validate()?;
    let post = ContinuousPosterior::new(spec.clone())?;
    let chains = run_chains(settings.n_chains, settings.exec, |c| {
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
        rng.set_stream(c);
        let init = spec.arch.init(&mut rng);
        valuewalk_continuous_nuts(&post, &settings.config(init, c))
    })?;
    Ok((post, chains))
}

/// Mean return of the posterior-median apprentice on LineWorld.
pub fn lineworld_apprentice_return(
    world: &LineWorld,
    apprentice: &Apprentice,
    n_episodes: usize,
    seed: u64,
) -> Result<LineRollout> {
    let act = |x: f64| -> Vec<f64> {
        let a = apprentice.act(&world.features(x)).unwrap_or(0);
        (0..LineWorld::N_ACTIONS).map(|b| if a == b { 1.0 } else { 0.0 }).collect()
    };
    Ok(lineworld_rollout(world, act, n_episodes, seed))
}

/// Held-out log-likelihood of LineWorld posteriors trained on the first
/// `n_train` of `episodes` and tested on the rest.
pub fn lineworld_heldout(
    world: &LineWorld,
    episodes: &[Demonstration<f64>],
    n_train: usize,
    settings: &RunSettings,
) -> Result<HeldoutMetrics> {
    if n_train == 0 || n_train >= episodes.len() {
        return Err(Error::Config(format!("need 0 < n_train < {} episodes, got {n_train}", episodes.len())));
    }
    let mut train = episodes[0].clone();
    train.transitions = episodes[..n_train].iter().flat_map(|e| e.transitions.clone()).collect();
    let mut test = episodes[0].clone();
    test.transitions = episodes[n_train..].iter().flat_map(|e| e.transitions.clone()).collect();
    let spec = lineworld_spec(world, &train);
    let (_, chains) = run_continuous(&spec, settings)?;
    let samples: Vec<Vec<f64>> = chains.into_iter().flat_map(|c| c.samples).collect();
    let test_c = crate::valuewalk::continuous::line_transitions(world, &test);
    heldout_metrics(&spec.arch, &samples, &test_c, spec.alpha)
}

/// Splits a rollout into its episodes.
pub fn split_episodes(rollout: &LineRollout) -> Vec<Demonstration<f64>> {
    let mut out = Vec::with_capacity(rollout.lengths.len());
    let mut start = 0;
    for &len in &rollout.lengths {
        let mut d = rollout.demo.clone();
        d.transitions = rollout.demo.transitions[start..start + len].to_vec();
        out.push(d);
        start += len;
    }
    out
}
