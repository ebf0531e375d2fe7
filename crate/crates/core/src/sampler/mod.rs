//! MCMC engines and convergence diagnostics.
//!
//! Both kernels take the target as a closure. The NUTS target returns an
//! [`Evaluation`] (log density, gradient and an optional auxiliary vector);
//! the Metropolis target returns the log density and the auxiliary vector.
//! The auxiliary vector of the current point is stored with every retained
//! draw, so rejected moves repeat the previous row.

mod adapt;
mod diagnostics;
mod io;
mod metropolis;
mod nuts;

use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adapt::{adaptation_windows, DualAveraging};
pub use diagnostics::{ess, ess_chains, min_ess, r_hat, r_hat_max};
pub use io::{read_chain_csv, write_aux_csv, write_chain_csv, ChainMeta};
pub use metropolis::{rw_metropolis, rw_metropolis_adaptive};
pub use nuts::{find_reasonable_step_size, leapfrog_energy_error, nuts_sample};

use crate::error::{Error, Result};

/// Log density, its gradient and an optional payload recorded with the draw.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub logp: f64,
    pub grad: Vec<f64>,
    pub aux: Option<Vec<f64>>,
}

impl Evaluation {
    pub fn new(logp: f64, grad: Vec<f64>) -> Self {
        Evaluation { logp, grad, aux: None }
    }

    pub fn with_aux(mut self, aux: Vec<f64>) -> Self {
        self.aux = Some(aux);
        self
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n_warmup: usize,
    /// Retained draws per chain.
    pub n_samples: usize,
    /// Iterations per retained draw.
    pub thin: usize,
    pub target_accept: f64,
    pub max_tree_depth: usize,
    pub seed: u64,
    /// Chain index; selects an independent RNG stream for the same seed.
    pub chain: u64,
    pub init: Vec<f64>,
    /// Skip the step-size heuristic and start adaptation here.
    pub initial_step_size: Option<f64>,
    /// Mass matrix adapted by NUTS during warmup.
    #[serde(default)]
    pub metric: Metric,
}

/// Inverse mass matrix estimated in the warmup windows. `Unit` keeps the
/// identity throughout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Unit,
    #[default]
    Diag,
    Dense,
}

impl SamplerConfig {
    pub fn new(init: Vec<f64>, n_warmup: usize, n_samples: usize, seed: u64) -> Self {
        SamplerConfig {
            n_warmup,
            n_samples,
            thin: 1,
            target_accept: 0.8,
            max_tree_depth: 10,
            seed,
            chain: 0,
            init,
            initial_step_size: None,
            metric: Metric::default(),
        }
    }

    pub fn with_metric(mut self, metric: Metric) -> Self {
        self.metric = metric;
        self
    }

    pub fn with_chain(mut self, chain: u64) -> Self {
        self.chain = chain;
        self
    }

    pub fn with_thin(mut self, thin: usize) -> Self {
        self.thin = thin;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 || self.thin == 0 {
            return Err(Error::Config("n_samples and thin must be positive".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Config(format!("target_accept {} not in (0, 1)", self.target_accept)));
        }
        if self.max_tree_depth == 0 {
            return Err(Error::Config("max_tree_depth must be positive".into()));
        }
        if self.init.is_empty() || self.init.iter().any(|x| !x.is_finite()) {
            return Err(Error::Config("init must be a non-empty finite vector".into()));
        }
        Ok(())
    }

    pub(crate) fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.chain);
        rng
    }
}

/// Output of one chain.
#[derive(Debug, Clone, Default)]
pub struct ChainResult {
    pub samples: Vec<Vec<f64>>,
    pub log_densities: Vec<f64>,
    /// Mean Metropolis acceptance probability of each retained iteration.
    pub accept_stats: Vec<f64>,
    /// Step size (or proposal scale) used at every iteration, warmup included.
    pub step_size_trace: Vec<f64>,
    /// Divergent transitions after warmup.
    pub divergence_count: usize,
    pub aux_samples: Option<Vec<Vec<f64>>>,
    pub seed: u64,
    pub chain: u64,
    pub n_warmup: usize,
    /// Gradient (NUTS) or density (Metropolis) evaluations, warmup included.
    pub n_evals: usize,
    pub warmup_time: Duration,
    pub sampling_time: Duration,
}

impl ChainResult {
    pub fn dim(&self) -> usize {
        self.samples.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn final_step_size(&self) -> f64 {
        self.step_size_trace.last().copied().unwrap_or(f64::NAN)
    }

    pub fn mean_accept(&self) -> f64 {
        self.accept_stats.iter().sum::<f64>() / self.accept_stats.len().max(1) as f64
    }

    /// Column `d` of the draws.
    pub fn column(&self, d: usize) -> Vec<f64> {
        self.samples.iter().map(|row| row[d]).collect()
    }

    pub fn mean(&self) -> Vec<f64> {
        column_means(&self.samples)
    }

    pub fn meta(&self) -> ChainMeta {
        ChainMeta {
            seed: self.seed,
            chain: self.chain,
            n_warmup: self.n_warmup,
            n_samples: self.samples.len(),
            divergences: self.divergence_count,
            step_size_final: self.final_step_size(),
            mean_accept: self.mean_accept(),
            n_evals: self.n_evals,
            warmup_seconds: self.warmup_time.as_secs_f64(),
            sampling_seconds: self.sampling_time.as_secs_f64(),
        }
    }
}

pub(crate) fn column_means(rows: &[Vec<f64>]) -> Vec<f64> {
    let Some(first) = rows.first() else {
        return Vec::new();
    };
    let mut m = vec![0.0; first.len()];
    for row in rows {
        for (acc, x) in m.iter_mut().zip(row) {
            *acc += x;
        }
    }
    let n = rows.len() as f64;
    m.iter_mut().for_each(|x| *x /= n);
    m
}

/// How independent chains are scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Exec {
    Sequential,
    /// One chain per rayon task. Without the `parallel` feature this runs
    /// sequentially.
    #[default]
    Parallel,
}

/// Runs `run(chain_index)` for every chain and collects results in chain order.
pub fn run_chains<T, F>(n_chains: usize, exec: Exec, run: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync + Send,
{
    map_indexed(n_chains, exec, |i| run(i as u64)).into_iter().collect()
}

/// Order-preserving map over `0..n` under `exec`.
pub fn map_indexed<T, F>(n: usize, exec: Exec, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        Exec::Sequential => (0..n).map(f).collect(),
        Exec::Parallel => par_map(n, f),
    }
}

#[cfg(feature = "parallel")]
fn par_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_indexed_keeps_order() {
        let seq = map_indexed(17, Exec::Sequential, |i| i * i);
        let par = map_indexed(17, Exec::Parallel, |i| i * i);
        assert_eq!(seq, par);
        assert_eq!(seq[4], 16);
    }

    #[test]
    fn config_validation() {
        let mut c = SamplerConfig::new(vec![0.0], 10, 10, 1);
        c.validate().unwrap();
        c.target_accept = 1.0;
        assert!(c.validate().is_err());
        let c = SamplerConfig::new(vec![f64::NAN], 10, 10, 1);
        assert!(c.validate().is_err());
    }

    #[test]
    fn chain_streams_differ() {
        use rand::Rng;
        let a: u64 = SamplerConfig::new(vec![0.0], 1, 1, 5).rng().random();
        let b: u64 = SamplerConfig::new(vec![0.0], 1, 1, 5).with_chain(1).rng().random();
        assert_ne!(a, b);
    }
}
