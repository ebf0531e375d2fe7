//! Experiment configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use valuewalk::experiment::{Method, RunSettings};
use valuewalk::sampler::{Exec, Metric};
use valuewalk::valuewalk::{ContinuationPolicy, DetMode, NormalPrior};

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub env: EnvSection,
    #[serde(default)]
    pub demos: DemoSection,
    #[serde(default)]
    pub prior: PriorSection,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default)]
    pub method: MethodSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSection {
    pub id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemoSection {
    /// Demonstration file; relative paths resolve against the config file.
    pub path: Option<PathBuf>,
    pub alpha: f64,
    /// Gridworlds: number of steps. LineWorld: optional truncation.
    pub n_steps: Option<usize>,
    /// LineWorld episodes.
    pub n_episodes: usize,
    pub seed: u64,
}

impl Default for DemoSection {
    fn default() -> Self {
        DemoSection { path: None, alpha: 3.0, n_steps: None, n_episodes: 40, seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSection {
    pub mean: f64,
    pub std: f64,
}

impl Default for PriorSection {
    fn default() -> Self {
        PriorSection { mean: 0.0, std: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub n_chains: usize,
    pub n_warmup: usize,
    pub n_samples: usize,
    pub thin: usize,
    pub seed: u64,
    pub metric: Metric,
    pub proposal_scale: f64,
    pub rw_target_accept: f64,
    pub rhat_threshold: f64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection {
            n_chains: 4,
            n_warmup: 100,
            n_samples: 1000,
            thin: 1,
            seed: 0,
            metric: Metric::Dense,
            proposal_scale: 1.0,
            rw_target_accept: 0.234,
            rhat_threshold: 1.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodSection {
    pub name: Method,
    /// Boltzmann rationality of the likelihood.
    pub alpha: f64,
    pub det_mode: DetMode,
    pub continuation: ContinuationPolicy,
    pub alpha_bar: f64,
}

impl Default for MethodSection {
    fn default() -> Self {
        MethodSection {
            name: Method::ValueWalk,
            alpha: 3.0,
            det_mode: DetMode::Detached,
            continuation: ContinuationPolicy::Soft,
            alpha_bar: 100.0,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub method: Option<Method>,
    pub n_chains: Option<usize>,
    pub n_warmup: Option<usize>,
    pub n_samples: Option<usize>,
    pub seed: Option<u64>,
    pub rhat_threshold: Option<f64>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("malformed config {}: {e}", path.display())))?;
        if let Some(p) = &cfg.demos.path {
            if p.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.demos.path = Some(base.join(p));
            }
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(m) = o.method {
            self.method.name = m;
        }
        let s = &mut self.sampler;
        s.n_chains = o.n_chains.unwrap_or(s.n_chains);
        s.n_warmup = o.n_warmup.unwrap_or(s.n_warmup);
        s.n_samples = o.n_samples.unwrap_or(s.n_samples);
        s.seed = o.seed.unwrap_or(s.seed);
        s.rhat_threshold = o.rhat_threshold.unwrap_or(s.rhat_threshold);
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Usage(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("unsupported schema_version {} (expected {SCHEMA_VERSION})", self.schema_version));
        }
        let s = &self.sampler;
        if s.n_samples == 0 {
            return bad("sampler.n_samples must be positive".into());
        }
        if s.n_chains == 0 || s.thin == 0 {
            return bad("sampler.n_chains and sampler.thin must be positive".into());
        }
        if !(s.rhat_threshold >= 1.0) {
            return bad(format!("sampler.rhat_threshold {} must be at least 1", s.rhat_threshold));
        }
        if !(s.proposal_scale > 0.0) || !(s.rw_target_accept > 0.0 && s.rw_target_accept < 1.0) {
            return bad("sampler.proposal_scale must be positive and rw_target_accept in (0, 1)".into());
        }
        if !(self.prior.std > 0.0) {
            return bad(format!("prior.std {} must be positive", self.prior.std));
        }
        if !(self.method.alpha >= 0.0) || !(self.method.alpha_bar > 0.0) {
            return bad("method.alpha must be non-negative and method.alpha_bar positive".into());
        }
        let line = self.env.id == "lineworld";
        if !line && !self.env.id.starts_with("gridworld") {
            return bad(format!("unknown environment `{}`", self.env.id));
        }
        if line != (self.method.name == Method::ValueWalkCont) {
            return bad(format!(
                "method {} does not run on {}; valuewalk-cont is for lineworld, the others for gridworlds",
                self.method.name.name(),
                self.env.id
            ));
        }
        Ok(())
    }

    pub fn prior(&self) -> NormalPrior {
        NormalPrior { mean: self.prior.mean, std: self.prior.std }
    }

    pub fn run_settings(&self, exec: Exec) -> RunSettings {
        let s = &self.sampler;
        let mut r = RunSettings::new(s.n_chains, s.n_warmup, s.n_samples, s.seed);
        r.thin = s.thin;
        r.exec = exec;
        r.metric = s.metric;
        r.proposal_scale = s.proposal_scale;
        r.rw_target_accept = s.rw_target_accept;
        r
    }
}
