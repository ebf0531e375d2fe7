use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use valuewalk::eval::{
    goal_sign_split, heldout_metrics, heldout_metrics_finite, joint_posterior_report, prob_less, GoalSignSplit,
    HeldoutMetrics,
};
use valuewalk::experiment::{
    bench_scaling, gridworld_by_id, gridworld_demos, gridworld_spec, lineworld_apprentice_return, lineworld_demos,
    lineworld_spec, run_continuous, run_finite, Method, RunSettings,
};
use valuewalk::mdp::{Cell, Demonstration, Gridworld, LineWorld};
use valuewalk::policywalk::{write_timing_csv, PolicyWalkPosterior, WarmStart};
use valuewalk::sampler::{ess_chains, r_hat, write_chain_csv, ChainResult, Exec};
use valuewalk::valuewalk::continuous::{line_transitions, Apprentice, MlpArchitecture};
use valuewalk::valuewalk::{FinitePosterior, FinitePosteriorSpec};

use crate::config::{ExperimentConfig, Overrides};
use crate::manifest::{sha256_hex, Manifest};
use crate::CliError;

pub const RESOLVED_CONFIG: &str = "config.resolved.json";
pub const RUN_INFO: &str = "run.json";
pub const DIAGNOSTICS: &str = "diagnostics.json";
pub const DEMOS: &str = "demos.json";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("malformed {}: {e}", path.display())))
}

/// Chains run in parallel unless `BIRL_THREADS` is 1.
pub fn exec_from_env() -> Exec {
    match std::env::var("BIRL_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(1) => Exec::Sequential,
        _ => Exec::Parallel,
    }
}

// ---------------------------------------------------------------- gen-demos

pub struct GenDemos {
    pub env: String,
    pub alpha: f64,
    pub n_steps: Option<usize>,
    pub n_episodes: Option<usize>,
    pub seed: u64,
    pub out: PathBuf,
}

pub fn gen_demos(a: &GenDemos) -> Result<(), CliError> {
    if !(a.alpha >= 0.0) {
        return Err(CliError::Usage(format!("alpha {} must be non-negative", a.alpha)));
    }
    let text = if a.env == "lineworld" {
        let n_episodes = a.n_episodes.unwrap_or(40);
        let mut demo = lineworld_demos(&LineWorld::default(), a.alpha, n_episodes, a.seed)?.demo;
        if let Some(n) = a.n_steps {
            demo.transitions.truncate(n);
        }
        serde_json::to_string_pretty(&demo)?
    } else {
        if a.n_episodes.is_some() {
            return Err(CliError::Usage("gridworld demonstrations are sized by --n-steps".into()));
        }
        let world = gridworld_by_id(&a.env).map_err(|e| CliError::Usage(e.to_string()))?;
        let demo = gridworld_demos(&a.env, &world, a.alpha, a.n_steps.unwrap_or(50), a.seed)?;
        serde_json::to_string_pretty(&demo)?
    };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&a.out, text + "\n")?;
    Ok(())
}

// ---------------------------------------------------------------------- run

/// Describes a run directory for later `eval` and `diag` calls.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunInfo {
    pub method: Method,
    pub env_id: String,
    pub n_chains: usize,
    pub theta_dim: usize,
    pub reward_dim: usize,
    pub arch: Option<MlpArchitecture>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Diagnostics {
    pub r_hat: Vec<f64>,
    pub ess: Vec<f64>,
    pub max_r_hat: f64,
    pub min_ess: f64,
    pub rhat_threshold: f64,
    pub converged: bool,
}

impl Diagnostics {
    fn from_rewards(rewards: &[Vec<Vec<f64>>], threshold: f64) -> Result<Self, CliError> {
        let r = r_hat(rewards)?;
        let ess = ess_chains(rewards);
        let max_r_hat = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min_ess = ess.iter().cloned().fold(f64::INFINITY, f64::min);
        Ok(Diagnostics { r_hat: r, ess, max_r_hat, min_ess, rhat_threshold: threshold, converged: max_r_hat <= threshold })
    }

    fn check(&self) -> Result<(), CliError> {
        if self.converged {
            Ok(())
        } else {
            Err(CliError::NotConverged(self.max_r_hat, self.rhat_threshold))
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Timing {
    /// Wall clock of the sampling phase, all chains.
    pub wall_seconds: f64,
    /// Post-warmup sampling time summed over chains.
    pub sampling_seconds: f64,
    pub min_ess: f64,
    pub seconds_per_ess: f64,
}

fn theta_file(c: usize) -> String {
    format!("theta_chain_{c}.csv")
}

fn reward_file(c: usize) -> String {
    format!("reward_chain_{c}.csv")
}

fn write_rewards(path: &Path, rows: &[Vec<f64>]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    let dim = rows.first().map_or(0, Vec::len);
    let mut header = vec!["sample_id".to_string()];
    header.extend((0..dim).map(|d| format!("r_{d}")));
    w.write_record(&header)?;
    for (i, row) in rows.iter().enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(row.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a wide CSV, dropping the first `skip` columns.
fn read_wide(path: &Path, skip: usize) -> Result<Vec<Vec<f64>>, CliError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .skip(skip)
            .map(|f| f.parse::<f64>().map_err(|e| CliError::Usage(format!("{}: bad number `{f}`: {e}", path.display()))))
            .collect::<Result<Vec<f64>, CliError>>()?;
        rows.push(row);
    }
    Ok(rows)
}

fn read_chains(dir: &Path, n: usize, name: fn(usize) -> String, skip: usize) -> Result<Vec<Vec<Vec<f64>>>, CliError> {
    (0..n).map(|c| read_wide(&dir.join(name(c)), skip)).collect()
}

fn finite_spec(cfg: &ExperimentConfig, world: &Gridworld, demos: Demonstration) -> FinitePosteriorSpec {
    let mut spec = gridworld_spec(world, demos, cfg.method.alpha, cfg.prior(), cfg.method.det_mode)
        .with_policy(cfg.method.continuation);
    spec.alpha_bar = cfg.method.alpha_bar;
    spec
}

fn load_grid_demos(cfg: &ExperimentConfig, world: &Gridworld) -> Result<Demonstration, CliError> {
    match &cfg.demos.path {
        Some(p) => {
            let d: Demonstration = read_json(p)?;
            d.validate(&world.mdp).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            Ok(d)
        }
        None => Ok(gridworld_demos(&cfg.env.id, world, cfg.demos.alpha, cfg.demos.n_steps.unwrap_or(50), cfg.demos.seed)?),
    }
}

fn load_line_demos(cfg: &ExperimentConfig, world: &LineWorld) -> Result<Demonstration<f64>, CliError> {
    let mut d: Demonstration<f64> = match &cfg.demos.path {
        Some(p) => read_json(p)?,
        None => lineworld_demos(world, cfg.demos.alpha, cfg.demos.n_episodes, cfg.demos.seed)?.demo,
    };
    if let Some(n) = cfg.demos.n_steps {
        d.transitions.truncate(n);
    }
    Ok(d)
}

pub fn run(config: &Path, out: &Path, o: &Overrides) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(config)?;
    cfg.apply(o);
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let exec = exec_from_env();

    let mut manifest = Manifest::new("run");
    manifest.add_input(config)?;
    if let Some(p) = &cfg.demos.path {
        manifest.add_input(p)?;
    }
    let resolved = serde_json::to_string_pretty(&cfg)? + "\n";
    manifest.config_sha256 = Some(sha256_hex(resolved.as_bytes()));
    fs::write(out.join(RESOLVED_CONFIG), resolved)?;

    let settings = cfg.run_settings(exec);
    let method = cfg.method.name;
    let (chains, rewards, arch) = if method == Method::ValueWalkCont {
        let world = LineWorld::default();
        let demo = load_line_demos(&cfg, &world)?;
        write_json(&out.join(DEMOS), &demo)?;
        let mut spec = lineworld_spec(&world, &demo);
        spec.alpha = cfg.method.alpha;
        write_json(&out.join("eval_points.json"), &spec.eval_points)?;
        let start = Instant::now();
        let (_, chains) = run_continuous(&spec, &settings)?;
        let wall = start.elapsed().as_secs_f64();
        let rewards: Vec<Vec<Vec<f64>>> = chains.iter().map(|c| c.aux_samples.clone().unwrap_or_default()).collect();
        ((chains, wall), rewards, Some(spec.arch))
    } else {
        let world = gridworld_by_id(&cfg.env.id).map_err(|e| CliError::Usage(e.to_string()))?;
        let demos = load_grid_demos(&cfg, &world)?;
        write_json(&out.join(DEMOS), &demos)?;
        let spec = finite_spec(&cfg, &world, demos);
        let start = Instant::now();
        let run = run_finite(method, &spec, &settings)?;
        let wall = start.elapsed().as_secs_f64();
        ((run.chains, wall), run.rewards, None)
    };
    let (chains, wall) = chains;
    write_chains(out, &chains, &rewards)?;

    let diag = Diagnostics::from_rewards(&rewards, cfg.sampler.rhat_threshold)?;
    write_json(&out.join(DIAGNOSTICS), &diag)?;
    let sampling: f64 = chains.iter().map(|c| c.sampling_time.as_secs_f64()).sum();
    let timing = Timing { wall_seconds: wall, sampling_seconds: sampling, min_ess: diag.min_ess, seconds_per_ess: sampling / diag.min_ess };
    write_json(&out.join("timing.json"), &timing)?;
    let info = RunInfo {
        method,
        env_id: cfg.env.id.clone(),
        n_chains: chains.len(),
        theta_dim: chains[0].dim(),
        reward_dim: rewards[0].first().map_or(0, Vec::len),
        arch,
    };
    write_json(&out.join(RUN_INFO), &info)?;
    manifest.finish(out)?;
    println!(
        "{}: {} chains x {} draws, max R-hat {:.4}, min ESS {:.0}, {:.3e} s per ESS",
        method.name(),
        info.n_chains,
        cfg.sampler.n_samples,
        diag.max_r_hat,
        diag.min_ess,
        timing.seconds_per_ess
    );
    diag.check()
}

fn write_chains(out: &Path, chains: &[ChainResult], rewards: &[Vec<Vec<f64>>]) -> Result<(), CliError> {
    for (c, (chain, r)) in chains.iter().zip(rewards).enumerate() {
        write_chain_csv(BufWriter::new(File::create(out.join(theta_file(c)))?), chain)?;
        write_rewards(&out.join(reward_file(c)), r)?;
        write_json(&out.join(format!("chain_{c}.meta.json")), &chain.meta())?;
    }
    Ok(())
}

// --------------------------------------------------------------------- diag

pub fn diag(dir: &Path, threshold: f64) -> Result<(), CliError> {
    let info: RunInfo = read_json(&dir.join(RUN_INFO))?;
    let rewards = read_chains(dir, info.n_chains, reward_file, 1)?;
    let d = Diagnostics::from_rewards(&rewards, threshold)?;
    write_json(&dir.join(DIAGNOSTICS), &d)?;
    for (i, (r, e)) in d.r_hat.iter().zip(&d.ess).enumerate() {
        println!("r_{i}: R-hat {r:.4}  ESS {e:.0}");
    }
    println!("max R-hat {:.4} (threshold {threshold}), min ESS {:.0}", d.max_r_hat, d.min_ess);
    d.check()
}

// ---------------------------------------------------------------- bench

pub struct Bench {
    pub sizes: Vec<usize>,
    pub methods: Vec<Method>,
    pub seed: u64,
    pub nuts_samples: usize,
    pub policywalk_samples: usize,
    pub out: PathBuf,
}

pub fn bench(b: &Bench) -> Result<(), CliError> {
    if b.methods.contains(&Method::ValueWalkCont) {
        return Err(CliError::Usage("bench-scaling compares the finite-state methods".into()));
    }
    if b.nuts_samples == 0 || b.policywalk_samples == 0 {
        return Err(CliError::Usage("sample counts must be positive".into()));
    }
    let exec = exec_from_env();
    let methods: Vec<(Method, RunSettings)> = b
        .methods
        .iter()
        .map(|&m| {
            let mut s = match m {
                Method::PolicyWalk => RunSettings::new(1, b.policywalk_samples / 10, b.policywalk_samples, b.seed),
                _ => RunSettings::new(1, 200, b.nuts_samples, b.seed),
            };
            s.exec = exec;
            (m, s)
        })
        .collect();
    let rows = bench_scaling(&b.sizes, &methods, 3.0, 50, b.seed)?;
    if let Some(dir) = b.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_timing_csv(File::create(&b.out)?, &rows)?;
    for r in &rows {
        println!("{:>15} {:>4} states: {:.3e} s per ESS", r.method, r.n_states, r.seconds_per_ess);
    }
    Ok(())
}

// --------------------------------------------------------------------- eval

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Apprentice,
    Heldout,
    Report,
}

pub struct Eval {
    pub dir: PathBuf,
    pub env: String,
    pub mode: EvalMode,
    pub n_episodes: usize,
    pub seed: u64,
    pub test_demos: Option<PathBuf>,
    pub bins: usize,
    /// Posterior draws used by held-out evaluation, evenly spaced.
    pub max_draws: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ApprenticeReport {
    pub n_episodes: usize,
    pub mean_return: f64,
    pub std_return: f64,
    pub expert_mean_return: f64,
    pub expert_std_return: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosteriorReport {
    pub n_samples: usize,
    pub means: Vec<f64>,
    pub correlations: Vec<Vec<f64>>,
    /// `P(R[hazard] < R[cell below])` per hazard state, gridworlds only.
    pub hazard_below: Vec<(usize, usize, f64)>,
    pub goal_split: Option<GoalSignSplit>,
}

fn thin_to(rows: Vec<Vec<f64>>, max: usize) -> Vec<Vec<f64>> {
    let step = rows.len().div_ceil(max.max(1)).max(1);
    rows.into_iter().step_by(step).collect()
}

pub fn eval(e: &Eval) -> Result<(), CliError> {
    let info: RunInfo = read_json(&e.dir.join(RUN_INFO))?;
    if info.env_id != e.env {
        return Err(CliError::Usage(format!("{} holds a {} run, not {}", e.dir.display(), info.env_id, e.env)));
    }
    let mut manifest = Manifest::new("eval");
    manifest.add_input(&e.dir.join(RUN_INFO))?;
    let out = &e.dir;
    match e.mode {
        EvalMode::Apprentice => {
            let arch = info
                .arch
                .clone()
                .ok_or_else(|| CliError::Usage("the apprentice needs a continuous (valuewalk-cont) run".into()))?;
            let cfg: ExperimentConfig = read_json(&e.dir.join(RESOLVED_CONFIG))?;
            let thetas: Vec<Vec<f64>> = read_chains(&e.dir, info.n_chains, theta_file, 3)?.into_iter().flatten().collect();
            let world = LineWorld::default();
            let app = Apprentice::new(arch, thetas)?;
            let a = lineworld_apprentice_return(&world, &app, e.n_episodes, e.seed)?;
            let x = lineworld_demos(&world, cfg.demos.alpha, e.n_episodes, e.seed)?;
            let rep = ApprenticeReport {
                n_episodes: e.n_episodes,
                mean_return: a.mean_return(),
                std_return: a.std_return(),
                expert_mean_return: x.mean_return(),
                expert_std_return: x.std_return(),
            };
            println!("apprentice {:.3} +- {:.3}, expert {:.3}", rep.mean_return, rep.std_return, rep.expert_mean_return);
            write_json(&out.join("apprentice.json"), &rep)?;
        }
        EvalMode::Heldout => {
            let path = e.test_demos.as_ref().ok_or_else(|| CliError::Usage("heldout needs --test-demos".into()))?;
            manifest.add_input(path)?;
            let metrics = heldout(e, &info, path)?;
            println!("held-out log-likelihood {:.4}, entropy {:.4}", metrics.mean_log_likelihood, metrics.mean_entropy);
            write_json(&out.join("heldout.json"), &metrics)?;
        }
        EvalMode::Report => {
            let rewards: Vec<Vec<f64>> = read_chains(&e.dir, info.n_chains, reward_file, 1)?.into_iter().flatten().collect();
            let rep = joint_posterior_report(&rewards, e.bins)?;
            rep.write_histograms_csv(BufWriter::new(File::create(out.join("histograms.csv"))?))?;
            let mut post = PosteriorReport {
                n_samples: rep.n_samples,
                means: rep.means.clone(),
                correlations: rep.correlations.clone(),
                hazard_below: Vec::new(),
                goal_split: None,
            };
            if let Ok(world) = gridworld_by_id(&info.env_id) {
                for (cell, _) in &world.hazards {
                    if cell.row + 1 < world.height {
                        let (h, b) = (world.state(*cell), world.state(Cell::new(cell.row + 1, cell.col)));
                        post.hazard_below.push((h, b, prob_less(&rewards, h, b)));
                    }
                }
                if let Some((goal, _)) = world.goals.first() {
                    post.goal_split = Some(goal_sign_split(&rewards, world.state(*goal)));
                }
            }
            write_json(&out.join("report.json"), &post)?;
            println!("wrote histograms.csv and report.json ({} draws)", rep.n_samples);
        }
    }
    manifest.finish(out)
}

fn heldout(e: &Eval, info: &RunInfo, path: &Path) -> Result<HeldoutMetrics, CliError> {
    let thetas: Vec<Vec<f64>> =
        thin_to(read_chains(&e.dir, info.n_chains, theta_file, 3)?.into_iter().flatten().collect(), e.max_draws);
    if let Some(arch) = &info.arch {
        let test: Demonstration<f64> = read_json(path)?;
        if test.is_empty() {
            return Err(CliError::Usage("the held-out set has no transitions".into()));
        }
        let cfg: ExperimentConfig = read_json(&e.dir.join(RESOLVED_CONFIG))?;
        let transitions = line_transitions(&LineWorld::default(), &test);
        return Ok(heldout_metrics(arch, &thetas, &transitions, cfg.method.alpha)?);
    }
    let test: Demonstration = read_json(path)?;
    if test.is_empty() {
        return Err(CliError::Usage("the held-out set has no transitions".into()));
    }
    let cfg: ExperimentConfig = read_json(&e.dir.join(RESOLVED_CONFIG))?;
    let world = gridworld_by_id(&info.env_id)?;
    test.validate(&world.mdp).map_err(|err| CliError::Usage(format!("{}: {err}", path.display())))?;
    let train: Demonstration = read_json(&e.dir.join(DEMOS))?;
    let spec = finite_spec(&cfg, &world, train);
    let q: Vec<Vec<f64>> = match info.method {
        Method::ValueWalk => {
            let post = FinitePosterior::new(spec)?;
            thetas.iter().map(|t| post.q_values(t)).collect()
        }
        _ => {
            let post = PolicyWalkPosterior::new(spec)?;
            let mut warm = WarmStart::default();
            thetas.iter().map(|r| post.log_density(r, &mut warm).map(|(_, q)| q)).collect::<Result<_, _>>()?
        }
    };
    let pairs: Vec<(usize, usize)> = test.transitions.iter().map(|t| (t.state, t.action)).collect();
    Ok(heldout_metrics_finite(&q, world.mdp.n_actions(), &pairs, cfg.method.alpha)?)
}
