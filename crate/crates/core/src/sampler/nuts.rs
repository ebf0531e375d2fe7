use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::adapt::{CovarianceEstimator, LinearMap};
use super::{adaptation_windows, ChainResult, DualAveraging, Evaluation, Metric, SamplerConfig};
use crate::error::{Error, Result};
use crate::linalg::logsumexp;

const MAX_DELTA_H: f64 = 1000.0;

#[derive(Debug, Clone)]
struct Point {
    theta: Vec<f64>,
    p: Vec<f64>,
    grad: Vec<f64>,
    logp: f64,
    aux: Option<Vec<f64>>,
}

impl Point {
    fn hamiltonian(&self) -> f64 {
        let h = -self.logp + 0.5 * dot(&self.p, &self.p);
        if h.is_nan() {
            f64::INFINITY
        } else {
            h
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_assign(a: &mut [f64], b: &[f64]) {
    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
}

fn sum(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn no_u_turn(p_minus: &[f64], p_plus: &[f64], rho: &[f64]) -> bool {
    dot(p_plus, rho) > 0.0 && dot(p_minus, rho) > 0.0
}

fn evaluate<F>(f: &F, theta: &[f64], n_evals: &mut usize) -> Evaluation
where
    F: Fn(&[f64]) -> Result<Evaluation>,
{
    *n_evals += 1;
    match f(theta) {
        Ok(e) if e.logp.is_finite() && e.grad.iter().all(|g| g.is_finite()) => e,
        _ => Evaluation::new(f64::NEG_INFINITY, vec![0.0; theta.len()]),
    }
}

fn leapfrog<F>(f: &F, z: &mut Point, eps: f64, n_evals: &mut usize)
where
    F: Fn(&[f64]) -> Result<Evaluation>,
{
    for (p, g) in z.p.iter_mut().zip(&z.grad) {
        *p += 0.5 * eps * g;
    }
    for (x, p) in z.theta.iter_mut().zip(&z.p) {
        *x += eps * p;
    }
    let e = evaluate(f, &z.theta, n_evals);
    z.logp = e.logp;
    z.grad = e.grad;
    z.aux = e.aux;
    for (p, g) in z.p.iter_mut().zip(&z.grad) {
        *p += 0.5 * eps * g;
    }
}

fn draw_momentum(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

struct TreeBuilder<'a, F> {
    f: &'a F,
    eps: f64,
    h0: f64,
    n_leapfrog: usize,
    sum_metro_prob: f64,
    divergent: bool,
    n_evals: usize,
}

impl<F> TreeBuilder<'_, F>
where
    F: Fn(&[f64]) -> Result<Evaluation>,
{
    /// Extends the trajectory by `2^depth` leapfrog steps in direction `sign`.
    /// `p_beg`/`p_end` receive the momenta at the two ends of the new subtree.
    #[allow(clippy::too_many_arguments)]
    fn build(
        &mut self,
        rng: &mut ChaCha8Rng,
        depth: usize,
        z: &mut Point,
        z_propose: &mut Point,
        p_beg: &mut Vec<f64>,
        p_end: &mut Vec<f64>,
        rho: &mut [f64],
        sign: f64,
        log_sum_weight: &mut f64,
    ) -> bool {
        if depth == 0 {
            leapfrog(self.f, z, sign * self.eps, &mut self.n_evals);
            self.n_leapfrog += 1;
            let h = z.hamiltonian();
            if h - self.h0 > MAX_DELTA_H {
                self.divergent = true;
            }
            *log_sum_weight = logsumexp(&[*log_sum_weight, self.h0 - h]);
            self.sum_metro_prob += if self.h0 - h > 0.0 { 1.0 } else { (self.h0 - h).exp() };
            z_propose.clone_from(z);
            add_assign(rho, &z.p);
            p_beg.clone_from(&z.p);
            p_end.clone_from(&z.p);
            return !self.divergent;
        }

        let dim = z.theta.len();
        let mut p_init_end = vec![0.0; dim];
        let mut rho_init = vec![0.0; dim];
        let mut lsw_init = f64::NEG_INFINITY;
        if !self.build(rng, depth - 1, z, z_propose, p_beg, &mut p_init_end, &mut rho_init, sign, &mut lsw_init) {
            return false;
        }

        let mut z_propose_final = z.clone();
        let mut p_final_beg = vec![0.0; dim];
        let mut rho_final = vec![0.0; dim];
        let mut lsw_final = f64::NEG_INFINITY;
        if !self.build(
            rng,
            depth - 1,
            z,
            &mut z_propose_final,
            &mut p_final_beg,
            p_end,
            &mut rho_final,
            sign,
            &mut lsw_final,
        ) {
            return false;
        }

        // uniform multinomial choice between the two halves
        let lsw_subtree = logsumexp(&[lsw_init, lsw_final]);
        *log_sum_weight = logsumexp(&[*log_sum_weight, lsw_subtree]);
        if lsw_final > lsw_subtree || rng.random::<f64>() < (lsw_final - lsw_subtree).exp() {
            *z_propose = z_propose_final;
        }

        let rho_subtree = sum(&rho_init, &rho_final);
        add_assign(rho, &rho_subtree);
        let mut persist = no_u_turn(p_beg, p_end, &rho_subtree);
        let rho_ext = sum(&rho_init, &p_final_beg);
        persist &= no_u_turn(p_beg, &p_final_beg, &rho_ext);
        let rho_ext = sum(&rho_final, &p_init_end);
        persist &= no_u_turn(&p_init_end, p_end, &rho_ext);
        persist
    }
}

struct Transition {
    point: Point,
    accept_stat: f64,
    divergent: bool,
    n_evals: usize,
}

/// One multinomial NUTS transition from `z0` (whose momentum is ignored).
fn transition<F>(f: &F, rng: &mut ChaCha8Rng, z0: &Point, eps: f64, max_depth: usize) -> Transition
where
    F: Fn(&[f64]) -> Result<Evaluation>,
{
    let dim = z0.theta.len();
    let mut z = z0.clone();
    z.p = draw_momentum(rng, dim);
    let mut builder = TreeBuilder {
        f,
        eps,
        h0: z.hamiltonian(),
        n_leapfrog: 0,
        sum_metro_prob: 0.0,
        divergent: false,
        n_evals: 0,
    };

    let mut z_fwd = z.clone();
    let mut z_bck = z.clone();
    let mut z_sample = z.clone();
    let mut z_propose = z.clone();

    let mut p_fwd_fwd = z.p.clone();
    let mut p_fwd_bck = z.p.clone();
    let mut p_bck_fwd = z.p.clone();
    let mut p_bck_bck = z.p.clone();
    let mut rho = z.p.clone();
    let mut log_sum_weight = 0.0;

    for depth in 0..max_depth {
        let mut rho_fwd = vec![0.0; dim];
        let mut rho_bck = vec![0.0; dim];
        let mut lsw_subtree = f64::NEG_INFINITY;
        let valid = if rng.random::<f64>() > 0.5 {
            let mut zz = z_fwd.clone();
            rho_bck.clone_from(&rho);
            p_bck_fwd.clone_from(&p_fwd_bck);
            let ok = builder.build(
                rng,
                depth,
                &mut zz,
                &mut z_propose,
                &mut p_fwd_bck,
                &mut p_fwd_fwd,
                &mut rho_fwd,
                1.0,
                &mut lsw_subtree,
            );
            z_fwd = zz;
            ok
        } else {
            let mut zz = z_bck.clone();
            rho_fwd.clone_from(&rho);
            p_fwd_bck.clone_from(&p_bck_fwd);
            let ok = builder.build(
                rng,
                depth,
                &mut zz,
                &mut z_propose,
                &mut p_bck_fwd,
                &mut p_bck_bck,
                &mut rho_bck,
                -1.0,
                &mut lsw_subtree,
            );
            z_bck = zz;
            ok
        };
        if !valid {
            break;
        }

        // biased progressive sampling favours the new subtree
        if lsw_subtree > log_sum_weight || rng.random::<f64>() < (lsw_subtree - log_sum_weight).exp() {
            z_sample.clone_from(&z_propose);
        }
        log_sum_weight = logsumexp(&[log_sum_weight, lsw_subtree]);

        rho = sum(&rho_bck, &rho_fwd);
        let mut persist = no_u_turn(&p_bck_bck, &p_fwd_fwd, &rho);
        let rho_ext = sum(&rho_bck, &p_fwd_bck);
        persist &= no_u_turn(&p_bck_bck, &p_fwd_bck, &rho_ext);
        let rho_ext = sum(&rho_fwd, &p_bck_fwd);
        persist &= no_u_turn(&p_bck_fwd, &p_fwd_fwd, &rho_ext);
        if !persist {
            break;
        }
    }

    Transition {
        point: z_sample,
        accept_stat: builder.sum_metro_prob / builder.n_leapfrog.max(1) as f64,
        divergent: builder.divergent,
        n_evals: builder.n_evals,
    }
}

/// Heuristic initial step size: double or halve until the one-step
/// acceptance probability crosses 0.8.
pub fn find_reasonable_step_size<F>(f: &F, theta: &[f64], rng: &mut ChaCha8Rng, start: f64) -> Result<(f64, usize)>
where
    F: Fn(&[f64]) -> Result<Evaluation>,
{
    let mut n_evals = 0;
    let e = evaluate(f, theta, &mut n_evals);
    if !e.logp.is_finite() {
        return Err(Error::NonFiniteInit(e.logp));
    }
    let z0 = Point { theta: theta.to_vec(), p: Vec::new(), grad: e.grad, logp: e.logp, aux: None };
    let log_target = 0.8f64.ln();
    let mut eps = start;
    let mut direction = 0.0;
    for _ in 0..100 {
        let mut z = z0.clone();
        z.p = draw_momentum(rng, theta.len());
        let h0 = z.hamiltonian();
        leapfrog(f, &mut z, eps, &mut n_evals);
        let delta = h0 - z.hamiltonian();
        if direction == 0.0 {
            direction = if delta > log_target { 1.0 } else { -1.0 };
        } else if (direction > 0.0 && delta <= log_target) || (direction < 0.0 && delta >= log_target) {
            return Ok((eps, n_evals));
        }
        eps = if direction > 0.0 { 2.0 * eps } else { 0.5 * eps };
        if eps > 1e7 {
            return Err(Error::StepSize(format!(
                "step size grew past 1e7; the target looks improper (log density {})",
                z0.logp
            )));
        }
        if eps < 1e-300 {
            return Err(Error::StepSize("step size underflowed".into()));
        }
    }
    Ok((eps, n_evals))
}

/// No-U-turn sampler with multinomial trajectory sampling and, during
/// warmup, dual-averaging step-size adaptation plus a diagonal or dense
/// metric estimated in windows (see [`adaptation_windows`]).
///
/// `logp` may return an error or a non-finite value away from the initial
/// point; such points are treated as zero density.
pub fn nuts_sample<F>(logp: F, config: &SamplerConfig) -> Result<ChainResult>
where
    F: Fn(&[f64]) -> Result<Evaluation>,
{
    config.validate()?;
    let mut rng = config.rng();
    let warmup_start = Instant::now();
    let dim = config.init.len();

    let e0 = logp(&config.init)?;
    if !e0.logp.is_finite() {
        return Err(Error::NonFiniteInit(e0.logp));
    }
    if e0.grad.len() != dim {
        return Err(Error::Dimension { expected: dim, got: e0.grad.len() });
    }
    let mut n_evals = 1;
    // the chain lives in whitened coordinates x with theta = L x
    let mut map = LinearMap::identity(dim);
    let mut z = Point { theta: config.init.clone(), p: Vec::new(), grad: e0.grad, logp: e0.logp, aux: e0.aux };

    let mut eps = match config.initial_step_size {
        Some(e) => e,
        None => {
            let (e, n) = find_reasonable_step_size(&logp, &z.theta, &mut rng, 1.0)?;
            n_evals += n;
            e
        }
    };
    let mut adapt = DualAveraging::new(eps, config.target_accept);
    let windows = if config.metric == Metric::Unit { Vec::new() } else { adaptation_windows(config.n_warmup) };
    let mut estimator = CovarianceEstimator::new(dim);
    let mut step_size_trace = Vec::with_capacity(config.n_warmup + config.n_samples * config.thin);
    for it in 0..config.n_warmup {
        step_size_trace.push(eps);
        let t = {
            let f = whitened(&logp, &map);
            transition(&f, &mut rng, &z, eps, config.max_tree_depth)
        };
        n_evals += t.n_evals;
        z = t.point;
        eps = adapt.update(t.accept_stat);
        if let Some(&(_, end)) = windows.iter().find(|(a, b)| (*a..*b).contains(&it)) {
            estimator.push(&map.forward(&z.theta));
            if it + 1 == end {
                let cov = estimator.covariance();
                if let Some(next) = LinearMap::from_covariance(&cov, dim, config.metric == Metric::Dense) {
                    let theta = map.forward(&z.theta);
                    map = next;
                    z.theta = map.inverse(&theta);
                    let e = evaluate(&logp, &theta, &mut n_evals);
                    z.grad = map.pullback(&e.grad);
                    z.logp = e.logp;
                    let f = whitened(&logp, &map);
                    if let Ok((e, n)) = find_reasonable_step_size(&f, &z.theta, &mut rng, eps) {
                        n_evals += n;
                        eps = e;
                    }
                    adapt = DualAveraging::new(eps, config.target_accept);
                }
                estimator = CovarianceEstimator::new(dim);
            }
        }
    }
    if config.n_warmup > 0 {
        eps = adapt.final_step();
    }
    let warmup_time = warmup_start.elapsed();

    let sampling_start = Instant::now();
    let mut out = ChainResult {
        seed: config.seed,
        chain: config.chain,
        n_warmup: config.n_warmup,
        ..ChainResult::default()
    };
    let f = whitened(&logp, &map);
    let mut aux_rows = Vec::new();
    for _ in 0..config.n_samples {
        let mut accept = 0.0;
        for _ in 0..config.thin {
            step_size_trace.push(eps);
            let t = transition(&f, &mut rng, &z, eps, config.max_tree_depth);
            n_evals += t.n_evals;
            out.divergence_count += t.divergent as usize;
            accept = t.accept_stat;
            z = t.point;
        }
        out.samples.push(map.forward(&z.theta));
        out.log_densities.push(z.logp);
        out.accept_stats.push(accept);
        if let Some(a) = &z.aux {
            aux_rows.push(a.clone());
        }
    }
    if !aux_rows.is_empty() {
        out.aux_samples = Some(aux_rows);
    }
    out.step_size_trace = step_size_trace;
    out.n_evals = n_evals;
    out.warmup_time = warmup_time;
    out.sampling_time = sampling_start.elapsed();
    Ok(out)
}

/// `logp` in the coordinates `x` with `theta = L x`.
fn whitened<'a, F>(logp: &'a F, map: &'a LinearMap) -> impl Fn(&[f64]) -> Result<Evaluation> + 'a
where
    F: Fn(&[f64]) -> Result<Evaluation>,
{
    move |x: &[f64]| {
        let mut e = logp(&map.forward(x))?;
        e.grad = map.pullback(&e.grad);
        Ok(e)
    }
}

/// Largest `|H - H0|` along `n_steps` leapfrog steps from `theta` with
/// momentum `p`.
pub fn leapfrog_energy_error<F>(f: &F, theta: &[f64], p: &[f64], eps: f64, n_steps: usize) -> f64
where
    F: Fn(&[f64]) -> Result<Evaluation>,
{
    let mut n = 0;
    let e = evaluate(f, theta, &mut n);
    let mut z = Point { theta: theta.to_vec(), p: p.to_vec(), grad: e.grad, logp: e.logp, aux: None };
    let h0 = z.hamiltonian();
    let mut worst: f64 = 0.0;
    for _ in 0..n_steps {
        leapfrog(f, &mut z, eps, &mut n);
        worst = worst.max((z.hamiltonian() - h0).abs());
    }
    worst
}
