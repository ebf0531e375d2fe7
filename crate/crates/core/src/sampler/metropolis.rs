use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;

use super::{ChainResult, SamplerConfig};
use crate::error::{Error, Result};

/// Random-walk Metropolis with isotropic Gaussian jumps of fixed scale.
///
/// `logp` returns the log density and an optional auxiliary vector. Errors
/// and non-finite values at proposals count as zero density.
pub fn rw_metropolis<F>(logp: F, proposal_scale: f64, config: &SamplerConfig) -> Result<ChainResult>
where
    F: Fn(&[f64]) -> Result<(f64, Option<Vec<f64>>)>,
{
    run(logp, proposal_scale, None, config)
}

/// As [`rw_metropolis`], but during warmup the log proposal scale follows a
/// Robbins-Monro recursion towards `target_accept` (0.234 is the usual choice
/// in many dimensions). The scale is frozen when sampling starts.
pub fn rw_metropolis_adaptive<F>(
    logp: F,
    proposal_scale: f64,
    target_accept: f64,
    config: &SamplerConfig,
) -> Result<ChainResult>
where
    F: Fn(&[f64]) -> Result<(f64, Option<Vec<f64>>)>,
{
    if !(target_accept > 0.0 && target_accept < 1.0) {
        return Err(Error::Config(format!("target acceptance {target_accept} not in (0, 1)")));
    }
    run(logp, proposal_scale, Some(target_accept), config)
}

fn run<F>(logp: F, scale: f64, adapt: Option<f64>, config: &SamplerConfig) -> Result<ChainResult>
where
    F: Fn(&[f64]) -> Result<(f64, Option<Vec<f64>>)>,
{
    config.validate()?;
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Config(format!("proposal scale {scale} must be positive")));
    }
    let mut rng = config.rng();
    let warmup_start = Instant::now();
    let (mut lp, mut aux) = logp(&config.init)?;
    if !lp.is_finite() {
        return Err(Error::NonFiniteInit(lp));
    }
    let dim = config.init.len();
    let mut theta = config.init.clone();
    let mut proposal = vec![0.0; dim];
    let mut log_scale = scale.ln();
    let mut n_evals = 1;
    let mut trace = Vec::with_capacity(config.n_warmup + config.n_samples * config.thin);

    // one Metropolis step; returns the acceptance probability
    let mut step = |theta: &mut Vec<f64>, lp: &mut f64, aux: &mut Option<Vec<f64>>, s: f64, rng: &mut _| -> f64 {
        for (q, x) in proposal.iter_mut().zip(theta.iter()) {
            let z: f64 = Rng::sample(rng, StandardNormal);
            *q = x + s * z;
        }
        n_evals += 1;
        let (lp_new, aux_new) = match logp(&proposal) {
            Ok((l, a)) if l.is_finite() => (l, a),
            _ => (f64::NEG_INFINITY, None),
        };
        let log_ratio = lp_new - *lp;
        let accept = if log_ratio >= 0.0 { 1.0 } else { log_ratio.exp() };
        let u: f64 = Rng::random(rng);
        if u < accept {
            theta.copy_from_slice(&proposal);
            *lp = lp_new;
            *aux = aux_new;
        }
        accept
    };

    for t in 0..config.n_warmup {
        let s = log_scale.exp();
        trace.push(s);
        let accept = step(&mut theta, &mut lp, &mut aux, s, &mut rng);
        if let Some(target) = adapt {
            log_scale += (accept - target) / (t as f64 + 1.0).powf(0.6);
        }
    }
    let warmup_time = warmup_start.elapsed();

    let sampling_start = Instant::now();
    let s = log_scale.exp();
    let mut out = ChainResult {
        seed: config.seed,
        chain: config.chain,
        n_warmup: config.n_warmup,
        ..ChainResult::default()
    };
    let mut aux_rows = Vec::new();
    for _ in 0..config.n_samples {
        let mut total = 0.0;
        for _ in 0..config.thin {
            trace.push(s);
            total += step(&mut theta, &mut lp, &mut aux, s, &mut rng);
        }
        out.samples.push(theta.clone());
        out.log_densities.push(lp);
        out.accept_stats.push(total / config.thin as f64);
        if let Some(a) = &aux {
            aux_rows.push(a.clone());
        }
    }
    drop(step);
    if !aux_rows.is_empty() {
        out.aux_samples = Some(aux_rows);
    }
    out.step_size_trace = trace;
    out.n_evals = n_evals;
    out.warmup_time = warmup_time;
    out.sampling_time = sampling_start.elapsed();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn std_normal(t: &[f64]) -> Result<(f64, Option<Vec<f64>>)> {
        Ok((-0.5 * t[0] * t[0], None))
    }

    #[test]
    fn standard_normal_moments() {
        let cfg = SamplerConfig::new(vec![0.0], 1000, 100_000, 17);
        let out = rw_metropolis(std_normal, 2.4, &cfg).unwrap();
        let xs = out.column(0);
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
        assert!(m.abs() < 0.03, "mean {m}");
        assert!((v - 1.0).abs() < 0.05, "var {v}");
    }

    #[test]
    fn tiny_scale_accepts_almost_everything() {
        let cfg = SamplerConfig::new(vec![0.5], 0, 2000, 1);
        let out = rw_metropolis(std_normal, 1e-6, &cfg).unwrap();
        assert!(out.mean_accept() > 0.999);
        let xs = out.column(0);
        assert!(xs.iter().all(|x| (x - 0.5).abs() < 1e-3));
    }

    #[test]
    fn bimodal_occupancy_matches_mass_split() {
        // 0.3 N(-2, 0.5^2) + 0.7 N(2, 0.5^2); numerically integrated mass left of 0
        let dens = |x: f64| {
            let g = |m: f64| (-0.5 * ((x - m) / 0.5f64).powi(2)).exp();
            0.3 * g(-2.0) + 0.7 * g(2.0)
        };
        let (mut left, mut total) = (0.0, 0.0);
        let h = 1e-3;
        let mut x = -8.0;
        while x < 8.0 {
            let d = dens(x + 0.5 * h) * h;
            total += d;
            if x + 0.5 * h < 0.0 {
                left += d;
            }
            x += h;
        }
        let expected = left / total;
        let f = |t: &[f64]| -> Result<(f64, Option<Vec<f64>>)> { Ok((dens(t[0]).ln(), None)) };
        let out = rw_metropolis(f, 2.5, &SamplerConfig::new(vec![0.0], 1000, 1_000_000, 5)).unwrap();
        let frac = out.samples.iter().filter(|s| s[0] < 0.0).count() as f64 / out.len() as f64;
        assert!(frac > 0.0 && frac < 1.0);
        assert!((frac - expected).abs() < 0.05, "left {frac} vs {expected}");
    }

    #[test]
    fn adaptation_moves_toward_target() {
        let f = |t: &[f64]| -> Result<(f64, Option<Vec<f64>>)> {
            Ok((-0.5 * t.iter().map(|x| x * x).sum::<f64>(), None))
        };
        let cfg = SamplerConfig::new(vec![0.0; 10], 3000, 3000, 8);
        let out = rw_metropolis_adaptive(f, 5.0, 0.234, &cfg).unwrap();
        assert!((out.mean_accept() - 0.234).abs() < 0.06, "{}", out.mean_accept());
    }

    #[test]
    fn thinning_keeps_rows_aligned() {
        let f = |t: &[f64]| -> Result<(f64, Option<Vec<f64>>)> { Ok((-0.5 * t[0] * t[0], Some(vec![t[0] + 1.0]))) };
        let cfg = SamplerConfig::new(vec![0.0], 10, 50, 2).with_thin(4);
        let out = rw_metropolis(f, 1.0, &cfg).unwrap();
        assert_eq!(out.len(), 50);
        assert_eq!(out.step_size_trace.len(), 10 + 200);
        let aux = out.aux_samples.unwrap();
        for (a, s) in aux.iter().zip(&out.samples) {
            assert_eq!(a[0], s[0] + 1.0);
        }
    }
}
