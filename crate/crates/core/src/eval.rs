//! Posterior evaluation: two-sample KS tests, held-out predictive metrics,
//! grid-quadrature posteriors for tiny problems and joint reward reports.

use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::logsumexp;
use crate::policywalk::{PolicyWalkPosterior, WarmStart};
use crate::sampler::{ess, map_indexed, Exec};
use crate::valuewalk::continuous::{q_forward, ContinuousTransition, MlpArchitecture};
use crate::valuewalk::FinitePosteriorSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Kolmogorov survival function `P(K > lambda)`.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.18 {
        // the alternating series converges slowly here; use the dual form
        let mut cdf = 0.0;
        for k in 1..=20 {
            let j = (2 * k - 1) as f64;
            cdf += (-j * j * PI * PI / (8.0 * lambda * lambda)).exp();
        }
        return (1.0 - (2.0 * PI).sqrt() / lambda * cdf).clamp(0.0, 1.0);
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-17 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}

/// Two-sample Kolmogorov-Smirnov test with the asymptotic p-value and the
/// usual small-sample correction `(sqrt(ne) + 0.12 + 0.11 / sqrt(ne)) D`.
pub fn ks_two_sample(x: &[f64], y: &[f64]) -> Result<KsResult> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::InvalidModel("KS test needs two nonempty samples".into()));
    }
    let mut a = x.to_vec();
    let mut b = y.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let v = a[i].min(b[j]);
        while i < n && a[i] <= v {
            i += 1;
        }
        while j < m && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let ne = (n * m) as f64 / (n + m) as f64;
    let en = ne.sqrt();
    let p = kolmogorov_survival((en + 0.12 + 0.11 / en) * d);
    Ok(KsResult { statistic: d, p_value: p })
}

/// Thins an autocorrelated chain to roughly independent draws by keeping
/// every `ceil(n / ESS)`-th value.
pub fn thin_to_ess(xs: &[f64]) -> Vec<f64> {
    let step = ((xs.len() as f64 / ess(xs).max(1.0)).ceil() as usize).max(1);
    xs.iter().step_by(step).copied().collect()
}

/// KS test on MCMC output, each side thinned by its own ESS.
pub fn ks_chains(x: &[f64], y: &[f64]) -> Result<KsResult> {
    ks_two_sample(&thin_to_ess(x), &thin_to_ess(y))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeldoutMetrics {
    /// Mean log predictive probability of the expert's action per step.
    pub mean_log_likelihood: f64,
    /// Mean entropy of the predictive action distribution.
    pub mean_entropy: f64,
    pub n_steps: usize,
}

/// Posterior predictive metrics. `q(sample, step)` gives the Q-values of
/// every action at a test step under one posterior sample; the predictive
/// distribution averages the Boltzmann probabilities over samples.
pub fn predictive_metrics<F>(n_samples: usize, actions: &[usize], alpha: f64, q: F) -> Result<HeldoutMetrics>
where
    F: Fn(usize, usize) -> Result<Vec<f64>>,
{
    if actions.is_empty() {
        return Err(Error::InvalidModel("held-out evaluation needs at least one test step".into()));
    }
    if n_samples == 0 {
        return Err(Error::InvalidModel("held-out evaluation needs at least one posterior sample".into()));
    }
    let (mut ll, mut ent) = (0.0, 0.0);
    for (step, &action) in actions.iter().enumerate() {
        let mut pred: Vec<f64> = Vec::new();
        for s in 0..n_samples {
            let scaled: Vec<f64> = q(s, step)?.iter().map(|x| alpha * x).collect();
            let lse = logsumexp(&scaled);
            if pred.is_empty() {
                pred = vec![0.0; scaled.len()];
            }
            for (p, x) in pred.iter_mut().zip(&scaled) {
                *p += (x - lse).exp() / n_samples as f64;
            }
        }
        ll += pred[action].ln();
        ent -= pred.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>();
    }
    let n = actions.len() as f64;
    Ok(HeldoutMetrics { mean_log_likelihood: ll / n, mean_entropy: ent / n, n_steps: actions.len() })
}

/// Held-out metrics for Q-network samples on continuous transitions.
pub fn heldout_metrics(
    arch: &MlpArchitecture,
    samples: &[Vec<f64>],
    test: &[ContinuousTransition],
    alpha: f64,
) -> Result<HeldoutMetrics> {
    let actions: Vec<usize> = test.iter().map(|t| t.action).collect();
    predictive_metrics(samples.len(), &actions, alpha, |s, step| q_forward(arch, &samples[s], &test[step].features))
}

/// Held-out metrics for tabular Q samples on finite-state transitions.
pub fn heldout_metrics_finite(
    q_samples: &[Vec<f64>],
    n_actions: usize,
    test: &[(usize, usize)],
    alpha: f64,
) -> Result<HeldoutMetrics> {
    let actions: Vec<usize> = test.iter().map(|t| t.1).collect();
    predictive_metrics(q_samples.len(), &actions, alpha, |s, step| {
        let st = test[step].0;
        Ok(q_samples[s][st * n_actions..(st + 1) * n_actions].to_vec())
    })
}

/// Midpoint grid along one reward dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub low: f64,
    pub high: f64,
    pub n: usize,
}

impl GridAxis {
    pub fn new(low: f64, high: f64, n: usize) -> Self {
        GridAxis { low, high, n }
    }

    pub fn width(&self) -> f64 {
        (self.high - self.low) / self.n as f64
    }

    pub fn centre(&self, i: usize) -> f64 {
        self.low + (i as f64 + 0.5) * self.width()
    }
}

/// Posterior probabilities of the cells of a reward grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPosterior {
    pub axes: Vec<GridAxis>,
    /// Cell probabilities, last axis fastest; they sum to 1.
    pub probs: Vec<f64>,
}

impl GridPosterior {
    /// Probabilities of the cells along `dim`, summed over the other axes.
    pub fn marginal(&self, dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.axes[dim].n];
        let stride: usize = self.axes[dim + 1..].iter().map(|a| a.n).product();
        for (k, p) in self.probs.iter().enumerate() {
            out[(k / stride) % self.axes[dim].n] += p;
        }
        out
    }

    /// Density values (probability over cell volume).
    pub fn density(&self) -> Vec<f64> {
        let vol: f64 = self.axes.iter().map(GridAxis::width).product();
        self.probs.iter().map(|p| p / vol).collect()
    }
}

/// Reward posterior on a grid by midpoint quadrature, solving for the
/// optimal Q-values at every grid point. At most three reward dimensions.
pub fn brute_force_posterior(spec: &FinitePosteriorSpec, axes: &[GridAxis], exec: Exec) -> Result<GridPosterior> {
    let post = PolicyWalkPosterior::new(spec.clone())?;
    if post.dim() != axes.len() || axes.is_empty() || axes.len() > 3 {
        return Err(Error::InvalidModel(format!(
            "grid posterior needs one axis per reward dimension (at most 3); got {} axes for {} dimensions",
            axes.len(),
            post.dim()
        )));
    }
    if axes.iter().any(|a| a.n < 50 || !(a.low < a.high)) {
        return Err(Error::InvalidModel("each grid axis needs n >= 50 and low < high".into()));
    }
    let total: usize = axes.iter().map(|a| a.n).product();
    let logp: Vec<Result<f64>> = map_indexed(total, exec, |k| {
        let mut r = vec![0.0; axes.len()];
        let mut rest = k;
        for (d, a) in axes.iter().enumerate().rev() {
            r[d] = a.centre(rest % a.n);
            rest /= a.n;
        }
        Ok(post.log_density(&r, &mut WarmStart::cold())?.0)
    });
    let logp = logp.into_iter().collect::<Result<Vec<f64>>>()?;
    let norm = logsumexp(&logp);
    let probs = logp.iter().map(|l| (l - norm).exp()).collect();
    Ok(GridPosterior { axes: axes.to_vec(), probs })
}

/// Histogram of `xs` over the cells of `axis`, as probabilities. Values
/// outside the axis range are counted in the denominator only.
pub fn histogram(xs: &[f64], axis: &GridAxis) -> Vec<f64> {
    let mut out = vec![0.0; axis.n];
    for &x in xs {
        let k = ((x - axis.low) / axis.width()).floor();
        if k >= 0.0 && (k as usize) < axis.n {
            out[k as usize] += 1.0;
        }
    }
    out.iter_mut().for_each(|c| *c /= xs.len() as f64);
    out
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Two-dimensional histogram of a pair of reward dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairHistogram {
    pub dim_x: usize,
    pub dim_y: usize,
    pub x_axis: GridAxis,
    pub y_axis: GridAxis,
    /// Counts, `y` fastest.
    pub counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointReport {
    pub n_samples: usize,
    pub means: Vec<f64>,
    pub correlations: Vec<Vec<f64>>,
    #[serde(skip)]
    pub histograms: Vec<PairHistogram>,
}

/// Pearson correlations and pairwise histograms of reward samples. Each
/// dimension's histogram range is its sample range.
pub fn joint_posterior_report(samples: &[Vec<f64>], bins: usize) -> Result<JointReport> {
    let dim = samples.first().map_or(0, Vec::len);
    if dim < 2 || samples.len() < 2 || bins == 0 {
        return Err(Error::InvalidModel("joint report needs >= 2 dimensions, >= 2 samples and >= 1 bin".into()));
    }
    let n = samples.len() as f64;
    let col = |d: usize| samples.iter().map(move |s| s[d]);
    let means: Vec<f64> = (0..dim).map(|d| col(d).sum::<f64>() / n).collect();
    let sds: Vec<f64> = (0..dim).map(|d| (col(d).map(|x| (x - means[d]).powi(2)).sum::<f64>() / n).sqrt()).collect();
    let mut correlations = vec![vec![0.0; dim]; dim];
    for i in 0..dim {
        for j in 0..dim {
            let cov = samples.iter().map(|s| (s[i] - means[i]) * (s[j] - means[j])).sum::<f64>() / n;
            correlations[i][j] = if i == j { 1.0 } else { cov / (sds[i] * sds[j]) };
        }
    }
    let axis = |d: usize| {
        let lo = col(d).fold(f64::INFINITY, f64::min);
        let hi = col(d).fold(f64::NEG_INFINITY, f64::max);
        // widen by a hair so the maximum falls inside the last bin
        let pad = 1e-9 * (1.0 + (hi - lo).abs());
        GridAxis::new(lo, hi + pad, bins)
    };
    let axes: Vec<GridAxis> = (0..dim).map(axis).collect();
    let mut histograms = Vec::new();
    for i in 0..dim {
        for j in i + 1..dim {
            let mut counts = vec![0u64; bins * bins];
            for s in samples {
                let bx = (((s[i] - axes[i].low) / axes[i].width()) as usize).min(bins - 1);
                let by = (((s[j] - axes[j].low) / axes[j].width()) as usize).min(bins - 1);
                counts[bx * bins + by] += 1;
            }
            histograms.push(PairHistogram { dim_x: i, dim_y: j, x_axis: axes[i], y_axis: axes[j], counts });
        }
    }
    Ok(JointReport { n_samples: samples.len(), means, correlations, histograms })
}

impl JointReport {
    /// Long format `dim_x, dim_y, x_centre, y_centre, count`.
    pub fn write_histograms_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["dim_x", "dim_y", "x_centre", "y_centre", "count"])?;
        for h in &self.histograms {
            let bins = h.y_axis.n;
            for (k, c) in h.counts.iter().enumerate() {
                w.write_record([
                    h.dim_x.to_string(),
                    h.dim_y.to_string(),
                    h.x_axis.centre(k / bins).to_string(),
                    h.y_axis.centre(k % bins).to_string(),
                    c.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Fraction of samples with `x[i] < x[j]`.
pub fn prob_less(samples: &[Vec<f64>], i: usize, j: usize) -> f64 {
    samples.iter().filter(|s| s[i] < s[j]).count() as f64 / samples.len() as f64
}

fn median_excluding(s: &[f64], skip: usize) -> f64 {
    let mut v: Vec<f64> = s.iter().enumerate().filter(|(k, _)| *k != skip).map(|(_, x)| *x).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Mass of the goal-reward posterior by sign and by the median of the other
/// rewards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoalSignSplit {
    pub goal_positive: f64,
    /// Goal negative while the median other reward is negative too.
    pub goal_negative_others_negative: f64,
    /// Goal negative while the median other reward is positive.
    pub goal_negative_others_positive: f64,
}

pub fn goal_sign_split(samples: &[Vec<f64>], goal: usize) -> GoalSignSplit {
    let n = samples.len() as f64;
    let (mut pos, mut neg_neg, mut neg_pos) = (0.0, 0.0, 0.0);
    for s in samples {
        if s[goal] >= 0.0 {
            pos += 1.0;
        } else if median_excluding(s, goal) > 0.0 {
            neg_pos += 1.0;
        } else {
            neg_neg += 1.0;
        }
    }
    GoalSignSplit {
        goal_positive: pos / n,
        goal_negative_others_negative: neg_neg / n,
        goal_negative_others_positive: neg_pos / n,
    }
}
