use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{Shape, Tape, Var};
use crate::linalg;

const MAX_JITTER: f64 = 1e-3;

/// A state-action point at which reward draws are produced.
///
/// `terminal` marks a state with no continuation, so its reward equals its
/// Q-value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub features: Vec<f64>,
    pub action: usize,
    #[serde(default)]
    pub terminal: bool,
}

impl EvalPoint {
    pub fn new(features: Vec<f64>, action: usize) -> Self {
        EvalPoint { features, action, terminal: false }
    }
}

/// Covariance between rewards at two evaluation points with the same action.
/// Rewards for different actions are independent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardKernel {
    Rbf { scale: f64, lengthscale: f64 },
    /// Independent rewards with a shared variance.
    Diagonal { variance: f64 },
}

impl Default for RewardKernel {
    fn default() -> Self {
        RewardKernel::Rbf { scale: 1.0, lengthscale: 0.2 }
    }
}

/// Zero-mean Gaussian-process prior on rewards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpRewardPrior {
    pub kernel: RewardKernel,
    /// Starting diagonal jitter for the RBF kernel; multiplied by 10 up to
    /// `1e-3` until the factorisation succeeds. The diagonal kernel needs none.
    pub jitter: f64,
}

impl Default for GpRewardPrior {
    fn default() -> Self {
        GpRewardPrior { kernel: RewardKernel::default(), jitter: 1e-6 }
    }
}

impl GpRewardPrior {
    pub fn diagonal(variance: f64) -> Self {
        GpRewardPrior { kernel: RewardKernel::Diagonal { variance }, jitter: 0.0 }
    }

    /// Covariance matrix over the points, row-major, without jitter.
    pub fn covariance(&self, points: &[EvalPoint]) -> Vec<f64> {
        let n = points.len();
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let v = match self.kernel {
                    RewardKernel::Diagonal { variance } => {
                        if i == j {
                            variance
                        } else {
                            0.0
                        }
                    }
                    RewardKernel::Rbf { scale, lengthscale } => {
                        if points[i].action != points[j].action {
                            0.0
                        } else {
                            let d2: f64 = points[i]
                                .features
                                .iter()
                                .zip(&points[j].features)
                                .map(|(a, b)| (a - b) * (a - b))
                                .sum();
                            scale * (-0.5 * d2 / (lengthscale * lengthscale)).exp()
                        }
                    }
                };
                k[i * n + j] = v;
                k[j * n + i] = v;
            }
        }
        k
    }

    pub fn factorize(&self, points: &[EvalPoint]) -> Result<GpFactor> {
        let n = points.len();
        let mut k = self.covariance(points);
        let mut jitter = match self.kernel {
            RewardKernel::Diagonal { variance } if variance > 0.0 => 0.0,
            _ => self.jitter,
        };
        loop {
            for i in 0..n {
                k[i * n + i] += jitter;
            }
            if let Some(l) = linalg::cholesky_lower(n, &k) {
                let log_det = 2.0 * (0..n).map(|i| l[i * n + i].ln()).sum::<f64>();
                let l_inv = linalg::lower_triangular_inverse(n, &l);
                return Ok(GpFactor { n, l_inv, log_det, jitter });
            }
            for i in 0..n {
                k[i * n + i] -= jitter;
            }
            let next = if jitter == 0.0 { 1e-6 } else { jitter * 10.0 };
            if next > MAX_JITTER * (1.0 + 1e-9) {
                return Err(Error::NotPositiveDefinite(jitter));
            }
            jitter = next;
        }
    }
}

/// Cholesky factorisation of the prior covariance at fixed evaluation points.
#[derive(Debug, Clone)]
pub struct GpFactor {
    n: usize,
    l_inv: Vec<f64>,
    log_det: f64,
    jitter: f64,
}

impl GpFactor {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Jitter that made the covariance factorisable.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    fn constant(&self) -> f64 {
        -0.5 * self.log_det - 0.5 * self.n as f64 * (2.0 * PI).ln()
    }

    pub fn log_density(&self, r: &[f64]) -> Result<f64> {
        if r.len() != self.n {
            return Err(Error::Dimension { expected: self.n, got: r.len() });
        }
        let mut ss = 0.0;
        for i in 0..self.n {
            let z: f64 = (0..=i).map(|j| self.l_inv[i * self.n + j] * r[j]).sum();
            ss += z * z;
        }
        Ok(-0.5 * ss + self.constant())
    }

    pub(crate) fn on_tape(&self, t: &mut Tape, r: Var) -> Var {
        let l_inv = t.constant(self.l_inv.clone(), Shape::new(self.n, self.n));
        let z = t.matvec(l_inv, r);
        let ss = t.dot(z, z);
        let half = t.scale(ss, -0.5);
        let c = t.scalar(self.constant());
        t.add(half, c)
    }
}

/// Log density of reward candidates under the prior at the given points.
pub fn gp_log_prior(rewards: &[f64], prior: &GpRewardPrior, points: &[EvalPoint]) -> Result<f64> {
    if rewards.len() != points.len() {
        return Err(Error::Dimension { expected: points.len(), got: rewards.len() });
    }
    prior.factorize(points)?.log_density(rewards)
}
