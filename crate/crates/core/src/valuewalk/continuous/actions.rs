use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::logsumexp;

/// Axis-aligned box of continuous actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionBox {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl ActionBox {
    pub fn new(low: Vec<f64>, high: Vec<f64>) -> Self {
        ActionBox { low, high }
    }

    pub fn dim(&self) -> usize {
        self.low.len()
    }

    /// Volume attributed to each point of an `n`-per-axis grid.
    pub fn cell_volume(&self, n: usize) -> f64 {
        self.low.iter().zip(&self.high).map(|(l, h)| (h - l) / n as f64).product()
    }
}

/// Uniform grid with `n` points per axis, endpoints included. The last axis
/// varies fastest.
pub fn discretize_actions(space: &ActionBox, n: usize) -> Result<Vec<Vec<f64>>> {
    let d = space.dim();
    if d == 0 || d > 2 {
        return Err(Error::UnsupportedDimension(d));
    }
    if space.high.len() != d {
        return Err(Error::Dimension { expected: d, got: space.high.len() });
    }
    if n == 0 || space.low.iter().zip(&space.high).any(|(l, h)| !(l <= h)) {
        return Err(Error::InvalidModel("need n >= 1 and low <= high on every axis".into()));
    }
    let axis = |k: usize| -> Vec<f64> {
        if n == 1 {
            return vec![0.5 * (space.low[k] + space.high[k])];
        }
        let step = (space.high[k] - space.low[k]) / (n - 1) as f64;
        (0..n).map(|i| if i + 1 == n { space.high[k] } else { space.low[k] + step * i as f64 }).collect()
    };
    Ok(match d {
        1 => axis(0).into_iter().map(|a| vec![a]).collect(),
        _ => {
            let (a0, a1) = (axis(0), axis(1));
            a0.iter().flat_map(|x| a1.iter().map(move |y| vec![*x, *y])).collect()
        }
    })
}

/// Boltzmann log-likelihood of one observed action when the normaliser over
/// a continuous action set is replaced by a Riemann sum on a grid.
pub fn discretized_log_likelihood(alpha: f64, q_observed: f64, q_grid: &[f64], cell_volume: f64) -> f64 {
    let scaled: Vec<f64> = q_grid.iter().map(|q| alpha * q).collect();
    alpha * q_observed - logsumexp(&scaled) - cell_volume.ln()
}
