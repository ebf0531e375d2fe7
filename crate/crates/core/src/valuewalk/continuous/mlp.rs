use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{Shape, Tape, Var};

/// Feed-forward Q-network with elu hidden layers and one linear output per
/// action.
///
/// Parameters are flattened layer by layer; within a layer the weights come
/// first as an `in x out` row-major block, then the `out` biases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpArchitecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
}

impl MlpArchitecture {
    pub fn new(input_dim: usize, hidden: Vec<usize>, output_dim: usize) -> Self {
        MlpArchitecture { input_dim, hidden, output_dim }
    }

    /// A single linear layer.
    pub fn linear(input_dim: usize, output_dim: usize) -> Self {
        Self::new(input_dim, Vec::new(), output_dim)
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input_dim);
        w.extend(&self.hidden);
        w.push(self.output_dim);
        w
    }

    pub fn n_params(&self) -> usize {
        self.widths().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths().contains(&0) {
            return Err(Error::InvalidModel(format!("layer widths must be positive: {:?}", self.widths())));
        }
        Ok(())
    }

    /// Weights scaled by `1/sqrt(fan_in)`, zero biases.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut theta = Vec::with_capacity(self.n_params());
        for w in self.widths().windows(2) {
            let sd = 1.0 / (w[0] as f64).sqrt();
            theta.extend((0..w[0] * w[1]).map(|_| sd * rng.sample::<f64, _>(StandardNormal)));
            theta.extend(std::iter::repeat_n(0.0, w[1]));
        }
        theta
    }

    pub fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.n_params() {
            return Err(Error::Dimension { expected: self.n_params(), got: theta.len() });
        }
        Ok(())
    }
}

/// Q-values for every action at one feature vector.
pub fn q_forward(arch: &MlpArchitecture, theta: &[f64], features: &[f64]) -> Result<Vec<f64>> {
    arch.check_theta(theta)?;
    if features.len() != arch.input_dim {
        return Err(Error::Dimension { expected: arch.input_dim, got: features.len() });
    }
    let widths = arch.widths();
    let mut h = features.to_vec();
    let mut off = 0;
    for (layer, w) in widths.windows(2).enumerate() {
        let (n_in, n_out) = (w[0], w[1]);
        let weights = &theta[off..off + n_in * n_out];
        let bias = &theta[off + n_in * n_out..off + n_in * n_out + n_out];
        let mut out = bias.to_vec();
        for (i, hi) in h.iter().enumerate() {
            for (o, acc) in out.iter_mut().enumerate() {
                *acc += hi * weights[i * n_out + o];
            }
        }
        if layer + 2 < widths.len() {
            out.iter_mut().for_each(|x| *x = elu(*x));
        }
        h = out;
        off += n_in * n_out + n_out;
    }
    Ok(h)
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

/// Index tables for running the network on a gradient tape.
#[derive(Debug, Clone)]
pub(crate) struct TapeMlp {
    layers: Vec<(Arc<[usize]>, Arc<[usize]>, usize, usize)>,
}

impl TapeMlp {
    pub(crate) fn new(arch: &MlpArchitecture) -> Self {
        let mut off = 0;
        let layers = arch
            .widths()
            .windows(2)
            .map(|w| {
                let wi: Arc<[usize]> = (off..off + w[0] * w[1]).collect();
                off += w[0] * w[1];
                let bi: Arc<[usize]> = (off..off + w[1]).collect();
                off += w[1];
                (wi, bi, w[0], w[1])
            })
            .collect();
        TapeMlp { layers }
    }

    /// Batched forward pass; `x` is `n x input_dim`, the result `n x output_dim`.
    pub(crate) fn forward(&self, t: &mut Tape, theta: Var, x: Var) -> Var {
        let mut h = x;
        for (layer, (wi, bi, n_in, n_out)) in self.layers.iter().enumerate() {
            let w = t.gather(theta, wi);
            let w = t.reshape(w, Shape::new(*n_in, *n_out));
            let b = t.gather(theta, bi);
            let b = t.reshape(b, Shape::new(1, *n_out));
            let z = t.matmul(h, w);
            h = t.add(z, b);
            if layer + 1 < self.layers.len() {
                h = t.elu(h);
            }
        }
        h
    }
}
