/// Nesterov dual averaging of the log step size.
///
/// Uses `gamma = 0.05`, `t0 = 10`, `kappa = 0.75` and shrinks towards
/// `mu = ln(10 eps0)`.
#[derive(Debug, Clone)]
pub struct DualAveraging {
    target: f64,
    mu: f64,
    gamma: f64,
    t0: f64,
    kappa: f64,
    counter: f64,
    s_bar: f64,
    x_bar: f64,
}

impl DualAveraging {
    pub fn new(initial_step: f64, target: f64) -> Self {
        DualAveraging {
            target,
            mu: (10.0 * initial_step).ln(),
            gamma: 0.05,
            t0: 10.0,
            kappa: 0.75,
            counter: 0.0,
            s_bar: 0.0,
            x_bar: 0.0,
        }
    }

    /// Feeds one acceptance statistic and returns the next step size.
    pub fn update(&mut self, accept: f64) -> f64 {
        let accept = if accept.is_nan() { 0.0 } else { accept.min(1.0) };
        self.counter += 1.0;
        let eta = 1.0 / (self.counter + self.t0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.target - accept);
        let x = self.mu - self.s_bar * self.counter.sqrt() / self.gamma;
        let w = self.counter.powf(-self.kappa);
        self.x_bar = (1.0 - w) * self.x_bar + w * x;
        x.exp()
    }

    /// Step size to freeze after warmup.
    pub fn final_step(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Warmup windows `[start, end)` in which the metric is estimated, laid
/// out like Stan's: a fast initial phase, doubling slow windows and a
/// final fast phase. Runs shorter than 20 iterations get none.
pub fn adaptation_windows(n_warmup: usize) -> Vec<(usize, usize)> {
    if n_warmup < 20 {
        return Vec::new();
    }
    let (mut init, mut term, mut base) = (75, 50, 25);
    if init + term + base > n_warmup {
        init = n_warmup * 15 / 100;
        term = n_warmup / 10;
        base = n_warmup - init - term;
    }
    let last = n_warmup - term;
    let mut out = Vec::new();
    let (mut start, mut size) = (init, base);
    while start < last {
        let mut end = start + size;
        // a window that would leave too little room for the next one absorbs it
        if end + 2 * size > last {
            end = last;
        }
        out.push((start, end));
        start = end;
        size *= 2;
    }
    out
}

/// Running mean and scatter matrix of warmup draws.
#[derive(Debug, Clone)]
pub(crate) struct CovarianceEstimator {
    n: usize,
    mean: Vec<f64>,
    // full scatter matrix, row-major
    m2: Vec<f64>,
}

impl CovarianceEstimator {
    pub fn new(dim: usize) -> Self {
        CovarianceEstimator { n: 0, mean: vec![0.0; dim], m2: vec![0.0; dim * dim] }
    }

    pub fn push(&mut self, x: &[f64]) {
        let d = self.mean.len();
        self.n += 1;
        let delta: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        for (m, dl) in self.mean.iter_mut().zip(&delta) {
            *m += dl / self.n as f64;
        }
        for i in 0..d {
            let after = x[i] - self.mean[i];
            for j in 0..d {
                self.m2[i * d + j] += after * delta[j];
            }
        }
    }

    /// Regularized covariance, shrunk towards `1e-3 I` as Stan does.
    pub fn covariance(&self) -> Vec<f64> {
        let d = self.mean.len();
        let n = self.n as f64;
        let w = n / (n + 5.0);
        let mut c: Vec<f64> = self.m2.iter().map(|v| w * v / (n - 1.0).max(1.0)).collect();
        for i in 0..d {
            c[i * d + i] += 1e-3 * 5.0 / (n + 5.0);
        }
        c
    }
}

/// `theta = L x` for a lower-triangular `L` with `L L^T` the inverse mass
/// matrix. HMC in `x` with unit mass is HMC in `theta` with that metric.
#[derive(Debug, Clone)]
pub(crate) struct LinearMap {
    dim: usize,
    l: Vec<f64>,
    diagonal: bool,
}

impl LinearMap {
    pub fn identity(dim: usize) -> Self {
        let mut l = vec![0.0; dim * dim];
        (0..dim).for_each(|i| l[i * dim + i] = 1.0);
        LinearMap { dim, l, diagonal: true }
    }

    /// From a covariance estimate; `None` when it is not positive definite.
    pub fn from_covariance(cov: &[f64], dim: usize, dense: bool) -> Option<Self> {
        if dense {
            let l = crate::linalg::cholesky_lower(dim, cov)?;
            Some(LinearMap { dim, l, diagonal: false })
        } else {
            let mut m = Self::identity(dim);
            for i in 0..dim {
                let v = cov[i * dim + i];
                if !(v > 0.0 && v.is_finite()) {
                    return None;
                }
                m.l[i * dim + i] = v.sqrt();
            }
            Some(m)
        }
    }

    /// `L x`
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim;
        if self.diagonal {
            return (0..d).map(|i| self.l[i * d + i] * x[i]).collect();
        }
        (0..d).map(|i| (0..=i).map(|j| self.l[i * d + j] * x[j]).sum()).collect()
    }

    /// `L^T g`, the gradient in `x` coordinates.
    pub fn pullback(&self, g: &[f64]) -> Vec<f64> {
        let d = self.dim;
        if self.diagonal {
            return (0..d).map(|i| self.l[i * d + i] * g[i]).collect();
        }
        (0..d).map(|j| (j..d).map(|i| self.l[i * d + j] * g[i]).sum()).collect()
    }

    /// `L^{-1} theta` by forward substitution.
    pub fn inverse(&self, theta: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let mut x = vec![0.0; d];
        for i in 0..d {
            let s: f64 = if self.diagonal { 0.0 } else { (0..i).map(|j| self.l[i * d + j] * x[j]).sum() };
            x[i] = (theta[i] - s) / self.l[i * d + i];
        }
        x
    }
}
