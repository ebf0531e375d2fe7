use crate::error::{Error, Result};

const MIN_LEN: usize = 10;

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Split-chain potential scale reduction factor, one value per dimension.
///
/// Every chain is cut in half so a single chain is also accepted. Chains with
/// zero within-chain variance give 1 when they agree and infinity otherwise.
pub fn r_hat(chains: &[Vec<Vec<f64>>]) -> Result<Vec<f64>> {
    let Some(first) = chains.first() else {
        return Err(Error::ChainShape { min: MIN_LEN, detail: "no chains".into() });
    };
    let n = first.len();
    if n < MIN_LEN || chains.iter().any(|c| c.len() != n) {
        let lens: Vec<usize> = chains.iter().map(Vec::len).collect();
        return Err(Error::ChainShape { min: MIN_LEN, detail: format!("lengths {lens:?}") });
    }
    let dim = first[0].len();
    let half = n / 2;
    let mut out = Vec::with_capacity(dim);
    for d in 0..dim {
        let mut stats = Vec::with_capacity(2 * chains.len());
        for c in chains {
            // drop the middle draw of odd-length chains
            let col: Vec<f64> = c.iter().map(|row| row[d]).collect();
            stats.push(mean_var(&col[..half]));
            stats.push(mean_var(&col[n - half..]));
        }
        out.push(psrf(&stats, half));
    }
    Ok(out)
}

fn psrf(stats: &[(f64, f64)], n: usize) -> f64 {
    let m = stats.len() as f64;
    let n = n as f64;
    let grand = stats.iter().map(|s| s.0).sum::<f64>() / m;
    let b = n / (m - 1.0) * stats.iter().map(|s| (s.0 - grand).powi(2)).sum::<f64>();
    let w = stats.iter().map(|s| s.1).sum::<f64>() / m;
    if w <= 0.0 {
        return if b <= 1e-300 { 1.0 } else { f64::INFINITY };
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    (var_plus / w).sqrt()
}

/// Largest split R-hat over all dimensions.
pub fn r_hat_max(chains: &[Vec<Vec<f64>>]) -> Result<f64> {
    Ok(r_hat(chains)?.into_iter().fold(f64::NEG_INFINITY, f64::max))
}

/// Effective sample size of a scalar chain with Geyer's initial positive
/// sequence truncation. A constant chain gives 1.
pub fn ess(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return n as f64;
    }
    let m = xs.iter().sum::<f64>() / n as f64;
    let centred: Vec<f64> = xs.iter().map(|x| x - m).collect();
    let autocov = |lag: usize| -> f64 { centred[..n - lag].iter().zip(&centred[lag..]).map(|(a, b)| a * b).sum::<f64>() / n as f64 };
    let c0 = autocov(0);
    if c0 <= 0.0 || !c0.is_finite() {
        return 1.0;
    }
    let mut tau = -1.0;
    let mut lag = 0;
    while lag + 1 < n {
        let pair = (autocov(lag) + autocov(lag + 1)) / c0;
        if pair <= 0.0 {
            break;
        }
        tau += 2.0 * pair;
        lag += 2;
    }
    n as f64 / tau.max(1.0 / n as f64)
}

/// Per-dimension ESS summed over chains.
pub fn ess_chains(chains: &[Vec<Vec<f64>>]) -> Vec<f64> {
    let Some(dim) = chains.first().and_then(|c| c.first()).map(Vec::len) else {
        return Vec::new();
    };
    (0..dim)
        .map(|d| {
            chains
                .iter()
                .map(|c| ess(&c.iter().map(|row| row[d]).collect::<Vec<_>>()))
                .sum()
        })
        .collect()
}

/// Smallest per-dimension ESS summed over chains.
pub fn min_ess(chains: &[Vec<Vec<f64>>]) -> f64 {
    ess_chains(chains).into_iter().fold(f64::INFINITY, f64::min)
}
