//! Maximum-likelihood fitting of the generalized extreme value law
//! `G(x) = exp(-[1 + ξ(x - κ)/σ]^{-1/ξ})`.

use crate::error::{Error, Result};
use crate::evt::optim::nelder_mead;

pub const MIN_MAXIMA: usize = 50;
const SERIES_XI: f64 = 1e-6;
const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

#[derive(Debug, Clone, PartialEq)]
pub struct GevFit {
    pub xi: f64,
    pub kappa: f64,
    pub sigma: f64,
    pub neg_log_likelihood: f64,
    /// Standard errors of `(ξ, κ, σ)` from the observed information.
    pub std_err: [f64; 3],
    /// 95% intervals for `(ξ, κ, σ)`.
    pub ci_95: [(f64, f64); 3],
}

/// `log(1 + ξy)/ξ`, with a series for tiny `ξ`. `None` outside the support.
fn reduced_log(xi: f64, y: f64) -> Option<f64> {
    if xi.abs() < SERIES_XI {
        return Some(y - 0.5 * xi * y * y + xi * xi * y * y * y / 3.0);
    }
    let t = xi * y;
    if t <= -1.0 {
        return None;
    }
    Some(t.ln_1p() / xi)
}

/// Negative log-likelihood; `+∞` when a sample falls outside the support.
pub fn gev_nll(xi: f64, kappa: f64, sigma: f64, data: &[f64]) -> f64 {
    if !(sigma > 0.0) {
        return f64::INFINITY;
    }
    let mut total = data.len() as f64 * sigma.ln();
    for &x in data {
        let Some(l) = reduced_log(xi, (x - kappa) / sigma) else {
            return f64::INFINITY;
        };
        total += (1.0 + xi) * l + (-l).exp();
    }
    total
}

/// Inverse distribution function, used to generate synthetic maxima.
pub fn gev_quantile(p: f64, xi: f64, kappa: f64, sigma: f64) -> f64 {
    let w = -p.ln();
    if xi.abs() < SERIES_XI {
        kappa - sigma * w.ln()
    } else {
        kappa + sigma * (w.powf(-xi) - 1.0) / xi
    }
}

pub fn gev_cdf(x: f64, xi: f64, kappa: f64, sigma: f64) -> f64 {
    let y = (x - kappa) / sigma;
    match reduced_log(xi, y) {
        Some(l) => (-(-l).exp()).exp(),
        None => {
            if xi > 0.0 {
                0.0
            } else {
                1.0
            }
        }
    }
}

fn invert3(m: [[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    if !(det.abs() > 0.0) || !det.is_finite() {
        return None;
    }
    let mut inv = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let (a, b) = ((j + 1) % 3, (j + 2) % 3);
            let (c, d) = ((i + 1) % 3, (i + 2) % 3);
            inv[i][j] = (m[a][c] * m[b][d] - m[a][d] * m[b][c]) / det;
        }
    }
    Some(inv)
}

/// Central-difference Hessian of the likelihood in `(ξ, κ, σ)`.
fn hessian(data: &[f64], p: [f64; 3]) -> [[f64; 3]; 3] {
    let f = |q: [f64; 3]| gev_nll(q[0], q[1], q[2], data);
    let steps = [1e-4, 1e-4 * p[2], 1e-4 * p[2]];
    let mut h = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in i..3 {
            let shifted = |di: f64, dj: f64| {
                let mut q = p;
                q[i] += di * steps[i];
                q[j] += dj * steps[j];
                f(q)
            };
            let v = if i == j {
                let mut up = p;
                up[i] += steps[i];
                let mut dn = p;
                dn[i] -= steps[i];
                (f(up) - 2.0 * f(p) + f(dn)) / (steps[i] * steps[i])
            } else {
                (shifted(1.0, 1.0) - shifted(1.0, -1.0) - shifted(-1.0, 1.0) + shifted(-1.0, -1.0))
                    / (4.0 * steps[i] * steps[j])
            };
            h[i][j] = v;
            h[j][i] = v;
        }
    }
    h
}

/// Maximum-likelihood GEV fit: the Gumbel sub-model is fitted first and
/// seeds the full three-parameter search.
pub fn gev_fit(maxima: &[f64]) -> Result<GevFit> {
    let n = maxima.len();
    if n < MIN_MAXIMA {
        return Err(Error::DegenerateData(format!("need at least {MIN_MAXIMA} maxima, got {n}")));
    }
    if maxima.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateData("maxima must be finite".into()));
    }
    let mean = maxima.iter().sum::<f64>() / n as f64;
    let var = maxima.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if !(var > 0.0) {
        return Err(Error::DegenerateData("all maxima are equal".into()));
    }
    let sd = var.sqrt();
    let sigma0 = sd * 6f64.sqrt() / std::f64::consts::PI;
    let kappa0 = mean - EULER_GAMMA * sigma0;

    let gumbel = nelder_mead(
        |q| gev_nll(0.0, q[0], q[1].exp(), maxima),
        &[kappa0, sigma0.ln()],
        &[0.1 * sd, 0.1],
        1e-14,
        5_000,
    );
    let mut start = vec![0.0, gumbel.x[0], gumbel.x[1]];
    let full_nll = |q: &[f64]| gev_nll(q[0], q[1], q[2].exp(), maxima);
    let mut best = None;
    for _ in 0..3 {
        let m = nelder_mead(full_nll, &start, &[0.05, 0.05 * sd, 0.05], 1e-15, 20_000);
        start = m.x.clone();
        best = Some(m);
    }
    let best = best.expect("at least one pass");
    if !best.value.is_finite() {
        return Err(Error::Optimization("likelihood is infinite at the optimum".into()));
    }
    let p = [best.x[0], best.x[1], best.x[2].exp()];
    let h = hessian(maxima, p);
    let cov = invert3(h).ok_or_else(|| Error::Optimization("singular observed information".into()))?;
    let mut std_err = [0.0; 3];
    let mut ci_95 = [(0.0, 0.0); 3];
    for i in 0..3 {
        if !(cov[i][i] > 0.0) {
            return Err(Error::Optimization(format!(
                "observed information is not positive definite (diag {i} = {:e}); nll {:.6}, {} iterations",
                cov[i][i], best.value, best.iterations
            )));
        }
        std_err[i] = cov[i][i].sqrt();
        ci_95[i] = (p[i] - 1.96 * std_err[i], p[i] + 1.96 * std_err[i]);
    }
    Ok(GevFit {
        xi: p[0],
        kappa: p[1],
        sigma: p[2],
        neg_log_likelihood: best.value,
        std_err,
        ci_95,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gumbel_series_branch_is_continuous() {
        let data = [0.3, 1.2, -0.4, 2.5];
        let a = gev_nll(0.0, 0.1, 1.3, &data);
        let b = gev_nll(2e-6, 0.1, 1.3, &data);
        assert!((a - b).abs() < 1e-4);
    }

    #[test]
    fn quantile_inverts_cdf() {
        for xi in [-0.2, 0.0, 0.2] {
            for p in [0.1, 0.5, 0.9] {
                let x = gev_quantile(p, xi, 3.0, 1.5);
                assert!((gev_cdf(x, xi, 3.0, 1.5) - p).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn too_few_or_constant_maxima_rejected() {
        assert!(matches!(gev_fit(&[1.0; 10]), Err(Error::DegenerateData(_))));
        assert!(matches!(gev_fit(&[1.0; 60]), Err(Error::DegenerateData(_))));
    }
}
