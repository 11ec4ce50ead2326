//! Birkhoff sums of the observed process, CLT and large-deviation diagnostics,
//! Kantorovich distances and concentration of the empirical measure.

use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::grid::{Grid, GridDensity};
use crate::model::{ModelConfig, StateFn};
use crate::operator::{build_ulam, stationary_density, KernelMatrix};
use crate::quadrature::gauss_legendre_8;
use crate::simulate::{replicate, InitialState, SeededStream, Trajectory};

/// An observable of the observed process.
pub type Observable<'a> = &'a (dyn Fn(f64) -> f64 + Sync);

/// Law of a single observation under stationarity, on the stationary grid
/// extended by `s_max·ε/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct MuPrime {
    pub density: GridDensity,
}

fn observation_pad(config: &ModelConfig) -> f64 {
    (config.obs.s_max * config.obs.half_width()).max(0.0)
}

fn noiseless_observation(config: &ModelConfig) -> bool {
    matches!(config.obs.s, StateFn::Const(s) if s == 0.0) || config.obs.epsilon == 0.0
}

/// Push the stationary density forward under `x ↦ x + s(x)ε`.
pub fn mu_prime(stationary: &GridDensity, config: &ModelConfig) -> Result<MuPrime> {
    if noiseless_observation(config) {
        return Ok(MuPrime {
            density: stationary.clone(),
        });
    }
    let src = stationary.grid;
    let dst = src.extended(observation_pad(config));
    let offset = ((src.interval.lo - dst.interval.lo) / src.width()).round() as usize;
    let h = src.width();
    let reach = offset + 1;
    let masses = stationary.masses();
    let rows: Vec<Vec<(usize, f64)>> = (0..src.n_cells)
        .into_par_iter()
        .map(|i| {
            if masses[i] == 0.0 {
                return Vec::new();
            }
            let (x0, x1) = (src.edge(i), src.edge(i + 1));
            let center = i + offset;
            let lo = center.saturating_sub(reach);
            let hi = (center + reach).min(dst.n_cells - 1);
            (lo..=hi)
                .map(|j| {
                    let p = config.obs.interval_prob_average(x0, x1, dst.edge(j), dst.edge(j + 1));
                    (j, masses[i] * p)
                })
                .collect()
        })
        .collect();
    let mut out = vec![0.0; dst.n_cells];
    for row in rows {
        for (j, m) in row {
            out[j] += m;
        }
    }
    debug_assert!((dst.width() - h).abs() < 1e-12);
    Ok(MuPrime {
        density: GridDensity::from_masses(dst, out)?,
    })
}

/// Copy a density onto an aligned grid that contains its own.
pub fn embed(d: &GridDensity, target: &Grid) -> Result<GridDensity> {
    let h = d.grid.width();
    if (target.width() - h).abs() > 1e-9 * h {
        return Err(Error::GridMismatch("cell widths differ".into()));
    }
    let off = (d.grid.interval.lo - target.interval.lo) / h;
    let k = off.round();
    if (off - k).abs() > 1e-6 || k < 0.0 || k as usize + d.grid.n_cells > target.n_cells {
        return Err(Error::GridMismatch("grids are not aligned".into()));
    }
    let k = k as usize;
    let mut w = vec![0.0; target.n_cells];
    w[k..k + d.grid.n_cells].copy_from_slice(&d.weights);
    Ok(GridDensity {
        grid: *target,
        weights: w,
    })
}

/// Wasserstein-1 distance `∫|F - G|`, exact for piecewise-constant densities.
pub fn kantorovich(f: &GridDensity, g: &GridDensity) -> Result<f64> {
    f.grid.ensure_same(&g.grid)?;
    let h = f.grid.width();
    let mut d0 = 0.0;
    let mut total = 0.0;
    for (a, b) in f.weights.iter().zip(&g.weights) {
        let d1 = d0 + (a - b) * h;
        total += if d0 * d1 >= 0.0 {
            0.5 * (d0.abs() + d1.abs()) * h
        } else {
            0.5 * (d0 * d0 + d1 * d1) / (d0.abs() + d1.abs()) * h
        };
        d0 = d1;
    }
    Ok(total)
}

/// `κ(μ, μ′)` and the bound `s_M·∫|ε|dψ`; constant `s` only.
pub fn mu_mu_prime_gap(stationary: &GridDensity, mu_p: &MuPrime, config: &ModelConfig) -> Result<(f64, f64)> {
    let StateFn::Const(s_m) = config.obs.s else {
        return Err(Error::AssumptionViolation(
            "the mu/mu' gap bound needs a constant modulation s".into(),
        ));
    };
    let mu = embed(stationary, &mu_p.density.grid)?;
    let kappa = kantorovich(&mu, &mu_p.density)?;
    Ok((kappa, s_m.abs() * config.obs.mean_abs()))
}

/// Normalized histogram of the observations.
pub fn empirical_measure(traj: &Trajectory, grid: &Grid) -> Result<GridDensity> {
    GridDensity::histogram(*grid, &traj.z)
}

/// `2·exp(-t²/(4·ΣLip_j²·[C_ε s_M² + C_X]))`.
pub fn concentration_bound(t: f64, lips: &[f64], c_eps: f64, s_m: f64, c_x: f64) -> f64 {
    let l2: f64 = lips.iter().map(|l| l * l).sum();
    2.0 * (-t * t / (4.0 * l2 * (c_eps * s_m * s_m + c_x))).exp()
}

#[derive(Debug, Clone)]
pub struct ConcentrationRow {
    pub n: usize,
    pub kappas: Vec<f64>,
    pub mean: f64,
    pub q05: f64,
    pub q50: f64,
    pub q95: f64,
}

#[derive(Debug, Clone)]
pub struct ConcentrationReport {
    pub rows: Vec<ConcentrationRow>,
    /// Least-squares slope of log mean κ against log n.
    pub slope: f64,
    /// Slope of log P(κ > mean + t) against t² at the largest n.
    pub tail_slope: f64,
    pub kappa_mu_mu_prime: f64,
    pub gap_bound: f64,
    pub cell_width: f64,
}

impl ConcentrationReport {
    pub fn to_csv(&self, header: &str) -> String {
        let mut out = String::new();
        if !header.is_empty() {
            out.push_str(header);
            out.push('\n');
        }
        out.push_str("n,replica,kappa\n");
        for r in &self.rows {
            for (k, v) in r.kappas.iter().enumerate() {
                out.push_str(&format!("{},{},{:e}\n", r.n, k, v));
            }
        }
        out.push_str("# summary\nn,mean,q05,q50,q95\n");
        for r in &self.rows {
            out.push_str(&format!("{},{:e},{:e},{:e},{:e}\n", r.n, r.mean, r.q05, r.q50, r.q95));
        }
        out.push_str(&format!(
            "# slope={:e} tail_slope={:e} kappa_mu_mu_prime={:e} bound={:e}\n",
            self.slope, self.tail_slope, self.kappa_mu_mu_prime, self.gap_bound
        ));
        out
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Least-squares slope and intercept of `y` on `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Stationary density and μ′ at the given resolution.
pub fn reference_measures(config: &ModelConfig, n_cells: usize) -> Result<(KernelMatrix, GridDensity, MuPrime)> {
    let l = build_ulam(config, n_cells)?;
    let w = stationary_density(&l)?.leading_density;
    let mp = mu_prime(&w, config)?;
    Ok((l, w, mp))
}

/// Monte Carlo distribution of `κ(𝓔_n, μ′)` for each `n`.
pub fn concentration_check(
    config: &ModelConfig,
    n_list: &[usize],
    replicas: usize,
    stream: SeededStream,
    n_cells: usize,
) -> Result<ConcentrationReport> {
    if !matches!(config.obs.s, StateFn::Const(_)) {
        return Err(Error::AssumptionViolation("concentration check needs a constant s".into()));
    }
    let (_, w, mp) = reference_measures(config, n_cells)?;
    let (kappa_gap, bound) = mu_mu_prime_gap(&w, &mp, config)?;
    let start = InitialState::Stationary(w.clone());
    let mut rows = Vec::new();
    for (idx, &n) in n_list.iter().enumerate() {
        let kappas = replicate(config, n, &start, replicas, stream.child(idx as u64), |tr| {
            kantorovich(&empirical_measure(tr, &mp.density.grid)?, &mp.density)
        })?;
        let mut sorted = kappas.clone();
        sorted.sort_by(f64::total_cmp);
        rows.push(ConcentrationRow {
            n,
            mean: kappas.iter().sum::<f64>() / kappas.len() as f64,
            q05: quantile(&sorted, 0.05),
            q50: quantile(&sorted, 0.5),
            q95: quantile(&sorted, 0.95),
            kappas,
        });
    }
    let lx: Vec<f64> = rows.iter().map(|r| (r.n as f64).ln()).collect();
    let ly: Vec<f64> = rows.iter().map(|r| r.mean.ln()).collect();
    let slope = if rows.len() >= 2 { linear_fit(&lx, &ly).0 } else { f64::NAN };
    let tail_slope = rows.last().map_or(f64::NAN, |r| tail_slope(&r.kappas));
    Ok(ConcentrationReport {
        rows,
        slope,
        tail_slope,
        kappa_mu_mu_prime: kappa_gap,
        gap_bound: bound,
        cell_width: mp.density.grid.width(),
    })
}

/// Slope of `log P(X > mean + t)` against `t²` over the upper half of the sample.
fn tail_slope(sample: &[f64]) -> f64 {
    let n = sample.len() as f64;
    let mean = sample.iter().sum::<f64>() / n;
    let sd = (sample.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for k in 0..8 {
        let t = 0.25 * sd * k as f64;
        let frac = sample.iter().filter(|&&v| v > mean + t).count() as f64 / n;
        if frac > 0.0 {
            xs.push(t * t);
            ys.push(frac.ln());
        }
    }
    if xs.len() < 2 {
        return f64::NAN;
    }
    linear_fit(&xs, &ys).0
}

#[derive(Debug, Clone)]
pub struct BirkhoffSeries {
    pub observable_id: String,
    pub values: Vec<f64>,
    pub centered: bool,
}

/// Partial sums `S_1..S_n` of `u(z_k)`, optionally centered by `∫u dμ′`.
pub fn birkhoff(traj: &Trajectory, u: Observable, id: &str, mu_p: &MuPrime, centered: bool) -> BirkhoffSeries {
    let shift = if centered { mu_p.density.expect(u) } else { 0.0 };
    let mut acc = 0.0;
    let values = traj
        .z
        .iter()
        .map(|&z| {
            acc += u(z) - shift;
            acc
        })
        .collect();
    BirkhoffSeries {
        observable_id: id.to_string(),
        values,
        centered,
    }
}

/// `∫ f(x + s(x)e) dψ(e)` for one state.
fn smear(config: &ModelConfig, x: f64, f: &dyn Fn(f64) -> f64) -> f64 {
    let s = config.s(x);
    let hw = config.obs.half_width();
    if s == 0.0 || hw == 0.0 {
        return f(x);
    }
    gauss_legendre_8(-hw, hw)
        .iter()
        .map(|&(e, w)| w * config.obs.psi_density(e) * f(x + s * e))
        .sum()
}

/// Long-run variance `Var₀ + 2Σ_{t=1}^{t_max} Cov_t`, where the lagged terms use
/// `û(x) = ∫u(x + s(x)ε)dψ` and the adjoint operator.
pub fn series_variance(
    config: &ModelConfig,
    l: &KernelMatrix,
    w: &GridDensity,
    u_centered: Observable,
    t_max: usize,
) -> Result<f64> {
    l.grid.ensure_same(&w.grid)?;
    let grid = w.grid;
    let u_hat = grid.cell_averages(|x| smear(config, x, &|y| u_centered(y)));
    let u_sq = grid.cell_averages(|x| smear(config, x, &|y| u_centered(y).powi(2)));
    let m = w.masses();
    let mean: f64 = m.iter().zip(&u_hat).map(|(a, b)| a * b).sum();
    let var0: f64 = m.iter().zip(&u_sq).map(|(a, b)| a * b).sum::<f64>() - mean * mean;
    let mut g = u_hat.clone();
    let mut cov_sum = 0.0;
    for _ in 1..=t_max {
        g = l.pull_back(&g);
        let c: f64 = m.iter().zip(&u_hat).zip(&g).map(|((a, b), c)| a * b * c).sum::<f64>() - mean * mean;
        cov_sum += c;
    }
    Ok(var0 + 2.0 * cov_sum)
}

/// Asymptotic Kolmogorov p-value with Stephens' small-sample correction.
pub fn ks_pvalue(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = 2.0 * (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}

/// One-sample KS statistic against the standard normal.
pub fn ks_statistic_normal(sample: &[f64]) -> f64 {
    let normal = Normal::standard();
    let mut s = sample.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = normal.cdf(x);
            (f - i as f64 / n).max((i as f64 + 1.0) / n - f)
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone)]
pub struct CltReport {
    pub mean_u: f64,
    pub sigma2_series: f64,
    pub sigma2_batch: f64,
    pub relative_gap: f64,
    pub ks_statistic: f64,
    pub ks_pvalue: f64,
    /// `S_n/√n` per replica, centered.
    pub scaled_sums: Vec<f64>,
    pub n: usize,
}

impl CltReport {
    pub fn to_csv(&self, header: &str) -> String {
        let mut out = String::new();
        if !header.is_empty() {
            out.push_str(header);
            out.push('\n');
        }
        out.push_str("n,replica,scaled_sum\n");
        for (k, v) in self.scaled_sums.iter().enumerate() {
            out.push_str(&format!("{},{},{:e}\n", self.n, k, v));
        }
        out.push_str("# summary\nmean_u,sigma2_series,sigma2_batch,relative_gap,ks_statistic,ks_pvalue\n");
        out.push_str(&format!(
            "{:e},{:e},{:e},{:e},{:e},{:e}\n",
            self.mean_u, self.sigma2_series, self.sigma2_batch, self.relative_gap, self.ks_statistic, self.ks_pvalue
        ));
        out
    }
}

/// Centered sums `S_n` of `u(z_k) - mean` for independent stationary replicas.
fn replica_sums(
    config: &ModelConfig,
    w: &GridDensity,
    u: Observable,
    mean: f64,
    n: usize,
    replicas: usize,
    stream: SeededStream,
) -> Result<Vec<f64>> {
    replicate(config, n, &InitialState::Stationary(w.clone()), replicas, stream, |tr| {
        Ok(tr.z.iter().map(|&z| u(z) - mean).sum::<f64>())
    })
}

pub const CLT_T_MAX: usize = 100;

/// Compare the series and replica estimates of `σ²` and test normality of
/// `S_n/(σ̂√n)`.
pub fn clt_check(
    config: &ModelConfig,
    u: Observable,
    n: usize,
    replicas: usize,
    stream: SeededStream,
    n_cells: usize,
) -> Result<CltReport> {
    let (l, w, mp) = reference_measures(config, n_cells)?;
    let mean_u = mp.density.expect(u);
    let centered = |x: f64| u(x) - mean_u;
    let sigma2_series = series_variance(config, &l, &w, &centered, CLT_T_MAX)?;
    if !(sigma2_series >= 1e-12) {
        return Err(Error::DegenerateVariance(sigma2_series));
    }
    let sums = replica_sums(config, &w, u, mean_u, n, replicas, stream)?;
    let sqrt_n = (n as f64).sqrt();
    let scaled_sums: Vec<f64> = sums.iter().map(|s| s / sqrt_n).collect();
    let sigma2_batch = scaled_sums.iter().map(|v| v * v).sum::<f64>() / replicas as f64;
    let sigma = sigma2_series.sqrt();
    let standardized: Vec<f64> = scaled_sums.iter().map(|v| v / sigma).collect();
    let ks = ks_statistic_normal(&standardized);
    Ok(CltReport {
        mean_u,
        sigma2_series,
        sigma2_batch,
        relative_gap: (sigma2_series - sigma2_batch).abs() / sigma2_series,
        ks_statistic: ks,
        ks_pvalue: ks_pvalue(ks, replicas),
        scaled_sums,
        n,
    })
}

#[derive(Debug, Clone)]
pub struct LdRow {
    pub eps: f64,
    pub count: usize,
    pub rate: f64,
    /// No replica exceeded `nε`; `rate` is then a lower bound.
    pub censored: bool,
    pub gaussian_rate: f64,
}

#[derive(Debug, Clone)]
pub struct LdReport {
    pub rows: Vec<LdRow>,
    pub sigma2: f64,
    pub monotone: bool,
    pub convex: bool,
}

impl LdReport {
    pub fn to_csv(&self, header: &str) -> String {
        let mut out = String::new();
        if !header.is_empty() {
            out.push_str(header);
            out.push('\n');
        }
        out.push_str("eps,count,rate,censored,gaussian_rate\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{:e},{},{:e},{},{:e}\n",
                r.eps, r.count, r.rate, r.censored as u8, r.gaussian_rate
            ));
        }
        out
    }
}

/// Empirical large-deviation rates `-(1/n)·log P(S_n > nε)`.
pub fn ld_rate(
    config: &ModelConfig,
    u: Observable,
    eps_grid: &[f64],
    n: usize,
    replicas: usize,
    stream: SeededStream,
    n_cells: usize,
) -> Result<LdReport> {
    let (l, w, mp) = reference_measures(config, n_cells)?;
    let mean_u = mp.density.expect(u);
    let centered = |x: f64| u(x) - mean_u;
    let sigma2 = series_variance(config, &l, &w, &centered, CLT_T_MAX)?;
    if !(sigma2 >= 1e-12) {
        return Err(Error::DegenerateVariance(sigma2));
    }
    let sums = replica_sums(config, &w, u, mean_u, n, replicas, stream)?;
    let nf = n as f64;
    let rows: Vec<LdRow> = eps_grid
        .iter()
        .map(|&eps| {
            let count = sums.iter().filter(|&&s| s > nf * eps).count();
            let (rate, censored) = if count == 0 {
                ((replicas as f64).ln() / nf, true)
            } else {
                (-(count as f64 / replicas as f64).ln() / nf, false)
            };
            LdRow {
                eps,
                count,
                rate,
                censored,
                gaussian_rate: eps * eps / (2.0 * sigma2),
            }
        })
        .collect();
    let tol = 2.0 / nf;
    let uncensored: Vec<&LdRow> = rows.iter().filter(|r| !r.censored).collect();
    let monotone = uncensored.windows(2).all(|p| p[1].eps < p[0].eps || p[1].rate >= p[0].rate);
    let convex = uncensored.windows(3).all(|t| {
        let (a, b, c) = (t[0], t[1], t[2]);
        let s1 = (b.rate - a.rate) / (b.eps - a.eps);
        let s2 = (c.rate - b.rate) / (c.eps - b.eps);
        s2 >= s1 - tol / (c.eps - a.eps)
    });
    Ok(LdReport {
        rows,
        sigma2,
        monotone,
        convex,
    })
}

/// `|mean of u(z) - mean of u(x)|` along a trajectory for `u(x) = x`.
pub fn lipschitz_transfer_gap(traj: &Trajectory) -> f64 {
    let n = traj.len() as f64;
    let mx = traj.x.iter().sum::<f64>() / n;
    let mz = traj.z.iter().sum::<f64>() / n;
    (mz - mx).abs()
}
