//! Recursive nonlinear filter on the Ulam grid, Hilbert projective metric,
//! cone membership, the main-assumption checker and the prior-forgetting
//! experiment.

use crate::error::{Error, Result};
use crate::grid::{Grid, GridDensity};
use crate::model::{Interval, ModelConfig, PsiKind, StateFn};
use crate::operator::KernelMatrix;
use crate::quadrature::gauss_legendre_8;
use crate::simulate::{simulate, InitialState, SeededStream};

/// Cells with less mass than this count as outside the support.
pub const SUPPORT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub density: GridDensity,
    pub step: usize,
    pub last_observation: Option<f64>,
    pub log_normalizer_sum: f64,
}

impl FilterState {
    pub fn new(prior: GridDensity) -> Self {
        FilterState {
            density: prior,
            step: 0,
            last_observation: None,
            log_normalizer_sum: 0.0,
        }
    }
}

/// Push the filter density through the kernel.
pub fn predict(state: &FilterState, l: &KernelMatrix) -> Result<GridDensity> {
    state.density.grid.ensure_same(&l.grid)?;
    GridDensity::from_masses(l.grid, l.push_forward(&state.density.masses()))
}

/// Solve `|z - x| ≤ s(x)·hw` for `x`; `None` when no state can produce `z`.
fn band_preimage(s: StateFn, hw: f64, z: f64) -> Option<(f64, f64)> {
    match s {
        StateFn::Const(v) => Some((z - v * hw, z + v * hw)),
        StateFn::Affine { intercept, slope } => {
            let lo_den = 1.0 + slope * hw;
            let hi_den = 1.0 - slope * hw;
            if lo_den <= 0.0 || hi_den <= 0.0 {
                return None;
            }
            let lo = (z - intercept * hw) / lo_den;
            let hi = (z + intercept * hw) / hi_den;
            (lo <= hi).then_some((lo, hi))
        }
    }
}

/// `J_z`: states from which `z` can be observed, intersected with `within`.
pub fn observation_preimage(config: &ModelConfig, z: f64, within: Interval) -> Option<Interval> {
    let (lo, hi) = band_preimage(config.obs.s, config.obs.half_width(), z)?;
    let lo = lo.max(within.lo);
    let hi = hi.min(within.hi);
    (lo <= hi).then(|| Interval::new(lo, hi))
}

/// Cell averages of the likelihood `x ↦ g(z, x)`.
pub fn likelihood_cell_averages(config: &ModelConfig, grid: &Grid, z: f64) -> Result<Vec<f64>> {
    let obs = &config.obs;
    let n = grid.n_cells;
    let h = grid.width();
    match obs.s {
        StateFn::Const(s) => {
            if !(s > 0.0) {
                return Err(Error::Domain { what: "s(x)", value: s });
            }
            Ok((0..n)
                .map(|i| {
                    let lo = grid.edge(i);
                    let hi = grid.edge(i + 1);
                    (obs.psi_cdf((z - lo) / s) - obs.psi_cdf((z - hi) / s)).max(0.0) / h
                })
                .collect())
        }
        StateFn::Affine { .. } => {
            let smin = obs.s.min_on(grid.interval);
            if !(smin > 0.0) {
                return Err(Error::Domain { what: "s(x)", value: smin });
            }
            let Some((blo, bhi)) = band_preimage(obs.s, obs.half_width(), z) else {
                return Ok(vec![0.0; n]);
            };
            Ok((0..n)
                .map(|i| {
                    let lo = grid.edge(i).max(blo);
                    let hi = grid.edge(i + 1).min(bhi);
                    if hi <= lo {
                        return 0.0;
                    }
                    gauss_legendre_8(lo, hi)
                        .iter()
                        .map(|&(x, w)| {
                            let s = obs.s.eval(x);
                            w * obs.psi_density((z - x) / s) / s
                        })
                        .sum::<f64>()
                        / h
                })
                .collect())
        }
    }
}

fn correct_inner(pi_plus: &GridDensity, z: f64, config: &ModelConfig) -> Result<(GridDensity, f64)> {
    let like = likelihood_cell_averages(config, &pi_plus.grid, z)?;
    let h = pi_plus.grid.width();
    let weights: Vec<f64> = pi_plus.weights.iter().zip(&like).map(|(w, l)| w * l).collect();
    let normalizer: f64 = weights.iter().sum::<f64>() * h;
    if !(normalizer > 0.0) {
        return Err(Error::ZeroNormalizer { z });
    }
    let weights = weights.into_iter().map(|w| w / normalizer).collect();
    Ok((GridDensity { grid: pi_plus.grid, weights }, normalizer))
}

/// Bayes correction by the likelihood of `z`.
pub fn correct(pi_plus: &GridDensity, z: f64, config: &ModelConfig) -> Result<GridDensity> {
    Ok(correct_inner(pi_plus, z, config)?.0)
}

/// One predict-correct cycle.
pub fn update(state: &FilterState, z: f64, l: &KernelMatrix, config: &ModelConfig) -> Result<FilterState> {
    let pi_plus = predict(state, l)?;
    let (density, normalizer) = correct_inner(&pi_plus, z, config)?;
    Ok(FilterState {
        density,
        step: state.step + 1,
        last_observation: Some(z),
        log_normalizer_sum: state.log_normalizer_sum + normalizer.ln(),
    })
}

/// Correction of the prior by the first observation, without a prediction.
pub fn initialize(prior: &GridDensity, z0: f64, config: &ModelConfig) -> Result<FilterState> {
    let (density, normalizer) = correct_inner(prior, z0, config)?;
    Ok(FilterState {
        density,
        step: 1,
        last_observation: Some(z0),
        log_normalizer_sum: normalizer.ln(),
    })
}

fn support_mask(d: &GridDensity) -> Vec<bool> {
    let h = d.grid.width();
    d.weights.iter().map(|w| w * h > SUPPORT_TOL).collect()
}

/// Hilbert projective distance `log[sup(g/f)·sup(f/g)]`; infinite when the
/// supports differ.
pub fn hilbert_distance(f: &GridDensity, g: &GridDensity) -> Result<f64> {
    f.grid.ensure_same(&g.grid)?;
    let mf = support_mask(f);
    let mg = support_mask(g);
    if mf != mg {
        return Ok(f64::INFINITY);
    }
    let mut up = f64::NEG_INFINITY;
    let mut down = f64::NEG_INFINITY;
    let mut any = false;
    for i in 0..mf.len() {
        if mf[i] {
            any = true;
            let r = (g.weights[i] / f.weights[i]).ln();
            up = up.max(r);
            down = down.max(-r);
        }
    }
    if !any {
        return Ok(0.0);
    }
    Ok((up + down).max(0.0))
}

/// Smallest ratio `f(x)/f(y)` over the hull of the support.
pub fn cone_parameter(f: &GridDensity) -> f64 {
    let mask = support_mask(f);
    let (Some(lo), Some(hi)) = (mask.iter().position(|&b| b), mask.iter().rposition(|&b| b)) else {
        return 0.0;
    };
    let slice = &f.weights[lo..=hi];
    let min = slice.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = slice.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        min / max
    } else {
        0.0
    }
}

/// Whether `c < f(x)/f(y)` for all `x, y` in the hull of the support.
pub fn cone_membership(f: &GridDensity, c: f64) -> bool {
    cone_parameter(f) > c
}

/// Sufficient global condition `ε·max s ≤ min{|I|/10, min σ·δ/10}`; returns
/// whether it holds and the largest admissible `ε`.
pub fn global_noise_condition(epsilon: f64, s_max: f64, interval_len: f64, sigma_min: f64, delta: f64) -> (bool, f64) {
    let rhs = (interval_len / 10.0).min(sigma_min * delta / 10.0);
    let eps_max = if s_max > 0.0 { rhs / s_max } else { f64::INFINITY };
    (epsilon * s_max <= rhs, eps_max)
}

#[derive(Debug, Clone)]
pub struct AssumptionReport {
    pub z0: f64,
    pub j_z0: Option<Interval>,
    pub t_of_j: Option<Interval>,
    /// `|T(J)| < σ(x)·δ/2` for every `x ∈ J`, with `δ = 2a`.
    pub condition_a: bool,
    /// Observations whose preimage lies inside the open hull of `T(J)`.
    pub f_prime: Option<Interval>,
    pub condition_b: bool,
    pub global_condition: bool,
    pub global_epsilon_max: f64,
    pub kernel_min: f64,
    pub kernel_max: f64,
    pub likelihood_min: f64,
    pub likelihood_max: f64,
    /// Contraction constant; zero when a condition fails.
    pub c: f64,
    pub lambda: f64,
}

impl AssumptionReport {
    pub fn pass(&self) -> bool {
        self.condition_a && self.condition_b && self.c > 0.0
    }
}

fn image_hull(config: &ModelConfig, j: Interval) -> Result<Interval> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let k = 256;
    let mut visit = |x: f64| -> Result<()> {
        let y = config.t(x)?;
        lo = lo.min(y);
        hi = hi.max(y);
        Ok(())
    };
    for i in 0..=k {
        visit(j.lo + j.len() * i as f64 / k as f64)?;
    }
    if j.contains(config.geometry.critical_point) {
        visit(config.geometry.critical_point)?;
    }
    Ok(Interval::new(lo, hi))
}

/// Smallest and largest value of `ψ'` on its support.
fn psi_density_range(config: &ModelConfig) -> (f64, f64) {
    let obs = &config.obs;
    match obs.psi {
        PsiKind::Uniform => {
            let v = obs.psi_density(0.0);
            (v, v)
        }
        PsiKind::TruncNormal => (obs.psi_density(obs.half_width()), obs.psi_density(0.0)),
    }
}

/// Check the sufficient conditions A and B at `z0` and derive the contraction
/// constant `c` with `λ = 1 - c⁸`.
pub fn check_main_assumption(config: &ModelConfig, z0: f64) -> Result<AssumptionReport> {
    let geo = &config.geometry;
    let dn = &config.dyn_noise;
    let obs = &config.obs;
    let i = geo.i_gamma;
    let delta = 2.0 * dn.a;
    let sigma_min = dn.sigma_min_on_support;
    let (global_condition, global_epsilon_max) =
        global_noise_condition(obs.epsilon, obs.s_max, i.len(), sigma_min, delta);
    let mut report = AssumptionReport {
        z0,
        j_z0: None,
        t_of_j: None,
        condition_a: false,
        f_prime: None,
        condition_b: false,
        global_condition,
        global_epsilon_max,
        kernel_min: 0.0,
        kernel_max: dn.c_a / sigma_min,
        likelihood_min: 0.0,
        likelihood_max: f64::INFINITY,
        c: 0.0,
        lambda: 1.0,
    };
    let Some(j) = observation_preimage(config, z0, i) else {
        return Ok(report);
    };
    report.j_z0 = Some(j);
    let tj = image_hull(config, j)?;
    report.t_of_j = Some(tj);
    let sigma_j = dn.sigma.min_on(j);
    report.condition_a = tj.len() < sigma_j * delta / 2.0;

    // J_{z'} moves monotonically with z', so F' is an interval.
    let hw = obs.half_width();
    let f_prime = match obs.s {
        StateFn::Const(s) => Interval::new(tj.lo + s * hw, tj.hi - s * hw),
        StateFn::Affine { intercept, slope } => Interval::new(
            tj.lo * (1.0 + slope * hw) + intercept * hw,
            tj.hi * (1.0 - slope * hw) - intercept * hw,
        ),
    };
    let t_z0 = config.t(z0).ok();
    if f_prime.lo < f_prime.hi {
        report.f_prime = Some(f_prime);
        report.condition_b = t_z0.is_some_and(|t| t > f_prime.lo && t < f_prime.hi);
    }

    // Kernel bounds over J × T(J): g decreases in |η|, so the minimum over y
    // sits at an end of T(J).
    let mut kmin = f64::INFINITY;
    let k = 256;
    for s in 0..=k {
        let x = j.lo + j.len() * s as f64 / k as f64;
        let tx = config.t(x)?;
        let sig = config.sigma(x);
        for y in [tj.lo, tj.hi] {
            kmin = kmin.min(dn.eval_g((y - tx) / sig) / sig);
        }
    }
    report.kernel_min = kmin;

    let s_lo = obs.s.min_on(i);
    let s_hi = obs.s_max.max(obs.s.max_on(i));
    let (pmin, pmax) = psi_density_range(config);
    if s_lo > 0.0 {
        report.likelihood_min = pmin / s_hi;
        report.likelihood_max = pmax / s_lo;
    }
    if report.condition_a && report.condition_b && s_lo > 0.0 {
        let c = kmin
            .min(report.likelihood_min)
            .min(1.0 / report.kernel_max)
            .min(1.0 / report.likelihood_max)
            .min(1.0);
        report.c = c.max(0.0);
        report.lambda = 1.0 - report.c.powi(8);
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConeCertificate {
    pub c: f64,
    /// `-8·log c`, the diameter bound of the image cone.
    pub diam_bound: f64,
    pub lambda: f64,
    pub event_count: usize,
}

impl ConeCertificate {
    pub fn new(c: f64, event_count: usize) -> Self {
        ConeCertificate {
            c,
            diam_bound: -8.0 * c.ln(),
            lambda: 1.0 - c.powi(8),
            event_count,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StabilityRow {
    pub step: usize,
    pub theta0: f64,
    pub tv: f64,
    pub event: bool,
    /// Local contraction constant at this step (zero if no event).
    pub c_local: f64,
    /// Smallest cone parameter of the two realized densities.
    pub empirical_c: f64,
    pub bound: f64,
}

#[derive(Debug, Clone)]
pub struct StabilityReport {
    pub rows: Vec<StabilityRow>,
    pub certificate: ConeCertificate,
    /// Every event step satisfied `Θ₀(n) ≤ (1 - c_n⁸)·Θ₀(n-1)` within float slack.
    pub event_ratios_ok: bool,
    pub observations: Vec<f64>,
    pub latent: Vec<f64>,
}

impl StabilityReport {
    pub fn initial_tv(&self) -> f64 {
        self.rows.first().map_or(0.0, |r| r.tv)
    }

    pub fn final_tv(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.tv)
    }

    pub fn to_csv(&self, header: &str) -> String {
        let mut out = String::new();
        if !header.is_empty() {
            out.push_str(header);
            out.push('\n');
        }
        out.push_str("step,theta0,tv,event,bound\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:e},{:e},{},{:e}\n",
                r.step, r.theta0, r.tv, r.event as u8, r.bound
            ));
        }
        out
    }
}

/// Relative slack on per-event ratio checks: `1 - c⁸` is 1 to double precision
/// for realistic `c`, so only rounding separates the two sides.
pub const RATIO_SLACK: f64 = 1e-9;

/// Run two filters from different priors on one simulated observation
/// sequence of length `n` and measure how fast they merge.
pub fn stability_experiment(
    config: &ModelConfig,
    l: &KernelMatrix,
    priors: (&GridDensity, &GridDensity),
    n: usize,
    stream: SeededStream,
) -> Result<StabilityReport> {
    let traj = simulate(config, n, &InitialState::BurnIn, stream)?;
    let (p1, p2) = priors;
    p1.grid.ensure_same(&l.grid)?;
    p2.grid.ensure_same(&l.grid)?;

    let mut rows = Vec::with_capacity(n + 1);
    let theta_init = hilbert_distance(p1, p2)?;
    rows.push(StabilityRow {
        step: 0,
        theta0: theta_init,
        tv: p1.tv_distance(p2)?,
        event: false,
        c_local: 0.0,
        empirical_c: cone_parameter(p1).min(cone_parameter(p2)),
        bound: theta_init,
    });

    let mut s1 = initialize(p1, traj.z[0], config)?;
    let mut s2 = initialize(p2, traj.z[0], config)?;
    let mut prev_theta = hilbert_distance(&s1.density, &s2.density)?;
    let mut bound = prev_theta;
    rows.push(StabilityRow {
        step: 1,
        theta0: prev_theta,
        tv: s1.density.tv_distance(&s2.density)?,
        event: false,
        c_local: 0.0,
        empirical_c: cone_parameter(&s1.density).min(cone_parameter(&s2.density)),
        bound,
    });

    let mut events = 0;
    let mut c_cert = f64::INFINITY;
    let mut ratios_ok = true;
    for k in 1..n {
        let z_prev = traj.z[k - 1];
        let z = traj.z[k];
        s1 = update(&s1, z, l, config)?;
        s2 = update(&s2, z, l, config)?;
        let theta = hilbert_distance(&s1.density, &s2.density)?;
        let report = check_main_assumption(config, z_prev)?;
        let in_f_prime = report.f_prime.is_some_and(|f| z > f.lo && z < f.hi);
        let c_local = report.c;
        let event = report.condition_a
            && in_f_prime
            && c_local > 0.0
            && cone_membership(&s1.density, c_local.powi(4))
            && cone_membership(&s2.density, c_local.powi(4));
        let factor = 1.0 - c_local.powi(8);
        if event {
            events += 1;
            c_cert = c_cert.min(c_local);
            if prev_theta.is_finite() && theta > factor * prev_theta * (1.0 + RATIO_SLACK) + 1e-300 {
                ratios_ok = false;
            }
        }
        if bound.is_finite() {
            if event {
                bound *= factor;
            }
        } else {
            bound = theta;
        }
        rows.push(StabilityRow {
            step: k + 1,
            theta0: theta,
            tv: s1.density.tv_distance(&s2.density)?,
            event,
            c_local: if event { c_local } else { 0.0 },
            empirical_c: cone_parameter(&s1.density).min(cone_parameter(&s2.density)),
            bound,
        });
        prev_theta = theta;
    }
    let c = if events > 0 {
        c_cert
    } else {
        check_main_assumption(config, traj.z[0])?.c
    };
    Ok(StabilityReport {
        rows,
        certificate: ConeCertificate::new(c, events),
        event_ratios_ok: ratios_ok,
        observations: traj.z,
        latent: traj.x,
    })
}
