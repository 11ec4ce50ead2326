//! Ulam discretization of the averaged transfer operator and its perturbed
//! variants, with the spectral routines built on them.
//!
//! Matrices are row-stochastic with row = source cell. A density acts as a row
//! vector of cell masses (`m ↦ m·P`, the transfer operator) and an observable
//! as a column vector of cell values (`g ↦ P·g`, its adjoint).

use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{Container, ContainerKind, Grid, GridDensity};
use crate::model::{validate_config, Interval, ModelConfig};
use crate::quadrature::gauss_legendre_8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelKind {
    Plain,
    /// `L̂`: mass is first thinned by the probability of not observing the ball.
    Hole,
    /// `L̃(λ)`: mass observed in the ball picks up the phase `e^{iλ}`.
    Twisted { lambda: f64 },
}

/// Ball `[center - radius, center + radius]` in observation space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ball {
    pub center: f64,
    pub radius: f64,
}

#[derive(Debug, Clone)]
pub struct KernelMatrix {
    pub grid: Grid,
    pub kind: KernelKind,
    entries: Arc<Vec<f64>>,
    band: Arc<Vec<(usize, usize)>>,
    /// Left multiplier `diag(r)` for perturbed kinds.
    row_factor: Option<Vec<Complex64>>,
    ball: Option<Ball>,
    ball_prob: Option<Vec<f64>>,
}

/// Leading spectral data of a plain matrix.
#[derive(Debug, Clone)]
pub struct SpectralReport {
    pub leading_eigenvalue: Complex64,
    pub second_modulus: f64,
    pub leading_density: GridDensity,
    pub iterations: usize,
    pub residual: f64,
}

pub const STATIONARY_TOL: f64 = 1e-12;
pub const MAX_ITERATIONS: usize = 100_000;

/// Default grid: `I_Γ` padded by `a·σ_max` on each side.
pub fn default_grid(config: &ModelConfig, n_cells: usize) -> Result<Grid> {
    let pad = config.dyn_noise.a * config.dyn_noise.sigma_max;
    let iv = config.geometry.i_gamma.padded(pad);
    let dom = config.geometry.extended_domain;
    Grid::new(Interval::new(iv.lo.max(dom.lo), iv.hi.min(dom.hi)), n_cells)
}

/// Ulam matrix on the default grid. Requires the dynamics checks to pass.
pub fn build_ulam(config: &ModelConfig, n_cells: usize) -> Result<KernelMatrix> {
    if n_cells < 16 {
        return Err(Error::InvalidArgument(format!("n_cells must be at least 16, got {n_cells}")));
    }
    let report = validate_config(config);
    if !report.dynamics_valid() {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
        return Err(Error::InvalidConfig(format!("failed checks: {}", failed.join(", "))));
    }
    build_ulam_on(config, default_grid(config, n_cells)?)
}

/// Ulam matrix on an arbitrary grid, without validating the configuration.
///
/// Entry `(i, j)` is the transition probability from a uniformly distributed
/// point of cell `i` into cell `j`: the source cell is averaged with 8-point
/// Gauss–Legendre and the target mass uses the exact noise distribution
/// function. Mass that would leave the grid is kept in the boundary cells.
pub fn build_ulam_on(config: &ModelConfig, grid: Grid) -> Result<KernelMatrix> {
    let n = grid.n_cells;
    let h = grid.width();
    let dn = &config.dyn_noise;
    let mut entries = vec![0.0; n * n];
    let band: Vec<(usize, usize)> = entries
        .par_chunks_mut(n)
        .enumerate()
        .map(|(i, row)| -> Result<(usize, usize)> {
            let mut jmin = n - 1;
            let mut jmax = 0;
            for (x, w) in gauss_legendre_8(grid.edge(i), grid.edge(i + 1)) {
                let tx = config.t(x)?;
                let sig = config.sigma(x);
                let wt = w / h;
                if sig <= 0.0 || dn.a == 0.0 {
                    let j = grid.clamped_cell(tx);
                    row[j] += wt;
                    jmin = jmin.min(j);
                    jmax = jmax.max(j);
                    continue;
                }
                let spread = dn.a * sig;
                let j0 = grid.clamped_cell(tx - spread);
                let j1 = grid.clamped_cell(tx + spread);
                jmin = jmin.min(j0);
                jmax = jmax.max(j1);
                let mut prev = if j0 == 0 { 0.0 } else { dn.cdf((grid.edge(j0) - tx) / sig) };
                for j in j0..=j1 {
                    let next = if j == n - 1 { 1.0 } else { dn.cdf((grid.edge(j + 1) - tx) / sig) };
                    row[j] += wt * (next - prev);
                    prev = next;
                }
            }
            let sum: f64 = row[jmin..=jmax].iter().sum();
            if !(sum > 0.0) {
                return Err(Error::InvariantViolation(format!("Ulam row {i} has no mass")));
            }
            for v in &mut row[jmin..=jmax] {
                *v /= sum;
            }
            Ok((jmin, jmax))
        })
        .collect::<Result<_>>()?;
    Ok(KernelMatrix {
        grid,
        kind: KernelKind::Plain,
        entries: Arc::new(entries),
        band: Arc::new(band),
        row_factor: None,
        ball: None,
        ball_prob: None,
    })
}

/// `(1/h)∫_{cell i} ψ((B - x)/s(x)) dx` for every cell.
pub fn ball_cell_probabilities(config: &ModelConfig, grid: &Grid, ball: Ball) -> Vec<f64> {
    if ball.radius <= 0.0 {
        return vec![0.0; grid.n_cells];
    }
    (0..grid.n_cells)
        .map(|i| {
            config.obs.interval_prob_average(
                grid.edge(i),
                grid.edge(i + 1),
                ball.center - ball.radius,
                ball.center + ball.radius,
            )
        })
        .collect()
}

fn band_of(entries: &[f64], n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .map(|i| {
            let row = &entries[i * n..(i + 1) * n];
            let lo = row.iter().position(|&v| v != 0.0).unwrap_or(0);
            let hi = row.iter().rposition(|&v| v != 0.0).unwrap_or(0);
            (lo, hi)
        })
        .collect()
}

impl KernelMatrix {
    /// Plain matrix from dense row-major entries; rows must sum to 1.
    pub fn from_dense(grid: Grid, entries: Vec<f64>) -> Result<Self> {
        let n = grid.n_cells;
        if entries.len() != n * n {
            return Err(Error::GridMismatch(format!("{} entries for {n} cells", entries.len())));
        }
        if entries.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidArgument("kernel entries must be nonnegative".into()));
        }
        for i in 0..n {
            let s: f64 = entries[i * n..(i + 1) * n].iter().sum();
            if (s - 1.0).abs() > 1e-8 {
                return Err(Error::InvalidArgument(format!("row {i} sums to {s}")));
            }
        }
        let band = band_of(&entries, n);
        Ok(KernelMatrix {
            grid,
            kind: KernelKind::Plain,
            entries: Arc::new(entries),
            band: Arc::new(band),
            row_factor: None,
            ball: None,
            ball_prob: None,
        })
    }

    pub fn n(&self) -> usize {
        self.grid.n_cells
    }

    /// Entry of the underlying plain matrix.
    pub fn plain_entry(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n() + j]
    }

    pub fn entry(&self, i: usize, j: usize) -> Complex64 {
        let p = Complex64::new(self.plain_entry(i, j), 0.0);
        match &self.row_factor {
            Some(r) => r[i] * p,
            None => p,
        }
    }

    /// Column range holding the nonzero entries of row `i`.
    pub fn row_band(&self, i: usize) -> (usize, usize) {
        self.band[i]
    }

    pub fn row_sum(&self, i: usize) -> Complex64 {
        let (lo, hi) = self.band[i];
        let s: f64 = self.entries[i * self.n() + lo..=i * self.n() + hi].iter().sum();
        match &self.row_factor {
            Some(r) => r[i] * s,
            None => Complex64::new(s, 0.0),
        }
    }

    pub fn ball(&self) -> Option<Ball> {
        self.ball
    }

    /// Per-cell probability of observing the ball, for perturbed kinds.
    pub fn ball_probabilities(&self) -> Option<&[f64]> {
        self.ball_prob.as_deref()
    }

    /// The plain matrix this one was derived from.
    pub fn plain(&self) -> KernelMatrix {
        KernelMatrix {
            grid: self.grid,
            kind: KernelKind::Plain,
            entries: Arc::clone(&self.entries),
            band: Arc::clone(&self.band),
            row_factor: None,
            ball: None,
            ball_prob: None,
        }
    }

    /// `m ↦ m·M` for a real matrix (plain or hole).
    pub fn push_forward(&self, masses: &[f64]) -> Vec<f64> {
        let n = self.n();
        let mut out = vec![0.0; n];
        for i in 0..n {
            let mut mi = masses[i];
            if let Some(r) = &self.row_factor {
                mi *= r[i].re;
            }
            if mi == 0.0 {
                continue;
            }
            let (lo, hi) = self.band[i];
            let row = &self.entries[i * n..i * n + n];
            for j in lo..=hi {
                out[j] += mi * row[j];
            }
        }
        out
    }

    /// `v ↦ v·M` for complex vectors; valid for every kind.
    pub fn push_forward_complex(&self, v: &[Complex64]) -> Vec<Complex64> {
        let n = self.n();
        let mut out = vec![Complex64::new(0.0, 0.0); n];
        for i in 0..n {
            let mut vi = v[i];
            if let Some(r) = &self.row_factor {
                vi *= r[i];
            }
            if vi == Complex64::new(0.0, 0.0) {
                continue;
            }
            let (lo, hi) = self.band[i];
            let row = &self.entries[i * n..i * n + n];
            for j in lo..=hi {
                out[j] += vi * row[j];
            }
        }
        out
    }

    /// `g ↦ M·g`, the adjoint acting on observables (real kinds).
    pub fn pull_back(&self, g: &[f64]) -> Vec<f64> {
        let n = self.n();
        (0..n)
            .map(|i| {
                let (lo, hi) = self.band[i];
                let row = &self.entries[i * n..i * n + n];
                let s: f64 = (lo..=hi).map(|j| row[j] * g[j]).sum();
                match &self.row_factor {
                    Some(r) => r[i].re * s,
                    None => s,
                }
            })
            .collect()
    }

    /// `L̂(B)`: rows scaled by `1 - p_B`.
    pub fn hole(&self, config: &ModelConfig, ball: Ball) -> KernelMatrix {
        let p = ball_cell_probabilities(config, &self.grid, ball);
        let factor = p.iter().map(|&pb| Complex64::new(1.0 - pb, 0.0)).collect();
        KernelMatrix {
            kind: KernelKind::Hole,
            row_factor: Some(factor),
            ball: Some(ball),
            ball_prob: Some(p),
            ..self.plain()
        }
    }

    /// `L̃(λ, B)`: rows scaled by `1 + (e^{iλ} - 1) p_B`.
    pub fn twisted(&self, config: &ModelConfig, ball: Ball, lambda: f64) -> KernelMatrix {
        let p = ball_cell_probabilities(config, &self.grid, ball);
        let lam = lambda.rem_euclid(2.0 * std::f64::consts::PI);
        let phase = if lam == 0.0 {
            Complex64::new(1.0, 0.0)
        } else {
            Complex64::from_polar(1.0, lam)
        };
        let factor = p.iter().map(|&pb| 1.0 + (phase - 1.0) * pb).collect();
        KernelMatrix {
            kind: KernelKind::Twisted { lambda },
            row_factor: Some(factor),
            ball: Some(ball),
            ball_prob: Some(p),
            ..self.plain()
        }
    }

    /// Dense real entries with any row factor applied (not for twisted kinds).
    pub fn to_container(&self) -> Result<Container> {
        let n = self.n();
        let kind = match self.kind {
            KernelKind::Plain => ContainerKind::PlainMatrix,
            KernelKind::Hole => ContainerKind::HoleMatrix,
            KernelKind::Twisted { .. } => {
                return Err(Error::InvalidArgument("twisted matrices are not serialized".into()));
            }
        };
        let mut data = self.entries.as_ref().clone();
        if let Some(r) = &self.row_factor {
            for i in 0..n {
                for v in &mut data[i * n..(i + 1) * n] {
                    *v *= r[i].re;
                }
            }
        }
        Ok(Container {
            kind,
            rows: n,
            cols: n,
            interval: self.grid.interval,
            data,
        })
    }

    /// Plain matrix from a container.
    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != ContainerKind::PlainMatrix || c.rows != c.cols {
            return Err(Error::InvalidArgument("container does not hold a plain matrix".into()));
        }
        KernelMatrix::from_dense(Grid::new(c.interval, c.rows)?, c.data.clone())
    }

    /// Nonzero entries as `i,j,value` CSV.
    pub fn to_csv(&self, header: &str) -> String {
        let mut out = String::new();
        if !header.is_empty() {
            out.push_str(header);
            out.push('\n');
        }
        out.push_str("i,j,value\n");
        for i in 0..self.n() {
            let (lo, hi) = self.band[i];
            for j in lo..=hi {
                let v = self.entry(i, j).re;
                if v != 0.0 {
                    out.push_str(&format!("{i},{j},{v:e}\n"));
                }
            }
        }
        out
    }
}

fn sum(v: &[f64]) -> f64 {
    v.iter().sum()
}

/// Fixed point of a plain matrix by power iteration, plus the modulus of the
/// second eigenvalue.
pub fn stationary_density(l: &KernelMatrix) -> Result<SpectralReport> {
    if l.kind != KernelKind::Plain {
        return Err(Error::InvalidArgument("stationary density needs a plain matrix".into()));
    }
    let n = l.n();
    let mut m = vec![1.0 / n as f64; n];
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        let mut next = l.push_forward(&m);
        let s = sum(&next);
        for v in &mut next {
            *v /= s;
        }
        residual = next.iter().zip(&m).map(|(a, b)| (a - b).abs()).sum();
        m = next;
        iterations += 1;
        if residual <= STATIONARY_TOL {
            break;
        }
    }
    if residual > STATIONARY_TOL {
        return Err(Error::NonConvergence { iterations, residual });
    }
    let leading = sum(&l.push_forward(&m)) / sum(&m);
    let second = second_modulus(l, &m);
    Ok(SpectralReport {
        leading_eigenvalue: Complex64::new(leading, 0.0),
        second_modulus: second,
        leading_density: GridDensity::from_masses(l.grid, m)?,
        iterations,
        residual,
    })
}

const DEFLATION_BURN: usize = 200;
const DEFLATION_WINDOW: usize = 800;

/// Modulus of the second eigenvalue by power iteration on `P - 1⊗m`, averaging
/// the per-step log growth over a long window so that complex pairs are handled.
pub fn second_modulus(l: &KernelMatrix, stationary_masses: &[f64]) -> f64 {
    let n = l.n();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
    let deflate = |v: &mut Vec<f64>| {
        let s = sum(v);
        for (x, m) in v.iter_mut().zip(stationary_masses) {
            *x -= s * m;
        }
    };
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    deflate(&mut v);
    let mut log_growth = 0.0;
    for k in 0..DEFLATION_BURN + DEFLATION_WINDOW {
        let before = norm(&v);
        if before == 0.0 {
            return 0.0;
        }
        for x in &mut v {
            *x /= before;
        }
        let mut next = l.push_forward(&v);
        deflate(&mut next);
        let after = norm(&next);
        if after == 0.0 {
            return 0.0;
        }
        if k >= DEFLATION_BURN {
            log_growth += after.ln();
        }
        v = next;
    }
    (log_growth / DEFLATION_WINDOW as f64).exp().min(1.0)
}

/// `C(t) = ∫(L^t(f·w))·g − ∫f w·∫g w` for `t = 0..=t_max`, with `f`, `g` given
/// by their values on the cells.
pub fn correlation(f: &[f64], g: &[f64], l: &KernelMatrix, stationary: &GridDensity, t_max: usize) -> Result<Vec<f64>> {
    l.grid.ensure_same(&stationary.grid)?;
    let n = l.n();
    if f.len() != n || g.len() != n {
        return Err(Error::GridMismatch("observable length differs from the grid".into()));
    }
    let m = stationary.masses();
    let ef: f64 = f.iter().zip(&m).map(|(a, b)| a * b).sum();
    let eg: f64 = g.iter().zip(&m).map(|(a, b)| a * b).sum();
    let mut v: Vec<f64> = f.iter().zip(&m).map(|(a, b)| a * b).collect();
    let mut out = Vec::with_capacity(t_max + 1);
    for t in 0..=t_max {
        if t > 0 {
            v = l.push_forward(&v);
        }
        let e: f64 = v.iter().zip(g).map(|(a, b)| a * b).sum();
        out.push(e - ef * eg);
    }
    Ok(out)
}

/// Exponential decay rate of `|C(t)|` for `t_min ≤ t ≤ t_max`: slope of a
/// least-squares line through `log|C|` at the local maxima of `|C|`, so that
/// oscillating correlations from a complex second eigenvalue fit cleanly.
/// Falls back to all points when `|C|` has no interior maxima.
pub fn decay_rate(c: &[f64], t_min: usize, t_max: usize) -> Result<f64> {
    let t_max = t_max.min(c.len().saturating_sub(2));
    let mut pts = Vec::new();
    for t in t_min.max(1)..=t_max {
        let (a, b, d) = (c[t - 1].abs(), c[t].abs(), c[t + 1].abs());
        if b >= a && b >= d && b > 0.0 {
            pts.push((t as f64, b.ln()));
        }
    }
    if pts.len() < 2 {
        // Monotone decay: every point carries the rate.
        pts = (t_min.max(1)..=t_max)
            .filter(|&t| c[t] != 0.0)
            .map(|t| (t as f64, c[t].abs().ln()))
            .collect();
    }
    if pts.len() < 2 {
        return Err(Error::DegenerateData("fewer than two nonzero values of C(t)".into()));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Ok(sxy / sxx)
}

fn check_perturbed(l: &KernelMatrix, w: &GridDensity) -> Result<Vec<f64>> {
    l.grid.ensure_same(&w.grid)?;
    l.ball_prob
        .clone()
        .ok_or_else(|| Error::InvalidArgument("matrix carries no ball".into()))
}

/// `Δ_t = ∫ψ((B − x)/s(x)) dμ(x)` on the grid.
pub fn smeared_ball_measure(ball_prob: &[f64], w: &GridDensity) -> f64 {
    w.masses().iter().zip(ball_prob).map(|(m, p)| m * p).sum()
}

const SHIFT_WARMUP: usize = 64;

/// Top eigenvalue `ι` of a hole matrix and `Δ_t`.
///
/// A hole can leave a cyclic remainder whose peripheral eigenvalues share the
/// Perron modulus, so the iteration runs on `L̂ + αI` with `α` a rough
/// estimate of `ι`: the Perron root becomes strictly dominant and its
/// eigenvector is unchanged.
pub fn perturbed_top_eigenvalue(l_hat: &KernelMatrix, w: &GridDensity) -> Result<(f64, f64)> {
    if l_hat.kind != KernelKind::Hole {
        return Err(Error::InvalidArgument("expected a hole matrix".into()));
    }
    let p = check_perturbed(l_hat, w)?;
    let delta_t = smeared_ball_measure(&p, w);
    let mut v = w.masses();
    let total = sum(&v);
    v.iter_mut().for_each(|x| *x /= total);

    let mut log_growth = 0.0;
    for k in 0..SHIFT_WARMUP {
        let image = l_hat.push_forward(&v);
        let s_image = sum(&image);
        if !(s_image > 0.0) {
            return Ok((0.0, delta_t));
        }
        if k >= SHIFT_WARMUP / 2 {
            log_growth += s_image.ln();
        }
        v = image.into_iter().map(|x| x / s_image).collect();
    }
    let alpha = (log_growth / (SHIFT_WARMUP / 2) as f64).exp();

    let mut iota = alpha;
    let mut residual = f64::INFINITY;
    for it in 0..MAX_ITERATIONS {
        let image = l_hat.push_forward(&v);
        // `v` sums to one, so `ι` is estimated by the mass of its image.
        let s_image = sum(&image);
        if !(s_image > 0.0) {
            return Ok((0.0, delta_t));
        }
        let s_new = s_image + alpha;
        let normalized: Vec<f64> = image.iter().zip(&v).map(|(a, b)| (a + alpha * b) / s_new).collect();
        residual = normalized.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
        v = normalized;
        let change = (s_image - iota).abs();
        iota = s_image;
        if it > 0 && residual <= STATIONARY_TOL && change <= 1e-15 {
            return Ok((iota, delta_t));
        }
    }
    if residual <= 1e-9 {
        Ok((iota, delta_t))
    } else {
        Err(Error::NonConvergence {
            iterations: MAX_ITERATIONS,
            residual,
        })
    }
}

/// `q_k = ∫(L − L̂)L̂^k(L − L̂)(w)/Δ_t` for `k = 0..=k_max` and `β = 1 − Σ q_k`.
pub fn extremal_index(l: &KernelMatrix, l_hat: &KernelMatrix, w: &GridDensity, k_max: usize) -> Result<(f64, Vec<f64>)> {
    l.grid.ensure_same(&l_hat.grid)?;
    let p = check_perturbed(l_hat, w)?;
    let delta_t = smeared_ball_measure(&p, w);
    if !(delta_t > 0.0) {
        return Err(Error::UndefinedIndex);
    }
    let plain = l.plain();
    let thinned: Vec<f64> = w.masses().iter().zip(&p).map(|(m, pb)| m * pb).collect();
    let mut v = plain.push_forward(&thinned);
    let mut q = Vec::with_capacity(k_max + 1);
    for k in 0..=k_max {
        if k > 0 {
            v = l_hat.push_forward(&v);
        }
        let hit: f64 = v.iter().zip(&p).map(|(a, b)| a * b).sum();
        q.push(hit / delta_t);
    }
    let beta = 1.0 - q.iter().sum::<f64>();
    Ok((beta, q))
}

/// Leading eigenvalue `υ(λ)` of a twisted matrix.
pub fn twisted_top_eigenvalue(l_tilde: &KernelMatrix, w: &GridDensity) -> Result<Complex64> {
    if !matches!(l_tilde.kind, KernelKind::Twisted { .. }) {
        return Err(Error::InvalidArgument("expected a twisted matrix".into()));
    }
    check_perturbed(l_tilde, w)?;
    let one = Complex64::new(1.0, 0.0);
    if l_tilde.row_factor.as_ref().is_some_and(|r| r.iter().all(|&f| f == one)) {
        // No effective twist: a stochastic matrix, whose top eigenvalue is 1.
        return Ok(one);
    }
    let mut v: Vec<Complex64> = w.masses().into_iter().map(|m| Complex64::new(m, 0.0)).collect();
    let dot = |a: &[Complex64], b: &[Complex64]| -> Complex64 { a.iter().zip(b).map(|(x, y)| x * y.conj()).sum() };
    let mut upsilon = Complex64::new(1.0, 0.0);
    let mut residual = f64::INFINITY;
    for it in 0..MAX_ITERATIONS {
        let next = l_tilde.push_forward_complex(&v);
        let new_upsilon = dot(&next, &v) / dot(&v, &v);
        let nrm = dot(&next, &next).re.sqrt();
        if nrm == 0.0 {
            return Ok(Complex64::new(0.0, 0.0));
        }
        residual = next
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - new_upsilon * b).norm())
            .sum::<f64>()
            / nrm;
        let change = (new_upsilon - upsilon).norm();
        upsilon = new_upsilon;
        v = next.into_iter().map(|x| x / nrm).collect();
        if it > 0 && residual <= STATIONARY_TOL && change <= 1e-15 {
            return Ok(upsilon);
        }
    }
    if residual <= 1e-9 {
        Ok(upsilon)
    } else {
        Err(Error::NonConvergence {
            iterations: MAX_ITERATIONS,
            residual,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_grid(n: usize) -> Grid {
        Grid::new(Interval::new(0.0, 1.0), n).unwrap()
    }

    #[test]
    fn two_state_balance() {
        let l = KernelMatrix::from_dense(small_grid(2), vec![0.9, 0.1, 0.2, 0.8]).unwrap();
        let rep = stationary_density(&l).unwrap();
        let m = rep.leading_density.masses();
        assert!((m[0] - 2.0 / 3.0).abs() < 1e-10);
        assert!((m[1] - 1.0 / 3.0).abs() < 1e-10);
        assert!((rep.second_modulus - 0.7).abs() < 1e-6);
    }

    #[test]
    fn symmetric_doubly_stochastic_gives_uniform() {
        let l = KernelMatrix::from_dense(
            small_grid(3),
            vec![0.5, 0.25, 0.25, 0.25, 0.5, 0.25, 0.25, 0.25, 0.5],
        )
        .unwrap();
        let rep = stationary_density(&l).unwrap();
        for w in rep.leading_density.weights {
            assert!((w - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn reference_rows_are_stochastic() {
        let cfg = ModelConfig::reference();
        let l = build_ulam(&cfg, 128).unwrap();
        for i in 0..l.n() {
            assert!((l.row_sum(i).re - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_ball_reduces_to_plain() {
        let cfg = ModelConfig::reference();
        let l = build_ulam(&cfg, 64).unwrap();
        let ball = Ball { center: 0.5, radius: 0.0 };
        let hole = l.hole(&cfg, ball);
        let tw = l.twisted(&cfg, ball, 1.0);
        for i in 0..64 {
            for j in 0..64 {
                assert!((hole.entry(i, j) - l.entry(i, j)).norm() <= 1e-12);
                assert!((tw.entry(i, j) - l.entry(i, j)).norm() <= 1e-12);
            }
        }
    }

    #[test]
    fn too_few_cells_rejected() {
        assert!(build_ulam(&ModelConfig::reference(), 8).is_err());
    }

    #[test]
    fn decay_rate_of_damped_oscillation() {
        let c: Vec<f64> = (0..=60).map(|t| 0.7f64.powi(t) * (1.1 * t as f64).cos()).collect();
        let r = decay_rate(&c, 5, 50).unwrap();
        assert!((r - 0.7f64.ln()).abs() < 0.02, "{r}");
        let mono: Vec<f64> = (0..=60).map(|t| 0.5f64.powi(t)).collect();
        assert!((decay_rate(&mono, 5, 50).unwrap() - 0.5f64.ln()).abs() < 1e-9);
        assert!(decay_rate(&[0.0; 60], 5, 50).is_err());
    }
}
