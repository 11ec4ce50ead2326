//! The deterministic unimodal map, the two heteroscedastic noise laws, and the
//! geometric constants that make the noisy system well defined.
//!
//! The state space is the extended interval `[-Γ, 1]`, where `Γ = 1 - Δ` is the
//! gap between the map's maximum `Δ = T(c)` and 1. Dynamic noise moves a point
//! by `σ(x)·η` with `η` drawn from a smooth bump-weighted Gaussian supported on
//! `[-a, a]`; observations add `s(x)·ε` with `ε` drawn from `ψ` on `[-ε/2, ε/2]`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use sha2::{Digest, Sha256};
use statrs::function::erf::erf;

use crate::error::{Error, Result};
use crate::quadrature::{golden_max, integrate_adaptive, integrate_gl8};

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Interval { lo, hi }
    }

    pub fn len(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }

    pub fn contains_interval(&self, other: &Interval) -> bool {
        other.lo >= self.lo && other.hi <= self.hi
    }

    pub fn padded(&self, pad: f64) -> Interval {
        Interval::new(self.lo - pad, self.hi + pad)
    }
}

/// Parameters of the leverage map family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapParams {
    /// Leverage elasticity.
    pub gamma0: f64,
    pub omega: f64,
    pub c: f64,
    /// Exogenous idiosyncratic volatility.
    pub sigma_eps_bar: f64,
}

impl MapParams {
    /// The published parameter set with `ω, c` fixed to values that give a
    /// chaotic unimodal map satisfying all the noise bounds.
    pub fn reference() -> Self {
        MapParams {
            gamma0: 15.969,
            omega: 0.51,
            c: 0.1,
            sigma_eps_bar: 2.7e-5,
        }
    }
}

/// `A(u) = (1 + γ₀u) / [ω(1 - cu)² + Σ̄(1 - u)⁻²(1 + γ₀u)²]^{1/2}` on `[0, 1)`.
pub fn eval_a(u: f64, params: &MapParams) -> Result<f64> {
    if !(0.0..1.0).contains(&u) {
        return Err(Error::Domain { what: "A(u) argument", value: u });
    }
    let lev = 1.0 + params.gamma0 * u;
    let one_m = 1.0 - u;
    let bracket = params.omega * (1.0 - params.c * u).powi(2)
        + params.sigma_eps_bar * lev * lev / (one_m * one_m);
    if !(bracket > 0.0) {
        return Err(Error::Domain { what: "A(u) bracket", value: bracket });
    }
    Ok(lev / bracket.sqrt())
}

/// Which deterministic map drives the chain. The tent and logistic maps exist
/// for tests and stress experiments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MapKind {
    Finance(MapParams),
    Tent { height: f64 },
    Logistic { r: f64 },
}

impl MapKind {
    /// The map on `[0, 1)`, before the left extension.
    pub fn eval_base(&self, x: f64) -> Result<f64> {
        if !(0.0..1.0).contains(&x) {
            return Err(Error::Domain { what: "map argument", value: x });
        }
        Ok(match self {
            MapKind::Finance(p) => {
                let a = eval_a(x, p)?;
                (a - 1.0) / (p.gamma0 + p.c * a)
            }
            MapKind::Tent { height } => height * (1.0 - (2.0 * x - 1.0).abs()),
            MapKind::Logistic { r } => r * x * (1.0 - x),
        })
    }
}

/// Geometric constants derived from the map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    pub critical_point: f64,
    /// `Δ = T(c)`.
    pub delta: f64,
    /// `Γ = 1 - Δ`.
    pub gamma: f64,
    /// `q = T(0)`.
    pub q: f64,
    /// Slope of the affine extension on `[-Γ, 0)`; never positive.
    pub left_slope: f64,
    /// `[T(1 - Γ/2)/2, 1 - Γ/2]`, which contains the stationary support.
    pub i_gamma: Interval,
    /// `[-Γ/2, 1 - Γ/2]`.
    pub confinement: Interval,
    /// `[-Γ, 1]`.
    pub extended_domain: Interval,
}

pub(crate) const SEARCH_RIGHT: f64 = 1.0 - 1e-6;

impl Geometry {
    pub fn compute(map: &MapKind) -> Result<Geometry> {
        let t = |x: f64| map.eval_base(x).unwrap_or(f64::NEG_INFINITY);
        // Bracket the maximum on a coarse grid, then refine.
        let n = 4096;
        let mut best: usize = 0;
        let mut best_val = f64::NEG_INFINITY;
        for k in 0..=n {
            let x = SEARCH_RIGHT * k as f64 / n as f64;
            let v = t(x);
            if v > best_val {
                best_val = v;
                best = k;
            }
        }
        let lo = SEARCH_RIGHT * best.saturating_sub(1) as f64 / n as f64;
        let hi = (SEARCH_RIGHT * (best + 1) as f64 / n as f64).min(SEARCH_RIGHT);
        let critical_point = golden_max(t, lo, hi, 1e-12);
        let delta = t(critical_point);
        let gamma = 1.0 - delta;
        let q = t(0.0);

        let h = 1e-6;
        let slope0 = (-3.0 * t(0.0) + 4.0 * t(h) - t(2.0 * h)) / (2.0 * h);
        let mut left_slope = -slope0.abs();
        if gamma > 0.0 && q - left_slope * gamma >= delta {
            left_slope = -0.5 * ((delta - q) / gamma).max(0.0);
        }

        let right = 1.0 - gamma / 2.0;
        let t_right = if (0.0..1.0).contains(&right) { t(right) } else { f64::NAN };
        Ok(Geometry {
            critical_point,
            delta,
            gamma,
            q,
            left_slope,
            i_gamma: Interval::new(0.5 * t_right, right),
            confinement: Interval::new(-gamma / 2.0, right),
            extended_domain: Interval::new(-gamma, 1.0),
        })
    }
}

/// `T` on the extended domain `[-Γ, 1)`: the base map on `[0, 1)` and the
/// decreasing affine extension `T(x) = q + m·x` on `[-Γ, 0)`.
pub fn eval_t(phi: f64, map: &MapKind, geometry: &Geometry) -> Result<f64> {
    if phi >= 0.0 {
        map.eval_base(phi)
    } else if phi >= -geometry.gamma.max(0.0) {
        Ok(geometry.q + geometry.left_slope * phi)
    } else {
        Err(Error::Domain { what: "T argument", value: phi })
    }
}

/// A state-dependent amplitude: `σ(x)` or `s(x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StateFn {
    Const(f64),
    Affine { intercept: f64, slope: f64 },
}

impl StateFn {
    pub fn eval(&self, x: f64) -> f64 {
        match *self {
            StateFn::Const(v) => v,
            StateFn::Affine { intercept, slope } => intercept + slope * x,
        }
    }

    pub fn max_on(&self, iv: Interval) -> f64 {
        self.eval(iv.lo).max(self.eval(iv.hi))
    }

    pub fn min_on(&self, iv: Interval) -> f64 {
        self.eval(iv.lo).min(self.eval(iv.hi))
    }

    pub fn is_const(&self) -> bool {
        matches!(self, StateFn::Const(_)) || matches!(self, StateFn::Affine { slope, .. } if *slope == 0.0)
    }
}

/// Standard smooth bump on `[-1, 1]`: `Ψ(t) = exp(1 - 1/(1 - t²))`.
fn standard_bump(t: f64) -> f64 {
    let d = 1.0 - t * t;
    if d <= 0.0 {
        0.0
    } else {
        (1.0 - 1.0 / d).exp()
    }
}

/// `χ_a`: 1 on `|y| ≤ (1-υ)a`, smooth shoulders, 0 beyond `a`.
pub fn bump_chi(y: f64, a: f64, upsilon: f64) -> f64 {
    let ay = y.abs();
    let flat = (1.0 - upsilon) * a;
    if ay <= flat {
        1.0
    } else if ay < a {
        standard_bump((ay - flat) / (upsilon * a))
    } else {
        0.0
    }
}

const CDF_TABLE_SIZE: usize = 2048;

/// Dynamic-noise law: density `g(η) = c_a χ_a(η) e^{-η²/2}` and amplitude `σ(x)`.
#[derive(Debug, Clone)]
pub struct DynNoise {
    pub a: f64,
    pub upsilon: f64,
    pub sigma: StateFn,
    pub c_a: f64,
    pub sigma_max: f64,
    pub sigma_min_on_support: f64,
    cdf_table: Vec<f64>,
}

impl DynNoise {
    pub fn new(a: f64, upsilon: f64, sigma: StateFn, geometry: &Geometry) -> Result<Self> {
        if !(a >= 0.0) || !a.is_finite() {
            return Err(Error::InvalidConfig(format!("a must be nonnegative, got {a}")));
        }
        if !(upsilon > 0.0 && upsilon < 1.0) {
            return Err(Error::InvalidConfig(format!("upsilon must lie in (0,1), got {upsilon}")));
        }
        let sigma_max = sigma.max_on(geometry.extended_domain);
        let sigma_min_on_support = sigma.min_on(geometry.i_gamma);
        if a == 0.0 {
            return Ok(DynNoise {
                a,
                upsilon,
                sigma,
                c_a: f64::INFINITY,
                sigma_max,
                sigma_min_on_support,
                cdf_table: Vec::new(),
            });
        }
        let raw = |y: f64| bump_chi(y, a, upsilon) * (-0.5 * y * y).exp();
        let flat = (1.0 - upsilon) * a;
        // Split at the shoulder joints so every piece is smooth.
        let mass = integrate_adaptive(raw, -a, -flat, 1e-12)
            + integrate_adaptive(raw, -flat, flat, 1e-12)
            + integrate_adaptive(raw, flat, a, 1e-12);
        let c_a = 1.0 / mass;

        let step = 2.0 * a / CDF_TABLE_SIZE as f64;
        let mut cdf_table = Vec::with_capacity(CDF_TABLE_SIZE + 1);
        let mut acc = 0.0;
        cdf_table.push(0.0);
        for k in 0..CDF_TABLE_SIZE {
            let lo = -a + step * k as f64;
            acc += c_a * integrate_gl8(raw, lo, lo + step);
            cdf_table.push(acc);
        }
        Ok(DynNoise {
            a,
            upsilon,
            sigma,
            c_a,
            sigma_max,
            sigma_min_on_support,
            cdf_table,
        })
    }

    /// Density `g(η)`.
    pub fn eval_g(&self, eta: f64) -> f64 {
        if self.a == 0.0 || eta.abs() >= self.a {
            return 0.0;
        }
        self.c_a * bump_chi(eta, self.a, self.upsilon) * (-0.5 * eta * eta).exp()
    }

    /// Distribution function of `η`, by cubic Hermite interpolation of a
    /// quadrature table with the exact density as derivative.
    pub fn cdf(&self, eta: f64) -> f64 {
        if self.a == 0.0 {
            return if eta >= 0.0 { 1.0 } else { 0.0 };
        }
        if eta <= -self.a {
            return 0.0;
        }
        if eta >= self.a {
            return 1.0;
        }
        let step = 2.0 * self.a / CDF_TABLE_SIZE as f64;
        let pos = (eta + self.a) / step;
        let k = (pos.floor() as usize).min(CDF_TABLE_SIZE - 1);
        let s = pos - k as f64;
        let x0 = -self.a + step * k as f64;
        let (y0, y1) = (self.cdf_table[k], self.cdf_table[k + 1]);
        let (d0, d1) = (self.eval_g(x0) * step, self.eval_g(x0 + step) * step);
        let h00 = (1.0 + 2.0 * s) * (1.0 - s) * (1.0 - s);
        let h10 = s * (1.0 - s) * (1.0 - s);
        let h01 = s * s * (3.0 - 2.0 * s);
        let h11 = s * s * (s - 1.0);
        (h00 * y0 + h10 * d0 + h01 * y1 + h11 * d1).clamp(0.0, 1.0)
    }
}

/// Shape of the observational-noise law on `[-ε/2, ε/2]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PsiKind {
    Uniform,
    /// Gaussian with standard deviation `ε/4`, truncated at `±ε/2`.
    TruncNormal,
}

impl PsiKind {
    fn name(&self) -> &'static str {
        match self {
            PsiKind::Uniform => "uniform",
            PsiKind::TruncNormal => "truncnormal",
        }
    }
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

const TRUNC_Z: f64 = 2.0;

/// Observational-noise law: `Z = x + s(x)·ε`, `ε ~ ψ` on `[-ε/2, ε/2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsNoise {
    pub s: StateFn,
    pub psi: PsiKind,
    /// Full width of the support of `ψ`.
    pub epsilon: f64,
    pub s_max: f64,
}

impl ObsNoise {
    pub fn new(s: StateFn, psi: PsiKind, epsilon: f64, geometry: &Geometry) -> Result<Self> {
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(Error::InvalidConfig(format!("epsilon must be nonnegative, got {epsilon}")));
        }
        Ok(ObsNoise {
            s,
            psi,
            epsilon,
            s_max: s.max_on(geometry.extended_domain),
        })
    }

    pub fn half_width(&self) -> f64 {
        0.5 * self.epsilon
    }

    /// Density `ψ'(v)`.
    pub fn psi_density(&self, v: f64) -> f64 {
        let hw = self.half_width();
        if hw == 0.0 || v.abs() > hw {
            return 0.0;
        }
        match self.psi {
            PsiKind::Uniform => 1.0 / self.epsilon,
            PsiKind::TruncNormal => {
                let sd = hw / TRUNC_Z;
                let norm = std_normal_cdf(TRUNC_Z) - std_normal_cdf(-TRUNC_Z);
                (-0.5 * (v / sd).powi(2)).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt() * norm)
            }
        }
    }

    /// Distribution function of `ψ`.
    pub fn psi_cdf(&self, v: f64) -> f64 {
        let hw = self.half_width();
        if v < -hw {
            return 0.0;
        }
        if v >= hw {
            return 1.0;
        }
        match self.psi {
            PsiKind::Uniform => (v + hw) / self.epsilon,
            PsiKind::TruncNormal => {
                let sd = hw / TRUNC_Z;
                let lo = std_normal_cdf(-TRUNC_Z);
                ((std_normal_cdf(v / sd) - lo) / (std_normal_cdf(TRUNC_Z) - lo)).clamp(0.0, 1.0)
            }
        }
    }

    /// `∫|ε| dψ(ε)`.
    pub fn mean_abs(&self) -> f64 {
        let hw = self.half_width();
        match self.psi {
            PsiKind::Uniform => 0.5 * hw,
            PsiKind::TruncNormal => {
                integrate_adaptive(|v: f64| v.abs() * self.psi_density(v), -hw, hw, 1e-12)
            }
        }
    }

    /// `ψ((B - x)/s(x))` for the ball `B = [center - radius, center + radius]`:
    /// the probability that an observation of state `x` lands in `B`.
    pub fn ball_probability(&self, x: f64, center: f64, radius: f64) -> f64 {
        let s = self.s.eval(x);
        if s <= 0.0 {
            return if (x - center).abs() <= radius { 1.0 } else { 0.0 };
        }
        (self.psi_cdf((center + radius - x) / s) - self.psi_cdf((center - radius - x) / s)).max(0.0)
    }

    /// `Φ(v) = ∫_{-∞}^{v} F_ψ(u) du = E[(v - ε)⁺]`, in closed form.
    pub fn psi_cdf_integral(&self, v: f64) -> f64 {
        let hw = self.half_width();
        if v <= -hw {
            return 0.0;
        }
        if v >= hw {
            // ψ has mean zero.
            return v;
        }
        match self.psi {
            PsiKind::Uniform => (v + hw) * (v + hw) / (2.0 * self.epsilon),
            PsiKind::TruncNormal => {
                let sd = hw / TRUNC_Z;
                let norm = std_normal_cdf(TRUNC_Z) - std_normal_cdf(-TRUNC_Z);
                let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
                v * self.psi_cdf(v) - sd * (pdf(TRUNC_Z) - pdf(v / sd)) / norm
            }
        }
    }

    /// Average over `x ∈ [x0, x1]` of `P(x + s(x)ε ∈ [a, b])`.
    pub fn interval_prob_average(&self, x0: f64, x1: f64, a: f64, b: f64) -> f64 {
        let len = x1 - x0;
        if !(len > 0.0) || !(b > a) {
            return 0.0;
        }
        match self.s {
            StateFn::Const(s) if s <= 0.0 => (x1.min(b) - x0.max(a)).max(0.0) / len,
            StateFn::Const(s) => {
                let phi = |v: f64| self.psi_cdf_integral(v);
                let val = s * (phi((b - x0) / s) - phi((b - x1) / s) - phi((a - x0) / s) + phi((a - x1) / s));
                (val / len).clamp(0.0, 1.0)
            }
            StateFn::Affine { intercept, slope } => {
                let center = 0.5 * (a + b);
                let radius = 0.5 * (b - a);
                // The integrand has kinks where x ± s(x)·ε/2 meets a or b.
                let c = self.half_width();
                let mut cuts = vec![x0, x1];
                for e in [a, b] {
                    for sign in [-1.0, 1.0] {
                        let x = (e - sign * c * intercept) / (1.0 + sign * c * slope);
                        if x > x0 && x < x1 {
                            cuts.push(x);
                        }
                    }
                }
                cuts.sort_by(f64::total_cmp);
                cuts.windows(2)
                    .flat_map(|p| crate::quadrature::composite_gauss_4(p[0], p[1], 4))
                    .map(|(x, w)| w * self.ball_probability(x, center, radius))
                    .sum::<f64>()
                    / len
            }
        }
    }
}

/// Full specification of the noisy system.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub map: MapKind,
    pub geometry: Geometry,
    pub dyn_noise: DynNoise,
    pub obs: ObsNoise,
}

impl ModelConfig {
    pub fn new(
        map: MapKind,
        a: f64,
        upsilon: f64,
        sigma: StateFn,
        s: StateFn,
        psi: PsiKind,
        epsilon: f64,
    ) -> Result<Self> {
        let geometry = Geometry::compute(&map)?;
        let dyn_noise = DynNoise::new(a, upsilon, sigma, &geometry)?;
        let obs = ObsNoise::new(s, psi, epsilon, &geometry)?;
        Ok(ModelConfig {
            map,
            geometry,
            dyn_noise,
            obs,
        })
    }

    /// Reference configuration: the published map parameters, constant `σ = 0.2`,
    /// `a = 0.05`, `υ = 0.5`, constant `s = 0.01` and uniform `ψ` with `ε = 0.1`.
    pub fn reference() -> Self {
        ModelConfig::new(
            MapKind::Finance(MapParams::reference()),
            0.05,
            0.5,
            StateFn::Const(0.2),
            StateFn::Const(0.01),
            PsiKind::Uniform,
            0.1,
        )
        .expect("reference configuration is well formed")
    }

    /// Same dynamics with a different observational noise.
    pub fn with_observation(&self, s: StateFn, psi: PsiKind, epsilon: f64) -> Result<Self> {
        let obs = ObsNoise::new(s, psi, epsilon, &self.geometry)?;
        Ok(ModelConfig {
            obs,
            ..self.clone()
        })
    }

    pub fn t(&self, x: f64) -> Result<f64> {
        eval_t(x, &self.map, &self.geometry)
    }

    pub fn sigma(&self, x: f64) -> f64 {
        self.dyn_noise.sigma.eval(x)
    }

    pub fn s(&self, x: f64) -> f64 {
        self.obs.s.eval(x)
    }

    /// Largest admissible `a` for the current `σ`.
    pub fn noise_amplitude_bound(&self) -> f64 {
        let g = &self.geometry;
        let t_right = g.i_gamma.lo * 2.0;
        (g.gamma / 2.0).min(g.q / 2.0).min(t_right / 2.0) / self.dyn_noise.sigma_max
    }

    /// Canonical `key = value` text. Keys always appear in the same order.
    pub fn to_config_string(&self) -> String {
        let mut kv: Vec<(&str, String)> = Vec::new();
        match self.map {
            MapKind::Finance(p) => {
                kv.push(("map_kind", "finance".into()));
                kv.push(("gamma0", fmt_f(p.gamma0)));
                kv.push(("omega", fmt_f(p.omega)));
                kv.push(("c", fmt_f(p.c)));
                kv.push(("sigma_eps_bar", fmt_f(p.sigma_eps_bar)));
            }
            MapKind::Tent { height } => {
                kv.push(("map_kind", "tent".into()));
                kv.push(("map_height", fmt_f(height)));
            }
            MapKind::Logistic { r } => {
                kv.push(("map_kind", "logistic".into()));
                kv.push(("logistic_r", fmt_f(r)));
            }
        }
        kv.push(("a", fmt_f(self.dyn_noise.a)));
        kv.push(("upsilon", fmt_f(self.dyn_noise.upsilon)));
        push_state_fn(&mut kv, "sigma", self.dyn_noise.sigma);
        push_state_fn(&mut kv, "s", self.obs.s);
        kv.push(("psi_kind", self.obs.psi.name().into()));
        kv.push(("epsilon", fmt_f(self.obs.epsilon)));
        let mut out = String::new();
        for (k, v) in kv {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// 64-bit digest of the canonical text.
    pub fn config_hash(&self) -> u64 {
        let digest = Sha256::digest(self.to_config_string().as_bytes());
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        u64::from_be_bytes(bytes)
    }

    pub fn config_hash_hex(&self) -> String {
        format!("{:016x}", self.config_hash())
    }

    pub fn from_config_str(text: &str) -> Result<Self> {
        let mut kv: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: line_no,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            let k = k.trim();
            if !KNOWN_KEYS.contains(&k) {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("unknown key `{k}`"),
                });
            }
            if kv.insert(k.to_string(), (line_no, v.trim().to_string())).is_some() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("duplicate key `{k}`"),
                });
            }
        }
        let reader = KvReader { kv: &kv };
        let map = match reader.text_or("map_kind", "finance")?.as_str() {
            "finance" => MapKind::Finance(MapParams {
                gamma0: reader.num("gamma0")?,
                omega: reader.num("omega")?,
                c: reader.num("c")?,
                sigma_eps_bar: reader.num("sigma_eps_bar")?,
            }),
            "tent" => MapKind::Tent {
                height: reader.num("map_height")?,
            },
            "logistic" => MapKind::Logistic {
                r: reader.num("logistic_r")?,
            },
            other => {
                return Err(Error::InvalidConfig(format!("unknown map_kind `{other}`")));
            }
        };
        let a = reader.num("a")?;
        let upsilon = reader.num_or("upsilon", 0.5)?;
        let sigma = reader.state_fn("sigma")?;
        let s = reader.state_fn("s")?;
        let psi = match reader.text_or("psi_kind", "uniform")?.as_str() {
            "uniform" => PsiKind::Uniform,
            "truncnormal" => PsiKind::TruncNormal,
            other => return Err(Error::InvalidConfig(format!("unknown psi_kind `{other}`"))),
        };
        let epsilon = reader.num("epsilon")?;
        // Documentation-only metadata: accepted and ignored.
        let _ = reader.num_or("alpha", 0.0)?;
        ModelConfig::new(map, a, upsilon, sigma, s, psi, epsilon)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_config_str(&text)
    }
}

const KNOWN_KEYS: &[&str] = &[
    "map_kind",
    "gamma0",
    "omega",
    "c",
    "sigma_eps_bar",
    "alpha",
    "map_height",
    "logistic_r",
    "a",
    "upsilon",
    "sigma_kind",
    "sigma_const",
    "sigma_intercept",
    "sigma_slope",
    "s_kind",
    "s_const",
    "s_intercept",
    "s_slope",
    "psi_kind",
    "epsilon",
];

fn fmt_f(v: f64) -> String {
    format!("{v:?}")
}

fn push_state_fn(kv: &mut Vec<(&'static str, String)>, prefix: &'static str, f: StateFn) {
    let (kind, c, i, sl) = if prefix == "sigma" {
        ("sigma_kind", "sigma_const", "sigma_intercept", "sigma_slope")
    } else {
        ("s_kind", "s_const", "s_intercept", "s_slope")
    };
    match f {
        StateFn::Const(v) => {
            kv.push((kind, "const".into()));
            kv.push((c, fmt_f(v)));
        }
        StateFn::Affine { intercept, slope } => {
            kv.push((kind, "affine".into()));
            kv.push((i, fmt_f(intercept)));
            kv.push((sl, fmt_f(slope)));
        }
    }
}

struct KvReader<'a> {
    kv: &'a BTreeMap<String, (usize, String)>,
}

impl KvReader<'_> {
    fn num(&self, key: &str) -> Result<f64> {
        let (line, v) = self
            .kv
            .get(key)
            .ok_or_else(|| Error::InvalidConfig(format!("missing key `{key}`")))?;
        v.parse::<f64>().map_err(|_| Error::Parse {
            line: *line,
            msg: format!("`{key}` is not a number: `{v}`"),
        })
    }

    fn num_or(&self, key: &str, default: f64) -> Result<f64> {
        if self.kv.contains_key(key) {
            self.num(key)
        } else {
            Ok(default)
        }
    }

    fn text_or(&self, key: &str, default: &str) -> Result<String> {
        Ok(self
            .kv
            .get(key)
            .map(|(_, v)| v.clone())
            .unwrap_or_else(|| default.to_string()))
    }

    fn state_fn(&self, prefix: &str) -> Result<StateFn> {
        let kind = self.text_or(&format!("{prefix}_kind"), "const")?;
        match kind.as_str() {
            "const" => Ok(StateFn::Const(self.num(&format!("{prefix}_const"))?)),
            "affine" => Ok(StateFn::Affine {
                intercept: self.num(&format!("{prefix}_intercept"))?,
                slope: self.num(&format!("{prefix}_slope"))?,
            }),
            other => Err(Error::InvalidConfig(format!("unknown {prefix}_kind `{other}`"))),
        }
    }
}

/// Density `g(η)` of the dynamic noise.
pub fn eval_g(eta: f64, dyn_noise: &DynNoise) -> f64 {
    dyn_noise.eval_g(eta)
}

/// Transition density `p(x, y) = g((y - T(x))/σ(x)) / σ(x)`.
pub fn eval_kernel_p(x: f64, y: f64, config: &ModelConfig) -> Result<f64> {
    let sig = config.sigma(x);
    if !(sig > 0.0) {
        return Err(Error::Domain { what: "sigma(x)", value: sig });
    }
    let tx = config.t(x)?;
    Ok(config.dyn_noise.eval_g((y - tx) / sig) / sig)
}

/// Likelihood `(1/s(x)) ψ'((z - x)/s(x))` of observing `z` from state `x`.
pub fn eval_likelihood(z: f64, x: f64, config: &ModelConfig) -> Result<f64> {
    let s = config.s(x);
    if !(s > 0.0) {
        return Err(Error::Domain { what: "s(x)", value: s });
    }
    let hw = s * config.obs.half_width();
    if (z - x).abs() > hw {
        return Ok(0.0);
    }
    Ok(config.obs.psi_density((z - x) / s) / s)
}

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// All checks that concern the latent chain (everything except the
    /// observation-noise bound).
    pub fn dynamics_valid(&self) -> bool {
        self.checks
            .iter()
            .filter(|c| c.name != CHECK_OBSERVATION)
            .all(|c| c.passed)
    }
}

pub const CHECK_DELTA: &str = "delta_below_one";
pub const CHECK_AMPLITUDE: &str = "noise_amplitude_bound";
pub const CHECK_OBSERVATION: &str = "observation_noise_bound";
pub const CHECK_EXTENSION: &str = "left_extension";
pub const CHECK_SIGMA: &str = "sigma_positive_on_support";
pub const CHECK_UNIMODAL: &str = "unimodal";
pub const CHECK_CONFINEMENT: &str = "confinement";

/// Number of sign changes of the forward-difference derivative of `T` on an
/// `n`-point grid of `[0, 1)`.
pub fn derivative_sign_changes(map: &MapKind, n: usize) -> usize {
    let mut prev_sign = 0i8;
    let mut changes = 0;
    let mut prev = map.eval_base(0.0).unwrap_or(f64::NAN);
    for k in 1..n {
        let x = SEARCH_RIGHT * k as f64 / (n - 1) as f64;
        let v = map.eval_base(x).unwrap_or(f64::NAN);
        let d = v - prev;
        prev = v;
        let sign = if d > 0.0 {
            1
        } else if d < 0.0 {
            -1
        } else {
            0
        };
        if sign != 0 {
            if prev_sign != 0 && sign != prev_sign {
                changes += 1;
            }
            prev_sign = sign;
        }
    }
    changes
}

pub fn validate_config(config: &ModelConfig) -> ValidationReport {
    let g = &config.geometry;
    let dn = &config.dyn_noise;
    let mut checks = Vec::new();

    let interior = g.critical_point < SEARCH_RIGHT - 1e-6 && g.critical_point > 1e-9;
    checks.push(Check {
        name: CHECK_DELTA,
        passed: interior && g.delta < 1.0 && g.gamma > 0.0,
        detail: format!(
            "critical point {:.12}, Delta = {:.12}, Gamma = {:.3e}",
            g.critical_point, g.delta, g.gamma
        ),
    });

    let bound = config.noise_amplitude_bound();
    checks.push(Check {
        name: CHECK_AMPLITUDE,
        passed: bound > 0.0 && dn.a <= bound * (1.0 + 1e-12),
        detail: format!("a = {:e}, bound = {:e}", dn.a, bound),
    });

    let sup_obs = config.obs.s_max.abs() * config.obs.half_width();
    checks.push(Check {
        name: CHECK_OBSERVATION,
        passed: sup_obs < g.gamma / 2.0,
        detail: format!("sup|s eps| = {:e}, Gamma/2 = {:e}", sup_obs, g.gamma / 2.0),
    });

    let t_left = g.q - g.left_slope * g.gamma;
    checks.push(Check {
        name: CHECK_EXTENSION,
        passed: g.gamma > 0.0 && t_left < g.delta && g.left_slope <= 0.0,
        detail: format!("T(-Gamma) = {:e}, Delta = {:e}", t_left, g.delta),
    });

    let sigma_ok = dn.sigma_min_on_support > 0.0 && dn.sigma.min_on(g.extended_domain) > 0.0;
    checks.push(Check {
        name: CHECK_SIGMA,
        passed: sigma_ok,
        detail: format!("sigma_m = {:e}", dn.sigma_min_on_support),
    });

    let changes = derivative_sign_changes(&config.map, 10_000);
    checks.push(Check {
        name: CHECK_UNIMODAL,
        passed: changes == 1,
        detail: format!("{changes} derivative sign changes on a 1e4-point grid"),
    });

    checks.push(confinement_check(config));

    ValidationReport { checks }
}

fn confinement_check(config: &ModelConfig) -> Check {
    let g = &config.geometry;
    let conf = g.confinement;
    let n = 4000;
    let mut worst = f64::NEG_INFINITY;
    let mut ok = g.gamma > 0.0;
    if ok {
        for k in 0..=n {
            let x = conf.lo + conf.len() * k as f64 / n as f64;
            let Ok(tx) = config.t(x) else {
                ok = false;
                break;
            };
            let spread = config.sigma(x).abs() * config.dyn_noise.a;
            for y in [tx - spread, tx + spread] {
                let excess = (conf.lo - y).max(y - conf.hi);
                worst = worst.max(excess);
            }
        }
        ok = ok && worst <= 1e-12;
    }
    Check {
        name: CHECK_CONFINEMENT,
        passed: ok,
        detail: format!("largest excursion beyond confinement {worst:e}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_params() -> MapParams {
        MapParams {
            gamma0: 15.969,
            omega: 1.0,
            c: 0.0,
            sigma_eps_bar: 0.0,
        }
    }

    #[test]
    fn a_reduces_without_volatility() {
        let p = identity_params();
        assert_eq!(eval_a(0.0, &p).unwrap(), 1.0);
        for u in [0.1, 0.37, 0.9] {
            assert!((eval_a(u, &p).unwrap() - (1.0 + p.gamma0 * u)).abs() < 1e-12);
        }
        assert!(eval_a(1.0, &p).is_err());
        assert!(eval_a(-0.1, &p).is_err());
    }

    #[test]
    fn identity_map_and_its_rejection() {
        let map = MapKind::Finance(identity_params());
        let g = Geometry::compute(&map).unwrap();
        assert!((eval_t(0.3, &map, &g).unwrap() - 0.3).abs() < 1e-12);
        let cfg = ModelConfig::new(
            map,
            0.01,
            0.5,
            StateFn::Const(0.1),
            StateFn::Const(0.01),
            PsiKind::Uniform,
            0.1,
        )
        .unwrap();
        let report = validate_config(&cfg);
        assert!(!report.is_valid());
        assert!(!report.check(CHECK_DELTA).unwrap().passed);
    }

    #[test]
    fn limit_at_one_is_minus_inverse_gamma0() {
        let map = MapKind::Finance(MapParams::reference());
        let v = map.eval_base(1.0 - 1e-9).unwrap();
        assert!((v + 1.0 / 15.969).abs() < 1e-4, "{v}");
        assert!((-1.0 / 15.969f64 - (-0.06262)).abs() < 1e-5);
    }

    #[test]
    fn bump_shape() {
        assert_eq!(bump_chi(0.0, 1.0, 0.5), 1.0);
        assert_eq!(bump_chi(0.5, 1.0, 0.5), 1.0);
        assert_eq!(bump_chi(1.0, 1.0, 0.5), 0.0);
        assert_eq!(bump_chi(-2.0, 1.0, 0.5), 0.0);
        let v = bump_chi(0.75, 1.0, 0.5);
        assert!((v - (1.0f64 - 1.0 / 0.75).exp()).abs() < 1e-15);
        assert_eq!(bump_chi(0.3, 1.0, 0.5), bump_chi(-0.3, 1.0, 0.5));
    }

    #[test]
    fn g_vanishes_outside_support() {
        let cfg = ModelConfig::reference();
        let a = cfg.dyn_noise.a;
        assert_eq!(cfg.dyn_noise.eval_g(2.0 * a), 0.0);
        assert_eq!(cfg.dyn_noise.eval_g(a), 0.0);
        assert_eq!(cfg.dyn_noise.eval_g(0.3 * a), cfg.dyn_noise.eval_g(-0.3 * a));
    }

    #[test]
    fn g_cdf_matches_quadrature() {
        let cfg = ModelConfig::reference();
        let dn = &cfg.dyn_noise;
        for frac in [-0.9, -0.6, -0.2, 0.0, 0.35, 0.7, 0.95] {
            let eta = frac * dn.a;
            let direct = integrate_adaptive(|v| dn.eval_g(v), -dn.a, eta, 1e-12);
            assert!((dn.cdf(eta) - direct).abs() < 1e-10, "{frac}");
        }
    }

    #[test]
    fn continuity_at_zero() {
        let cfg = ModelConfig::reference();
        let right = cfg.t(0.0).unwrap();
        let left = cfg.t(-1e-14).unwrap();
        assert!((right - left).abs() < 1e-10);
    }

    #[test]
    fn likelihood_uniform_value_and_support() {
        let cfg = ModelConfig::reference();
        let x = 0.5;
        let s = cfg.s(x);
        let v = eval_likelihood(0.5 + 0.2 * s * cfg.obs.epsilon, x, &cfg).unwrap();
        assert!((v - 1.0 / (cfg.obs.epsilon * s)).abs() < 1e-9);
        assert_eq!(eval_likelihood(0.5 + s * cfg.obs.epsilon, x, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn config_text_roundtrip() {
        let cfg = ModelConfig::reference();
        let text = cfg.to_config_string();
        let back = ModelConfig::from_config_str(&text).unwrap();
        assert_eq!(back.to_config_string(), text);
        assert_eq!(back.config_hash(), cfg.config_hash());
    }

    #[test]
    fn parse_errors_are_reported() {
        assert!(matches!(
            ModelConfig::from_config_str("gamma0 = x\n"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            ModelConfig::from_config_str("bogus = 1\n"),
            Err(Error::Parse { .. })
        ));
        let text = ModelConfig::reference().to_config_string().replace("epsilon = 0.1\n", "");
        assert!(matches!(
            ModelConfig::from_config_str(&text),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn affine_keys_parse() {
        let text = "gamma0 = 15.969\nomega = 0.51\nc = 0.1\nsigma_eps_bar = 2.7e-5 # comment\n\
                    a = 0.05\nsigma_kind = affine\nsigma_intercept = 0.1\nsigma_slope = 0.05\n\
                    s_kind = affine\ns_intercept = 0.3\ns_slope = 0.4\nepsilon = 2\n";
        let cfg = ModelConfig::from_config_str(text).unwrap();
        assert_eq!(cfg.dyn_noise.sigma, StateFn::Affine { intercept: 0.1, slope: 0.05 });
        assert!((cfg.s(0.5) - 0.5).abs() < 1e-15);
    }
}
