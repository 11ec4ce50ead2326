//! Seeded simulation of the latent chain `X_t` and the observed process `Z_t`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::GridDensity;
use crate::model::{DynNoise, ModelConfig, ObsNoise, PsiKind};

/// Address of an independent random stream. Replica `k` of an experiment uses
/// `stream_id = k`, so results do not depend on how work is scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeededStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl SeededStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        SeededStream { seed, stream_id }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }

    /// Stream `k` of a family derived from this one.
    pub fn child(&self, k: u64) -> SeededStream {
        SeededStream {
            seed: self.seed ^ self.stream_id.wrapping_mul(0x9E37_79B9_7F4A_7C15),
            stream_id: k,
        }
    }
}

pub type StreamRng = ChaCha8Rng;

/// Draw from `g` by rejection: uniform proposal on `[-a, a]`, accepted with
/// probability `χ_a(η)·exp(-η²/2) ≤ 1`.
pub fn sample_eta<R: Rng + ?Sized>(dyn_noise: &DynNoise, rng: &mut R) -> f64 {
    if dyn_noise.a == 0.0 {
        return 0.0;
    }
    let a = dyn_noise.a;
    loop {
        let eta = a * (2.0 * rng.random::<f64>() - 1.0);
        let accept = dyn_noise.eval_g(eta) / dyn_noise.c_a;
        if rng.random::<f64>() < accept {
            return eta;
        }
    }
}

/// Draw from `ψ` on `[-ε/2, ε/2]`.
pub fn sample_psi<R: Rng + ?Sized>(obs: &ObsNoise, rng: &mut R) -> f64 {
    let hw = obs.half_width();
    match obs.psi {
        PsiKind::Uniform => hw * (2.0 * rng.random::<f64>() - 1.0),
        PsiKind::TruncNormal => {
            let peak = obs.psi_density(0.0);
            loop {
                let v = hw * (2.0 * rng.random::<f64>() - 1.0);
                if rng.random::<f64>() * peak < obs.psi_density(v) {
                    return v;
                }
            }
        }
    }
}

/// One transition `T(x) + σ(x)·η`. Fails if the result leaves the confinement
/// interval, which can only happen for an invalid configuration.
pub fn step<R: Rng + ?Sized>(x: f64, config: &ModelConfig, rng: &mut R) -> Result<f64> {
    let eta = sample_eta(&config.dyn_noise, rng);
    let y = config.t(x)? + config.sigma(x) * eta;
    if !config.geometry.confinement.contains(y) {
        return Err(Error::InvariantViolation(format!(
            "state {y} left the confinement interval [{}, {}] from x = {x}",
            config.geometry.confinement.lo, config.geometry.confinement.hi
        )));
    }
    Ok(y)
}

/// One observation `x + s(x)·ε`.
pub fn observe<R: Rng + ?Sized>(x: f64, config: &ModelConfig, rng: &mut R) -> f64 {
    let s = config.s(x);
    if s == 0.0 {
        return x;
    }
    x + s * sample_psi(&config.obs, rng)
}

/// Where the chain starts.
#[derive(Debug, Clone)]
pub enum InitialState {
    Point(f64),
    /// Drawn from a stationary density.
    Stationary(GridDensity),
    /// Started at the critical point and run for `BURN_IN` unrecorded steps.
    BurnIn,
}

pub const BURN_IN: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub seed: SeededStream,
    pub config_hash: u64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.len() * 48 + 128);
        out.push_str(&format!(
            "# seed={} stream={} config_hash={:016x}\n",
            self.seed.seed, self.seed.stream_id, self.config_hash
        ));
        out.push_str("t,x,z\n");
        for (t, (x, z)) in self.x.iter().zip(&self.z).enumerate() {
            out.push_str(&format!("{t},{x:e},{z:e}\n"));
        }
        out
    }
}

fn initial_point<R: Rng + ?Sized>(config: &ModelConfig, x0: &InitialState, rng: &mut R) -> Result<f64> {
    match x0 {
        InitialState::Point(x) => {
            if !config.geometry.confinement.contains(*x) {
                return Err(Error::Domain { what: "initial state", value: *x });
            }
            Ok(*x)
        }
        InitialState::Stationary(d) => Ok(d.sample(rng).clamp(
            config.geometry.confinement.lo,
            config.geometry.confinement.hi,
        )),
        InitialState::BurnIn => {
            let mut x = config.geometry.critical_point;
            for _ in 0..BURN_IN {
                x = step(x, config, rng)?;
            }
            Ok(x)
        }
    }
}

/// Run the latent chain for `n` states, observing each one. `X_0` is observed
/// before any step is taken.
pub fn simulate(config: &ModelConfig, n: usize, x0: &InitialState, stream: SeededStream) -> Result<Trajectory> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be ≥ 1".into()));
    }
    let mut rng = stream.rng();
    let mut x = initial_point(config, x0, &mut rng)?;
    let mut xs = Vec::with_capacity(n);
    let mut zs = Vec::with_capacity(n);
    for t in 0..n {
        if t > 0 {
            x = step(x, config, &mut rng)?;
        }
        xs.push(x);
        zs.push(observe(x, config, &mut rng));
    }
    Ok(Trajectory {
        x: xs,
        z: zs,
        seed: stream,
        config_hash: config.config_hash(),
    })
}

/// Run `replicas` independent trajectories in parallel and reduce each with `f`.
/// Replica `k` uses `stream.child(k)`; output order is replica order.
pub fn replicate<T, F>(
    config: &ModelConfig,
    n: usize,
    x0: &InitialState,
    replicas: usize,
    stream: SeededStream,
    f: F,
) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&Trajectory) -> Result<T> + Sync,
{
    (0..replicas as u64)
        .into_par_iter()
        .map(|k| {
            let traj = simulate(config, n, x0, stream.child(k))?;
            f(&traj)
        })
        .collect()
}
