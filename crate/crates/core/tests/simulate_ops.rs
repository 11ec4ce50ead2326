use heterodyn::operator::{build_ulam, stationary_density};
use heterodyn::quadrature::integrate_adaptive;
use heterodyn::simulate::{observe, sample_eta, step};
use heterodyn::{eval_g, eval_kernel_p, simulate, Error, GridDensity, InitialState, ModelConfig, PsiKind, SeededStream, StateFn};
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Pearson χ² p-value of counts in equal-width bins on `[lo, hi]` against
/// bin probabilities from `density` integrated by quadrature.
fn chi2_pvalue<F: Fn(f64) -> f64>(samples: &[f64], lo: f64, hi: f64, bins: usize, density: F) -> f64 {
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0.0; bins];
    for &v in samples {
        let k = (((v - lo) / width) as usize).min(bins - 1);
        counts[k] += 1.0;
    }
    let probs: Vec<f64> = (0..bins)
        .map(|k| integrate_adaptive(&density, lo + k as f64 * width, lo + (k + 1) as f64 * width, 1e-12))
        .collect();
    let total: f64 = probs.iter().sum();
    let n = samples.len() as f64;
    let mut chi2 = 0.0;
    let mut used = 0;
    for (c, p) in counts.iter().zip(&probs) {
        let e = n * p / total;
        if e > 0.0 {
            chi2 += (c - e) * (c - e) / e;
            used += 1;
        }
    }
    1.0 - ChiSquared::new((used - 1) as f64).unwrap().cdf(chi2)
}

#[test]
fn eta_draws_stay_in_support() {
    let dn = ModelConfig::reference().dyn_noise;
    let mut rng = SeededStream::new(1, 0).rng();
    assert!((0..100_000).all(|_| sample_eta(&dn, &mut rng).abs() <= dn.a));
}

#[test]
fn eta_mean_is_zero() {
    let dn = ModelConfig::reference().dyn_noise;
    let mut rng = SeededStream::new(2, 0).rng();
    let draws: Vec<f64> = (0..1_000_000).map(|_| sample_eta(&dn, &mut rng)).collect();
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let sd = (draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!(mean.abs() <= 3.0 * sd / 1e3, "{mean} vs {sd}");
}

#[test]
fn eta_matches_density_by_chi2() {
    let dn = ModelConfig::reference().dyn_noise;
    let mut rng = SeededStream::new(3, 0).rng();
    let draws: Vec<f64> = (0..1_000_000).map(|_| sample_eta(&dn, &mut rng)).collect();
    let p = chi2_pvalue(&draws, -dn.a, dn.a, 50, |e| eval_g(e, &dn));
    assert!(p > 0.01, "p = {p}");
}

#[test]
fn step_without_noise_is_the_map() {
    let base = ModelConfig::reference();
    let config = ModelConfig::new(base.map, 0.0, 0.5, StateFn::Const(0.2), StateFn::Const(0.01), PsiKind::Uniform, 0.1)
        .unwrap();
    let mut rng = SeededStream::new(4, 0).rng();
    for x in [0.0, 0.3, 0.79, 0.95] {
        assert_eq!(step(x, &config, &mut rng).unwrap(), config.t(x).unwrap());
    }
}

#[test]
fn iterated_steps_from_critical_point_stay_confined() {
    let config = ModelConfig::reference();
    let conf = config.geometry.confinement;
    let mut rng = SeededStream::new(5, 0).rng();
    let mut x = config.geometry.critical_point;
    for _ in 0..1_000_000 {
        x = step(x, &config, &mut rng).unwrap();
        assert!(conf.contains(x));
    }
}

#[test]
fn step_law_matches_kernel() {
    let config = ModelConfig::reference();
    let mut rng = SeededStream::new(6, 0).rng();
    for x in [0.2, 0.65] {
        let draws: Vec<f64> = (0..100_000).map(|_| step(x, &config, &mut rng).unwrap()).collect();
        let tx = config.t(x).unwrap();
        let reach = config.dyn_noise.a * config.sigma(x);
        let p = chi2_pvalue(&draws, tx - reach, tx + reach, 50, |y| eval_kernel_p(x, y, &config).unwrap());
        assert!(p > 0.01, "x = {x}: p = {p}");
    }
}

#[test]
fn observation_without_noise_is_exact() {
    let config = ModelConfig::reference()
        .with_observation(StateFn::Const(0.0), PsiKind::Uniform, 0.1)
        .unwrap();
    let mut rng = SeededStream::new(7, 0).rng();
    assert_eq!(observe(0.4321, &config, &mut rng), 0.4321);
}

#[test]
fn observation_error_is_bounded() {
    let config = ModelConfig::reference()
        .with_observation(StateFn::Affine { intercept: 0.01, slope: 0.01 }, PsiKind::TruncNormal, 0.1)
        .unwrap();
    let bound = config.obs.s_max * config.obs.half_width();
    let mut rng = SeededStream::new(8, 0).rng();
    for k in 0..100_000 {
        let x = (k % 97) as f64 / 100.0;
        assert!((observe(x, &config, &mut rng) - x).abs() <= bound);
    }
}

#[test]
fn uniform_observation_is_flat() {
    let config = ModelConfig::reference();
    let mut rng = SeededStream::new(9, 0).rng();
    let draws: Vec<f64> = (0..100_000).map(|_| observe(0.5, &config, &mut rng)).collect();
    let hw = config.s(0.5) * config.obs.half_width();
    let p = chi2_pvalue(&draws, 0.5 - hw, 0.5 + hw, 50, |_| 1.0);
    assert!(p > 0.01, "p = {p}");
}

#[test]
fn single_step_without_observation_noise() {
    let config = ModelConfig::reference()
        .with_observation(StateFn::Const(0.0), PsiKind::Uniform, 0.1)
        .unwrap();
    let tr = simulate(&config, 1, &InitialState::Point(0.5), SeededStream::new(10, 0)).unwrap();
    assert_eq!(tr.x, vec![0.5]);
    assert_eq!(tr.z, vec![0.5]);
}

#[test]
fn zero_length_is_rejected() {
    let config = ModelConfig::reference();
    let err = simulate(&config, 0, &InitialState::Point(0.5), SeededStream::new(0, 0)).unwrap_err();
    assert!(matches!(err, Error::InvalidArgument(_)));
}

#[test]
fn identical_seeds_give_identical_bytes() {
    let config = ModelConfig::reference();
    let a = simulate(&config, 1000, &InitialState::BurnIn, SeededStream::new(11, 3)).unwrap();
    let b = simulate(&config, 1000, &InitialState::BurnIn, SeededStream::new(11, 3)).unwrap();
    let c = simulate(&config, 1000, &InitialState::BurnIn, SeededStream::new(11, 4)).unwrap();
    assert_eq!(a.to_csv().as_bytes(), b.to_csv().as_bytes());
    assert_ne!(a.x, c.x);
}

#[test]
fn long_run_histogram_matches_ulam_fixed_point() {
    let config = ModelConfig::reference();
    let l = build_ulam(&config, 256).unwrap();
    let w = stationary_density(&l).unwrap().leading_density;
    let tr = simulate(&config, 1_000_000, &InitialState::BurnIn, SeededStream::new(12, 0)).unwrap();
    let hist = GridDensity::histogram(w.grid, &tr.x).unwrap();
    let l1 = w.l1_distance(&hist).unwrap();
    assert!(l1 <= 0.05, "{l1}");
}

#[test]
fn stationary_start_draws_from_density() {
    let config = ModelConfig::reference();
    let l = build_ulam(&config, 256).unwrap();
    let w = stationary_density(&l).unwrap().leading_density;
    let start = InitialState::Stationary(w.clone());
    let firsts: Vec<f64> = (0..20_000)
        .map(|k| simulate(&config, 1, &start, SeededStream::new(13, k)).unwrap().x[0])
        .collect();
    let hist = GridDensity::histogram(w.grid, &firsts).unwrap();
    assert!(w.l1_distance(&hist).unwrap() < 0.15);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn trajectories_are_deterministic_and_confined(seed in any::<u64>(), stream in 0u64..1000, x0 in 0.0f64..1.0) {
        let config = ModelConfig::reference();
        let conf = config.geometry.confinement;
        let x0 = conf.lo + x0 * conf.len();
        let a = simulate(&config, 500, &InitialState::Point(x0), SeededStream::new(seed, stream)).unwrap();
        let b = simulate(&config, 500, &InitialState::Point(x0), SeededStream::new(seed, stream)).unwrap();
        prop_assert_eq!(&a.x, &b.x);
        prop_assert_eq!(&a.z, &b.z);
        prop_assert!(a.x.iter().all(|&x| conf.contains(x)));
        let bound = config.obs.s_max * config.obs.half_width();
        prop_assert!(a.x.iter().zip(&a.z).all(|(x, z)| (z - x).abs() <= bound));
    }
}
