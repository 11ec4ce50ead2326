use heterodyn::filter::{
    check_main_assumption, cone_membership, cone_parameter, correct, global_noise_condition, hilbert_distance,
    initialize, predict, stability_experiment, update, FilterState,
};
use heterodyn::grid::Grid;
use heterodyn::operator::{build_ulam, stationary_density};
use heterodyn::{
    eval_kernel_p, simulate, Error, GridDensity, InitialState, Interval, KernelMatrix, ModelConfig, PsiKind,
    SeededStream, StateFn,
};
use proptest::prelude::*;
use rand::Rng;
use std::sync::OnceLock;

fn reference() -> &'static (ModelConfig, KernelMatrix, GridDensity) {
    static CELL: OnceLock<(ModelConfig, KernelMatrix, GridDensity)> = OnceLock::new();
    CELL.get_or_init(|| {
        let config = ModelConfig::reference();
        let l = build_ulam(&config, 512).unwrap();
        let w = stationary_density(&l).unwrap().leading_density;
        (config, l, w)
    })
}

fn three_cells() -> (Grid, KernelMatrix) {
    let grid = Grid::new(Interval::new(0.0, 3.0), 3).unwrap();
    let l = KernelMatrix::from_dense(grid, vec![0.5, 0.5, 0.0, 0.0, 0.5, 0.5, 0.5, 0.0, 0.5]).unwrap();
    (grid, l)
}

#[test]
fn stationary_density_is_predicted_unchanged() {
    let (_, l, w) = reference();
    let out = predict(&FilterState::new(w.clone()), l).unwrap();
    assert!(out.l1_distance(w).unwrap() <= 1e-8);
    assert!((out.mass() - 1.0).abs() <= 1e-10);
}

#[test]
fn point_mass_predicts_a_kernel_row() {
    let (_, l, w) = reference();
    let i = 300;
    let point = GridDensity::point_mass(w.grid, w.grid.center(i)).unwrap();
    let out = predict(&FilterState::new(point), l).unwrap().masses();
    for j in 0..l.n() {
        assert!((out[j] - l.plain_entry(i, j)).abs() <= 1e-12);
    }
}

#[test]
fn hand_matrix_prediction() {
    let (grid, l) = three_cells();
    let prior = GridDensity::from_masses(grid, vec![1.0, 0.0, 0.0]).unwrap();
    let out = predict(&FilterState::new(prior), &l).unwrap().masses();
    assert_eq!(out, vec![0.5, 0.5, 0.0]);
}

#[test]
fn prediction_rejects_other_grids() {
    let (_, l, _) = reference();
    let (grid, _) = three_cells();
    let err = predict(&FilterState::new(GridDensity::uniform(grid)), l).unwrap_err();
    assert!(matches!(err, Error::GridMismatch(_)));
}

#[test]
fn flat_likelihood_leaves_density_unchanged() {
    let (config, _, _) = reference();
    // The band z ± 0.5 covers the whole three-cell grid on [0.4, 0.6].
    let wide = config.with_observation(StateFn::Const(10.0), PsiKind::Uniform, 0.1).unwrap();
    let grid = Grid::new(Interval::new(0.4, 0.6), 3).unwrap();
    let prior = GridDensity::from_masses(grid, vec![0.2, 0.5, 0.3]).unwrap();
    let out = correct(&prior, 0.5, &wide).unwrap();
    for (a, b) in out.weights.iter().zip(&prior.weights) {
        assert!((a - b).abs() <= 1e-12 * b);
    }
}

#[test]
fn uniform_likelihood_restricts_to_the_band() {
    let (config, _, w) = reference();
    let z = 0.6;
    let hw = config.s(0.5) * config.obs.half_width();
    let out = correct(w, z, config).unwrap();
    let g = w.grid;
    let mut expected: Vec<f64> = (0..g.n_cells)
        .map(|i| {
            let overlap = (g.edge(i + 1).min(z + hw) - g.edge(i).max(z - hw)).max(0.0);
            w.weights[i] * overlap
        })
        .collect();
    let total: f64 = expected.iter().sum::<f64>() * g.width();
    expected.iter_mut().for_each(|v| *v /= total);
    for (a, b) in out.weights.iter().zip(&expected) {
        assert!((a - b).abs() <= 1e-9 * b.max(1.0));
    }
}

#[test]
fn three_state_bayes_update_by_hand() {
    let (grid, l) = three_cells();
    // s = 1, ε = 2: band [z - 1, z + 1]; z = 1.25 covers 0.75, 1 and 0.25 of
    // the three unit cells.
    let config = ModelConfig::reference()
        .with_observation(StateFn::Const(1.0), PsiKind::Uniform, 2.0)
        .unwrap();
    let prior = GridDensity::from_masses(grid, vec![0.2, 0.3, 0.5]).unwrap();
    let state = update(&FilterState::new(prior), 1.25, &l, &config).unwrap();
    // Predict: (0.35, 0.25, 0.40); emissions (0.75, 1, 0.25)/2.
    let joint = [0.35 * 0.75, 0.25 * 1.0, 0.40 * 0.25];
    let evidence: f64 = joint.iter().sum::<f64>() / 2.0;
    let posterior = state.density.masses();
    for k in 0..3 {
        assert!((posterior[k] - joint[k] / (2.0 * evidence)).abs() <= 1e-12);
    }
    assert!((state.log_normalizer_sum - evidence.ln()).abs() <= 1e-12);
    assert_eq!(state.step, 1);
    assert_eq!(state.last_observation, Some(1.25));
}

#[test]
fn incompatible_observation_has_zero_normalizer() {
    let (config, _, w) = reference();
    let err = correct(w, 5.0, config).unwrap_err();
    assert!(matches!(err, Error::ZeroNormalizer { .. }));
}

#[test]
fn identical_states_stay_identical() {
    let (config, l, w) = reference();
    let tr = simulate(config, 50, &InitialState::BurnIn, SeededStream::new(31, 0)).unwrap();
    let mut a = initialize(w, tr.z[0], config).unwrap();
    let mut b = initialize(w, tr.z[0], config).unwrap();
    for &z in &tr.z[1..] {
        a = update(&a, z, l, config).unwrap();
        b = update(&b, z, l, config).unwrap();
    }
    assert_eq!(a, b);
    assert_eq!(a.step, 50);
}

#[test]
fn sharp_observation_pins_the_cell() {
    let (config, l, w) = reference();
    let sharp = config.with_observation(StateFn::Const(0.01), PsiKind::Uniform, 1e-6).unwrap();
    let z = w.grid.center(200);
    let state = update(&FilterState::new(w.clone()), z, l, &sharp).unwrap();
    let m = state.density.masses();
    assert!((m[200] - 1.0).abs() < 1e-12);
}

#[test]
fn posterior_mean_beats_stationary_mean() {
    let (config, l, w) = reference();
    let n = 10_000;
    let tr = simulate(config, n, &InitialState::BurnIn, SeededStream::new(32, 0)).unwrap();
    let mut state = initialize(w, tr.z[0], config).unwrap();
    let mu = w.mean();
    let (mut se_filter, mut se_static) = (0.0, 0.0);
    for t in 0..n {
        if t > 0 {
            state = update(&state, tr.z[t], l, config).unwrap();
        }
        assert!((state.density.mass() - 1.0).abs() <= 1e-10);
        se_filter += (state.density.mean() - tr.x[t]).powi(2);
        se_static += (mu - tr.x[t]).powi(2);
    }
    assert!(se_filter < se_static, "{se_filter} vs {se_static}");
}

#[test]
fn hilbert_distance_examples() {
    let grid = Grid::new(Interval::new(0.0, 1.0), 2).unwrap();
    let f = GridDensity::from_masses(grid, vec![1.0, 2.0]).unwrap();
    let g = GridDensity::from_masses(grid, vec![2.0, 1.0]).unwrap();
    assert!((hilbert_distance(&f, &g).unwrap() - 4f64.ln()).abs() < 1e-14);
    assert_eq!(hilbert_distance(&f, &f).unwrap(), 0.0);
    let mut scaled = f.clone();
    scaled.weights.iter_mut().for_each(|v| *v *= 7.5);
    assert!(hilbert_distance(&f, &scaled).unwrap().abs() < 1e-14);
    let gap = GridDensity::from_masses(grid, vec![1.0, 0.0]).unwrap();
    assert_eq!(hilbert_distance(&f, &gap).unwrap(), f64::INFINITY);
}

#[test]
fn cone_membership_examples() {
    let grid = Grid::new(Interval::new(0.0, 1.0), 5).unwrap();
    let flat = GridDensity::uniform(grid);
    assert!(cone_membership(&flat, 0.999));
    let holed = GridDensity::from_masses(grid, vec![1.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
    assert!(!cone_membership(&holed, 1e-9));
    assert_eq!(cone_parameter(&holed), 0.0);
}

/// Observations at which the main assumption holds, on a coarse scan.
fn passing_observations(config: &ModelConfig) -> Vec<f64> {
    (1..200)
        .map(|k| k as f64 / 200.0)
        .filter(|&z| check_main_assumption(config, z).unwrap().pass())
        .collect()
}

#[test]
fn updated_density_lands_in_the_small_cone() {
    let (config, l, w) = reference();
    let tr = simulate(config, 200, &InitialState::BurnIn, SeededStream::new(33, 0)).unwrap();
    let mut state = initialize(w, tr.z[0], config).unwrap();
    let mut checked = 0;
    for k in 1..tr.z.len() {
        let report = check_main_assumption(config, tr.z[k - 1]).unwrap();
        state = update(&state, tr.z[k], l, config).unwrap();
        let in_f = report.f_prime.is_some_and(|f| tr.z[k] > f.lo && tr.z[k] < f.hi);
        if report.pass() && in_f {
            checked += 1;
            assert!(cone_membership(&state.density, report.c.powi(4)));
        }
    }
    assert!(checked > 0);
}

#[test]
fn global_condition_arithmetic() {
    let (ok, eps_max) = global_noise_condition(0.002, 1.0, 1.0, 0.1, 0.2);
    assert!(ok);
    assert!((eps_max - 0.002).abs() < 1e-15);
    assert!(!global_noise_condition(0.0021, 1.0, 1.0, 0.1, 0.2).0);
}

#[test]
fn noiseless_observation_has_point_preimage() {
    let (config, _, _) = reference();
    let exact = config.with_observation(StateFn::Const(0.0), PsiKind::Uniform, 0.1).unwrap();
    let r = check_main_assumption(&exact, 0.4).unwrap();
    let j = r.j_z0.unwrap();
    assert_eq!((j.lo, j.hi), (0.4, 0.4));
    assert!(r.condition_a);
}

#[test]
fn reference_assumption_report_cross_checked() {
    let (config, _, _) = reference();
    let zs = passing_observations(config);
    assert!(!zs.is_empty());
    for &z in zs.iter().step_by(zs.len().div_ceil(5)) {
        let r = check_main_assumption(config, z).unwrap();
        assert!(r.c > 0.0 && r.lambda <= 1.0 && r.lambda == 1.0 - r.c.powi(8));
        let (j, tj) = (r.j_z0.unwrap(), r.t_of_j.unwrap());
        // Brute-force minimum of the kernel over J × T(J).
        let n = 400;
        let mut oracle = f64::INFINITY;
        for a in 0..=n {
            let x = j.lo + j.len() * a as f64 / n as f64;
            for b in 0..=n {
                let y = tj.lo + tj.len() * b as f64 / n as f64;
                oracle = oracle.min(eval_kernel_p(x, y, config).unwrap());
            }
        }
        assert!((r.kernel_min - oracle).abs() <= 1e-3 * oracle, "z = {z}: {} vs {oracle}", r.kernel_min);
        assert!(r.c <= r.kernel_min && r.c <= 1.0 / r.kernel_max);
    }
}

#[test]
fn identical_priors_never_separate() {
    let (config, l, w) = reference();
    let rep = stability_experiment(config, l, (w, w), 100, SeededStream::new(34, 0)).unwrap();
    assert!(rep.rows.iter().all(|r| r.theta0 == 0.0 && r.tv == 0.0));
}

#[test]
fn certificate_bound_holds_for_equivalent_priors() {
    let (config, l, w) = reference();
    let uniform = GridDensity::uniform(w.grid);
    let tilted = GridDensity::new(w.grid, w.grid.centers().iter().map(|x| 1.0 + 3.0 * x * x).collect()).unwrap();
    let rep = stability_experiment(config, l, (&uniform, &tilted), 300, SeededStream::new(35, 0)).unwrap();
    let theta_init = rep.rows[0].theta0;
    assert!(theta_init.is_finite() && theta_init > 0.0);
    let lambda = rep.certificate.lambda;
    let bound = lambda.powi(rep.certificate.event_count as i32) * theta_init;
    assert!(rep.rows.last().unwrap().theta0 <= bound);
    assert!(rep.rows.iter().all(|r| r.theta0 <= theta_init * (1.0 + 1e-12)));
    let csv = rep.to_csv("# run");
    assert_eq!(csv.lines().nth(1), Some("step,theta0,tv,event,bound"));
}

#[test]
fn prior_is_forgotten() {
    let (config, l, w) = reference();
    let uniform = GridDensity::uniform(w.grid);
    let rep = stability_experiment(config, l, (&uniform, w), 500, SeededStream::new(36, 0)).unwrap();
    assert!(rep.final_tv() < 0.01 * rep.initial_tv());
}

fn random_positive(grid: Grid, rng: &mut impl Rng) -> GridDensity {
    GridDensity::new(grid, (0..grid.n_cells).map(|_| rng.random_range(0.01..1.0)).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn hilbert_is_a_projective_pseudometric(seed in any::<u64>(), scale in 0.01f64..100.0) {
        let grid = Grid::new(Interval::new(0.0, 1.0), 16).unwrap();
        let mut rng = SeededStream::new(seed, 1).rng();
        let (f, g, h) = (random_positive(grid, &mut rng), random_positive(grid, &mut rng), random_positive(grid, &mut rng));
        let fg = hilbert_distance(&f, &g).unwrap();
        prop_assert!((fg - hilbert_distance(&g, &f).unwrap()).abs() <= 1e-12);
        let mut fs = f.clone();
        fs.weights.iter_mut().for_each(|v| *v *= scale);
        prop_assert!(hilbert_distance(&f, &fs).unwrap() <= 1e-12);
        let fh = hilbert_distance(&f, &h).unwrap();
        let hg = hilbert_distance(&h, &g).unwrap();
        prop_assert!(fg <= fh + hg + 1e-12);
    }

    #[test]
    fn filter_step_contracts_by_the_certificate(seed in any::<u64>(), pick in 0usize..1000) {
        let (config, l, _) = reference();
        let zs = passing_observations(config);
        let z = zs[pick % zs.len()];
        let mut rng = SeededStream::new(seed, 2).rng();
        let (f, g) = (random_positive(l.grid, &mut rng), random_positive(l.grid, &mut rng));
        let before = hilbert_distance(&f, &g).unwrap();
        let c = check_main_assumption(config, z).unwrap().c;
        let (fa, ga) = (FilterState::new(f), FilterState::new(g));
        let (Ok(f1), Ok(g1)) = (update(&fa, z, l, config), update(&ga, z, l, config)) else {
            return Ok(());
        };
        prop_assert!((f1.density.mass() - 1.0).abs() <= 1e-10);
        let after = hilbert_distance(&f1.density, &g1.density).unwrap();
        prop_assert!(after <= (1.0 - c.powi(8)) * before);
    }
}
