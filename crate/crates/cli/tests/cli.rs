use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run(args: &[&str], config_name: &str, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_heterodyn"))
        .args(args)
        .arg("--config")
        .arg(config(config_name))
        .arg("--out")
        .arg(out)
        .env_remove("HETERODYN_THREADS")
        .output()
        .unwrap()
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

/// Every field that is not a column name parses as a finite number, except
/// free-text detail cells.
fn assert_numeric_fields_finite(path: &Path) {
    let text = fs::read_to_string(path).unwrap();
    for line in text.lines().filter(|l| !l.starts_with('#')) {
        for field in line.split([',', ' ']) {
            let lower = field.trim().to_ascii_lowercase();
            assert!(
                !matches!(lower.as_str(), "nan" | "inf" | "-inf" | "+inf"),
                "{}: non-finite field in `{line}`",
                path.display()
            );
        }
    }
}

const SMALL_RUNS: &[&[&str]] = &[
    &["validate"],
    &["simulate", "--n", "500"],
    &["stationary", "--cells", "256"],
    &["filter", "--cells", "256", "--n", "100"],
    &["stats", "--cells", "128", "--n-list", "500,2000", "--replicas", "20", "--sum-n", "500", "--sum-replicas", "100"],
    &["evt", "--cells", "256", "--t", "300", "--replicas", "200", "--blocks", "60"],
    &["detect-s", "--cells", "256", "--t", "300", "--m-list", "60,120"],
];

#[test]
fn reference_config_validates() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["validate"], "reference.conf", dir.path());
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 7);
    assert!(stdout.lines().all(|l| l.starts_with("PASS ")));
}

#[test]
fn outputs_carry_header_and_finite_numbers() {
    let dir = tempfile::tempdir().unwrap();
    for args in SMALL_RUNS {
        let mut with_plots = args.to_vec();
        with_plots.extend(["--plot-data", "--seed", "5"]);
        let out = run(&with_plots, "reference.conf", dir.path());
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let paths = files(dir.path());
    for name in [
        "validate.csv",
        "trajectory.csv",
        "stationary.csv",
        "spectral.csv",
        "stability.csv",
        "concentration.csv",
        "clt.csv",
        "ld.csv",
        "gumbel.csv",
        "poisson.csv",
        "repp.csv",
        "gev.csv",
        "modulation.csv",
        "plot_trajectory.dat",
        "plot_gumbel.dat",
    ] {
        assert!(paths.iter().any(|p| p.ends_with(name)), "missing {name}");
    }
    for p in &paths {
        let text = fs::read_to_string(p).unwrap();
        let first = text.lines().next().unwrap();
        assert!(
            first.starts_with(&format!("# heterodyn {} config_hash=", env!("CARGO_PKG_VERSION"))) && first.ends_with(" seed=5"),
            "{}: {first}",
            p.display()
        );
        assert_numeric_fields_finite(p);
    }
    let plot = fs::read_to_string(dir.path().join("plot_trajectory.dat")).unwrap();
    assert!(plot.lines().skip(2).all(|l| l.split(' ').count() == 2));
}

#[test]
fn identical_runs_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for args in SMALL_RUNS {
        assert!(run(args, "reference.conf", a.path()).status.success());
    }
    // The second pass uses a different thread count.
    for args in SMALL_RUNS {
        let mut threaded = args.to_vec();
        threaded.extend(["--threads", "3"]);
        assert!(run(&threaded, "reference.conf", b.path()).status.success());
    }
    let (fa, fb) = (files(a.path()), files(b.path()));
    assert_eq!(fa.len(), fb.len());
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap(), "{}", x.display());
    }
}

#[test]
fn seeds_change_the_output() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let args = ["simulate", "--n", "100"];
    run(&[&args[..], &["--seed", "1"]].concat(), "reference.conf", a.path());
    run(&[&args[..], &["--seed", "2"]].concat(), "reference.conf", b.path());
    let read = |d: &Path| fs::read_to_string(d.join("trajectory.csv")).unwrap();
    assert_ne!(read(a.path()), read(b.path()));
}

#[test]
fn zero_length_simulation_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["simulate", "--n", "0"], "reference.conf", dir.path());
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.starts_with("error kind=invalid_argument"), "{stderr}");
    assert!(stderr.contains("n must be ≥ 1"));
}

#[test]
fn bad_config_files_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.conf");
    fs::write(&bad, "gamma0 = 15.969\nbogus_key = 1\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_heterodyn"))
        .args(["validate", "--config"])
        .arg(&bad)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error kind=parse"));

    let wide = run(&["validate"], "unit_modulation.conf", dir.path());
    assert_eq!(wide.status.code(), Some(1));
    assert!(String::from_utf8(wide.stdout).unwrap().contains("FAIL observation_noise_bound"));
}

#[test]
fn usage_errors_exit_one() {
    let out = Command::new(env!("CARGO_BIN_EXE_heterodyn")).arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let help = Command::new(env!("CARGO_BIN_EXE_heterodyn")).arg("--help").output().unwrap();
    assert_eq!(help.status.code(), Some(0));
}

#[test]
fn statistical_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    // τ/t above one: no ball reaches that measure.
    let out = run(&["evt", "--cells", "128", "--t", "1", "--tau-list", "5"], "reference.conf", dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error kind=no_solution"));
    // The concentration check needs a constant modulation.
    let out = run(&["stats", "--cells", "128"], "affine_modulation.conf", dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().contains("kind=assumption_violation"));
}

#[test]
fn thread_count_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_heterodyn"))
        .args(["simulate", "--n", "10", "--config"])
        .arg(config("reference.conf"))
        .arg("--out")
        .arg(dir.path())
        .env("HETERODYN_THREADS", "2")
        .output()
        .unwrap();
    assert!(out.status.success());
    let zero = Command::new(env!("CARGO_BIN_EXE_heterodyn"))
        .args(["simulate", "--n", "10", "--config"])
        .arg(config("reference.conf"))
        .arg("--out")
        .arg(dir.path())
        .env("HETERODYN_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(zero.status.code(), Some(1));
}

#[test]
fn modulation_detector_on_half_modulation() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &["detect-s", "--center", "0.51", "--t", "1000", "--m-list", "1000"],
        "half_modulation.conf",
        dir.path(),
    );
    assert!(out.status.success());
    let text = fs::read_to_string(dir.path().join("modulation.csv")).unwrap();
    let row: Vec<f64> = text.lines().nth(2).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    let (kappa, log_t, target) = (row[2], row[5], row[6]);
    assert!((target - 2.0).abs() < 1e-9);
    assert!((kappa - log_t - 2f64.ln()).abs() < 0.1, "{}", kappa - log_t);
}
