use clap::Args;

use heterodyn::evt::{
    block_maxima, gev_fit, gumbel_check, modulation_detect, observable_phi, repp_laplace_check, stationary_mode,
    visit_count_check, EnsembleSetup, ReppSpec,
};
use heterodyn::filter::stability_experiment;
use heterodyn::operator::{correlation, decay_rate};
use heterodyn::stats::{clt_check, concentration_check, ld_rate, reference_measures};
use heterodyn::{
    build_ulam, simulate as run_simulation, stationary_density, validate_config, Error, GridDensity, InitialState,
    ModelConfig, SeededStream,
};

use crate::output::{header, run_hash, Writer};
use crate::{Common, RunError};

type Outcome = Result<(), RunError>;

pub struct Context {
    pub config: ModelConfig,
    pub model_text: String,
    pub common: Common,
}

impl Context {
    pub fn load(common: &Common) -> Result<Self, RunError> {
        let config = ModelConfig::from_file(&common.config).map_err(|e| match e {
            Error::Io(io) => Error::InvalidConfig(format!("cannot read {}: {io}", common.config.display())),
            other => other,
        })?;
        Ok(Context {
            model_text: config.to_config_string(),
            config,
            common: common.clone(),
        })
    }

    fn writer(&self, command: &str, params: &[(&str, String)]) -> Result<Writer, RunError> {
        let hash = run_hash(&self.model_text, command, params);
        Ok(Writer::new(&self.common.out, header(&hash, self.common.seed), self.common.plot_data)?)
    }

    fn stream(&self) -> SeededStream {
        SeededStream::new(self.common.seed, 0)
    }

    /// Experiments need a valid latent chain; a failed observation-noise check
    /// only earns a warning since the extreme-value configs exceed it on purpose.
    fn require_dynamics(&self) -> Outcome {
        let report = validate_config(&self.config);
        if !report.dynamics_valid() {
            let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
            return Err(Error::InvalidConfig(format!("failed checks: {}", failed.join(", "))).into());
        }
        for c in report.checks.iter().filter(|c| !c.passed) {
            eprintln!("warning: check {} failed: {}", c.name, c.detail);
        }
        Ok(())
    }
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>, RunError> {
    text.split(',')
        .map(|v| v.trim().parse::<T>().map_err(|_| RunError::Usage(format!("bad {what} entry `{v}`"))))
        .collect()
}

pub fn validate(ctx: &Context) -> Outcome {
    let report = validate_config(&ctx.config);
    let w = ctx.writer("validate", &[])?;
    let mut body = String::from("check,passed,detail\n");
    for c in &report.checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        body.push_str(&format!("{},{},\"{}\"\n", c.name, c.passed as u8, c.detail.replace('"', "'")));
    }
    w.write("validate.csv", &body)?;
    if report.is_valid() {
        Ok(())
    } else {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name).collect();
        Err(Error::InvalidConfig(format!("failed checks: {}", failed.join(", "))).into())
    }
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Number of recorded steps.
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    /// Start at this state instead of after a burn-in from the critical point.
    #[arg(long)]
    pub x0: Option<f64>,
}

pub fn simulate(ctx: &Context, a: &SimulateArgs) -> Outcome {
    if a.n == 0 {
        return Err(Error::InvalidArgument("n must be ≥ 1".into()).into());
    }
    ctx.require_dynamics()?;
    let start = a.x0.map_or(InitialState::BurnIn, InitialState::Point);
    let tr = run_simulation(&ctx.config, a.n, &start, ctx.stream())?;
    let w = ctx.writer("simulate", &[("n", a.n.to_string()), ("x0", format!("{:?}", a.x0))])?;
    w.write("trajectory.csv", &tr.to_csv())?;
    w.plot("trajectory", ("t", "z"), tr.z.iter().enumerate().map(|(t, &z)| (t as f64, z)))?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct StationaryArgs {
    #[arg(long, default_value_t = 1024)]
    pub cells: usize,
    /// Lags of the correlation of `x` with itself.
    #[arg(long, default_value_t = 40)]
    pub t_max: usize,
}

pub fn stationary(ctx: &Context, a: &StationaryArgs) -> Outcome {
    ctx.require_dynamics()?;
    let l = build_ulam(&ctx.config, a.cells)?;
    let rep = stationary_density(&l)?;
    let w = ctx.writer("stationary", &[("cells", a.cells.to_string()), ("t_max", a.t_max.to_string())])?;
    let d = &rep.leading_density;
    w.write_raw("stationary.csv", &d.to_csv(&w.header))?;
    let x = d.grid.centers();
    let c = correlation(&x, &x, &l, d, a.t_max)?;
    let mut corr = String::from("t,correlation\n");
    for (t, v) in c.iter().enumerate() {
        corr.push_str(&format!("{t},{v:e}\n"));
    }
    w.write("correlation.csv", &corr)?;
    let mut spec = String::from("quantity,value\n");
    spec.push_str(&format!("leading_re,{:e}\n", rep.leading_eigenvalue.re));
    spec.push_str(&format!("leading_im,{:e}\n", rep.leading_eigenvalue.im));
    spec.push_str(&format!("second_modulus,{:e}\n", rep.second_modulus));
    spec.push_str(&format!("log_second_modulus,{:e}\n", rep.second_modulus.ln()));
    if let Ok(rate) = decay_rate(&c, 1, a.t_max) {
        spec.push_str(&format!("correlation_decay_rate,{rate:e}\n"));
    }
    spec.push_str(&format!("iterations,{}\n", rep.iterations));
    spec.push_str(&format!("residual,{:e}\n", rep.residual));
    w.write("spectral.csv", &spec)?;
    w.plot("stationary", ("x", "density"), x.iter().copied().zip(d.weights.iter().copied()))?;
    w.plot("correlation", ("t", "correlation"), c.iter().enumerate().map(|(t, &v)| (t as f64, v)))?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct FilterArgs {
    #[arg(long, default_value_t = 512)]
    pub cells: usize,
    /// Filtering steps.
    #[arg(long, default_value_t = 500)]
    pub n: usize,
}

pub fn filter(ctx: &Context, a: &FilterArgs) -> Outcome {
    ctx.require_dynamics()?;
    if a.n == 0 {
        return Err(Error::InvalidArgument("n must be ≥ 1".into()).into());
    }
    let l = build_ulam(&ctx.config, a.cells)?;
    let grid = l.grid;
    // Two priors of full support, so the Hilbert distance starts finite.
    let flat = GridDensity::uniform(grid);
    let tilted = GridDensity::new(grid, grid.centers().iter().map(|x| 1.0 + 3.0 * x * x).collect())?;
    let rep = stability_experiment(&ctx.config, &l, (&flat, &tilted), a.n, ctx.stream())?;
    let w = ctx.writer("filter", &[("cells", a.cells.to_string()), ("n", a.n.to_string())])?;
    w.write_raw("stability.csv", &rep.to_csv(&w.header))?;
    println!(
        "tv {:.3e} -> {:.3e}; events {}; lambda {:e}",
        rep.initial_tv(),
        rep.final_tv(),
        rep.certificate.event_count,
        rep.certificate.lambda
    );
    w.plot("theta", ("step", "theta0"), rep.rows.iter().map(|r| (r.step as f64, r.theta0)))?;
    w.plot("tv", ("step", "tv"), rep.rows.iter().map(|r| (r.step as f64, r.tv)))?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[arg(long, default_value_t = 256)]
    pub cells: usize,
    /// Trajectory lengths for the concentration check.
    #[arg(long, default_value = "1000,10000")]
    pub n_list: String,
    #[arg(long, default_value_t = 50)]
    pub replicas: usize,
    /// Length of each sum in the CLT and large-deviation checks.
    #[arg(long, default_value_t = 2000)]
    pub sum_n: usize,
    #[arg(long, default_value_t = 500)]
    pub sum_replicas: usize,
    #[arg(long, default_value = "0,0.002,0.004,0.006")]
    pub eps_list: String,
}

pub fn stats(ctx: &Context, a: &StatsArgs) -> Outcome {
    ctx.require_dynamics()?;
    let n_list: Vec<usize> = parse_list(&a.n_list, "n")?;
    let eps: Vec<f64> = parse_list(&a.eps_list, "eps")?;
    let params = [
        ("cells", a.cells.to_string()),
        ("n_list", a.n_list.clone()),
        ("replicas", a.replicas.to_string()),
        ("sum_n", a.sum_n.to_string()),
        ("sum_replicas", a.sum_replicas.to_string()),
        ("eps_list", a.eps_list.clone()),
    ];
    let w = ctx.writer("stats", &params)?;
    let root = ctx.stream();
    let conc = concentration_check(&ctx.config, &n_list, a.replicas, root.child(0), a.cells)?;
    w.write_raw("concentration.csv", &conc.to_csv(&w.header))?;
    let u = |x: f64| x;
    let clt = clt_check(&ctx.config, &u, a.sum_n, a.sum_replicas, root.child(1), a.cells)?;
    w.write_raw("clt.csv", &clt.to_csv(&w.header))?;
    let ld = ld_rate(&ctx.config, &u, &eps, a.sum_n, a.sum_replicas, root.child(2), a.cells)?;
    w.write_raw("ld.csv", &ld.to_csv(&w.header))?;
    println!(
        "kappa slope {:.3}; sigma2 {:.4e} (series) {:.4e} (replicas); KS p {:.3}",
        conc.slope, clt.sigma2_series, clt.sigma2_batch, clt.ks_pvalue
    );
    w.plot("concentration", ("n", "mean_kappa"), conc.rows.iter().map(|r| (r.n as f64, r.mean)))?;
    w.plot("ld_rate", ("eps", "rate"), ld.rows.iter().map(|r| (r.eps, r.rate)))?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvtArgs {
    #[arg(long, default_value_t = 512)]
    pub cells: usize,
    /// Time horizon `t` of the threshold scaling.
    #[arg(long, default_value_t = 1000)]
    pub t: usize,
    #[arg(long, default_value_t = 1000)]
    pub replicas: usize,
    #[arg(long, default_value = "0.5,1,2")]
    pub tau_list: String,
    /// Intensity for the visit-count and point-process checks.
    #[arg(long, default_value_t = 1.0)]
    pub tau: f64,
    /// Ball center; the stationary mode by default.
    #[arg(long)]
    pub center: Option<f64>,
    #[arg(long, default_value_t = 20)]
    pub k_max: usize,
    /// Number of block maxima for the GEV fit.
    #[arg(long, default_value_t = 500)]
    pub blocks: usize,
}

pub fn evt(ctx: &Context, a: &EvtArgs) -> Outcome {
    ctx.require_dynamics()?;
    let taus: Vec<f64> = parse_list(&a.tau_list, "tau")?;
    let params = [
        ("cells", a.cells.to_string()),
        ("t", a.t.to_string()),
        ("replicas", a.replicas.to_string()),
        ("tau_list", a.tau_list.clone()),
        ("tau", format!("{:?}", a.tau)),
        ("center", format!("{:?}", a.center)),
        ("k_max", a.k_max.to_string()),
        ("blocks", a.blocks.to_string()),
    ];
    let w = ctx.writer("evt", &params)?;
    let setup = EnsembleSetup {
        center: a.center,
        n_cells: a.cells,
        k_max: a.k_max,
    };
    let root = ctx.stream();
    let gumbel = gumbel_check(&ctx.config, &taus, a.t, a.replicas, root.child(0), setup)?;
    w.write_raw("gumbel.csv", &gumbel.to_csv(&w.header))?;
    let poisson = visit_count_check(&ctx.config, a.tau, a.t, a.replicas, root.child(1), setup)?;
    w.write_raw("poisson.csv", &poisson.to_csv(&w.header))?;
    let spec = ReppSpec::new(vec![(0.0, 1.0), (1.0, 2.0)], a.tau)?;
    let ys = [vec![0.0, 0.0], vec![2f64.ln(), 0.0], vec![0.5, 1.0]];
    let repp = repp_laplace_check(&ctx.config, &spec, &ys, a.t, a.replicas, root.child(2), setup)?;
    w.write_raw("repp.csv", &repp.to_csv(&w.header))?;

    let (_, stat, _) = reference_measures(&ctx.config, a.cells)?;
    let center = a.center.unwrap_or_else(|| stationary_mode(&stat));
    let tr = run_simulation(&ctx.config, a.blocks * a.t, &InitialState::Stationary(stat), root.child(3))?;
    let y: Vec<f64> = tr.z.iter().map(|&z| observable_phi(z, center)).collect();
    let (maxima, _) = block_maxima(&y, a.blocks)?;
    let fit = gev_fit(&maxima)?;
    let mut body = String::from("parameter,estimate,ci_lo,ci_hi\n");
    for (k, (name, v)) in [("xi", fit.xi), ("kappa", fit.kappa), ("sigma", fit.sigma)].iter().enumerate() {
        body.push_str(&format!("{name},{v:e},{:e},{:e}\n", fit.ci_95[k].0, fit.ci_95[k].1));
    }
    body.push_str(&format!("# neg_log_likelihood={:e} log_t={:e}\n", fit.neg_log_likelihood, (a.t as f64).ln()));
    w.write("gev.csv", &body)?;
    println!("chi2 p {:.3}; mean visits {:.4}; GEV xi {:.3}", poisson.p_value, poisson.mean, fit.xi);
    w.plot("gumbel", ("tau", "W_hat"), gumbel.rows.iter().map(|r| (r.tau, r.w_hat)))?;
    w.plot(
        "visits",
        ("k", "frequency"),
        poisson
            .observed
            .iter()
            .enumerate()
            .map(|(k, &o)| (k as f64, o / a.replicas as f64)),
    )?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct DetectArgs {
    #[arg(long, default_value_t = 512)]
    pub cells: usize,
    /// Point `y` of the observable `-log|z - y|`; the stationary mode by default.
    #[arg(long)]
    pub center: Option<f64>,
    /// Block length.
    #[arg(long, default_value_t = 1000)]
    pub t: usize,
    /// Block counts; each gives a run of `K = m·t` steps.
    #[arg(long, default_value = "100,300,1000")]
    pub m_list: String,
}

pub fn detect_s(ctx: &Context, a: &DetectArgs) -> Outcome {
    ctx.require_dynamics()?;
    let m_list: Vec<usize> = parse_list(&a.m_list, "m")?;
    let center = match a.center {
        Some(c) => c,
        None => stationary_mode(&reference_measures(&ctx.config, a.cells)?.1),
    };
    let params = [
        ("cells", a.cells.to_string()),
        ("center", format!("{center:?}")),
        ("t", a.t.to_string()),
        ("m_list", a.m_list.clone()),
    ];
    let w = ctx.writer("detect-s", &params)?;
    let rep = modulation_detect(&ctx.config, center, a.t, &m_list, ctx.stream(), a.cells)?;
    w.write_raw("modulation.csv", &rep.to_csv(&w.header))?;
    for r in &rep.rows {
        println!(
            "K {}: kappa - log t = {:.4}, log target = {:.4}",
            r.k,
            r.excess(),
            r.target_integral.ln()
        );
    }
    w.plot("modulation", ("K", "kappa_minus_log_t"), rep.rows.iter().map(|r| (r.k as f64, r.excess())))?;
    Ok(())
}
