use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use log::{info, warn};
use pfnet::diffusion::{check_product_form, simulate_srbm, validate_heavy_traffic, HtOptions, SrbmOptions};
use pfnet::fluid::{check_lyapunov, convergence_metrics};
use pfnet::linalg::to_rows;
use pfnet::{
    integrate_fluid, simulate, solve_pf, verify_kkt, DVector, DiffusionParams, Error, FluidConfig, ManifoldGeometry, SimConfig,
};
use serde::Serialize;

use crate::io::{self, csv_line, parse_list, parse_vector, print_json, write_atomic, write_json};
use crate::{Command, DiffusionArgs, FluidArgs, SimulateArgs, ValidateHtArgs};

/// A check that ran but did not meet its tolerance.
#[derive(Debug)]
pub struct NumericFailure(pub String);

impl std::fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericFailure {}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Validate { net, out } => validate(&net, out.as_deref()),
        Command::Allocate { net, state, tol, out } => allocate(&net, &state, tol, out.as_deref()),
        Command::Fluid(args) => fluid(&args),
        Command::Manifold { net, check, dist, out } => manifold(&net, check, dist.as_deref(), out.as_deref()),
        Command::Simulate(args) => simulate_cmd(&args),
        Command::Diffusion(args) => diffusion(&args),
        Command::ValidateHt(args) => validate_ht(&args),
    }
}

fn emit<T: Serialize>(body: &T, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => write_json(p, body),
        None => print_json(body),
    }
}

fn validate(path: &Path, out: Option<&Path>) -> Result<()> {
    let report = io::read_spec(path)?.validate();
    io::say(&report.to_string())?;
    if let Some(p) = out {
        write_json(p, &report)?;
    }
    if !report.valid {
        return Err(Error::InvalidNetwork(report.violations()).into());
    }
    Ok(())
}

#[derive(Serialize)]
struct AllocateOut {
    state: Vec<f64>,
    gamma: Vec<f64>,
    eta: Vec<f64>,
    kkt_residual: f64,
    iterations: usize,
    kkt: pfnet::KktReport,
}

fn allocate(path: &Path, state: &str, tol: f64, out: Option<&Path>) -> Result<()> {
    let net = io::load_network(path)?;
    let n = parse_vector(state, net.n_routes(), "state")?;
    if n.iter().any(|&x| !(x >= 0.0)) {
        bail!(Error::InvalidArgument("state entries must be nonnegative".into()));
    }
    let al = solve_pf(&n, &net, tol)?;
    let kkt = verify_kkt(&n, &al.gamma, &al.eta, net.a(), net.c());
    let body = AllocateOut {
        state: n.iter().copied().collect(),
        gamma: al.gamma.iter().copied().collect(),
        eta: al.eta.iter().copied().collect(),
        kkt_residual: al.kkt_residual,
        iterations: al.iterations,
        kkt,
    };
    emit(&body, out)
}

#[derive(Serialize)]
struct FluidSummary {
    model: &'static str,
    steps: usize,
    step: f64,
    final_state: Vec<f64>,
    final_dist: Option<f64>,
    decay_rate: Option<f64>,
    nonregular_steps: usize,
    lyapunov_bound_fraction: f64,
}

fn fluid(args: &FluidArgs) -> Result<()> {
    let net = io::load_network(&args.net)?;
    let values = parse_list(&args.n0)?;
    let (mut cfg, n0, geom, model) = match &args.routing {
        Some(p) => {
            let routing = io::read_matrix(p)?;
            let cfg = FluidConfig::route_level(&net, Some(routing), args.horizon)?;
            let n0 = parse_vector(&args.n0, net.n_routes(), "n0")?;
            let geom = ManifoldGeometry::from_class_system(&cfg.sys);
            (cfg, n0, geom, "route")
        }
        None => {
            let cfg = FluidConfig::phase_level(&net, args.horizon)?;
            let n0 = if values.len() == net.n_routes() {
                let mut phase = DVector::zeros(net.n_phases());
                for (r, d) in net.dists().iter().enumerate() {
                    let range = net.phase_range(r);
                    phase.rows_mut(range.start, range.len()).copy_from(&(d.initial() * values[r]));
                }
                phase
            } else {
                parse_vector(&args.n0, net.n_phases(), "n0")?
            };
            (cfg, n0, ManifoldGeometry::build(&net), "phase")
        }
    };
    let geom = match geom {
        Ok(g) => Some(g),
        Err(e) => {
            warn!("no manifold distance ({e}); the dist column is NaN");
            None
        }
    };
    if let Some(h) = args.h {
        cfg = cfg.with_step(h);
    }
    cfg.record_every = args.every.max(1);
    let traj = integrate_fluid(&n0, &cfg)?;

    let routes = cfg.sys.n_routes;
    let aggregate = |v: &DVector<f64>| {
        let mut out = vec![0.0; routes];
        for (j, &r) in cfg.sys.route_of.iter().enumerate() {
            out[r] += v[j];
        }
        out
    };
    let mut csv = String::from("t");
    for prefix in ["n", "phi"] {
        for r in 1..=routes {
            write!(csv, ",{prefix}_{r}")?;
        }
    }
    csv.push_str(",dist,lyapunov\n");
    for i in 0..traj.times.len() {
        let dist = geom.as_ref().map_or(f64::NAN, |g| g.dist(&traj.w[i]));
        let row = std::iter::once(traj.times[i])
            .chain(aggregate(&traj.n[i]))
            .chain(aggregate(&traj.phi[i]))
            .chain([dist, traj.lyapunov[i]]);
        csv.push_str(&csv_line(row));
    }
    write_atomic(&args.out, csv.as_bytes())?;

    let conv = geom.as_ref().map(|g| convergence_metrics(&traj, g)).transpose()?;
    let summary = FluidSummary {
        model,
        steps: ((args.horizon / traj.step).round()) as usize,
        step: traj.step,
        final_state: aggregate(traj.last_state()),
        final_dist: conv.as_ref().and_then(|c| c.dist.last().copied()),
        decay_rate: conv.as_ref().map(|c| c.decay_rate),
        nonregular_steps: traj.nonregular_steps,
        lyapunov_bound_fraction: check_lyapunov(&traj, &cfg, 0.0).fraction(),
    };
    print_json(&summary)
}

#[derive(Serialize)]
struct ManifoldOut {
    #[serde(skip_serializing_if = "Option::is_none")]
    residuals: Option<pfnet::manifold::IdentityResiduals>,
    #[serde(skip_serializing_if = "Option::is_none")]
    distances: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pi: Option<Vec<Vec<f64>>>,
}

fn manifold(path: &Path, check: bool, dist: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let net = io::load_network(path)?;
    let geom = ManifoldGeometry::build(&net)?;
    let residuals = (check || dist.is_none()).then(|| geom.residuals());
    let (mut distances, mut pis) = (None, None);
    if let Some(p) = dist {
        let rows = io::read_csv_rows(p)?;
        let (mut d, mut pi) = (Vec::new(), Vec::new());
        for (i, row) in rows.iter().enumerate() {
            if row.len() != net.n_phases() {
                bail!(Error::Dimension(format!("{} row {}: {} entries for {} phases", p.display(), i + 1, row.len(), net.n_phases())));
            }
            let w = &geom.workload_map * DVector::from_column_slice(row);
            d.push(geom.dist(&w));
            pi.push(geom.decompose(&w).pi.iter().copied().collect());
        }
        distances = Some(d);
        pis = Some(pi);
    }
    emit(&ManifoldOut { residuals, distances, pi: pis }, out)?;
    if let Some(res) = residuals {
        if res.max() > 1e-9 || !(res.r_min_eigenvalue > 0.0) {
            bail!(NumericFailure(format!("manifold identities fail: max residual {:.3e}", res.max())));
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct StatsOut<'a> {
    seed: u64,
    horizon: f64,
    warmup: f64,
    k: Option<f64>,
    theta: Option<Vec<f64>>,
    lambda: Vec<f64>,
    mean_route: &'a [f64],
    ci_route: &'a [f64],
    var_route: &'a [f64],
    mean_phase: &'a [f64],
    throughput: &'a [f64],
    throughput_ci: &'a [f64],
    unused_capacity: &'a [f64],
    max_capacity_violation: f64,
    workload_identity_error: f64,
    events: u64,
    measured_time: f64,
}

fn simulate_cmd(args: &SimulateArgs) -> Result<()> {
    let net = io::load_network(&args.net)?;
    let mut cfg = match args.k {
        Some(k) => {
            let theta = match &args.theta {
                Some(t) => parse_vector(t, net.n_routes(), "theta")?,
                None => DVector::from_element(net.n_routes(), 1.0),
            };
            SimConfig::heavy_traffic(&net, k, &theta, args.horizon, args.seed)?
        }
        None => {
            if args.theta.is_some() {
                bail!(Error::InvalidArgument("--theta needs --k".into()));
            }
            SimConfig::new(net, args.horizon, args.seed)
        }
    };
    cfg.warmup = args.warmup;
    cfg.batches = args.batches;
    if let Some(init) = &args.initial {
        let counts = parse_list(init)?
            .into_iter()
            .map(|x| if x >= 0.0 && x.fract() == 0.0 { Ok(x as u64) } else { Err(Error::InvalidArgument(format!("initial count {x} is not a nonnegative integer"))) })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        cfg.initial = Some(counts);
    }
    if args.samples.is_some() {
        cfg.sample_interval = Some(args.sample_interval.unwrap_or(args.horizon / 1e4));
    }
    info!("simulating horizon {} with seed {}", cfg.horizon, cfg.seed);
    let res = simulate(&cfg)?;
    let body = StatsOut {
        seed: cfg.seed,
        horizon: cfg.horizon,
        warmup: cfg.warmup,
        k: cfg.k,
        theta: cfg.theta.as_ref().map(|t| t.iter().copied().collect()),
        lambda: cfg.net.lambda().iter().copied().collect(),
        mean_route: &res.mean_route,
        ci_route: &res.ci_route,
        var_route: &res.var_route,
        mean_phase: &res.mean_phase,
        throughput: &res.throughput,
        throughput_ci: &res.throughput_ci,
        unused_capacity: &res.unused_capacity,
        max_capacity_violation: res.max_capacity_violation,
        workload_identity_error: res.workload_identity_error,
        events: res.events,
        measured_time: res.measured_time,
    };
    write_json(&args.out, &body)?;
    if let Some(p) = &args.samples {
        let mut csv = String::from("t");
        for r in 1..=cfg.net.n_routes() {
            write!(csv, ",n_{r}")?;
        }
        csv.push('\n');
        for (t, n) in &res.samples {
            csv.push_str(&csv_line(std::iter::once(*t).chain(n.iter().map(|&x| x as f64))));
        }
        write_atomic(p, csv.as_bytes())?;
    }
    Ok(())
}

#[derive(Serialize)]
struct SrbmOut {
    samples: usize,
    means: Vec<f64>,
    correlation: Vec<Vec<f64>>,
    ks: Vec<f64>,
    ks_critical_1pct: f64,
}

#[derive(Serialize)]
struct DiffusionOut {
    r: Vec<Vec<f64>>,
    gamma: Vec<Vec<f64>>,
    /// `λ_r β^(2)_r` per route.
    d: Vec<f64>,
    theta_link: Option<Vec<f64>>,
    sigma: Option<Vec<f64>>,
    product_form: pfnet::diffusion::ProductFormCheck,
    product_form_holds: bool,
    srbm: Option<SrbmOut>,
}

fn diffusion(args: &DiffusionArgs) -> Result<()> {
    let net = io::load_network(&args.net)?;
    let mut params = DiffusionParams::new(&net)?;
    if let Some(t) = &args.theta_link {
        params = params.with_link_theta(&parse_vector(t, net.n_links(), "theta-link")?)?;
    }
    let check = check_product_form(&params);
    let srbm = if args.srbm {
        if params.theta_link.is_none() {
            bail!(Error::InvalidArgument("--srbm needs --theta-link".into()));
        }
        let opts = SrbmOptions { step: args.srbm_step, samples: args.srbm_samples, seed: args.seed, ..SrbmOptions::default() };
        let res = simulate_srbm(&params, &opts)?;
        Some(SrbmOut {
            samples: res.samples.len(),
            means: res.means.iter().copied().collect(),
            correlation: to_rows(&res.correlation),
            ks: res.ks.iter().copied().collect(),
            ks_critical_1pct: pfnet::stats::ks_critical_1pct(res.samples.len()),
        })
    } else {
        None
    };
    let holds = check.holds(1e-9);
    let body = DiffusionOut {
        r: to_rows(&params.r),
        gamma: to_rows(&params.gamma),
        d: params.d.iter().copied().collect(),
        theta_link: params.theta_link.as_ref().map(|t| t.iter().copied().collect()),
        sigma: params.sigma.as_ref().map(|s| s.iter().copied().collect()),
        product_form: check,
        product_form_holds: holds,
        srbm,
    };
    emit(&body, args.out.as_deref())?;
    if args.check_product_form && !holds {
        bail!(NumericFailure(format!(
            "product-form condition fails: skew residual {:.3e}, |Γ - 2R| {:.3e}",
            check.skew_symmetry, check.gamma_vs_2r
        )));
    }
    Ok(())
}

fn validate_ht(args: &ValidateHtArgs) -> Result<()> {
    let net = io::load_network(&args.net)?;
    let k_list = parse_list(&args.k).context("--k")?;
    let theta = parse_vector(&args.theta, net.n_routes(), "theta")?;
    let mut opts = HtOptions::new(k_list, theta, args.seeds);
    opts.first_seed = args.first_seed;
    opts.horizon_coeff = args.horizon_coeff;
    let report = validate_heavy_traffic(&net, &opts)?;
    for e in &report.entries {
        io::say(&format!("k = {}: max relative error {:.4}, collapse metric {:.4}", e.k, e.max_rel_error, e.ssc_metric))?;
    }
    write_json(&args.out, &report)
}
