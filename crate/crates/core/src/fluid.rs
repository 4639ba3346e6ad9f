//! Critical fluid model with Markovian routing and its entropy-like
//! Lyapunov function `L(n) = Σ n_r log(Φ_r(n)/ρ_r)`.

use log::debug;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::alloc::{extend_phi, solve_pf_raw, PfOptions};
use crate::error::{Error, Result};
use crate::manifold::ManifoldGeometry;
use crate::network::{ClassSystem, Network};
use crate::stats;

#[derive(Debug, Clone)]
pub struct FluidConfig {
    pub sys: ClassSystem,
    /// Euler step; `None` picks `1e-3 · max(1, |n0|) / min λ`.
    pub step: Option<f64>,
    pub horizon: f64,
    pub pf: PfOptions,
    /// Keep every `record_every`-th state.
    pub record_every: usize,
}

impl FluidConfig {
    pub fn new(sys: ClassSystem, horizon: f64) -> Self {
        FluidConfig { sys, step: None, horizon, pf: PfOptions::default(), record_every: 1 }
    }

    /// Route-level model with exponential service at rate `1/β_r` and
    /// routing `p` between routes (none if `None`).
    pub fn route_level(net: &Network, p: Option<DMatrix<f64>>, horizon: f64) -> Result<Self> {
        net.ensure_valid()?;
        let r = net.n_routes();
        let p = p.unwrap_or_else(|| DMatrix::zeros(r, r));
        let mu = net.beta().map(|b| 1.0 / b);
        Ok(Self::new(ClassSystem::general(net.a().clone(), net.c().clone(), net.lambda().clone(), mu, p)?, horizon))
    }

    /// Phase-level model: phases are the classes, routed by `P̃`.
    pub fn phase_level(net: &Network, horizon: f64) -> Result<Self> {
        net.ensure_valid()?;
        Ok(Self::new(net.class_system()?, horizon))
    }

    pub fn with_step(mut self, h: f64) -> Self {
        self.step = Some(h);
        self
    }

    pub fn default_step(&self, n0: &DVector<f64>) -> f64 {
        let min_lambda = self.sys.lambda.iter().copied().filter(|&x| x > 0.0).fold(f64::INFINITY, f64::min);
        1e-3 * n0.sum().max(1.0) / min_lambda
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct FluidTrajectory {
    pub times: Vec<f64>,
    pub n: Vec<DVector<f64>>,
    pub phi: Vec<DVector<f64>>,
    pub w: Vec<DVector<f64>>,
    pub y: Vec<DVector<f64>>,
    pub lyapunov: Vec<f64>,
    /// Derivative bound at each recorded state.
    pub bound: Vec<f64>,
    pub step: f64,
    /// Max over time of `|n(t) - n(0) - ∫ drift|`, i.e. mass added or
    /// removed by boundary clamping.
    pub max_defect: f64,
    /// Steps where the boundary extension violated capacity and the empty
    /// classes were given zero rate instead.
    pub nonregular_steps: usize,
}

impl FluidTrajectory {
    pub fn last_state(&self) -> &DVector<f64> {
        self.n.last().expect("trajectory has at least one state")
    }
}

/// Rates used by the integrator: the boundary extension where it is
/// feasible, zero on empty classes otherwise.
fn rates(n: &DVector<f64>, cfg: &FluidConfig) -> Result<(DVector<f64>, DVector<f64>, bool)> {
    let ext = extend_phi(n, &cfg.sys, &cfg.pf)?;
    if ext.regular {
        Ok((ext.phi, ext.alloc.gamma, true))
    } else {
        let gamma = ext.alloc.gamma;
        Ok((gamma.clone(), gamma, false))
    }
}

/// Forward-Euler integration of
/// `ṅ = λ - (I - Pᵀ) diag(μ) Φ(n)` with clamping at the boundary.
pub fn integrate_fluid(n0: &DVector<f64>, cfg: &FluidConfig) -> Result<FluidTrajectory> {
    let sys = &cfg.sys;
    let k = sys.n_classes();
    if n0.len() != k {
        return Err(Error::Dimension(format!("initial state has {} entries for {k} classes", n0.len())));
    }
    if n0.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::InvalidArgument("initial state must be finite and nonnegative".into()));
    }
    if !(cfg.horizon > 0.0) {
        return Err(Error::InvalidArgument("horizon must be positive".into()));
    }
    let h = cfg.step.unwrap_or_else(|| cfg.default_step(n0));
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidArgument(format!("invalid step {h}")));
    }
    let threshold = h * 1e-6 * n0.sum().max(1.0);
    let flow = (DMatrix::identity(k, k) - sys.routing.transpose()) * DMatrix::from_diagonal(&sys.mu);
    let steps = (cfg.horizon / h).round().max(1.0) as usize;
    let every = cfg.record_every.max(1);

    let mut traj = FluidTrajectory { step: h, ..Default::default() };
    let mut n = n0.clone();
    let mut y = DVector::zeros(sys.n_links());
    let mut integral = DVector::zeros(k);
    for i in 0..=steps {
        let (phi, gamma, regular) = rates(&n, cfg)?;
        if !regular {
            traj.nonregular_steps += 1;
        }
        if i % every == 0 || i == steps {
            traj.times.push(i as f64 * h);
            traj.w.push(sys.workload(&n));
            traj.lyapunov.push(lyapunov_value(&n, &gamma, &sys.rho));
            traj.bound.push(bound_value(&n, &gamma, &sys.rho, &sys.lambda));
            traj.n.push(n.clone());
            traj.phi.push(phi.clone());
            traj.y.push(y.clone());
        }
        if i == steps {
            break;
        }
        let drift = &sys.lambda - &flow * &phi;
        y += (&sys.c - &sys.a * &phi) * h;
        integral += &drift * h;
        n += &drift * h;
        for x in n.iter_mut() {
            if *x < threshold {
                *x = 0.0;
            }
        }
        if n.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("non-finite fluid state at t = {}", (i + 1) as f64 * h)));
        }
        traj.max_defect = traj.max_defect.max((&n - n0 - &integral).amax());
    }
    debug!("fluid: {steps} steps of {h:.3e}, {} non-regular", traj.nonregular_steps);
    Ok(traj)
}

fn lyapunov_value(n: &DVector<f64>, gamma: &DVector<f64>, rho: &DVector<f64>) -> f64 {
    (0..n.len()).filter(|&r| n[r] > 0.0).map(|r| n[r] * (gamma[r] / rho[r]).ln()).sum()
}

fn bound_value(n: &DVector<f64>, gamma: &DVector<f64>, rho: &DVector<f64>, lambda: &DVector<f64>) -> f64 {
    -(0..n.len())
        .filter(|&r| n[r] > 0.0)
        .map(|r| {
            let x = gamma[r] / rho[r];
            lambda[r] * (x - 1.0) * x.ln()
        })
        .sum::<f64>()
}

/// `L(n) = Σ_{n_r > 0} n_r log(Λ_r(n)/ρ_r)`.
pub fn lyapunov(n: &DVector<f64>, cfg: &FluidConfig) -> Result<f64> {
    let alloc = solve_pf_raw(&cfg.sys.a, &cfg.sys.c, n, &cfg.pf)?;
    Ok(lyapunov_value(n, &alloc.gamma, &cfg.sys.rho))
}

/// `-Σ_{n_r > 0} λ_r (Λ_r/ρ_r - 1) log(Λ_r/ρ_r)`, never positive.
pub fn lyapunov_derivative_bound(n: &DVector<f64>, cfg: &FluidConfig) -> Result<f64> {
    let alloc = solve_pf_raw(&cfg.sys.a, &cfg.sys.c, n, &cfg.pf)?;
    Ok(bound_value(n, &alloc.gamma, &cfg.sys.rho, &cfg.sys.lambda))
}

/// `|n| log(max c / min ρ)`, an upper bound on `L(n)`.
pub fn initial_lyapunov_bound(n: &DVector<f64>, cfg: &FluidConfig) -> f64 {
    let max_c = cfg.sys.c.max();
    let min_rho = cfg.sys.rho.iter().copied().filter(|&x| x > 0.0).fold(f64::INFINITY, f64::min);
    n.sum() * (max_c / min_rho).ln()
}

/// Computes `h = Σ_k P^k v` with `v_s = (e^{u_s} - 1)(u_s - (Pu)_s)` by
/// summing the Neumann series until a term drops below `1e-14`, and
/// whether `h_r >= u_r (e^{u_r} - 1) - 1e-10` for every `r`.
pub fn rearrangement_bound(u: &DVector<f64>, p: &DMatrix<f64>) -> Result<(DVector<f64>, bool)> {
    let h = rearrangement_series(u, p)?;
    let ok = (0..u.len()).all(|r| h[r] >= u[r] * u[r].exp_m1() - 1e-10);
    Ok((h, ok))
}

pub fn rearrangement_series(u: &DVector<f64>, p: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = u.len();
    if p.shape() != (n, n) {
        return Err(Error::Dimension(format!("P is {}x{}, u has {n} entries", p.nrows(), p.ncols())));
    }
    if n == 0 {
        return Ok(DVector::zeros(0));
    }
    let radius = p.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
    if !(radius < 1.0) {
        return Err(Error::InvalidArgument(format!("spectral radius {radius} is not below 1")));
    }
    let pu = p * u;
    let mut term = DVector::from_fn(n, |s, _| u[s].exp_m1() * (u[s] - pu[s]));
    let mut h = term.clone();
    for _ in 0..1_000_000 {
        if term.amax() < 1e-14 {
            break;
        }
        term = p * term;
        h += &term;
    }
    Ok(h)
}

/// Outcome of comparing finite-difference Lyapunov derivatives with the
/// analytic bounds along a trajectory.
#[derive(Debug, Clone, Serialize)]
pub struct LyapunovCheck {
    pub steps: usize,
    /// Steps with `Δf/Δt <= bound + slack`.
    pub within_bound: usize,
    pub max_excess: f64,
    /// Steps where `Δf/Δt > -δ Σ (Φ/ρ - 1)² + slack`.
    pub quadratic_failures: usize,
    /// `f(0) <= |n(0)| log(max c / min ρ)`.
    pub initial_bound_holds: bool,
}

impl LyapunovCheck {
    pub fn fraction(&self) -> f64 {
        if self.steps == 0 {
            1.0
        } else {
            self.within_bound as f64 / self.steps as f64
        }
    }
}

/// The slack at step `i` is `10 |bound(t_{i+1}) - bound(t_i)|`, i.e. ten
/// step lengths times a local Lipschitz estimate of the bound.
pub fn check_lyapunov(traj: &FluidTrajectory, cfg: &FluidConfig, delta: f64) -> LyapunovCheck {
    let rho = &cfg.sys.rho;
    let mut out = LyapunovCheck {
        steps: 0,
        within_bound: 0,
        max_excess: 0.0,
        quadratic_failures: 0,
        initial_bound_holds: traj.lyapunov.first().is_none_or(|&f0| f0 <= initial_lyapunov_bound(&traj.n[0], cfg) + 1e-12),
    };
    for i in 0..traj.times.len().saturating_sub(1) {
        let dt = traj.times[i + 1] - traj.times[i];
        let fd = (traj.lyapunov[i + 1] - traj.lyapunov[i]) / dt;
        let slack = 10.0 * (traj.bound[i + 1] - traj.bound[i]).abs() + 1e-12;
        let excess = fd - traj.bound[i];
        out.steps += 1;
        if excess <= slack {
            out.within_bound += 1;
        }
        out.max_excess = out.max_excess.max(excess);
        let n = &traj.n[i];
        let quad: f64 = (0..n.len()).filter(|&r| n[r] > 0.0).map(|r| (traj.phi[i][r] / rho[r] - 1.0).powi(2)).sum();
        if fd > -delta * quad + slack {
            out.quadratic_failures += 1;
        }
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceReport {
    pub dist: Vec<f64>,
    /// Least-squares slope of `-log |n(t) - n(T)|` over the window where the
    /// error lies between `1e-5` and `1e-1` of its maximum.
    pub decay_rate: f64,
    /// `(ε, T_ε)` with `T_ε = inf{t : |n(s) - n(T)| < ε for all s >= t}`.
    pub settle_times: Vec<(f64, f64)>,
}

pub fn convergence_metrics(traj: &FluidTrajectory, geom: &ManifoldGeometry) -> Result<ConvergenceReport> {
    if traj.w.first().is_some_and(|w| w.len() != geom.n_phases()) {
        return Err(Error::Dimension("trajectory and geometry have different dimensions".into()));
    }
    let dist: Vec<f64> = traj.w.iter().map(|w| geom.dist(w)).collect();
    let end = traj.last_state();
    let err: Vec<f64> = traj.n.iter().map(|n| (n - end).norm()).collect();
    let emax = err.iter().copied().fold(0.0, f64::max);
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    if emax > 0.0 {
        for (t, e) in traj.times.iter().zip(&err) {
            if *e <= 1e-1 * emax && *e >= 1e-5 * emax {
                xs.push(*t);
                ys.push(-e.ln());
            }
        }
    }
    let decay_rate = if xs.len() >= 2 { stats::slope(&xs, &ys) } else { 0.0 };
    let settle_times = [1e-1, 1e-2, 1e-3]
        .iter()
        .map(|&eps| {
            let last_bad = err.iter().rposition(|&e| e >= eps);
            let t = match last_bad {
                None => 0.0,
                Some(i) if i + 1 < traj.times.len() => traj.times[i + 1],
                Some(_) => f64::INFINITY,
            };
            (eps, t)
        })
        .collect();
    Ok(ConvergenceReport { dist, decay_rate, settle_times })
}
