//! Heavy-traffic diffusion parameters, the product-form condition, the
//! reflected Brownian motion of the limit, and validation of the
//! product-form approximation `N ≈ diag(ρ) Aᵀ E_s` against simulation.

use log::info;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;
use crate::manifold::{lcp_pgs, ManifoldGeometry, LCP_MAX_ITER, LCP_TOL};
use crate::network::Network;
use crate::phase::PhaseTypeDist;
use crate::sim::{simulate, ScaledPath, SimConfig};
use crate::stats;

#[derive(Debug, Clone, Serialize)]
pub struct DiffusionParams {
    /// Route-level drift target `θ` and its phase-level image `θ̃`.
    pub theta_route: Option<DVector<f64>>,
    pub theta_phase: Option<DVector<f64>>,
    /// Link-level drift `θ` used for the stationary analysis.
    pub theta_link: Option<DVector<f64>>,
    pub sigma_x: DMatrix<f64>,
    pub sigma_u: DMatrix<f64>,
    pub r: DMatrix<f64>,
    /// `RÃΣ_XÃᵀR`, the covariance of the driving term of `W_G = Gᵀ W`.
    pub gamma: DMatrix<f64>,
    /// `diag(λ β^(2))`, as a vector.
    pub d: DVector<f64>,
    /// Product-form rates, if a link drift is set.
    pub sigma: Option<DVector<f64>>,
}

impl DiffusionParams {
    pub fn new(net: &Network) -> Result<Self> {
        let geom = ManifoldGeometry::build(net)?;
        Self::with_geometry(net, &geom)
    }

    pub fn with_geometry(net: &Network, geom: &ManifoldGeometry) -> Result<Self> {
        let (sigma_x, sigma_u) = covariance_free_process(net)?;
        let r = geom.r.clone();
        let ga = &r * &geom.a_phase;
        let gamma = &ga * &sigma_x * ga.transpose();
        let gamma = (&gamma + gamma.transpose()) * 0.5;
        let d = net.lambda().component_mul(net.beta2());
        Ok(DiffusionParams {
            theta_route: None,
            theta_phase: None,
            theta_link: None,
            sigma_x,
            sigma_u,
            r,
            gamma,
            d,
            sigma: None,
        })
    }

    /// Sets the route drift; the link drift becomes `Aθ`.
    pub fn with_route_theta(mut self, net: &Network, theta: &DVector<f64>) -> Result<Self> {
        if theta.len() != net.n_routes() {
            return Err(Error::Dimension(format!("θ has {} entries for {} routes", theta.len(), net.n_routes())));
        }
        let rho = net.rho();
        let mut phase = net.rho_phase();
        for r in 0..net.n_routes() {
            for j in net.phase_range(r) {
                phase[j] *= theta[r] / rho[r];
            }
        }
        self.theta_route = Some(theta.clone());
        self.theta_phase = Some(phase);
        self.with_link_theta(&(net.a() * theta))
    }

    pub fn with_link_theta(mut self, theta: &DVector<f64>) -> Result<Self> {
        self.sigma = Some(product_form_rates(&self, theta)?);
        self.theta_link = Some(theta.clone());
        Ok(self)
    }
}

/// Per-route blocks of `Σ_U` and `Σ_X`, assembled block-diagonally.
pub fn covariance_free_process(net: &Network) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    net.ensure_valid()?;
    let k = net.n_phases();
    let mut sx = DMatrix::zeros(k, k);
    let mut su = DMatrix::zeros(k, k);
    for (r, dist) in net.dists().iter().enumerate() {
        let (bx, bu) = route_covariance(dist, net.lambda()[r]);
        let s = net.phase_offsets()[r];
        let f = dist.phases();
        sx.view_mut((s, s), (f, f)).copy_from(&bx);
        su.view_mut((s, s), (f, f)).copy_from(&bu);
    }
    Ok((sx, su))
}

fn route_covariance(d: &PhaseTypeDist, lambda: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let f = d.phases();
    let p = d.transitions();
    // ρ ∘ μ: phase throughputs.
    let flow = d.visits_transposed() * d.initial() * lambda;
    let pt = p.transpose();
    let diag_term = (DMatrix::identity(f, f) + &pt) * &flow;
    let df = DMatrix::from_diagonal(&flow);
    let su = DMatrix::from_diagonal(&diag_term) - &pt * &df - &df * p;
    let inner = DMatrix::from_diagonal(&(d.initial() * lambda)) + &su;
    let left = DMatrix::from_diagonal(&d.phase_means()) * d.visits_transposed();
    let sx = &left * inner * left.transpose();
    ((&sx + sx.transpose()) * 0.5, su)
}

/// `(ÃBÃᵀ)⁻¹`, checked against `2 (A diag(λβ^(2)) Aᵀ)⁻¹`.
pub fn reflection_matrix(net: &Network, geom: &ManifoldGeometry) -> Result<DMatrix<f64>> {
    let d = net.lambda().component_mul(net.beta2());
    let add = net.a() * DMatrix::from_diagonal(&d) * net.a().transpose();
    let closed = linalg::inverse(&add, "A diag(λβ^(2)) Aᵀ")? * 2.0;
    let dev = linalg::norm_max(&(&geom.r - &closed));
    if dev > 1e-9 * linalg::norm_max(&closed).max(1.0) {
        return Err(Error::Consistency {
            what: "reflection matrix against its closed form".into(),
            deviation: dev,
            left: linalg::to_rows(&geom.r),
            right: linalg::to_rows(&closed),
        });
    }
    Ok(geom.r.clone())
}

/// `R A diag(d) Aᵀ R`.
pub fn gamma_from_moments(r: &DMatrix<f64>, a: &DMatrix<f64>, d: &DVector<f64>) -> DMatrix<f64> {
    r * a * DMatrix::from_diagonal(d) * a.transpose() * r
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct ProductFormCheck {
    /// `‖2Γ - R R_d⁻¹ Γ_d - Γ_d R_d⁻¹ Rᵀ‖_max / ‖Γ‖_max`
    pub skew_symmetry: f64,
    /// `‖Γ - 2R‖_max / ‖Γ‖_max`
    pub gamma_vs_2r: f64,
}

impl ProductFormCheck {
    pub fn holds(&self, tol: f64) -> bool {
        self.skew_symmetry <= tol && self.gamma_vs_2r <= tol
    }
}

pub fn check_product_form(params: &DiffusionParams) -> ProductFormCheck {
    product_form_residuals(&params.r, &params.gamma)
}

pub fn product_form_residuals(r: &DMatrix<f64>, gamma: &DMatrix<f64>) -> ProductFormCheck {
    let l = r.nrows();
    let rd_inv = DMatrix::from_fn(l, l, |i, j| if i == j { 1.0 / r[(i, i)] } else { 0.0 });
    let gd = DMatrix::from_fn(l, l, |i, j| if i == j { gamma[(i, i)] } else { 0.0 });
    let skew = gamma * 2.0 - r * &rd_inv * &gd - &gd * &rd_inv * r.transpose();
    let scale = linalg::norm_max(gamma).max(f64::MIN_POSITIVE);
    ProductFormCheck {
        skew_symmetry: linalg::norm_max(&skew) / scale,
        gamma_vs_2r: linalg::norm_max(&(gamma - r * 2.0)) / scale,
    }
}

/// `σ = 2 Γ_d⁻¹ R_d θ`, which equals `θ` when `Γ = 2R`.
pub fn product_form_rates(params: &DiffusionParams, theta_link: &DVector<f64>) -> Result<DVector<f64>> {
    let l = params.r.nrows();
    if theta_link.len() != l {
        return Err(Error::Dimension(format!("θ has {} entries for {l} links", theta_link.len())));
    }
    if theta_link.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::InvalidArgument("link drift θ must be positive".into()));
    }
    Ok(DVector::from_fn(l, |i, _| 2.0 * params.r[(i, i)] * theta_link[i] / params.gamma[(i, i)]))
}

/// The approximation `N = diag(ρ) Aᵀ E` with independent `E_l ~ Exp(s_l)`.
#[derive(Debug, Clone, Serialize)]
pub struct ProductFormApprox {
    pub slack: DVector<f64>,
    pub mean: DVector<f64>,
    pub variance: DVector<f64>,
    pub samples: Vec<DVector<f64>>,
}

/// Analytic moments of the approximation for a subcritical network.
pub fn approx_moments(net: &Network) -> Result<(DVector<f64>, DVector<f64>, DVector<f64>)> {
    let slack = net.c() - net.a() * net.rho();
    if slack.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::InvalidArgument(format!("every link needs positive slack, got {:?}", slack.as_slice())));
    }
    let (l, r) = net.a().shape();
    let rho = net.rho();
    let mean = DVector::from_fn(r, |j, _| rho[j] * (0..l).map(|i| net.a()[(i, j)] / slack[i]).sum::<f64>());
    let var = DVector::from_fn(r, |j, _| rho[j].powi(2) * (0..l).map(|i| (net.a()[(i, j)] / slack[i]).powi(2)).sum::<f64>());
    Ok((slack, mean, var))
}

pub fn approx_steady_state(net: &Network, samples: usize, seed: u64) -> Result<ProductFormApprox> {
    let (slack, mean, variance) = approx_moments(net)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let exps: Vec<Exp<f64>> = slack.iter().map(|&s| Exp::new(s).expect("positive rate")).collect();
    let at = net.a().transpose();
    let draws = (0..samples)
        .map(|_| {
            let e = DVector::from_iterator(exps.len(), exps.iter().map(|d| rng.sample(d)));
            (&at * e).component_mul(net.rho())
        })
        .collect();
    Ok(ProductFormApprox { slack, mean, variance, samples: draws })
}

/// Law of `N_r = ρ_r Σ_l A_{l,r} E_l` as a series phase-type distribution.
pub fn approx_route_law(net: &Network, r: usize) -> Result<PhaseTypeDist> {
    let (slack, _, _) = approx_moments(net)?;
    let rates: Vec<f64> = (0..net.n_links())
        .filter(|&l| net.a()[(l, r)] > 0.0)
        .map(|l| slack[l] / (net.rho()[r] * net.a()[(l, r)]))
        .collect();
    PhaseTypeDist::series(&rates)
}

#[derive(Debug, Clone)]
pub struct SrbmOptions {
    pub step: f64,
    /// Time discarded before sampling.
    pub warmup: f64,
    /// Spacing between retained samples.
    pub sample_every: f64,
    pub samples: usize,
    pub seed: u64,
    /// Use the Brownian-bridge minimum of each step for the reflection.
    pub bridge: bool,
}

impl Default for SrbmOptions {
    fn default() -> Self {
        SrbmOptions { step: 1e-3, warmup: 1_000.0, sample_every: 8.0, samples: 10_000, seed: 1, bridge: true }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SrbmResult {
    pub samples: Vec<DVector<f64>>,
    pub means: DVector<f64>,
    pub correlation: DMatrix<f64>,
    /// Per-component KS statistic against `Exp(σ_l)`.
    pub ks: DVector<f64>,
}

/// Simulates `W_G = X + R Y` where `X` is a Brownian motion with
/// covariance `Γ` and drift `-Rθ` (link-level `θ`); its stationary law is
/// the product of `Exp(θ_l)` under the product-form condition.
///
/// Each step draws the free increment, lowers it by the minimum of the
/// Brownian bridge of every coordinate over the step, and solves the
/// step LCP on that lowered point (exact in one dimension).
pub fn simulate_srbm(params: &DiffusionParams, opts: &SrbmOptions) -> Result<SrbmResult> {
    let theta = params
        .theta_link
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("simulate_srbm needs a link drift θ".into()))?;
    let sigma = product_form_rates(params, theta)?;
    if !(opts.step > 0.0) || !(opts.sample_every >= opts.step) || opts.samples == 0 || !(opts.warmup >= 0.0) {
        return Err(Error::InvalidArgument("invalid SRBM step, spacing or sample count".into()));
    }
    let l = params.r.nrows();
    let r = &params.r;
    let chol = linalg::psd_cholesky(&(&params.gamma * opts.step))?;
    let drift = -(r * theta) * opts.step;
    let var_h: Vec<f64> = (0..l).map(|i| params.gamma[(i, i)] * opts.step).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let per_sample = (opts.sample_every / opts.step).round() as u64;
    let warm_steps = (opts.warmup / opts.step).round() as u64;
    let total = warm_steps + per_sample * opts.samples as u64;
    let mut w = DVector::<f64>::zeros(l);
    let mut z = DVector::<f64>::zeros(l);
    let mut q = DVector::<f64>::zeros(l);
    let mut dy = DVector::<f64>::zeros(l);
    let mut samples = Vec::with_capacity(opts.samples);
    for step in 1..=total {
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
        let dx = &drift + &chol * &z;
        for i in 0..l {
            let low = if opts.bridge {
                let u: f64 = 1.0 - rng.random::<f64>();
                0.5 * (dx[i] - (dx[i] * dx[i] - 2.0 * var_h[i] * u.ln()).sqrt())
            } else {
                dx[i]
            };
            q[i] = w[i] + low;
        }
        lcp_pgs(r, &q, &mut dy, LCP_TOL, LCP_MAX_ITER).map_err(|residual| Error::LcpNoConvergence { step: step as usize, residual })?;
        w += &dx + r * &dy;
        for wi in w.iter_mut() {
            *wi = wi.max(0.0);
        }
        if step > warm_steps && (step - warm_steps).is_multiple_of(per_sample) {
            samples.push(w.clone());
        }
    }
    let means = DVector::from_fn(l, |i, _| stats::mean(&samples.iter().map(|s| s[i]).collect::<Vec<_>>()));
    let cols: Vec<Vec<f64>> = (0..l).map(|i| samples.iter().map(|s| s[i]).collect()).collect();
    let correlation = DMatrix::from_fn(l, l, |i, j| if i == j { 1.0 } else { stats::correlation(&cols[i], &cols[j]) });
    let ks = DVector::from_fn(l, |i, _| stats::ks_statistic(&cols[i], |x| -(-sigma[i] * x.max(0.0)).exp_m1()));
    Ok(SrbmResult { samples, means, correlation, ks })
}

#[derive(Debug, Clone)]
pub struct HtOptions {
    pub k_list: Vec<f64>,
    /// Route-level drift.
    pub theta: DVector<f64>,
    pub seeds: usize,
    pub first_seed: u64,
    /// Simulated time is `horizon_coeff · k³`.
    pub horizon_coeff: f64,
    /// Diffusion-scaled window and grid step for the collapse metric.
    pub ssc_window: f64,
    pub ssc_step: f64,
}

impl HtOptions {
    pub fn new(k_list: Vec<f64>, theta: DVector<f64>, seeds: usize) -> Self {
        HtOptions { k_list, theta, seeds, first_seed: 1, horizon_coeff: 100.0, ssc_window: 40.0, ssc_step: 0.01 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RouteComparison {
    pub route: usize,
    /// Median across seeds of the empirical time-average.
    pub empirical_mean: f64,
    pub approx_mean: f64,
    /// Median across seeds of `|empirical - approx| / approx`.
    pub rel_error: f64,
    pub empirical_variance: f64,
    pub approx_variance: f64,
    /// Median across seeds of the sup distance between the time-weighted
    /// law of `N_r` and the approximation (evaluated at `n + 1/2`).
    pub ks_stat: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct HtEntry {
    pub k: f64,
    pub horizon: f64,
    pub slack: Vec<f64>,
    pub routes: Vec<RouteComparison>,
    /// Largest per-route median relative error.
    pub max_rel_error: f64,
    /// Median across seeds of `max dist(Ŵ) / max |Ŵ|`.
    pub ssc_metric: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct HtReport {
    pub entries: Vec<HtEntry>,
    pub rel_error_nonincreasing: bool,
    pub ssc_nonincreasing: bool,
}

struct SeedRun {
    means: Vec<f64>,
    vars: Vec<f64>,
    ks: Vec<f64>,
    ssc: f64,
}

/// Compares simulated heavy-traffic instances of a critical network with
/// the product-form approximation, for each `k` in `opts.k_list`. Seeds run
/// in parallel on the current rayon pool.
pub fn validate_heavy_traffic(base: &Network, opts: &HtOptions) -> Result<HtReport> {
    let geom = ManifoldGeometry::build(base)?;
    if opts.seeds == 0 || opts.k_list.is_empty() {
        return Err(Error::InvalidArgument("need at least one seed and one k".into()));
    }
    let mut entries = Vec::new();
    for &k in &opts.k_list {
        let horizon = opts.horizon_coeff * k.powi(3);
        let probe = SimConfig::heavy_traffic(base, k, &opts.theta, horizon, 0)?;
        let (slack, approx_mean, approx_var) = approx_moments(&probe.net)?;
        let laws: Vec<PhaseTypeDist> = (0..base.n_routes()).map(|r| approx_route_law(&probe.net, r)).collect::<Result<_>>()?;
        let runs: Vec<SeedRun> = (0..opts.seeds as u64)
            .into_par_iter()
            .map(|i| {
                let mut cfg = SimConfig::heavy_traffic(base, k, &opts.theta, horizon, opts.first_seed + i)?;
                cfg.workload_grid = Some((opts.ssc_step * k * k, opts.ssc_window * k * k));
                let res = simulate(&cfg)?;
                let ssc = ScaledPath::from_result(&res, k, &geom).ssc_metric();
                let ks = (0..laws.len()).map(|r| stats::ks_weighted_counts(&res.histograms[r], |x| laws[r].cdf(x + 0.5))).collect();
                Ok(SeedRun { means: res.mean_route, vars: res.var_route, ks, ssc })
            })
            .collect::<Result<_>>()?;
        let routes: Vec<RouteComparison> = (0..base.n_routes())
            .map(|r| {
                let col = |f: &dyn Fn(&SeedRun) -> f64| runs.iter().map(f).collect::<Vec<_>>();
                RouteComparison {
                    route: r,
                    empirical_mean: stats::median(&col(&|s| s.means[r])),
                    approx_mean: approx_mean[r],
                    rel_error: stats::median(&col(&|s| (s.means[r] - approx_mean[r]).abs() / approx_mean[r])),
                    empirical_variance: stats::median(&col(&|s| s.vars[r])),
                    approx_variance: approx_var[r],
                    ks_stat: stats::median(&col(&|s| s.ks[r])),
                }
            })
            .collect();
        let max_rel_error = routes.iter().map(|c| c.rel_error).fold(0.0, f64::max);
        let ssc_metric = stats::median(&runs.iter().map(|s| s.ssc).collect::<Vec<_>>());
        info!("k = {k}: max relative error {max_rel_error:.4}, collapse metric {ssc_metric:.4}");
        entries.push(HtEntry { k, horizon, slack: slack.iter().copied().collect(), routes, max_rel_error, ssc_metric });
    }
    let nonincreasing = |f: &dyn Fn(&HtEntry) -> f64| entries.windows(2).all(|p| f(&p[1]) <= f(&p[0]));
    let rel_error_nonincreasing = nonincreasing(&|e| e.max_rel_error);
    let ssc_nonincreasing = nonincreasing(&|e| e.ssc_metric);
    Ok(HtReport { entries, rel_error_nonincreasing, ssc_nonincreasing })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::fixtures;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn exponential_route_covariance() {
        let net = fixtures::single_link(1.0, 1.0, PhaseTypeDist::exponential(2.0).unwrap());
        let (sx, su) = covariance_free_process(&net).unwrap();
        let lambda = 2.0;
        assert!((su[(0, 0)] - lambda).abs() < 1e-14);
        assert!((sx[(0, 0)] - 2.0 * lambda / 4.0).abs() < 1e-14);
    }

    #[test]
    fn erlang_covariance_by_hand() {
        let net = fixtures::single_link(1.0, 1.0, PhaseTypeDist::erlang(2, 2.0).unwrap());
        let (sx, su) = covariance_free_process(&net).unwrap();
        let su_want = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 2.0]);
        let sx_want = DMatrix::from_row_slice(2, 2, &[0.5, 0.25, 0.25, 0.5]);
        assert!(linalg::norm_max(&(su - su_want)) < 1e-14);
        assert!(linalg::norm_max(&(&sx - sx_want)) < 1e-14);
        // Aggregated over the route: λ β^(2) = 1.5.
        assert!((sx.sum() - 1.5).abs() < 1e-14);
    }

    #[test]
    fn scalar_reflection_and_product_form() {
        let net = fixtures::single_link(1.0, 1.0, PhaseTypeDist::exponential(2.0).unwrap());
        let geom = ManifoldGeometry::build(&net).unwrap();
        let r = reflection_matrix(&net, &geom).unwrap();
        // μ/ρ = 2.
        assert!((r[(0, 0)] - 2.0).abs() < 1e-12);
        let p = DiffusionParams::with_geometry(&net, &geom).unwrap();
        assert!(check_product_form(&p).holds(1e-12));
        assert!((p.gamma[(0, 0)] - 4.0).abs() < 1e-12);
        let s = product_form_rates(&p, &v(&[5.0])).unwrap();
        assert!((s[0] - 5.0).abs() < 1e-12);
        assert!(product_form_rates(&p, &v(&[0.0])).is_err());
    }

    #[test]
    fn perturbed_moments_break_the_identity() {
        let net = fixtures::linear2();
        let p = DiffusionParams::new(&net).unwrap();
        assert!(check_product_form(&p).holds(1e-9));
        let mut d = p.d.clone();
        d[0] *= 1.1;
        let g = gamma_from_moments(&p.r, net.a(), &d);
        let res = product_form_residuals(&p.r, &g);
        assert!(res.gamma_vs_2r > 1e-3 && res.skew_symmetry > 1e-3);
    }

    #[test]
    fn approximation_moments() {
        let net = fixtures::single_link(1.0, 0.9, PhaseTypeDist::exponential(1.0).unwrap());
        let (_, mean, var) = approx_moments(&net).unwrap();
        assert!((mean[0] - 9.0).abs() < 1e-12);
        assert!((var[0] - 81.0).abs() < 1e-10);
        assert!(approx_moments(&fixtures::linear2()).is_err());
        let law = approx_route_law(&net, 0).unwrap();
        assert!((law.mean() - 9.0).abs() < 1e-12);
    }

    #[test]
    fn route_theta_maps_to_links() {
        let net = fixtures::linear2();
        let p = DiffusionParams::new(&net).unwrap().with_route_theta(&net, &v(&[1.0, 1.0, 1.0])).unwrap();
        assert_eq!(p.theta_link.as_ref().unwrap().as_slice(), &[2.0, 2.0]);
        let tp = p.theta_phase.unwrap();
        assert!((tp - v(&[1.0, 1.0, 1.0])).amax() < 1e-14);
        assert!((p.sigma.unwrap() - v(&[2.0, 2.0])).amax() < 1e-12);
    }
}
