//! Event-driven simulation of the phase-level Markov chain under
//! proportional fairness.
//!
//! Each route is a processor-sharing class: its jobs share the route rate
//! `Λ_r(n)` equally, so a job in phase `f` completes that phase at rate
//! `μ_f Λ_r / n_r`. The route-level allocation depends on route counts only
//! and is cached per count vector.

use std::collections::HashMap;

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::Serialize;

use crate::alloc::{solve_pf_raw, PfOptions};
use crate::error::{Error, Result};
use crate::linalg;
use crate::manifold::ManifoldGeometry;
use crate::network::Network;
use crate::stats::{self, TimeIntegral};

/// Allocation cache entries kept before the cache is flushed.
const CACHE_LIMIT: usize = 1 << 20;

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub net: Network,
    pub seed: u64,
    pub horizon: f64,
    /// Fraction of the horizon discarded before statistics are collected.
    pub warmup: f64,
    pub batches: usize,
    /// Initial phase counts; empty system if `None`.
    pub initial: Option<Vec<u64>>,
    /// Spacing of thinned post-warmup samples of the route counts.
    pub sample_interval: Option<f64>,
    /// Record the phase-level workload every `dt` time units up to `until`.
    pub workload_grid: Option<(f64, f64)>,
    /// Heavy-traffic index and route drift the network was built from.
    pub k: Option<f64>,
    pub theta: Option<DVector<f64>>,
    pub pf: PfOptions,
}

impl SimConfig {
    pub fn new(net: Network, horizon: f64, seed: u64) -> Self {
        SimConfig {
            net,
            seed,
            horizon,
            warmup: 0.2,
            batches: 32,
            initial: None,
            sample_interval: None,
            workload_grid: None,
            k: None,
            theta: None,
            pf: PfOptions::default(),
        }
    }

    /// Simulates the heavy-traffic instance of a critical network.
    pub fn heavy_traffic(base: &Network, k: f64, theta: &DVector<f64>, horizon: f64, seed: u64) -> Result<Self> {
        let net = build_ht_instance(base, k, theta)?;
        let mut cfg = SimConfig::new(net, horizon, seed);
        cfg.k = Some(k);
        cfg.theta = Some(theta.clone());
        Ok(cfg)
    }

    fn check(&self) -> Result<()> {
        self.net.ensure_valid()?;
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(Error::InvalidArgument("horizon must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup) {
            return Err(Error::InvalidArgument("warmup must lie in [0, 1)".into()));
        }
        if self.batches < 10 {
            return Err(Error::InvalidArgument("at least 10 batches are needed for confidence intervals".into()));
        }
        if let Some(init) = &self.initial {
            if init.len() != self.net.n_phases() {
                return Err(Error::Dimension(format!("initial state has {} entries for {} phases", init.len(), self.net.n_phases())));
            }
        }
        if self.sample_interval.is_some_and(|s| !(s > 0.0)) || self.workload_grid.is_some_and(|(dt, _)| !(dt > 0.0)) {
            return Err(Error::InvalidArgument("sampling intervals must be positive".into()));
        }
        Ok(())
    }
}

/// `λᵏ_r = λ_r (1 - θ_r / (k ρ_r))`, so that `ρᵏ = ρ - θ/k` and the link
/// slack is `Aθ/k`.
pub fn build_ht_instance(net: &Network, k: f64, theta: &DVector<f64>) -> Result<Network> {
    net.ensure_critical()?;
    if theta.len() != net.n_routes() {
        return Err(Error::Dimension(format!("θ has {} entries for {} routes", theta.len(), net.n_routes())));
    }
    if !(k >= 1.0) {
        return Err(Error::InvalidArgument(format!("k must be at least 1, got {k}")));
    }
    if theta.iter().any(|&x| !(x >= 0.0)) {
        return Err(Error::InvalidArgument("θ must be nonnegative".into()));
    }
    let rho = net.rho();
    let mut lambda = net.lambda().clone();
    for r in 0..lambda.len() {
        let f = theta[r] / (k * rho[r]);
        if f >= 1.0 {
            return Err(Error::InvalidArgument(format!("θ_{r}/(k ρ_{r}) = {f} leaves no arrivals")));
        }
        lambda[r] *= 1.0 - f;
    }
    net.with_lambda(lambda)
}

#[derive(Debug, Clone, Serialize)]
pub struct SimResult {
    /// Post-warmup time averages.
    pub mean_route: Vec<f64>,
    pub var_route: Vec<f64>,
    pub mean_phase: Vec<f64>,
    /// 95% batch-means half-widths of `mean_route`.
    pub ci_route: Vec<f64>,
    pub batch_means: Vec<Vec<f64>>,
    /// Post-warmup departures per unit time and its half-width.
    pub throughput: Vec<f64>,
    pub throughput_ci: Vec<f64>,
    /// Unused capacity `∫ (c - AΛ) dt` over the whole run.
    pub unused_capacity: Vec<f64>,
    /// Smallest increment of the unused capacity over any inter-event interval.
    pub min_unused_increment: f64,
    /// Thinned post-warmup samples `(t, n_route)`.
    pub samples: Vec<(f64, Vec<u64>)>,
    /// Post-warmup time spent with `n_r = j`, per route.
    pub histograms: Vec<Vec<f64>>,
    /// Phase-level workload on the requested grid.
    pub workload_path: Vec<(f64, DVector<f64>)>,
    /// Max `(AΛ - c)⁺` over all computed allocations.
    pub max_capacity_violation: f64,
    /// Max gap between the tracked workload and `diag(m̃)(I-P̃ᵀ)⁻¹ñ`.
    pub workload_identity_error: f64,
    pub events: u64,
    pub final_state: Vec<u64>,
    pub measured_time: f64,
}

struct Chain<'a> {
    a: &'a DMatrix<f64>,
    c: &'a DVector<f64>,
    offsets: Vec<usize>,
    mu: Vec<f64>,
    lambda: Vec<f64>,
    n: Vec<u64>,
    nr: Vec<u64>,
    /// `Σ_j μ_j n_j` per route.
    speed: Vec<f64>,
    cache: HashMap<Vec<u64>, Box<[f64]>>,
    gamma: Vec<f64>,
    pf: PfOptions,
    max_violation: f64,
}

impl<'a> Chain<'a> {
    fn new(net: &'a Network, init: &[u64], pf: PfOptions) -> Self {
        let offsets = net.phase_offsets().to_vec();
        let mu: Vec<f64> = net.phase_rates().iter().copied().collect();
        let r = net.n_routes();
        let mut chain = Chain {
            a: net.a(),
            c: net.c(),
            mu,
            lambda: net.lambda().iter().copied().collect(),
            n: init.to_vec(),
            nr: vec![0; r],
            speed: vec![0.0; r],
            cache: HashMap::new(),
            gamma: vec![0.0; r],
            pf,
            max_violation: 0.0,
            offsets,
        };
        for route in 0..r {
            let range = chain.offsets[route]..chain.offsets[route + 1];
            chain.nr[route] = init[range.clone()].iter().sum();
            chain.speed[route] = range.map(|j| chain.mu[j] * init[j] as f64).sum();
        }
        chain
    }

    fn refresh_allocation(&mut self) -> Result<()> {
        if let Some(g) = self.cache.get(self.nr.as_slice()) {
            self.gamma.copy_from_slice(g);
            return Ok(());
        }
        let n = DVector::from_iterator(self.nr.len(), self.nr.iter().map(|&x| x as f64));
        let alloc = solve_pf_raw(self.a, self.c, &n, &self.pf)?;
        let load = self.a * &alloc.gamma;
        let viol = (&load - self.c).max().max(0.0);
        self.max_violation = self.max_violation.max(viol);
        if self.cache.len() >= CACHE_LIMIT {
            self.cache.clear();
        }
        self.gamma.copy_from_slice(alloc.gamma.as_slice());
        self.cache.insert(self.nr.clone(), alloc.gamma.as_slice().into());
        Ok(())
    }

    /// Completion rate of route `r`.
    fn service_rate(&self, r: usize) -> f64 {
        if self.nr[r] == 0 {
            0.0
        } else {
            self.gamma[r] * self.speed[r] / self.nr[r] as f64
        }
    }

    fn unused(&self) -> Vec<f64> {
        let l = self.c.len();
        (0..l)
            .map(|i| self.c[i] - (0..self.gamma.len()).map(|r| self.a[(i, r)] * self.gamma[r]).sum::<f64>())
            .collect()
    }

    fn add(&mut self, j: usize, r: usize) {
        self.n[j] += 1;
        self.nr[r] += 1;
        self.speed[r] += self.mu[j];
    }

    fn remove(&mut self, j: usize, r: usize) {
        self.n[j] -= 1;
        self.nr[r] -= 1;
        self.speed[r] -= self.mu[j];
        if self.nr[r] == 0 {
            self.speed[r] = 0.0;
        }
    }
}

/// Runs the chain for `cfg.horizon` time units.
pub fn simulate(cfg: &SimConfig) -> Result<SimResult> {
    cfg.check()?;
    let net = &cfg.net;
    let (r_count, k_phases) = (net.n_routes(), net.n_phases());
    let init = cfg.initial.clone().unwrap_or_else(|| vec![0; k_phases]);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ch = Chain::new(net, &init, cfg.pf);
    ch.refresh_allocation()?;

    let visits_t = linalg::inverse(&(DMatrix::identity(k_phases, k_phases) - net.phase_routing().transpose()), "I - P̃ᵀ")?;
    let m = net.phase_rates().map(|x| 1.0 / x);
    let wmap = DMatrix::from_diagonal(&m) * visits_t;
    let mut w: DVector<f64> = &wmap * DVector::from_iterator(k_phases, init.iter().map(|&x| x as f64));
    let mut w_err: f64 = 0.0;

    let t_warm = cfg.warmup * cfg.horizon;
    let measured = cfg.horizon - t_warm;
    let batch_len = measured / cfg.batches as f64;
    let mut batch_int: Vec<TimeIntegral> = (0..cfg.batches).map(|_| TimeIntegral::new(r_count)).collect();
    let mut batch_dep = vec![vec![0u64; r_count]; cfg.batches];
    let mut total_route = TimeIntegral::new(r_count);
    let mut total_phase = TimeIntegral::new(k_phases);
    let mut hist: Vec<Vec<f64>> = vec![Vec::new(); r_count];
    let mut y = vec![0.0; net.n_links()];
    let mut min_dy = f64::INFINITY;
    let mut samples = Vec::new();
    let mut next_sample = cfg.sample_interval.map(|s| t_warm + s);
    let mut path = Vec::new();
    let mut next_grid = cfg.workload_grid.map(|_| 0.0);

    let lambda_total: f64 = ch.lambda.iter().sum();
    let mut t = 0.0;
    let mut events = 0u64;
    loop {
        let service: Vec<f64> = (0..r_count).map(|r| ch.service_rate(r)).collect();
        let total = lambda_total + service.iter().sum::<f64>();
        if !(total > 0.0) {
            return Err(Error::Numeric("zero total event rate".into()));
        }
        let dt: f64 = rng.sample::<f64, _>(Exp1) / total;
        let t_next = (t + dt).min(cfg.horizon);

        // Statistics over [t, t_next), during which the state is constant.
        let unused = ch.unused();
        for (i, u) in unused.iter().enumerate() {
            y[i] += u * (t_next - t);
            min_dy = min_dy.min(u * (t_next - t));
        }
        if let (Some((grid_dt, until)), Some(tg)) = (cfg.workload_grid, next_grid.as_mut()) {
            while *tg < t_next && *tg <= until {
                path.push((*tg, w.clone()));
                *tg += grid_dt;
            }
        }
        if t_next > t_warm {
            let lo = t.max(t_warm);
            if let (Some(s), Some(ts)) = (cfg.sample_interval, next_sample.as_mut()) {
                while *ts < t_next {
                    samples.push((*ts, ch.nr.clone()));
                    let direct = &wmap * DVector::from_iterator(k_phases, ch.n.iter().map(|&x| x as f64));
                    w_err = w_err.max((&direct - &w).amax());
                    *ts += s;
                }
            }
            total_route.add(ch.nr.iter().map(|&x| x as f64), t_next - lo);
            total_phase.add(ch.n.iter().map(|&x| x as f64), t_next - lo);
            for r in 0..r_count {
                let j = ch.nr[r] as usize;
                if hist[r].len() <= j {
                    hist[r].resize(j + 1, 0.0);
                }
                hist[r][j] += t_next - lo;
            }
            // Split across batch boundaries.
            let mut a = lo;
            while a < t_next {
                let b_idx = (((a - t_warm) / batch_len) as usize).min(cfg.batches - 1);
                let b_end = if b_idx + 1 == cfg.batches { t_next } else { (t_warm + (b_idx + 1) as f64 * batch_len).min(t_next) };
                batch_int[b_idx].add(ch.nr.iter().map(|&x| x as f64), b_end - a);
                if b_end <= a {
                    break;
                }
                a = b_end;
            }
        }
        if t + dt >= cfg.horizon {
            break;
        }
        t = t_next;
        events += 1;

        // Pick the event.
        let mut u = rng.random::<f64>() * total;
        let mut handled = false;
        for r in 0..r_count {
            if u < ch.lambda[r] {
                let f = net.dists()[r].sample_initial(&mut rng);
                let j = ch.offsets[r] + f;
                ch.add(j, r);
                w += wmap.column(j);
                ch.refresh_allocation()?;
                handled = true;
                break;
            }
            u -= ch.lambda[r];
            if u < service[r] {
                // Phase within the route, proportional to μ_j n_j.
                let range = ch.offsets[r]..ch.offsets[r + 1];
                let mut v = rng.random::<f64>() * ch.speed[r];
                let mut j = range.end - 1;
                for jj in range.clone() {
                    let s = ch.mu[jj] * ch.n[jj] as f64;
                    if v < s && ch.n[jj] > 0 {
                        j = jj;
                        break;
                    }
                    v -= s;
                }
                while ch.n[j] == 0 {
                    j -= 1;
                }
                let f = j - ch.offsets[r];
                ch.remove(j, r);
                w -= wmap.column(j);
                match net.dists()[r].sample_next(f, &mut rng) {
                    Some(f2) => {
                        let j2 = ch.offsets[r] + f2;
                        ch.add(j2, r);
                        w += wmap.column(j2);
                    }
                    None => {
                        if t > t_warm {
                            let b_idx = (((t - t_warm) / batch_len) as usize).min(cfg.batches - 1);
                            batch_dep[b_idx][r] += 1;
                        }
                        ch.refresh_allocation()?;
                    }
                }
                handled = true;
                break;
            }
            u -= service[r];
        }
        if !handled {
            // Rounding at the top of the last bucket: redraw next loop.
            events -= 1;
        }
    }
    if let (Some((_, until)), Some(tg)) = (cfg.workload_grid, next_grid) {
        if tg <= until && tg <= cfg.horizon {
            path.push((tg, w.clone()));
        }
    }
    let direct = &wmap * DVector::from_iterator(k_phases, ch.n.iter().map(|&x| x as f64));
    w_err = w_err.max((&direct - &w).amax());
    if ch.max_violation > 1e-9 {
        warn!("allocation exceeded capacity by {:.3e}", ch.max_violation);
    }
    debug!("simulated {events} events, {} cached allocations", ch.cache.len());

    let batch_means: Vec<Vec<f64>> = batch_int.iter().map(TimeIntegral::mean).collect();
    let ci_route = (0..r_count)
        .map(|r| stats::batch_ci(&batch_means.iter().map(|b| b[r]).collect::<Vec<_>>()).1)
        .collect();
    let mut throughput = Vec::with_capacity(r_count);
    let mut throughput_ci = Vec::with_capacity(r_count);
    for r in 0..r_count {
        let per_batch: Vec<f64> = batch_dep.iter().map(|b| b[r] as f64 / batch_len).collect();
        let (mean, hw) = stats::batch_ci(&per_batch);
        throughput.push(mean);
        throughput_ci.push(hw);
    }
    Ok(SimResult {
        mean_route: total_route.mean(),
        var_route: total_route.variance(),
        mean_phase: total_phase.mean(),
        ci_route,
        batch_means,
        throughput,
        throughput_ci,
        unused_capacity: y,
        min_unused_increment: min_dy,
        samples,
        histograms: hist,
        workload_path: path,
        max_capacity_violation: ch.max_violation,
        workload_identity_error: w_err,
        events,
        final_state: ch.n,
        measured_time: measured,
    })
}

/// Diffusion-scaled workload `Ŵᵏ(t) = Wᵏ(k² t)/k` with its distance to
/// the invariant manifold of the critical network.
#[derive(Debug, Clone, Serialize)]
pub struct ScaledPath {
    pub times: Vec<f64>,
    pub w_hat: Vec<DVector<f64>>,
    pub dist: Vec<f64>,
}

impl ScaledPath {
    pub fn from_result(res: &SimResult, k: f64, geom: &ManifoldGeometry) -> Self {
        let times = res.workload_path.iter().map(|(t, _)| t / (k * k)).collect();
        let w_hat: Vec<DVector<f64>> = res.workload_path.iter().map(|(_, w)| w / k).collect();
        let dist = w_hat.iter().map(|w| geom.dist(w)).collect();
        ScaledPath { times, w_hat, dist }
    }

    /// `max_t dist(Ŵ(t)) / max_t |Ŵ(t)|`; zero for an identically empty path.
    pub fn ssc_metric(&self) -> f64 {
        let d = self.dist.iter().copied().fold(0.0, f64::max);
        let w = self.w_hat.iter().map(|w| w.norm()).fold(0.0, f64::max);
        if w > 0.0 {
            d / w
        } else {
            0.0
        }
    }
}

/// Simulates `cfg` (which must request a workload grid) and returns the
/// diffusion-scaled workload path for index `k`.
pub fn scaled_paths(cfg: &SimConfig, k: f64, geom: &ManifoldGeometry) -> Result<ScaledPath> {
    if cfg.workload_grid.is_none() {
        return Err(Error::InvalidArgument("scaled paths need a workload grid".into()));
    }
    let res = simulate(cfg)?;
    Ok(ScaledPath::from_result(&res, k, geom))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::fixtures;
    use crate::phase::PhaseTypeDist;

    #[test]
    fn ht_instance_slack() {
        let net = fixtures::linear2();
        let theta = DVector::from_element(3, 1.0);
        let ht = build_ht_instance(&net, 10.0, &theta).unwrap();
        let rho_k = ht.rho();
        for r in 0..3 {
            assert!((rho_k[r] - (net.rho()[r] - 0.1)).abs() < 1e-14);
        }
        let s = net.c() - net.a() * rho_k;
        assert!((s[0] - 0.2).abs() < 1e-14 && (s[1] - 0.2).abs() < 1e-14);
        let same = build_ht_instance(&net, 10.0, &DVector::zeros(3)).unwrap();
        assert_eq!(same.lambda(), net.lambda());
        assert!(build_ht_instance(&net, 1.0, &DVector::from_element(3, 1.0)).is_err());
        assert!(build_ht_instance(&ht, 10.0, &theta).is_err());
    }

    #[test]
    fn deterministic_given_seed() {
        let net = fixtures::single_link(1.0, 0.5, PhaseTypeDist::erlang(2, 2.0).unwrap());
        let mut cfg = SimConfig::new(net, 2000.0, 3);
        cfg.sample_interval = Some(10.0);
        let a = simulate(&cfg).unwrap();
        let b = simulate(&cfg).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.mean_route, b.mean_route);
        assert_eq!(a.events, b.events);
        cfg.seed = 4;
        assert_ne!(simulate(&cfg).unwrap().samples, a.samples);
    }

    #[test]
    fn bookkeeping_invariants() {
        let net = fixtures::linear2_with(|| PhaseTypeDist::hyperexponential(&[0.5, 0.5], &[2.0, 2.0 / 3.0]).unwrap());
        let ht = build_ht_instance(&net, 4.0, &DVector::from_element(3, 1.0)).unwrap();
        let mut cfg = SimConfig::new(ht, 5000.0, 11);
        cfg.sample_interval = Some(1.0);
        cfg.workload_grid = Some((1.0, 100.0));
        let res = simulate(&cfg).unwrap();
        assert!(res.max_capacity_violation <= 1e-9);
        assert!(res.min_unused_increment >= -1e-9);
        assert!(res.workload_identity_error < 1e-9);
        assert_eq!(res.workload_path.len(), 101);
        assert_eq!(res.workload_path[0].1.amax(), 0.0);
        assert!(res.ci_route.iter().all(|x| x.is_finite()));
        let hist_total: f64 = res.histograms[0].iter().sum();
        assert!((hist_total - res.measured_time).abs() < 1e-6 * res.measured_time);
    }

    #[test]
    fn rejects_bad_configuration() {
        let net = fixtures::linear2();
        let mut cfg = SimConfig::new(net, 0.0, 1);
        assert!(simulate(&cfg).is_err());
        cfg.horizon = 10.0;
        cfg.warmup = 1.0;
        assert!(simulate(&cfg).is_err());
        cfg.warmup = 0.2;
        cfg.initial = Some(vec![1]);
        assert!(simulate(&cfg).is_err());
    }
}
