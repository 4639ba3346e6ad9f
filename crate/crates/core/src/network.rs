//! Network topology, traffic loads and structural validation.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::phase::{DistSpec, PhaseTypeDist};

/// Relative tolerance of the rank test on `A`.
pub const RANK_TOL: f64 = 1e-10;
/// Tolerance of the critical-loading test `Aρ = c`.
pub const CRITICAL_TOL: f64 = 1e-9;

/// On-disk form of a network.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    pub c: Vec<f64>,
    pub routes: Vec<RouteSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RouteSpec {
    pub lambda: f64,
    pub dist: DistSpec,
}

impl NetworkSpec {
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_network(&self) -> Result<Network> {
        let a = linalg::from_rows(&self.a, "A")?;
        let dists = self
            .routes
            .iter()
            .enumerate()
            .map(|(r, route)| {
                route
                    .dist
                    .build()
                    .map_err(|e| Error::InvalidDistribution(format!("route {r}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let lambda = DVector::from_iterator(self.routes.len(), self.routes.iter().map(|r| r.lambda));
        Network::new(a, DVector::from_column_slice(&self.c), lambda, dists)
    }

    /// Validates raw input, reporting distribution and shape problems as
    /// failed checks instead of errors.
    pub fn validate(&self) -> ValidationReport {
        let mut pre = Vec::new();
        for (r, route) in self.routes.iter().enumerate() {
            let outcome = route.dist.build();
            pre.push(Check::required(
                format!("distribution[{r}]"),
                outcome.is_ok(),
                outcome.err().map(|e| e.to_string()).unwrap_or_default(),
            ));
        }
        match self.to_network() {
            Ok(net) => {
                let mut report = net.validation().clone();
                pre.append(&mut report.checks);
                report.checks = pre;
                report.valid = report.checks.iter().all(|c| c.passed || !c.required);
                report
            }
            Err(e) => {
                if pre.iter().all(|c| c.passed) {
                    pre.push(Check::required("dimensions".into(), false, e.to_string()));
                }
                ValidationReport { checks: pre, critical: false, criticality_gap: f64::NAN, valid: false }
            }
        }
    }

    pub fn from_network(net: &Network) -> Self {
        NetworkSpec {
            a: linalg::to_rows(net.a()),
            c: net.c().iter().copied().collect(),
            routes: net
                .dists()
                .iter()
                .zip(net.lambda().iter())
                .map(|(d, &lambda)| RouteSpec { lambda, dist: DistSpec::from_dist(d) })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Advisory checks do not affect [`ValidationReport::valid`].
    pub required: bool,
    pub detail: String,
}

impl Check {
    fn required(name: String, passed: bool, detail: String) -> Self {
        Check { name, passed, required: true, detail }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
    /// `Aρ = c` within [`CRITICAL_TOL`].
    pub critical: bool,
    pub criticality_gap: f64,
    pub valid: bool,
}

impl ValidationReport {
    pub fn violations(&self) -> Vec<String> {
        self.checks
            .iter()
            .filter(|c| !c.passed && c.required)
            .map(|c| format!("{}: {}", c.name, c.detail))
            .collect()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let tag = match (c.passed, c.required) {
                (true, _) => "ok  ",
                (false, true) => "FAIL",
                (false, false) => "warn",
            };
            writeln!(f, "[{tag}] {} {}", c.name, c.detail)?;
        }
        writeln!(f, "critical: {} (max |Aρ - c| = {:.3e})", self.critical, self.criticality_gap)?;
        write!(f, "valid: {}", self.valid)
    }
}

/// A bandwidth-sharing network: link-route matrix, capacities, Poisson
/// arrival rates and phase-type job sizes per route.
#[derive(Debug, Clone)]
pub struct Network {
    a: DMatrix<f64>,
    c: DVector<f64>,
    lambda: DVector<f64>,
    dists: Vec<PhaseTypeDist>,
    beta: DVector<f64>,
    beta2: DVector<f64>,
    rho: DVector<f64>,
    rho_phase: Vec<DVector<f64>>,
    offsets: Vec<usize>,
    report: ValidationReport,
}

impl Network {
    /// Assembles a network. Only shapes are enforced here; modelling
    /// assumptions are recorded in [`Network::validation`].
    pub fn new(a: DMatrix<f64>, c: DVector<f64>, lambda: DVector<f64>, dists: Vec<PhaseTypeDist>) -> Result<Self> {
        let (l, r) = a.shape();
        if c.len() != l {
            return Err(Error::Dimension(format!("A has {l} rows but c has {} entries", c.len())));
        }
        if lambda.len() != r || dists.len() != r {
            return Err(Error::Dimension(format!(
                "A has {r} columns but there are {} arrival rates and {} distributions",
                lambda.len(),
                dists.len()
            )));
        }
        if a.iter().chain(c.iter()).chain(lambda.iter()).any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("non-finite network parameter".into()));
        }
        let beta = DVector::from_iterator(r, dists.iter().map(PhaseTypeDist::mean));
        let beta2 = DVector::from_iterator(r, dists.iter().map(PhaseTypeDist::second_moment));
        let rho = lambda.component_mul(&beta);
        let rho_phase = dists.iter().zip(lambda.iter()).map(|(d, &lam)| d.phase_loads(lam)).collect();
        let mut offsets = Vec::with_capacity(r + 1);
        offsets.push(0);
        for d in &dists {
            offsets.push(offsets.last().unwrap() + d.phases());
        }
        let mut net = Network {
            a,
            c,
            lambda,
            dists,
            beta,
            beta2,
            rho,
            rho_phase,
            offsets,
            report: ValidationReport { checks: vec![], critical: false, criticality_gap: 0.0, valid: false },
        };
        net.report = net.compute_report();
        Ok(net)
    }

    fn compute_report(&self) -> ValidationReport {
        let (l, r) = self.a.shape();
        let mut checks = Vec::new();
        let rank = linalg::rank(&self.a, RANK_TOL);
        checks.push(Check::required(
            "full_row_rank".into(),
            rank == l && l <= self.n_phases(),
            format!("rank {rank}, {l} links, {} phases", self.n_phases()),
        ));
        let neg = self.a.iter().any(|&x| x < 0.0);
        checks.push(Check::required("nonnegative_A".into(), !neg, String::new()));
        let unused: Vec<usize> = (0..r).filter(|&j| self.a.column(j).iter().all(|&x| x <= 0.0)).collect();
        checks.push(Check::required(
            "routes_use_links".into(),
            unused.is_empty(),
            if unused.is_empty() { String::new() } else { format!("routes {unused:?} use no link") },
        ));
        let bad_c: Vec<usize> = (0..l).filter(|&i| !(self.c[i] > 0.0)).collect();
        checks.push(Check::required(
            "positive_capacity".into(),
            bad_c.is_empty(),
            if bad_c.is_empty() { String::new() } else { format!("links {bad_c:?}") },
        ));
        let bad_l: Vec<usize> = (0..r).filter(|&j| !(self.lambda[j] > 0.0)).collect();
        checks.push(Check::required(
            "positive_arrivals".into(),
            bad_l.is_empty(),
            if bad_l.is_empty() { String::new() } else { format!("routes {bad_l:?} have no arrivals") },
        ));
        let no_entry: Vec<usize> = (0..r).filter(|&j| !self.dists[j].has_positive_entry()).collect();
        checks.push(Check {
            name: "phase_entry_positive".into(),
            passed: no_entry.is_empty(),
            required: false,
            detail: if no_entry.is_empty() {
                String::new()
            } else {
                format!("routes {no_entry:?} have phases with zero entry probability (fluid convergence theory assumes otherwise)")
            },
        });
        let gap = if l == 0 { 0.0 } else { linalg::vec_norm_max(&(&self.a * &self.rho - &self.c)) };
        let scale = linalg::vec_norm_max(&self.c).max(1.0);
        let critical = gap <= CRITICAL_TOL * scale;
        let valid = checks.iter().all(|c| c.passed || !c.required);
        ValidationReport { checks, critical, criticality_gap: gap, valid }
    }

    pub fn validation(&self) -> &ValidationReport {
        &self.report
    }

    pub fn ensure_valid(&self) -> Result<()> {
        if self.report.valid {
            Ok(())
        } else {
            Err(Error::InvalidNetwork(self.report.violations()))
        }
    }

    pub fn ensure_critical(&self) -> Result<()> {
        self.ensure_valid()?;
        if self.report.critical {
            Ok(())
        } else {
            Err(Error::InvalidNetwork(vec![format!(
                "network is not critically loaded (max |Aρ - c| = {:.3e})",
                self.report.criticality_gap
            )]))
        }
    }

    pub fn is_critical(&self) -> bool {
        self.report.critical
    }

    pub fn n_links(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_routes(&self) -> usize {
        self.a.ncols()
    }

    pub fn n_phases(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn c(&self) -> &DVector<f64> {
        &self.c
    }

    pub fn lambda(&self) -> &DVector<f64> {
        &self.lambda
    }

    pub fn dists(&self) -> &[PhaseTypeDist] {
        &self.dists
    }

    /// Mean job sizes `β_r`.
    pub fn beta(&self) -> &DVector<f64> {
        &self.beta
    }

    /// Second moments `β^(2)_r`.
    pub fn beta2(&self) -> &DVector<f64> {
        &self.beta2
    }

    /// Route loads `ρ_r = λ_r β_r`.
    pub fn rho(&self) -> &DVector<f64> {
        &self.rho
    }

    pub fn phase_loads(&self, r: usize) -> &DVector<f64> {
        &self.rho_phase[r]
    }

    /// Concatenated phase-level loads `ρ̃`.
    pub fn rho_phase(&self) -> DVector<f64> {
        DVector::from_iterator(self.n_phases(), self.rho_phase.iter().flat_map(|v| v.iter().copied()))
    }

    /// Index range of route `r` inside phase-level vectors.
    pub fn phase_range(&self, r: usize) -> std::ops::Range<usize> {
        self.offsets[r]..self.offsets[r + 1]
    }

    pub fn phase_offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// Route owning each phase-level coordinate.
    pub fn route_of_phase(&self) -> Vec<usize> {
        (0..self.n_routes()).flat_map(|r| self.phase_range(r).map(move |_| r)).collect()
    }

    /// Link-phase matrix `Ã`: column `r` of `A` repeated `F_r` times.
    pub fn a_phase(&self) -> DMatrix<f64> {
        let owner = self.route_of_phase();
        DMatrix::from_fn(self.n_links(), self.n_phases(), |l, j| self.a[(l, owner[j])])
    }

    /// Aggregation matrix `C̃` (routes × phases) with `Ã = A C̃`.
    pub fn aggregation(&self) -> DMatrix<f64> {
        let owner = self.route_of_phase();
        DMatrix::from_fn(self.n_routes(), self.n_phases(), |r, j| if owner[j] == r { 1.0 } else { 0.0 })
    }

    /// Block-diagonal phase routing matrix `P̃`.
    pub fn phase_routing(&self) -> DMatrix<f64> {
        let k = self.n_phases();
        let mut p = DMatrix::zeros(k, k);
        for (r, d) in self.dists.iter().enumerate() {
            let s = self.offsets[r];
            p.view_mut((s, s), (d.phases(), d.phases())).copy_from(d.transitions());
        }
        p
    }

    /// Phase-level rates `μ̃`.
    pub fn phase_rates(&self) -> DVector<f64> {
        DVector::from_iterator(self.n_phases(), self.dists.iter().flat_map(|d| d.rates().iter().copied()))
    }

    /// Phase-level external arrival rates `λ_r a_{r,f}`.
    pub fn phase_arrivals(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.n_phases(),
            self.dists
                .iter()
                .zip(self.lambda.iter())
                .flat_map(|(d, &lam)| d.initial().iter().map(move |&a| lam * a)),
        )
    }

    /// The phase-level chain viewed as a multiclass network with Markovian
    /// routing between classes.
    pub fn class_system(&self) -> Result<ClassSystem> {
        let mut sys = ClassSystem::general(
            self.a_phase(),
            self.c.clone(),
            self.phase_arrivals(),
            self.phase_rates(),
            self.phase_routing(),
        )?;
        sys.route_of = self.route_of_phase();
        sys.n_routes = self.n_routes();
        Ok(sys)
    }

    /// Same topology and job sizes with new arrival rates.
    pub fn with_lambda(&self, lambda: DVector<f64>) -> Result<Self> {
        Network::new(self.a.clone(), self.c.clone(), lambda, self.dists.clone())
    }

    /// Sums phase-level entries per route.
    pub fn aggregate(&self, phase: &[f64]) -> DVector<f64> {
        DVector::from_iterator(self.n_routes(), (0..self.n_routes()).map(|r| phase[self.phase_range(r)].iter().sum()))
    }
}

/// Checks every modelling assumption of a network.
pub fn validate_network(net: &Network) -> ValidationReport {
    net.validation().clone()
}

pub fn mean_size(d: &PhaseTypeDist) -> f64 {
    d.mean()
}

/// `β^(2)` of `d`; `lambda` must be positive but does not enter the value.
pub fn second_moment(d: &PhaseTypeDist, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidArgument(format!("arrival rate must be positive, got {lambda}")));
    }
    Ok(d.second_moment())
}

pub fn route_loads(net: &Network) -> DVector<f64> {
    net.rho().clone()
}

pub fn phase_loads(net: &Network, r: usize) -> DVector<f64> {
    net.phase_loads(r).clone()
}

/// Classes (routes or phases) with external arrivals, exponential service
/// and Markovian routing, sharing links through `a`.
#[derive(Debug, Clone)]
pub struct ClassSystem {
    pub a: DMatrix<f64>,
    pub c: DVector<f64>,
    pub lambda: DVector<f64>,
    pub mu: DVector<f64>,
    pub routing: DMatrix<f64>,
    /// `diag(m) (I - Pᵀ)⁻¹ λ`
    pub rho: DVector<f64>,
    pub route_of: Vec<usize>,
    pub n_routes: usize,
    workload_map: DMatrix<f64>,
}

impl ClassSystem {
    pub fn general(
        a: DMatrix<f64>,
        c: DVector<f64>,
        lambda: DVector<f64>,
        mu: DVector<f64>,
        routing: DMatrix<f64>,
    ) -> Result<Self> {
        let (l, k) = a.shape();
        if c.len() != l || lambda.len() != k || mu.len() != k || routing.shape() != (k, k) {
            return Err(Error::Dimension(format!(
                "class system: A {l}x{k}, c {}, lambda {}, mu {}, P {}x{}",
                c.len(),
                lambda.len(),
                mu.len(),
                routing.nrows(),
                routing.ncols()
            )));
        }
        if mu.iter().any(|&x| !(x > 0.0)) {
            return Err(Error::InvalidArgument("service rates must be positive".into()));
        }
        if routing.iter().any(|&x| x < 0.0) || routing.row_iter().any(|r| r.sum() > 1.0 + 1e-9) {
            return Err(Error::InvalidArgument("routing matrix must be sub-stochastic".into()));
        }
        let visits_t = linalg::inverse(&(DMatrix::identity(k, k) - routing.transpose()), "I - Pᵀ of routing")?;
        let m = mu.map(|x| 1.0 / x);
        let rho = m.component_mul(&(&visits_t * &lambda));
        let workload_map = DMatrix::from_diagonal(&m) * visits_t;
        Ok(ClassSystem { a, c, lambda, mu, routing, rho, route_of: (0..k).collect(), n_routes: k, workload_map })
    }

    pub fn n_classes(&self) -> usize {
        self.a.ncols()
    }

    pub fn n_links(&self) -> usize {
        self.a.nrows()
    }

    /// `diag(m) (I - Pᵀ)⁻¹`, mapping class counts to workloads.
    pub fn workload_map(&self) -> &DMatrix<f64> {
        &self.workload_map
    }

    pub fn workload(&self, n: &DVector<f64>) -> DVector<f64> {
        &self.workload_map * n
    }

    pub fn is_critical(&self) -> bool {
        let gap = linalg::vec_norm_max(&(&self.a * &self.rho - &self.c));
        gap <= CRITICAL_TOL * linalg::vec_norm_max(&self.c).max(1.0)
    }
}

/// Phase-level counts with their route-level aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    pub phase: DVector<f64>,
    pub route: DVector<f64>,
}

impl StateVector {
    pub fn new(phase: DVector<f64>, net: &Network) -> Result<Self> {
        if phase.len() != net.n_phases() {
            return Err(Error::Dimension(format!("state has {} entries, network has {} phases", phase.len(), net.n_phases())));
        }
        if phase.iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::InvalidArgument("state entries must be nonnegative".into()));
        }
        let route = net.aggregate(phase.as_slice());
        Ok(StateVector { phase, route })
    }

    pub fn from_counts(counts: &[u64], net: &Network) -> Result<Self> {
        Self::new(DVector::from_iterator(counts.len(), counts.iter().map(|&x| x as f64)), net)
    }
}

/// Sample networks used in tests, benchmarks and documentation.
pub mod fixtures {
    use super::*;
    use rand::Rng;

    /// Two links, one long route through both and one local route per link,
    /// unit capacities and unit-mean exponential sizes. Critically loaded
    /// with `ρ = (1/3, 2/3, 2/3)`.
    pub fn linear2() -> Network {
        linear2_with(|| PhaseTypeDist::exponential(1.0).unwrap())
    }

    pub fn linear2_with(dist: impl Fn() -> PhaseTypeDist) -> Network {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let dists: Vec<_> = (0..3).map(|_| dist()).collect();
        let rho = [1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0];
        let lambda = DVector::from_iterator(3, dists.iter().zip(rho).map(|(d, r)| r / d.mean()));
        Network::new(a, DVector::from_element(2, 1.0), lambda, dists).unwrap()
    }

    /// One link of capacity `c` shared by one route with load `rho`.
    pub fn single_link(c: f64, rho: f64, dist: PhaseTypeDist) -> Network {
        let lambda = rho / dist.mean();
        Network::new(DMatrix::from_element(1, 1, 1.0), DVector::from_element(1, c), DVector::from_element(1, lambda), vec![dist])
            .unwrap()
    }

    /// Exponential, Erlang-like or hyperexponential law with the given
    /// mean and strictly positive entry probabilities.
    pub fn random_dist<R: Rng + ?Sized>(rng: &mut R, mean: f64) -> PhaseTypeDist {
        match rng.random_range(0..3) {
            0 => PhaseTypeDist::exponential(1.0 / mean).unwrap(),
            1 => {
                let k = rng.random_range(2..=4);
                let mut a = DVector::from_element(k, 0.0);
                a[0] = 1.0;
                for f in 1..k {
                    a[f] = rng.random_range(0.02..0.2);
                }
                a /= a.sum();
                let p = DMatrix::from_fn(k, k, |i, j| if j == i + 1 { 1.0 } else { 0.0 });
                let base = PhaseTypeDist::new(a.clone(), p.clone(), DVector::from_element(k, 1.0)).unwrap();
                let scale = base.mean() / mean;
                PhaseTypeDist::new(a, p, DVector::from_element(k, scale)).unwrap()
            }
            _ => {
                let q: f64 = rng.random_range(0.1..0.9);
                let r1: f64 = rng.random_range(0.3..3.0);
                let r2: f64 = rng.random_range(0.3..3.0);
                let base = PhaseTypeDist::hyperexponential(&[q, 1.0 - q], &[r1, r2]).unwrap();
                let s = base.mean() / mean;
                PhaseTypeDist::hyperexponential(&[q, 1.0 - q], &[r1 * s, r2 * s]).unwrap()
            }
        }
    }

    /// Random critically loaded network with `links <= max_links` and
    /// `routes <= max_routes` (0-1 full-row-rank `A`, capacities `c = Aρ`).
    pub fn random_critical<R: Rng + ?Sized>(rng: &mut R, max_links: usize, max_routes: usize) -> Network {
        let l = rng.random_range(1..=max_links);
        let r = rng.random_range(l..=max_routes.max(l));
        loop {
            let mut a = DMatrix::zeros(l, r);
            for j in 0..r {
                if j < l {
                    a[(j, j)] = 1.0;
                }
                for i in 0..l {
                    if rng.random_bool(0.4) {
                        a[(i, j)] = 1.0;
                    }
                }
                if a.column(j).sum() == 0.0 {
                    a[(rng.random_range(0..l), j)] = 1.0;
                }
            }
            if linalg::rank(&a, RANK_TOL) < l {
                continue;
            }
            let rho = DVector::from_fn(r, |_, _| rng.random_range(0.1..1.0));
            let c = &a * &rho;
            let dists: Vec<_> = (0..r).map(|_| {
                let mean = rng.random_range(0.5..2.0);
                random_dist(rng, mean)
            }).collect();
            let lambda = DVector::from_iterator(r, dists.iter().zip(rho.iter()).map(|(d, &x)| x / d.mean()));
            return Network::new(a, c, lambda, dists).unwrap();
        }
    }
}
