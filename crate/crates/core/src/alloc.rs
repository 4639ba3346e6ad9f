//! Proportionally fair allocation.
//!
//! The primal problem `max Σ n_r log γ_r  s.t. Aγ <= c` is solved through
//! its dual
//!
//! ```text
//! min_{η >= 0}  Σ_l η_l c_l - Σ_r n_r log(Σ_l A_{l,r} η_l)
//! ```
//!
//! by a projected Newton method with Armijo backtracking. The primal
//! allocation is recovered as `γ_r = n_r / (Aᵀη)_r`. Counts are normalised
//! to sum to one before solving, which makes the allocation exactly
//! invariant under scaling of `n`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg;
use crate::network::{ClassSystem, Network, StateVector};

#[derive(Debug, Clone, Copy)]
pub struct PfOptions {
    /// Target KKT residual on the normalised problem.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PfOptions {
    fn default() -> Self {
        PfOptions { tol: 1e-9, max_iter: 200 }
    }
}

impl PfOptions {
    pub fn with_tol(tol: f64) -> Self {
        PfOptions { tol, ..Default::default() }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Allocation {
    /// Route-level rates `Λ(n)`.
    pub gamma: DVector<f64>,
    /// Link prices `η`.
    pub eta: DVector<f64>,
    /// Max of primal infeasibility and complementarity violation on the
    /// normalised problem (stationarity holds by construction).
    pub kkt_residual: f64,
    pub iterations: usize,
}

impl Allocation {
    fn zero(l: usize, r: usize) -> Self {
        Allocation { gamma: DVector::zeros(r), eta: DVector::zeros(l), kkt_residual: 0.0, iterations: 0 }
    }

    /// Route prices `ζ_r = Σ_l A_{l,r} η_l`.
    pub fn route_prices(&self, a: &DMatrix<f64>) -> DVector<f64> {
        a.transpose() * &self.eta
    }
}

/// Proportionally fair allocation for route counts `n` on a validated network.
pub fn solve_pf(n: &DVector<f64>, net: &Network, tol: f64) -> Result<Allocation> {
    net.ensure_valid()?;
    solve_pf_raw(net.a(), net.c(), n, &PfOptions::with_tol(tol))
}

struct Reduced {
    /// `A` restricted to used links (rows) and positive routes (columns).
    a: DMatrix<f64>,
    c: DVector<f64>,
    p: DVector<f64>,
}

impl Reduced {
    fn prices(&self, eta: &DVector<f64>) -> DVector<f64> {
        self.a.transpose() * eta
    }

    fn objective(&self, eta: &DVector<f64>) -> f64 {
        let zeta = self.prices(eta);
        if zeta.iter().any(|&z| !(z > 0.0)) {
            return f64::INFINITY;
        }
        eta.dot(&self.c) - self.p.iter().zip(zeta.iter()).map(|(p, z)| p * z.ln()).sum::<f64>()
    }

    fn gamma(&self, zeta: &DVector<f64>) -> DVector<f64> {
        self.p.component_div(zeta)
    }

    fn gradient(&self, zeta: &DVector<f64>) -> DVector<f64> {
        &self.c - &self.a * self.gamma(zeta)
    }

    fn hessian(&self, zeta: &DVector<f64>) -> DMatrix<f64> {
        let w = DVector::from_iterator(zeta.len(), self.p.iter().zip(zeta.iter()).map(|(p, z)| p / (z * z)));
        let aw = DMatrix::from_fn(self.a.nrows(), self.a.ncols(), |i, j| self.a[(i, j)] * w[j]);
        aw * self.a.transpose()
    }

    fn residual(&self, eta: &DVector<f64>, grad: &DVector<f64>) -> f64 {
        eta.iter()
            .zip(grad.iter())
            .map(|(&e, &g)| (-g).max(0.0).max((e * g).abs()))
            .fold(0.0, f64::max)
    }
}

/// Proportionally fair allocation for an arbitrary nonnegative `a`, `c`.
/// Routes with `n_r = 0` receive zero rate.
pub fn solve_pf_raw(a: &DMatrix<f64>, c: &DVector<f64>, n: &DVector<f64>, opts: &PfOptions) -> Result<Allocation> {
    let (l, r) = a.shape();
    if n.len() != r || c.len() != l {
        return Err(Error::Dimension(format!("state has {} entries for {r} routes", n.len())));
    }
    if n.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(Error::InvalidArgument("state must be finite and nonnegative".into()));
    }
    let total: f64 = n.sum();
    if total == 0.0 {
        return Ok(Allocation::zero(l, r));
    }
    let pos: Vec<usize> = (0..r).filter(|&j| n[j] > 0.0).collect();
    let used: Vec<usize> = (0..l).filter(|&i| pos.iter().any(|&j| a[(i, j)] > 0.0)).collect();
    for &j in &pos {
        if used.iter().all(|&i| a[(i, j)] <= 0.0) {
            return Err(Error::InvalidNetwork(vec![format!("route {j} uses no link")]));
        }
    }
    let red = Reduced {
        a: DMatrix::from_fn(used.len(), pos.len(), |i, j| a[(used[i], pos[j])]),
        c: DVector::from_iterator(used.len(), used.iter().map(|&i| c[i])),
        p: DVector::from_iterator(pos.len(), pos.iter().map(|&j| n[j] / total)),
    };
    let (eta_red, residual, iterations) = projected_newton(&red, opts)?;
    let zeta = red.prices(&eta_red);
    let gamma_red = red.gamma(&zeta);
    let eta_red = min_norm_dual(&red, &eta_red, &zeta);

    let mut gamma = DVector::zeros(r);
    for (k, &j) in pos.iter().enumerate() {
        gamma[j] = gamma_red[k];
    }
    let mut eta = DVector::zeros(l);
    for (k, &i) in used.iter().enumerate() {
        eta[i] = eta_red[k] * total;
    }
    Ok(Allocation { gamma, eta, kkt_residual: residual, iterations })
}

fn projected_newton(red: &Reduced, opts: &PfOptions) -> Result<(DVector<f64>, f64, usize)> {
    const ARMIJO: f64 = 1e-4;
    let u = red.c.len();
    let min_c = red.c.iter().copied().fold(f64::INFINITY, f64::min);
    let mut eta = DVector::from_element(u, 1.0 / (u as f64 * min_c));
    let mut phi = red.objective(&eta);
    let mut residual = f64::INFINITY;

    for iter in 0..opts.max_iter {
        let zeta = red.prices(&eta);
        let grad = red.gradient(&zeta);
        residual = red.residual(&eta, &grad);
        if residual <= opts.tol {
            return Ok((eta, residual, iter));
        }
        let hess = red.hessian(&zeta);
        let proj_step = eta.iter().zip(grad.iter()).map(|(&e, &g)| (e - (e - g).max(0.0)).abs()).fold(0.0, f64::max);
        let eps = proj_step.min(1e-3);
        let active: Vec<bool> = (0..u).map(|i| eta[i] <= eps && grad[i] > 0.0).collect();

        let newton = newton_direction(&hess, &grad, &active);
        let mut accepted = false;
        for dir in newton.into_iter().chain(std::iter::once(scaled_gradient(&hess, &grad))) {
            let mut alpha = 1.0;
            for _ in 0..60 {
                let trial = (&eta + &dir * alpha).map(|x| x.max(0.0));
                let phi_trial = red.objective(&trial);
                let slope = grad.dot(&(&trial - &eta));
                if phi_trial.is_finite() && phi_trial <= phi + ARMIJO * slope + 4.0 * f64::EPSILON * phi.abs().max(1.0) {
                    let moved = (&trial - &eta).amax() > 0.0;
                    eta = trial;
                    phi = phi_trial;
                    accepted = moved;
                    break;
                }
                alpha *= 0.5;
            }
            if accepted {
                break;
            }
        }
        if !accepted {
            break;
        }
    }
    let zeta = red.prices(&eta);
    let grad = red.gradient(&zeta);
    residual = residual.min(red.residual(&eta, &grad));
    if residual <= opts.tol {
        return Ok((eta, residual, opts.max_iter));
    }
    let gamma = red.gamma(&zeta);
    Err(Error::NoConvergence {
        iterations: opts.max_iter,
        residual,
        eta: eta.iter().copied().collect(),
        gamma: gamma.iter().copied().collect(),
    })
}

/// Newton step on free coordinates, scaled gradient on active ones.
fn newton_direction(hess: &DMatrix<f64>, grad: &DVector<f64>, active: &[bool]) -> Option<DVector<f64>> {
    let free: Vec<usize> = (0..grad.len()).filter(|&i| !active[i]).collect();
    let mut dir = DVector::zeros(grad.len());
    for i in 0..grad.len() {
        if active[i] {
            dir[i] = -grad[i] / hess[(i, i)].max(1e-12);
        }
    }
    if free.is_empty() {
        return Some(dir);
    }
    let h_ff = DMatrix::from_fn(free.len(), free.len(), |i, j| hess[(free[i], free[j])]);
    let g_f = DVector::from_iterator(free.len(), free.iter().map(|&i| grad[i]));
    let trace = h_ff.trace().max(f64::MIN_POSITIVE);
    let mut shift = 0.0;
    for _ in 0..4 {
        let shifted = &h_ff + DMatrix::identity(free.len(), free.len()) * shift;
        if let Some(ch) = shifted.cholesky() {
            let d_f = -ch.solve(&g_f);
            if d_f.dot(&g_f) < 0.0 {
                for (k, &i) in free.iter().enumerate() {
                    dir[i] = d_f[k];
                }
                return Some(dir);
            }
        }
        shift = if shift == 0.0 { 1e-12 * trace } else { shift * 1e3 };
    }
    None
}

fn scaled_gradient(hess: &DMatrix<f64>, grad: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(grad.len(), (0..grad.len()).map(|i| -grad[i] / hess[(i, i)].max(1e-12)))
}

/// When the optimal dual is not unique, replace it by the minimum-norm
/// dual with the same route prices (the prices themselves are unique).
fn min_norm_dual(red: &Reduced, eta: &DVector<f64>, zeta: &DVector<f64>) -> DVector<f64> {
    let support: Vec<usize> = (0..eta.len()).filter(|&i| eta[i] > 0.0).collect();
    if support.is_empty() {
        return eta.clone();
    }
    let m = DMatrix::from_fn(red.a.ncols(), support.len(), |j, k| red.a[(support[k], j)]);
    if linalg::rank(&m, 1e-10) == support.len() {
        return eta.clone();
    }
    let svd = m.clone().svd(true, true);
    let Ok(pinv) = svd.pseudo_inverse(1e-12) else {
        return eta.clone();
    };
    let cand = pinv * zeta;
    let fits = (&m * &cand - zeta).amax() <= 1e-10 * zeta.amax().max(1.0);
    if !fits || cand.iter().any(|&x| x < -1e-12) {
        return eta.clone();
    }
    let mut out = DVector::zeros(eta.len());
    for (k, &i) in support.iter().enumerate() {
        out[i] = cand[k].max(0.0);
    }
    out
}

/// Per-phase allocation `Λ̃_{r,f} = (ñ_{r,f} / n_r) Λ_r` with `0/0 = 0`.
pub fn phase_split(n: &StateVector, gamma: &DVector<f64>, offsets: &[usize]) -> DVector<f64> {
    let mut out = DVector::zeros(n.phase.len());
    for r in 0..offsets.len() - 1 {
        let total = n.route[r];
        if total <= 0.0 {
            continue;
        }
        for j in offsets[r]..offsets[r + 1] {
            out[j] = n.phase[j] / total * gamma[r];
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct KktReport {
    /// `max_r |n_r/γ_r - ζ_r|` over `n_r > 0`; `|γ_r|` where `n_r = 0`.
    pub stationarity: f64,
    pub primal_feasibility: f64,
    pub dual_feasibility: f64,
    pub complementarity: f64,
    /// Maximum with count-proportional terms divided by `Σ n`.
    pub scaled_max: f64,
}

pub fn verify_kkt(n: &DVector<f64>, gamma: &DVector<f64>, eta: &DVector<f64>, a: &DMatrix<f64>, c: &DVector<f64>) -> KktReport {
    let zeta = a.transpose() * eta;
    let mut stationarity: f64 = 0.0;
    for r in 0..n.len() {
        let dev = if n[r] > 0.0 {
            if gamma[r] > 0.0 {
                (n[r] / gamma[r] - zeta[r]).abs()
            } else {
                f64::INFINITY
            }
        } else {
            gamma[r].abs()
        };
        stationarity = stationarity.max(dev);
    }
    let slack = a * gamma - c;
    let primal = slack.iter().copied().chain(gamma.iter().map(|g| -g)).fold(0.0, f64::max);
    let dual = eta.iter().map(|e| -e).fold(0.0, f64::max);
    let comp = eta.iter().zip(slack.iter()).map(|(e, s)| (e * s).abs()).fold(0.0, f64::max);
    let total = n.sum();
    let scale = if total > 0.0 { total } else { 1.0 };
    KktReport {
        stationarity,
        primal_feasibility: primal,
        dual_feasibility: dual,
        complementarity: comp,
        scaled_max: (stationarity / scale).max(primal).max(dual / scale).max(comp / scale),
    }
}

/// Fluid-model rates with the boundary extension.
#[derive(Debug, Clone)]
pub struct PhiExtension {
    pub phi: DVector<f64>,
    pub alloc: Allocation,
    /// Max of `(AΦ - c)_+`.
    pub capacity_violation: f64,
    /// Capacity respected within `1e-9`; such states are treated as regular.
    pub regular: bool,
}

/// Extends `Λ` to classes with `n_r = 0` through the balance equations
/// `d_0 = λ_0 + P^{00,T} d_0 + P^{+0,T} d_+`, `d = μΦ`.
///
/// Capacity violations are reported, never clipped.
pub fn extend_phi(n: &DVector<f64>, sys: &ClassSystem, opts: &PfOptions) -> Result<PhiExtension> {
    let alloc = solve_pf_raw(&sys.a, &sys.c, n, opts)?;
    let k = n.len();
    let zero: Vec<usize> = (0..k).filter(|&j| n[j] == 0.0).collect();
    let plus: Vec<usize> = (0..k).filter(|&j| n[j] > 0.0).collect();
    let mut phi = alloc.gamma.clone();
    if !zero.is_empty() {
        let p00t = DMatrix::from_fn(zero.len(), zero.len(), |i, j| {
            (if i == j { 1.0 } else { 0.0 }) - sys.routing[(zero[j], zero[i])]
        });
        let rhs = DVector::from_iterator(
            zero.len(),
            zero.iter().map(|&r| sys.lambda[r] + plus.iter().map(|&s| sys.routing[(s, r)] * sys.mu[s] * alloc.gamma[s]).sum::<f64>()),
        );
        let d0 = linalg::solve(&p00t, &rhs, "I - P^{00} on the empty classes")?;
        for (i, &r) in zero.iter().enumerate() {
            phi[r] = d0[i] / sys.mu[r];
        }
    }
    let violation = (&sys.a * &phi - &sys.c).iter().fold(0.0_f64, |acc, &v| acc.max(v));
    let regular = violation <= 1e-9 * linalg::vec_norm_max(&sys.c).max(1.0);
    Ok(PhiExtension { phi, alloc, capacity_violation: violation, regular })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::fixtures;
    use crate::phase::PhaseTypeDist;

    fn v(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    #[test]
    fn linear2_unit_state() {
        let net = fixtures::linear2();
        let al = solve_pf(&v(&[1.0, 1.0, 1.0]), &net, 1e-9).unwrap();
        let want = [1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0];
        for r in 0..3 {
            assert!((al.gamma[r] - want[r]).abs() < 1e-9, "{}", al.gamma);
        }
        assert!((al.eta[0] - 1.5).abs() < 1e-8 && (al.eta[1] - 1.5).abs() < 1e-8, "{}", al.eta);
        assert!(al.kkt_residual <= 1e-9);
    }

    #[test]
    fn single_link_proportional_split() {
        let d = || PhaseTypeDist::exponential(1.0).unwrap();
        let net = Network::new(DMatrix::from_element(1, 2, 1.0), v(&[1.0]), v(&[0.5, 0.5]), vec![d(), d()]).unwrap();
        let al = solve_pf(&v(&[3.0, 1.0]), &net, 1e-10).unwrap();
        assert!((al.gamma[0] - 0.75).abs() < 1e-10 && (al.gamma[1] - 0.25).abs() < 1e-10);
        assert!((al.eta[0] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn zero_route_gets_nothing() {
        let net = fixtures::linear2();
        let al = solve_pf(&v(&[0.0, 1.0, 1.0]), &net, 1e-10).unwrap();
        assert_eq!(al.gamma[0], 0.0);
        assert!((al.gamma[1] - 1.0).abs() < 1e-9 && (al.gamma[2] - 1.0).abs() < 1e-9);
        let zero = solve_pf(&v(&[0.0, 0.0, 0.0]), &net, 1e-10).unwrap();
        assert_eq!(zero.gamma.sum(), 0.0);
        assert_eq!(zero.eta.sum(), 0.0);
    }

    #[test]
    fn invalid_network_is_rejected() {
        let net = fixtures::linear2().with_lambda(v(&[0.3, 0.6, 0.0])).unwrap();
        assert!(matches!(solve_pf(&v(&[1.0, 1.0, 1.0]), &net, 1e-9), Err(Error::InvalidNetwork(_))));
    }

    #[test]
    fn kkt_report_examples() {
        let net = fixtures::linear2();
        let n = v(&[1.0, 1.0, 1.0]);
        let exact = verify_kkt(&n, &v(&[1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0]), &v(&[1.5, 1.5]), net.a(), net.c());
        assert!(exact.scaled_max < 1e-12 && exact.stationarity < 1e-12, "{exact:?}");
        let bumped = verify_kkt(&n, &v(&[1.0 / 3.0 + 0.01, 2.0 / 3.0, 2.0 / 3.0]), &v(&[1.5, 1.5]), net.a(), net.c());
        assert!(bumped.stationarity > 0.01);
        let zero = verify_kkt(&v(&[0.0; 3]), &v(&[0.0; 3]), &v(&[0.0; 2]), net.a(), net.c());
        assert_eq!(zero.scaled_max, 0.0);
    }

    #[test]
    fn phase_split_examples() {
        let net = fixtures::single_link(1.0, 0.5, PhaseTypeDist::erlang(2, 2.0).unwrap());
        let off = net.phase_offsets();
        let s = StateVector::from_counts(&[2, 2], &net).unwrap();
        assert_eq!(phase_split(&s, &v(&[1.0]), off).as_slice(), &[0.5, 0.5]);
        let s = StateVector::from_counts(&[1, 0], &net).unwrap();
        assert_eq!(phase_split(&s, &v(&[0.8]), off).as_slice(), &[0.8, 0.0]);
        let s = StateVector::from_counts(&[0, 0], &net).unwrap();
        assert_eq!(phase_split(&s, &v(&[0.0]), off).as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn extend_phi_examples() {
        let net = fixtures::linear2();
        let sys = net.class_system().unwrap();
        let opts = PfOptions::default();
        let pos = extend_phi(&v(&[1.0, 2.0, 3.0]), &sys, &opts).unwrap();
        assert!((pos.phi.clone() - pos.alloc.gamma.clone()).amax() == 0.0);
        let empty = extend_phi(&v(&[0.0, 0.0, 0.0]), &sys, &opts).unwrap();
        assert!((empty.phi - net.rho()).amax() < 1e-14);
        assert!(empty.regular);

        // Tandem: class 0 feeds class 1.
        let tandem = ClassSystem::general(
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            v(&[1.0]),
            v(&[0.2, 0.1]),
            v(&[2.0, 1.0]),
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
        )
        .unwrap();
        let ext = extend_phi(&v(&[0.0, 5.0]), &tandem, &opts).unwrap();
        assert!((ext.phi[0] - 0.1).abs() < 1e-15);
        assert!((ext.phi[1] - 1.0).abs() < 1e-9);
        assert!(!ext.regular);
        assert!((ext.capacity_violation - 0.1).abs() < 1e-9);
    }

    #[test]
    fn boundary_allocation_is_reported_infeasible() {
        let net = fixtures::linear2();
        let sys = net.class_system().unwrap();
        let ext = extend_phi(&v(&[9.0, 0.0, 0.0]), &sys, &PfOptions::default()).unwrap();
        assert!(!ext.regular);
        assert!((ext.capacity_violation - 2.0 / 3.0).abs() < 1e-9);
    }
}
