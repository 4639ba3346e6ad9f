//! Invariant-manifold geometry and the discrete Skorokhod map.
//!
//! Workloads live in phase space. The manifold is the cone `{BÃᵀπ : π >= 0}`
//! and every workload splits as `w = BÃᵀπ + BHz` with `π = Gᵀw`, `z = Hᵀw`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::Serialize;

use crate::alloc::{solve_pf_raw, PfOptions};
use crate::error::{Error, Result};
use crate::linalg;
use crate::network::{ClassSystem, Network, StateVector};

/// Per-step tolerance and iteration cap of the projected Gauss–Seidel solver.
pub const LCP_TOL: f64 = 1e-12;
pub const LCP_MAX_ITER: usize = 10_000;

#[derive(Debug, Clone, Serialize)]
pub struct ManifoldGeometry {
    /// Diagonal of `B`.
    pub b: DVector<f64>,
    pub a_phase: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub r: DMatrix<f64>,
    /// `diag(m̃)(I - P̃ᵀ)⁻¹`.
    pub workload_map: DMatrix<f64>,
    /// Inverse of `workload_map`: `(I - P̃ᵀ) diag(μ̃)`.
    pub state_map: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WorkloadDecomposition {
    pub pi: DVector<f64>,
    pub z: DVector<f64>,
}

/// Residuals of the defining identities.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct IdentityResiduals {
    /// `‖GᵀBÃᵀ - I‖`
    pub g_b_at: f64,
    /// `‖ÃBH‖`
    pub a_b_h: f64,
    /// `‖GᵀBH‖`
    pub g_b_h: f64,
    /// `‖HᵀBH - I‖`
    pub h_b_h: f64,
    /// `‖R - Rᵀ‖`
    pub r_asymmetry: f64,
    /// Smallest eigenvalue of `R`.
    pub r_min_eigenvalue: f64,
    pub basis_condition: f64,
}

impl IdentityResiduals {
    pub fn max(&self) -> f64 {
        self.g_b_at.max(self.a_b_h).max(self.g_b_h).max(self.h_b_h).max(self.r_asymmetry)
    }
}

impl ManifoldGeometry {
    pub fn build(net: &Network) -> Result<Self> {
        net.ensure_valid()?;
        net.ensure_critical()?;
        Self::from_class_system(&net.class_system()?)
    }

    /// Geometry of a critically loaded multiclass system; classes play the
    /// role of phases.
    pub fn from_class_system(sys: &ClassSystem) -> Result<Self> {
        if !sys.is_critical() {
            return Err(Error::InvalidNetwork(vec!["class system is not critically loaded".into()]));
        }
        let k = sys.n_classes();
        let m = sys.mu.map(|x| 1.0 / x);
        let visits_t = linalg::inverse(&(DMatrix::identity(k, k) - sys.routing.transpose()), "I - P̃ᵀ")?;
        let b = m.component_mul(&(&visits_t * &sys.rho));
        if b.iter().any(|&x| !(x > 0.0)) {
            return Err(Error::Numeric("B has a nonpositive diagonal entry".into()));
        }
        let a_phase = sys.a.clone();
        let abat = &a_phase * DMatrix::from_diagonal(&b) * a_phase.transpose();
        let r = linalg::inverse(&abat, "ÃBÃᵀ")?;
        let r = (&r + r.transpose()) * 0.5;
        let g = a_phase.transpose() * &r;
        let h = b_orthonormal_kernel(&a_phase, &b);
        let workload_map = DMatrix::from_diagonal(&m) * &visits_t;
        let state_map = (DMatrix::identity(k, k) - sys.routing.transpose()) * DMatrix::from_diagonal(&sys.mu);
        Ok(ManifoldGeometry { b, a_phase, g, h, r, workload_map, state_map })
    }

    pub fn n_links(&self) -> usize {
        self.a_phase.nrows()
    }

    pub fn n_phases(&self) -> usize {
        self.a_phase.ncols()
    }

    pub fn b_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.b)
    }

    pub fn residuals(&self) -> IdentityResiduals {
        let l = self.n_links();
        let km = self.h.ncols();
        let bm = self.b_matrix();
        let bh = &bm * &self.h;
        let eig = self.r.clone().symmetric_eigen().eigenvalues;
        IdentityResiduals {
            g_b_at: linalg::norm_max(&(self.g.transpose() * &bm * self.a_phase.transpose() - DMatrix::identity(l, l))),
            a_b_h: linalg::norm_max(&(&self.a_phase * &bh)),
            g_b_h: linalg::norm_max(&(self.g.transpose() * &bh)),
            h_b_h: linalg::norm_max(&(self.h.transpose() * &bh - DMatrix::identity(km, km))),
            r_asymmetry: linalg::asymmetry(&self.r),
            r_min_eigenvalue: eig.iter().copied().fold(f64::INFINITY, f64::min),
            basis_condition: self.basis_condition(),
        }
    }

    /// Ratio of extreme singular values of `[G | H]`; distances depend on
    /// this basis, so it is reported next to any distance threshold.
    pub fn basis_condition(&self) -> f64 {
        let mut gh = DMatrix::zeros(self.n_phases(), self.n_phases());
        gh.view_mut((0, 0), self.g.shape()).copy_from(&self.g);
        gh.view_mut((0, self.g.ncols()), self.h.shape()).copy_from(&self.h);
        let sv = gh.singular_values();
        let max = sv.max();
        let min = sv.min();
        if min > 0.0 {
            max / min
        } else {
            f64::INFINITY
        }
    }

    /// `Σ_l (-g_lᵀw)⁺ + Σ_m |h_mᵀw|`.
    pub fn dist(&self, w: &DVector<f64>) -> f64 {
        let pi = self.g.tr_mul(w);
        let z = self.h.tr_mul(w);
        pi.iter().map(|&x| (-x).max(0.0)).sum::<f64>() + z.iter().map(|x| x.abs()).sum::<f64>()
    }

    /// `BÃᵀπ` for `π >= 0`.
    pub fn lift(&self, pi: &DVector<f64>) -> Result<DVector<f64>> {
        if pi.len() != self.n_links() {
            return Err(Error::Dimension(format!("π has {} entries for {} links", pi.len(), self.n_links())));
        }
        if pi.iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::InvalidArgument("π must be nonnegative".into()));
        }
        Ok(self.b.component_mul(&self.a_phase.tr_mul(pi)))
    }

    pub fn decompose(&self, w: &DVector<f64>) -> WorkloadDecomposition {
        WorkloadDecomposition { pi: self.g.tr_mul(w), z: self.h.tr_mul(w) }
    }

    pub fn reconstruct(&self, d: &WorkloadDecomposition) -> DVector<f64> {
        self.b.component_mul(&(self.a_phase.tr_mul(&d.pi) + &self.h * &d.z))
    }

    pub fn state_to_workload(&self, n: &StateVector) -> DVector<f64> {
        &self.workload_map * &n.phase
    }

    /// Phase counts with the given workload (may have negative entries if
    /// `w` is not the workload of any state).
    pub fn workload_to_state(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.state_map * w
    }

    /// Solves the discrete dynamic complementarity problem driven by the
    /// phase-level path `x` (sampled on a grid, `x[0]` the origin) from
    /// `w0` on the manifold.
    pub fn skorokhod_solve(&self, x: &[DVector<f64>], w0: &DVector<f64>) -> Result<SkorokhodPath> {
        let k = self.n_phases();
        if x.iter().any(|xi| xi.len() != k) || w0.len() != k {
            return Err(Error::Dimension("driving path must live in phase space".into()));
        }
        let Some(x0) = x.first() else {
            return Err(Error::InvalidArgument("empty driving path".into()));
        };
        let l = self.n_links();
        let mut wg = self.g.tr_mul(w0);
        let mut y = DVector::zeros(l);
        let mut out = SkorokhodPath::default();
        let mut dy = DVector::zeros(l);
        let push = |wg: &DVector<f64>, y: &DVector<f64>, xi: &DVector<f64>, out: &mut SkorokhodPath| {
            out.wg.push(wg.clone());
            out.w.push(self.b.component_mul(&self.a_phase.tr_mul(wg)));
            out.y.push(y.clone());
            out.z.push(-self.h.tr_mul(&(xi - x0)));
        };
        push(&wg, &y, x0, &mut out);
        for (step, pair) in x.windows(2).enumerate() {
            let q = &wg + self.g.tr_mul(&(&pair[1] - &pair[0]));
            let iters = lcp_pgs(&self.r, &q, &mut dy, LCP_TOL, LCP_MAX_ITER).map_err(|residual| Error::LcpNoConvergence {
                step: step + 1,
                residual,
            })?;
            out.max_lcp_iterations = out.max_lcp_iterations.max(iters);
            wg = &q + &self.r * &dy;
            out.max_complementarity = out.max_complementarity.max(wg.dot(&dy).abs());
            y += &dy;
            push(&wg, &y, &pair[1], &mut out);
        }
        Ok(out)
    }
}

/// Output of [`ManifoldGeometry::skorokhod_solve`], one entry per grid point.
#[derive(Debug, Clone, Default, Serialize)]
pub struct SkorokhodPath {
    pub w: Vec<DVector<f64>>,
    pub wg: Vec<DVector<f64>>,
    pub y: Vec<DVector<f64>>,
    pub z: Vec<DVector<f64>>,
    /// Max over steps of `|w_Gᵀ Δy|`.
    pub max_complementarity: f64,
    pub max_lcp_iterations: usize,
}

/// Kernel of `ÃB` as columns `H` with `HᵀBH = I`.
fn b_orthonormal_kernel(a_phase: &DMatrix<f64>, b: &DVector<f64>) -> DMatrix<f64> {
    let kernel = linalg::kernel_basis(a_phase);
    let mut h = DMatrix::zeros(kernel.nrows(), kernel.ncols());
    for j in 0..kernel.ncols() {
        let mut v = kernel.column(j).component_div(b);
        for i in 0..j {
            let hi = h.column(i).into_owned();
            let proj = v.dot(&hi.component_mul(b));
            v -= hi * proj;
        }
        let norm = v.dot(&v.component_mul(b)).sqrt();
        h.set_column(j, &(v / norm));
    }
    h
}

/// Projected Gauss–Seidel for the LCP `w = q + M d >= 0, d >= 0, wᵀd = 0`
/// with symmetric positive definite `M`. `d` holds the warm start on entry.
/// Returns the sweep count, or the final residual on failure.
pub fn lcp_pgs(m: &DMatrix<f64>, q: &DVector<f64>, d: &mut DVector<f64>, tol: f64, max_iter: usize) -> std::result::Result<usize, f64> {
    let n = q.len();
    if q.iter().all(|&x| x >= 0.0) {
        d.fill(0.0);
        return Ok(0);
    }
    let scale = q.amax().max(1.0);
    let mut residual = f64::INFINITY;
    for iter in 1..=max_iter {
        for i in 0..n {
            let wi = q[i] + m.row(i).transpose().dot(d);
            d[i] = (d[i] - wi / m[(i, i)]).max(0.0);
        }
        let w = q + m * &*d;
        residual = w
            .iter()
            .zip(d.iter())
            .map(|(&wi, &di)| (-wi).max(0.0).max((wi * di).abs()))
            .fold(0.0, f64::max);
        if residual <= tol * scale {
            return Ok(iter);
        }
    }
    Err(residual)
}

/// Result of the empirical search for the distance threshold below which
/// links with large workload are saturated.
#[derive(Debug, Clone, Serialize)]
pub struct SigmaSearch {
    /// Largest tested threshold without violations.
    pub sigma: Option<f64>,
    /// `(σ, states tested, violations)` per candidate.
    pub trials: Vec<(f64, usize, usize)>,
}

/// For candidate thresholds `sigmas` (tried in the given order, normally
/// decreasing), samples states with `|w| <= m_bound` and `dist(w) <= σ` and
/// checks that every link with `g_lᵀw > eps` is saturated to `1e-6`.
pub fn sigma_search<R: Rng + ?Sized>(
    net: &Network,
    geom: &ManifoldGeometry,
    m_bound: f64,
    eps: f64,
    sigmas: &[f64],
    samples: usize,
    rng: &mut R,
) -> Result<SigmaSearch> {
    let l = geom.n_links();
    let km = geom.h.ncols();
    let opts = PfOptions::with_tol(1e-12);
    let mut trials = Vec::new();
    let mut best = None;
    for &sigma in sigmas {
        let mut tested = 0;
        let mut bad = 0;
        let mut attempts = 0;
        while tested < samples && attempts < 50 * samples {
            attempts += 1;
            let pi = DVector::from_fn(l, |_, _| rng.random_range(-sigma / (2.0 * l as f64)..m_bound));
            let z = if km == 0 {
                DVector::zeros(0)
            } else {
                let raw: DVector<f64> = DVector::from_fn(km, |_, _| rng.random_range(-1.0..1.0));
                let s = raw.iter().map(|x: &f64| x.abs()).sum::<f64>().max(f64::MIN_POSITIVE);
                raw * (rng.random_range(0.0..sigma / 2.0) / s)
            };
            let w = geom.reconstruct(&WorkloadDecomposition { pi: pi.clone(), z });
            if w.norm() > m_bound || geom.dist(&w) > sigma {
                continue;
            }
            let n_phase = geom.workload_to_state(&w);
            if n_phase.iter().any(|&x| x < 0.0) {
                continue;
            }
            tested += 1;
            let n_route = net.aggregate(n_phase.as_slice());
            let alloc = solve_pf_raw(net.a(), net.c(), &n_route, &opts)?;
            let load = net.a() * &alloc.gamma;
            let violated = (0..l).any(|i| pi[i] > eps && (load[i] - net.c()[i]).abs() > 1e-6);
            if violated {
                bad += 1;
            }
        }
        trials.push((sigma, tested, bad));
        if bad == 0 && tested > 0 && best.is_none() {
            best = Some(sigma);
        }
    }
    Ok(SigmaSearch { sigma: best, trials })
}
