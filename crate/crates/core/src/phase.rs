//! Phase-type job-size distributions.
//!
//! A job enters phase `f` with probability `a_f`, spends an exponential
//! time with rate `mu_f` there, then moves to phase `f'` with probability
//! `P[f][f']` or leaves with the remaining probability.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

const PROB_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct PhaseTypeDist {
    a: DVector<f64>,
    p: DMatrix<f64>,
    mu: DVector<f64>,
    /// `(I - Pᵀ)⁻¹`
    visits_t: DMatrix<f64>,
}

impl PhaseTypeDist {
    /// Builds a distribution, checking that `a` is a probability vector,
    /// `P` is sub-stochastic with `I - P` invertible and all rates are
    /// positive. Zero entries of `a` are accepted here; strict positivity
    /// is reported separately by [`PhaseTypeDist::has_positive_entry`].
    pub fn new(a: DVector<f64>, p: DMatrix<f64>, mu: DVector<f64>) -> Result<Self> {
        let f = a.len();
        if f == 0 {
            return Err(Error::InvalidDistribution("no phases".into()));
        }
        if p.shape() != (f, f) || mu.len() != f {
            return Err(Error::InvalidDistribution(format!(
                "shape mismatch: a has {f} entries, P is {}x{}, mu has {}",
                p.nrows(),
                p.ncols(),
                mu.len()
            )));
        }
        if a.iter().any(|&x| !x.is_finite() || x < 0.0) {
            return Err(Error::InvalidDistribution("initial probabilities must be nonnegative".into()));
        }
        if (a.sum() - 1.0).abs() > PROB_TOL {
            return Err(Error::InvalidDistribution(format!(
                "initial probabilities sum to {} instead of 1",
                a.sum()
            )));
        }
        if p.iter().any(|&x| !x.is_finite() || x < 0.0) {
            return Err(Error::InvalidDistribution("transition matrix has negative entries".into()));
        }
        for (i, row) in p.row_iter().enumerate() {
            if row.sum() > 1.0 + PROB_TOL {
                return Err(Error::InvalidDistribution(format!("row {i} of P sums to {} > 1", row.sum())));
            }
        }
        if mu.iter().any(|&x| !x.is_finite() || x <= 0.0) {
            return Err(Error::InvalidDistribution("phase rates must be positive".into()));
        }
        let i_minus_pt = DMatrix::identity(f, f) - p.transpose();
        let visits_t = linalg::inverse(&i_minus_pt, "I - P of a phase-type distribution")
            .map_err(|_| Error::InvalidDistribution("I - P is singular".into()))?;
        Ok(Self { a, p, mu, visits_t })
    }

    pub fn exponential(rate: f64) -> Result<Self> {
        Self::new(DVector::from_element(1, 1.0), DMatrix::zeros(1, 1), DVector::from_element(1, rate))
    }

    /// Erlang-`k` with rate `rate` in every phase (mean `k / rate`).
    pub fn erlang(k: usize, rate: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidDistribution("Erlang order must be at least 1".into()));
        }
        let mut a = DVector::zeros(k);
        a[0] = 1.0;
        let p = DMatrix::from_fn(k, k, |i, j| if j == i + 1 { 1.0 } else { 0.0 });
        Self::new(a, p, DVector::from_element(k, rate))
    }

    pub fn hyperexponential(probs: &[f64], rates: &[f64]) -> Result<Self> {
        let f = probs.len();
        if rates.len() != f {
            return Err(Error::InvalidDistribution("hyperexponential: probs and rates differ in length".into()));
        }
        Self::new(DVector::from_column_slice(probs), DMatrix::zeros(f, f), DVector::from_column_slice(rates))
    }

    /// Sum of independent exponentials with the given rates, in series.
    pub fn series(rates: &[f64]) -> Result<Self> {
        let k = rates.len();
        if k == 0 {
            return Err(Error::InvalidDistribution("empty series".into()));
        }
        let mut a = DVector::zeros(k);
        a[0] = 1.0;
        let p = DMatrix::from_fn(k, k, |i, j| if j == i + 1 { 1.0 } else { 0.0 });
        Self::new(a, p, DVector::from_column_slice(rates))
    }

    pub fn phases(&self) -> usize {
        self.a.len()
    }

    pub fn initial(&self) -> &DVector<f64> {
        &self.a
    }

    pub fn transitions(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn rates(&self) -> &DVector<f64> {
        &self.mu
    }

    /// Per-phase mean sojourn times `m_f = 1 / mu_f`.
    pub fn phase_means(&self) -> DVector<f64> {
        self.mu.map(|x| 1.0 / x)
    }

    /// `(I - Pᵀ)⁻¹`.
    pub fn visits_transposed(&self) -> &DMatrix<f64> {
        &self.visits_t
    }

    /// Absorption probabilities `P_{f,0} = 1 - Σ_f' P_{f,f'}`.
    pub fn exit_probs(&self) -> DVector<f64> {
        DVector::from_iterator(self.phases(), self.p.row_iter().map(|r| (1.0 - r.sum()).max(0.0)))
    }

    /// Whether every phase can be entered directly (`a_f > 0` for all `f`).
    pub fn has_positive_entry(&self) -> bool {
        self.a.iter().all(|&x| x > 0.0)
    }

    /// Expected number of visits to each phase, `(I - Pᵀ)⁻¹ a`.
    pub fn expected_visits(&self) -> DVector<f64> {
        &self.visits_t * &self.a
    }

    /// Mean size `β = mᵀ (I - Pᵀ)⁻¹ a`.
    pub fn mean(&self) -> f64 {
        self.phase_means().dot(&self.expected_visits())
    }

    /// Second moment `2 mᵀ (I - Pᵀ)⁻¹ diag(m) (I - Pᵀ)⁻¹ a`.
    pub fn second_moment(&self) -> f64 {
        let m = self.phase_means();
        let inner = m.component_mul(&self.expected_visits());
        2.0 * m.dot(&(&self.visits_t * inner))
    }

    /// Second moment via the load-vector route, `(2/λ) mᵀ (I - Pᵀ)⁻¹ ρ_r`.
    /// Agrees with [`second_moment`](Self::second_moment) for any `lambda > 0`.
    pub fn second_moment_via_loads(&self, lambda: f64) -> Result<f64> {
        if !(lambda > 0.0) {
            return Err(Error::InvalidArgument(format!("arrival rate must be positive, got {lambda}")));
        }
        let rho = self.phase_loads(lambda);
        Ok(2.0 / lambda * self.phase_means().dot(&(&self.visits_t * rho)))
    }

    /// Phase-level loads `λ diag(m) (I - Pᵀ)⁻¹ a`.
    pub fn phase_loads(&self, lambda: f64) -> DVector<f64> {
        self.phase_means().component_mul(&self.expected_visits()) * lambda
    }

    /// Sub-generator `T = diag(mu) (P - I)`.
    pub fn sub_generator(&self) -> DMatrix<f64> {
        let f = self.phases();
        DMatrix::from_fn(f, f, |i, j| self.mu[i] * (self.p[(i, j)] - if i == j { 1.0 } else { 0.0 }))
    }

    /// `P(X <= x) = 1 - aᵀ exp(T x) 1`.
    pub fn cdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        let e = (self.sub_generator() * x).exp();
        let survival = (self.a.transpose() * e * DVector::from_element(self.phases(), 1.0))[0];
        (1.0 - survival).clamp(0.0, 1.0)
    }

    fn pick<R: Rng + ?Sized>(weights: impl Iterator<Item = f64>, rng: &mut R) -> Option<usize> {
        let mut u: f64 = rng.random();
        for (i, w) in weights.enumerate() {
            if u < w {
                return Some(i);
            }
            u -= w;
        }
        None
    }

    /// Samples an initial phase from `a`.
    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        Self::pick(self.a.iter().copied(), rng).unwrap_or_else(|| self.a.iamax())
    }

    /// Samples the phase visited after `f`, or `None` on absorption.
    pub fn sample_next<R: Rng + ?Sized>(&self, f: usize, rng: &mut R) -> Option<usize> {
        Self::pick(self.p.row(f).iter().copied(), rng)
    }

    /// Draws one job size by running the absorbing chain.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let mut phase = Some(self.sample_initial(rng));
        let mut total = 0.0;
        while let Some(f) = phase {
            total += Exp::new(self.mu[f]).expect("positive rate").sample(rng);
            phase = self.sample_next(f, rng);
        }
        total
    }
}

/// Job-size law as written in a network file: either explicit `(a, P, mu)`
/// or one of the named shortcuts.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum DistSpec {
    Explicit(ExplicitDist),
    Named(NamedDist),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExplicitDist {
    pub a: Vec<f64>,
    #[serde(rename = "P")]
    pub p: Vec<Vec<f64>>,
    pub mu: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum NamedDist {
    Exp { rate: f64 },
    /// Erlang-k with per-phase rate `rate`.
    Erlang { k: usize, rate: f64 },
    Hyperexp { p: Vec<f64>, rates: Vec<f64> },
}

impl DistSpec {
    pub fn build(&self) -> Result<PhaseTypeDist> {
        match self {
            DistSpec::Explicit(e) => PhaseTypeDist::new(
                DVector::from_column_slice(&e.a),
                linalg::from_rows(&e.p, "P").map_err(|e| Error::InvalidDistribution(e.to_string()))?,
                DVector::from_column_slice(&e.mu),
            ),
            DistSpec::Named(NamedDist::Exp { rate }) => PhaseTypeDist::exponential(*rate),
            DistSpec::Named(NamedDist::Erlang { k, rate }) => PhaseTypeDist::erlang(*k, *rate),
            DistSpec::Named(NamedDist::Hyperexp { p, rates }) => PhaseTypeDist::hyperexponential(p, rates),
        }
    }

    pub fn from_dist(d: &PhaseTypeDist) -> Self {
        DistSpec::Explicit(ExplicitDist {
            a: d.initial().iter().copied().collect(),
            p: linalg::to_rows(d.transitions()),
            mu: d.rates().iter().copied().collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn erlang2() -> PhaseTypeDist {
        PhaseTypeDist::erlang(2, 2.0).unwrap()
    }

    fn hyper() -> PhaseTypeDist {
        PhaseTypeDist::hyperexponential(&[0.5, 0.5], &[2.0, 2.0 / 3.0]).unwrap()
    }

    #[test]
    fn mean_size_examples() {
        assert!((PhaseTypeDist::exponential(2.0).unwrap().mean() - 0.5).abs() < 1e-15);
        assert!((erlang2().mean() - 1.0).abs() < 1e-14);
        assert!((hyper().mean() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn second_moment_examples() {
        assert!((PhaseTypeDist::exponential(2.0).unwrap().second_moment() - 0.5).abs() < 1e-15);
        assert!((erlang2().second_moment() - 1.5).abs() < 1e-14);
        assert!((hyper().second_moment() - 2.5).abs() < 1e-14);
    }

    #[test]
    fn second_moment_does_not_depend_on_lambda() {
        for lambda in [0.1, 1.0, 7.0] {
            for d in [erlang2(), hyper()] {
                let via = d.second_moment_via_loads(lambda).unwrap();
                assert!((via - d.second_moment()).abs() < 1e-12);
            }
        }
        assert!(erlang2().second_moment_via_loads(0.0).is_err());
    }

    #[test]
    fn phase_load_examples() {
        let l = erlang2().phase_loads(1.0);
        assert!((l[0] - 0.5).abs() < 1e-15 && (l[1] - 0.5).abs() < 1e-15);
        let l = hyper().phase_loads(2.0);
        assert!((l[0] - 0.5).abs() < 1e-14 && (l[1] - 1.5).abs() < 1e-14);
        let l = PhaseTypeDist::exponential(4.0).unwrap().phase_loads(1.0);
        assert!((l[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn rejects_invalid_inputs() {
        let bad_sum = PhaseTypeDist::new(DVector::from_vec(vec![0.5, 0.4]), DMatrix::zeros(2, 2), DVector::from_vec(vec![1.0, 1.0]));
        assert!(bad_sum.is_err());
        let stochastic_cycle = PhaseTypeDist::new(
            DVector::from_vec(vec![1.0, 0.0]),
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]),
            DVector::from_vec(vec![1.0, 1.0]),
        );
        assert!(matches!(stochastic_cycle, Err(Error::InvalidDistribution(_))));
        assert!(PhaseTypeDist::exponential(0.0).is_err());
        assert!(PhaseTypeDist::erlang(0, 1.0).is_err());
    }

    #[test]
    fn cdf_matches_closed_forms() {
        let e = PhaseTypeDist::exponential(2.0).unwrap();
        assert!((e.cdf(0.7) - (1.0 - (-1.4f64).exp())).abs() < 1e-12);
        let x: f64 = 1.3;
        let erl = 1.0 - (-2.0 * x).exp() * (1.0 + 2.0 * x);
        assert!((erlang2().cdf(x) - erl).abs() < 1e-12);
        assert_eq!(e.cdf(-1.0), 0.0);
    }

    #[test]
    fn named_specs_expand() {
        let s: DistSpec = serde_json::from_str(r#"{"kind":"erlang","k":2,"rate":2.0}"#).unwrap();
        assert!((s.build().unwrap().mean() - 1.0).abs() < 1e-14);
        let s: DistSpec = serde_json::from_str(r#"{"a":[1.0],"P":[[0.0]],"mu":[4.0]}"#).unwrap();
        assert!((s.build().unwrap().mean() - 0.25).abs() < 1e-15);
        assert!(serde_json::from_str::<DistSpec>(r#"{"a":[1.0],"P":[[0.0]],"mu":[4.0],"x":1}"#).is_err());
    }

    #[test]
    fn sampler_reproduces_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = hyper();
        let n = 200_000;
        let mean = (0..n).map(|_| d.sample(&mut rng)).sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
    }
}
