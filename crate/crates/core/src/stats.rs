//! Estimators for simulation output.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

/// Time integrals of a piecewise-constant vector process.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TimeIntegral {
    pub duration: f64,
    pub sum: Vec<f64>,
    pub sum_sq: Vec<f64>,
}

impl TimeIntegral {
    pub fn new(dim: usize) -> Self {
        TimeIntegral { duration: 0.0, sum: vec![0.0; dim], sum_sq: vec![0.0; dim] }
    }

    pub fn add<I: IntoIterator<Item = f64>>(&mut self, values: I, dt: f64) {
        self.duration += dt;
        for (i, x) in values.into_iter().enumerate() {
            self.sum[i] += x * dt;
            self.sum_sq[i] += x * x * dt;
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        self.sum.iter().map(|s| s / self.duration).collect()
    }

    pub fn variance(&self) -> Vec<f64> {
        self.sum
            .iter()
            .zip(&self.sum_sq)
            .map(|(s, q)| {
                let m = s / self.duration;
                (q / self.duration - m * m).max(0.0)
            })
            .collect()
    }

    /// Associative merge of disjoint time windows.
    pub fn merge(&mut self, other: &TimeIntegral) {
        self.duration += other.duration;
        for i in 0..self.sum.len() {
            self.sum[i] += other.sum[i];
            self.sum_sq[i] += other.sum_sq[i];
        }
    }
}

/// Mean and 95% confidence half-width from batch means.
pub fn batch_ci(batches: &[f64]) -> (f64, f64) {
    let n = batches.len();
    if n == 0 {
        return (f64::NAN, f64::INFINITY);
    }
    let mean = batches.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, f64::INFINITY);
    }
    let var = batches.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64).map(|d| d.inverse_cdf(0.975)).unwrap_or(1.96);
    (mean, t * (var / n as f64).sqrt())
}

/// Two-sided Kolmogorov–Smirnov statistic of a sample against a continuous cdf.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter().enumerate().fold(0.0_f64, |acc, (i, &x)| {
        let f = cdf(x);
        acc.max(f - i as f64 / n).max((i + 1) as f64 / n - f)
    })
}

/// Sup distance between a weighted empirical law on `0, 1, 2, …` (weights
/// need not be normalised) and a cdf.
pub fn ks_weighted_counts(weights: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return f64::NAN;
    }
    let mut acc = 0.0;
    let mut d: f64 = 0.0;
    for (k, w) in weights.iter().enumerate() {
        acc += w / total;
        d = d.max((acc - cdf(k as f64)).abs());
    }
    d
}

/// Asymptotic 1% critical value of the one-sample KS statistic.
pub fn ks_critical_1pct(n: usize) -> f64 {
    1.6276 / (n as f64).sqrt()
}

pub fn correlation(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len()) as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

pub fn median(x: &[f64]) -> f64 {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Slope of the least-squares line through `(x, y)`.
pub fn slope(x: &[f64], y: &[f64]) -> f64 {
    let mx = mean(x);
    let my = mean(y);
    let num: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let den: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    num / den
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn time_integral_moments() {
        let mut t = TimeIntegral::new(1);
        t.add([1.0], 1.0);
        t.add([3.0], 1.0);
        assert_eq!(t.mean(), vec![2.0]);
        assert_eq!(t.variance(), vec![1.0]);
        let mut u = TimeIntegral::new(1);
        u.add([2.0], 2.0);
        u.merge(&t);
        assert_eq!(u.mean(), vec![2.0]);
    }

    #[test]
    fn batch_interval_uses_student_t() {
        let (m, hw) = batch_ci(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((hw - 4.302652729 * (1.0f64 / 3.0).sqrt()).abs() < 1e-6);
    }

    #[test]
    fn ks_of_uniform_grid() {
        let xs: Vec<f64> = (0..100).map(|i| (i as f64 + 0.5) / 100.0).collect();
        assert!((ks_statistic(&xs, |x| x.clamp(0.0, 1.0)) - 0.005).abs() < 1e-12);
        assert!(ks_weighted_counts(&[1.0, 1.0], |x| if x < 1.0 { 0.5 } else { 1.0 }) < 1e-15);
    }

    #[test]
    fn regression_and_correlation() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y = [1.0, 3.0, 5.0, 7.0];
        assert!((slope(&x, &y) - 2.0).abs() < 1e-14);
        assert!((correlation(&x, &y) - 1.0).abs() < 1e-14);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    }
}
