use pfnet::diffusion::{
    approx_route_law, approx_steady_state, check_product_form, covariance_free_process, gamma_from_moments, product_form_residuals,
    reflection_matrix, simulate_srbm, DiffusionParams, SrbmOptions,
};
use pfnet::network::fixtures;
use pfnet::{DMatrix, DVector, ManifoldGeometry, PhaseTypeDist};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

#[test]
fn product_form_holds_on_random_networks() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..100 {
        let net = fixtures::random_critical(&mut rng, 4, 8);
        let geom = ManifoldGeometry::build(&net).unwrap();
        let params = DiffusionParams::with_geometry(&net, &geom).unwrap();
        let check = check_product_form(&params);
        assert!(check.holds(1e-9), "{check:?}");
        reflection_matrix(&net, &geom).unwrap();

        // Ã Σ_X Ãᵀ = A diag(λβ^(2)) Aᵀ, and the shortcut Γ agrees.
        let a = geom.a_phase.clone();
        let lhs = &a * &params.sigma_x * a.transpose();
        let rhs = net.a() * DMatrix::from_diagonal(&params.d) * net.a().transpose();
        assert!((&lhs - &rhs).amax() < 1e-9 * rhs.amax());
        let shortcut = gamma_from_moments(&params.r, net.a(), &params.d);
        assert!((&shortcut - &params.gamma).amax() < 1e-9 * params.gamma.amax());

        // Perturbing one second moment breaks the condition.
        let mut d = params.d.clone();
        d[0] *= 1.5;
        assert!(!product_form_residuals(&params.r, &gamma_from_moments(&params.r, net.a(), &d)).holds(1e-6));
    }
}

#[test]
fn route_block_sums_to_work_variance_rate() {
    // The work brought by a route in time T is compound Poisson with
    // variance λβ^(2) T; the route block of Σ_X must sum to that rate.
    let d = PhaseTypeDist::hyperexponential(&[0.4, 0.6], &[0.5, 2.0]).unwrap();
    let lambda = 0.8;
    let net = fixtures::single_link(2.0, lambda * d.mean(), d.clone());
    let (sx, _) = covariance_free_process(&net).unwrap();
    assert!((sx.sum() - lambda * d.second_moment()).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let t = 50.0;
    let arrivals = Poisson::new(lambda * t).unwrap();
    let reps = 40_000;
    let works: Vec<f64> = (0..reps)
        .map(|_| {
            let m = arrivals.sample(&mut rng) as usize;
            (0..m).map(|_| d.sample(&mut rng)).sum()
        })
        .collect();
    let mean = works.iter().sum::<f64>() / reps as f64;
    let var = works.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
    let rate = var / t;
    // The sample variance of a compound Poisson sum has relative error of a
    // few percent at this size.
    assert!((rate / sx.sum() - 1.0).abs() < 0.05, "{rate} vs {}", sx.sum());
}

#[test]
fn approximation_samples_match_closed_form() {
    let base = fixtures::linear2();
    let net = pfnet::build_ht_instance(&base, 20.0, &DVector::from_element(3, 0.5)).unwrap();
    let approx = approx_steady_state(&net, 200_000, 3).unwrap();
    assert!((approx.slack[0] - 0.05).abs() < 1e-12 && (approx.slack[1] - 0.05).abs() < 1e-12);
    // ρ_0 = 1/3 - 1/40 on two links with slack 1/20.
    assert!((approx.mean[0] - (1.0 / 3.0 - 0.025) * 40.0).abs() < 1e-9);
    for r in 0..3 {
        let col: Vec<f64> = approx.samples.iter().map(|s| s[r]).collect();
        let m = col.iter().sum::<f64>() / col.len() as f64;
        let se = (approx.variance[r] / col.len() as f64).sqrt();
        assert!((m - approx.mean[r]).abs() < 4.0 * se, "route {r}: {m} vs {}", approx.mean[r]);
        let law = approx_route_law(&net, r).unwrap();
        assert!((law.mean() - approx.mean[r]).abs() < 1e-9);
        assert!((law.second_moment() - law.mean().powi(2) - approx.variance[r]).abs() < 1e-9 * approx.variance[r]);
    }
    // Critical networks have no slack.
    assert!(approx_steady_state(&base, 10, 1).is_err());
}

#[test]
fn approximation_is_insensitive() {
    let theta = DVector::from_element(3, 1.0);
    let exp = pfnet::build_ht_instance(&fixtures::linear2(), 10.0, &theta).unwrap();
    let erl = pfnet::build_ht_instance(&fixtures::linear2_with(|| PhaseTypeDist::erlang(3, 3.0).unwrap()), 10.0, &theta).unwrap();
    let a = pfnet::diffusion::approx_moments(&exp).unwrap();
    let b = pfnet::diffusion::approx_moments(&erl).unwrap();
    assert!((&a.1 - &b.1).amax() < 1e-12 && (&a.2 - &b.2).amax() < 1e-12);
}

#[test]
fn one_dimensional_reflected_motion_has_exponential_law() {
    let net = fixtures::single_link(1.0, 1.0, PhaseTypeDist::erlang(2, 2.0).unwrap());
    let params = DiffusionParams::new(&net).unwrap().with_link_theta(&DVector::from_element(1, 2.0)).unwrap();
    let opts = SrbmOptions { warmup: 50.0, sample_every: 2.0, samples: 4_000, seed: 11, ..SrbmOptions::default() };
    let res = simulate_srbm(&params, &opts).unwrap();
    assert!((res.means[0] / 0.5 - 1.0).abs() < 0.03, "{}", res.means[0]);
    assert!(res.samples.iter().all(|s| s[0] >= 0.0));
    assert!(simulate_srbm(&DiffusionParams::new(&net).unwrap(), &opts).is_err());
}
