use pfnet::manifold::ManifoldGeometry;
use pfnet::network::fixtures;
use pfnet::sim::ScaledPath;
use pfnet::{simulate, DMatrix, DVector, Network, PhaseTypeDist, SimConfig};

fn within(x: f64, want: f64, ci: f64, rel: f64) -> bool {
    (x - want).abs() <= (3.0 * ci).max(rel * want)
}

#[test]
fn processor_sharing_queue_is_insensitive() {
    // E[N] = ρ / (1 - ρ) = 1 at ρ = 1/2 whatever the size law.
    let laws = [
        PhaseTypeDist::exponential(1.0).unwrap(),
        PhaseTypeDist::erlang(3, 3.0).unwrap(),
        PhaseTypeDist::hyperexponential(&[0.5, 0.5], &[2.0, 2.0 / 3.0]).unwrap(),
    ];
    for (i, d) in laws.into_iter().enumerate() {
        let net = fixtures::single_link(1.0, 0.5, d);
        let res = simulate(&SimConfig::new(net, 2e5, 100 + i as u64)).unwrap();
        assert!(within(res.mean_route[0], 1.0, res.ci_route[0], 0.03), "law {i}: {} ± {}", res.mean_route[0], res.ci_route[0]);
        assert!(res.max_capacity_violation <= 1e-9);
    }
}

#[test]
fn multiclass_link_matches_product_form() {
    // Two classes sharing one link: E[N_r] = ρ_r / (1 - ρ_0 - ρ_1).
    let d0 = PhaseTypeDist::erlang(2, 4.0).unwrap();
    let d1 = PhaseTypeDist::hyperexponential(&[0.3, 0.7], &[0.5, 3.0]).unwrap();
    let rho = [0.3, 0.4];
    let lambda = DVector::from_column_slice(&[rho[0] / d0.mean(), rho[1] / d1.mean()]);
    let net = Network::new(DMatrix::from_row_slice(1, 2, &[1.0, 1.0]), DVector::from_element(1, 1.0), lambda.clone(), vec![d0, d1]).unwrap();
    let res = simulate(&SimConfig::new(net, 3e5, 7)).unwrap();
    for r in 0..2 {
        let want = rho[r] / 0.3;
        assert!(within(res.mean_route[r], want, res.ci_route[r], 0.04), "route {r}: {} vs {want}", res.mean_route[r]);
        // Flow balance: departures match arrivals.
        assert!((res.throughput[r] - lambda[r]).abs() <= (4.0 * res.throughput_ci[r]).max(0.02 * lambda[r]));
    }
}

#[test]
fn bookkeeping_is_consistent() {
    let net = fixtures::linear2_with(|| PhaseTypeDist::erlang(2, 2.0).unwrap()).with_lambda(DVector::from_column_slice(&[0.25, 0.5, 0.5])).unwrap();
    let mut cfg = SimConfig::new(net, 2e4, 3);
    cfg.workload_grid = Some((1.0, 500.0));
    cfg.sample_interval = Some(5.0);
    let res = simulate(&cfg).unwrap();
    assert!(res.workload_identity_error < 1e-9, "{}", res.workload_identity_error);
    assert!(res.max_capacity_violation <= 1e-9);
    assert!(res.unused_capacity.iter().all(|&u| u >= -1e-9));
    assert_eq!(res.workload_path.len(), 501);
    assert!(res.samples.iter().all(|(t, n)| *t >= 0.2 * 2e4 && n.len() == 3));
    assert!(res.mean_route.iter().all(|m| m.is_finite() && *m > 0.0));

    let again = simulate(&cfg).unwrap();
    assert_eq!(res.final_state, again.final_state);
    assert_eq!(res.events, again.events);
    cfg.seed = 4;
    assert_ne!(simulate(&cfg).unwrap().events, res.events);
}

#[test]
fn unit_scaling_leaves_the_path_alone() {
    let net = fixtures::linear2();
    let geom = ManifoldGeometry::build(&net).unwrap();
    let mut cfg = SimConfig::heavy_traffic(&net, 5.0, &DVector::from_element(3, 1.0), 1e3, 9).unwrap();
    cfg.workload_grid = Some((0.5, 200.0));
    let res = simulate(&cfg).unwrap();
    let one = ScaledPath::from_result(&res, 1.0, &geom);
    for (i, (t, w)) in res.workload_path.iter().enumerate() {
        assert_eq!(one.times[i], *t);
        assert_eq!(&one.w_hat[i], w);
    }
    // Starting empty, the scaled workload starts at the origin.
    assert_eq!(one.w_hat[0].amax(), 0.0);
    let five = ScaledPath::from_result(&res, 5.0, &geom);
    assert!((five.times[10] - res.workload_path[10].0 / 25.0).abs() < 1e-12);
    assert!(five.ssc_metric().is_finite() && five.ssc_metric() >= 0.0);
}

#[test]
fn starts_from_a_given_state() {
    let net = fixtures::single_link(1.0, 0.5, PhaseTypeDist::exponential(1.0).unwrap());
    let mut cfg = SimConfig::new(net.clone(), 1e-9, 1);
    cfg.initial = Some(vec![50]);
    cfg.warmup = 0.0;
    let res = simulate(&cfg).unwrap();
    assert_eq!(res.final_state, vec![50]);
    cfg.initial = Some(vec![1, 2]);
    assert!(simulate(&cfg).is_err());
    let mut bad = SimConfig::new(net, 10.0, 1);
    bad.batches = 2;
    assert!(simulate(&bad).is_err());
}
