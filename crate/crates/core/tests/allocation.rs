use pfnet::alloc::{solve_pf_raw, PfOptions};
use pfnet::manifold::ManifoldGeometry;
use pfnet::network::fixtures;
use pfnet::{solve_pf, verify_kkt, DMatrix, DVector, Network};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_nets(count: usize, seed: u64) -> Vec<Network> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| fixtures::random_critical(&mut rng, 4, 8)).collect()
}

fn utility(n: &DVector<f64>, g: &DVector<f64>) -> f64 {
    (0..n.len()).filter(|&r| n[r] > 0.0).map(|r| n[r] * g[r].ln()).sum()
}

#[test]
fn linear2_matches_brute_force_grid() {
    // With both links saturated the only free variable is γ_0.
    let n = [1.0, 2.0, 5.0];
    let mut best = (f64::NEG_INFINITY, 0.0);
    for i in 1..100_000 {
        let g0 = i as f64 / 100_000.0;
        let u = n[0] * g0.ln() + n[1] * (1.0 - g0).ln() + n[2] * (1.0 - g0).ln();
        if u > best.0 {
            best = (u, g0);
        }
    }
    let al = solve_pf(&DVector::from_column_slice(&n), &fixtures::linear2(), 1e-10).unwrap();
    // Stationarity gives γ_0 = n_0 / Σ n.
    assert!((al.gamma[0] - 0.125).abs() < 1e-9);
    assert!((al.gamma[0] - best.1).abs() < 2e-5);
}

#[test]
fn kkt_holds_on_random_networks() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for net in random_nets(50, 1) {
        for _ in 0..20 {
            let n = DVector::from_fn(net.n_routes(), |_, _| if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.0..50.0_f64).floor() });
            let al = solve_pf(&n, &net, 1e-9).unwrap();
            assert!(al.kkt_residual <= 1e-9);
            let rep = verify_kkt(&n, &al.gamma, &al.eta, net.a(), net.c());
            assert!(rep.scaled_max <= 1e-7, "{rep:?} for n = {n}");
            assert!((net.a() * &al.gamma - net.c()).max() <= 1e-9);
            for r in 0..n.len() {
                if n[r] == 0.0 {
                    assert_eq!(al.gamma[r], 0.0);
                }
            }
            // Σ η_l c_l = Σ n_r follows from stationarity and complementarity.
            assert!((al.eta.dot(net.c()) - n.sum()).abs() <= 1e-7 * n.sum().max(1.0));
        }
    }
}

#[test]
fn utility_beats_random_feasible_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for net in random_nets(5, 2) {
        let n = DVector::from_fn(net.n_routes(), |_, _| rng.random_range(0.1..10.0));
        let al = solve_pf(&n, &net, 1e-10).unwrap();
        let best = utility(&n, &al.gamma);
        let hi = net.c().max();
        let mut accepted = 0;
        while accepted < 1000 {
            let g = DVector::from_fn(net.n_routes(), |_, _| rng.random_range(0.0..hi));
            if (net.a() * &g - net.c()).max() > 0.0 {
                continue;
            }
            accepted += 1;
            assert!(utility(&n, &g) <= best + 1e-9);
        }
    }
}

#[test]
fn allocation_equals_load_on_the_manifold() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for net in random_nets(20, 3) {
        let geom = ManifoldGeometry::build(&net).unwrap();
        for _ in 0..10 {
            let pi = DVector::from_fn(net.n_links(), |_, _| rng.random_range(0.1..5.0));
            let w = geom.lift(&pi).unwrap();
            let n_phase = geom.workload_to_state(&w);
            assert!(n_phase.min() >= -1e-12);
            let n = net.aggregate(n_phase.as_slice());
            let al = solve_pf(&n, &net, 1e-11).unwrap();
            assert!((&al.gamma - net.rho()).amax() < 1e-8, "{} vs {}", al.gamma, net.rho());
        }
    }
}

#[test]
fn route_prices_are_bounded_over_the_simplex() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let opts = PfOptions::with_tol(1e-10);
    for net in random_nets(5, 4) {
        let bound = DVector::from_fn(net.n_routes(), |r, _| (0..net.n_links()).map(|l| net.a()[(l, r)] / net.c()[l]).sum::<f64>());
        let mut sup_half = DVector::zeros(net.n_routes());
        let mut sup = DVector::zeros(net.n_routes());
        for i in 0..10_000 {
            let raw = DVector::from_fn(net.n_routes(), |_, _| -rng.random::<f64>().ln());
            let p = &raw / raw.sum();
            let al = solve_pf_raw(net.a(), net.c(), &p, &opts).unwrap();
            let zeta = al.route_prices(net.a());
            for r in 0..net.n_routes() {
                assert!(zeta[r] <= bound[r] * (1.0 + 1e-9));
                sup[r] = f64::max(sup[r], zeta[r]);
                if i < 5_000 {
                    sup_half[r] = f64::max(sup_half[r], zeta[r]);
                }
            }
        }
        for r in 0..net.n_routes() {
            assert!(sup[r].is_finite() && sup_half[r] >= 0.9 * sup[r], "route {r}: {} vs {}", sup_half[r], sup[r]);
        }
    }
}

#[test]
fn degenerate_dual_is_minimum_norm() {
    // Two identical routes over two links: only η_0 + η_1 is pinned.
    let a = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
    let c = DVector::from_column_slice(&[1.0, 1.0]);
    let al = solve_pf_raw(&a, &c, &DVector::from_column_slice(&[2.0]), &PfOptions::default()).unwrap();
    assert!((al.gamma[0] - 1.0).abs() < 1e-9);
    assert!((al.eta[0] - 1.0).abs() < 1e-8 && (al.eta[1] - 1.0).abs() < 1e-8, "{}", al.eta);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn radially_homogeneous(seed in 0u64..1000, y in prop::sample::select(vec![0.1, 7.0, 1000.0])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = fixtures::random_critical(&mut rng, 4, 8);
        let n = DVector::from_fn(net.n_routes(), |_, _| rng.random_range(0.01..20.0));
        let a = solve_pf(&n, &net, 1e-9).unwrap();
        let b = solve_pf(&(&n * y), &net, 1e-9).unwrap();
        prop_assert!((&a.gamma - &b.gamma).amax() < 1e-8);
        prop_assert!((&a.eta * y - &b.eta).amax() < 1e-8 * y.max(1.0));
    }

    #[test]
    fn extension_is_homogeneous(seed in 0u64..1000, y in prop::sample::select(vec![0.1, 7.0, 1000.0])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = fixtures::random_critical(&mut rng, 3, 6);
        let sys = net.class_system().unwrap();
        let n = DVector::from_fn(sys.n_classes(), |_, _| if rng.random_bool(0.4) { 0.0 } else { rng.random_range(0.01..20.0) });
        let opts = PfOptions::default();
        let a = pfnet::extend_phi(&n, &sys, &opts).unwrap();
        let b = pfnet::extend_phi(&(&n * y), &sys, &opts).unwrap();
        prop_assert!((&a.phi - &b.phi).amax() < 1e-8);
    }
}
