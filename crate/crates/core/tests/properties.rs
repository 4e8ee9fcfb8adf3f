use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use twoscale::algorithm::{averaged_step, step, step_matrix, IterateState, StepSchedule};
use twoscale::analysis::{lemma1_bound, theorem1_bound, BoundParams};
use twoscale::network::{build_topology, lazy_weights, metropolis_weights, TopologyKind};
use twoscale::noise::{sample_noise, NoiseModel};
use twoscale::numerics::{spectral_norm_bound_check, DenseMatrix, DenseVector};
use twoscale::problem::{exact_solution, random_heterogeneous_instance, random_instance};

fn kind_strategy() -> impl Strategy<Value = TopologyKind> {
    prop_oneof![
        Just(TopologyKind::Ring),
        Just(TopologyKind::Path),
        Just(TopologyKind::Star),
        Just(TopologyKind::Complete),
        Just(TopologyKind::ErdosRenyi),
    ]
}

fn topology(kind: TopologyKind, n: usize, seed: u64) -> twoscale::network::Topology {
    let prob = (kind == TopologyKind::ErdosRenyi).then_some(0.5);
    build_topology(kind, n, prob, seed).unwrap()
}

fn matrix(rows: usize, cols: usize, entries: &[f64]) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |i, j| entries[(i * cols + j) % entries.len()])
}

fn state_from(n: usize, d: usize, k: usize, entries: &[f64]) -> IterateState {
    let x = matrix(n, d, entries);
    let y = DenseMatrix::from_fn(n, d, |i, j| entries[(i * d + j + 7) % entries.len()]);
    IterateState::new(k, x, y).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mixing_contracts_centred_matrices(
        kind in kind_strategy(),
        n in 2usize..=8,
        d in 1usize..=4,
        seed in 0u64..50,
        entries in prop::collection::vec(-10.0f64..10.0, 32),
    ) {
        let w = metropolis_weights(&topology(kind, n, seed));
        let xhat = matrix(n, d, &entries).centered_rows();
        prop_assert!(spectral_norm_bound_check(w.matrix(), &xhat, w.sigma2()).unwrap());
    }

    #[test]
    fn mixing_preserves_the_average(
        kind in kind_strategy(),
        n in 2usize..=8,
        d in 1usize..=4,
        seed in 0u64..50,
        entries in prop::collection::vec(-10.0f64..10.0, 32),
    ) {
        let w = metropolis_weights(&topology(kind, n, seed));
        let x = matrix(n, d, &entries);
        let mixed = w.matrix().matmul(&x).unwrap();
        for (a, b) in mixed.row_mean().as_slice().iter().zip(x.row_mean().as_slice()) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn laziness_never_speeds_mixing(
        kind in kind_strategy(),
        n in 3usize..=8,
        seed in 0u64..50,
        a in 0.0f64..0.95,
        b in 0.0f64..0.95,
    ) {
        let t = topology(kind, n, seed);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let s_lo = lazy_weights(&t, lo).unwrap().sigma2();
        let s_hi = lazy_weights(&t, hi).unwrap().sigma2();
        prop_assert!(s_lo <= s_hi + 1e-10, "{lo}: {s_lo}, {hi}: {s_hi}");
    }

    #[test]
    fn solution_is_invariant_under_joint_scaling(
        d in 1usize..=4,
        n in 1usize..=6,
        seed in 0u64..1000,
        c in 0.05f64..20.0,
    ) {
        let sys = random_instance(d, n, seed, 0.5).unwrap();
        let base = exact_solution(&sys).unwrap();
        let scaled = exact_solution(&sys.scaled(c)).unwrap();
        let gap = base.x_star.sub(&scaled.x_star).norm() + base.y_star.sub(&scaled.y_star).norm();
        prop_assert!(gap <= 1e-9 * (1.0 + base.x_star.norm() + base.y_star.norm()));
    }

    #[test]
    fn node_and_matrix_forms_agree(
        kind in kind_strategy(),
        n in 2usize..=8,
        d in 1usize..=4,
        seed in 0u64..200,
        k in 0usize..10_000,
        entries in prop::collection::vec(-5.0f64..5.0, 48),
    ) {
        let sys = random_instance(d, n, seed, 0.5).unwrap();
        let t = topology(kind, n, seed);
        let w = metropolis_weights(&t);
        let v = lazy_weights(&t, 0.3).unwrap();
        let s = StepSchedule::new(0.5, 0.1).unwrap();
        let state = state_from(n, d, k, &entries);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = sample_noise(&NoiseModel::iso(d, 0.2).unwrap(), &mut rng, n);
        let xi = DenseMatrix::from_fn(n, d, |i, j| noise[i].0[j]);
        let psi = DenseMatrix::from_fn(n, d, |i, j| noise[i].1[j]);
        let a = step(&state, &sys, &w, &v, &s, &noise).unwrap();
        let b = step_matrix(&state, &sys, &w, &v, &s, &xi, &psi).unwrap();
        prop_assert_eq!(a.k, b.k);
        prop_assert!(a.x.sub(&b.x).unwrap().max_abs() <= 1e-12);
        prop_assert!(a.y.sub(&b.y).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn node_average_follows_the_centralized_recursion(
        kind in kind_strategy(),
        n in 2usize..=8,
        d in 1usize..=4,
        seed in 0u64..200,
        k in 0usize..10_000,
        entries in prop::collection::vec(-5.0f64..5.0, 48),
    ) {
        let sys = random_instance(d, n, seed, 0.5).unwrap();
        let t = topology(kind, n, seed);
        let w = metropolis_weights(&t);
        let v = lazy_weights(&t, 0.5).unwrap();
        let s = StepSchedule::new(0.5, 0.1).unwrap();
        let state = state_from(n, d, k, &entries);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let noise = sample_noise(&NoiseModel::iso(d, 0.2).unwrap(), &mut rng, n);
        let next = step(&state, &sys, &w, &v, &s, &noise).unwrap();
        let xs: Vec<DenseVector> = noise.iter().map(|p| p.0.clone()).collect();
        let ys: Vec<DenseVector> = noise.iter().map(|p| p.1.clone()).collect();
        let (xbar, ybar) = averaged_step(
            &state.xbar(),
            &state.ybar(),
            &sys,
            &s,
            k,
            &DenseVector::mean_of(&xs),
            &DenseVector::mean_of(&ys),
        )
        .unwrap();
        prop_assert!(next.xbar().sub(&xbar).norm() <= 1e-12 * (1.0 + xbar.norm()));
        prop_assert!(next.ybar().sub(&ybar).norm() <= 1e-12 * (1.0 + ybar.norm()));
    }

    #[test]
    fn noise_is_surely_bounded(
        d in 1usize..=5,
        seed in 0u64..1000,
        entries in prop::collection::vec(-1.0f64..1.0, 25),
    ) {
        let l = DenseMatrix::from_fn(2 * d, 2 * d, |i, j| entries[(i * 2 * d + j) % entries.len()]);
        let gamma = l.matmul(&l.transpose()).unwrap();
        let model = twoscale::noise::make_noise_model(&gamma).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (xi, psi) in sample_noise(&model, &mut rng, 200) {
            prop_assert!((xi.norm_sq() + psi.norm_sq()).sqrt() <= model.bound());
        }
    }

    #[test]
    fn bounds_decrease_in_k(
        alpha0 in 0.05f64..1.0,
        ratio in 0.05f64..1.0,
        sigma in 0.0f64..0.9,
        k in 1u64..1_000_000,
    ) {
        let s = StepSchedule::new(alpha0, alpha0 * ratio).unwrap();
        let p = BoundParams::new(sigma, sigma, None, 4, 1.0, 0.5, &s, 1.0, 1.0).unwrap();
        let (a, b) = (lemma1_bound(k, &p), lemma1_bound(k + 1, &p));
        prop_assert!(b >= 0.0);
        prop_assert!(b < a || a.is_infinite());
        let (a, b) = (theorem1_bound(k, &p), theorem1_bound(k + 1, &p));
        prop_assert!(b < a || a.is_infinite());
    }
}

#[test]
fn heterogeneous_matrix_step_is_rejected() {
    let sys = random_heterogeneous_instance(2, 3, 0, 0.5, 0.2).unwrap();
    let t = topology(TopologyKind::Ring, 3, 0);
    let w = metropolis_weights(&t);
    let s = StepSchedule::new(0.5, 0.1).unwrap();
    let z = DenseMatrix::zeros(3, 2);
    let state = IterateState::zeros(3, 2);
    assert!(step_matrix(&state, &sys, &w, &w, &s, &z, &z).is_err());
}
