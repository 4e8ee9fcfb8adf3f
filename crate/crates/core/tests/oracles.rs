use nalgebra::DMatrix;
use twoscale::network::{build_topology, lazy_weights, metropolis_weights, TopologyKind};
use twoscale::numerics::{
    eigenvalues, inverse, second_singular_value, solve_linear, symmetric_eigen, DenseMatrix,
    DenseVector,
};

fn to_na(m: &DenseMatrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

fn lcg(seed: u64) -> impl FnMut() -> f64 {
    let mut state = seed
        .wrapping_mul(6364136223846793005)
        .wrapping_add(1442695040888963407);
    move || {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }
}

fn random_matrix(n: usize, seed: u64) -> DenseMatrix {
    let mut next = lcg(seed);
    DenseMatrix::from_fn(n, n, |_, _| next())
}

fn svd_sigma2(m: &DenseMatrix) -> f64 {
    let mut s: Vec<f64> = to_na(m).singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s.get(1).copied().unwrap_or(0.0)
}

#[test]
fn sigma2_matches_svd_on_all_families() {
    let kinds = [
        TopologyKind::Ring,
        TopologyKind::Path,
        TopologyKind::Star,
        TopologyKind::Complete,
        TopologyKind::ErdosRenyi,
    ];
    for kind in kinds {
        for n in 2..=8 {
            for seed in 0..3 {
                let prob = (kind == TopologyKind::ErdosRenyi).then_some(0.5);
                let t = build_topology(kind, n, prob, seed).unwrap();
                let w = metropolis_weights(&t);
                let ours = second_singular_value(w.matrix(), 1e-14).unwrap();
                let oracle = svd_sigma2(w.matrix());
                assert!(
                    (ours - oracle).abs() <= 1e-8,
                    "{kind} n={n} seed={seed}: {ours} vs {oracle}"
                );
                let lazy = lazy_weights(&t, 0.4).unwrap();
                let ours = second_singular_value(lazy.matrix(), 1e-14).unwrap();
                assert!((ours - svd_sigma2(lazy.matrix())).abs() <= 1e-8);
            }
        }
    }
}

#[test]
fn eigenvalues_match_nalgebra_schur() {
    for n in 1..=7 {
        for seed in 0..10 {
            let m = random_matrix(n, seed * 31 + n as u64);
            let mut ours: Vec<(f64, f64)> = eigenvalues(&m)
                .unwrap()
                .iter()
                .map(|e| (e.re, e.im))
                .collect();
            let mut oracle: Vec<(f64, f64)> = to_na(&m)
                .complex_eigenvalues()
                .iter()
                .map(|c| (c.re, c.im))
                .collect();
            let key =
                |a: &(f64, f64), b: &(f64, f64)| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1));
            ours.sort_by(key);
            oracle.sort_by(key);
            assert_eq!(ours.len(), oracle.len());
            for (a, b) in ours.iter().zip(&oracle) {
                let gap = ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
                assert!(gap < 1e-8, "n={n} seed={seed}: {a:?} vs {b:?}");
            }
        }
    }
}

#[test]
fn symmetric_eigen_matches_nalgebra() {
    for n in 1..=8 {
        let a = random_matrix(n, 100 + n as u64);
        let s = a.add(&a.transpose()).unwrap();
        let ours = symmetric_eigen(&s).unwrap();
        let mut oracle: Vec<f64> = to_na(&s).symmetric_eigenvalues().iter().copied().collect();
        oracle.sort_by(f64::total_cmp);
        for (a, b) in ours.values.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-10);
        }
        let rebuilt = ours.reconstruct_with(|v| v);
        assert!(rebuilt.sub(&s).unwrap().max_abs() < 1e-10);
    }
}

#[test]
fn solve_matches_nalgebra_lu() {
    for n in 1..=8 {
        for seed in 0..5 {
            let a = random_matrix(n, 7 * seed + n as u64)
                .add(&DenseMatrix::identity(n).scale(3.0))
                .unwrap();
            let mut next = lcg(seed + 1000);
            let b = DenseVector::new((0..n).map(|_| next()).collect()).unwrap();
            let ours = solve_linear(&a, &b).unwrap();
            let oracle = to_na(&a)
                .lu()
                .solve(&nalgebra::DVector::from_column_slice(b.as_slice()))
                .unwrap();
            for (x, y) in ours.as_slice().iter().zip(oracle.iter()) {
                assert!((x - y).abs() < 1e-10);
            }
            let residual = a.mul_vec(&ours).unwrap().sub(&b).norm();
            assert!(residual < 1e-12 * (1.0 + b.norm()));
            let inv = inverse(&a).unwrap();
            let id = a.matmul(&inv).unwrap();
            assert!(id.sub(&DenseMatrix::identity(n)).unwrap().max_abs() < 1e-10);
        }
    }
}
