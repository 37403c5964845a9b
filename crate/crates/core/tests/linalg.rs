use deimlab::linalg::{solve_small, thin_svd, Lu, Matrix};
use deimlab::rom::orthonormality_defect;
use deimlab::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

fn reconstruct(u: &Matrix, sigma: &[f64], vt: &Matrix) -> Matrix {
    Matrix::from_fn(u.rows(), vt.cols(), |i, j| (0..sigma.len()).map(|k| u[(i, k)] * sigma[k] * vt[(k, j)]).sum())
}

#[test]
fn diagonal_singular_values() {
    let a = Matrix::from_fn(3, 3, |i, j| if i == j { [3.0, 2.0, 1.0][i] } else { 0.0 });
    let s = thin_svd(&a).unwrap();
    for (got, want) in s.sigma.iter().zip([3.0, 2.0, 1.0]) {
        assert!((got - want).abs() < 1e-14);
    }
    // Unordered diagonal comes back sorted.
    let b = Matrix::from_fn(3, 3, |i, j| if i == j { [1.0, 3.0, 2.0][i] } else { 0.0 });
    let s = thin_svd(&b).unwrap();
    assert!((s.sigma[0] - 3.0).abs() < 1e-14 && (s.sigma[2] - 1.0).abs() < 1e-14);
}

#[test]
fn rank_one_outer_product() {
    let u = [1.0, -2.0, 2.0, 0.5];
    let v = [3.0, 0.0, -4.0];
    let a = Matrix::from_fn(4, 3, |i, j| u[i] * v[j]);
    let s = thin_svd(&a).unwrap();
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!((s.sigma[0] - nu * nv).abs() < 1e-13);
    assert!(s.sigma[1..].iter().all(|&x| x.abs() < 1e-12));
}

#[test]
fn random_8x5_reconstructs() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = random_matrix(8, 5, &mut rng);
    let s = thin_svd(&a).unwrap();
    let r = reconstruct(&s.u, &s.sigma, &s.vt);
    assert!(r.sub(&a).unwrap().max_abs() < 1e-10);
}

#[test]
fn sign_convention_makes_largest_entry_positive() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = thin_svd(&random_matrix(7, 4, &mut rng)).unwrap();
    for k in 0..4 {
        let col = s.u.column(k);
        let big = col.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        assert!(big > 0.0);
    }
}

#[test]
fn tall_snapshot_like_matrix_converges() {
    // Many smooth columns of modest length, as produced by time stepping.
    let a = Matrix::from_fn(300, 64, |i, j| ((i as f64) * 0.01 * (j as f64 + 1.0)).sin() / (1.0 + j as f64));
    let s = thin_svd(&a).unwrap();
    let r = reconstruct(&s.u, &s.sigma, &s.vt);
    assert!(r.sub(&a).unwrap().max_abs() < 1e-10);
}

#[test]
fn solve_small_examples() {
    let b = Matrix::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    assert_eq!(solve_small(&Matrix::identity(3), &b).unwrap().x, b);
    let m = Matrix::from_vec(2, 2, vec![2.0, 0.0, 0.0, 4.0]).unwrap();
    let rhs = Matrix::from_vec(2, 1, vec![2.0, 8.0]).unwrap();
    assert_eq!(solve_small(&m, &rhs).unwrap().x.as_slice(), &[1.0, 2.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let mut m = random_matrix(24, 24, &mut rng);
    for i in 0..24 {
        m[(i, i)] += 8.0;
    }
    let b = random_matrix(24, 3, &mut rng);
    let sol = solve_small(&m, &b).unwrap();
    assert!(sol.residual < 1e-10);
    assert!(m.matmul(&sol.x).unwrap().sub(&b).unwrap().max_abs() < 1e-10);
}

#[test]
fn singular_system_is_reported() {
    let m = Matrix::from_vec(2, 2, vec![1.0, 2.0, 2.0, 4.0]).unwrap();
    let b = Matrix::from_vec(2, 1, vec![1.0, 1.0]).unwrap();
    assert!(matches!(solve_small(&m, &b), Err(Error::Singular { .. })));
    assert!(matches!(Lu::factor(&Matrix::zeros(3, 3)), Err(Error::Singular { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn svd_invariants(seed in any::<u64>(), rows in 1usize..20, cols in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_matrix(rows, cols, &mut rng);
        let s = thin_svd(&a).unwrap();
        let k = rows.min(cols);
        prop_assert_eq!(s.sigma.len(), k);
        prop_assert!(s.sigma.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(s.sigma.iter().all(|&x| x >= 0.0));
        prop_assert!(orthonormality_defect(&s.u) < 1e-10);
        prop_assert!(orthonormality_defect(&s.vt.transpose()) < 1e-10);
        let r = reconstruct(&s.u, &s.sigma, &s.vt);
        prop_assert!(r.sub(&a).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn lu_solves_diagonally_dominant_systems(seed in any::<u64>(), n in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = random_matrix(n, n, &mut rng);
        for i in 0..n {
            m[(i, i)] += n as f64;
        }
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lu = Lu::factor(&m).unwrap();
        let x = lu.solve_vec(&b).unwrap();
        let r = m.matvec(&x).unwrap();
        prop_assert!(r.iter().zip(&b).all(|(p, q)| (p - q).abs() < 1e-10));
        let xt = lu.solve_transpose_vec(&b).unwrap();
        let rt = m.tr_matvec(&xt).unwrap();
        prop_assert!(rt.iter().zip(&b).all(|(p, q)| (p - q).abs() < 1e-10));
    }
}
