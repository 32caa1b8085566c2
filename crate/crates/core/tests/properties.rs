use mdplab_core::measures::W2Method;
use mdplab_core::models::kalman_rank;
use mdplab_core::nalgebra::DMatrix;
use mdplab_core::{wasserstein2, EmpiricalMeasure};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
    proptest::collection::vec(-2.0f64..2.0, rows * cols).prop_map(move |v| DMatrix::from_row_slice(rows, cols, &v))
}

// A = diag(A₁, A₂) with B = [B₁; 0]: the second block is unreachable, so the
// rank is at most dim A₁.
fn split_system() -> impl Strategy<Value = (DMatrix<f64>, DMatrix<f64>, usize)> {
    (1usize..3, 1usize..3, 1usize..3).prop_flat_map(|(k, l, p)| {
        (matrix(k, k), matrix(l, l), matrix(k, p)).prop_map(move |(a1, a2, b1)| {
            let m = k + l;
            let mut a = DMatrix::zeros(m, m);
            a.view_mut((0, 0), (k, k)).copy_from(&a1);
            a.view_mut((k, k), (l, l)).copy_from(&a2);
            let mut b = DMatrix::zeros(m, p);
            b.view_mut((0, 0), (k, p)).copy_from(&b1);
            (a, b, k)
        })
    })
}

proptest! {
    #[test]
    fn kalman_rank_is_similarity_invariant((a, b, k) in split_system(), shear in proptest::collection::vec(-0.4f64..0.4, 16)) {
        let m = a.nrows();
        let t = DMatrix::from_fn(m, m, |i, j| if i == j { 1.0 } else { shear[i * 4 + j] / m as f64 });
        let t_inv = t.clone().try_inverse().unwrap();
        let before = kalman_rank(&a, &b).unwrap();
        let after = kalman_rank(&(&t * &a * &t_inv), &(&t * &b)).unwrap();
        prop_assert_eq!(before.rank, after.rank);
        prop_assert!(before.rank <= k);
        prop_assert!(!before.pass);
    }

    #[test]
    fn w2_is_translation_covariant_in_one_dimension(
        xs in proptest::collection::vec(-3.0f64..3.0, 1..40),
        shift in -5.0f64..5.0,
    ) {
        let mu = EmpiricalMeasure::from_flat(1, xs.clone()).unwrap();
        let nu = EmpiricalMeasure::from_flat(1, xs.iter().map(|x| x + shift).collect()).unwrap();
        let d = wasserstein2(&mu, &nu, W2Method::Sorted1d).unwrap().distance;
        prop_assert!((d - shift.abs()).abs() < 1e-9);
        let e = wasserstein2(&mu, &nu, W2Method::Assignment).unwrap().distance;
        prop_assert!((d - e).abs() < 1e-9);
    }
}
