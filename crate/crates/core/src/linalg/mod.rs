//! Minimal dense linear algebra and deterministic random generation.

mod matrix;
mod rng;

pub use matrix::Matrix;
pub use rng::{Rng, RNG_ALGORITHM};

#[cfg(test)]
mod proptests {
    use super::Matrix;
    use proptest::prelude::*;

    fn small_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix<f64>> {
        proptest::collection::vec(-1.0f64..1.0, rows * cols)
            .prop_map(move |data| Matrix::from_vec(rows, cols, data).unwrap())
    }

    proptest! {
        #[test]
        fn matmul_is_associative(
            a in small_matrix(3, 4),
            b in small_matrix(4, 2),
            c in small_matrix(2, 5),
        ) {
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            prop_assert!(left.max_abs_diff(&right) < 1e-9);
        }

        #[test]
        fn argmax_row_indexes_a_maximal_element(m in small_matrix(4, 6)) {
            for r in 0..m.rows() {
                let j = m.argmax_row(r);
                for v in m.row(r) {
                    prop_assert!(m.get(r, j) >= *v);
                }
            }
        }

        #[test]
        fn uniform_draws_stay_in_range(seed in any::<u64>()) {
            let m: Matrix<f64> = super::Rng::new(seed).uniform(-2.0, 3.0, 4, 4).unwrap();
            for v in m.data() {
                prop_assert!((-2.0..3.0).contains(v));
            }
        }
    }
}
