//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Small by design: rank ≤ 3 row-major `f64` tensors, a define-by-run
//! [`Tape`], and the operation set the state-space model actually needs.
//! Broadcasting is limited to scalar↔tensor plus the explicit
//! [`Var::broadcast_cols`] / [`Var::broadcast_rows`] shape ops.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    fn mat3() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-2.0..2.0f64, 9)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// (AB)C == A(BC) at the value level for random 3×3 inputs.
        #[test]
        fn matmul_associativity(a in mat3(), b in mat3(), c in mat3()) {
            let tape = Tape::new();
            let a = tape.constant(Tensor::new(vec![3, 3], a).unwrap());
            let b = tape.constant(Tensor::new(vec![3, 3], b).unwrap());
            let c = tape.constant(Tensor::new(vec![3, 3], c).unwrap());
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            for (l, r) in left.value().iter().zip(right.value().iter()) {
                prop_assert!((l - r).abs() < 1e-10);
            }
        }

        /// Gradients accumulate when a tensor is consumed several times.
        #[test]
        fn repeated_use_accumulates(x in -3.0..3.0f64, k in 2usize..5) {
            let tape = Tape::new();
            let v = tape.param(Tensor::scalar(x));
            let mut acc = v;
            for _ in 1..k {
                acc = acc.add(&v).unwrap();
            }
            tape.backward(acc.sum()).unwrap();
            prop_assert_eq!(v.grad().unwrap().item(), k as f64);
        }
    }
}
