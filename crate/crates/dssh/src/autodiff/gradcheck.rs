//! Finite-difference verification of tape gradients.

use super::tensor::Tensor;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Compares the tape gradient of a scalar-valued function against central
/// differences and returns the worst relative error
/// `|analytic − numeric| / max(1, |analytic|)` over all coordinates of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'a> Fn(&'a Tape, Var<'a>) -> Result<Var<'a>>,
{
    let eval = |t: &Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.constant(t.clone());
        let out = f(&tape, v)?;
        let val = out.item();
        if !val.is_finite() {
            return Err(Error::NonFinite {
                at: "grad_check",
                detail: format!("f(x) = {val}"),
            });
        }
        Ok(val)
    };

    // Analytic gradient.
    let tape = Tape::new();
    let v = tape.param(x.clone());
    let out = f(&tape, v)?;
    if !out.item().is_finite() {
        return Err(Error::NonFinite {
            at: "grad_check",
            detail: format!("f(x) = {}", out.item()),
        });
    }
    tape.backward(out)?;
    let analytic = match v.grad() {
        Some(g) => g.data().to_vec(),
        None => vec![0.0; x.numel()],
    };
    if let Some(i) = analytic.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            at: "grad_check",
            detail: format!("analytic gradient at coordinate {i}"),
        });
    }

    let mut max_rel = 0.0_f64;
    for i in 0..x.numel() {
        let mut lo = x.clone();
        lo.data_mut()[i] -= eps;
        let mut hi = x.clone();
        hi.data_mut()[i] += eps;
        let (flo, fhi) = (eval(&lo), eval(&hi));
        let (flo, fhi) = match (flo, fhi) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => {
                return Err(Error::NonFinite {
                    at: "grad_check",
                    detail: format!("coordinate {i}: {e}"),
                })
            }
        };
        let numeric = (fhi - flo) / (2.0 * eps);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(1.0);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{standard_normals, substream};

    #[test]
    fn sum_of_squares_passes() {
        let x = Tensor::vector(&[1.0, 2.0]);
        let err = grad_check(|_, v| Ok(v.square().sum()), &x, 1e-5).unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn softplus_sum_passes() {
        let x = Tensor::vector(&[-3.0, 0.0, 3.0]);
        let err = grad_check(|_, v| Ok(v.softplus().sum()), &x, 1e-5).unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::vector(&[1.0, 2.0]);
        let err = grad_check(|t, _| Ok(t.scalar(7.0)), &x, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn nonfinite_function_reports_coordinate() {
        let x = Tensor::vector(&[0.0]);
        // 1/x is non-finite inside the eps-neighborhood of 0.
        let r = grad_check(
            |t, v| t.scalar(1.0).div(&v.sum()),
            &x,
            1e-5,
        );
        // Either the forward pass or the probe reports non-finiteness.
        assert!(r.is_err() || !r.unwrap().is_finite());
    }

    /// Every differentiable op at seeded random points, as required by the
    /// module invariants.
    #[test]
    fn randomized_op_sweep() {
        let mut rng = substream(7, &[0xD1FF]);
        for trial in 0..10 {
            let xs = standard_normals(&mut rng, 6);
            let pos: Vec<f64> = xs.iter().map(|v| v.abs() + 0.5).collect();
            let x = Tensor::new(vec![2, 3], xs.clone()).unwrap();
            let xp = Tensor::new(vec![2, 3], pos).unwrap();

            type Case<'c> = (&'c str, &'c Tensor, Box<dyn for<'a> Fn(&'a Tape, Var<'a>) -> crate::error::Result<Var<'a>>>);
            let cases: Vec<Case> = vec![
                ("exp", &x, Box::new(|_, v| Ok(v.exp().sum()))),
                ("log", &xp, Box::new(|_, v| v.log().map(|r| r.sum()))),
                ("sqrt", &xp, Box::new(|_, v| v.sqrt().map(|r| r.sum()))),
                ("square", &x, Box::new(|_, v| Ok(v.square().sum()))),
                ("tanh", &x, Box::new(|_, v| Ok(v.tanh().sum()))),
                ("sigmoid", &x, Box::new(|_, v| Ok(v.sigmoid().sum()))),
                ("softplus", &x, Box::new(|_, v| Ok(v.softplus().sum()))),
                ("mean", &x, Box::new(|_, v| Ok(v.mean()))),
                ("sum_axis0", &x, Box::new(|_, v| v.sum_axis(0).map(|r| r.square().sum()))),
                ("mean_axis1", &x, Box::new(|_, v| v.mean_axis(1).map(|r| r.square().sum()))),
                ("transpose", &x, Box::new(|_, v| v.transpose().map(|r| r.square().sum()))),
                (
                    "matmul",
                    &x,
                    Box::new(|t, v| {
                        let w = t.constant(Tensor::new(vec![3, 2], vec![0.3, -0.7, 1.1, 0.2, -0.4, 0.9]).unwrap());
                        v.matmul(&w).map(|r| r.square().sum())
                    }),
                ),
                (
                    "div",
                    &x,
                    Box::new(|t, v| {
                        let d = t.constant(Tensor::new(vec![2, 3], vec![1.5, 2.0, -1.0, 3.0, -2.5, 1.2]).unwrap());
                        v.div(&d).map(|r| r.sum())
                    }),
                ),
                (
                    "mul_sub",
                    &x,
                    Box::new(|t, v| {
                        let d = t.constant(Tensor::new(vec![2, 3], vec![0.5; 6]).unwrap());
                        v.mul(&d)?.sub(&v).map(|r| r.square().sum())
                    }),
                ),
                (
                    "slice_concat",
                    &x,
                    Box::new(|_, v| {
                        let a = v.slice_cols(0, 1)?;
                        let b = v.slice_cols(1, 3)?;
                        Var::concat_cols(&[b, a]).map(|r| r.square().sum())
                    }),
                ),
            ];
            for (name, input, f) in cases {
                let err = grad_check(f.as_ref(), input, 1e-5).unwrap();
                assert!(err < 1e-5, "op {name} trial {trial}: rel err {err}");
            }
        }
    }
}
