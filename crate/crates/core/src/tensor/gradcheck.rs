//! Finite-difference validation of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_GRAD_EPS: f64 = 1e-5;

/// Compare the tape gradient of `f` against central differences at `xs`.
///
/// `f` rebuilds the same scalar loss on any tape it is given; `xs` are the
/// points the parameters take. Returns the maximum over all coordinates of
/// |analytic - numeric| / max(1, |numeric|).
pub fn grad_check<F>(f: F, xs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |points: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = points.iter().map(|x| tape.param(x)).collect();
        let loss = f(&mut tape, &vars)?;
        let v = tape.value(loss).item();
        if !v.is_finite() {
            return Err(Error::Numeric("loss is not finite during grad check".to_string()));
        }
        Ok(v)
    };

    // Analytic gradients.
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.param(x)).collect();
    let loss = f(&mut tape, &vars)?;
    if !tape.value(loss).item().is_finite() {
        return Err(Error::Numeric("loss is not finite during grad check".to_string()));
    }
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad(v)).collect();

    let mut max_err: f64 = 0.0;
    for (pi, x) in xs.iter().enumerate() {
        for ci in 0..x.numel() {
            let mut plus = xs.to_vec();
            plus[pi].data_mut()[ci] += eps;
            let mut minus = xs.to_vec();
            minus[pi].data_mut()[ci] -= eps;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
            let err = (analytic[pi].data()[ci] - numeric).abs() / numeric.abs().max(1.0);
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_function_is_exact() {
        // f(x) = w . x with fixed w; exact derivative, error ~ machine eps.
        let w = Tensor::from_vec(&[3], vec![0.5, -1.25, 2.0]).unwrap();
        let x = Tensor::from_vec(&[3], vec![1.0, 2.0, -0.5]).unwrap();
        let err = grad_check(
            |tape, vars| {
                let wc = tape.constant(&w);
                Ok(tape.dot(wc, vars[0]))
            },
            &[x],
            DEFAULT_GRAD_EPS,
        )
        .unwrap();
        assert!(err <= 1e-10, "linear grad check error {err}");
    }

    #[test]
    fn composite_ops_pass_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let w: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..4).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let w = Tensor::from_vec(&[3, 4], w).unwrap();
            let b = Tensor::from_vec(&[4], b).unwrap();
            let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x = Tensor::from_vec(&[2, 3], x).unwrap();
            let err = grad_check(
                |tape, vars| {
                    let xc = tape.constant(&x);
                    let h = tape.matmul(xc, vars[0]);
                    let h = tape.add_bias(h, vars[1]);
                    let h = tape.relu(h);
                    let p = tape.softmax_rows(h, 0.5);
                    let lp = tape.log_softmax_rows(h, 0.5);
                    let prod = tape.mul(p, lp);
                    let rs = tape.row_sum(prod);
                    let m = tape.mean_all(rs);
                    Ok(tape.neg(m))
                },
                &[w, b],
                DEFAULT_GRAD_EPS,
            )
            .unwrap();
            assert!(err < 1e-4, "composite grad check error {err}");
        }
    }

    #[test]
    fn normalize_and_select_pass_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x: Vec<f64> = (0..8).map(|_| rng.gen_range(0.2..1.5)).collect();
        let x = Tensor::from_vec(&[2, 4], x).unwrap();
        let err = grad_check(
            |tape, vars| {
                let n = tape.normalize_rows(vars[0])?;
                let s = tape.matmul_nt(n, n);
                let sel = tape.select_cols(s, &[1, 0, 0, 1], 2);
                let lp = tape.log_softmax_rows(sel, 0.2);
                let g = tape.gather_cols(lp, &[0, 0]);
                let m = tape.mean_all(g);
                Ok(tape.neg(m))
            },
            &[x],
            DEFAULT_GRAD_EPS,
        )
        .unwrap();
        assert!(err < 1e-4, "normalize/select grad check error {err}");
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let x = Tensor::from_vec(&[1], vec![-1.0]).unwrap();
        let res = grad_check(
            |tape, vars| Ok(tape.log(vars[0])),
            &[x],
            DEFAULT_GRAD_EPS,
        );
        assert!(matches!(res, Err(Error::Numeric(_))));
    }
}
