use crate::error::{Error, Result};

use super::{Tape, Tensor, Var};

/// Central finite-difference gradient of `f` at `params`.
pub fn finite_diff_grad<F>(f: F, params: &[Tensor], eps: f64) -> Result<Vec<Tensor>>
where
    F: Fn(&[Tensor]) -> f64,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("finite difference step must be positive"));
    }
    let mut work = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = Tensor::zeros(params[p].shape());
        for i in 0..params[p].len() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + eps;
            let hi = f(&work);
            work[p].data_mut()[i] = orig - eps;
            let lo = f(&work);
            work[p].data_mut()[i] = orig;
            if !hi.is_finite() || !lo.is_finite() {
                return Err(Error::NonFiniteValue(format!(
                    "objective at parameter {p}, entry {i}"
                )));
            }
            g.data_mut()[i] = (hi - lo) / (2.0 * eps);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Normwise relative error `max|a−b| / max(max|b|, floor)`.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    let scale = numeric.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(floor);
    analytic.max_abs_diff(numeric) / scale
}

/// Worst normwise relative error between tape gradients and central
/// differences of the scalar built by `build` over `params`.
pub fn tape_gradient_error<F>(build: F, params: &[Tensor], eps: f64, floor: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let root = build(&mut tape, &vars);
    let grads = tape.backward(root)?;
    let numeric = finite_diff_grad(
        |ps| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ps.iter().map(|p| t.param(p.clone())).collect();
            let r = build(&mut t, &vs);
            t.scalar_value(r)
        },
        params,
        eps,
    )?;
    Ok(vars
        .iter()
        .zip(&numeric)
        .map(|(&v, n)| relative_error(&grads.get(v), n, floor))
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::tape::sigmoid;

    fn scalar_fd(f: impl Fn(f64) -> f64, x: f64, eps: f64) -> f64 {
        finite_diff_grad(|p| f(p[0].item()), &[Tensor::scalar(x)], eps).unwrap()[0].item()
    }

    #[test]
    fn reference_derivatives() {
        assert!((scalar_fd(|x| x * x, 3.0, 1e-4) - 6.0).abs() < 1e-7);
        assert!((scalar_fd(sigmoid, 0.0, 1e-4) - 0.25).abs() < 1e-8);
        assert!((scalar_fd(f64::ln, 2.0, 1e-4) - 0.5).abs() < 1e-8);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(finite_diff_grad(|p| p[0].item(), &[Tensor::scalar(1.0)], 0.0).is_err());
        assert!(finite_diff_grad(|p| p[0].item().ln(), &[Tensor::scalar(0.0)], 1e-3).is_err());
    }
}
