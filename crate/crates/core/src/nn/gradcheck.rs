//! Central finite-difference gradient checks.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Denominator floor for relative errors, so that gradients near zero are
/// compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Largest coordinatewise relative error between `analytic` and the central
/// difference `(f(p + h e_k) - f(p - h e_k)) / 2h`.
pub fn finite_difference_check(
    mut f: impl FnMut(&[f64]) -> f64,
    point: &[f64],
    analytic: &[f64],
    step: f64,
) -> f64 {
    assert_eq!(point.len(), analytic.len(), "gradient length");
    let mut p = point.to_vec();
    let mut worst = 0f64;
    for k in 0..p.len() {
        let orig = p[k];
        p[k] = orig + step;
        let up = f(&p);
        p[k] = orig - step;
        let down = f(&p);
        p[k] = orig;
        worst = worst.max(relative_error(analytic[k], (up - down) / (2.0 * step)));
    }
    worst
}

/// Checks `build(graph, x)` with respect to the leaf `x = point` (reshaped to
/// `shape`). `build` must return a scalar.
pub fn check_graph_fn(
    shape: &[usize],
    point: &[f64],
    step: f64,
    mut build: impl FnMut(&mut Graph<f64>, Var) -> Result<Var>,
) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.variable(Tensor::new(shape, point.to_vec())?);
    let loss = build(&mut g, x)?;
    let grads = g.backward(loss)?;
    let analytic = grads.get_or_zeros(&g, x).into_data();
    let mut failure = None;
    let err = finite_difference_check(
        |p| {
            let mut g = Graph::no_grad();
            let x = g.constant(Tensor::new(shape, p.to_vec()).expect("shape"));
            match build(&mut g, x) {
                Ok(l) => g.value(l).data()[0],
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        point,
        &analytic,
        step,
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(err),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let p = [0.5, -1.5, 2.0];
        let err = finite_difference_check(|x| x.iter().map(|v| v * v).sum(), &p, &[1.0, -3.0, 4.0], 1e-5);
        assert!(err < 1e-9);
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        let err = finite_difference_check(|x| x[0] * x[0], &[1.0], &[3.0], 1e-5);
        assert!(err > 0.3);
    }

    #[test]
    fn graph_exp_mean() {
        let err = check_graph_fn(&[4], &[0.1, -0.2, 0.3, 1.0], 1e-5, |g, x| {
            let e = g.exp(x);
            g.mean(e)
        })
        .unwrap();
        assert!(err < 1e-8);
    }
}
