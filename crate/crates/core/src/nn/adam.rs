//! Adam with L2 weight decay folded into the gradient.

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First and second moments plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[&Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step<T: Real>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    let (lr, eps, wd) = (T::lit(cfg.lr), T::lit(cfg.eps), T::lit(cfg.weight_decay));
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::Contract(format!(
                "adam: parameter {i} has shape {:?} but gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (k, (w, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gk = gk + wd * *w;
            m[k] = b1 * m[k] + (T::one() - b1) * gk;
            v[k] = b2 * v[k] + (T::one() - b2) * gk * gk;
            let mh = m[k] / c1;
            let vh = v[k] / c2;
            *w = *w - lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = Tensor::new(&[3], vec![1.0f64, -2.0, 0.5]).unwrap();
        let orig = p.clone();
        let mut st = AdamState::new(&[&p]);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        for _ in 0..5 {
            adam_step(&mut [&mut p], &[Tensor::zeros(&[3])], &mut st, &cfg).unwrap();
        }
        assert_eq!(p, orig);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // Step 1: mhat = g, vhat = g^2, so the update is lr * g / (|g| + eps).
        let mut p = Tensor::new(&[3], vec![0.0f64, 0.0, 0.0]).unwrap();
        let g = Tensor::new(&[3], vec![0.3, -4.0, 1e-3]).unwrap();
        let mut st = AdamState::new(&[&p]);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        adam_step(&mut [&mut p], &[g.clone()], &mut st, &cfg).unwrap();
        for (w, gk) in p.data().iter().zip(g.data()) {
            let expect = -cfg.lr * gk / (gk.abs() + cfg.eps);
            assert!((w - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn defaults() {
        let c = AdamConfig::default();
        assert_eq!((c.lr, c.weight_decay), (2e-4, 1e-4));
    }

    #[test]
    fn mismatched_lengths_rejected() {
        let mut p = Tensor::<f64>::zeros(&[2]);
        let mut st = AdamState::new(&[&p]);
        let r = adam_step(&mut [&mut p], &[], &mut st, &AdamConfig::default());
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}
