use serde::{Deserialize, Serialize};

use crate::autodiff::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Scalar = f32> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// One bias-corrected Adam update over every parameter tensor.
pub fn adam_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, {}/{} moments",
            params.len(),
            grads.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        grads[i].check_shape(p.shape(), "adam gradient")?;
        state.m[i].check_shape(p.shape(), "adam first moment")?;
        state.v[i].check_shape(p.shape(), "adam second moment")?;
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::of_f64(cfg.beta1), T::of_f64(cfg.beta2));
    let (one_b1, one_b2) = (T::of_f64(1.0 - cfg.beta1), T::of_f64(1.0 - cfg.beta2));
    let step_size = T::of_f64(lr / bc1);
    let inv_sqrt_bc2 = T::of_f64(1.0 / bc2.sqrt());
    let eps = T::of_f64(cfg.eps);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (((w, &g), mi), vi) in p.data_mut().iter_mut().zip(grads[i].data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + one_b1 * g;
            *vi = b2 * *vi + one_b2 * g * g;
            *w = *w - step_size * *mi / ((*vi).sqrt() * inv_sqrt_bc2 + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::new(&[3], vec![1.0f64, -2.0, 0.5]).unwrap()];
        let before = p.clone();
        let mut st = AdamState::new(&p);
        st.m[0] = Tensor::full(&[3], 0.4);
        st.v[0] = Tensor::full(&[3], 0.2);
        let g = vec![Tensor::zeros(&[3])];
        adam_step(&mut p, &g, &mut st, 0.1, &AdamConfig::default()).unwrap();
        // moments decay; param moves only by the decayed momentum of a nonzero history
        assert!(st.m[0].data().iter().all(|&m| (m - 0.36).abs() < 1e-12));
        assert!(st.v[0].data().iter().all(|&v| (v - 0.1998).abs() < 1e-12));

        let mut fresh = AdamState::new(&before);
        let mut q = before.clone();
        adam_step(&mut q, &g, &mut fresh, 0.1, &AdamConfig::default()).unwrap();
        assert_eq!(q, before);
        assert_eq!(fresh.step, 1);
    }

    #[test]
    fn first_step_closed_form() {
        let cfg = AdamConfig::default();
        let g = [0.3f64, -2.0, 1e-3, 5.0];
        let mut p = vec![Tensor::new(&[4], vec![0.0f64; 4]).unwrap()];
        let mut st = AdamState::new(&p);
        let lr = 0.01;
        adam_step(&mut p, &[Tensor::new(&[4], g.to_vec()).unwrap()], &mut st, lr, &cfg).unwrap();
        for (i, &gi) in g.iter().enumerate() {
            // m̂ = g, v̂ = g², update = lr·g/(|g| + eps)
            let expected = -lr * gi / (gi.abs() + cfg.eps);
            assert!((p[0][i] - expected).abs() < 1e-12, "{i}");
            assert!((p[0][i].abs() - lr).abs() < 1e-6);
        }
    }

    #[test]
    fn descends_quadratic() {
        let mut w = vec![Tensor::scalar(1.0f64)];
        let mut st = AdamState::new(&w);
        for _ in 0..100 {
            let g = vec![Tensor::scalar(2.0 * w[0][0])];
            adam_step(&mut w, &g, &mut st, 0.1, &AdamConfig::default()).unwrap();
        }
        assert!(w[0][0].abs() < 0.1, "w = {}", w[0][0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = vec![Tensor::<f32>::zeros(&[2])];
        let mut st = AdamState::new(&p);
        assert!(adam_step(&mut p, &[Tensor::zeros(&[3])], &mut st, 0.1, &AdamConfig::default()).is_err());
        assert!(adam_step(&mut p, &[], &mut st, 0.1, &AdamConfig::default()).is_err());
    }
}
