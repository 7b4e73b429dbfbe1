use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for one ordered group of parameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    config: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[&Tensor]) -> Self {
        Self {
            config,
            step: 0,
            first: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// One bias-corrected Adam update, in place.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::Dimension(format!(
                "adam: {} moments, {} params, {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::ShapeMismatch {
                    expected: p.shape().to_vec(),
                    actual: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteValue("adam gradient".into()));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            let pd = p.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = beta1 * md[i] + (1.0 - beta1) * gi;
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * gi * gi;
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                pd[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_step(g: f64, lr: f64) -> f64 {
        let mut p = Tensor::scalar(1.0);
        let mut st = AdamState::new(AdamConfig::with_lr(lr), &[&p]);
        st.step(&mut [&mut p], &[Tensor::scalar(g)]).unwrap();
        p.item() - 1.0
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        assert!((one_step(1.0, 0.1) + 0.1).abs() < 1e-6);
        assert!((one_step(-2.0, 0.1) - 0.1).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut p = Tensor::matrix(2, 2, vec![0.3, -1.0, 2.0, 5.5]);
        let before = p.clone();
        let mut st = AdamState::new(AdamConfig::with_lr(0.5), &[&p]);
        for _ in 0..5 {
            st.step(&mut [&mut p], &[Tensor::zeros(&[2, 2])]).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.steps(), 5);
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let mut p = Tensor::zeros(&[2, 2]);
        let mut st = AdamState::new(AdamConfig::default(), &[&p]);
        assert!(st.step(&mut [&mut p], &[Tensor::zeros(&[2, 3])]).is_err());
        assert!(st.step(&mut [&mut p], &[Tensor::full(&[2, 2], f64::NAN)]).is_err());
        assert_eq!(st.steps(), 0);
    }
}
