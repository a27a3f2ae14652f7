use serde::{Deserialize, Serialize};

use super::tensor::NdTensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Adam (bias-corrected) or plain SGD.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Optimizer {
    pub fn adam(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            ..Self::adam(learning_rate)
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [NdTensor], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(Error::Shape(format!(
                    "parameter {i} has {} values, gradient {}",
                    p.len(),
                    g.len()
                )));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(format!("gradient of parameter {i}")));
            }
        }
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, d) in p.data_mut().iter_mut().zip(g) {
                        *w -= self.learning_rate * d;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.m.is_empty() {
                    self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
                    self.v = self.m.clone();
                }
                self.step += 1;
                let t = self.step as i32;
                let c1 = 1.0 - self.beta1.powi(t);
                let c2 = 1.0 - self.beta2.powi(t);
                for ((p, g), (m, v)) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.m.iter_mut().zip(self.v.iter_mut()))
                {
                    for (((w, &d), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m).zip(v) {
                        *mi = self.beta1 * *mi + (1.0 - self.beta1) * d;
                        *vi = self.beta2 * *vi + (1.0 - self.beta2) * d * d;
                        let mh = *mi / c1;
                        let vh = *vi / c2;
                        *w -= self.learning_rate * mh / (vh.sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(v: f64) -> Vec<NdTensor> {
        vec![NdTensor::new(vec![1], vec![v]).unwrap()]
    }

    #[test]
    fn sgd_step() {
        let mut params = p(1.0);
        Optimizer::sgd(0.1).step(&mut params, &[vec![0.5]]).unwrap();
        assert!((params[0].data()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        for g in [1e-4, 0.3, 12.0, -5.0] {
            let mut params = p(0.0);
            Optimizer::adam(0.001).step(&mut params, &[vec![g]]).unwrap();
            // m̂ = g, v̂ = g², update = lr·g/(|g|+ε)
            let expected = -0.001 * g / (g.abs() + 1e-8);
            assert!((params[0].data()[0] - expected).abs() < 1e-15);
            assert!((params[0].data()[0].abs() - 0.001).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        for mut opt in [Optimizer::adam(0.001), Optimizer::sgd(0.001)] {
            let mut params = p(0.7);
            for _ in 0..3 {
                opt.step(&mut params, &[vec![0.0]]).unwrap();
            }
            assert_eq!(params[0].data()[0], 0.7);
        }
    }

    #[test]
    fn non_finite_rejected_without_update() {
        let mut params = p(1.0);
        let mut opt = Optimizer::adam(0.1);
        assert!(opt.step(&mut params, &[vec![f64::NAN]]).is_err());
        assert_eq!(params[0].data()[0], 1.0);
        assert_eq!(opt.steps(), 0);
    }
}
