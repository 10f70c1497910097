//! Adam optimizer with bias correction, over lists of parameter matrices.

use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdamError {
    #[error("non-finite gradient at optimizer step {step} (parameter block {block})")]
    NonFiniteGrad { step: u64, block: usize },
    #[error("gradient block count {got} does not match state {want}")]
    BlockCount { got: usize, want: usize },
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// First/second moment accumulators, shaped like the parameters they track.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub cfg: AdamConfig,
    pub step_count: u64,
    first_moment: Vec<Array2<f64>>,
    second_moment: Vec<Array2<f64>>,
}

impl AdamState {
    pub fn new(cfg: AdamConfig, params: &[&Array2<f64>]) -> Self {
        Self {
            cfg,
            step_count: 0,
            first_moment: params.iter().map(|p| Array2::zeros(p.dim())).collect(),
            second_moment: params.iter().map(|p| Array2::zeros(p.dim())).collect(),
        }
    }

    /// One Adam update; `params` and `grads` must be in the order the state
    /// was built from.
    pub fn step(&mut self, params: &mut [&mut Array2<f64>], grads: &[Array2<f64>]) -> Result<(), AdamError> {
        if grads.len() != self.first_moment.len() || params.len() != self.first_moment.len() {
            return Err(AdamError::BlockCount { got: grads.len(), want: self.first_moment.len() });
        }
        let step = self.step_count + 1;
        for (block, g) in grads.iter().enumerate() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(AdamError::NonFiniteGrad { step, block });
            }
        }
        self.step_count = step;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(step as i32);
        let bc2 = 1.0 - beta2.powi(step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
        {
            ndarray::Zip::from(&mut **p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
        Ok(())
    }
}
