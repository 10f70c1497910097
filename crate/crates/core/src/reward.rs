//! Reward functions over clean samples: the hard decision boundary used for
//! evaluation and the smooth sigmoid surrogate used for gradient-based
//! training. An additive `offset` is carried so shift-invariance properties
//! can be exercised directly.

use thiserror::Error;

use crate::tape::{sigmoid, NodeId, Tape};

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("hard indicator reward has no usable gradient for tape recording")]
    NotDifferentiable,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RewardKind {
    /// 1 for x > 0, else 0. Gradient defined as 0 away from the boundary.
    HardIndicator,
    /// sigmoid(beta x); beta = 0 degenerates to the constant 1/2.
    SmoothSigmoid { beta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardSpec {
    pub kind: RewardKind,
    pub tau: f64,
    pub offset: f64,
}

impl RewardSpec {
    pub fn hard(tau: f64) -> Result<Self, RewardError> {
        Self::new(RewardKind::HardIndicator, tau, 0.0)
    }

    pub fn smooth(beta: f64, tau: f64) -> Result<Self, RewardError> {
        Self::new(RewardKind::SmoothSigmoid { beta }, tau, 0.0)
    }

    pub fn new(kind: RewardKind, tau: f64, offset: f64) -> Result<Self, RewardError> {
        if !(tau > 0.0) {
            return Err(RewardError::Temperature(tau));
        }
        Ok(Self { kind, tau, offset })
    }

    pub fn with_offset(self, offset: f64) -> Self {
        Self { offset, ..self }
    }

    pub fn value(&self, x: f64) -> f64 {
        let base = match self.kind {
            RewardKind::HardIndicator => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            RewardKind::SmoothSigmoid { beta } => sigmoid(beta * x),
        };
        base + self.offset
    }

    pub fn grad(&self, x: f64) -> f64 {
        match self.kind {
            RewardKind::HardIndicator => 0.0,
            RewardKind::SmoothSigmoid { beta } => {
                let s = sigmoid(beta * x);
                beta * s * (1.0 - s)
            }
        }
    }

    /// exp(r(x)/tau), the tilt factor.
    pub fn tilt(&self, x: f64) -> f64 {
        (self.value(x) / self.tau).exp()
    }

    pub fn is_differentiable(&self) -> bool {
        matches!(self.kind, RewardKind::SmoothSigmoid { .. })
    }

    /// Records r(x) on the tape; only the smooth kind supports this.
    pub fn on_tape(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId, RewardError> {
        match self.kind {
            RewardKind::HardIndicator => Err(RewardError::NotDifferentiable),
            RewardKind::SmoothSigmoid { beta } => {
                let scaled = tape.scale(x, beta);
                let s = tape.sigmoid(scaled);
                Ok(if self.offset == 0.0 { s } else { tape.shift(s, self.offset) })
            }
        }
    }
}
