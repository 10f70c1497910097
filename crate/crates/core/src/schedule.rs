//! Variance-preserving forward process with exponential decay rate:
//! `alpha_bar(t) = exp(-gamma t)`, transition kernel
//! `q_t(x_t | x_0) = N(sqrt(alpha_bar) x_0, 1 - alpha_bar)`.

use thiserror::Error;

use crate::gmm::{GmmComponent, GmmSpec};

#[derive(Debug, Error)]
pub enum ScheduleError {
    #[error("gamma must be positive, got {0}")]
    Gamma(f64),
    #[error("t_max must be positive, got {0}")]
    Horizon(f64),
    #[error("time {t} outside [0, {t_max}]")]
    TimeRange { t: f64, t_max: f64 },
    #[error("operation undefined at t = 0 (degenerate noise level)")]
    DegenerateTime,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VpSchedule {
    pub gamma: f64,
    pub t_max: f64,
}

impl VpSchedule {
    pub fn new(gamma: f64, t_max: f64) -> Result<Self, ScheduleError> {
        if !(gamma > 0.0) {
            return Err(ScheduleError::Gamma(gamma));
        }
        if !(t_max > 0.0) {
            return Err(ScheduleError::Horizon(t_max));
        }
        Ok(Self { gamma, t_max })
    }

    /// Appendix-scale defaults: gamma = 20, horizon T = 0.25.
    pub fn toy_default() -> Self {
        Self { gamma: 20.0, t_max: 0.25 }
    }

    #[inline]
    pub fn alpha_bar(&self, t: f64) -> f64 {
        (-self.gamma * t).exp()
    }

    pub fn check_time(&self, t: f64) -> Result<(), ScheduleError> {
        if !(t >= 0.0 && t <= self.t_max) || !t.is_finite() {
            return Err(ScheduleError::TimeRange { t, t_max: self.t_max });
        }
        Ok(())
    }

    pub fn check_positive_time(&self, t: f64) -> Result<(), ScheduleError> {
        self.check_time(t)?;
        if t == 0.0 {
            return Err(ScheduleError::DegenerateTime);
        }
        Ok(())
    }

    /// Mode location sqrt(alpha_bar) * mu of a noised component.
    #[inline]
    pub fn m_t(&self, t: f64, mu: f64) -> f64 {
        self.alpha_bar(t).sqrt() * mu
    }

    /// Noised variance alpha_bar * v + (1 - alpha_bar); for a unit-variance
    /// split this is the 1 - alpha_bar (1 - sigma^2) form.
    #[inline]
    pub fn cap_sigma(&self, t: f64, variance: f64) -> f64 {
        let ab = self.alpha_bar(t);
        ab * variance + (1.0 - ab)
    }
}

/// Forward marginal of a mixture at time t: means scale by sqrt(alpha_bar),
/// variances relax toward 1, weights are untouched.
pub fn vp_marginal(gmm: &GmmSpec, schedule: &VpSchedule, t: f64) -> Result<GmmSpec, ScheduleError> {
    schedule.check_time(t)?;
    let ab = schedule.alpha_bar(t);
    let sqrt_ab = ab.sqrt();
    let comps = gmm
        .components()
        .iter()
        .map(|c| GmmComponent {
            weight: c.weight,
            mean: sqrt_ab * c.mean,
            variance: ab * c.variance + (1.0 - ab),
        })
        .collect();
    Ok(GmmSpec::new(comps).expect("marginal of a valid mixture is valid"))
}
