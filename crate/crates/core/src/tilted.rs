//! The reward-tilted target `q*(x) = q0(x) exp(r(x)/tau) / Z`, its diffused
//! marginals `q_t*`, and the reward correction to the marginal score.
//!
//! Everything exists along two routes wherever possible: a closed form via
//! the normal CDF for the hard indicator reward, and adaptive quadrature for
//! the smooth reward. The closed forms act as oracles for the quadrature
//! path and vice versa.

use thiserror::Error;

use crate::gmm::{norm_pdf, GmmSpec};
use crate::posterior::{posterior_mixture, PosteriorMixture};
use crate::quad::{self, QuadConfig, QuadError};
use crate::reward::{RewardKind, RewardSpec};
use crate::schedule::{ScheduleError, VpSchedule};

#[derive(Debug, Error)]
pub enum TiltedError {
    #[error(transparent)]
    Quad(#[from] QuadError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("partition function is not finite: {0}")]
    BadPartition(f64),
}

/// Partition function Z = ∫ q0(x) exp(r(x)/tau) dx.
pub fn tilted_partition(gmm: &GmmSpec, reward: &RewardSpec) -> Result<f64, TiltedError> {
    let z = match reward.kind {
        RewardKind::HardIndicator => {
            let base = (reward.offset / reward.tau).exp();
            let gain = (1.0 / reward.tau).exp() - 1.0;
            base * (1.0 + gain * gmm.positive_mass())
        }
        RewardKind::SmoothSigmoid { .. } => {
            let (lo, hi) = gmm.support(12.0);
            let mut pts = vec![0.0];
            for c in gmm.components() {
                pts.extend_from_slice(&quad::bump_points(c.mean, c.sd()));
            }
            quad::integrate_points(
                |x| gmm.density(x) * reward.tilt(x),
                lo,
                hi,
                &pts,
                QuadConfig::default(),
            )?
        }
    };
    if !z.is_finite() || z <= 0.0 {
        return Err(TiltedError::BadPartition(z));
    }
    Ok(z)
}

/// The tilted target with its partition precomputed.
#[derive(Debug, Clone)]
pub struct TiltedTarget {
    pub gmm: GmmSpec,
    pub reward: RewardSpec,
    pub z: f64,
}

impl TiltedTarget {
    pub fn new(gmm: GmmSpec, reward: RewardSpec) -> Result<Self, TiltedError> {
        let z = tilted_partition(&gmm, &reward)?;
        Ok(Self { gmm, reward, z })
    }

    /// q*(x) = q0(x) exp(r(x)/tau) / Z.
    pub fn density(&self, x: f64) -> f64 {
        self.gmm.density(x) * self.reward.tilt(x) / self.z
    }

    pub fn log_density(&self, x: f64) -> f64 {
        self.gmm.log_density(x) + self.reward.value(x) / self.reward.tau - self.z.ln()
    }

    /// P_{q*}(x > 0).
    pub fn positive_mass(&self) -> Result<f64, TiltedError> {
        match self.reward.kind {
            RewardKind::HardIndicator => {
                let base = (self.reward.offset / self.reward.tau).exp();
                let up = (1.0 / self.reward.tau).exp();
                Ok(base * up * self.gmm.positive_mass() / self.z)
            }
            RewardKind::SmoothSigmoid { .. } => {
                let (_, hi) = self.gmm.support(12.0);
                let mut pts = Vec::new();
                for c in self.gmm.components() {
                    pts.extend_from_slice(&quad::bump_points(c.mean, c.sd()));
                }
                Ok(quad::integrate_points(
                    |x| self.density(x),
                    0.0,
                    hi,
                    &pts,
                    QuadConfig::default(),
                )?)
            }
        }
    }

    /// Diffused marginal q_t*(x_t) through the factored form
    /// q_t(x_t) E[exp(r/tau) | x_t] / Z.
    pub fn marginal(
        &self,
        schedule: &VpSchedule,
        t: f64,
        x_t: f64,
    ) -> Result<f64, TiltedError> {
        Ok(self.log_marginal(schedule, t, x_t)?.exp())
    }

    pub fn log_marginal(
        &self,
        schedule: &VpSchedule,
        t: f64,
        x_t: f64,
    ) -> Result<f64, TiltedError> {
        let fwd = crate::schedule::vp_marginal(&self.gmm, schedule, t)?;
        let post = posterior_mixture(&self.gmm, schedule, t, x_t)?;
        let expect = post.expectation_tilt(&self.reward)?;
        Ok(fwd.log_density(x_t) + expect.ln() - self.z.ln())
    }

    /// Same marginal by direct convolution quadrature over x_0; the
    /// independent evaluation path used to cross-check the factored form.
    pub fn marginal_quadrature(
        &self,
        schedule: &VpSchedule,
        t: f64,
        x_t: f64,
    ) -> Result<f64, TiltedError> {
        schedule.check_positive_time(t)?;
        let ab = schedule.alpha_bar(t);
        let (a, sd) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (lo, hi) = self.gmm.support(12.0);
        let mut pts = vec![0.0, x_t / a];
        for c in self.gmm.components() {
            pts.extend_from_slice(&quad::bump_points(c.mean, c.sd()));
        }
        // the likelihood bump in x_0 has width sd/a around x_t/a
        pts.extend_from_slice(&quad::bump_points(x_t / a, sd / a));
        let v = quad::integrate_points(
            |x0| {
                self.gmm.density(x0) * self.reward.tilt(x0) * norm_pdf((x_t - a * x0) / sd) / sd
            },
            lo.min(x_t / a - 12.0 * sd / a),
            hi.max(x_t / a + 12.0 * sd / a),
            &pts,
            QuadConfig::default(),
        )?;
        Ok(v / self.z)
    }

    /// The reward correction to the marginal score at noise level t:
    /// d/dx_t log E[exp(r(x_0)/tau) | x_t].
    pub fn drs(&self, schedule: &VpSchedule, t: f64, x_t: f64) -> Result<f64, TiltedError> {
        let post = posterior_mixture(&self.gmm, schedule, t, x_t)?;
        drs_from_posterior(&post, &self.reward).map_err(Into::into)
    }
}

/// Reward score correction from an already-built posterior: the logarithmic
/// derivative of the tilt expectation.
pub fn drs_from_posterior(post: &PosteriorMixture, reward: &RewardSpec) -> Result<f64, QuadError> {
    let e = post.expectation_tilt(reward)?;
    let de = post.d_expectation_tilt(reward)?;
    Ok(de / e)
}

/// Free-function form of [`TiltedTarget::density`] for one-off evaluations.
pub fn tilted_density(gmm: &GmmSpec, reward: &RewardSpec, x: f64) -> Result<f64, TiltedError> {
    Ok(TiltedTarget::new(gmm.clone(), *reward)?.density(x))
}

/// Free-function form of [`TiltedTarget::marginal`].
pub fn tilted_marginal(
    gmm: &GmmSpec,
    reward: &RewardSpec,
    schedule: &VpSchedule,
    t: f64,
    x_t: f64,
) -> Result<f64, TiltedError> {
    TiltedTarget::new(gmm.clone(), *reward)?.marginal(schedule, t, x_t)
}

/// Free-function form of [`TiltedTarget::drs`].
pub fn analytic_drs(
    gmm: &GmmSpec,
    reward: &RewardSpec,
    schedule: &VpSchedule,
    t: f64,
    x_t: f64,
) -> Result<f64, TiltedError> {
    TiltedTarget::new(gmm.clone(), *reward)?.drs(schedule, t, x_t)
}
