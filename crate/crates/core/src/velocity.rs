//! Rectified-flow analytics under the linear interpolation
//! `x_t = (1-t) x_0 + t eps`: the mixture marginal and the exact conditional
//! velocity `E[eps - x_0 | x_t] = (x_t - E[x_0 | x_t]) / t`.

use thiserror::Error;

use crate::gmm::{GmmComponent, GmmSpec};
use crate::posterior::PosteriorMixture;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("flow time {0} outside the open interval (0, 1)")]
    TimeRange(f64),
}

pub fn check_flow_time(t: f64) -> Result<(), FlowError> {
    if !(t > 0.0 && t < 1.0) {
        return Err(FlowError::TimeRange(t));
    }
    Ok(())
}

/// Marginal of the interpolation at flow time t: means scale by (1-t),
/// variances are (1-t)^2 v + t^2.
pub fn interp_marginal(gmm: &GmmSpec, t: f64) -> Result<GmmSpec, FlowError> {
    check_flow_time(t)?;
    let a = 1.0 - t;
    let comps = gmm
        .components()
        .iter()
        .map(|c| GmmComponent {
            weight: c.weight,
            mean: a * c.mean,
            variance: a * a * c.variance + t * t,
        })
        .collect();
    Ok(GmmSpec::new(comps).expect("marginal of valid mixture"))
}

/// Exact velocity field at (x_t, t).
pub fn analytic_velocity(gmm: &GmmSpec, t: f64, x_t: f64) -> Result<f64, FlowError> {
    check_flow_time(t)?;
    let post = PosteriorMixture::from_kernel(gmm, 1.0 - t, t * t, x_t);
    Ok((x_t - post.mean()) / t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_gaussian_velocity_is_linear_in_x() {
        // for x0 ~ N(0,1): E[x0|x_t] = (1-t) x_t / ((1-t)^2 + t^2)
        let g = GmmSpec::single(0.0, 1.0);
        for t in [0.2, 0.5, 0.8] {
            let rho2 = (1.0 - t) * (1.0 - t) + t * t;
            for x in [-1.5, 0.3, 2.0] {
                let want = (x - (1.0 - t) * x / rho2) / t;
                let got = analytic_velocity(&g, t, x).unwrap();
                assert!((got - want).abs() < 1e-12, "t={t} x={x}");
            }
        }
    }

    #[test]
    fn symmetric_bimodal_velocity_vanishes_at_zero() {
        let g = GmmSpec::symmetric_bimodal(2.0, 0.5);
        for t in [0.1, 0.5, 0.9] {
            assert!(analytic_velocity(&g, t, 0.0).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn endpoints_rejected() {
        let g = GmmSpec::single(0.0, 1.0);
        assert!(matches!(analytic_velocity(&g, 0.0, 0.5), Err(FlowError::TimeRange(_))));
        assert!(matches!(analytic_velocity(&g, 1.0, 0.5), Err(FlowError::TimeRange(_))));
        assert!(matches!(interp_marginal(&g, 1.2), Err(FlowError::TimeRange(_))));
    }

    #[test]
    fn velocity_matches_expectation_identity() {
        // eps - x0 = (x_t - x0)/t pathwise, so the conditional expectation
        // can also be computed by direct posterior quadrature
        let g = GmmSpec::symmetric_bimodal(2.0, 0.5);
        let (t, x_t) = (0.35, 0.7);
        let post = PosteriorMixture::from_kernel(&g, 1.0 - t, t * t, x_t);
        let via_posterior = (x_t - post.mean()) / t;
        let direct = analytic_velocity(&g, t, x_t).unwrap();
        assert!((via_posterior - direct).abs() < 1e-14);
    }
}
