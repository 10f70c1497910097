//! Exact clean-sample posteriors under a linear-Gaussian observation
//! `x_t = a x_0 + b eps`. For the VP process `a = sqrt(alpha_bar)`,
//! `b^2 = 1 - alpha_bar`; for the rectified-flow interpolation `a = 1 - t`,
//! `b = t`. With a Gaussian-mixture prior the posterior is again a mixture:
//! Bayes responsibilities on the forward marginal and conjugate-Gaussian
//! components, all with closed-form derivatives in `x_t`.

use crate::gmm::{norm_cdf, norm_pdf, GmmComponent, GmmSpec};
use crate::quad::{self, QuadConfig};
use crate::reward::{RewardKind, RewardSpec};
use crate::rng::RngStream;
use crate::schedule::{ScheduleError, VpSchedule};

#[derive(Debug, Clone, Copy)]
pub struct PosteriorComponent {
    /// Responsibility rho_j(x_t).
    pub weight: f64,
    /// d rho_j / d x_t.
    pub d_weight: f64,
    /// Posterior mean m_j(x_t).
    pub mean: f64,
    /// d m_j / d x_t (independent of x_t itself).
    pub d_mean: f64,
    /// Posterior variance (independent of x_t).
    pub variance: f64,
}

impl PosteriorComponent {
    pub fn sd(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// Posterior mixture of x_0 given one observation x_t.
#[derive(Debug, Clone)]
pub struct PosteriorMixture {
    pub x_t: f64,
    comps: Vec<PosteriorComponent>,
}

/// Posterior under the VP forward process at time t > 0.
pub fn posterior_mixture(
    gmm: &GmmSpec,
    schedule: &VpSchedule,
    t: f64,
    x_t: f64,
) -> Result<PosteriorMixture, ScheduleError> {
    schedule.check_positive_time(t)?;
    let ab = schedule.alpha_bar(t);
    Ok(PosteriorMixture::from_kernel(gmm, ab.sqrt(), 1.0 - ab, x_t))
}

impl PosteriorMixture {
    /// Posterior under x_t = a x_0 + N(0, b2). Callers guarantee b2 > 0.
    pub fn from_kernel(gmm: &GmmSpec, a: f64, b2: f64, x_t: f64) -> Self {
        assert!(b2 > 0.0, "degenerate observation kernel");
        let n = gmm.len();
        let mut log_lik = Vec::with_capacity(n);
        let mut marg = Vec::with_capacity(n);
        for c in gmm.components() {
            let m = a * c.mean;
            let v = a * a * c.variance + b2;
            log_lik.push(c.weight.ln() - 0.5 * ((x_t - m) * (x_t - m) / v + v.ln()));
            marg.push((m, v));
        }
        let max = log_lik.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut rho: Vec<f64> = log_lik.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = rho.iter().sum();
        for r in &mut rho {
            *r /= sum;
        }
        // d log N(x_t; M_j, V_j) / d x_t
        let g: Vec<f64> = marg.iter().map(|&(m, v)| -(x_t - m) / v).collect();
        let g_bar: f64 = rho.iter().zip(&g).map(|(r, gi)| r * gi).sum();
        let comps = gmm
            .components()
            .iter()
            .enumerate()
            .map(|(j, c)| {
                let (_, v_marg) = marg[j];
                let mean = (c.mean * b2 + a * c.variance * x_t) / v_marg;
                PosteriorComponent {
                    weight: rho[j],
                    d_weight: rho[j] * (g[j] - g_bar),
                    mean,
                    d_mean: a * c.variance / v_marg,
                    variance: c.variance * b2 / v_marg,
                }
            })
            .collect();
        Self { x_t, comps }
    }

    pub fn components(&self) -> &[PosteriorComponent] {
        &self.comps
    }

    pub fn as_gmm(&self) -> GmmSpec {
        let total: f64 = self.comps.iter().map(|c| c.weight).sum();
        GmmSpec::new(
            self.comps
                .iter()
                .map(|c| GmmComponent {
                    weight: c.weight / total,
                    mean: c.mean,
                    variance: c.variance,
                })
                .collect(),
        )
        .expect("posterior mixture is valid")
    }

    pub fn density(&self, x0: f64) -> f64 {
        self.comps
            .iter()
            .map(|c| c.weight * norm_pdf((x0 - c.mean) / c.sd()) / c.sd())
            .sum()
    }

    pub fn cdf(&self, x0: f64) -> f64 {
        self.comps.iter().map(|c| c.weight * norm_cdf((x0 - c.mean) / c.sd())).sum()
    }

    /// d F(x0; x_t) / d x_t at fixed x0.
    pub fn d_cdf_d_xt(&self, x0: f64) -> f64 {
        self.comps
            .iter()
            .map(|c| {
                let z = (x0 - c.mean) / c.sd();
                c.d_weight * norm_cdf(z) - c.weight * norm_pdf(z) * c.d_mean / c.sd()
            })
            .sum()
    }

    pub fn mean(&self) -> f64 {
        self.comps.iter().map(|c| c.weight * c.mean).sum()
    }

    /// P(x_0 > 0 | x_t).
    pub fn mass_above_zero(&self) -> f64 {
        self.comps.iter().map(|c| c.weight * norm_cdf(c.mean / c.sd())).sum()
    }

    /// d P(x_0 > 0 | x_t) / d x_t.
    pub fn d_mass_above_zero(&self) -> f64 {
        self.comps
            .iter()
            .map(|c| {
                let z = c.mean / c.sd();
                c.d_weight * norm_cdf(z) + c.weight * norm_pdf(z) * c.d_mean / c.sd()
            })
            .sum()
    }

    fn component_quadrature<F: Fn(f64) -> f64>(
        c: &PosteriorComponent,
        f: F,
        cfg: QuadConfig,
    ) -> Result<f64, quad::QuadError> {
        let sd = c.sd();
        let (lo, hi) = (c.mean - 10.0 * sd, c.mean + 10.0 * sd);
        // the reward bends at the origin, so mark it when it is in range
        let pts = [c.mean - sd, c.mean + sd, 0.0];
        quad::integrate_points(|x| f(x) * norm_pdf((x - c.mean) / sd) / sd, lo, hi, &pts, cfg)
    }

    /// E[exp(r(x_0)/tau) | x_t]; closed form for the hard indicator,
    /// quadrature for the smooth reward.
    pub fn expectation_tilt(&self, reward: &RewardSpec) -> Result<f64, quad::QuadError> {
        match reward.kind {
            RewardKind::HardIndicator => {
                let base = (reward.offset / reward.tau).exp();
                let gain = (1.0 / reward.tau).exp() - 1.0;
                Ok(base * (1.0 + gain * self.mass_above_zero()))
            }
            RewardKind::SmoothSigmoid { .. } => {
                let mut acc = 0.0;
                for c in &self.comps {
                    acc += c.weight
                        * Self::component_quadrature(c, |x| reward.tilt(x), QuadConfig::default())?;
                }
                Ok(acc)
            }
        }
    }

    /// d E[exp(r(x_0)/tau) | x_t] / d x_t, via the responsibility and
    /// posterior-mean derivatives (no finite differences).
    pub fn d_expectation_tilt(&self, reward: &RewardSpec) -> Result<f64, quad::QuadError> {
        match reward.kind {
            RewardKind::HardIndicator => {
                let base = (reward.offset / reward.tau).exp();
                let gain = (1.0 / reward.tau).exp() - 1.0;
                let mut acc = 0.0;
                for c in &self.comps {
                    let z = c.mean / c.sd();
                    acc += base
                        * (c.d_weight * (1.0 + gain * norm_cdf(z))
                            + c.weight * gain * norm_pdf(z) * c.d_mean / c.sd());
                }
                Ok(acc)
            }
            RewardKind::SmoothSigmoid { .. } => {
                let mut acc = 0.0;
                for c in &self.comps {
                    let value =
                        Self::component_quadrature(c, |x| reward.tilt(x), QuadConfig::default())?;
                    // d/d mean of E_j is E[ tilt(x) (x - m)/s^2 ]
                    let dmean = Self::component_quadrature(
                        c,
                        |x| reward.tilt(x) * (x - c.mean) / c.variance,
                        QuadConfig::default(),
                    )?;
                    acc += c.d_weight * value + c.weight * c.d_mean * dmean;
                }
                Ok(acc)
            }
        }
    }

    /// E[r(x_0) | x_t].
    pub fn expectation_reward(&self, reward: &RewardSpec) -> Result<f64, quad::QuadError> {
        match reward.kind {
            RewardKind::HardIndicator => Ok(self.mass_above_zero() + reward.offset),
            RewardKind::SmoothSigmoid { .. } => {
                let mut acc = 0.0;
                for c in &self.comps {
                    acc += c.weight
                        * Self::component_quadrature(c, |x| reward.value(x), QuadConfig::default())?;
                }
                Ok(acc)
            }
        }
    }

    /// d E[r(x_0) | x_t] / d x_t.
    pub fn d_expectation_reward(&self, reward: &RewardSpec) -> Result<f64, quad::QuadError> {
        match reward.kind {
            RewardKind::HardIndicator => Ok(self.d_mass_above_zero()),
            RewardKind::SmoothSigmoid { .. } => {
                let mut acc = 0.0;
                for c in &self.comps {
                    let value =
                        Self::component_quadrature(c, |x| reward.value(x), QuadConfig::default())?;
                    let dmean = Self::component_quadrature(
                        c,
                        |x| reward.value(x) * (x - c.mean) / c.variance,
                        QuadConfig::default(),
                    )?;
                    acc += c.d_weight * value + c.weight * c.d_mean * dmean;
                }
                Ok(acc)
            }
        }
    }

    /// Ancestral draw.
    pub fn sample(&self, rng: &mut RngStream) -> f64 {
        let u = rng.uniform();
        let mut acc = 0.0;
        let mut idx = self.comps.len() - 1;
        for (i, c) in self.comps.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                idx = i;
                break;
            }
        }
        let c = &self.comps[idx];
        c.mean + c.sd() * rng.normal()
    }

    /// Quantile draw: x_0 with F(x_0 | x_t) = u. Smooth in x_t for fixed u,
    /// which is what makes the exact-posterior chain pathwise differentiable.
    pub fn inverse_cdf(&self, u: f64) -> f64 {
        debug_assert!(u > 0.0 && u < 1.0);
        let (mut lo, mut hi) = self.comps.iter().fold(
            (f64::INFINITY, f64::NEG_INFINITY),
            |(lo, hi), c| (lo.min(c.mean - 12.0 * c.sd()), hi.max(c.mean + 12.0 * c.sd())),
        );
        let mut x = 0.5 * (lo + hi);
        for _ in 0..200 {
            let err = self.cdf(x) - u;
            if err > 0.0 {
                hi = x;
            } else {
                lo = x;
            }
            let f = self.density(x);
            let newton = if f > 1e-300 { x - err / f } else { f64::NAN };
            x = if newton.is_finite() && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if hi - lo < 1e-14 * (1.0 + x.abs()) {
                break;
            }
        }
        x
    }

    /// Pathwise derivative of the quantile map: d x_0 / d x_t at fixed u,
    /// by the implicit function theorem on F(x_0; x_t) = u.
    pub fn d_inverse_cdf_d_xt(&self, x0: f64) -> f64 {
        -self.d_cdf_d_xt(x0) / self.density(x0)
    }
}
