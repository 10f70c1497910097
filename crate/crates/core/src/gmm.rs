//! Finite 1-D Gaussian mixtures: the reference distribution, every forward
//! marginal, and the carrier for posterior mixtures.

use thiserror::Error;

use crate::rng::RngStream;

pub const LN_2PI: f64 = 1.837877066409345483560659472811;

/// Standard normal density.
#[inline]
pub fn norm_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal CDF, accurate in both tails.
#[inline]
pub fn norm_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z * std::f64::consts::FRAC_1_SQRT_2)
}

#[derive(Debug, Error)]
pub enum GmmError {
    #[error("mixture must have at least one component")]
    Empty,
    #[error("component weights sum to {sum}, expected 1 within 1e-12")]
    WeightSum { sum: f64 },
    #[error("component {index} has non-positive variance {variance}")]
    Variance { index: usize, variance: f64 },
    #[error("component {index} has non-finite parameters")]
    NonFinite { index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: f64,
    pub variance: f64,
}

impl GmmComponent {
    pub fn sd(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// A finite Gaussian mixture with validated weights and variances.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmSpec {
    components: Vec<GmmComponent>,
}

impl GmmSpec {
    pub fn new(components: Vec<GmmComponent>) -> Result<Self, GmmError> {
        if components.is_empty() {
            return Err(GmmError::Empty);
        }
        let mut sum = 0.0;
        for (index, c) in components.iter().enumerate() {
            if !(c.weight.is_finite() && c.mean.is_finite() && c.variance.is_finite()) {
                return Err(GmmError::NonFinite { index });
            }
            if c.variance <= 0.0 {
                return Err(GmmError::Variance { index, variance: c.variance });
            }
            sum += c.weight;
        }
        if (sum - 1.0).abs() > 1e-12 {
            return Err(GmmError::WeightSum { sum });
        }
        Ok(Self { components })
    }

    pub fn single(mean: f64, variance: f64) -> Self {
        Self::new(vec![GmmComponent { weight: 1.0, mean, variance }]).expect("valid single")
    }

    /// Equal-weight modes at ±mu with common variance sigma^2.
    pub fn symmetric_bimodal(mu: f64, sigma: f64) -> Self {
        Self::new(vec![
            GmmComponent { weight: 0.5, mean: -mu, variance: sigma * sigma },
            GmmComponent { weight: 0.5, mean: mu, variance: sigma * sigma },
        ])
        .expect("valid bimodal")
    }

    /// Two-mode family member: weight `alpha` on the +mu mode.
    pub fn bimodal_weighted(alpha: f64, mu: f64, sigma: f64) -> Result<Self, GmmError> {
        Self::new(vec![
            GmmComponent { weight: 1.0 - alpha, mean: -mu, variance: sigma * sigma },
            GmmComponent { weight: alpha, mean: mu, variance: sigma * sigma },
        ])
    }

    pub fn components(&self) -> &[GmmComponent] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    /// Per-component log w_i + log N(x; mu_i, v_i).
    fn log_terms(&self, x: f64) -> impl Iterator<Item = f64> + '_ {
        self.components.iter().map(move |c| {
            c.weight.ln()
                - 0.5 * ((x - c.mean) * (x - c.mean) / c.variance + LN_2PI + c.variance.ln())
        })
    }

    pub fn log_density(&self, x: f64) -> f64 {
        let mut max = f64::NEG_INFINITY;
        for a in self.log_terms(x) {
            if a > max {
                max = a;
            }
        }
        let sum: f64 = self.log_terms(x).map(|a| (a - max).exp()).sum();
        max + sum.ln()
    }

    pub fn density(&self, x: f64) -> f64 {
        self.log_density(x).exp()
    }

    /// Posterior component responsibilities at x.
    pub fn responsibilities(&self, x: f64) -> Vec<f64> {
        let terms: Vec<f64> = self.log_terms(x).collect();
        let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut out: Vec<f64> = terms.iter().map(|a| (a - max).exp()).collect();
        let sum: f64 = out.iter().sum();
        for r in &mut out {
            *r /= sum;
        }
        out
    }

    /// d/dx log density.
    pub fn score(&self, x: f64) -> f64 {
        let rho = self.responsibilities(x);
        rho.iter()
            .zip(&self.components)
            .map(|(r, c)| -r * (x - c.mean) / c.variance)
            .sum()
    }

    /// d/dx score; used by oracle checks on steep mixtures.
    pub fn score_derivative(&self, x: f64) -> f64 {
        let rho = self.responsibilities(x);
        let gs: Vec<f64> = self.components.iter().map(|c| -(x - c.mean) / c.variance).collect();
        let s: f64 = rho.iter().zip(&gs).map(|(r, g)| r * g).sum();
        let mut d = 0.0;
        for ((r, g), c) in rho.iter().zip(&gs).zip(&self.components) {
            // d rho_i/dx = rho_i (g_i - s)
            d += r * (g - s) * g;
            d += r * (-1.0 / c.variance);
        }
        d
    }

    pub fn cdf(&self, x: f64) -> f64 {
        self.components.iter().map(|c| c.weight * norm_cdf((x - c.mean) / c.sd())).sum()
    }

    /// Mass above zero.
    pub fn positive_mass(&self) -> f64 {
        self.components.iter().map(|c| c.weight * norm_cdf(c.mean / c.sd())).sum()
    }

    pub fn mean(&self) -> f64 {
        self.components.iter().map(|c| c.weight * c.mean).sum()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.components
            .iter()
            .map(|c| c.weight * (c.variance + c.mean * c.mean))
            .sum::<f64>()
            - m * m
    }

    /// Interval `sds` standard deviations beyond the extreme means;
    /// quadratures over the mixture use it as their support.
    pub fn support(&self, sds: f64) -> (f64, f64) {
        let lo = self
            .components
            .iter()
            .map(|c| c.mean - sds * c.sd())
            .fold(f64::INFINITY, f64::min);
        let hi = self
            .components
            .iter()
            .map(|c| c.mean + sds * c.sd())
            .fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }

    pub fn sample(&self, rng: &mut RngStream) -> f64 {
        let u = rng.uniform();
        let mut acc = 0.0;
        let mut chosen = self.components.len() - 1;
        for (i, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                chosen = i;
                break;
            }
        }
        let c = &self.components[chosen];
        c.mean + c.sd() * rng.normal()
    }

    pub fn sample_many(&self, rng: &mut RngStream, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.sample(rng)).collect()
    }
}
