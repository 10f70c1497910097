//! Terminal-reward-domination analysis on the two-mode generator family
//! `q_alpha = (1-alpha) N(-mu, sigma^2) + alpha N(+mu, sigma^2)`:
//! the closed-form collapse threshold and its quadrature twin, exact
//! objectives (terminal-reward, KL-regularized, integral-KL), convex
//! minimization over alpha, and the score-form gradient identity check.
//!
//! Noise levels are parameterized by `u = alpha_bar in (0, 1)` throughout, so
//! the infinite-horizon time integrals become integrals over the unit
//! interval via `dt = -du / (gamma u)`.

use thiserror::Error;

use crate::gmm::{norm_cdf, GmmSpec};
use crate::posterior::PosteriorMixture;
use crate::quad::{self, QuadConfig, QuadError};
use crate::reward::{RewardKind, RewardSpec};
use crate::tape::sigmoid;
use crate::tilted::{TiltedError, TiltedTarget};

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error(transparent)]
    Quad(#[from] QuadError),
    #[error(transparent)]
    Tilted(#[from] TiltedError),
    #[error("objective is not convex near alpha = {alpha}: second difference {value}")]
    NonConvex { alpha: f64, value: f64 },
    #[error("time grid needs at least {need} points, got {got}")]
    GridTooCoarse { need: usize, got: usize },
    #[error("alpha {0} outside [0, 1]")]
    AlphaRange(f64),
}

/// The symmetric-bimodal base and its one-parameter generator family.
#[derive(Debug, Clone)]
pub struct AlphaFamily {
    pub mu: f64,
    pub sigma: f64,
    pub gamma: f64,
    base: GmmSpec,
}

impl AlphaFamily {
    pub fn new(mu: f64, sigma: f64, gamma: f64) -> Self {
        Self { mu, sigma, gamma, base: GmmSpec::symmetric_bimodal(mu, sigma) }
    }

    /// Appendix-scale parameters mu = 2, sigma = 0.5, gamma = 20.
    pub fn toy_default() -> Self {
        Self::new(2.0, 0.5, 20.0)
    }

    pub fn base(&self) -> &GmmSpec {
        &self.base
    }

    pub fn member(&self, alpha: f64) -> Result<GmmSpec, TheoryError> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(TheoryError::AlphaRange(alpha));
        }
        Ok(GmmSpec::bimodal_weighted(alpha, self.mu, self.sigma).expect("valid member"))
    }

    /// Noised family member at noise level u = alpha_bar.
    pub fn member_at_u(&self, alpha: f64, u: f64) -> Result<GmmSpec, TheoryError> {
        let clean = self.member(alpha)?;
        Ok(noised_at_u(&clean, u))
    }

    /// Exact reward expectation under the hard indicator:
    /// alpha + (1 - 2 alpha) Phi(-mu/sigma).
    pub fn hard_reward_expectation(&self, alpha: f64) -> f64 {
        alpha + (1.0 - 2.0 * alpha) * norm_cdf(-self.mu / self.sigma)
    }
}

/// Forward marginal with alpha_bar = u.
fn noised_at_u(gmm: &GmmSpec, u: f64) -> GmmSpec {
    let su = u.sqrt();
    GmmSpec::new(
        gmm.components()
            .iter()
            .map(|c| crate::gmm::GmmComponent {
                weight: c.weight,
                mean: su * c.mean,
                variance: u * c.variance + (1.0 - u),
            })
            .collect(),
    )
    .expect("valid marginal")
}

/// Collapse threshold: gamma (1 - sigma^2) / (2 mu^2 (-log sigma^2)), with
/// the sigma^2 = 1 limit gamma / (2 mu^2).
pub fn collapse_threshold(mu: f64, sigma: f64, gamma: f64) -> f64 {
    let s2 = sigma * sigma;
    if (s2 - 1.0).abs() < 1e-8 {
        gamma / (2.0 * mu * mu)
    } else {
        gamma * (1.0 - s2) / (2.0 * mu * mu * (-(s2.ln())))
    }
}

/// The same threshold through its defining integral: B = (2 mu^2 / gamma)
/// ∫_0^1 du / (1 - (1 - sigma^2) u), with tau_crit = 1 / B.
pub fn b_crit_quadrature(mu: f64, sigma: f64, gamma: f64) -> Result<f64, TheoryError> {
    if mu == 0.0 {
        return Ok(0.0);
    }
    let c = 1.0 - sigma * sigma;
    let v = quad::integrate(|u| 1.0 / (1.0 - c * u), 0.0, 1.0, QuadConfig::default())?;
    Ok(2.0 * mu * mu / gamma * v)
}

/// KL(p || q) between two mixtures by quadrature.
pub fn kl_between(p: &GmmSpec, q: &GmmSpec, cfg: QuadConfig) -> Result<f64, TheoryError> {
    let (plo, phi) = p.support(12.0);
    let (qlo, qhi) = q.support(12.0);
    let (lo, hi) = (plo.min(qlo), phi.max(qhi));
    let mut pts = Vec::new();
    for c in p.components().iter().chain(q.components()) {
        pts.extend_from_slice(&quad::bump_points(c.mean, c.sd()));
    }
    let v = quad::integrate_points(
        |x| {
            let lp = p.log_density(x);
            if lp < -700.0 {
                0.0
            } else {
                lp.exp() * (lp - q.log_density(x))
            }
        },
        lo,
        hi,
        &pts,
        cfg,
    )?;
    Ok(v)
}

fn outer_cfg() -> QuadConfig {
    QuadConfig { abs_tol: 1e-9, rel_tol: 1e-9, max_subdivisions: 200, initial_segments: 8 }
}

/// Exact terminal-reward objective: -E_{q_alpha}[r_hard] +
/// tau ∫_0^∞ KL(q_{alpha,t} || p_t) dt, the t-integral done in u = alpha_bar.
pub fn l_term_alpha(
    alpha: f64,
    tau: f64,
    family: &AlphaFamily,
    inner: QuadConfig,
) -> Result<f64, TheoryError> {
    let member = family.member(alpha)?;
    let reward_term = -family.hard_reward_expectation(alpha);
    if alpha == 0.5 {
        // the family member is the base itself: the KL term vanishes
        return Ok(reward_term);
    }
    let kl_term = quad::integrate(
        |u| {
            let p = noised_at_u(&member, u);
            let q = noised_at_u(family.base(), u);
            kl_between(&p, &q, inner).expect("inner KL quadrature") / u
        },
        0.0,
        1.0,
        outer_cfg(),
    )?;
    Ok(reward_term + tau * kl_term / family.gamma)
}

/// KL-regularized clean-sample objective:
/// -E_{q_alpha}[r] + tau KL(q_alpha || base).
pub fn l_rlhf_alpha(
    alpha: f64,
    tau: f64,
    family: &AlphaFamily,
    reward: &RewardSpec,
) -> Result<f64, TheoryError> {
    let member = family.member(alpha)?;
    let reward_term = match reward.kind {
        RewardKind::HardIndicator => {
            -(family.hard_reward_expectation(alpha) + reward.offset)
        }
        RewardKind::SmoothSigmoid { .. } => {
            let (lo, hi) = member.support(12.0);
            let mut pts = vec![0.0];
            for c in member.components() {
                pts.extend_from_slice(&quad::bump_points(c.mean, c.sd()));
            }
            -quad::integrate_points(
                |x| member.density(x) * reward.value(x),
                lo,
                hi,
                &pts,
                QuadConfig::default(),
            )?
        }
    };
    let kl = kl_between(&member, family.base(), QuadConfig::default())?;
    Ok(reward_term + tau * kl)
}

/// Integral-KL objective against the diffused tilted target:
/// ∫_0^∞ KL(q_{alpha,t} || q*_t) dt in u = alpha_bar.
pub fn l_ikl_alpha(
    alpha: f64,
    tau: f64,
    family: &AlphaFamily,
    reward: &RewardSpec,
) -> Result<f64, TheoryError> {
    debug_assert_eq!(reward.tau, tau, "estimator and target temperatures agree");
    let member = family.member(alpha)?;
    let target = TiltedTarget::new(family.base().clone(), *reward)?;
    let log_z = target.z.ln();
    let v = quad::integrate(
        |u| {
            let p = noised_at_u(&member, u);
            let q_plain = noised_at_u(family.base(), u);
            let (lo, hi) = p.support(12.0);
            let mut pts = Vec::new();
            for c in p.components().iter().chain(q_plain.components()) {
                pts.extend_from_slice(&quad::bump_points(c.mean, c.sd()));
            }
            let kl = quad::integrate_points(
                |x| {
                    let lp = p.log_density(x);
                    if lp < -700.0 {
                        return 0.0;
                    }
                    let post = PosteriorMixture::from_kernel(
                        family.base(),
                        u.sqrt(),
                        1.0 - u,
                        x,
                    );
                    let tilt = post
                        .expectation_tilt(reward)
                        .expect("posterior tilt expectation");
                    let lq = q_plain.log_density(x) + tilt.ln() - log_z;
                    lp.exp() * (lp - lq)
                },
                lo,
                hi,
                &pts,
                QuadConfig { abs_tol: 1e-10, rel_tol: 1e-10, ..QuadConfig::default() },
            )
            .expect("inner KL quadrature");
            kl / u
        },
        0.0,
        1.0,
        outer_cfg(),
    )?;
    Ok(v / family.gamma)
}

/// Result of a convex line search over alpha.
#[derive(Debug, Clone, Copy)]
pub struct AlphaStar {
    pub alpha: f64,
    pub value: f64,
}

/// Golden-section minimization on [0, 1] with a convexity screen; boundary
/// minima are reported exactly at 0 or 1.
pub fn minimize_alpha<F>(mut objective: F, tol: f64) -> Result<AlphaStar, TheoryError>
where
    F: FnMut(f64) -> Result<f64, TheoryError>,
{
    let grid_n = 33;
    let mut vals = Vec::with_capacity(grid_n);
    for i in 0..grid_n {
        let a = i as f64 / (grid_n - 1) as f64;
        vals.push((a, objective(a)?));
    }
    let scale = vals
        .iter()
        .map(|(_, v)| v.abs())
        .fold(0.0f64, f64::max)
        .max(1.0);
    for w in vals.windows(3) {
        let second = w[2].1 - 2.0 * w[1].1 + w[0].1;
        if second < -1e-6 * scale {
            return Err(TheoryError::NonConvex { alpha: w[1].0, value: second });
        }
    }
    let (best_idx, _) = vals
        .iter()
        .enumerate()
        .min_by(|(_, (_, a)), (_, (_, b))| a.total_cmp(b))
        .expect("nonempty grid");
    // Boundary classification by the one-sided derivative: an interior
    // optimum can sit arbitrarily close to the edge (the boundary basin is
    // exponentially sharp above the collapse threshold), so grid values
    // alone cannot decide.
    let h = 1e-5;
    if best_idx == 0 {
        let d = (objective(h)? - objective(0.0)?) / h;
        if d >= 0.0 {
            return Ok(AlphaStar { alpha: 0.0, value: vals[0].1 });
        }
    }
    if best_idx == grid_n - 1 {
        let d = (objective(1.0)? - objective(1.0 - h)?) / h;
        if d <= 0.0 {
            return Ok(AlphaStar { alpha: 1.0, value: vals[grid_n - 1].1 });
        }
    }
    let (mut lo, mut hi) = (
        vals[best_idx.saturating_sub(1)].0,
        vals[(best_idx + 1).min(grid_n - 1)].0,
    );
    let inv_phi = 0.618_033_988_749_894_9;
    let mut a = hi - inv_phi * (hi - lo);
    let mut b = lo + inv_phi * (hi - lo);
    let (mut fa, mut fb) = (objective(a)?, objective(b)?);
    while hi - lo > tol {
        if fa <= fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - inv_phi * (hi - lo);
            fa = objective(a)?;
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + inv_phi * (hi - lo);
            fb = objective(b)?;
        }
    }
    let alpha = 0.5 * (lo + hi);
    Ok(AlphaStar { alpha, value: objective(alpha)? })
}

/// Per-noise-level comparison of the analytic alpha-derivative of
/// KL(q_{alpha,t} || q*_t) against the score-form expectation.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// (t, finite-difference lhs, score-form rhs) per grid point.
    pub entries: Vec<(f64, f64, f64)>,
    pub max_rel_error: f64,
}

/// Checks the score-form derivative identity on the alpha family: for each
/// grid time, d/d alpha KL(q_{alpha,t} || q*_t) must equal
/// E[(s_alpha - s_ref - s_r)(x_t) * dx_t/d alpha], where dx_t/d alpha flows
/// through the quantile reparameterization of the mixture. The expectation
/// side reduces to a single quadrature: the x_0 integral of the quantile
/// Jacobian against the forward kernel has a closed Phi form.
pub fn ikl_gradient_check(
    family: &AlphaFamily,
    reward: &RewardSpec,
    tau: f64,
    alpha: f64,
    t_grid: &[f64],
) -> Result<GradCheckReport, TheoryError> {
    debug_assert_eq!(reward.tau, tau);
    if t_grid.len() < 4 {
        return Err(TheoryError::GridTooCoarse { need: 4, got: t_grid.len() });
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(TheoryError::AlphaRange(alpha));
    }
    let target = TiltedTarget::new(family.base().clone(), *reward)?;
    let log_z = target.z.ln();
    let mut entries = Vec::with_capacity(t_grid.len());
    let mut max_rel: f64 = 0.0;
    for &t in t_grid {
        let u = (-family.gamma * t).exp();
        let su = u.sqrt();
        let kl_at = |a: f64| -> Result<f64, TheoryError> {
            let p = family.member_at_u(a, u)?;
            let q_plain = noised_at_u(family.base(), u);
            let (lo, hi) = p.support(12.0);
            let mut pts = Vec::new();
            for c in p.components().iter().chain(q_plain.components()) {
                pts.extend_from_slice(&quad::bump_points(c.mean, c.sd()));
            }
            Ok(quad::integrate_points(
                |x| {
                    let lp = p.log_density(x);
                    if lp < -700.0 {
                        return 0.0;
                    }
                    let post =
                        PosteriorMixture::from_kernel(family.base(), su, 1.0 - u, x);
                    let tilt = post.expectation_tilt(reward).expect("tilt quadrature");
                    lp.exp() * (lp - (q_plain.log_density(x) + tilt.ln() - log_z))
                },
                lo,
                hi,
                &pts,
                QuadConfig { abs_tol: 1e-11, rel_tol: 1e-11, ..QuadConfig::default() },
            )?)
        };
        let h = 1e-5;
        let lhs = (kl_at(alpha + h)? - kl_at(alpha - h)?) / (2.0 * h);

        // rhs: ∫ h(x_t) w(x_t) dx_t with
        //   h = s_alpha - s_ref - s_r
        //   w(x_t) = Phi((x_t/su + mu)/R) - Phi((x_t/su - mu)/R),
        //   R^2 = sigma^2 + (1-u)/u
        let p_t = family.member_at_u(alpha, u)?;
        let q_t = noised_at_u(family.base(), u);
        let r_scale = (family.sigma * family.sigma + (1.0 - u) / u).sqrt();
        let (lo, hi) = p_t.support(14.0);
        let mut pts = Vec::new();
        for c in p_t.components().iter().chain(q_t.components()) {
            pts.extend_from_slice(&quad::bump_points(c.mean, c.sd()));
        }
        let rhs = quad::integrate_points(
            |x| {
                let weight = norm_cdf((x / su + family.mu) / r_scale)
                    - norm_cdf((x / su - family.mu) / r_scale);
                if weight <= 0.0 {
                    return 0.0;
                }
                let post = PosteriorMixture::from_kernel(family.base(), su, 1.0 - u, x);
                let tilt = post.expectation_tilt(reward).expect("tilt quadrature");
                let d_tilt = post.d_expectation_tilt(reward).expect("tilt derivative");
                let mismatch = p_t.score(x) - q_t.score(x) - d_tilt / tilt;
                mismatch * weight
            },
            lo,
            hi,
            &pts,
            QuadConfig { abs_tol: 1e-11, rel_tol: 1e-11, ..QuadConfig::default() },
        )?;
        let rel = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1e-12);
        max_rel = max_rel.max(rel);
        entries.push((t, lhs, rhs));
    }
    Ok(GradCheckReport { entries, max_rel_error: max_rel })
}

/// Fraction of samples above the hard decision boundary.
pub fn positive_mass(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().filter(|&&x| x > 0.0).count() as f64 / samples.len() as f64
}

/// Theoretical positive mass of the tilted target: sigmoid(1/tau).
pub fn target_mass(tau: f64) -> f64 {
    sigmoid(1.0 / tau)
}

/// Histogram configuration for the sample-vs-target divergence diagnostic.
#[derive(Debug, Clone, Copy)]
pub struct HistConfig {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
}

impl HistConfig {
    /// Grid spanning the base mixture: (-mu - 6 sigma, mu + 6 sigma).
    pub fn for_family(mu: f64, sigma: f64) -> Self {
        Self { lo: -mu - 6.0 * sigma, hi: mu + 6.0 * sigma, bins: 200 }
    }
}

/// KL(hist(samples) || q*) over a fixed grid with add-one smoothing on both
/// sides; out-of-range samples fall into the edge bins.
pub fn kl_to_tilted(
    samples: &[f64],
    target: &TiltedTarget,
    grid: HistConfig,
) -> Result<f64, TheoryError> {
    assert!(grid.bins >= 2 && grid.hi > grid.lo, "histogram grid misconfigured");
    assert!(!samples.is_empty(), "need samples");
    let b = grid.bins;
    let n = samples.len();
    let width = (grid.hi - grid.lo) / b as f64;
    let mut counts = vec![0usize; b];
    for &x in samples {
        let idx = (((x - grid.lo) / width).floor() as isize).clamp(0, b as isize - 1) as usize;
        counts[idx] += 1;
    }
    let mut kl = 0.0;
    for (i, &c) in counts.iter().enumerate() {
        let lo = grid.lo + i as f64 * width;
        let hi = lo + width;
        let q_mass = quad::integrate_points(
            |x| target.density(x),
            lo,
            hi,
            &[0.0],
            QuadConfig { abs_tol: 1e-12, rel_tol: 1e-9, initial_segments: 2, ..QuadConfig::default() },
        )?;
        let p_hat = (c as f64 + 1.0) / (n as f64 + b as f64);
        let q_hat = (n as f64 * q_mass + 1.0) / (n as f64 + b as f64);
        kl += p_hat * (p_hat / q_hat).ln();
    }
    Ok(kl)
}

/// Slope of the terminal-reward objective at the collapsed endpoint,
/// L'(1-) = -E'[r] + tau ∫ D'_t(1) dt, with D'_t(1) evaluated by direct
/// quadrature of the mixture log-ratio (no closed-form shortcut, so this is
/// an independent locator for the collapse transition).
pub fn boundary_derivative(family: &AlphaFamily, tau: f64) -> Result<f64, TheoryError> {
    let reward_slope = 1.0 - 2.0 * norm_cdf(-family.mu / family.sigma);
    let kl_slope = quad::integrate(
        |u| {
            let plus = noised_at_u(
                &GmmSpec::single(family.mu, family.sigma * family.sigma),
                u,
            );
            let minus = noised_at_u(
                &GmmSpec::single(-family.mu, family.sigma * family.sigma),
                u,
            );
            let (lo, hi) = (
                minus.components()[0].mean - 14.0 * minus.components()[0].sd(),
                plus.components()[0].mean + 14.0 * plus.components()[0].sd(),
            );
            let pts = [
                minus.components()[0].mean,
                0.0,
                plus.components()[0].mean,
            ];
            let d = quad::integrate_points(
                |x| {
                    let lp = plus.log_density(x);
                    let lm = minus.log_density(x);
                    let base = if lp > lm {
                        lp + (1.0 + (lm - lp).exp()).ln() - std::f64::consts::LN_2
                    } else {
                        lm + (1.0 + (lp - lm).exp()).ln() - std::f64::consts::LN_2
                    };
                    let diff = if lp < -700.0 { 0.0 } else { lp.exp() }
                        - if lm < -700.0 { 0.0 } else { lm.exp() };
                    diff * (lp - base)
                },
                lo,
                hi,
                &pts,
                QuadConfig { abs_tol: 1e-11, rel_tol: 1e-11, ..QuadConfig::default() },
            )
            .expect("inner derivative quadrature");
            d / u
        },
        0.0,
        1.0,
        outer_cfg(),
    )? / family.gamma;
    Ok(-reward_slope + tau * kl_slope)
}

/// Sweep alpha_star(tau) and bracket the collapse transition. Collapse is
/// classified by the boundary derivative: above the threshold the interior
/// optimum detaches from 1 only exponentially slowly, so the sign of L'(1-)
/// is the sharp criterion while alpha_star records the optimum itself.
#[derive(Debug, Clone)]
pub struct ThresholdScan {
    /// (tau, alpha_star, boundary derivative) in ascending tau order.
    pub points: Vec<(f64, f64, f64)>,
    /// Largest tau that still collapses (L'(1-) <= 0).
    pub bracket_lo: Option<f64>,
    /// Smallest tau with an interior optimum (L'(1-) > 0).
    pub bracket_hi: Option<f64>,
}

pub fn scan_collapse_threshold(
    family: &AlphaFamily,
    taus: &[f64],
    inner: QuadConfig,
) -> Result<ThresholdScan, TheoryError> {
    let mut points = Vec::with_capacity(taus.len());
    let mut sorted = taus.to_vec();
    sorted.sort_by(f64::total_cmp);
    for &tau in &sorted {
        let star = minimize_alpha(|a| l_term_alpha(a, tau, family, inner), 1e-6)?;
        let deriv = boundary_derivative(family, tau)?;
        points.push((tau, star.alpha, deriv));
    }
    let bracket_lo = points
        .iter()
        .filter(|(_, _, d)| *d <= 0.0)
        .map(|(t, _, _)| *t)
        .fold(None, |acc: Option<f64>, t| Some(acc.map_or(t, |m| m.max(t))));
    let bracket_hi = points
        .iter()
        .filter(|(_, _, d)| *d > 0.0)
        .map(|(t, _, _)| *t)
        .fold(None, |acc: Option<f64>, t| Some(acc.map_or(t, |m| m.min(t))));
    Ok(ThresholdScan { points, bracket_lo, bracket_hi })
}
