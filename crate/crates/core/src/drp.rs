//! The diffused-reward-proxy estimator: reward-softmax-weighted pathwise
//! reward gradients through K differentiable S-step denoising chains, plus
//! the first-order (classifier-guidance style) comparator.

use ndarray::Array2;
use thiserror::Error;

use crate::diffusion::{
    ddpm_posterior_chain_on_tape, euler_flow_chain_on_tape, ChainError, ChainKind, ScoreField,
    VelocityField,
};
use crate::gmm::GmmSpec;
use crate::posterior::posterior_mixture;
use crate::quad::QuadError;
use crate::reward::RewardSpec;
use crate::rng::RngStream;
use crate::schedule::{ScheduleError, VpSchedule};
use crate::tape::{Tape, TapeError};

#[derive(Debug, Error)]
pub enum DrpError {
    #[error("estimator needs K >= 1 chains and S >= 1 steps")]
    BadShape,
    #[error("chain {chain} produced a non-finite endpoint at row {row}")]
    NonFiniteChain { chain: usize, row: usize },
    #[error("reference kind does not match configured chain kind")]
    ReferenceMismatch,
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Quad(#[from] QuadError),
}

/// Estimator settings: chain count K, chain length S, softmax temperature.
#[derive(Debug, Clone, Copy)]
pub struct DrpConfig {
    pub chains: usize,
    pub steps: usize,
    pub tau: f64,
    pub kind: ChainKind,
}

impl DrpConfig {
    pub fn new(chains: usize, steps: usize, tau: f64, kind: ChainKind) -> Self {
        Self { chains, steps, tau, kind }
    }
}

/// What the chains denoise with.
pub enum DrpReference<'a> {
    /// Stochastic VP chains driven by a frozen score field.
    Score { field: &'a dyn ScoreField, schedule: VpSchedule },
    /// Randomized-schedule Euler chains on a velocity field (flow time).
    Velocity { field: &'a dyn VelocityField },
    /// Draws from the exact posterior through its quantile map. Not part of
    /// the training pipeline: a harness that isolates Monte-Carlo error from
    /// chain-approximation error.
    ExactPosterior { gmm: &'a GmmSpec, schedule: VpSchedule },
}

impl DrpReference<'_> {
    fn kind(&self) -> Option<ChainKind> {
        match self {
            DrpReference::Score { .. } => Some(ChainKind::DdpmStochastic),
            DrpReference::Velocity { .. } => Some(ChainKind::EulerFlow),
            DrpReference::ExactPosterior { .. } => None,
        }
    }
}

/// One chain's contribution at one sample row, for inspection dumps.
#[derive(Debug, Clone, Copy)]
pub struct ChainRow {
    pub sample: usize,
    pub chain: usize,
    pub endpoint: f64,
    pub reward: f64,
    pub weight: f64,
    /// Pathwise d r(endpoint) / d x_t.
    pub gradient: f64,
}

pub struct DrpOutput {
    /// Estimated reward score per row.
    pub s_hat: Array2<f64>,
    /// Per-chain rows, present when requested.
    pub rows: Option<Vec<ChainRow>>,
    /// Count of clamped posterior deviations across all chains.
    pub sigma_clamps: usize,
}

/// Numerically stable softmax of `rewards / tau`.
pub fn softmax_weights(rewards: &[f64], tau: f64) -> Vec<f64> {
    let max = rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = rewards.iter().map(|r| ((r - max) / tau).exp()).collect();
    let sum: f64 = out.iter().sum();
    for w in &mut out {
        *w /= sum;
    }
    out
}

/// Runs K chains from each row of `x_t` and forms the softmax-weighted
/// pathwise gradient estimate of the reward score. Noise and schedule draws
/// are addressed by `(seed, path, chain, step, row)`, so results do not
/// depend on batch slicing or evaluation order.
pub fn drp_estimate(
    x_t: &Array2<f64>,
    t: &Array2<f64>,
    cfg: &DrpConfig,
    reward: &RewardSpec,
    reference: &DrpReference,
    seed: u64,
    path: &[u64],
    want_rows: bool,
) -> Result<DrpOutput, DrpError> {
    if cfg.chains == 0 || cfg.steps == 0 {
        return Err(DrpError::BadShape);
    }
    if let Some(kind) = reference.kind() {
        if kind != cfg.kind {
            return Err(DrpError::ReferenceMismatch);
        }
    }
    match reference {
        DrpReference::ExactPosterior { gmm, schedule } => {
            exact_posterior_estimate(x_t, t, cfg, reward, gmm, schedule, seed, path, want_rows)
        }
        _ => chain_estimate(x_t, t, cfg, reward, reference, seed, path, want_rows),
    }
}

#[allow(clippy::too_many_arguments)]
fn chain_estimate(
    x_t: &Array2<f64>,
    t: &Array2<f64>,
    cfg: &DrpConfig,
    reward: &RewardSpec,
    reference: &DrpReference,
    seed: u64,
    path: &[u64],
    want_rows: bool,
) -> Result<DrpOutput, DrpError> {
    let n = x_t.nrows();
    let k = cfg.chains;
    let mut tape = Tape::new();
    let x_node = tape.var(x_t.clone());
    let mut endpoints = Vec::with_capacity(k);
    let mut sigma_clamps = 0usize;
    for chain in 0..k {
        let endpoint = match reference {
            DrpReference::Score { field, schedule } => {
                let noises: Vec<Array2<f64>> = (0..cfg.steps.saturating_sub(1))
                    .map(|j| {
                        let mut key = path.to_vec();
                        key.extend_from_slice(&[0, chain as u64, j as u64]);
                        Array2::from_shape_fn((n, 1), |(row, _)| {
                            RngStream::at(seed, &key, row as u64).normal()
                        })
                    })
                    .collect();
                let result = ddpm_posterior_chain_on_tape(
                    *field, &mut tape, x_node, t, cfg.steps, &noises, schedule,
                )?;
                sigma_clamps += result.sigma_clamps;
                result.endpoint
            }
            DrpReference::Velocity { field } => {
                let mut key = path.to_vec();
                key.extend_from_slice(&[1, chain as u64]);
                let mut times = Array2::zeros((n, cfg.steps));
                for row in 0..n {
                    let mut rng = RngStream::at(seed, &key, (row * cfg.steps) as u64);
                    let mut ts: Vec<f64> =
                        (0..cfg.steps).map(|_| rng.uniform() * t[[row, 0]]).collect();
                    ts.sort_by(|a, b| b.total_cmp(a));
                    for (s, v) in ts.into_iter().enumerate() {
                        times[[row, s]] = v;
                    }
                }
                euler_flow_chain_on_tape(*field, &mut tape, x_node, t, &times)?
            }
            DrpReference::ExactPosterior { .. } => unreachable!("dispatched earlier"),
        };
        for row in 0..n {
            if !tape.value(endpoint)[[row, 0]].is_finite() {
                return Err(DrpError::NonFiniteChain { chain, row });
            }
        }
        endpoints.push(endpoint);
    }

    // rewards and softmax weights from endpoint values; the weights act as
    // constants in the pathwise estimator
    let mut rewards = Array2::zeros((n, k));
    for (chain, &e) in endpoints.iter().enumerate() {
        let vals = tape.value(e);
        for row in 0..n {
            rewards[[row, chain]] = reward.value(vals[[row, 0]]);
        }
    }
    let mut weights = Array2::zeros((n, k));
    for row in 0..n {
        let r: Vec<f64> = (0..k).map(|c| rewards[[row, c]]).collect();
        let w = softmax_weights(&r, cfg.tau);
        for c in 0..k {
            weights[[row, c]] = w[c];
        }
    }

    let mut s_hat = Array2::zeros((n, 1));
    let mut per_chain_grad = if want_rows { Some(vec![Array2::zeros((n, 1)); k]) } else { None };
    if reward.is_differentiable() {
        let mut weighted_terms = Vec::with_capacity(k);
        let mut reward_nodes = Vec::with_capacity(k);
        for (chain, &e) in endpoints.iter().enumerate() {
            let r_node = reward.on_tape(&mut tape, e).expect("differentiable reward");
            reward_nodes.push(r_node);
            let w_col = Array2::from_shape_fn((n, 1), |(row, _)| weights[[row, chain]]);
            let w_node = tape.constant(w_col);
            let weighted = tape.mul(r_node, w_node);
            weighted_terms.push(tape.sum_all(weighted));
        }
        let mut root = weighted_terms[0];
        for term in &weighted_terms[1..] {
            root = tape.add(root, *term);
        }
        let mut grads = tape.backward(root)?;
        if let Some(g) = grads.take(x_node) {
            s_hat = g.mapv(|v| v / cfg.tau);
        }
        if let Some(store) = per_chain_grad.as_mut() {
            for (chain, &r_node) in reward_nodes.iter().enumerate() {
                let mut g = tape.backward(r_node)?;
                if let Some(gx) = g.take(x_node) {
                    store[chain] = gx;
                }
            }
        }
    }
    // the hard indicator has zero gradient away from the boundary, so the
    // pathwise estimate is identically zero; rows still report weights

    let rows = want_rows.then(|| {
        let mut out = Vec::with_capacity(n * k);
        for (chain, &e) in endpoints.iter().enumerate() {
            let vals = tape.value(e);
            for row in 0..n {
                let gradient = per_chain_grad
                    .as_ref()
                    .map(|g| g[chain][[row, 0]])
                    .unwrap_or(0.0);
                out.push(ChainRow {
                    sample: row,
                    chain,
                    endpoint: vals[[row, 0]],
                    reward: rewards[[row, chain]],
                    weight: weights[[row, chain]],
                    gradient,
                });
            }
        }
        out
    });
    Ok(DrpOutput { s_hat, rows, sigma_clamps })
}

#[allow(clippy::too_many_arguments)]
fn exact_posterior_estimate(
    x_t: &Array2<f64>,
    t: &Array2<f64>,
    cfg: &DrpConfig,
    reward: &RewardSpec,
    gmm: &GmmSpec,
    schedule: &VpSchedule,
    seed: u64,
    path: &[u64],
    want_rows: bool,
) -> Result<DrpOutput, DrpError> {
    let n = x_t.nrows();
    let k = cfg.chains;
    let mut s_hat = Array2::zeros((n, 1));
    let mut rows = want_rows.then(|| Vec::with_capacity(n * k));
    for row in 0..n {
        let post = posterior_mixture(gmm, schedule, t[[row, 0]], x_t[[row, 0]])?;
        let mut endpoints = Vec::with_capacity(k);
        let mut path_grads = Vec::with_capacity(k);
        let mut rewards = Vec::with_capacity(k);
        for chain in 0..k {
            let mut key = path.to_vec();
            key.extend_from_slice(&[2, chain as u64]);
            let u = RngStream::at(seed, &key, row as u64).uniform();
            let x0 = post.inverse_cdf(u);
            if !x0.is_finite() {
                return Err(DrpError::NonFiniteChain { chain, row });
            }
            endpoints.push(x0);
            path_grads.push(reward.grad(x0) * post.d_inverse_cdf_d_xt(x0));
            rewards.push(reward.value(x0));
        }
        let weights = softmax_weights(&rewards, cfg.tau);
        let mut acc = 0.0;
        for chain in 0..k {
            acc += weights[chain] * path_grads[chain];
        }
        s_hat[[row, 0]] = acc / cfg.tau;
        if let Some(out) = rows.as_mut() {
            for chain in 0..k {
                out.push(ChainRow {
                    sample: row,
                    chain,
                    endpoint: endpoints[chain],
                    reward: rewards[chain],
                    weight: weights[chain],
                    gradient: path_grads[chain],
                });
            }
        }
    }
    Ok(DrpOutput { s_hat, rows, sigma_clamps: 0 })
}

/// First-order comparator: (1/tau) d/dx_t E[r(x_0) | x_t], the linearization
/// of the reward score in r/tau.
pub fn cg_approx(
    gmm: &GmmSpec,
    schedule: &VpSchedule,
    reward: &RewardSpec,
    t: f64,
    x_t: f64,
) -> Result<f64, DrpError> {
    let post = posterior_mixture(gmm, schedule, t, x_t)?;
    Ok(post.d_expectation_reward(reward)? / reward.tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::purpose;

    #[test]
    fn softmax_trivials() {
        let w = softmax_weights(&[3.0, 3.0, 3.0, 3.0], 1.0);
        for wi in &w {
            assert!((wi - 0.25).abs() < 1e-15);
        }
        let w = softmax_weights(&[1.0, 0.0], 1.0);
        assert!((w[0] - 0.7310585786300049).abs() < 1e-12);
        assert!((w[1] - 0.2689414213699951).abs() < 1e-12);
        let w = softmax_weights(&[5.0, -3.0, 0.7], 1e12);
        for wi in &w {
            assert!((wi - 1.0 / 3.0).abs() < 1e-9);
        }
        // permutation equivariance
        let a = softmax_weights(&[0.3, 1.4, -0.2], 0.7);
        let b = softmax_weights(&[1.4, -0.2, 0.3], 0.7);
        assert!((a[1] - b[0]).abs() < 1e-15);
        assert!((a[2] - b[1]).abs() < 1e-15);
        assert!((a[0] - b[2]).abs() < 1e-15);
    }

    #[test]
    fn single_chain_reduces_to_scaled_pathwise_gradient() {
        let gmm = GmmSpec::symmetric_bimodal(2.0, 0.5);
        let schedule = VpSchedule::toy_default();
        let reward = RewardSpec::smooth(20.0, 0.7).unwrap();
        let cfg = DrpConfig::new(1, 1, 0.7, ChainKind::DdpmStochastic);
        let x_t = ndarray::array![[0.21]];
        let t = ndarray::array![[0.05]];
        let reference = DrpReference::ExactPosterior { gmm: &gmm, schedule };
        let out = drp_estimate(&x_t, &t, &cfg, &reward, &reference, 7, &[purpose::TEST], true)
            .unwrap();
        let rows = out.rows.unwrap();
        assert_eq!(rows.len(), 1);
        assert!((rows[0].weight - 1.0).abs() < 1e-15);
        let want = rows[0].gradient / 0.7;
        assert!((out.s_hat[[0, 0]] - want).abs() < 1e-14);
    }

    #[test]
    fn reward_shift_leaves_estimate_unchanged() {
        let gmm = GmmSpec::symmetric_bimodal(2.0, 0.5);
        let schedule = VpSchedule::toy_default();
        let field = crate::diffusion::GmmScoreField { gmm: &gmm, schedule };
        let base = RewardSpec::smooth(20.0, 1.0).unwrap();
        let shifted = base.with_offset(5.0);
        let cfg = DrpConfig::new(4, 3, 1.0, ChainKind::DdpmStochastic);
        let x_t = ndarray::array![[0.4], [-0.9]];
        let t = ndarray::array![[0.06], [0.12]];
        let reference = DrpReference::Score { field: &field, schedule };
        let a = drp_estimate(&x_t, &t, &cfg, &base, &reference, 42, &[purpose::TEST, 1], false)
            .unwrap();
        let b = drp_estimate(&x_t, &t, &cfg, &shifted, &reference, 42, &[purpose::TEST, 1], false)
            .unwrap();
        for row in 0..2 {
            assert!((a.s_hat[[row, 0]] - b.s_hat[[row, 0]]).abs() < 1e-12);
        }
    }

    #[test]
    fn hard_reward_estimate_is_zero_but_rows_are_reported() {
        let gmm = GmmSpec::symmetric_bimodal(2.0, 0.5);
        let schedule = VpSchedule::toy_default();
        let field = crate::diffusion::GmmScoreField { gmm: &gmm, schedule };
        let reward = RewardSpec::hard(1.0).unwrap();
        let cfg = DrpConfig::new(3, 2, 1.0, ChainKind::DdpmStochastic);
        let x_t = ndarray::array![[0.1]];
        let t = ndarray::array![[0.08]];
        let reference = DrpReference::Score { field: &field, schedule };
        let out = drp_estimate(&x_t, &t, &cfg, &reward, &reference, 3, &[purpose::TEST, 2], true)
            .unwrap();
        assert_eq!(out.s_hat[[0, 0]], 0.0);
        let rows = out.rows.unwrap();
        assert_eq!(rows.len(), 3);
        let wsum: f64 = rows.iter().map(|r| r.weight).sum();
        assert!((wsum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mismatched_reference_kind_is_rejected() {
        let gmm = GmmSpec::symmetric_bimodal(2.0, 0.5);
        let schedule = VpSchedule::toy_default();
        let field = crate::diffusion::GmmScoreField { gmm: &gmm, schedule };
        let cfg = DrpConfig::new(2, 2, 1.0, ChainKind::EulerFlow);
        let reward = RewardSpec::smooth(20.0, 1.0).unwrap();
        let reference = DrpReference::Score { field: &field, schedule };
        let err = drp_estimate(
            &ndarray::array![[0.0]],
            &ndarray::array![[0.05]],
            &cfg,
            &reward,
            &reference,
            1,
            &[purpose::TEST, 3],
            false,
        );
        assert!(matches!(err, Err(DrpError::ReferenceMismatch)));
    }

    #[test]
    fn cg_approx_constant_reward_is_zero() {
        let gmm = GmmSpec::symmetric_bimodal(2.0, 0.5);
        let schedule = VpSchedule::toy_default();
        let constant = RewardSpec::smooth(0.0, 1.0).unwrap();
        let v = cg_approx(&gmm, &schedule, &constant, 0.05, 0.3).unwrap();
        assert!(v.abs() < 1e-12);
        // t = 0 rejected through the posterior guard
        assert!(cg_approx(&gmm, &schedule, &constant, 0.0, 0.3).is_err());
    }
}
