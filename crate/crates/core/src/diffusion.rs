//! Forward noising, denoising score matching, and the denoising chains:
//! deterministic DDIM, the stochastic VP chain (Tweedie estimate plus a
//! DDPM-style noise injection), and the Euler flow chain on randomized
//! schedules. Chains record onto a [`Tape`] so the map from the chain input
//! to the clean-sample estimate is differentiable.

use ndarray::Array2;
use thiserror::Error;

use crate::gmm::{GmmSpec, LN_2PI};
use crate::net::{MlpNet, NetBinding, NetError};
use crate::rng::RngStream;
use crate::schedule::{ScheduleError, VpSchedule};
use crate::tape::{NodeId, Tape};
use crate::velocity::analytic_velocity;

#[derive(Debug, Error)]
pub enum ChainError {
    #[error("chain needs at least one step")]
    StepUnderflow,
    #[error("chain schedule must be strictly decreasing and positive (row {row})")]
    UnsortedSchedule { row: usize },
    #[error("chain needs {need} noise vectors, got {got}")]
    MissingNoise { need: usize, got: usize },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// A time-indexed score field s(x, t) that can evaluate plainly or record
/// itself on a tape (inputs differentiable, parameters frozen).
pub trait ScoreField {
    fn eval(&self, x: &Array2<f64>, t: &Array2<f64>) -> Array2<f64>;
    fn eval_on_tape(&self, tape: &mut Tape, x: NodeId, t: &Array2<f64>) -> NodeId;
}

/// A velocity field v(x, t) over flow time in (0, 1).
pub trait VelocityField {
    fn eval(&self, x: &Array2<f64>, t: &Array2<f64>) -> Array2<f64>;
    fn eval_on_tape(&self, tape: &mut Tape, x: NodeId, t: &Array2<f64>) -> NodeId;
}

/// Score from a noise-prediction network: s = -eps_hat / sqrt(1 - alpha_bar).
pub struct MlpScore<'a> {
    pub net: &'a MlpNet,
    pub schedule: VpSchedule,
}

impl MlpScore<'_> {
    fn eps_factor(&self, t: &Array2<f64>) -> Array2<f64> {
        t.mapv(|ti| {
            debug_assert!(ti > 0.0, "score undefined at t = 0");
            -1.0 / (1.0 - self.schedule.alpha_bar(ti)).sqrt()
        })
    }
}

impl ScoreField for MlpScore<'_> {
    fn eval(&self, x: &Array2<f64>, t: &Array2<f64>) -> Array2<f64> {
        let n = x.nrows();
        let mut input = Array2::zeros((n, 2));
        input.column_mut(0).assign(&x.column(0));
        input.column_mut(1).assign(&t.column(0));
        let eps = self.net.forward_batch(&input).expect("score net input is (x, t)");
        eps * &self.eps_factor(t)
    }

    fn eval_on_tape(&self, tape: &mut Tape, x: NodeId, t: &Array2<f64>) -> NodeId {
        let t_node = tape.constant(t.clone());
        let input = tape.concat_cols(x, t_node);
        let eps = self
            .net
            .forward_on_tape_frozen(tape, input)
            .expect("score net input is (x, t)");
        let factor = tape.constant(self.eps_factor(t));
        tape.mul(eps, factor)
    }
}

/// Exact score of the VP forward marginal of a clean mixture; the analytic
/// stand-in for a trained reference.
pub struct GmmScoreField<'a> {
    pub gmm: &'a GmmSpec,
    pub schedule: VpSchedule,
}

/// Per-row noised component parameters (mean, variance) at per-row times.
fn noised_component_rows(
    gmm: &GmmSpec,
    schedule: &VpSchedule,
    t: &Array2<f64>,
) -> Vec<(Array2<f64>, Array2<f64>)> {
    gmm.components()
        .iter()
        .map(|c| {
            let mean = t.mapv(|ti| schedule.alpha_bar(ti).sqrt() * c.mean);
            let var = t.mapv(|ti| {
                let ab = schedule.alpha_bar(ti);
                ab * c.variance + (1.0 - ab)
            });
            (mean, var)
        })
        .collect()
}

impl ScoreField for GmmScoreField<'_> {
    fn eval(&self, x: &Array2<f64>, t: &Array2<f64>) -> Array2<f64> {
        let comps = noised_component_rows(self.gmm, &self.schedule, t);
        let weights: Vec<f64> = self.gmm.components().iter().map(|c| c.weight).collect();
        let mut out = Array2::zeros(x.dim());
        for row in 0..x.nrows() {
            let xv = x[[row, 0]];
            let mut terms = Vec::with_capacity(comps.len());
            for (j, (m, v)) in comps.iter().enumerate() {
                let (mj, vj) = (m[[row, 0]], v[[row, 0]]);
                let a = weights[j].ln() - 0.5 * ((xv - mj) * (xv - mj) / vj + vj.ln());
                terms.push((a, -(xv - mj) / vj));
            }
            let max = terms.iter().map(|(a, _)| *a).fold(f64::NEG_INFINITY, f64::max);
            let (mut den, mut num) = (0.0, 0.0);
            for (a, g) in terms {
                let e = (a - max).exp();
                den += e;
                num += e * g;
            }
            out[[row, 0]] = num / den;
        }
        out
    }

    fn eval_on_tape(&self, tape: &mut Tape, x: NodeId, t: &Array2<f64>) -> NodeId {
        let comps = noised_component_rows(self.gmm, &self.schedule, t);
        // log-domain terms with a detached row-wise max keep the softmax
        // stable; the max is constant so gradients stay exact
        let mut log_nodes = Vec::with_capacity(comps.len());
        let mut pull_nodes = Vec::with_capacity(comps.len());
        for (j, (m, v)) in comps.iter().enumerate() {
            let w = self.gmm.components()[j].weight;
            let c_rows = v.mapv(|vj| w.ln() - 0.5 * vj.ln());
            let inv2v = v.mapv(|vj| 1.0 / (2.0 * vj));
            let invv = v.mapv(|vj| 1.0 / vj);
            let m_node = tape.constant(m.clone());
            let d = tape.sub(x, m_node);
            let d2 = tape.square(d);
            let inv2v_node = tape.constant(inv2v);
            let quad = tape.mul(d2, inv2v_node);
            let c_node = tape.constant(c_rows);
            let a = tape.sub(c_node, quad);
            log_nodes.push(a);
            // component pull -(x - m)/v
            let invv_node = tape.constant(invv);
            let neg_d = tape.neg(d);
            pull_nodes.push(tape.mul(neg_d, invv_node));
        }
        let mut max_rows = tape.value(log_nodes[0]).clone();
        for a in &log_nodes[1..] {
            let v = tape.value(*a);
            ndarray::Zip::from(&mut max_rows).and(v).for_each(|m, &ai| *m = m.max(ai));
        }
        let max_node = tape.constant(max_rows);
        let mut den: Option<NodeId> = None;
        let mut num: Option<NodeId> = None;
        for (a, g) in log_nodes.into_iter().zip(pull_nodes) {
            let shifted = tape.sub(a, max_node);
            let e = tape.exp(shifted);
            den = Some(match den {
                None => e,
                Some(d) => tape.add(d, e),
            });
            let weighted = tape.mul(e, g);
            num = Some(match num {
                None => weighted,
                Some(n) => tape.add(n, weighted),
            });
        }
        tape.div(num.expect("mixture nonempty"), den.expect("mixture nonempty"))
    }
}

/// Exact conditional velocity of the flow interpolation of a clean mixture.
pub struct AnalyticVelocityField<'a> {
    pub gmm: &'a GmmSpec,
}

impl VelocityField for AnalyticVelocityField<'_> {
    fn eval(&self, x: &Array2<f64>, t: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(x.dim());
        for row in 0..x.nrows() {
            out[[row, 0]] = analytic_velocity(self.gmm, t[[row, 0]], x[[row, 0]])
                .expect("flow chain time inside (0,1)");
        }
        out
    }

    fn eval_on_tape(&self, tape: &mut Tape, x: NodeId, t: &Array2<f64>) -> NodeId {
        // posterior mean E[x0|x_t] = sum_j rho_j (cA_j x + cB_j) with
        // responsibilities formed in the log domain as in the score field
        let mut log_nodes = Vec::with_capacity(self.gmm.len());
        let mut mean_nodes = Vec::with_capacity(self.gmm.len());
        for c in self.gmm.components() {
            let m_rows = t.mapv(|ti| (1.0 - ti) * c.mean);
            let v_rows = t.mapv(|ti| {
                let a = 1.0 - ti;
                a * a * c.variance + ti * ti
            });
            let c_rows = v_rows.mapv(|vj| c.weight.ln() - 0.5 * (vj.ln() + LN_2PI));
            let inv2v = v_rows.mapv(|vj| 1.0 / (2.0 * vj));
            let ca_rows = ndarray::Zip::from(&v_rows)
                .and(t)
                .map_collect(|&vj, &ti| (1.0 - ti) * c.variance / vj);
            let cb_rows = ndarray::Zip::from(&v_rows)
                .and(t)
                .map_collect(|&vj, &ti| c.mean * ti * ti / vj);
            let m_node = tape.constant(m_rows);
            let d = tape.sub(x, m_node);
            let d2 = tape.square(d);
            let inv2v_node = tape.constant(inv2v);
            let quad = tape.mul(d2, inv2v_node);
            let c_node = tape.constant(c_rows);
            let a = tape.sub(c_node, quad);
            log_nodes.push(a);
            let ca_node = tape.constant(ca_rows);
            let scaled = tape.mul(x, ca_node);
            let cb_node = tape.constant(cb_rows);
            mean_nodes.push(tape.add(scaled, cb_node));
        }
        let mut max_rows = tape.value(log_nodes[0]).clone();
        for a in &log_nodes[1..] {
            let v = tape.value(*a);
            ndarray::Zip::from(&mut max_rows).and(v).for_each(|m, &ai| *m = m.max(ai));
        }
        let max_node = tape.constant(max_rows);
        let mut den: Option<NodeId> = None;
        let mut num: Option<NodeId> = None;
        for (a, mean) in log_nodes.into_iter().zip(mean_nodes) {
            let shifted = tape.sub(a, max_node);
            let e = tape.exp(shifted);
            den = Some(match den {
                None => e,
                Some(d) => tape.add(d, e),
            });
            let weighted = tape.mul(e, mean);
            num = Some(match num {
                None => weighted,
                Some(n) => tape.add(n, weighted),
            });
        }
        let post_mean = tape.div(num.expect("nonempty"), den.expect("nonempty"));
        let resid = tape.sub(x, post_mean);
        let inv_t = tape.constant(t.mapv(|ti| 1.0 / ti));
        tape.mul(resid, inv_t)
    }
}

/// One forward draw x_t = sqrt(alpha_bar) x_0 + sqrt(1 - alpha_bar) * noise.
pub fn forward_sample(
    x0: f64,
    schedule: &VpSchedule,
    t: f64,
    noise: f64,
) -> Result<f64, ScheduleError> {
    schedule.check_time(t)?;
    let ab = schedule.alpha_bar(t);
    Ok(ab.sqrt() * x0 + (1.0 - ab).sqrt() * noise)
}

/// Score from a noise prediction: s = -eps_hat / sqrt(1 - alpha_bar(t)).
pub fn score_from_eps(eps_hat: f64, t: f64, schedule: &VpSchedule) -> Result<f64, ScheduleError> {
    schedule.check_positive_time(t)?;
    Ok(-eps_hat / (1.0 - schedule.alpha_bar(t)).sqrt())
}

/// Tape handles of one recorded DSM loss.
pub struct DsmBatch {
    pub binding: NetBinding,
    pub loss: NodeId,
}

/// Records lambda * mean (s_net(x_t, t) - grad log q_t(x_t|x_0))^2 with the
/// conditional score -noise/sqrt(1-alpha_bar) in closed form; gradients flow
/// to the network parameters only.
pub fn dsm_loss_on_tape(
    tape: &mut Tape,
    net: &MlpNet,
    x0: &Array2<f64>,
    t: &Array2<f64>,
    noise: &Array2<f64>,
    lambda: f64,
    schedule: &VpSchedule,
) -> Result<DsmBatch, NetError> {
    let n = x0.nrows();
    let mut input = Array2::zeros((n, 2));
    let mut factor = Array2::zeros((n, 1));
    let mut target = Array2::zeros((n, 1));
    for row in 0..n {
        let ti = t[[row, 0]];
        let ab = schedule.alpha_bar(ti);
        let sig = (1.0 - ab).sqrt();
        input[[row, 0]] = ab.sqrt() * x0[[row, 0]] + sig * noise[[row, 0]];
        input[[row, 1]] = ti;
        factor[[row, 0]] = -1.0 / sig;
        target[[row, 0]] = -noise[[row, 0]] / sig;
    }
    let x_node = tape.constant(input);
    let binding = net.forward_on_tape(tape, x_node)?;
    let factor_node = tape.constant(factor);
    let s = tape.mul(binding.output, factor_node);
    let target_node = tape.constant(target);
    let resid = tape.sub(s, target_node);
    let sq = tape.square(resid);
    let mean = tape.mean_all(sq);
    let loss = tape.scale(mean, lambda);
    Ok(DsmBatch { binding, loss })
}

/// The same DSM objective evaluated for an arbitrary score field; used to
/// compare a trained network against the irreducible floor of the exact
/// score.
pub fn dsm_loss_value(
    score: &dyn ScoreField,
    x0: &Array2<f64>,
    t: &Array2<f64>,
    noise: &Array2<f64>,
    lambda: f64,
    schedule: &VpSchedule,
) -> f64 {
    let n = x0.nrows();
    let mut x_t = Array2::zeros((n, 1));
    let mut target = Array2::zeros((n, 1));
    for row in 0..n {
        let ti = t[[row, 0]];
        let ab = schedule.alpha_bar(ti);
        let sig = (1.0 - ab).sqrt();
        x_t[[row, 0]] = ab.sqrt() * x0[[row, 0]] + sig * noise[[row, 0]];
        target[[row, 0]] = -noise[[row, 0]] / sig;
    }
    let s = score.eval(&x_t, t);
    let mut acc = 0.0;
    for row in 0..n {
        let d = s[[row, 0]] - target[[row, 0]];
        acc += d * d;
    }
    lambda * acc / n as f64
}

/// Deterministic DDIM from t_start down to 0 on a uniform grid; plain values
/// (the chain used to generate distillation targets needs no gradients).
pub fn ddim_chain(
    score: &dyn ScoreField,
    x_start: &Array2<f64>,
    t_start: f64,
    steps: usize,
    schedule: &VpSchedule,
) -> Result<Array2<f64>, ChainError> {
    if steps == 0 {
        return Err(ChainError::StepUnderflow);
    }
    schedule.check_time(t_start)?;
    if t_start == 0.0 {
        return Ok(x_start.clone());
    }
    let n = x_start.nrows();
    let mut x = x_start.clone();
    for j in (1..=steps).rev() {
        let t_hi = t_start * j as f64 / steps as f64;
        let t_lo = t_start * (j - 1) as f64 / steps as f64;
        let (ab_hi, ab_lo) = (schedule.alpha_bar(t_hi), schedule.alpha_bar(t_lo));
        let (a_hi, s_hi) = (ab_hi.sqrt(), (1.0 - ab_hi).sqrt());
        let (a_lo, s_lo) = (ab_lo.sqrt(), (1.0 - ab_lo).sqrt());
        let t_rows = Array2::from_elem((n, 1), t_hi);
        let sc = score.eval(&x, &t_rows);
        for row in 0..n {
            let xv = x[[row, 0]];
            let x0_hat = (xv + (1.0 - ab_hi) * sc[[row, 0]]) / a_hi;
            x[[row, 0]] = a_lo * x0_hat + s_lo * (xv - a_hi * x0_hat) / s_hi;
        }
    }
    Ok(x)
}

/// Result of recording a stochastic VP chain.
pub struct DdpmChainResult {
    /// Clean-sample estimate (the Tweedie estimate at the last step).
    pub endpoint: NodeId,
    /// Number of rows whose posterior deviation radicand was clamped at 0.
    pub sigma_clamps: usize,
}

/// Stochastic VP chain from per-row entry times down to 0 on per-row uniform
/// grids: S Tweedie estimates, with a DDPM-style stochastic update between
/// them for fixed injected noise. The recording is differentiable in `x_t`.
pub fn ddpm_posterior_chain_on_tape(
    score: &dyn ScoreField,
    tape: &mut Tape,
    x_t: NodeId,
    t_entry: &Array2<f64>,
    steps: usize,
    noises: &[Array2<f64>],
    schedule: &VpSchedule,
) -> Result<DdpmChainResult, ChainError> {
    if steps == 0 {
        return Err(ChainError::StepUnderflow);
    }
    if noises.len() + 1 < steps {
        return Err(ChainError::MissingNoise { need: steps - 1, got: noises.len() });
    }
    let n = t_entry.nrows();
    let mut sigma_clamps = 0usize;
    let mut x = x_t;
    let mut x0_hat = x_t;
    for j in (1..=steps).rev() {
        let frac_hi = j as f64 / steps as f64;
        let frac_lo = (j - 1) as f64 / steps as f64;
        let t_hi = t_entry.mapv(|te| te * frac_hi);
        // Tweedie estimate from the score at the current level
        let ab_hi = t_hi.mapv(|ti| schedule.alpha_bar(ti));
        let sc = score.eval_on_tape(tape, x, &t_hi);
        let sig2 = tape.constant(ab_hi.mapv(|ab| 1.0 - ab));
        let drift = tape.mul(sc, sig2);
        let lifted = tape.add(x, drift);
        let inv_a = tape.constant(ab_hi.mapv(|ab| 1.0 / ab.sqrt()));
        x0_hat = tape.mul(lifted, inv_a);
        if j > 1 {
            let t_lo = t_entry.mapv(|te| te * frac_lo);
            let ab_lo = t_lo.mapv(|ti| schedule.alpha_bar(ti));
            let mut a_lo = Array2::zeros((n, 1));
            let mut ratio = Array2::zeros((n, 1));
            let mut noise_amp = Array2::zeros((n, 1));
            for row in 0..n {
                let (hi, lo) = (ab_hi[[row, 0]], ab_lo[[row, 0]]);
                let (s2_hi, s2_lo) = (1.0 - hi, 1.0 - lo);
                a_lo[[row, 0]] = lo.sqrt();
                ratio[[row, 0]] = (s2_lo / s2_hi).sqrt();
                let radicand = 1.0 - (hi * s2_lo) / (lo * s2_hi);
                let clamped = if radicand < 0.0 {
                    sigma_clamps += 1;
                    0.0
                } else {
                    radicand
                };
                noise_amp[[row, 0]] = s2_lo.sqrt() * clamped.sqrt();
            }
            let a_lo_node = tape.constant(a_lo);
            let mean_clean = tape.mul(x0_hat, a_lo_node);
            let a_hi_node = tape.constant(ab_hi.mapv(|ab| ab.sqrt()));
            let scaled_clean = tape.mul(x0_hat, a_hi_node);
            let resid = tape.sub(x, scaled_clean);
            let ratio_node = tape.constant(ratio);
            let carried = tape.mul(resid, ratio_node);
            let deterministic = tape.add(mean_clean, carried);
            let noise_rows = &noises[steps - j];
            let mut shock = Array2::zeros((n, 1));
            for row in 0..n {
                shock[[row, 0]] = noise_amp[[row, 0]] * noise_rows[[row, 0]];
            }
            let shock_node = tape.constant(shock);
            x = tape.add(deterministic, shock_node);
        }
    }
    Ok(DdpmChainResult { endpoint: x0_hat, sigma_clamps })
}

/// Euler integration of a velocity field through a per-row decreasing
/// schedule, with the final step extrapolating to 0. Differentiable in x_t.
pub fn euler_flow_chain_on_tape(
    vel: &dyn VelocityField,
    tape: &mut Tape,
    x_t: NodeId,
    t_entry: &Array2<f64>,
    times: &Array2<f64>,
) -> Result<NodeId, ChainError> {
    validate_flow_schedule(t_entry, times)?;
    let steps = times.ncols();
    let mut cur_t = t_entry.clone();
    let mut x = x_t;
    for s in 0..steps {
        let next_t: Array2<f64> = times.column(s).insert_axis(ndarray::Axis(1)).to_owned();
        let v = vel.eval_on_tape(tape, x, &cur_t);
        let dt = tape.constant(&next_t - &cur_t);
        let delta = tape.mul(v, dt);
        x = tape.add(x, delta);
        cur_t = next_t;
    }
    let v = vel.eval_on_tape(tape, x, &cur_t);
    let neg_t = tape.constant(cur_t.mapv(|t| -t));
    let delta = tape.mul(v, neg_t);
    Ok(tape.add(x, delta))
}

/// Plain-value twin of [`euler_flow_chain_on_tape`] for large-sample use.
pub fn euler_flow_chain_values(
    vel: &dyn VelocityField,
    x_start: &Array2<f64>,
    t_entry: &Array2<f64>,
    times: &Array2<f64>,
) -> Result<Array2<f64>, ChainError> {
    validate_flow_schedule(t_entry, times)?;
    let steps = times.ncols();
    let mut cur_t = t_entry.clone();
    let mut x = x_start.clone();
    for s in 0..steps {
        let next_t: Array2<f64> = times.column(s).insert_axis(ndarray::Axis(1)).to_owned();
        let v = vel.eval(&x, &cur_t);
        ndarray::Zip::from(&mut x)
            .and(&v)
            .and(&next_t)
            .and(&cur_t)
            .for_each(|x, &v, &nt, &ct| *x += (nt - ct) * v);
        cur_t = next_t;
    }
    let v = vel.eval(&x, &cur_t);
    ndarray::Zip::from(&mut x).and(&v).and(&cur_t).for_each(|x, &v, &ct| *x -= ct * v);
    Ok(x)
}

fn validate_flow_schedule(t_entry: &Array2<f64>, times: &Array2<f64>) -> Result<(), ChainError> {
    if times.ncols() == 0 {
        return Err(ChainError::StepUnderflow);
    }
    for row in 0..times.nrows() {
        let mut prev = t_entry[[row, 0]];
        for s in 0..times.ncols() {
            let cur = times[[row, s]];
            if !(cur > 0.0 && cur < prev) {
                return Err(ChainError::UnsortedSchedule { row });
            }
            prev = cur;
        }
    }
    Ok(())
}

/// How a chain discretizes time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimestepRule {
    UniformGrid,
    UniformRandomPerChain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainKind {
    DdimDeterministic,
    DdpmStochastic,
    EulerFlow,
}

/// Chain shape shared by the proxy estimator and its tests.
#[derive(Debug, Clone, Copy)]
pub struct ChainSpec {
    pub kind: ChainKind,
    pub steps: usize,
    pub rule: TimestepRule,
}

impl ChainSpec {
    /// Draws the per-row interior schedule for a flow chain: `steps` times
    /// below `t_entry`, sorted descending.
    pub fn draw_flow_times(&self, rng: &mut RngStream, t_entry: f64) -> Vec<f64> {
        let mut ts: Vec<f64> = match self.rule {
            TimestepRule::UniformRandomPerChain => {
                (0..self.steps).map(|_| rng.uniform() * t_entry).collect()
            }
            TimestepRule::UniformGrid => (1..=self.steps)
                .rev()
                .map(|j| t_entry * j as f64 / (self.steps + 1) as f64)
                .collect(),
        };
        ts.sort_by(|a, b| b.total_cmp(a));
        ts
    }
}
