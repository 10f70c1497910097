//! The four-stage training pipeline: reference score net by denoising score
//! matching, one-step generator by regression onto DDIM endpoints, then the
//! alternating alignment loop where a teaching-assistant score net tracks the
//! generator while the generator is pushed toward either the reward-tilted
//! trajectory target (`Method::Didr`) or the endpoint-reward objective
//! (`Method::Dipp`). The two methods share every line except the generator
//! update rule, which is the single dispatch point in
//! [`generator_update`].

use ndarray::Array2;
use thiserror::Error;

use crate::adam::{AdamConfig, AdamError, AdamState};
use crate::diffusion::{ddim_chain, dsm_loss_on_tape, ChainError, ChainKind, MlpScore, ScoreField};
use crate::drp::{drp_estimate, DrpConfig, DrpError, DrpReference};
use crate::gmm::GmmSpec;
use crate::net::{Head, MlpNet, NetError};
use crate::reward::RewardSpec;
use crate::rng::{purpose, RngStream};
use crate::schedule::VpSchedule;
use crate::tape::{Tape, TapeError};
use crate::theory::{kl_to_tilted, positive_mass, HistConfig, TheoryError};
use crate::tilted::{TiltedError, TiltedTarget};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{stage} stage diverged at step {step}: non-finite loss")]
    NonFiniteLoss { stage: &'static str, step: usize },
    #[error("{stage} stage optimizer fault at step {step}: {source}")]
    Optimizer {
        stage: &'static str,
        step: usize,
        source: AdamError,
    },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Drp(#[from] DrpError),
    #[error(transparent)]
    Tilted(#[from] TiltedError),
    #[error(transparent)]
    Theory(#[from] TheoryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Generator matches the reward-tilted trajectory: the score mismatch is
    /// (s_ta - s_ref - s_r) with s_r from the proxy estimator.
    Didr,
    /// Endpoint-reward baseline: distillation mismatch (s_ta - s_ref) scaled
    /// by tau plus direct reward backpropagation at the clean sample.
    Dipp,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Didr => "didr",
            Method::Dipp => "dipp",
        }
    }
}

/// Every knob of the toy pipeline; `Default` reproduces the published setup.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub mu: f64,
    pub sigma: f64,
    pub gamma: f64,
    pub t_max: f64,
    /// Smooth reward slope.
    pub beta: f64,
    /// Temperature shared by the target, the proxy softmax, and the
    /// endpoint-reward trade-off.
    pub tau: f64,
    pub width: usize,
    pub depth: usize,
    pub reference_steps: usize,
    pub reference_lr: f64,
    pub reference_batch: usize,
    pub distill_steps: usize,
    pub distill_lr: f64,
    pub distill_batch: usize,
    pub distill_ddim_steps: usize,
    /// Matched-noise pairs generated once and resampled during regression.
    pub distill_pool: usize,
    pub outer_steps: usize,
    /// TA refreshes per outer step.
    pub ta_updates: usize,
    pub ta_lr: f64,
    pub gen_lr: f64,
    pub align_batch: usize,
    pub drp_chains: usize,
    pub drp_steps: usize,
    /// Generator time weighting w(t).
    pub w_t: f64,
    /// DSM weighting lambda(t).
    pub lambda_t: f64,
    /// Lower edge of the time-sampling window, keeping the score finite.
    pub t_floor: f64,
    pub method: Method,
    pub seed: u64,
    pub eval_samples: usize,
    pub log_interval: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mu: 2.0,
            sigma: 0.5,
            gamma: 20.0,
            t_max: 0.25,
            beta: 20.0,
            tau: 1.0,
            width: 128,
            depth: 3,
            reference_steps: 10_000,
            reference_lr: 3e-4,
            reference_batch: 2048,
            distill_steps: 3_000,
            distill_lr: 1e-3,
            distill_batch: 2048,
            distill_ddim_steps: 30,
            distill_pool: 65_536,
            outer_steps: 6_000,
            ta_updates: 5,
            ta_lr: 3e-4,
            gen_lr: 1e-4,
            align_batch: 2048,
            drp_chains: 4,
            drp_steps: 4,
            w_t: 1.0,
            lambda_t: 1.0,
            t_floor: 1e-4,
            method: Method::Didr,
            seed: 0,
            eval_samples: 10_000,
            log_interval: 200,
        }
    }
}

impl PipelineConfig {
    /// Smaller tier: 2,000 outer steps, width 64, batch 512 across stages.
    pub fn reduced(mut self) -> Self {
        self.width = 64;
        self.outer_steps = 2_000;
        self.reference_batch = 512;
        self.distill_batch = 512;
        self.align_batch = 512;
        self.distill_pool = 32_768;
        self
    }

    pub fn gmm(&self) -> GmmSpec {
        GmmSpec::symmetric_bimodal(self.mu, self.sigma)
    }

    pub fn schedule(&self) -> VpSchedule {
        VpSchedule::new(self.gamma, self.t_max).expect("valid schedule")
    }

    pub fn smooth_reward(&self) -> RewardSpec {
        RewardSpec::smooth(self.beta, self.tau).expect("valid reward")
    }

    pub fn hard_reward(&self) -> RewardSpec {
        RewardSpec::hard(self.tau).expect("valid reward")
    }

    pub fn drp_config(&self) -> DrpConfig {
        DrpConfig::new(self.drp_chains, self.drp_steps, self.tau, ChainKind::DdpmStochastic)
    }

    /// Length of the time-sampling window; the integral-KL estimator scales
    /// by it so reward and divergence terms keep their stated proportions.
    pub fn t_window(&self) -> f64 {
        self.t_max - self.t_floor
    }
}

/// A trained network plus its recorded loss curve.
#[derive(Debug, Clone)]
pub struct TrainedStage {
    pub net: MlpNet,
    /// (step, loss) pairs at the logging interval.
    pub losses: Vec<(usize, f64)>,
}

fn fill_normals(stream: &mut RngStream, n: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, 1), |_| stream.normal())
}

fn fill_times(stream: &mut RngStream, n: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn((n, 1), |_| stream.uniform_in(lo, hi))
}

/// Stage 1: reference score net trained by DSM on reference samples.
pub fn train_reference(cfg: &PipelineConfig) -> Result<TrainedStage, PipelineError> {
    let gmm = cfg.gmm();
    let schedule = cfg.schedule();
    let mut net = MlpNet::seeded(2, cfg.width, cfg.depth, Head::NoisePrediction, cfg.seed, 0);
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.reference_lr), &net.params());
    let mut losses = Vec::new();
    for step in 0..cfg.reference_steps {
        let mut xs = RngStream::new(cfg.seed, &[purpose::REF_BATCH, step as u64, 0]);
        let x0 = Array2::from_shape_fn((cfg.reference_batch, 1), |_| gmm.sample(&mut xs));
        let mut ts = RngStream::new(cfg.seed, &[purpose::REF_BATCH, step as u64, 1]);
        let t = fill_times(&mut ts, cfg.reference_batch, cfg.t_floor, cfg.t_max);
        let mut es = RngStream::new(cfg.seed, &[purpose::REF_BATCH, step as u64, 2]);
        let eps = fill_normals(&mut es, cfg.reference_batch);
        let mut tape = Tape::new();
        let batch = dsm_loss_on_tape(&mut tape, &net, &x0, &t, &eps, cfg.lambda_t, &schedule)?;
        let loss = tape.value_scalar(batch.loss);
        if !loss.is_finite() {
            return Err(PipelineError::NonFiniteLoss { stage: "reference", step });
        }
        let mut grads = tape.backward(batch.loss)?;
        let grad_list = net.collect_grads(&batch.binding, &mut grads);
        adam.step(&mut net.params_mut(), &grad_list).map_err(|source| {
            PipelineError::Optimizer { stage: "reference", step, source }
        })?;
        if step % cfg.log_interval == 0 || step + 1 == cfg.reference_steps {
            losses.push((step, loss));
        }
    }
    Ok(TrainedStage { net, losses })
}

/// Stage 2: one-step generator regressed onto DDIM endpoints with matched
/// noise (the same z feeds the generator and starts the chain).
pub fn distill_generator(
    cfg: &PipelineConfig,
    reference: &MlpNet,
) -> Result<TrainedStage, PipelineError> {
    let schedule = cfg.schedule();
    let score = MlpScore { net: reference, schedule };
    let pool = cfg.distill_pool.max(cfg.distill_batch);
    let mut zs = RngStream::new(cfg.seed, &[purpose::DISTILL_POOL, 0]);
    let z_pool = fill_normals(&mut zs, pool);
    let mut target_pool = Array2::zeros((pool, 1));
    let chunk = cfg.distill_batch;
    let mut offset = 0;
    while offset < pool {
        let hi = (offset + chunk).min(pool);
        let z_chunk = z_pool.slice(ndarray::s![offset..hi, ..]).to_owned();
        let endpoints = ddim_chain(&score, &z_chunk, cfg.t_max, cfg.distill_ddim_steps, &schedule)?;
        target_pool.slice_mut(ndarray::s![offset..hi, ..]).assign(&endpoints);
        offset = hi;
    }

    let mut gen = MlpNet::seeded(1, cfg.width, cfg.depth, Head::DirectOutput, cfg.seed, 1);
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.distill_lr), &gen.params());
    let mut losses = Vec::new();
    for step in 0..cfg.distill_steps {
        let mut idx = RngStream::new(cfg.seed, &[purpose::DISTILL_BATCH, step as u64]);
        let mut z = Array2::zeros((cfg.distill_batch, 1));
        let mut target = Array2::zeros((cfg.distill_batch, 1));
        for row in 0..cfg.distill_batch {
            let i = idx.index(pool);
            z[[row, 0]] = z_pool[[i, 0]];
            target[[row, 0]] = target_pool[[i, 0]];
        }
        let mut tape = Tape::new();
        let z_node = tape.constant(z);
        let binding = gen.forward_on_tape(&mut tape, z_node)?;
        let target_node = tape.constant(target);
        let resid = tape.sub(binding.output, target_node);
        let sq = tape.square(resid);
        let loss_node = tape.mean_all(sq);
        let loss = tape.value_scalar(loss_node);
        if !loss.is_finite() {
            return Err(PipelineError::NonFiniteLoss { stage: "distill", step });
        }
        let mut grads = tape.backward(loss_node)?;
        let grad_list = gen.collect_grads(&binding, &mut grads);
        adam.step(&mut gen.params_mut(), &grad_list).map_err(|source| {
            PipelineError::Optimizer { stage: "distill", step, source }
        })?;
        if step % cfg.log_interval == 0 || step + 1 == cfg.distill_steps {
            losses.push((step, loss));
        }
    }
    Ok(TrainedStage { net: gen, losses })
}

/// Stage I of the alternating loop: one DSM step for the TA on generator
/// samples. The generator is read-only here.
pub fn ta_update(
    ta: &mut MlpNet,
    adam: &mut AdamState,
    generator: &MlpNet,
    cfg: &PipelineConfig,
    outer_step: usize,
    round: usize,
) -> Result<f64, PipelineError> {
    let schedule = cfg.schedule();
    let key = [purpose::TA_BATCH, outer_step as u64, round as u64];
    let mut zs = RngStream::new(cfg.seed, &[key[0], key[1], key[2], 0]);
    let z = fill_normals(&mut zs, cfg.align_batch);
    let x0 = generator.forward_batch(&z)?;
    let mut ts = RngStream::new(cfg.seed, &[key[0], key[1], key[2], 1]);
    let t = fill_times(&mut ts, cfg.align_batch, cfg.t_floor, cfg.t_max);
    let mut es = RngStream::new(cfg.seed, &[key[0], key[1], key[2], 2]);
    let eps = fill_normals(&mut es, cfg.align_batch);
    let mut tape = Tape::new();
    let batch = dsm_loss_on_tape(&mut tape, ta, &x0, &t, &eps, cfg.lambda_t, &schedule)?;
    let loss = tape.value_scalar(batch.loss);
    if !loss.is_finite() {
        return Err(PipelineError::NonFiniteLoss { stage: "ta", step: outer_step });
    }
    let mut grads = tape.backward(batch.loss)?;
    let grad_list = ta.collect_grads(&batch.binding, &mut grads);
    adam.step(&mut ta.params_mut(), &grad_list).map_err(|source| PipelineError::Optimizer {
        stage: "ta",
        step: outer_step,
        source,
    })?;
    Ok(loss)
}

/// Records z -> x_0 = g(z) -> x_t = sqrt(alpha_bar) x_0 + sqrt(1-alpha_bar) eps
/// on the tape, returning the parameter binding and the x_t node.
pub fn generator_forward_on_tape(
    tape: &mut Tape,
    generator: &MlpNet,
    schedule: &VpSchedule,
    z: Array2<f64>,
    t: &Array2<f64>,
    eps: &Array2<f64>,
) -> Result<(crate::net::NetBinding, crate::tape::NodeId), NetError> {
    let n = z.nrows();
    let z_node = tape.constant(z);
    let binding = generator.forward_on_tape(tape, z_node)?;
    let x0_node = binding.output;
    let sqrt_ab = t.mapv(|ti| schedule.alpha_bar(ti).sqrt());
    let mut noise_term = Array2::zeros((n, 1));
    for row in 0..n {
        let ab = schedule.alpha_bar(t[[row, 0]]);
        noise_term[[row, 0]] = (1.0 - ab).sqrt() * eps[[row, 0]];
    }
    let sqrt_ab_node = tape.constant(sqrt_ab);
    let scaled = tape.mul(x0_node, sqrt_ab_node);
    let noise_node = tape.constant(noise_term);
    let x_t_node = tape.add(scaled, noise_node);
    Ok((binding, x_t_node))
}

/// Stage II: one generator step. The score mismatch is evaluated once per
/// sample, detached, and contracted with x_t through the recorded generator
/// graph; the two methods differ only in how the mismatch (and any direct
/// reward term) is formed.
pub fn generator_update(
    generator: &mut MlpNet,
    adam: &mut AdamState,
    ta: &MlpNet,
    reference: &MlpNet,
    cfg: &PipelineConfig,
    outer_step: usize,
) -> Result<(), PipelineError> {
    let schedule = cfg.schedule();
    let n = cfg.align_batch;
    let step_key = outer_step as u64;
    let mut zs = RngStream::new(cfg.seed, &[purpose::GEN_BATCH, step_key, 0]);
    let z = fill_normals(&mut zs, n);
    let mut ts = RngStream::new(cfg.seed, &[purpose::GEN_BATCH, step_key, 1]);
    let t = fill_times(&mut ts, n, cfg.t_floor, cfg.t_max);
    let mut es = RngStream::new(cfg.seed, &[purpose::GEN_BATCH, step_key, 2]);
    let eps = fill_normals(&mut es, n);

    let mut tape = Tape::new();
    let (binding, x_t_node) = generator_forward_on_tape(&mut tape, generator, &schedule, z, &t, &eps)?;
    let x0_node = binding.output;
    let x_t = tape.value(x_t_node).clone();

    let ta_score = MlpScore { net: ta, schedule }.eval(&x_t, &t);
    let ref_field = MlpScore { net: reference, schedule };
    let ref_score = ref_field.eval(&x_t, &t);
    let reward = cfg.smooth_reward();
    let t_window = cfg.t_window();

    let loss_node = match cfg.method {
        Method::Didr => {
            let reference_for_drp = DrpReference::Score { field: &ref_field, schedule };
            let out = drp_estimate(
                &x_t,
                &t,
                &cfg.drp_config(),
                &reward,
                &reference_for_drp,
                cfg.seed,
                &[purpose::DRP_CHAIN, step_key],
                false,
            )?;
            let mismatch = Array2::from_shape_fn((n, 1), |(row, _)| {
                cfg.w_t * (ta_score[[row, 0]] - ref_score[[row, 0]] - out.s_hat[[row, 0]])
            });
            let mismatch_node = tape.constant(mismatch);
            let contraction = tape.mul(x_t_node, mismatch_node);
            let mean = tape.mean_all(contraction);
            tape.scale(mean, t_window)
        }
        Method::Dipp => {
            let mismatch = Array2::from_shape_fn((n, 1), |(row, _)| {
                cfg.w_t * (ta_score[[row, 0]] - ref_score[[row, 0]])
            });
            let mismatch_node = tape.constant(mismatch);
            let contraction = tape.mul(x_t_node, mismatch_node);
            let mean = tape.mean_all(contraction);
            let kl_term = tape.scale(mean, cfg.tau * t_window);
            let r_node = reward.on_tape(&mut tape, x0_node).expect("smooth reward");
            let r_mean = tape.mean_all(r_node);
            let reward_term = tape.scale(r_mean, -1.0);
            tape.add(kl_term, reward_term)
        }
    };
    let loss = tape.value_scalar(loss_node);
    if !loss.is_finite() {
        return Err(PipelineError::NonFiniteLoss { stage: "generator", step: outer_step });
    }
    let mut grads = tape.backward(loss_node)?;
    let grad_list = generator.collect_grads(&binding, &mut grads);
    adam.step(&mut generator.params_mut(), &grad_list).map_err(|source| {
        PipelineError::Optimizer { stage: "generator", step: outer_step, source }
    })?;
    Ok(())
}

/// One metrics line of the alignment loop.
#[derive(Debug, Clone, Copy)]
pub struct MetricsRow {
    pub outer_step: usize,
    pub method: Method,
    pub tau: f64,
    pub p_positive: f64,
    pub mean_reward: f64,
    pub ta_dsm_loss: f64,
    pub kl_to_qstar: f64,
}

#[derive(Debug)]
pub struct AlignmentResult {
    pub metrics: Vec<MetricsRow>,
    pub generator: MlpNet,
    pub ta: MlpNet,
    /// Fraction of positive samples at the final evaluation.
    pub final_p_positive: f64,
}

/// Stage 3 + 4: TA initialization from the frozen reference, then the
/// alternating loop. The reference stays untouched; this is asserted by
/// parameter hash on exit.
pub fn run_alignment(
    cfg: &PipelineConfig,
    reference: &MlpNet,
    generator: &MlpNet,
) -> Result<AlignmentResult, PipelineError> {
    let mut gen = generator.clone();
    let mut ta = reference.clone();
    let mut ta_adam = AdamState::new(AdamConfig::with_lr(cfg.ta_lr), &ta.params());
    let mut gen_adam = AdamState::new(AdamConfig::with_lr(cfg.gen_lr), &gen.params());
    let ref_hash = reference.param_hash();

    let target = TiltedTarget::new(cfg.gmm(), cfg.hard_reward())?;
    let hist = HistConfig::for_family(cfg.mu, cfg.sigma);
    let smooth = cfg.smooth_reward();
    let evaluate = |gen: &MlpNet, step: usize, ta_loss: f64| -> Result<MetricsRow, PipelineError> {
        let mut zs = RngStream::new(cfg.seed, &[purpose::EVAL, step as u64]);
        let z = fill_normals(&mut zs, cfg.eval_samples);
        let samples_arr = gen.forward_batch(&z)?;
        let samples: Vec<f64> = samples_arr.column(0).to_vec();
        let p_positive = positive_mass(&samples);
        let mean_reward =
            samples.iter().map(|&x| smooth.value(x)).sum::<f64>() / samples.len() as f64;
        let kl_to_qstar = kl_to_tilted(&samples, &target, hist)?;
        Ok(MetricsRow {
            outer_step: step,
            method: cfg.method,
            tau: cfg.tau,
            p_positive,
            mean_reward,
            ta_dsm_loss: ta_loss,
            kl_to_qstar,
        })
    };

    let mut metrics = vec![evaluate(&gen, 0, 0.0)?];
    let mut last_ta_loss = 0.0;
    for outer in 1..=cfg.outer_steps {
        for round in 0..cfg.ta_updates {
            last_ta_loss = ta_update(&mut ta, &mut ta_adam, &gen, cfg, outer, round)?;
        }
        generator_update(&mut gen, &mut gen_adam, &ta, reference, cfg, outer)?;
        if outer % cfg.log_interval == 0 || outer == cfg.outer_steps {
            metrics.push(evaluate(&gen, outer, last_ta_loss)?);
        }
    }
    assert_eq!(reference.param_hash(), ref_hash, "reference must stay frozen");
    let final_p_positive = metrics.last().expect("at least one row").p_positive;
    Ok(AlignmentResult { metrics, generator: gen, ta, final_p_positive })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(method: Method) -> PipelineConfig {
        PipelineConfig {
            width: 8,
            depth: 2,
            reference_steps: 5,
            reference_batch: 16,
            distill_steps: 5,
            distill_batch: 16,
            distill_pool: 64,
            distill_ddim_steps: 4,
            outer_steps: 2,
            ta_updates: 2,
            align_batch: 16,
            drp_chains: 2,
            drp_steps: 2,
            eval_samples: 64,
            log_interval: 1,
            method,
            seed: 11,
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn zero_step_stages_return_initialization() {
        let mut cfg = tiny_config(Method::Didr);
        cfg.reference_steps = 0;
        let stage = train_reference(&cfg).unwrap();
        let init = MlpNet::seeded(2, cfg.width, cfg.depth, Head::NoisePrediction, cfg.seed, 0);
        assert_eq!(stage.net, init);
    }

    #[test]
    fn seeded_stages_are_bit_identical() {
        let cfg = tiny_config(Method::Didr);
        let a = train_reference(&cfg).unwrap();
        let b = train_reference(&cfg).unwrap();
        assert_eq!(a.net, b.net);
        let ga = distill_generator(&cfg, &a.net).unwrap();
        let gb = distill_generator(&cfg, &b.net).unwrap();
        assert_eq!(ga.net, gb.net);
        let ra = run_alignment(&cfg, &a.net, &ga.net).unwrap();
        let rb = run_alignment(&cfg, &b.net, &gb.net).unwrap();
        assert_eq!(ra.generator, rb.generator);
        assert_eq!(ra.ta, rb.ta);
    }

    #[test]
    fn zero_outer_steps_keep_distilled_metrics() {
        let mut cfg = tiny_config(Method::Didr);
        cfg.outer_steps = 0;
        let reference = train_reference(&cfg).unwrap();
        let gen = distill_generator(&cfg, &reference.net).unwrap();
        let out = run_alignment(&cfg, &reference.net, &gen.net).unwrap();
        assert_eq!(out.metrics.len(), 1);
        assert_eq!(out.generator, gen.net);
    }

    #[test]
    fn zero_learning_rate_keeps_ta_fixed() {
        let mut cfg = tiny_config(Method::Didr);
        cfg.ta_lr = 0.0;
        let reference = train_reference(&cfg).unwrap();
        let mut ta = reference.net.clone();
        let mut adam = AdamState::new(AdamConfig::with_lr(0.0), &ta.params());
        let gen = MlpNet::seeded(1, cfg.width, cfg.depth, Head::DirectOutput, 3, 1);
        ta_update(&mut ta, &mut adam, &gen, &cfg, 1, 0).unwrap();
        assert_eq!(ta, reference.net);
    }

    #[test]
    fn methods_share_trajectories_under_constant_reward() {
        // with beta = 0 the reward is constant: the proxy correction vanishes
        // and (at tau = 1) both methods take identical generator steps
        let mut cfg_didr = tiny_config(Method::Didr);
        cfg_didr.beta = 0.0;
        cfg_didr.tau = 1.0;
        let mut cfg_dipp = cfg_didr.clone();
        cfg_dipp.method = Method::Dipp;
        let reference = train_reference(&cfg_didr).unwrap();
        let gen = distill_generator(&cfg_didr, &reference.net).unwrap();
        let a = run_alignment(&cfg_didr, &reference.net, &gen.net).unwrap();
        let b = run_alignment(&cfg_dipp, &reference.net, &gen.net).unwrap();
        assert_eq!(a.generator, b.generator);
        assert_eq!(a.ta, b.ta);
    }
}
