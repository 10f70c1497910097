//! Experiment dispatch: each kind runs core routines and emits CSV time
//! series, a JSON summary, and stage checkpoints into the output directory.

use std::path::Path;
use std::time::Instant;

use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use didr_core::diffusion::{ChainKind, GmmScoreField};
use didr_core::drp::{drp_estimate, DrpConfig, DrpReference};
use didr_core::net::MlpNet;
use didr_core::pipeline::{
    distill_generator, run_alignment, train_reference, Method, PipelineConfig, TrainedStage,
};
use didr_core::quad::QuadConfig;
use didr_core::reward::RewardSpec;
use didr_core::rng::{purpose, RngStream};
use didr_core::tape::Tape;
use didr_core::theory::{
    b_crit_quadrature, collapse_threshold, ikl_gradient_check, l_ikl_alpha, l_rlhf_alpha,
    l_term_alpha, scan_collapse_threshold, target_mass, AlphaFamily,
};
use didr_core::tilted::TiltedTarget;
use ndarray::Array2;

use crate::config::{ConfigError, ExperimentConfig};
use crate::output::{fmt_f64, CsvWriter, OutputDir, FORMAT_VERSION};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("pipeline fault: {0}")]
    Pipeline(#[from] didr_core::pipeline::PipelineError),
    #[error("network checkpoint fault: {0}")]
    Net(#[from] didr_core::net::NetError),
    #[error("estimator fault: {0}")]
    Drp(#[from] didr_core::drp::DrpError),
    #[error("analysis fault: {0}")]
    Theory(#[from] didr_core::theory::TheoryError),
    #[error("analytic fault: {0}")]
    Tilted(#[from] didr_core::tilted::TiltedError),
    #[error("checkpoint `{path}` has shape {got}, expected {want}; remove it or match the config")]
    CheckpointShape { path: String, got: String, want: String },
    #[error("validation failed: {0}")]
    ValidationFailed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    ThresholdScan,
    AlphaSweep,
    TrainRef,
    Distill,
    Align,
    ValidateDrs,
    ValidateGrad,
    FullToy,
}

impl ExperimentKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentKind::ThresholdScan => "threshold-scan",
            ExperimentKind::AlphaSweep => "alpha-sweep",
            ExperimentKind::TrainRef => "train-ref",
            ExperimentKind::Distill => "distill",
            ExperimentKind::Align => "align",
            ExperimentKind::ValidateDrs => "validate-drs",
            ExperimentKind::ValidateGrad => "validate-grad",
            ExperimentKind::FullToy => "full-toy",
        }
    }
}

#[derive(Serialize)]
pub struct RunSummary {
    pub kind: String,
    pub seed: u64,
    pub config_hash: String,
    pub format_version: u32,
    pub wall_clock_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_metrics: Option<serde_json::Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Runs one experiment; artifacts land under `out_root`.
pub fn run(
    kind: ExperimentKind,
    cfg: &ExperimentConfig,
    out_root: &Path,
) -> Result<RunSummary, RunError> {
    let started = Instant::now();
    let out = OutputDir::prepare(out_root, &cfg.to_toml())?;
    let final_metrics = match kind {
        ExperimentKind::ThresholdScan => threshold_scan(cfg, &out)?,
        ExperimentKind::AlphaSweep => alpha_sweep(cfg, &out)?,
        ExperimentKind::TrainRef => {
            let pc = cfg.pipeline()?;
            let stage = train_stage_with_losses(&pc, &out, "reference")?;
            stage.net.save(&out.path("reference.mlp"))?;
            json!({ "final_dsm_loss": stage.losses.last().map(|l| l.1) })
        }
        ExperimentKind::Distill => {
            let pc = cfg.pipeline()?;
            let reference = load_or_train_reference(&pc, &out)?;
            let stage = distill_stage_with_losses(&pc, &reference, &out)?;
            stage.net.save(&out.path("generator.mlp"))?;
            json!({ "final_regression_loss": stage.losses.last().map(|l| l.1) })
        }
        ExperimentKind::Align => {
            let pc = cfg.pipeline()?;
            let reference = load_or_train_reference(&pc, &out)?;
            let generator = load_or_distill_generator(&pc, &reference, &out)?;
            align_one(&pc, &reference, &generator, &out)?
        }
        ExperimentKind::FullToy => {
            let pc = cfg.pipeline()?;
            let reference = load_or_train_reference(&pc, &out)?;
            let generator = load_or_distill_generator(&pc, &reference, &out)?;
            let mut metrics = serde_json::Map::new();
            for method in [Method::Didr, Method::Dipp] {
                let pc_m = PipelineConfig { method, ..pc.clone() };
                let m = align_one(&pc_m, &reference, &generator, &out)?;
                metrics.insert(method.as_str().to_string(), m);
            }
            serde_json::Value::Object(metrics)
        }
        ExperimentKind::ValidateDrs => validate_drs(cfg, &out)?,
        ExperimentKind::ValidateGrad => validate_grad(cfg, &out)?,
    };
    let summary = RunSummary {
        kind: kind.as_str().to_string(),
        seed: cfg.seed,
        config_hash: format!("{:016x}", cfg.hash()),
        format_version: FORMAT_VERSION,
        wall_clock_s: started.elapsed().as_secs_f64(),
        final_metrics: Some(final_metrics),
        error: None,
    };
    out.write_summary(&summary)?;
    Ok(summary)
}

fn write_losses(out: &OutputDir, name: &str, stage: &TrainedStage) -> Result<(), RunError> {
    let mut csv = CsvWriter::create(&out.path(&format!("losses_{name}.csv")), &["step", "loss"])?;
    for (step, loss) in &stage.losses {
        csv.row(&[step.to_string(), fmt_f64(*loss)])?;
    }
    Ok(())
}

fn train_stage_with_losses(
    pc: &PipelineConfig,
    out: &OutputDir,
    name: &str,
) -> Result<TrainedStage, RunError> {
    let stage = train_reference(pc)?;
    write_losses(out, name, &stage)?;
    Ok(stage)
}

fn distill_stage_with_losses(
    pc: &PipelineConfig,
    reference: &MlpNet,
    out: &OutputDir,
) -> Result<TrainedStage, RunError> {
    let stage = distill_generator(pc, reference)?;
    write_losses(out, "distill", &stage)?;
    Ok(stage)
}

fn check_shape(net: &MlpNet, arity: usize, pc: &PipelineConfig, path: &Path) -> Result<(), RunError> {
    if net.input_arity != arity || net.hidden_width != pc.width || net.depth != pc.depth {
        return Err(RunError::CheckpointShape {
            path: path.display().to_string(),
            got: format!("arity {} width {} depth {}", net.input_arity, net.hidden_width, net.depth),
            want: format!("arity {arity} width {} depth {}", pc.width, pc.depth),
        });
    }
    Ok(())
}

fn load_or_train_reference(pc: &PipelineConfig, out: &OutputDir) -> Result<MlpNet, RunError> {
    let path = out.path("reference.mlp");
    if path.exists() {
        let net = MlpNet::load(&path)?;
        check_shape(&net, 2, pc, &path)?;
        return Ok(net);
    }
    let stage = train_stage_with_losses(pc, out, "reference")?;
    stage.net.save(&path)?;
    Ok(stage.net)
}

fn load_or_distill_generator(
    pc: &PipelineConfig,
    reference: &MlpNet,
    out: &OutputDir,
) -> Result<MlpNet, RunError> {
    let path = out.path("generator.mlp");
    if path.exists() {
        let net = MlpNet::load(&path)?;
        check_shape(&net, 1, pc, &path)?;
        return Ok(net);
    }
    let stage = distill_stage_with_losses(pc, reference, out)?;
    stage.net.save(&path)?;
    Ok(stage.net)
}

fn align_one(
    pc: &PipelineConfig,
    reference: &MlpNet,
    generator: &MlpNet,
    out: &OutputDir,
) -> Result<serde_json::Value, RunError> {
    let result = run_alignment(pc, reference, generator)?;
    let method = pc.method.as_str();
    let mut csv = CsvWriter::create(
        &out.path(&format!("metrics_{method}.csv")),
        &["outer_step", "method", "tau", "p_positive", "mean_reward", "ta_dsm_loss", "kl_to_qstar"],
    )?;
    for row in &result.metrics {
        csv.row(&[
            row.outer_step.to_string(),
            row.method.as_str().to_string(),
            fmt_f64(row.tau),
            fmt_f64(row.p_positive),
            fmt_f64(row.mean_reward),
            fmt_f64(row.ta_dsm_loss),
            fmt_f64(row.kl_to_qstar),
        ])?;
    }
    result.generator.save(&out.path(&format!("generator_{method}.mlp")))?;
    result.ta.save(&out.path(&format!("ta_{method}.mlp")))?;
    let last = result.metrics.last().expect("at least one metrics row");
    Ok(json!({
        "p_positive": last.p_positive,
        "mean_reward": last.mean_reward,
        "kl_to_qstar": last.kl_to_qstar,
        "target_mass": target_mass(pc.tau),
    }))
}

fn threshold_scan(cfg: &ExperimentConfig, out: &OutputDir) -> Result<serde_json::Value, RunError> {
    let mut csv = CsvWriter::create(
        &out.path("threshold_scan.csv"),
        &[
            "mu",
            "sigma",
            "gamma",
            "tau",
            "tau_crit_closed",
            "tau_crit_bracket_lo",
            "tau_crit_bracket_hi",
            "alpha_star",
        ],
    )?;
    let mut rows = 0usize;
    for &mu in &cfg.scan.mus {
        for &sigma in &cfg.scan.sigmas {
            for &gamma in &cfg.scan.gammas {
                let family = AlphaFamily::new(mu, sigma, gamma);
                let closed = collapse_threshold(mu, sigma, gamma);
                let taus: Vec<f64> = if cfg.scan.taus.is_empty() {
                    cfg.scan.tau_factors.iter().map(|f| f * closed).collect()
                } else {
                    cfg.scan.taus.clone()
                };
                let scan = scan_collapse_threshold(&family, &taus, QuadConfig::default())?;
                let lo = scan.bracket_lo.map(fmt_f64).unwrap_or_default();
                let hi = scan.bracket_hi.map(fmt_f64).unwrap_or_default();
                for (tau, alpha_star, _) in &scan.points {
                    csv.row(&[
                        fmt_f64(mu),
                        fmt_f64(sigma),
                        fmt_f64(gamma),
                        fmt_f64(*tau),
                        fmt_f64(closed),
                        lo.clone(),
                        hi.clone(),
                        fmt_f64(*alpha_star),
                    ])?;
                    rows += 1;
                }
            }
        }
    }
    Ok(json!({ "rows": rows }))
}

fn alpha_sweep(cfg: &ExperimentConfig, out: &OutputDir) -> Result<serde_json::Value, RunError> {
    let family = AlphaFamily::new(cfg.model.mu, cfg.model.sigma, cfg.model.gamma);
    let mut csv = CsvWriter::create(
        &out.path("alpha_sweep.csv"),
        &["alpha", "tau", "l_term", "l_rlhf", "l_ikl"],
    )?;
    let mut rows = 0usize;
    for &tau in &cfg.sweep.taus {
        let reward = RewardSpec::hard(tau).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for &alpha in &cfg.sweep.alphas {
            let lt = l_term_alpha(alpha, tau, &family, QuadConfig::default())?;
            let lr = l_rlhf_alpha(alpha, tau, &family, &reward)?;
            let li = l_ikl_alpha(alpha, tau, &family, &reward)?;
            csv.row(&[
                fmt_f64(alpha),
                fmt_f64(tau),
                fmt_f64(lt),
                fmt_f64(lr),
                fmt_f64(li),
            ])?;
            rows += 1;
        }
    }
    Ok(json!({ "rows": rows }))
}

fn validate_drs(cfg: &ExperimentConfig, out: &OutputDir) -> Result<serde_json::Value, RunError> {
    let pc = cfg.pipeline()?;
    let gmm = pc.gmm();
    let schedule = pc.schedule();
    let smooth = pc.smooth_reward();
    let hard = pc.hard_reward();
    let smooth_target = TiltedTarget::new(gmm.clone(), smooth)?;
    let hard_target = TiltedTarget::new(gmm.clone(), hard)?;
    let field = GmmScoreField { gmm: &gmm, schedule };

    let mut csv = CsvWriter::create(
        &out.path("drp_chains.csv"),
        &["t", "x_t", "chain", "endpoint", "reward", "weight", "gradient"],
    )?;
    let mut comparisons = Vec::new();
    for &t in &cfg.validate.times {
        for &x in &cfg.validate.points {
            // inspection dump with the configured chain kind on the exact
            // reference score
            let dump_cfg = DrpConfig::new(
                cfg.validate.chains,
                cfg.drp.steps,
                pc.tau,
                cfg.chain_kind()?,
            );
            let reference = DrpReference::Score { field: &field, schedule };
            let dump = drp_estimate(
                &Array2::from_elem((1, 1), x),
                &Array2::from_elem((1, 1), t),
                &dump_cfg,
                &smooth,
                &reference,
                cfg.seed,
                &[purpose::EVAL, 1],
                true,
            )?;
            for row in dump.rows.as_deref().unwrap_or_default() {
                csv.row(&[
                    fmt_f64(t),
                    fmt_f64(x),
                    row.chain.to_string(),
                    fmt_f64(row.endpoint),
                    fmt_f64(row.reward),
                    fmt_f64(row.weight),
                    fmt_f64(row.gradient),
                ])?;
            }
            // consistency against the analytic value via the exact-posterior
            // harness
            let exact_cfg = DrpConfig::new(
                cfg.validate.consistency_chains,
                1,
                pc.tau,
                ChainKind::DdpmStochastic,
            );
            let exact_ref = DrpReference::ExactPosterior { gmm: &gmm, schedule };
            let est = drp_estimate(
                &Array2::from_elem((1, 1), x),
                &Array2::from_elem((1, 1), t),
                &exact_cfg,
                &smooth,
                &exact_ref,
                cfg.seed,
                &[purpose::EVAL, 2],
                false,
            )?;
            let truth = smooth_target.drs(&schedule, t, x)?;
            comparisons.push(json!({
                "t": t,
                "x_t": x,
                "chain_estimate": dump.s_hat[[0, 0]],
                "exact_posterior_estimate": est.s_hat[[0, 0]],
                "analytic_drs": truth,
            }));
        }
    }
    Ok(json!({
        "comparisons": comparisons,
        "positive_mass_hard": hard_target.positive_mass()?,
        "positive_mass_smooth": smooth_target.positive_mass()?,
        "target_mass": target_mass(pc.tau),
        "partition_hard": hard_target.z,
        "partition_smooth": smooth_target.z,
    }))
}

fn validate_grad(cfg: &ExperimentConfig, out: &OutputDir) -> Result<serde_json::Value, RunError> {
    let pc = cfg.pipeline()?;
    let mut csv = CsvWriter::create(
        &out.path("gradcheck.csv"),
        &["check", "detail", "max_rel_error", "threshold", "pass"],
    )?;
    let mut all_pass = true;
    let record = |csv: &mut CsvWriter,
                      check: &str,
                      detail: String,
                      err: f64,
                      threshold: f64|
     -> Result<bool, RunError> {
        let pass = err < threshold;
        csv.row(&[
            check.to_string(),
            detail,
            fmt_f64(err),
            fmt_f64(threshold),
            pass.to_string(),
        ])?;
        Ok(pass)
    };

    // parameter gradients of a small seeded network against central
    // finite differences
    let net = didr_core::net::MlpNet::seeded(
        2,
        8,
        3,
        didr_core::net::Head::NoisePrediction,
        cfg.seed,
        3,
    );
    let mut rng = RngStream::new(cfg.seed, &[purpose::EVAL, 3]);
    let x = Array2::from_shape_fn((4, 2), |_| rng.uniform_in(-1.5, 1.5));
    let mut tape = Tape::new();
    let xn = tape.constant(x.clone());
    let binding = net.forward_on_tape(&mut tape, xn)?;
    let loss = tape.sum_all(binding.output);
    let mut grads = tape.backward(loss).map_err(didr_core::pipeline::PipelineError::from)?;
    let grad_list = net.collect_grads(&binding, &mut grads);
    let h = 1e-4;
    let mut max_rel: f64 = 0.0;
    for (block, grad) in grad_list.iter().enumerate() {
        for r in 0..grad.nrows() {
            for c in 0..grad.ncols() {
                let mut plus = net.clone();
                plus.params_mut()[block][[r, c]] += h;
                let mut minus = net.clone();
                minus.params_mut()[block][[r, c]] -= h;
                let fd = (plus.forward_batch(&x)?.sum() - minus.forward_batch(&x)?.sum())
                    / (2.0 * h);
                let an = grad[[r, c]];
                let denom = an.abs().max(fd.abs());
                if denom > 1e-8 {
                    max_rel = max_rel.max((an - fd).abs() / denom);
                }
            }
        }
    }
    all_pass &= record(&mut csv, "parameter-gradients", "8x3 net, 4 inputs".into(), max_rel, 1e-5)?;

    // input gradient through a 4-step stochastic chain on the exact score
    let gmm = pc.gmm();
    let schedule = pc.schedule();
    let field = GmmScoreField { gmm: &gmm, schedule };
    let steps = pc.drp_steps.max(2);
    let noises: Vec<Array2<f64>> = (0..steps - 1)
        .map(|j| {
            Array2::from_elem((1, 1), RngStream::new(cfg.seed, &[purpose::EVAL, 4, j as u64]).normal())
        })
        .collect();
    let chain_val = |xv: f64| -> Result<(f64, Option<f64>), RunError> {
        let mut tape = Tape::new();
        let xn = tape.var(Array2::from_elem((1, 1), xv));
        let t_rows = Array2::from_elem((1, 1), 0.1);
        let res = didr_core::diffusion::ddpm_posterior_chain_on_tape(
            &field, &mut tape, xn, &t_rows, steps, &noises, &schedule,
        )
        .map_err(didr_core::pipeline::PipelineError::from)?;
        let v = tape.value(res.endpoint)[[0, 0]];
        let g = tape
            .backward(res.endpoint)
            .map_err(didr_core::pipeline::PipelineError::from)?
            .get(xn)
            .map(|g| g[[0, 0]]);
        Ok((v, g))
    };
    let mut chain_rel: f64 = 0.0;
    for xv in [-0.7, 0.2, 1.1] {
        let (_, g) = chain_val(xv)?;
        let an = g.expect("chain input gradient");
        let h2 = 1e-5;
        let fd = (chain_val(xv + h2)?.0 - chain_val(xv - h2)?.0) / (2.0 * h2);
        chain_rel = chain_rel.max((an - fd).abs() / an.abs().max(fd.abs()).max(1e-10));
    }
    all_pass &= record(&mut csv, "chain-input-gradient", format!("{steps}-step chain"), chain_rel, 1e-4)?;

    // score-form derivative identity on the alpha family
    let reward = pc.smooth_reward();
    for &alpha in &cfg.validate.alphas {
        let report = ikl_gradient_check(&AlphaFamily::new(pc.mu, pc.sigma, pc.gamma), &reward, pc.tau, alpha, &cfg.validate.t_grid)?;
        all_pass &= record(
            &mut csv,
            "ikl-gradient-identity",
            format!("alpha={alpha}"),
            report.max_rel_error,
            1e-3,
        )?;
    }

    // the closed-form threshold against its quadrature twin
    let closed = collapse_threshold(pc.mu, pc.sigma, pc.gamma);
    let b = b_crit_quadrature(pc.mu, pc.sigma, pc.gamma)?;
    all_pass &= record(
        &mut csv,
        "collapse-threshold-identity",
        "tau_crit * B_crit".into(),
        (closed * b - 1.0).abs(),
        1e-6,
    )?;

    if !all_pass {
        return Err(RunError::ValidationFailed(
            "one or more gradient checks exceeded their thresholds; see gradcheck.csv".into(),
        ));
    }
    Ok(json!({ "all_pass": true }))
}
