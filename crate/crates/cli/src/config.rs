//! Experiment configuration: strict key-value parsing with defaults that
//! reproduce the published toy setup, dotted-path overrides, and a resolved
//! echo for provenance.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use didr_core::diffusion::ChainKind;
use didr_core::pipeline::{Method, PipelineConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config file: {0}")]
    Io(#[from] std::io::Error),
    #[error("config rejected: {0}")]
    Parse(String),
    #[error("override `{key}` is malformed: {reason}")]
    BadOverride { key: String, reason: String },
    #[error("invalid value: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Mode location of the symmetric bimodal reference.
    pub mu: f64,
    /// Mode standard deviation.
    pub sigma: f64,
    /// Forward process rate.
    pub gamma: f64,
    /// Diffusion horizon.
    pub t_max: f64,
    /// Smooth reward slope.
    pub beta: f64,
    /// Temperature.
    pub tau: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { mu: 2.0, sigma: 0.5, gamma: 20.0, t_max: 0.25, beta: 20.0, tau: 1.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub width: usize,
    pub depth: usize,
    pub reference_steps: usize,
    pub reference_lr: f64,
    pub reference_batch: usize,
    pub distill_steps: usize,
    pub distill_lr: f64,
    pub distill_batch: usize,
    pub distill_ddim_steps: usize,
    pub distill_pool: usize,
    pub outer_steps: usize,
    pub ta_updates: usize,
    pub ta_lr: f64,
    pub gen_lr: f64,
    pub align_batch: usize,
    pub w_t: f64,
    pub lambda_t: f64,
    pub t_floor: f64,
    /// "didr" or "dipp".
    pub method: String,
    pub eval_samples: usize,
    pub log_interval: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            width: p.width,
            depth: p.depth,
            reference_steps: p.reference_steps,
            reference_lr: p.reference_lr,
            reference_batch: p.reference_batch,
            distill_steps: p.distill_steps,
            distill_lr: p.distill_lr,
            distill_batch: p.distill_batch,
            distill_ddim_steps: p.distill_ddim_steps,
            distill_pool: p.distill_pool,
            outer_steps: p.outer_steps,
            ta_updates: p.ta_updates,
            ta_lr: p.ta_lr,
            gen_lr: p.gen_lr,
            align_batch: p.align_batch,
            w_t: p.w_t,
            lambda_t: p.lambda_t,
            t_floor: p.t_floor,
            method: "didr".into(),
            eval_samples: p.eval_samples,
            log_interval: p.log_interval,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DrpSection {
    pub chains: usize,
    pub steps: usize,
    /// "ddpm-stochastic", "euler-flow", or "exact-posterior".
    pub chain_kind: String,
}

impl Default for DrpSection {
    fn default() -> Self {
        Self { chains: 4, steps: 4, chain_kind: "ddpm-stochastic".into() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScanSection {
    pub mus: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub gammas: Vec<f64>,
    /// Absolute temperatures; when empty, `tau_factors` times the closed-form
    /// threshold of each grid point is used.
    pub taus: Vec<f64>,
    pub tau_factors: Vec<f64>,
}

impl Default for ScanSection {
    fn default() -> Self {
        Self {
            mus: vec![2.0],
            sigmas: vec![0.5],
            gammas: vec![20.0],
            taus: vec![],
            tau_factors: (0..9).map(|i| 0.8 + 0.05 * i as f64).collect(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub alphas: Vec<f64>,
    pub taus: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            alphas: (0..=20).map(|i| i as f64 / 20.0).collect(),
            taus: vec![0.5, 1.0, 2.0],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ValidateSection {
    /// Noise levels probed by the estimator validations.
    pub times: Vec<f64>,
    /// Sample positions probed at each time.
    pub points: Vec<f64>,
    /// Chain count for the estimator dump.
    pub chains: usize,
    /// Chain count for the consistency comparison.
    pub consistency_chains: usize,
    /// Interior mixture weights checked by the gradient identity.
    pub alphas: Vec<f64>,
    /// Time grid for the gradient identity.
    pub t_grid: Vec<f64>,
}

impl Default for ValidateSection {
    fn default() -> Self {
        Self {
            times: vec![0.02, 0.05, 0.1],
            points: vec![-0.8, -0.3, 0.0, 0.3, 0.8],
            chains: 16,
            consistency_chains: 100_000,
            alphas: vec![0.3, 0.5, 0.7],
            t_grid: vec![0.02, 0.05, 0.1, 0.15, 0.2, 0.25],
        }
    }
}

/// Fully resolved experiment configuration.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub train: TrainSection,
    pub drp: DrpSection,
    pub scan: ScanSection,
    pub sweep: SweepSection,
    pub validate: ValidateSection,
}

impl ExperimentConfig {
    /// Applies the smaller training tier (2,000 outer steps, width 64,
    /// batch 512) on top of the defaults.
    pub fn apply_reduced_tier(&mut self) {
        self.train.width = 64;
        self.train.outer_steps = 2_000;
        self.train.reference_batch = 512;
        self.train.distill_batch = 512;
        self.train.align_batch = 512;
        self.train.distill_pool = 32_768;
    }

    pub fn method(&self) -> Result<Method, ConfigError> {
        match self.train.method.as_str() {
            "didr" => Ok(Method::Didr),
            "dipp" => Ok(Method::Dipp),
            other => Err(ConfigError::Invalid(format!(
                "train.method must be `didr` or `dipp`, got `{other}`"
            ))),
        }
    }

    pub fn chain_kind(&self) -> Result<ChainKind, ConfigError> {
        match self.drp.chain_kind.as_str() {
            "ddpm-stochastic" => Ok(ChainKind::DdpmStochastic),
            "euler-flow" => Ok(ChainKind::EulerFlow),
            "exact-posterior" => Ok(ChainKind::DdpmStochastic),
            other => Err(ConfigError::Invalid(format!(
                "drp.chain_kind must be one of ddpm-stochastic | euler-flow | \
                 exact-posterior, got `{other}`"
            ))),
        }
    }

    pub fn pipeline(&self) -> Result<PipelineConfig, ConfigError> {
        let method = self.method()?;
        let cfg = PipelineConfig {
            mu: self.model.mu,
            sigma: self.model.sigma,
            gamma: self.model.gamma,
            t_max: self.model.t_max,
            beta: self.model.beta,
            tau: self.model.tau,
            width: self.train.width,
            depth: self.train.depth,
            reference_steps: self.train.reference_steps,
            reference_lr: self.train.reference_lr,
            reference_batch: self.train.reference_batch,
            distill_steps: self.train.distill_steps,
            distill_lr: self.train.distill_lr,
            distill_batch: self.train.distill_batch,
            distill_ddim_steps: self.train.distill_ddim_steps,
            distill_pool: self.train.distill_pool,
            outer_steps: self.train.outer_steps,
            ta_updates: self.train.ta_updates,
            ta_lr: self.train.ta_lr,
            gen_lr: self.train.gen_lr,
            align_batch: self.train.align_batch,
            drp_chains: self.drp.chains,
            drp_steps: self.drp.steps,
            w_t: self.train.w_t,
            lambda_t: self.train.lambda_t,
            t_floor: self.train.t_floor,
            method,
            seed: self.seed,
            eval_samples: self.train.eval_samples,
            log_interval: self.train.log_interval,
        };
        if !(cfg.mu > 0.0 && cfg.sigma > 0.0 && cfg.gamma > 0.0 && cfg.t_max > 0.0) {
            return Err(ConfigError::Invalid(
                "model parameters mu, sigma, gamma, t_max must be positive".into(),
            ));
        }
        if !(cfg.tau > 0.0) {
            return Err(ConfigError::Invalid("model.tau must be positive".into()));
        }
        if cfg.t_floor <= 0.0 || cfg.t_floor >= cfg.t_max {
            return Err(ConfigError::Invalid(
                "train.t_floor must lie strictly inside (0, t_max)".into(),
            ));
        }
        Ok(cfg)
    }

    /// Resolved echo written next to the outputs.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// FNV-1a of the resolved echo, recorded in summaries.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.to_toml().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
        h
    }
}

/// Loads a config: defaults, optional reduced-tier preset, optional file,
/// then dotted-path overrides, in that order.
pub fn load_config(
    path: Option<&std::path::Path>,
    reduced_tier: bool,
    overrides: &[String],
    seed: Option<u64>,
) -> Result<ExperimentConfig, ConfigError> {
    let mut table = toml::Table::new();
    if let Some(p) = path {
        let text = std::fs::read_to_string(p)?;
        table = text
            .parse::<toml::Table>()
            .map_err(|e| ConfigError::Parse(e.to_string()))?;
    }
    for entry in overrides {
        let (key, value) = entry
            .split_once('=')
            .ok_or_else(|| ConfigError::BadOverride {
                key: entry.clone(),
                reason: "expected key=value".into(),
            })?;
        set_path(&mut table, key.trim(), value.trim()).map_err(|reason| {
            ConfigError::BadOverride { key: key.trim().to_string(), reason }
        })?;
    }
    let mut cfg = ExperimentConfig::default();
    if reduced_tier {
        cfg.apply_reduced_tier();
    }
    // deserialize over the preset so file/override keys win
    let explicit: ExperimentConfig = {
        // merge: start from the preset serialized, overlay explicit table
        let mut base = toml::Table::try_from(&cfg).map_err(|e| ConfigError::Parse(e.to_string()))?;
        merge_tables(&mut base, &table);
        base.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?
    };
    cfg = explicit;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn merge_tables(base: &mut toml::Table, overlay: &toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(bt)), toml::Value::Table(ot)) => merge_tables(bt, ot),
            (_, v) => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

fn set_path(table: &mut toml::Table, key: &str, raw: &str) -> Result<(), String> {
    // parse the raw text as a TOML scalar/array; bare words fall back to
    // strings so `--set train.method=dipp` works unquoted
    let value: toml::Value = match format!("value = {raw}").parse::<toml::Table>() {
        Ok(mut doc) => doc.remove("value").expect("key just inserted"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut parts = key.split('.').peekable();
    let mut cur = table;
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            cur.insert(part.to_string(), value);
            return Ok(());
        }
        cur = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| format!("`{part}` is not a section"))?;
    }
    Err("empty key".into())
}
