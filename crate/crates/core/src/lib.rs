//! Numerical laboratory for reward-tilted diffusion distillation on 1-D
//! Gaussian mixtures.
//!
//! Everything in this crate is built so that each quantity produced by the
//! training pipeline has an analytic or brute-force oracle next to it:
//!
//! * [`tape`], [`net`], [`adam`] — reverse-mode autodiff over batched
//!   matrices, small MLPs, and the Adam optimizer.
//! * [`gmm`], [`schedule`], [`reward`] — reference mixtures, the VP forward
//!   process, and reward functions.
//! * [`posterior`], [`tilted`], [`velocity`] — closed-form and quadrature
//!   oracles: forward marginals, posteriors, the reward-tilted target and its
//!   diffused trajectory, the diffused reward score, and the rectified-flow
//!   velocity field.
//! * [`diffusion`] — forward noising, denoising score matching, and the
//!   differentiable denoising chains (DDIM, stochastic VP, Euler flow).
//! * [`drp`] — the Monte-Carlo diffused-reward-proxy estimator and the
//!   classifier-guidance comparator.
//! * [`pipeline`] — the four-stage training pipeline and the alternating
//!   teaching-assistant loop.
//! * [`theory`] — the terminal-reward-domination analysis: collapse
//!   thresholds, exact objectives over the two-mode generator family, and
//!   gradient identity checks.

pub mod adam;
pub mod diffusion;
pub mod drp;
pub mod gmm;
pub mod net;
pub mod pipeline;
pub mod posterior;
pub mod quad;
pub mod reward;
pub mod rng;
pub mod schedule;
pub mod tape;
pub mod theory;
pub mod tilted;
pub mod velocity;

pub use adam::AdamState;
pub use gmm::GmmSpec;
pub use net::MlpNet;
pub use reward::RewardSpec;
pub use schedule::VpSchedule;
pub use tape::Tape;
