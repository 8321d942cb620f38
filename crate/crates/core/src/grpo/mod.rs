//! Group-relative policy optimization for the timestep predictor.
//!
//! Each iteration rolls out one group of trajectories that share a
//! condition, scores them, turns the z-scored composite rewards into
//! advantages and takes clipped-surrogate steps on minibatches. The whole
//! trajectory is one action: its log-probability is the sum of the per-step
//! Beta log-densities.

mod train;

pub use train::{collect_group, train_tpm, IterLog, RolloutGroup, TrainConfig, TrainReport, TrainSetup};

use crate::error::{Error, Result};
use crate::nn::{Tape, Var};
use crate::rewards::mean_std;
use crate::sampler::Trajectory;
use crate::tpm::Tpm;

/// Largest log-ratio magnitude exponentiated before clamping.
pub const MAX_LOG_RATIO: f64 = 30.0;

/// One trajectory's clipped-surrogate value and its derivative in the new
/// log-probability.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PpoTerm {
    pub value: f64,
    pub grad: f64,
    pub ratio: f64,
    /// The clipped branch was selected, so the gradient is zero.
    pub clipped: bool,
    /// The log-ratio exceeded [`MAX_LOG_RATIO`] and was clamped.
    pub overflow: bool,
}

/// `min(rho A, clip(rho, 1-eps, 1+eps) A)` with `rho = exp(logp - old)`.
pub fn ppo_term(logp: f64, old: f64, adv: f64, eps: f64) -> PpoTerm {
    let gap = logp - old;
    let overflow = gap.abs() > MAX_LOG_RATIO;
    let ratio = gap.clamp(-MAX_LOG_RATIO, MAX_LOG_RATIO).exp();
    let unclipped = ratio * adv;
    let clipped_val = ratio.clamp(1.0 - eps, 1.0 + eps) * adv;
    let clipped = clipped_val < unclipped;
    let value = if clipped { clipped_val } else { unclipped };
    let grad = if clipped || overflow { 0.0 } else { ratio * adv };
    PpoTerm { value, grad, ratio, clipped, overflow }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PpoOutcome {
    /// Mean surrogate over the batch (to be maximized).
    pub objective: f64,
    /// Derivative of the mean in each new log-probability.
    pub grad: Vec<f64>,
    pub clip_fraction: f64,
    pub overflows: usize,
}

pub fn ppo_clip_objective(logp_new: &[f64], logp_old: &[f64], adv: &[f64], eps: f64) -> Result<PpoOutcome> {
    let n = logp_new.len();
    if n == 0 || logp_old.len() != n || adv.len() != n {
        return Err(Error::shape("surrogate inputs must be non-empty and equally long"));
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::config(format!("clip range must lie in (0, 1), got {eps}")));
    }
    let terms: Vec<PpoTerm> = (0..n).map(|i| ppo_term(logp_new[i], logp_old[i], adv[i], eps)).collect();
    let objective = terms.iter().map(|t| t.value).sum::<f64>() / n as f64;
    if !objective.is_finite() {
        return Err(Error::numeric("surrogate objective is not finite"));
    }
    Ok(PpoOutcome {
        objective,
        grad: terms.iter().map(|t| t.grad / n as f64).collect(),
        clip_fraction: terms.iter().filter(|t| t.ratio < 1.0 - eps || t.ratio > 1.0 + eps).count() as f64 / n as f64,
        overflows: terms.iter().filter(|t| t.overflow).count(),
    })
}

/// Group z-scores of the rewards, population standard deviation.
pub fn group_advantages(rewards: &[f64], eps: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::domain("advantages need a group of at least two"));
    }
    crate::error::ensure_finite(rewards, "rewards")?;
    let (m, s) = mean_std(rewards);
    Ok(rewards.iter().map(|r| (r - m) / (s + eps)).collect())
}

/// Sum of per-step log-densities of the recorded ratios under the current
/// predictor, recorded on `tape`.
pub fn trajectory_logprob(tape: &mut Tape, tpm: &Tpm, traj: &Trajectory) -> Result<Var> {
    let mut terms = Vec::with_capacity(traj.steps.len());
    for s in &traj.steps {
        let r = s.ratio.ok_or_else(|| Error::usage("trajectory step has no ratio"))?;
        let p = tpm.apply(tape, &s.tpm_input(traj.cond)).map_err(|e| e.at_step(s.k))?;
        terms.push(tape.beta_log_prob(p, r).map_err(|e| e.at_step(s.k))?);
    }
    if terms.is_empty() {
        return Err(Error::usage("trajectory has no steps"));
    }
    let all = tape.concat_rows(&terms)?;
    tape.sum(all)
}
