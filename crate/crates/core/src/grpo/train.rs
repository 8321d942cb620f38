use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{group_advantages, ppo_term, trajectory_logprob};
use crate::error::{Error, Result};
use crate::eval::reward_rows;
use crate::flow::{Condition, Target, TimeGrid, VelocityField};
use crate::nn::{adam_step, clip_global_norm, global_grad_norm, AdamState, Tape};
use crate::rewards::{composite_reward, zscore_normalize, BatchScores, RewardSpec, ScoreStats};
use crate::rng::{Domain, Streams};
use crate::sampler::{mean_deviation, sample_async, BoundMode, RatioSource, SamplerConfig, Trajectory};
use crate::tpm::Tpm;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: u64,
    pub group_size: usize,
    pub minibatch: usize,
    pub clip: f64,
    pub lr: f64,
    pub max_grad_norm: f64,
    pub epochs: usize,
    /// Checkpoint period in iterations; 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    /// Consecutive saturated iterations before a warning is recorded.
    pub saturation_window: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 4000,
            group_size: 16,
            minibatch: 4,
            clip: 0.2,
            lr: 2e-5,
            max_grad_norm: 1.0,
            epochs: 1,
            checkpoint_every: 500,
            saturation_window: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::config("group size must be at least 2"));
        }
        if self.minibatch == 0 || !self.group_size.is_multiple_of(self.minibatch) {
            return Err(Error::config(format!(
                "minibatch {} must divide group size {}",
                self.minibatch, self.group_size
            )));
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(Error::config("clip range must lie in (0, 1)"));
        }
        if !(self.lr > 0.0) || !(self.max_grad_norm > 0.0) || self.epochs == 0 {
            return Err(Error::config("learning rate, gradient norm and epochs must be positive"));
        }
        Ok(())
    }
}

/// Frozen pieces shared by every rollout.
#[derive(Clone, Copy)]
pub struct TrainSetup<'a> {
    pub field: &'a dyn VelocityField,
    pub target: &'a Target,
    pub grid: &'a TimeGrid,
    pub sampler: SamplerConfig,
    pub reward: &'a RewardSpec,
    /// Fixed statistics for the logged reward; training itself always
    /// normalizes within the group.
    pub reference: Option<&'a ScoreStats>,
}

#[derive(Clone, Debug)]
pub struct RolloutGroup {
    pub cond: Condition,
    pub trajectories: Vec<Trajectory>,
    pub raw: BatchScores,
    /// Group-normalized composite rewards.
    pub rewards: Vec<f64>,
    pub old_log_probs: Vec<f64>,
}

/// Rolls out `group_size` stochastic trajectories for iteration `iter`.
pub fn collect_group(
    setup: &TrainSetup<'_>,
    tpm: &Tpm,
    group_size: usize,
    streams: &Streams,
    iter: u64,
) -> Result<RolloutGroup> {
    let classes = setup.target.classes();
    let cond = Condition::Class(streams.stream(Domain::Condition, iter).random_range(0..classes));
    let mut trajectories = Vec::with_capacity(group_size);
    for i in 0..group_size {
        let mut rng = streams.stream(Domain::Rollout, iter * group_size as u64 + i as u64);
        let source = RatioSource::Policy { policy: tpm, stochastic: true };
        trajectories.push(sample_async(setup.field, source, setup.grid, cond, &setup.sampler, &mut rng)?);
    }
    let raw = reward_rows(setup.reward, setup.target, &trajectories)?;
    let rewards = composite_reward(&zscore_normalize(&raw, setup.reward.eps_z)?);
    for (t, r) in trajectories.iter_mut().zip(&rewards) {
        t.reward = Some(*r);
    }
    let old_log_probs = trajectories
        .iter()
        .map(|t| t.log_prob().ok_or_else(|| Error::usage("rollout lacks log-probabilities")))
        .collect::<Result<_>>()?;
    Ok(RolloutGroup { cond, trajectories, raw, rewards, old_log_probs })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterLog {
    pub iter: u64,
    /// Composite against the fixed reference statistics (0 without one).
    pub mean_reward: f64,
    pub mean_deviation: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
    pub lr: f64,
    /// Mean ratio over the first minibatch, before any update this
    /// iteration; exactly 1 for on-policy data.
    pub first_ratio: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub log: Vec<IterLog>,
    pub warnings: Vec<String>,
}

/// GRPO from iteration `start` to `cfg.iterations`. Every draw comes from a
/// per-iteration stream, so resumed runs replay an uninterrupted one.
pub fn train_tpm(
    setup: &TrainSetup<'_>,
    tpm: &mut Tpm,
    opt: &mut AdamState,
    cfg: &TrainConfig,
    streams: &Streams,
    start: u64,
    mut on_iter: impl FnMut(&IterLog, &Tpm, &AdamState) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    setup.sampler.validate()?;
    setup.reward.validate()?;
    let bound = match setup.sampler.bound {
        BoundMode::Standard => 0.5 * setup.sampler.gamma,
        BoundMode::Lifted => setup.sampler.gamma,
    };
    let mut report = TrainReport::default();
    let mut saturated_run = 0u64;
    let mut warned_saturation = false;
    for iter in start..cfg.iterations {
        let group = collect_group(setup, tpm, cfg.group_size, streams, iter)?;
        let adv = group_advantages(&group.rewards, 1e-8)?;
        let mut order: Vec<usize> = (0..cfg.group_size).collect();
        let (mut clipped, mut terms, mut norms, mut first_ratio) = (0usize, 0usize, Vec::new(), f64::NAN);
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut streams.stream(Domain::Shuffle, iter * cfg.epochs as u64 + epoch as u64));
            for mb in order.chunks(cfg.minibatch) {
                let mut tape = Tape::new();
                let mut objs = Vec::with_capacity(mb.len());
                let mut ratios = Vec::with_capacity(mb.len());
                for &i in mb {
                    let lp = trajectory_logprob(&mut tape, tpm, &group.trajectories[i])?;
                    let term = ppo_term(tape.scalar(lp), group.old_log_probs[i], adv[i], cfg.clip);
                    if term.overflow {
                        report.warnings.push(format!(
                            "iteration {iter}: log-ratio beyond {} clamped",
                            super::MAX_LOG_RATIO
                        ));
                    }
                    clipped += usize::from(term.ratio < 1.0 - cfg.clip || term.ratio > 1.0 + cfg.clip);
                    terms += 1;
                    ratios.push(term.ratio);
                    objs.push(tape.ppo_clip(lp, group.old_log_probs[i], adv[i], cfg.clip)?);
                }
                if first_ratio.is_nan() {
                    first_ratio = ratios.iter().sum::<f64>() / ratios.len() as f64;
                }
                let all = tape.concat_rows(&objs)?;
                let mean = tape.mean(all)?;
                let loss = tape.scale(mean, -1.0)?;
                tape.backward(loss, tpm.store_mut())?;
                norms.push(global_grad_norm(tpm.store()));
                clip_global_norm(tpm.store_mut(), cfg.max_grad_norm)?;
                adam_step(tpm.store_mut(), opt)?;
            }
        }
        let mean_dev = mean_deviation(&group.trajectories)?;
        let mean_reward = match setup.reference {
            Some(stats) => {
                let z = stats.normalize(&group.raw, setup.reward.eps_z)?;
                composite_reward(&z).iter().sum::<f64>() / cfg.group_size as f64
            }
            None => 0.0,
        };
        let entry = IterLog {
            iter,
            mean_reward,
            mean_deviation: mean_dev,
            clip_fraction: clipped as f64 / terms as f64,
            grad_norm: norms.iter().sum::<f64>() / norms.len() as f64,
            lr: opt.cfg.lr,
            first_ratio,
        };
        if bound > 0.0 && mean_dev.abs() >= 0.98 * bound {
            saturated_run += 1;
        } else {
            saturated_run = 0;
        }
        if saturated_run >= cfg.saturation_window && !warned_saturation {
            warned_saturation = true;
            let msg = format!(
                "iteration {iter}: mean deviation {mean_dev:.4} has sat at its bound {bound} for {} iterations",
                cfg.saturation_window
            );
            log::warn!("{msg}");
            report.warnings.push(msg);
        }
        on_iter(&entry, tpm, opt)?;
        report.log.push(entry);
    }
    Ok(report)
}
