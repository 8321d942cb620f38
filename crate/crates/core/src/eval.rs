//! Fixed-seed evaluation batches.
//!
//! Rollout `i` of an evaluation batch always uses stream `i` of the
//! evaluation seed and condition `i mod classes`, so different samplers see
//! identical initial noise and can be compared pairwise. Composites are
//! normalized with statistics of the synchronous baseline on the same
//! batch: a batch-internal z-score would average to zero for every sampler.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::flow::{Condition, Target, TimeGrid, VelocityField};
use crate::rewards::{composite_reward, BatchScores, RewardSpec, ScoreStats};
use crate::rng::{Domain, Streams};
use crate::sampler::{
    mean_abs_deviation, mean_deviation, sample_alternative, sample_async, sample_sync, RatioSource,
    SamplerConfig, Trajectory, VelocityScale,
};

#[derive(Clone, Copy)]
pub enum Mode<'a> {
    Sync,
    Async(RatioSource<'a>),
    Alternative(VelocityScale<'a>),
}

pub fn eval_condition(i: usize, classes: usize) -> Condition {
    Condition::Class(i % classes)
}

pub fn rollout_batch(
    field: &dyn VelocityField,
    mode: Mode<'_>,
    grid: &TimeGrid,
    cfg: &SamplerConfig,
    classes: usize,
    n: usize,
    streams: &Streams,
) -> Result<Vec<Trajectory>> {
    (0..n)
        .map(|i| {
            let mut rng = streams.stream(Domain::Evaluation, i as u64);
            let c = eval_condition(i, classes);
            match mode {
                Mode::Sync => sample_sync(field, grid, c, cfg, &mut rng),
                Mode::Async(src) => sample_async(field, src, grid, c, cfg, &mut rng),
                Mode::Alternative(scale) => sample_alternative(field, scale, grid, c, cfg, &mut rng),
            }
        })
        .collect()
}

/// Raw metric scores of each trajectory's final sample.
pub fn reward_rows(spec: &RewardSpec, target: &Target, trajs: &[Trajectory]) -> Result<BatchScores> {
    let samples: Vec<(&[f64], Condition)> = trajs.iter().map(|t| (t.sample.as_slice(), t.cond)).collect();
    spec.score_batch(&samples, target)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rollouts: usize,
    /// Mean composite against the reference statistics.
    pub composite: f64,
    pub metric_means: Vec<f64>,
    pub mean_deviation: f64,
    pub mean_abs_deviation: f64,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub trajectories: Vec<Trajectory>,
    pub raw: BatchScores,
    pub composites: Vec<f64>,
    pub summary: Summary,
}

pub fn evaluate(
    trajectories: Vec<Trajectory>,
    spec: &RewardSpec,
    target: &Target,
    reference: &ScoreStats,
) -> Result<Evaluation> {
    let raw = reward_rows(spec, target, &trajectories)?;
    let composites = composite_reward(&reference.normalize(&raw, spec.eps_z)?);
    let summary = Summary {
        rollouts: trajectories.len(),
        composite: composites.iter().sum::<f64>() / composites.len() as f64,
        metric_means: raw.column_means(),
        mean_deviation: mean_deviation(&trajectories)?,
        mean_abs_deviation: mean_abs_deviation(&trajectories)?,
    };
    Ok(Evaluation { trajectories, raw, composites, summary })
}

/// Statistics of the synchronous baseline on the evaluation batch.
pub fn reference_stats(
    field: &dyn VelocityField,
    grid: &TimeGrid,
    cfg: &SamplerConfig,
    spec: &RewardSpec,
    target: &Target,
    n: usize,
    streams: &Streams,
) -> Result<ScoreStats> {
    let trajs = rollout_batch(field, Mode::Sync, grid, cfg, target.classes(), n, streams)?;
    ScoreStats::of(&reward_rows(spec, target, &trajs)?)
}
