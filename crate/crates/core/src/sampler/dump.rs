//! Line-delimited JSON trajectory dumps: one object per executed step, then
//! a trailer with the final sample and run metadata.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{BoundMode, FinalStep, StepRecord, Trajectory};
use crate::error::{Error, Result};
use crate::flow::Condition;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trailer {
    pub cond: Condition,
    pub noise: Vec<f64>,
    pub sample: Vec<f64>,
    pub final_step: Option<FinalStep>,
    pub reward: Option<f64>,
    pub guidance: f64,
    pub gamma: f64,
    pub bound: BoundMode,
    pub grid: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum DumpLine {
    Step(StepRecord),
    Trailer(Trailer),
}

pub fn write_trajectory_jsonl(
    traj: &Trajectory,
    cfg: &super::SamplerConfig,
    grid: &crate::flow::TimeGrid,
    out: &mut impl Write,
) -> Result<()> {
    for s in &traj.steps {
        serde_json::to_writer(&mut *out, &DumpLine::Step(s.clone()))?;
        out.write_all(b"\n")?;
    }
    let trailer = Trailer {
        cond: traj.cond,
        noise: traj.noise.clone(),
        sample: traj.sample.clone(),
        final_step: traj.final_step.clone(),
        reward: traj.reward,
        guidance: cfg.guidance,
        gamma: cfg.gamma,
        bound: cfg.bound,
        grid: grid.times().to_vec(),
    };
    serde_json::to_writer(&mut *out, &DumpLine::Trailer(trailer))?;
    out.write_all(b"\n")?;
    Ok(())
}

/// Parses a dump, checking that steps are numbered consecutively from zero
/// and that exactly one trailer closes the file.
pub fn parse_trajectory_jsonl(text: &str) -> Result<(Vec<StepRecord>, Trailer)> {
    let mut steps = Vec::new();
    let mut trailer = None;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        if trailer.is_some() {
            return Err(Error::format(format!("line {}: content after the trailer", i + 1)));
        }
        let parsed: DumpLine =
            serde_json::from_str(line).map_err(|e| Error::format(format!("line {}: {e}", i + 1)))?;
        match parsed {
            DumpLine::Step(s) => {
                if s.k != steps.len() {
                    return Err(Error::format(format!("line {}: expected step {}, found {}", i + 1, steps.len(), s.k)));
                }
                steps.push(s);
            }
            DumpLine::Trailer(t) => trailer = Some(t),
        }
    }
    let trailer = trailer.ok_or_else(|| Error::format("dump has no trailer"))?;
    Ok((steps, trailer))
}
