//! Synchronous and asynchronous Euler samplers.
//!
//! In the asynchronous sampler the latent always advances by the grid
//! interval `t_{k+1} - t_k`; only the time *fed to the field* moves. That
//! query time is `t*_{k+1} = t_{k+1} + D (t_{k+1} - t_k)` with the deviation
//! `D` set by a step ratio `r` in `[0, 1]`, so `r = 0.5` (or `gamma = 0`)
//! reproduces the synchronous schedule bit for bit.

mod dump;

pub use dump::{parse_trajectory_jsonl, write_trajectory_jsonl, DumpLine, Trailer};

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{clean_estimate, Condition, TimeGrid, VelocityField};
use crate::rng::Rng;
use crate::tpm::{BetaParams, TimestepPolicy, TpmInput};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundMode {
    /// `D = gamma (r - 0.5)`, so `|D| <= gamma / 2`.
    Standard,
    /// `D = gamma (2r - 1)`, so `|D| <= gamma`.
    Lifted,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    /// Classifier-free guidance scale.
    pub guidance: f64,
    /// Maximum number of asynchronous steps.
    pub k_max: usize,
    /// Floor for query times and early-termination threshold.
    pub sigma_min: f64,
    pub gamma: f64,
    pub bound: BoundMode,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { guidance: 5.0, k_max: 10, sigma_min: 1e-3, gamma: 1.0, bound: BoundMode::Standard }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.guidance.is_finite() {
            return Err(Error::config("guidance scale must be finite"));
        }
        if self.k_max == 0 {
            return Err(Error::config("step budget must be at least 1"));
        }
        if !(self.sigma_min > 0.0 && self.sigma_min < 1.0) {
            return Err(Error::config(format!("sigma_min must lie in (0, 1), got {}", self.sigma_min)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::config(format!("gamma must be non-negative, got {}", self.gamma)));
        }
        Ok(())
    }
}

/// How the asynchronous sampler obtains its step ratios.
#[derive(Clone, Copy)]
pub enum RatioSource<'a> {
    /// Sample from the policy's Beta when `stochastic`, else take its mode.
    Policy { policy: &'a dyn TimestepPolicy, stochastic: bool },
    /// The same ratio at every step.
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub k: usize,
    pub t: f64,
    pub t_next: f64,
    /// Query time used for this step's velocity.
    pub t_star: f64,
    /// Query time proposed for the next step, after the floor.
    pub t_star_next: f64,
    pub clamped: bool,
    pub params: Option<BetaParams>,
    pub ratio: Option<f64>,
    pub log_prob: Option<f64>,
    pub deviation: f64,
    /// Interval actually applied to the latent.
    pub dt: f64,
    pub x: Vec<f64>,
    pub x_next: Vec<f64>,
    pub velocity: Vec<f64>,
    pub clean: Vec<f64>,
}

impl StepRecord {
    pub fn tpm_input(&self, cond: Condition) -> TpmInput<'_> {
        TpmInput { x: &self.x, v: &self.velocity, t_star: self.t_star, clean: &self.clean, cond, step: self.k }
    }
}

/// Closing Euler step from the last reached grid time to zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalStep {
    pub t: f64,
    pub t_star: f64,
    pub velocity: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub cond: Condition,
    pub noise: Vec<f64>,
    pub steps: Vec<StepRecord>,
    pub final_step: Option<FinalStep>,
    pub sample: Vec<f64>,
    pub reward: Option<f64>,
}

impl Trajectory {
    pub fn log_prob(&self) -> Option<f64> {
        self.steps.iter().map(|s| s.log_prob).sum()
    }

    pub fn mean_deviation(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        self.steps.iter().map(|s| s.deviation).sum::<f64>() / self.steps.len() as f64
    }
}

/// `v_u + w (v_c - v_u)`; the unconditional branch alone for `Null`.
pub fn guided_velocity(field: &dyn VelocityField, x: &[f64], t: f64, c: Condition, w: f64) -> Result<Vec<f64>> {
    if c == Condition::Null {
        return field.velocity(x, t, c);
    }
    let (vc, vu) = field.velocity_pair(x, t, c)?;
    if vc.len() != x.len() || vu.len() != x.len() {
        return Err(Error::shape("field returned a velocity of the wrong dimension"));
    }
    let v: Vec<f64> = vu.iter().zip(&vc).map(|(u, c)| u + w * (c - u)).collect();
    crate::error::ensure_finite(&v, "guided velocity")?;
    Ok(v)
}

pub fn deviation(r: f64, gamma: f64, bound: BoundMode) -> f64 {
    match bound {
        BoundMode::Standard => gamma * (r - 0.5),
        BoundMode::Lifted => gamma * (2.0 * r - 1.0),
    }
}

/// Next query time and whether the floor was hit. Written as an offset from
/// `t_next` so that zero deviation returns `t_next` exactly.
pub fn pseudo_timestep(t: f64, t_next: f64, r: f64, cfg: &SamplerConfig) -> Result<(f64, bool)> {
    if !(t > t_next) {
        return Err(Error::domain(format!("grid times must decrease, got {t} then {t_next}")));
    }
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::domain(format!("ratio {r} outside [0, 1]")));
    }
    let raw = t_next + deviation(r, cfg.gamma, cfg.bound) * (t_next - t);
    if raw < cfg.sigma_min {
        Ok((cfg.sigma_min, true))
    } else {
        Ok((raw.min(1.0), false))
    }
}

fn draw_noise(dim: usize, rng: &mut Rng) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Plain Euler integration over the grid.
pub fn sample_sync(
    field: &dyn VelocityField,
    grid: &TimeGrid,
    c: Condition,
    cfg: &SamplerConfig,
    rng: &mut Rng,
) -> Result<Trajectory> {
    let noise = draw_noise(field.dim(), rng);
    let mut x = noise.clone();
    let ts = grid.times();
    let mut steps = Vec::with_capacity(grid.steps());
    for k in 0..grid.steps() {
        let (t, tn) = (ts[k], ts[k + 1]);
        let v = guided_velocity(field, &x, t, c, cfg.guidance).map_err(|e| e.at_step(k))?;
        let dt = tn - t;
        let x_next: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + dt * b).collect();
        crate::error::ensure_finite(&x_next, "latent").map_err(|e| e.at_step(k))?;
        steps.push(StepRecord {
            k,
            t,
            t_next: tn,
            t_star: t,
            t_star_next: tn,
            clamped: false,
            params: None,
            ratio: None,
            log_prob: None,
            deviation: 0.0,
            dt,
            clean: clean_estimate(&x, t, &v)?,
            x: x.clone(),
            x_next: x_next.clone(),
            velocity: v,
        });
        x = x_next;
    }
    Ok(Trajectory { cond: c, noise, steps, final_step: None, sample: x, reward: None })
}

/// Asynchronous sampling: the field is queried at the drifting time `t*`
/// while the latent follows the grid.
pub fn sample_async(
    field: &dyn VelocityField,
    source: RatioSource<'_>,
    grid: &TimeGrid,
    c: Condition,
    cfg: &SamplerConfig,
    rng: &mut Rng,
) -> Result<Trajectory> {
    cfg.validate()?;
    if let RatioSource::Fixed(r) = source {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::domain(format!("fixed ratio {r} outside [0, 1]")));
        }
    }
    let noise = draw_noise(field.dim(), rng);
    let mut x = noise.clone();
    let ts = grid.times();
    let n = grid.steps().min(cfg.k_max);
    let mut t_star = ts[0];
    let mut reached = ts[0];
    let mut steps = Vec::with_capacity(n);
    for k in 0..n {
        let step = |e: Error| e.at_step(k);
        let (t, tn) = (ts[k], ts[k + 1]);
        let v = guided_velocity(field, &x, t_star, c, cfg.guidance).map_err(step)?;
        let clean = clean_estimate(&x, t, &v).map_err(step)?;
        let (params, r, log_prob) = match source {
            RatioSource::Fixed(r) => (None, r, None),
            RatioSource::Policy { policy, stochastic } => {
                let input = TpmInput { x: &x, v: &v, t_star, clean: &clean, cond: c, step: k };
                let p = policy.beta_params(&input).map_err(step)?;
                let r = if stochastic { p.sample(rng).map_err(step)? } else { p.mode().map_err(step)? };
                let lp = if stochastic { Some(p.log_prob(r).map_err(step)?) } else { None };
                (Some(p), r, lp)
            }
        };
        let (t_star_next, clamped) = pseudo_timestep(t, tn, r, cfg).map_err(step)?;
        let dt = tn - t;
        let x_next: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + dt * b).collect();
        crate::error::ensure_finite(&x_next, "latent").map_err(step)?;
        steps.push(StepRecord {
            k,
            t,
            t_next: tn,
            t_star,
            t_star_next,
            clamped,
            params,
            ratio: Some(r),
            log_prob,
            deviation: deviation(r, cfg.gamma, cfg.bound),
            dt,
            x: x.clone(),
            x_next: x_next.clone(),
            velocity: v,
            clean,
        });
        x = x_next;
        t_star = t_star_next;
        reached = tn;
        if tn < cfg.sigma_min {
            break;
        }
    }
    let final_step = if reached > 0.0 {
        let v = guided_velocity(field, &x, t_star, c, cfg.guidance).map_err(|e| e.at_step(steps.len()))?;
        x = x.iter().zip(&v).map(|(a, b)| a - reached * b).collect();
        crate::error::ensure_finite(&x, "final latent")?;
        Some(FinalStep { t: reached, t_star, velocity: v })
    } else {
        None
    };
    Ok(Trajectory { cond: c, noise, steps, final_step, sample: x, reward: None })
}

/// Velocity-magnitude scaling, the comparison control knob.
#[derive(Clone, Copy)]
pub enum VelocityScale<'a> {
    Constant(f64),
    /// `0.5 + r` with `r` from the policy.
    Policy { policy: &'a dyn TimestepPolicy, stochastic: bool },
}

/// Synchronous sampling with the velocity multiplied by a per-step factor.
pub fn sample_alternative(
    field: &dyn VelocityField,
    scale: VelocityScale<'_>,
    grid: &TimeGrid,
    c: Condition,
    cfg: &SamplerConfig,
    rng: &mut Rng,
) -> Result<Trajectory> {
    if let VelocityScale::Constant(w) = scale {
        if !(w > 0.0 && w.is_finite()) {
            return Err(Error::domain(format!("velocity scale must be positive, got {w}")));
        }
    }
    let noise = draw_noise(field.dim(), rng);
    let mut x = noise.clone();
    let ts = grid.times();
    let mut steps = Vec::with_capacity(grid.steps());
    for k in 0..grid.steps() {
        let step = |e: Error| e.at_step(k);
        let (t, tn) = (ts[k], ts[k + 1]);
        let v = guided_velocity(field, &x, t, c, cfg.guidance).map_err(step)?;
        let clean = clean_estimate(&x, t, &v).map_err(step)?;
        let (params, w, lp) = match scale {
            VelocityScale::Constant(w) => (None, w, None),
            VelocityScale::Policy { policy, stochastic } => {
                let input = TpmInput { x: &x, v: &v, t_star: t, clean: &clean, cond: c, step: k };
                let p = policy.beta_params(&input).map_err(step)?;
                let r = if stochastic { p.sample(rng).map_err(step)? } else { p.mode().map_err(step)? };
                let lp = if stochastic { Some(p.log_prob(r).map_err(step)?) } else { None };
                (Some(p), 0.5 + r, lp)
            }
        };
        let dt = tn - t;
        let x_next: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + dt * b * w).collect();
        crate::error::ensure_finite(&x_next, "latent").map_err(step)?;
        steps.push(StepRecord {
            k,
            t,
            t_next: tn,
            t_star: t,
            t_star_next: tn,
            clamped: false,
            params,
            ratio: Some(w - 0.5),
            log_prob: lp,
            deviation: w - 1.0,
            dt,
            x: x.clone(),
            x_next: x_next.clone(),
            velocity: v,
            clean,
        });
        x = x_next;
    }
    Ok(Trajectory { cond: c, noise, steps, final_step: None, sample: x, reward: None })
}

/// Mean per-step deviation over a batch of trajectories.
pub fn mean_deviation(trajs: &[Trajectory]) -> Result<f64> {
    let (n, s) = trajs
        .iter()
        .flat_map(|t| t.steps.iter())
        .fold((0usize, 0.0), |(n, s), st| (n + 1, s + st.deviation));
    if n == 0 {
        return Err(Error::domain("mean deviation of an empty batch"));
    }
    Ok(s / n as f64)
}

/// Mean per-step absolute deviation.
pub fn mean_abs_deviation(trajs: &[Trajectory]) -> Result<f64> {
    let (n, s) = trajs
        .iter()
        .flat_map(|t| t.steps.iter())
        .fold((0usize, 0.0), |(n, s), st| (n + 1, s + st.deviation.abs()));
    if n == 0 {
        return Err(Error::domain("mean deviation of an empty batch"));
    }
    Ok(s / n as f64)
}
