use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::analytic::{velocity_mixture, velocity_point};
use super::target::{Condition, Target};
use crate::error::{Error, Result};
use crate::nn::layers::sinusoidal;
use crate::nn::{adam_step, clip_global_norm, AdamState, Mlp, ParamId, ParameterStore, Tape, Tensor, Var};
use crate::rng::{Domain, Streams};

/// Anything that can be queried for a velocity at `(x, t, c)`.
pub trait VelocityField: Sync {
    fn dim(&self) -> usize;

    fn velocity(&self, x: &[f64], t: f64, c: Condition) -> Result<Vec<f64>>;

    /// Conditional and unconditional velocities together. Implementations
    /// may batch the two queries.
    fn velocity_pair(&self, x: &[f64], t: f64, c: Condition) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((self.velocity(x, t, c)?, self.velocity(x, t, Condition::Null)?))
    }
}

/// Closed-form field of a [`Target`]. A class condition selects its
/// component; `Null` uses the whole mixture.
#[derive(Clone, Debug)]
pub struct AnalyticField {
    target: Target,
    points: bool,
}

impl AnalyticField {
    pub fn new(target: Target) -> Result<Self> {
        target.validate()?;
        let points = target.variances.iter().flatten().all(|v| *v == 0.0);
        Ok(AnalyticField { target, points })
    }

    pub fn target(&self) -> &Target {
        &self.target
    }
}

impl VelocityField for AnalyticField {
    fn dim(&self) -> usize {
        self.target.dim()
    }

    fn velocity(&self, x: &[f64], t: f64, c: Condition) -> Result<Vec<f64>> {
        match c {
            Condition::Class(k) if self.points && k < self.target.classes() => {
                velocity_point(x, t, &self.target.means[k])
            }
            _ => velocity_mixture(x, t, &self.target.conditional(c)?),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldConfig {
    pub dim: usize,
    pub classes: usize,
    pub hidden: usize,
    pub layers: usize,
    pub time_freqs: usize,
    pub cond_dim: usize,
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.classes == 0 || self.hidden == 0 || self.layers == 0 || self.time_freqs == 0 {
            return Err(Error::config("field sizes must be positive"));
        }
        if self.cond_dim == 0 {
            return Err(Error::config("condition embedding width must be positive"));
        }
        Ok(())
    }
}

/// MLP over `[x, sinusoidal(t), class embedding]`. The unconditional branch
/// uses a zero embedding.
#[derive(Clone, Debug)]
pub struct LearnedField {
    cfg: FieldConfig,
    store: ParameterStore,
    cond: ParamId,
    mlp: Mlp,
}

impl LearnedField {
    pub fn init(cfg: FieldConfig, streams: &Streams) -> Result<Self> {
        cfg.validate()?;
        let mut rng = streams.stream(Domain::Init, 1);
        let mut store = ParameterStore::new();
        let cond = store.insert_scaled_uniform("field.cond", &[cfg.classes, cfg.cond_dim], 1.0, &mut rng)?;
        let mut widths = vec![cfg.dim + 2 * cfg.time_freqs + cfg.cond_dim];
        widths.extend(std::iter::repeat_n(cfg.hidden, cfg.layers));
        widths.push(cfg.dim);
        let mlp = Mlp::init(&mut store, "field.mlp", &widths, false, &mut rng)?;
        Ok(LearnedField { cfg, store, cond, mlp })
    }

    pub fn config(&self) -> FieldConfig {
        self.cfg
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore {
        &mut self.store
    }

    /// Records the batched forward pass on `tape`; one row per query.
    pub fn apply(&self, tape: &mut Tape, xs: &[&[f64]], ts: &[f64], cs: &[Condition]) -> Result<Var> {
        let n = xs.len();
        if n == 0 || ts.len() != n || cs.len() != n {
            return Err(Error::shape("field batch inputs must be non-empty and equally long"));
        }
        let d = self.cfg.dim;
        let mut xdata = Vec::with_capacity(n * d);
        let mut tdata = Vec::with_capacity(n * 2 * self.cfg.time_freqs);
        let mut ids = Vec::with_capacity(n);
        for i in 0..n {
            if xs[i].len() != d {
                return Err(Error::shape(format!("latent of dim {} for field of dim {d}", xs[i].len())));
            }
            crate::error::ensure_finite(xs[i], "field input")?;
            if !(0.0..=1.0).contains(&ts[i]) {
                return Err(Error::domain(format!("time {} outside [0, 1]", ts[i])));
            }
            xdata.extend_from_slice(xs[i]);
            tdata.extend(sinusoidal(ts[i], self.cfg.time_freqs));
            ids.push(match cs[i] {
                Condition::Null => None,
                Condition::Class(k) if k < self.cfg.classes => Some(k),
                Condition::Class(k) => return Err(Error::domain(format!("class {k} out of range"))),
            });
        }
        let x = tape.input(Tensor::matrix(n, d, xdata)?);
        let te = tape.input(Tensor::matrix(n, 2 * self.cfg.time_freqs, tdata)?);
        let table = tape.param(&self.store, self.cond);
        let ce = tape.gather_rows(table, &ids)?;
        let h = tape.concat_cols(&[x, te, ce])?;
        let out = self.mlp.apply(tape, &self.store, h)?;
        tape.value(out).ensure_finite("field output")?;
        Ok(out)
    }

    pub fn load(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        self.store.load_values(named)
    }
}

impl VelocityField for LearnedField {
    fn dim(&self) -> usize {
        self.cfg.dim
    }

    fn velocity(&self, x: &[f64], t: f64, c: Condition) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let out = self.apply(&mut tape, &[x], &[t], &[c])?;
        Ok(tape.value(out).data().to_vec())
    }

    fn velocity_pair(&self, x: &[f64], t: f64, c: Condition) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let out = self.apply(&mut tape, &[x, x], &[t, t], &[c, Condition::Null])?;
        let v = tape.value(out);
        Ok((v.row_slice(0).to_vec(), v.row_slice(1).to_vec()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldTrainConfig {
    pub iterations: u64,
    pub batch: usize,
    pub lr: f64,
    /// Probability of replacing the class with `Null` for a training sample.
    pub uncond_prob: f64,
    pub max_grad_norm: f64,
}

impl Default for FieldTrainConfig {
    fn default() -> Self {
        FieldTrainConfig { iterations: 2000, batch: 256, lr: 1e-3, uncond_prob: 0.1, max_grad_norm: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldTrainLog {
    pub iter: u64,
    pub loss: f64,
}

/// Runs flow-matching regression from iteration `start` up to
/// `cfg.iterations`. Each iteration draws its batch from its own stream, so
/// resuming at `start` replays exactly what an uninterrupted run would do.
pub fn pretrain_field(
    field: &mut LearnedField,
    target: &Target,
    cfg: &FieldTrainConfig,
    streams: &Streams,
    opt: &mut AdamState,
    start: u64,
    mut on_iter: impl FnMut(&FieldTrainLog, &LearnedField, &AdamState) -> Result<()>,
) -> Result<Vec<FieldTrainLog>> {
    target.validate()?;
    if target.dim() != field.cfg.dim || target.classes() != field.cfg.classes {
        return Err(Error::config("field and target disagree on dimension or class count"));
    }
    if cfg.batch == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    let d = target.dim();
    let mut log = Vec::new();
    for iter in start..cfg.iterations {
        let mut rng = streams.stream(Domain::FieldBatch, iter);
        let mut xs = Vec::with_capacity(cfg.batch);
        let mut ts = Vec::with_capacity(cfg.batch);
        let mut cs = Vec::with_capacity(cfg.batch);
        let mut ys = Vec::with_capacity(cfg.batch * d);
        for _ in 0..cfg.batch {
            let k = rng.random_range(0..target.classes());
            let c = if rng.random::<f64>() < cfg.uncond_prob { Condition::Null } else { Condition::Class(k) };
            let x0: Vec<f64> = (0..d)
                .map(|i| target.means[k][i] + target.variances[k][i].sqrt() * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let eps: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let t = 1.0 - rng.random::<f64>();
            xs.push(super::interpolate(&x0, &eps, t)?);
            ys.extend(super::target_velocity(&x0, &eps)?);
            ts.push(t);
            cs.push(c);
        }
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let mut tape = Tape::new();
        let pred = field.apply(&mut tape, &refs, &ts, &cs)?;
        let y = tape.input(Tensor::matrix(cfg.batch, d, ys)?);
        let diff = tape.sub(pred, y)?;
        let sq = tape.mul(diff, diff)?;
        let loss = tape.mean(sq)?;
        let lv = tape.scalar(loss);
        if !lv.is_finite() {
            return Err(Error::numeric(format!("field loss became {lv} at iteration {iter}")));
        }
        tape.backward(loss, &mut field.store)?;
        clip_global_norm(&mut field.store, cfg.max_grad_norm)?;
        adam_step(&mut field.store, opt)?;
        let entry = FieldTrainLog { iter, loss: lv };
        log.push(entry);
        on_iter(&entry, field, opt)?;
        if start == 0 && iter == 99 {
            check_loss_decreased(&log)?;
        }
    }
    Ok(log)
}

fn check_loss_decreased(log: &[FieldTrainLog]) -> Result<()> {
    let mean = |s: &[FieldTrainLog]| s.iter().map(|e| e.loss).sum::<f64>() / s.len() as f64;
    let (head, tail) = (mean(&log[..10]), mean(&log[log.len() - 10..]));
    if tail >= head {
        return Err(Error::numeric(format!(
            "field loss did not decrease over the first 100 iterations (mean {head:.4e} -> {tail:.4e}); \
             check the learning rate and target scale"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> FieldConfig {
        FieldConfig { dim: 2, classes: 2, hidden: 16, layers: 2, time_freqs: 4, cond_dim: 3 }
    }

    #[test]
    fn zero_final_layer_outputs_zero() {
        let mut f = LearnedField::init(small_cfg(), &Streams::new(1)).unwrap();
        let names: Vec<String> = f.store().names().filter(|n| n.contains(".l2.")).map(String::from).collect();
        for n in names {
            let id = f.store().id(&n).unwrap();
            f.store_mut().value_mut(id).data_mut().fill(0.0);
        }
        let v = f.velocity(&[0.3, -0.2], 0.5, Condition::Class(1)).unwrap();
        assert_eq!(v, vec![0.0, 0.0]);
    }

    #[test]
    fn pair_matches_separate_queries() {
        let f = LearnedField::init(small_cfg(), &Streams::new(2)).unwrap();
        let x = [0.1, 0.9];
        let (c, u) = f.velocity_pair(&x, 0.3, Condition::Class(0)).unwrap();
        let c2 = f.velocity(&x, 0.3, Condition::Class(0)).unwrap();
        let u2 = f.velocity(&x, 0.3, Condition::Null).unwrap();
        for (a, b) in c.iter().zip(&c2).chain(u.iter().zip(&u2)) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let f = LearnedField::init(small_cfg(), &Streams::new(2)).unwrap();
        assert!(matches!(f.velocity(&[0.0], 0.5, Condition::Null), Err(Error::Shape(_))));
        assert!(matches!(f.velocity(&[0.0, f64::NAN], 0.5, Condition::Null), Err(Error::Numeric(_))));
        assert!(f.velocity(&[0.0, 0.0], 0.5, Condition::Class(7)).is_err());
    }

    #[test]
    fn pretraining_reduces_loss() {
        let target = Target::symmetric_pair(2, 1.0, 0.05);
        let mut f = LearnedField::init(small_cfg(), &Streams::new(3)).unwrap();
        let cfg = FieldTrainConfig { iterations: 150, batch: 64, lr: 3e-3, ..Default::default() };
        let mut opt = AdamState::new(crate::nn::AdamConfig::with_lr(cfg.lr), f.store()).unwrap();
        let log = pretrain_field(&mut f, &target, &cfg, &Streams::new(3), &mut opt, 0, |_, _, _| Ok(())).unwrap();
        assert_eq!(log.len(), 150);
        assert!(log[140..].iter().map(|e| e.loss).sum::<f64>() < log[..10].iter().map(|e| e.loss).sum::<f64>());
    }

    #[test]
    fn analytic_field_dispatches_on_condition() {
        let target = Target::symmetric_pair(1, 2.0, 0.0);
        let f = AnalyticField::new(target).unwrap();
        assert_eq!(f.velocity(&[1.0], 0.5, Condition::Class(1)).unwrap(), vec![-2.0]);
        assert_eq!(f.velocity(&[0.0], 0.5, Condition::Null).unwrap(), vec![0.0]);
    }
}
