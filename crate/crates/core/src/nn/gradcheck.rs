//! Central-difference verification of tape gradients.

use rand::seq::index::sample;

use super::store::ParameterStore;
use super::tape::{Tape, Var};
use crate::error::Result;
use crate::rng::Rng;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `max |analytic - numeric| / max(|analytic|_inf, |numeric|_inf, 1e-12)`
    /// over the probed coordinates.
    pub rel_error: f64,
    pub probed: usize,
    pub worst: String,
}

/// Compares the tape gradient of `loss` with central differences of step
/// `h`. At most `max_probes` scalar coordinates are perturbed, chosen with
/// `rng` when the store holds more.
pub fn check_gradients<F>(
    store: &mut ParameterStore,
    loss: F,
    h: f64,
    max_probes: usize,
    rng: &mut Rng,
) -> Result<GradCheck>
where
    F: Fn(&ParameterStore, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let l = loss(store, &mut tape)?;
    tape.backward(l, store)?;

    let mut coords = Vec::new();
    for id in store.ids() {
        for k in 0..store.value(id).len() {
            coords.push((id, k));
        }
    }
    let chosen: Vec<_> = if coords.len() <= max_probes {
        coords
    } else {
        let mut idx = sample(rng, coords.len(), max_probes).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| coords[i]).collect()
    };

    let eval = |s: &ParameterStore| -> Result<f64> {
        let mut t = Tape::new();
        let v = loss(s, &mut t)?;
        Ok(t.scalar(v))
    };
    let mut analytic = Vec::with_capacity(chosen.len());
    let mut numeric = Vec::with_capacity(chosen.len());
    for &(id, k) in &chosen {
        analytic.push(store.grad(id).data()[k]);
        let orig = store.value(id).data()[k];
        store.value_mut(id).data_mut()[k] = orig + h;
        let up = eval(store)?;
        store.value_mut(id).data_mut()[k] = orig - h;
        let down = eval(store)?;
        store.value_mut(id).data_mut()[k] = orig;
        numeric.push((up - down) / (2.0 * h));
    }
    let inf = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let denom = inf(&analytic).max(inf(&numeric)).max(1e-12);
    let (mut rel_error, mut worst) = (0.0, 0);
    for i in 0..chosen.len() {
        let e = (analytic[i] - numeric[i]).abs() / denom;
        if e >= rel_error {
            rel_error = e;
            worst = i;
        }
    }
    let worst = chosen
        .get(worst)
        .map(|&(id, k)| format!("{}[{k}]", store.name(id)))
        .unwrap_or_default();
    Ok(GradCheck { rel_error, probed: chosen.len(), worst })
}
