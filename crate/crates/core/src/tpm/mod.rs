//! The timestep predictor: a small transformer that reads the sampler state
//! and emits Beta parameters for the next step ratio.
//!
//! Token layout, top to bottom: patches of the latent, of the velocity and
//! of the clean estimate; one condition token; one token each for the
//! current query time and the normalized step index; then the learned global
//! tokens whose encoder outputs feed the read-out head.

pub mod beta;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::Condition;
use crate::nn::layers::sinusoidal;
use crate::nn::{Dense, Encoder, EncoderConfig, Mlp, ParamId, ParameterStore, Tape, Tensor, Var};
use crate::rng::{Domain, Streams};
pub use beta::{phi, BetaParams};

/// Everything the predictor sees at step `step`.
#[derive(Clone, Copy, Debug)]
pub struct TpmInput<'a> {
    pub x: &'a [f64],
    pub v: &'a [f64],
    pub t_star: f64,
    pub clean: &'a [f64],
    pub cond: Condition,
    pub step: usize,
}

/// A source of Beta distributions over the step ratio.
pub trait TimestepPolicy: Sync {
    fn beta_params(&self, input: &TpmInput<'_>) -> Result<BetaParams>;
}

/// Ignores its input.
#[derive(Clone, Copy, Debug)]
pub struct ConstantPolicy(pub BetaParams);

impl TimestepPolicy for ConstantPolicy {
    fn beta_params(&self, _: &TpmInput<'_>) -> Result<BetaParams> {
        Ok(self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TpmConfig {
    pub dim: usize,
    pub classes: usize,
    pub patch: usize,
    /// Zero-pad the last patch when `dim` is not a multiple of `patch`.
    pub pad: bool,
    pub encoder: EncoderConfig,
    pub global_tokens: usize,
    pub head_hidden: usize,
    pub time_freqs: usize,
    /// Step budget used to normalize the step index.
    pub k_max: usize,
    pub positional: bool,
}

impl TpmConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.dim == 0 || self.patch == 0 || self.classes == 0 {
            return Err(Error::config("predictor dim, patch and class count must be positive"));
        }
        if !self.dim.is_multiple_of(self.patch) && !self.pad {
            return Err(Error::config(format!(
                "dim {} is not divisible by patch size {} (enable padding)",
                self.dim, self.patch
            )));
        }
        if self.global_tokens == 0 || self.head_hidden == 0 || self.time_freqs == 0 || self.k_max == 0 {
            return Err(Error::config("predictor head sizes and step budget must be positive"));
        }
        Ok(())
    }

    pub fn patches(&self) -> usize {
        self.dim.div_ceil(self.patch)
    }

    pub fn tokens(&self) -> usize {
        3 * self.patches() + 3 + self.global_tokens
    }
}

const STREAMS: [&str; 3] = ["x", "v", "clean"];

#[derive(Clone, Debug)]
struct Ids {
    proj: [ParamId; 3],
    kind: [ParamId; 3],
    cond: ParamId,
    time: Dense,
    step: Dense,
    global: ParamId,
    pos: ParamId,
}

#[derive(Clone, Debug)]
pub struct Tpm {
    cfg: TpmConfig,
    store: ParameterStore,
    ids: Ids,
    encoder: Encoder,
    head: Mlp,
}

impl Tpm {
    /// Fresh predictor; the last read-out layer starts at zero so every
    /// untrained prediction is Beta(2, 2), whose mode is the synchronous
    /// ratio 0.5.
    pub fn init(cfg: TpmConfig, streams: &Streams) -> Result<Self> {
        cfg.validate()?;
        let mut rng = streams.stream(Domain::Init, 2);
        let mut s = ParameterStore::new();
        let w = cfg.encoder.width;
        let mut proj = Vec::new();
        let mut kind = Vec::new();
        for name in STREAMS {
            proj.push(s.insert_uniform(format!("tpm.proj.{name}"), &[cfg.patch, w], cfg.patch, &mut rng)?);
            kind.push(s.insert_scaled_uniform(format!("tpm.kind.{name}"), &[1, w], 0.5, &mut rng)?);
        }
        let cond = s.insert_scaled_uniform("tpm.cond", &[cfg.classes, w], 0.5, &mut rng)?;
        let tf = 2 * cfg.time_freqs;
        let time = Dense::init(&mut s, "tpm.time", tf, w, &mut rng)?;
        let step = Dense::init(&mut s, "tpm.step", tf, w, &mut rng)?;
        let global = s.insert_scaled_uniform("tpm.global", &[cfg.global_tokens, w], 0.5, &mut rng)?;
        let pos = s.insert_zeros("tpm.pos", &[cfg.tokens(), w])?;
        let encoder = Encoder::init(&mut s, "tpm.enc", cfg.encoder, &mut rng)?;
        let head = Mlp::init(&mut s, "tpm.head", &[cfg.global_tokens * w, cfg.head_hidden, 2], true, &mut rng)?;
        let ids = Ids {
            proj: [proj[0], proj[1], proj[2]],
            kind: [kind[0], kind[1], kind[2]],
            cond,
            time,
            step,
            global,
            pos,
        };
        Ok(Tpm { cfg, store: s, ids, encoder, head })
    }

    pub fn config(&self) -> TpmConfig {
        self.cfg
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore {
        &mut self.store
    }

    pub fn load(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        self.store.load_values(named)
    }

    fn patch_matrix(&self, v: &[f64], what: &str) -> Result<Tensor> {
        if v.len() != self.cfg.dim {
            return Err(Error::shape(format!("{what} of dim {} for predictor dim {}", v.len(), self.cfg.dim)));
        }
        crate::error::ensure_finite(v, what)?;
        let (p, n) = (self.cfg.patch, self.cfg.patches());
        let mut data = v.to_vec();
        data.resize(n * p, 0.0);
        Tensor::matrix(n, p, data)
    }

    /// Token matrix (`tokens x width`) before the encoder.
    pub fn tokenize(&self, tape: &mut Tape, input: &TpmInput<'_>) -> Result<Var> {
        if !(0.0..=1.0).contains(&input.t_star) {
            return Err(Error::domain(format!("query time {} outside [0, 1]", input.t_star)));
        }
        let s = &self.store;
        let mut rows = Vec::new();
        for (i, (vals, what)) in [(input.x, "latent"), (input.v, "velocity"), (input.clean, "clean estimate")]
            .into_iter()
            .enumerate()
        {
            let m = tape.input(self.patch_matrix(vals, what)?);
            let w = tape.param(s, self.ids.proj[i]);
            let k = tape.param(s, self.ids.kind[i]);
            let h = tape.matmul(m, w)?;
            rows.push(tape.add_row(h, k)?);
        }
        let table = tape.param(s, self.ids.cond);
        let c = match input.cond {
            Condition::Null => None,
            Condition::Class(k) if k < self.cfg.classes => Some(k),
            Condition::Class(k) => return Err(Error::domain(format!("class {k} out of range"))),
        };
        rows.push(tape.gather_rows(table, &[c])?);
        let te = tape.input(Tensor::row(&sinusoidal(input.t_star, self.cfg.time_freqs)));
        rows.push(self.ids.time.apply(tape, s, te)?);
        let frac = input.step as f64 / self.cfg.k_max as f64;
        let se = tape.input(Tensor::row(&sinusoidal(frac, self.cfg.time_freqs)));
        rows.push(self.ids.step.apply(tape, s, se)?);
        rows.push(tape.param(s, self.ids.global));
        let tokens = tape.concat_rows(&rows)?;
        if self.cfg.positional {
            let pos = tape.param(s, self.ids.pos);
            tape.add(tokens, pos)
        } else {
            Ok(tokens)
        }
    }

    /// Records the full forward pass; the result is a `1 x 2` row holding
    /// (alpha, beta).
    pub fn apply(&self, tape: &mut Tape, input: &TpmInput<'_>) -> Result<Var> {
        let tokens = self.tokenize(tape, input)?;
        let enc = self.encoder.apply(tape, &self.store, tokens)?;
        let g = self.cfg.global_tokens;
        let n = self.cfg.tokens();
        let glob = tape.slice_rows(enc, n - g, g)?;
        let flat = tape.reshape(glob, 1, g * self.cfg.encoder.width)?;
        let raw = self.head.apply(tape, &self.store, flat)?;
        let out = tape.phi(raw)?;
        tape.value(out).ensure_finite("predictor output")?;
        Ok(out)
    }
}

impl TimestepPolicy for Tpm {
    fn beta_params(&self, input: &TpmInput<'_>) -> Result<BetaParams> {
        let mut tape = Tape::new();
        let out = self.apply(&mut tape, input)?;
        let v = tape.value(out).data();
        BetaParams::new(v[0], v[1])
    }
}
