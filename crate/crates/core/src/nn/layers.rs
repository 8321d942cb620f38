//! Dense layers, MLPs, the transformer encoder and sinusoidal features.

use serde::{Deserialize, Serialize};

use super::store::{ParamId, ParameterStore};
use super::tape::{Tape, Var};
use super::tensor::{matmul, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// `input * weights + bias` for `input: n x i`, `weights: i x o`, `bias: o`.
pub fn dense_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if bias.len() != weights.cols() {
        return Err(Error::shape(format!(
            "bias of length {} for {} outputs",
            bias.len(),
            weights.cols()
        )));
    }
    let mut out = matmul(input, weights)?;
    let o = out.cols();
    for (k, x) in out.data_mut().iter_mut().enumerate() {
        *x += bias.data()[k % o];
    }
    out.ensure_finite("dense output")?;
    Ok(out)
}

/// A dense layer's parameter handles.
#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn init(store: &mut ParameterStore, name: &str, i: usize, o: usize, rng: &mut Rng) -> Result<Self> {
        let w = store.insert_uniform(format!("{name}.w"), &[i, o], i, rng)?;
        let b = store.insert_zeros(format!("{name}.b"), &[1, o])?;
        Ok(Dense { w, b })
    }

    pub fn init_zero(store: &mut ParameterStore, name: &str, i: usize, o: usize) -> Result<Self> {
        let w = store.insert_zeros(format!("{name}.w"), &[i, o])?;
        let b = store.insert_zeros(format!("{name}.b"), &[1, o])?;
        Ok(Dense { w, b })
    }

    pub fn lookup(store: &ParameterStore, name: &str) -> Result<Self> {
        Ok(Dense {
            w: store.id(&format!("{name}.w"))?,
            b: store.id(&format!("{name}.b"))?,
        })
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.dense(x, w, b)
    }
}

/// SiLU MLP: every layer but the last is followed by the activation.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// `widths` lists input, hidden and output sizes. The last layer starts
    /// at zero when `zero_last` is set.
    pub fn init(
        store: &mut ParameterStore,
        name: &str,
        widths: &[usize],
        zero_last: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::config("an MLP needs at least input and output widths"));
        }
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let lname = format!("{name}.l{l}");
                if zero_last && l + 1 == n {
                    Dense::init_zero(store, &lname, widths[l], widths[l + 1])
                } else {
                    Dense::init(store, &lname, widths[l], widths[l + 1], rng)
                }
            })
            .collect::<Result<_>>()?;
        Ok(Mlp { layers })
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParameterStore, mut x: Var) -> Result<Var> {
        for (l, layer) in self.layers.iter().enumerate() {
            x = layer.apply(tape, store, x)?;
            if l + 1 < self.layers.len() {
                x = tape.silu(x)?;
            }
        }
        Ok(x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.width == 0 || self.heads == 0 || self.ffn == 0 {
            return Err(Error::config("encoder sizes must be positive"));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    q: Dense,
    k: Dense,
    v: Dense,
    o: Dense,
    up: Dense,
    down: Dense,
}

/// Stack of residual self-attention and SiLU feed-forward blocks with no
/// normalization layers.
#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    blocks: Vec<Block>,
}

impl Encoder {
    pub fn init(store: &mut ParameterStore, name: &str, cfg: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let blocks = (0..cfg.layers)
            .map(|l| {
                let p = format!("{name}.{l}");
                Ok(Block {
                    q: Dense::init(store, &format!("{p}.q"), w, w, rng)?,
                    k: Dense::init(store, &format!("{p}.k"), w, w, rng)?,
                    v: Dense::init(store, &format!("{p}.v"), w, w, rng)?,
                    o: Dense::init(store, &format!("{p}.o"), w, w, rng)?,
                    up: Dense::init(store, &format!("{p}.up"), w, cfg.ffn, rng)?,
                    down: Dense::init(store, &format!("{p}.down"), cfg.ffn, w, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Encoder { cfg, blocks })
    }

    pub fn lookup(store: &ParameterStore, name: &str, cfg: EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.layers)
            .map(|l| {
                let p = format!("{name}.{l}");
                Ok(Block {
                    q: Dense::lookup(store, &format!("{p}.q"))?,
                    k: Dense::lookup(store, &format!("{p}.k"))?,
                    v: Dense::lookup(store, &format!("{p}.v"))?,
                    o: Dense::lookup(store, &format!("{p}.o"))?,
                    up: Dense::lookup(store, &format!("{p}.up"))?,
                    down: Dense::lookup(store, &format!("{p}.down"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Encoder { cfg, blocks })
    }

    pub fn config(&self) -> EncoderConfig {
        self.cfg
    }

    /// Runs the encoder over `tokens` (`n x width`).
    pub fn apply(&self, tape: &mut Tape, store: &ParameterStore, tokens: Var) -> Result<Var> {
        if tape.value(tokens).cols() != self.cfg.width {
            return Err(Error::shape(format!(
                "tokens of width {} for encoder width {}",
                tape.value(tokens).cols(),
                self.cfg.width
            )));
        }
        let mut x = tokens;
        let dh = self.cfg.width / self.cfg.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for (l, b) in self.blocks.iter().enumerate() {
            let q = b.q.apply(tape, store, x)?;
            let k = b.k.apply(tape, store, x)?;
            let v = b.v.apply(tape, store, x)?;
            let mut heads = Vec::with_capacity(self.cfg.heads);
            for h in 0..self.cfg.heads {
                let qh = tape.slice_cols(q, h * dh, dh)?;
                let kh = tape.slice_cols(k, h * dh, dh)?;
                let vh = tape.slice_cols(v, h * dh, dh)?;
                let s = tape.matmul_bt(qh, kh)?;
                let s = tape.scale(s, scale)?;
                let a = tape.softmax_rows(s)?;
                heads.push(tape.matmul(a, vh)?);
            }
            let cat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
            let att = b.o.apply(tape, store, cat)?;
            x = tape.add(x, att)?;
            let hid = b.up.apply(tape, store, x)?;
            let hid = tape.silu(hid)?;
            let ff = b.down.apply(tape, store, hid)?;
            x = tape.add(x, ff)?;
            tape.value(x)
                .ensure_finite(&format!("encoder layer {l}"))?;
        }
        Ok(x)
    }

    /// Tape-free convenience wrapper.
    pub fn forward(&self, store: &ParameterStore, tokens: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let t = tape.input(tokens.clone());
        let out = self.apply(&mut tape, store, t)?;
        Ok(tape.value(out).clone())
    }
}

/// `[sin(f_i x)..., cos(f_i x)...]` with `n` frequencies spaced
/// geometrically from 1 to 1000.
pub fn sinusoidal(x: f64, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; 2 * n];
    for i in 0..n {
        let f = if n == 1 { 1.0 } else { 1000f64.powf(i as f64 / (n - 1) as f64) };
        out[i] = (f * x).sin();
        out[n + i] = (f * x).cos();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Domain, Streams};

    #[test]
    fn dense_known_values() {
        let x = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let w = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::row(&[0.5, -0.5]);
        assert_eq!(dense_forward(&x, &w, &b).unwrap().data(), &[1.5, 1.5]);
        let w = Tensor::matrix(2, 2, vec![0.0; 4]).unwrap();
        let b = Tensor::row(&[3.0, 4.0]);
        assert_eq!(dense_forward(&x, &w, &b).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn dense_shape_and_finiteness_errors() {
        let x = Tensor::matrix(1, 3, vec![1.0; 3]).unwrap();
        let w = Tensor::matrix(2, 2, vec![1.0; 4]).unwrap();
        let b = Tensor::row(&[0.0, 0.0]);
        assert!(matches!(dense_forward(&x, &w, &b), Err(Error::Shape(_))));
        let x = Tensor::matrix(1, 2, vec![1e308, 1e308]).unwrap();
        let w = Tensor::matrix(2, 2, vec![10.0; 4]).unwrap();
        assert!(matches!(dense_forward(&x, &w, &b), Err(Error::Numeric(_))));
    }

    fn tiny_encoder(layers: usize) -> (ParameterStore, Encoder) {
        let mut store = ParameterStore::new();
        let mut rng = Streams::new(3).stream(Domain::Init, 0);
        let cfg = EncoderConfig { layers, width: 8, heads: 2, ffn: 16 };
        let enc = Encoder::init(&mut store, "enc", cfg, &mut rng).unwrap();
        (store, enc)
    }

    #[test]
    fn encoder_is_permutation_equivariant() {
        let (store, enc) = tiny_encoder(2);
        let mut rng = Streams::new(4).stream(Domain::Misc, 0);
        let mut tokens = ParameterStore::new();
        let id = tokens.insert_uniform("t", &[5, 8], 1, &mut rng).unwrap();
        let x = tokens.value(id).clone();
        let perm = [3usize, 0, 4, 1, 2];
        let mut px = Vec::new();
        for &p in &perm {
            px.extend_from_slice(x.row_slice(p));
        }
        let px = Tensor::matrix(5, 8, px).unwrap();
        let y = enc.forward(&store, &x).unwrap();
        let py = enc.forward(&store, &px).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            for (a, b) in py.row_slice(i).iter().zip(y.row_slice(p)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zeroed_output_projections_make_blocks_identity() {
        let (mut store, enc) = tiny_encoder(3);
        let zero: Vec<String> = store
            .names()
            .filter(|n| n.contains(".o.") || n.contains(".down."))
            .map(String::from)
            .collect();
        for n in zero {
            let id = store.id(&n).unwrap();
            store.value_mut(id).data_mut().fill(0.0);
        }
        let x = Tensor::matrix(2, 8, (0..16).map(|i| i as f64 * 0.1).collect()).unwrap();
        assert_eq!(enc.forward(&store, &x).unwrap(), x);
    }

    #[test]
    fn encoder_rejects_wrong_width_and_bad_heads() {
        let (store, enc) = tiny_encoder(1);
        let x = Tensor::matrix(2, 4, vec![0.0; 8]).unwrap();
        assert!(matches!(enc.forward(&store, &x), Err(Error::Shape(_))));
        let cfg = EncoderConfig { layers: 1, width: 6, heads: 4, ffn: 4 };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sinusoidal_layout() {
        let e = sinusoidal(0.0, 4);
        assert_eq!(e, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        let e = sinusoidal(0.3, 3);
        assert!((e[0] - 0.3f64.sin()).abs() < 1e-15);
        assert!((e[5] - (1000.0f64 * 0.3).cos()).abs() < 1e-9);
    }
}
