//! Reverse-mode differentiation over a recorded list of primitive ops.
//!
//! A [`Tape`] is built fresh for every forward pass. Parameters are copied in
//! from a [`ParameterStore`] on first use and [`Tape::backward`] writes their
//! gradients back, overwriting whatever the store held before.

use std::collections::HashMap;

use super::store::{ParamId, ParameterStore};
use super::tensor::{matmul, matmul_at, matmul_bt, Tensor};
use crate::error::{Error, Result};
use crate::grpo::ppo_term;
use crate::tpm::beta::{beta_log_prob_grad, phi, phi_grad, BetaParams};

/// Node handle; only meaningful for the tape that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    idx: usize,
    tape: u64,
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param,
    MatMul(usize, usize),
    MatMulBt(usize, usize),
    AddRow(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Silu(usize),
    Softmax(usize),
    SliceCols { src: usize, start: usize },
    SliceRows { src: usize, start: usize },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    Reshape(usize),
    Gather { table: usize, ids: Vec<Option<usize>> },
    Phi(usize),
    BetaLogProb { params: usize, ratio: f64 },
    Sum(usize),
    Mean(usize),
    Ppo { logp: usize, old: f64, adv: f64, clip: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

static NEXT_TAPE: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(1);

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    params: HashMap<ParamId, usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, std::sync::atomic::Ordering::Relaxed),
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            idx: self.nodes.len() - 1,
            tape: self.id,
        }
    }

    fn ix(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::usage("variable does not belong to this tape"));
        }
        Ok(v.idx)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.idx].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.idx].value.data()[0]
    }

    /// Records a constant. Rank-1 inputs become a single row.
    pub fn input(&mut self, t: Tensor) -> Var {
        let t = if t.shape().len() == 2 {
            t
        } else {
            Tensor::from_parts(t.rows(), t.cols(), t.into_data())
        };
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        if let Some(&idx) = self.params.get(&id) {
            return Var { idx, tape: self.id };
        }
        let t = store.value(id);
        let t = Tensor::from_parts(t.rows(), t.cols(), t.data().to_vec());
        let v = self.push(t, Op::Param);
        self.params.insert(id, v.idx);
        v
    }

    pub fn param_named(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        Ok(self.param(store, store.id(name)?))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.ix(a)?, self.ix(b)?);
        let out = matmul(&self.nodes[ia].value, &self.nodes[ib].value)?;
        Ok(self.push(out, Op::MatMul(ia, ib)))
    }

    /// `a * b^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.ix(a)?, self.ix(b)?);
        let out = matmul_bt(&self.nodes[ia].value, &self.nodes[ib].value)?;
        Ok(self.push(out, Op::MatMulBt(ia, ib)))
    }

    /// Adds the `1 x m` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.ix(a)?, self.ix(b)?);
        let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(Error::shape(format!(
                "row broadcast of {:?} onto {:?}",
                bv.shape(),
                av.shape()
            )));
        }
        let m = av.cols();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv.data()[i % m])
            .collect();
        let out = Tensor::from_parts(av.rows(), m, data);
        Ok(self.push(out, Op::AddRow(ia, ib)))
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, what: &str) -> Result<(Tensor, usize, usize)> {
        let (ia, ib) = (self.ix(a)?, self.ix(b)?);
        let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if av.shape() != bv.shape() {
            return Err(Error::shape(format!("{what} of {:?} and {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Ok((Tensor::from_parts(av.rows(), av.cols(), data), ia, ib))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ia, ib) = self.zip(a, b, |x, y| x + y, "add")?;
        Ok(self.push(t, Op::Add(ia, ib)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ia, ib) = self.zip(a, b, |x, y| x - y, "sub")?;
        Ok(self.push(t, Op::Sub(ia, ib)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ia, ib) = self.zip(a, b, |x, y| x * y, "mul")?;
        Ok(self.push(t, Op::Mul(ia, ib)))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64) -> Result<(Tensor, usize)> {
        let ia = self.ix(a)?;
        let av = &self.nodes[ia].value;
        let data = av.data().iter().map(|x| f(*x)).collect();
        Ok((Tensor::from_parts(av.rows(), av.cols(), data), ia))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let (t, ia) = self.map(a, |x| s * x)?;
        Ok(self.push(t, Op::Scale(ia, s)))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let (t, ia) = self.map(a, |x| x * sigmoid(x))?;
        Ok(self.push(t, Op::Silu(ia)))
    }

    pub fn phi(&mut self, a: Var) -> Result<Var> {
        let (t, ia) = self.map(a, phi)?;
        Ok(self.push(t, Op::Phi(ia)))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.ix(a)?;
        let av = &self.nodes[ia].value;
        let (r, c) = (av.rows(), av.cols());
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        let out = Tensor::from_parts(r, c, data);
        out.ensure_finite("softmax")?;
        Ok(self.push(out, Op::Softmax(ia)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let ia = self.ix(a)?;
        let av = &self.nodes[ia].value;
        let (r, c) = (av.rows(), av.cols());
        if width == 0 || start + width > c {
            return Err(Error::shape(format!("column slice {start}+{width} of {c}")));
        }
        let mut data = Vec::with_capacity(r * width);
        for i in 0..r {
            data.extend_from_slice(&av.row_slice(i)[start..start + width]);
        }
        let out = Tensor::from_parts(r, width, data);
        Ok(self.push(out, Op::SliceCols { src: ia, start }))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Result<Var> {
        let ia = self.ix(a)?;
        let av = &self.nodes[ia].value;
        let (r, c) = (av.rows(), av.cols());
        if count == 0 || start + count > r {
            return Err(Error::shape(format!("row slice {start}+{count} of {r}")));
        }
        let out = Tensor::from_parts(count, c, av.data()[start * c..(start + count) * c].to_vec());
        Ok(self.push(out, Op::SliceRows { src: ia, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let ids = parts.iter().map(|&v| self.ix(v)).collect::<Result<Vec<_>>>()?;
        let first = ids.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let r = self.nodes[*first].value.rows();
        if ids.iter().any(|&i| self.nodes[i].value.rows() != r) {
            return Err(Error::shape("column concat needs equal row counts"));
        }
        let c: usize = ids.iter().map(|&i| self.nodes[i].value.cols()).sum();
        let mut data = Vec::with_capacity(r * c);
        for row in 0..r {
            for &i in &ids {
                data.extend_from_slice(self.nodes[i].value.row_slice(row));
            }
        }
        let out = Tensor::from_parts(r, c, data);
        Ok(self.push(out, Op::ConcatCols(ids)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let ids = parts.iter().map(|&v| self.ix(v)).collect::<Result<Vec<_>>>()?;
        let first = ids.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let c = self.nodes[*first].value.cols();
        if ids.iter().any(|&i| self.nodes[i].value.cols() != c) {
            return Err(Error::shape("row concat needs equal column counts"));
        }
        let mut data = Vec::new();
        for &i in &ids {
            data.extend_from_slice(self.nodes[i].value.data());
        }
        let out = Tensor::from_parts(data.len() / c, c, data);
        Ok(self.push(out, Op::ConcatRows(ids)))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let ia = self.ix(a)?;
        let av = &self.nodes[ia].value;
        if rows * cols != av.len() {
            return Err(Error::shape(format!("reshape {:?} to {rows}x{cols}", av.shape())));
        }
        let out = Tensor::from_parts(rows, cols, av.data().to_vec());
        Ok(self.push(out, Op::Reshape(ia)))
    }

    /// Selects rows of `table`; `None` yields a zero row.
    pub fn gather_rows(&mut self, table: Var, ids: &[Option<usize>]) -> Result<Var> {
        let it = self.ix(table)?;
        let tv = &self.nodes[it].value;
        let c = tv.cols();
        if ids.is_empty() {
            return Err(Error::shape("gather of no rows"));
        }
        let mut data = Vec::with_capacity(ids.len() * c);
        for id in ids {
            match id {
                Some(j) if *j < tv.rows() => data.extend_from_slice(tv.row_slice(*j)),
                Some(j) => {
                    return Err(Error::domain(format!("row {j} out of range for {} rows", tv.rows())))
                }
                None => data.extend(std::iter::repeat_n(0.0, c)),
            }
        }
        let out = Tensor::from_parts(ids.len(), c, data);
        Ok(self.push(out, Op::Gather { table: it, ids: ids.to_vec() }))
    }

    /// Log-density of `ratio` under Beta(alpha, beta), with `params` a
    /// `1 x 2` row holding (alpha, beta).
    pub fn beta_log_prob(&mut self, params: Var, ratio: f64) -> Result<Var> {
        let ip = self.ix(params)?;
        let pv = &self.nodes[ip].value;
        if pv.len() != 2 {
            return Err(Error::shape(format!("beta parameters must be 1x2, got {:?}", pv.shape())));
        }
        let bp = BetaParams::new(pv.data()[0], pv.data()[1])?;
        let lp = bp.log_prob(ratio)?;
        Ok(self.push(Tensor::scalar(lp), Op::BetaLogProb { params: ip, ratio }))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.ix(a)?;
        let s = self.nodes[ia].value.data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(ia)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.ix(a)?;
        let v = &self.nodes[ia].value;
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mean(ia)))
    }

    /// Clipped surrogate term for one trajectory given its summed log-prob.
    pub fn ppo_clip(&mut self, logp: Var, old: f64, adv: f64, clip: f64) -> Result<Var> {
        let il = self.ix(logp)?;
        let lv = &self.nodes[il].value;
        if lv.len() != 1 {
            return Err(Error::shape("surrogate needs a scalar log-prob"));
        }
        let term = ppo_term(lv.data()[0], old, adv, clip);
        Ok(self.push(Tensor::scalar(term.value), Op::Ppo { logp: il, old, adv, clip }))
    }

    /// `a * W + b` for a `1 x m` bias row.
    pub fn dense(&mut self, a: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(a, w)?;
        self.add_row(h, b)
    }

    /// Backpropagates from the scalar `loss` and overwrites the gradient of
    /// every store entry: touched parameters receive their derivative, all
    /// others are zeroed.
    pub fn backward(&self, loss: Var, store: &mut ParameterStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        store.zero_grads();
        for (&id, &idx) in &self.params {
            if let Some(Some(g)) = grads.get(idx) {
                if store.grad(id).len() != g.len() {
                    return Err(Error::usage("tape parameter does not match store entry"));
                }
                store.grad_mut(id).data_mut().copy_from_slice(g.data());
            }
        }
        Ok(())
    }

    /// Gradient of `loss` with respect to every node (None when unreached).
    pub fn gradients(&self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        let il = self.ix(loss).map_err(|_| Error::usage("backward: graph not built by this tape"))?;
        if self.nodes[il].value.len() != 1 {
            return Err(Error::usage("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; il + 1];
        grads[il] = Some(Tensor::scalar(1.0));
        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                accumulate(grads, *a, matmul_bt(g, val(*b))?);
                accumulate(grads, *b, matmul_at(val(*a), g)?);
            }
            Op::MatMulBt(a, b) => {
                accumulate(grads, *a, matmul(g, val(*b))?);
                accumulate(grads, *b, matmul_at(g, val(*a))?);
            }
            Op::AddRow(a, b) => {
                accumulate(grads, *a, g.clone());
                let m = g.cols();
                let mut col = vec![0.0; m];
                for (k, x) in g.data().iter().enumerate() {
                    col[k % m] += x;
                }
                accumulate(grads, *b, Tensor::from_parts(1, m, col));
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, map_t(g, |x| -x));
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, zip_t(g, val(*b), |x, y| x * y));
                accumulate(grads, *b, zip_t(g, val(*a), |x, y| x * y));
            }
            Op::Scale(a, s) => accumulate(grads, *a, map_t(g, |x| s * x)),
            Op::Silu(a) => {
                let d = zip_t(g, val(*a), |gy, x| {
                    let s = sigmoid(x);
                    gy * s * (1.0 + x * (1.0 - s))
                });
                accumulate(grads, *a, d);
            }
            Op::Phi(a) => accumulate(grads, *a, zip_t(g, val(*a), |gy, x| gy * phi_grad(x))),
            Op::Softmax(a) => {
                let y = &node.value;
                let c = y.cols();
                let mut d = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row_slice(r), g.row_slice(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for k in 0..c {
                        d[r * c + k] = yr[k] * (gr[k] - dot);
                    }
                }
                accumulate(grads, *a, Tensor::from_parts(y.rows(), c, d));
            }
            Op::SliceCols { src, start } => {
                let s = val(*src);
                let (w, c) = (g.cols(), s.cols());
                let mut d = vec![0.0; s.len()];
                for r in 0..s.rows() {
                    d[r * c + start..r * c + start + w].copy_from_slice(g.row_slice(r));
                }
                accumulate(grads, *src, Tensor::from_parts(s.rows(), c, d));
            }
            Op::SliceRows { src, start } => {
                let s = val(*src);
                let c = s.cols();
                let mut d = vec![0.0; s.len()];
                d[start * c..start * c + g.len()].copy_from_slice(g.data());
                accumulate(grads, *src, Tensor::from_parts(s.rows(), c, d));
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    let mut d = Vec::with_capacity(val(p).len());
                    for r in 0..g.rows() {
                        d.extend_from_slice(&g.row_slice(r)[off..off + w]);
                    }
                    accumulate(grads, p, Tensor::from_parts(g.rows(), w, d));
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).len();
                    let d = g.data()[off..off + n].to_vec();
                    accumulate(grads, p, Tensor::from_parts(val(p).rows(), g.cols(), d));
                    off += n;
                }
            }
            Op::Reshape(a) => {
                let s = val(*a);
                accumulate(grads, *a, Tensor::from_parts(s.rows(), s.cols(), g.data().to_vec()));
            }
            Op::Gather { table, ids } => {
                let t = val(*table);
                let c = t.cols();
                let mut d = vec![0.0; t.len()];
                for (r, id) in ids.iter().enumerate() {
                    if let Some(j) = id {
                        for k in 0..c {
                            d[j * c + k] += g.data()[r * c + k];
                        }
                    }
                }
                accumulate(grads, *table, Tensor::from_parts(t.rows(), c, d));
            }
            Op::BetaLogProb { params, ratio } => {
                let p = val(*params).data();
                let (da, db) = beta_log_prob_grad(p[0], p[1], *ratio);
                let gy = g.data()[0];
                accumulate(grads, *params, Tensor::from_parts(1, 2, vec![gy * da, gy * db]));
            }
            Op::Sum(a) => {
                let s = val(*a);
                accumulate(grads, *a, Tensor::from_parts(s.rows(), s.cols(), vec![g.data()[0]; s.len()]));
            }
            Op::Mean(a) => {
                let s = val(*a);
                let v = g.data()[0] / s.len() as f64;
                accumulate(grads, *a, Tensor::from_parts(s.rows(), s.cols(), vec![v; s.len()]));
            }
            Op::Ppo { logp, old, adv, clip } => {
                let term = ppo_term(val(*logp).data()[0], *old, *adv, *clip);
                accumulate(grads, *logp, Tensor::scalar(g.data()[0] * term.grad));
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, g: Tensor) {
    match &mut grads[idx] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn map_t(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(t.rows(), t.cols(), t.data().iter().map(|x| f(*x)).collect())
}

fn zip_t(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::from_parts(a.rows(), a.cols(), data)
}
