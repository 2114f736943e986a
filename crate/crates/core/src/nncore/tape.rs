//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every op of one forward pass. Parameters are borrowed
//! from a [`ParamRegistry`] without copying; [`Tape::backward`] replays the
//! ops in reverse and returns the gradient of each parameter that took part.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::kernels::{axpy, dot, matmul_acc, matmul_nt_acc, matmul_tn_acc};
use super::params::{Gradients, ParamId, ParamRegistry};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Reduction of per-token embeddings to one vector per sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Cls,
    Mean,
    Max,
}

impl std::fmt::Display for Pooling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Pooling::Cls => "cls",
            Pooling::Mean => "mean",
            Pooling::Max => "max",
        })
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    Gather {
        x: Var,
        ids: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq_len: usize,
        heads: usize,
        key_mask: Vec<bool>,
        probs: Vec<f64>,
    },
    Pool {
        x: Var,
        seq_len: usize,
        strategy: Pooling,
        mask: Vec<bool>,
        argmax: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Cosine {
        u: Var,
        v: Var,
        norms: Vec<(f64, f64)>,
    },
    Bce {
        logits: Var,
        labels: Vec<f64>,
    },
    Mse {
        x: Var,
        targets: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
}

struct Node {
    /// `None` for parameters, which are read from the registry.
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<'p> {
    params: &'p ParamRegistry,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    dropout_rng: Option<ChaCha8Rng>,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = inner.tanh();
    let dinner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy on a logit, `max(x,0) - x·y + ln(1 + e^-|x|)`.
pub fn bce_with_logit(logit: f64, label: f64) -> f64 {
    logit.max(0.0) - logit * label + (-logit.abs()).exp().ln_1p()
}

/// In-place row softmax over an `r × c` buffer. `-inf` entries get zero mass.
pub(crate) fn softmax_in_place(data: &mut [f64], cols: usize) {
    for row in data.chunks_exact_mut(cols) {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if mx == f64::NEG_INFINITY {
            row.fill(0.0);
            continue;
        }
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

impl<'p> Tape<'p> {
    /// A tape with dropout disabled.
    pub fn new(params: &'p ParamRegistry) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
            param_vars: vec![None; params.len()],
            dropout_rng: None,
        }
    }

    /// A tape whose dropout ops draw seeded masks.
    pub fn with_dropout(params: &'p ParamRegistry, seed: u64) -> Self {
        let mut t = Self::new(params);
        t.enable_dropout(seed);
        t
    }

    pub fn enable_dropout(&mut self, seed: u64) {
        self.dropout_rng = Some(ChaCha8Rng::seed_from_u64(seed));
    }

    pub fn dropout_active(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn params(&self) -> &'p ParamRegistry {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.tensor(*id),
            (None, _) => unreachable!("non-parameter node without a value"),
        }
    }

    fn rc(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rc(a);
        let (k2, n) = self.rc(b);
        if k != k2 {
            return Err(Error::dim("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rc(a);
        let (n, k2) = self.rc(b);
        if k != k2 {
            return Err(Error::dim("matmul_nt", format!("[{m}x{k}] x [{n}x{k2}]^T")));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::matrix(m, n, out), Op::MatMulNT(a, b), &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let sa = self.rc(a);
        let sb = self.rc(b);
        if sa != sb {
            return Err(Error::dim(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    fn zip_op(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (r, c) = self.rc(a);
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(Tensor::matrix(r, c, out), op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_op(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_op(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_op(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    /// Adds a bias vector to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.rc(x);
        let bt = self.value(bias);
        if bt.len() != c {
            return Err(Error::dim("add_row", format!("bias of {} for {c} columns", bt.len())));
        }
        let b = bt.data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(c) {
            row.iter_mut().zip(b).for_each(|(o, &bv)| *o += bv);
        }
        Ok(self.push(Tensor::matrix(r, c, out), Op::AddRow(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let (r, c) = self.rc(x);
        let out = self.value(x).data().iter().map(|v| v * s).collect();
        self.push(Tensor::matrix(r, c, out), Op::Scale(x, s), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let (r, c) = self.rc(x);
        let out = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        self.push(Tensor::matrix(r, c, out), Op::Relu(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (r, c) = self.rc(x);
        let out = self.value(x).data().iter().map(|&v| gelu(v)).collect();
        self.push(Tensor::matrix(r, c, out), Op::Gelu(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.rc(x);
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::dim("layer_norm", format!("gain/bias must have {c} entries")));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for (i, row) in self.value(x).data().chunks_exact(c).enumerate() {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        };
        Ok(self.push(Tensor::matrix(r, c, out), op, &[x, gain, bias]))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.rc(x);
        let mut out = self.value(x).data().to_vec();
        softmax_in_place(&mut out, c);
        self.push(Tensor::matrix(r, c, out), Op::Softmax(x), &[x])
    }

    /// Row `i` of the output is row `ids[i]` of `x`.
    pub fn gather_rows(&mut self, x: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.rc(x);
        if ids.is_empty() {
            return Err(Error::dim("gather_rows", "no rows selected"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= r) {
            return Err(Error::dim("gather_rows", format!("row {bad} of {r}")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let op = Op::Gather {
            x,
            ids: ids.to_vec(),
        };
        Ok(self.push(Tensor::matrix(ids.len(), c, out), op, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::dim("concat_cols", "nothing to concatenate"));
        };
        let r = self.rc(first).0;
        if parts.iter().any(|&p| self.rc(p).0 != r) {
            return Err(Error::dim("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.rc(p).1).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        Ok(self.push(
            Tensor::matrix(r, total, out),
            Op::ConcatCols(parts.to_vec()),
            parts,
        ))
    }

    /// Multi-head scaled dot-product self-attention over `batch` stacked
    /// sequences of `seq_len` rows each. Keys where `key_mask` is false get
    /// `-inf` scores and therefore zero weight.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq_len: usize,
        heads: usize,
        key_mask: &[bool],
    ) -> Result<Var> {
        let (rows, d) = self.rc(q);
        if self.rc(k) != (rows, d) || self.rc(v) != (rows, d) {
            return Err(Error::dim("attention", "q, k, v shapes differ"));
        }
        if rows != batch * seq_len || key_mask.len() != rows {
            return Err(Error::dim(
                "attention",
                format!("{rows} rows for batch {batch} x length {seq_len}"),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::dim("attention", format!("{d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let l = seq_len;
        let mut probs = vec![0.0; batch * heads * l * l];
        let mut out = vec![0.0; rows * d];
        for b in 0..batch {
            let mask = &key_mask[b * l..(b + 1) * l];
            for h in 0..heads {
                let pbase = (b * heads + h) * l * l;
                for i in 0..l {
                    let qi = &qd[(b * l + i) * d + h * dh..][..dh];
                    let prow = &mut probs[pbase + i * l..pbase + (i + 1) * l];
                    for j in 0..l {
                        prow[j] = if mask[j] {
                            dot(qi, &kd[(b * l + j) * d + h * dh..][..dh]) * scale
                        } else {
                            f64::NEG_INFINITY
                        };
                    }
                    softmax_in_place(prow, l);
                    let oi = &mut out[(b * l + i) * d + h * dh..][..dh];
                    for j in (0..l).filter(|&j| mask[j]) {
                        axpy(prow[j], &vd[(b * l + j) * d + h * dh..][..dh], oi);
                    }
                }
            }
        }
        let op = Op::Attention {
            q,
            k,
            v,
            batch,
            seq_len,
            heads,
            key_mask: key_mask.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::matrix(rows, d, out), op, &[q, k, v]))
    }

    /// Pools `batch` stacked sequences of `seq_len` rows into one row each.
    /// `mask` marks real tokens; every sequence needs at least one.
    pub fn pool(&mut self, x: Var, seq_len: usize, mask: &[bool], strategy: Pooling) -> Result<Var> {
        let (rows, d) = self.rc(x);
        if seq_len == 0 || rows % seq_len != 0 || mask.len() != rows {
            return Err(Error::dim("pool", format!("{rows} rows, length {seq_len}")));
        }
        let batch = rows / seq_len;
        let src = self.value(x).data();
        let mut out = vec![0.0; batch * d];
        let mut argmax = Vec::new();
        for b in 0..batch {
            let m = &mask[b * seq_len..(b + 1) * seq_len];
            let real = m.iter().filter(|&&r| r).count();
            if real == 0 {
                return Err(Error::Precondition(format!(
                    "pooling sequence {b} with no real tokens"
                )));
            }
            let o = &mut out[b * d..(b + 1) * d];
            match strategy {
                Pooling::Cls => o.copy_from_slice(&src[b * seq_len * d..][..d]),
                Pooling::Mean => {
                    for t in (0..seq_len).filter(|&t| m[t]) {
                        axpy(1.0, &src[(b * seq_len + t) * d..][..d], o);
                    }
                    o.iter_mut().for_each(|v| *v /= real as f64);
                }
                Pooling::Max => {
                    let mut best = vec![usize::MAX; d];
                    o.fill(f64::NEG_INFINITY);
                    for t in (0..seq_len).filter(|&t| m[t]) {
                        let row = (b * seq_len + t) * d;
                        for j in 0..d {
                            if src[row + j] > o[j] || best[j] == usize::MAX {
                                o[j] = src[row + j];
                                best[j] = row + j;
                            }
                        }
                    }
                    argmax.extend(best);
                }
            }
        }
        let op = Op::Pool {
            x,
            seq_len,
            strategy,
            mask: mask.to_vec(),
            argmax,
        };
        Ok(self.push(Tensor::matrix(batch, d, out), op, &[x]))
    }

    /// Inverted dropout. Identity when the tape has dropout disabled or the
    /// rate is zero.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        if self.dropout_rng.is_none() || rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let n = self.value(x).len();
        let Some(rng) = self.dropout_rng.as_mut() else {
            return x;
        };
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let (r, c) = self.rc(x);
        let out = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(a, m)| a * m)
            .collect();
        self.push(Tensor::matrix(r, c, out), Op::Dropout { x, mask }, &[x])
    }

    /// Row-wise cosine similarity, output `n × 1`.
    pub fn cosine_rows(&mut self, u: Var, v: Var) -> Result<Var> {
        let (n, d) = self.same_shape("cosine_rows", u, v)?;
        let (ud, vd) = (self.value(u).data(), self.value(v).data());
        let mut out = Vec::with_capacity(n);
        let mut norms = Vec::with_capacity(n);
        for i in 0..n {
            let (a, b) = (&ud[i * d..(i + 1) * d], &vd[i * d..(i + 1) * d]);
            let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
            if na == 0.0 || nb == 0.0 {
                return Err(Error::Numeric {
                    context: "cosine_rows".into(),
                    detail: format!("zero-norm embedding in row {i}"),
                });
            }
            out.push(dot(a, b) / (na * nb));
            norms.push((na, nb));
        }
        Ok(self.push(Tensor::matrix(n, 1, out), Op::Cosine { u, v, norms }, &[u, v]))
    }

    /// Mean binary cross-entropy of `n × 1` logits against 0/1 labels.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let t = self.value(logits);
        if t.len() != labels.len() || labels.is_empty() {
            return Err(Error::dim("bce", format!("{} logits, {} labels", t.len(), labels.len())));
        }
        let loss = t
            .data()
            .iter()
            .zip(labels)
            .map(|(&x, &y)| bce_with_logit(x, y))
            .sum::<f64>()
            / labels.len() as f64;
        let op = Op::Bce {
            logits,
            labels: labels.to_vec(),
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// Mean squared error against targets.
    pub fn mse(&mut self, x: Var, targets: &[f64]) -> Result<Var> {
        let t = self.value(x);
        if t.len() != targets.len() || targets.is_empty() {
            return Err(Error::dim("mse", format!("{} values, {} targets", t.len(), targets.len())));
        }
        let loss = t
            .data()
            .iter()
            .zip(targets)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<f64>()
            / targets.len() as f64;
        let op = Op::Mse {
            x,
            targets: targets.to_vec(),
        };
        Ok(self.push(Tensor::scalar(loss), op, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Gradients of the scalar `loss` with respect to every parameter used.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim("backward", "loss must be a scalar"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::with_len(self.params.len());

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &node.op, &g, &mut grads, &mut out);
        }
        Ok(out)
    }

    /// Zero-initialised gradient buffer for `v`, or `None` if `v` needs no gradient.
    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop_node(
        &self,
        idx: usize,
        op: &Op,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        out: &mut Gradients,
    ) {
        macro_rules! with_grad {
            ($v:expr, |$d:ident| $body:expr) => {
                if let Some($d) = self.grad_slot(grads, $v) {
                    $body;
                }
            };
        }

        match op {
            Op::Leaf => {}
            Op::Param(id) => out.add(*id, g),
            Op::MatMul(a, b) => {
                let (m, k) = self.rc(*a);
                let n = self.rc(*b).1;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                with_grad!(*a, |da| matmul_nt_acc(g, bv, da, m, n, k));
                with_grad!(*b, |db| matmul_tn_acc(av, g, db, m, k, n));
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.rc(*a);
                let n = self.rc(*b).0;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                with_grad!(*a, |da| matmul_acc(g, bv, da, m, n, k));
                with_grad!(*b, |db| matmul_tn_acc(g, av, db, m, n, k));
            }
            Op::Add(a, b) => {
                with_grad!(*a, |da| axpy(1.0, g, da));
                with_grad!(*b, |db| axpy(1.0, g, db));
            }
            Op::Sub(a, b) => {
                with_grad!(*a, |da| axpy(1.0, g, da));
                with_grad!(*b, |db| axpy(-1.0, g, db));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                with_grad!(*a, |da| {
                    for ((d, gv), y) in da.iter_mut().zip(g).zip(bv) {
                        *d += gv * y;
                    }
                });
                with_grad!(*b, |db| {
                    for ((d, gv), x) in db.iter_mut().zip(g).zip(av) {
                        *d += gv * x;
                    }
                });
            }
            Op::AddRow(x, bias) => {
                let c = self.rc(*x).1;
                with_grad!(*x, |dx| axpy(1.0, g, dx));
                with_grad!(*bias, |db| {
                    for row in g.chunks_exact(c) {
                        axpy(1.0, row, db);
                    }
                });
            }
            Op::Scale(x, s) => with_grad!(*x, |dx| axpy(*s, g, dx)),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                with_grad!(*x, |dx| {
                    for ((d, gv), v) in dx.iter_mut().zip(g).zip(xv) {
                        if *v > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                with_grad!(*x, |dx| {
                    for ((d, gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                        *d += gv * gelu_grad(v);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = self.rc(*x).1;
                let gv = self.value(*gain).data();
                with_grad!(*x, |dx| {
                    let mut dxhat = vec![0.0; c];
                    for (r, (grow, hrow)) in g.chunks_exact(c).zip(xhat.chunks_exact(c)).enumerate() {
                        for j in 0..c {
                            dxhat[j] = grow[j] * gv[j];
                        }
                        let m1 = dxhat.iter().sum::<f64>() / c as f64;
                        let m2 = dot(&dxhat, hrow) / c as f64;
                        let drow = &mut dx[r * c..(r + 1) * c];
                        for j in 0..c {
                            drow[j] += inv_std[r] * (dxhat[j] - m1 - hrow[j] * m2);
                        }
                    }
                });
                with_grad!(*gain, |dg| {
                    for (grow, hrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            dg[j] += grow[j] * hrow[j];
                        }
                    }
                });
                with_grad!(*bias, |db| {
                    for grow in g.chunks_exact(c) {
                        axpy(1.0, grow, db);
                    }
                });
            }
            Op::Softmax(x) => {
                let c = self.rc(*x).1;
                let y = self.value(Var(idx)).data();
                with_grad!(*x, |dx| {
                    for ((drow, grow), yrow) in dx
                        .chunks_exact_mut(c)
                        .zip(g.chunks_exact(c))
                        .zip(y.chunks_exact(c))
                    {
                        let s = dot(grow, yrow);
                        for j in 0..c {
                            drow[j] += yrow[j] * (grow[j] - s);
                        }
                    }
                });
            }
            Op::Gather { x, ids } => {
                let c = self.rc(*x).1;
                with_grad!(*x, |dx| {
                    for (r, &i) in ids.iter().enumerate() {
                        axpy(1.0, &g[r * c..(r + 1) * c], &mut dx[i * c..(i + 1) * c]);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total: usize = parts.iter().map(|&p| self.rc(p).1).sum();
                let rows = g.len() / total;
                let mut offset = 0;
                for &p in parts {
                    let c = self.rc(p).1;
                    with_grad!(p, |dp| {
                        for r in 0..rows {
                            axpy(
                                1.0,
                                &g[r * total + offset..r * total + offset + c],
                                &mut dp[r * c..(r + 1) * c],
                            );
                        }
                    });
                    offset += c;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq_len,
                heads,
                key_mask,
                probs,
            } => self.backprop_attention(
                (*q, *k, *v),
                (*batch, *seq_len, *heads),
                key_mask,
                probs,
                g,
                grads,
            ),
            Op::Pool {
                x,
                seq_len,
                strategy,
                mask,
                argmax,
            } => {
                let d = self.rc(*x).1;
                let batch = g.len() / d;
                with_grad!(*x, |dx| match strategy {
                    Pooling::Cls => {
                        for b in 0..batch {
                            axpy(1.0, &g[b * d..(b + 1) * d], &mut dx[b * seq_len * d..][..d]);
                        }
                    }
                    Pooling::Mean => {
                        for b in 0..batch {
                            let m = &mask[b * seq_len..(b + 1) * seq_len];
                            let real = m.iter().filter(|&&r| r).count() as f64;
                            for t in (0..*seq_len).filter(|&t| m[t]) {
                                axpy(
                                    1.0 / real,
                                    &g[b * d..(b + 1) * d],
                                    &mut dx[(b * seq_len + t) * d..][..d],
                                );
                            }
                        }
                    }
                    Pooling::Max => {
                        for (gi, &src) in g.iter().zip(argmax) {
                            dx[src] += gi;
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                with_grad!(*x, |dx| {
                    for ((d, gv), m) in dx.iter_mut().zip(g).zip(mask) {
                        *d += gv * m;
                    }
                });
            }
            Op::Cosine { u, v, norms } => {
                let d = self.rc(*u).1;
                let (ud, vd) = (self.value(*u).data(), self.value(*v).data());
                let n = norms.len();
                let cos: Vec<f64> = (0..n)
                    .map(|i| dot(&ud[i * d..(i + 1) * d], &vd[i * d..(i + 1) * d]) / (norms[i].0 * norms[i].1))
                    .collect();
                with_grad!(*u, |du| {
                    for i in 0..n {
                        let (nu, nv) = norms[i];
                        for j in 0..d {
                            du[i * d + j] += g[i]
                                * (vd[i * d + j] / (nu * nv) - cos[i] * ud[i * d + j] / (nu * nu));
                        }
                    }
                });
                with_grad!(*v, |dv| {
                    for i in 0..n {
                        let (nu, nv) = norms[i];
                        for j in 0..d {
                            dv[i * d + j] += g[i]
                                * (ud[i * d + j] / (nu * nv) - cos[i] * vd[i * d + j] / (nv * nv));
                        }
                    }
                });
            }
            Op::Bce { logits, labels } => {
                let xv = self.value(*logits).data();
                let n = labels.len() as f64;
                with_grad!(*logits, |dx| {
                    for ((d, &x), &y) in dx.iter_mut().zip(xv).zip(labels) {
                        *d += g[0] * (sigmoid(x) - y) / n;
                    }
                });
            }
            Op::Mse { x, targets } => {
                let xv = self.value(*x).data();
                let n = targets.len() as f64;
                with_grad!(*x, |dx| {
                    for ((d, &a), &b) in dx.iter_mut().zip(xv).zip(targets) {
                        *d += g[0] * 2.0 * (a - b) / n;
                    }
                });
            }
            Op::Sum(x) => with_grad!(*x, |dx| dx.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                with_grad!(*x, |dx| dx.iter_mut().for_each(|d| *d += g[0] / n));
            }
        }
    }

    fn backprop_attention(
        &self,
        (q, k, v): (Var, Var, Var),
        (batch, l, heads): (usize, usize, usize),
        key_mask: &[bool],
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let d = self.rc(q).1;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let rows = batch * l;
        let mut dq = vec![0.0; rows * d];
        let mut dk = vec![0.0; rows * d];
        let mut dv = vec![0.0; rows * d];
        let mut dp = vec![0.0; l];
        for b in 0..batch {
            let mask = &key_mask[b * l..(b + 1) * l];
            for h in 0..heads {
                let pbase = (b * heads + h) * l * l;
                for i in 0..l {
                    let gi = &g[(b * l + i) * d + h * dh..][..dh];
                    let prow = &probs[pbase + i * l..pbase + (i + 1) * l];
                    let mut s = 0.0;
                    for j in (0..l).filter(|&j| mask[j]) {
                        let off = (b * l + j) * d + h * dh;
                        dp[j] = dot(gi, &vd[off..off + dh]);
                        s += prow[j] * dp[j];
                        axpy(prow[j], gi, &mut dv[off..off + dh]);
                    }
                    let qoff = (b * l + i) * d + h * dh;
                    for j in (0..l).filter(|&j| mask[j]) {
                        let ds = prow[j] * (dp[j] - s) * scale;
                        let off = (b * l + j) * d + h * dh;
                        axpy(ds, &kd[off..off + dh], &mut dq[qoff..qoff + dh]);
                        axpy(ds, &qd[qoff..qoff + dh], &mut dk[off..off + dh]);
                    }
                }
            }
        }
        for (var, local) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(slot) = self.grad_slot(grads, var) {
                axpy(1.0, &local, slot);
            }
        }
    }
}
