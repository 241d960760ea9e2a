//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation in insertion order, which is already a
//! topological order. [`Graph::backward`] walks the tape once in reverse and
//! returns a [`Gradients`] table. Tensors enter the tape either as constants
//! or, through [`Graph::param`], as trainable leaves keyed by their address so
//! gradients can be routed back to the owning model.
//!
//! Every tensor is viewed as a stack of last-axis rows; operations that care
//! about matrices read `[rows, last_dim]`.

use std::collections::HashMap;

use crate::error::{Result, XmicError};
use crate::tensor::{Tensor, NORM_EPS};

/// Variance guard inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Slope of the sigmoid inside QuickGELU.
pub const QUICK_GELU_SLOPE: f64 = 1.702;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    QuickGelu(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    MeanRows(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        group: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    /// Deliberately wrong backward rule; only used to prove the gradient
    /// checker can fail.
    #[cfg(test)]
    BrokenSquare(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
    activations: usize,
}

fn param_key(t: &Tensor) -> usize {
    t as *const Tensor as usize
}

fn matrix_dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.last_dim())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Total number of scalar activations produced by non-leaf nodes so far.
    pub fn activation_count(&self) -> usize {
        self.activations
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        if !matches!(op, Op::Leaf) {
            self.activations += value.len();
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records a tensor that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    /// Records a leaf that receives gradients regardless of its flag.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(true), Op::Leaf, true)
    }

    /// Binds a model parameter. Binding the same tensor twice yields the same
    /// node; tensors with `requires_grad == false` become constants.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let key = param_key(t);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = if t.requires_grad() {
            self.push(t.clone(), Op::Leaf, true)
        } else {
            self.constant(t.clone())
        };
        self.params.insert(key, v);
        v
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(XmicError::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x * s).collect();
        let out = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    fn row_broadcast(
        &mut self,
        x: Var,
        row: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let vx = self.value(x);
        let vr = self.value(row);
        let d = vx.last_dim();
        if vr.len() != d {
            return Err(XmicError::ShapeMismatch(format!(
                "row of length {} against last axis {d}",
                vr.len()
            )));
        }
        let data = vx
            .data()
            .chunks(d)
            .flat_map(|r| r.iter().zip(vr.data()).map(|(a, b)| f(*a, *b)))
            .collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(out, op, rg))
    }

    /// `x[r, :] + row` for every row `r`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast(x, row, Op::AddRow(x, row), |a, b| a + b)
    }

    /// `x[r, :] * row` for every row `r`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.row_broadcast(x, row, Op::MulRow(x, row), |a, b| a * b)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims(self.value(a));
        let (k2, n) = matrix_dims(self.value(b));
        if k != k2 {
            return Err(XmicError::ShapeMismatch(format!(
                "matmul [{m}, {k}] x [{k2}, {n}]"
            )));
        }
        let da = self.value(a).data();
        let db = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = da[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &db[p * n..(p + 1) * n];
                for (o, bv) in out[i * n..(i + 1) * n].iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `[m, k] x [n, k]^T -> [m, n]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims(self.value(a));
        let (n, k2) = matrix_dims(self.value(b));
        if k != k2 {
            return Err(XmicError::ShapeMismatch(format!(
                "matmul_t [{m}, {k}] x [{n}, {k2}]^T"
            )));
        }
        let da = self.value(a).data();
        let db = self.value(b).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ar = &da[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = crate::tensor::dot(ar, &db[j * k..(j + 1) * k]);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulT(a, b), rg))
    }

    /// Element-wise `x * sigmoid(1.702 x)`.
    pub fn quick_gelu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let data = vx
            .data()
            .iter()
            .map(|&v| v * sigmoid(QUICK_GELU_SLOPE * v))
            .collect();
        let out = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::QuickGelu(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| v.max(0.0)).collect();
        let out = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// Per-row standardization (population variance) followed by `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.last_dim();
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(XmicError::ShapeMismatch(format!(
                "layer_norm affine parameters must have length {d}"
            )));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = vx.rows();
        let mut xhat = Vec::with_capacity(vx.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(vx.len());
        for r in vx.data().chunks(d) {
            let mean = r.iter().sum::<f64>() / d as f64;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(s);
            for (j, v) in r.iter().enumerate() {
                let h = (v - mean) * s;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Unit-normalizes every last-axis slice.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let d = vx.last_dim();
        let mut norms = Vec::with_capacity(vx.rows());
        let mut out = Vec::with_capacity(vx.len());
        for r in vx.data().chunks(d) {
            let n = crate::tensor::norm(r);
            if n <= NORM_EPS {
                return Err(XmicError::ZeroNorm { norm: n });
            }
            norms.push(n);
            out.extend(r.iter().map(|v| v / n));
        }
        let out = Tensor::new(vx.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::L2Normalize { x, norms }, rg))
    }

    /// `[N, D] -> [D]` arithmetic mean over rows.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (n, d) = matrix_dims(vx);
        let mut out = vec![0.0; d];
        for r in vx.data().chunks(d) {
            out.iter_mut().zip(r).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        let rg = self.rg(x);
        self.push(Tensor::vector(out), Op::MeanRows(x), rg)
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().with_requires_grad(false).reshape(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Stacks the rows of every input into one `[sum rows, D]` matrix.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or(XmicError::EmptySequence("concat_rows needs at least one input"))?;
        let d = self.value(*first).last_dim();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.last_dim() != d {
                return Err(XmicError::ShapeMismatch(format!(
                    "concat_rows last axis {} vs {d}",
                    v.last_dim()
                )));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(vec![rows, d], data)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// Gathers rows by index (repeats allowed).
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        if idx.is_empty() {
            return Err(XmicError::EmptySequence("select_rows needs indices"));
        }
        let vx = self.value(x);
        let (n, d) = matrix_dims(vx);
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= n {
                return Err(XmicError::BadShape(format!("row {i} of {n}")));
            }
            data.extend_from_slice(vx.row(i));
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![idx.len(), d], data)?,
            Op::SelectRows(x, idx.to_vec()),
            rg,
        ))
    }

    /// Scaled dot-product attention with `heads` heads over already projected
    /// queries, keys and values. Rows are split into consecutive groups of
    /// `group` rows and attention never crosses a group boundary, so one call
    /// can process many short independent sequences.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, group: usize) -> Result<Var> {
        self.same_shape(q, k, "attention q/k")?;
        self.same_shape(q, v, "attention q/v")?;
        let (rows, d) = matrix_dims(self.value(q));
        if heads == 0 || d % heads != 0 {
            return Err(XmicError::BadShape(format!(
                "model width {d} is not divisible by {heads} heads"
            )));
        }
        if group == 0 || rows % group != 0 {
            return Err(XmicError::BadShape(format!(
                "{rows} rows do not split into groups of {group}"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (dq, dk, dv) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut out = vec![0.0; rows * d];
        let mut probs = vec![0.0; (rows / group) * heads * group * group];
        let mut scores = vec![0.0; group];
        for g in 0..rows / group {
            let base = g * group;
            for h in 0..heads {
                let col = h * dh;
                for i in 0..group {
                    let qi = &dq[(base + i) * d + col..(base + i) * d + col + dh];
                    let mut max = f64::NEG_INFINITY;
                    for (j, s) in scores.iter_mut().enumerate() {
                        let kj = &dk[(base + j) * d + col..(base + j) * d + col + dh];
                        *s = crate::tensor::dot(qi, kj) * scale;
                        max = max.max(*s);
                    }
                    let mut z = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let p_off = ((g * heads + h) * group + i) * group;
                    for j in 0..group {
                        let p = scores[j] / z;
                        probs[p_off + j] = p;
                        let vj = &dv[(base + j) * d + col..(base + j) * d + col + dh];
                        let o = &mut out[(base + i) * d + col..(base + i) * d + col + dh];
                        o.iter_mut().zip(vj).for_each(|(o, x)| *o += p * x);
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Tensor::new(vec![rows, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                group,
                probs,
            },
            rg,
        ))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        let (b, c) = matrix_dims(vl);
        if labels.len() != b {
            return Err(XmicError::ShapeMismatch(format!(
                "{} labels for {b} logit rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(XmicError::BadLabel {
                label: bad,
                classes: c,
            });
        }
        let mut probs = Vec::with_capacity(b * c);
        let mut loss = 0.0;
        for (r, &y) in vl.data().chunks(c).zip(labels) {
            let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = r.iter().map(|v| (v - max).exp()).sum();
            let lse = max + z.ln();
            loss += lse - r[y];
            probs.extend(r.iter().map(|v| (v - lse).exp()));
        }
        loss /= b as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::vector(vec![loss]),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::vector(vec![s]), Op::Sum(x), rg)
    }

    /// Scalar dot product of two equally shaped tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let m = self.mul(a, b)?;
        Ok(self.sum(m))
    }

    #[cfg(test)]
    pub(crate) fn broken_square(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| v * v).collect();
        let out = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::BrokenSquare(x), rg)
    }

    /// Propagates d(loss)/d(node) to every node that requires gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(XmicError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.rg(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn backprop_node(&self, idx: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, g: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(a) => a.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, gout.to_vec());
                acc(*b, gout.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, gout.to_vec());
                acc(*b, gout.iter().map(|g| -g).collect());
            }
            Op::Mul(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                acc(*a, gout.iter().zip(vb).map(|(g, y)| g * y).collect());
                acc(*b, gout.iter().zip(va).map(|(g, x)| g * x).collect());
            }
            Op::Scale(a, s) => acc(*a, gout.iter().map(|g| g * s).collect()),
            Op::AddRow(x, row) => {
                let d = self.value(*row).len();
                let mut gr = vec![0.0; d];
                for c in gout.chunks(d) {
                    gr.iter_mut().zip(c).for_each(|(a, b)| *a += b);
                }
                acc(*x, gout.to_vec());
                acc(*row, gr);
            }
            Op::MulRow(x, row) => {
                let vr = self.value(*row).data();
                let vx = self.value(*x).data();
                let d = vr.len();
                let mut gr = vec![0.0; d];
                let mut gx = Vec::with_capacity(gout.len());
                for (gc, xc) in gout.chunks(d).zip(vx.chunks(d)) {
                    for j in 0..d {
                        gr[j] += gc[j] * xc[j];
                        gx.push(gc[j] * vr[j]);
                    }
                }
                acc(*x, gx);
                acc(*row, gr);
            }
            Op::MatMul(a, b) => {
                let (m, k) = matrix_dims(self.value(*a));
                let n = self.value(*b).last_dim();
                let da = self.value(*a).data();
                let db = self.value(*b).data();
                if self.rg(*a) {
                    // dA = dC B^T
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        let gc = &gout[i * n..(i + 1) * n];
                        for p in 0..k {
                            ga[i * k + p] = crate::tensor::dot(gc, &db[p * n..(p + 1) * n]);
                        }
                    }
                    acc(*a, ga);
                }
                if self.rg(*b) {
                    // dB = A^T dC
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        let gc = &gout[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = da[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            gb[p * n..(p + 1) * n]
                                .iter_mut()
                                .zip(gc)
                                .for_each(|(o, g)| *o += aip * g);
                        }
                    }
                    acc(*b, gb);
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = matrix_dims(self.value(*a));
                let n = self.value(*b).rows();
                let da = self.value(*a).data();
                let db = self.value(*b).data();
                if self.rg(*a) {
                    // dA = dC B
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let g = gout[i * n + j];
                            ga[i * k..(i + 1) * k]
                                .iter_mut()
                                .zip(&db[j * k..(j + 1) * k])
                                .for_each(|(o, x)| *o += g * x);
                        }
                    }
                    acc(*a, ga);
                }
                if self.rg(*b) {
                    // dB = dC^T A
                    let mut gb = vec![0.0; n * k];
                    for i in 0..m {
                        for j in 0..n {
                            let g = gout[i * n + j];
                            gb[j * k..(j + 1) * k]
                                .iter_mut()
                                .zip(&da[i * k..(i + 1) * k])
                                .for_each(|(o, x)| *o += g * x);
                        }
                    }
                    acc(*b, gb);
                }
            }
            Op::QuickGelu(x) => {
                let vx = self.value(*x).data();
                let g = gout
                    .iter()
                    .zip(vx)
                    .map(|(g, &v)| {
                        let s = sigmoid(QUICK_GELU_SLOPE * v);
                        g * (s + QUICK_GELU_SLOPE * v * s * (1.0 - s))
                    })
                    .collect();
                acc(*x, g);
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                let g = gout
                    .iter()
                    .zip(vx)
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                acc(*x, g);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain).data();
                let d = gv.len();
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                let mut gx = Vec::with_capacity(gout.len());
                for ((gc, hc), s) in gout.chunks(d).zip(xhat.chunks(d)).zip(rstd) {
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        gg[j] += gc[j] * hc[j];
                        gb[j] += gc[j];
                        let dh = gc[j] * gv[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hc[j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        let dh = gc[j] * gv[j];
                        gx.push(s * (dh - mean_dh - hc[j] * mean_dh_h));
                    }
                }
                acc(*x, gx);
                acc(*gain, gg);
                acc(*bias, gb);
            }
            Op::L2Normalize { x, norms } => {
                let y = node.value.data();
                let d = node.value.last_dim();
                let mut gx = Vec::with_capacity(gout.len());
                for ((gc, yc), n) in gout.chunks(d).zip(y.chunks(d)).zip(norms) {
                    let proj = crate::tensor::dot(gc, yc);
                    gx.extend(gc.iter().zip(yc).map(|(g, y)| (g - y * proj) / n));
                }
                acc(*x, gx);
            }
            Op::Reshape(x) => acc(*x, gout.to_vec()),
            Op::MeanRows(x) => {
                let n = self.value(*x).rows();
                let g: Vec<f64> = gout.iter().map(|g| g / n as f64).collect();
                acc(*x, g.repeat(n));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    acc(p, gout[off..off + len].to_vec());
                    off += len;
                }
            }
            Op::SelectRows(x, idx) => {
                let vx = self.value(*x);
                let d = vx.last_dim();
                let mut gx = vec![0.0; vx.len()];
                for (r, &i) in idx.iter().enumerate() {
                    gx[i * d..(i + 1) * d]
                        .iter_mut()
                        .zip(&gout[r * d..(r + 1) * d])
                        .for_each(|(a, b)| *a += b);
                }
                acc(*x, gx);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                group,
                probs,
            } => {
                let (heads, group) = (*heads, *group);
                let (rows, d) = matrix_dims(self.value(*q));
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (dq, dk, dv) = (
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                );
                let mut gq = vec![0.0; rows * d];
                let mut gk = vec![0.0; rows * d];
                let mut gv = vec![0.0; rows * d];
                let mut dp = vec![0.0; group];
                for g in 0..rows / group {
                    let base = g * group;
                    for h in 0..heads {
                        let col = h * dh;
                        let at = |r: usize| (base + r) * d + col;
                        for i in 0..group {
                            let p_off = ((g * heads + h) * group + i) * group;
                            let p = &probs[p_off..p_off + group];
                            let go = &gout[at(i)..at(i) + dh];
                            for j in 0..group {
                                dp[j] = crate::tensor::dot(go, &dv[at(j)..at(j) + dh]);
                                gv[at(j)..at(j) + dh]
                                    .iter_mut()
                                    .zip(go)
                                    .for_each(|(o, x)| *o += p[j] * x);
                            }
                            let pd: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                            for j in 0..group {
                                let ds = p[j] * (dp[j] - pd) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                for c in 0..dh {
                                    gq[at(i) + c] += ds * dk[at(j) + c];
                                    gk[at(j) + c] += ds * dq[at(i) + c];
                                }
                            }
                        }
                    }
                }
                acc(*q, gq);
                acc(*k, gk);
                acc(*v, gv);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let b = labels.len();
                let c = probs.len() / b;
                let scale = gout[0] / b as f64;
                let mut g: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &y) in labels.iter().enumerate() {
                    g[r * c + y] -= scale;
                }
                acc(*logits, g);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                acc(*x, vec![gout[0]; n]);
            }
            #[cfg(test)]
            Op::BrokenSquare(x) => {
                // Correct rule is 2x; this one drops the factor of two.
                let vx = self.value(*x).data();
                acc(*x, gout.iter().zip(vx).map(|(g, v)| g * v).collect());
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<usize, Var>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` requires gradients and
    /// the loss depends on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for a tensor previously bound with [`Graph::param`].
    pub fn of_param(&self, t: &Tensor) -> Option<&[f64]> {
        self.params.get(&param_key(t)).and_then(|&v| self.get(v))
    }

    /// Accumulates into `t.grad` when the loss reached it.
    pub fn accumulate_into(&self, t: &mut Tensor) -> Result<()> {
        let key = param_key(t);
        if let Some(g) = self.params.get(&key).and_then(|&v| self.get(v)) {
            let g = g.to_vec();
            t.accumulate_grad(&g)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn scalar(g: &Graph, v: Var) -> f64 {
        g.value(v).data()[0]
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![3.0]));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn independent_input_has_zero_or_no_gradient() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![3.0]));
        let c = g.constant(Tensor::vector(vec![2.0]));
        let y = g.mul(c, c).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.get(x).map_or(true, |gx| gx == [0.0]));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(XmicError::NotScalar(_))));
    }

    #[test]
    fn constants_never_get_gradients() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::vector(vec![2.0, 1.0]));
        let x = g.variable(Tensor::vector(vec![1.0, 1.0]));
        let y = g.dot(c, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap(), &[2.0, 1.0]);
    }

    #[test]
    fn reused_node_accumulates_additively() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::vector(vec![2.0]));
        let a = g.scale(x, 3.0);
        let b = g.add(a, x).unwrap();
        let y = g.add(b, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[5.0]);
    }

    #[test]
    fn param_binding_is_deduplicated() {
        let w = Tensor::vector(vec![1.0, -2.0]).with_requires_grad(true);
        let mut g = Graph::new();
        let a = g.param(&w);
        let b = g.param(&w);
        assert_eq!(a, b);
        let y = g.dot(a, b).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.of_param(&w).unwrap(), &[2.0, -4.0]);
    }

    #[test]
    fn l2_normalize_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![3.0, 4.0]));
        let y = g.l2_normalize(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.6, 0.8]);
        let e = g.constant(Tensor::vector(vec![1.0, 0.0, 0.0]));
        let y = g.l2_normalize(e).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.0, 0.0]);
        let z = g.constant(Tensor::vector(vec![0.0, 0.0]));
        assert!(matches!(g.l2_normalize(z), Err(XmicError::ZeroNorm { .. })));
    }

    #[test]
    fn mean_rows_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let m = g.mean_rows(x);
        assert_eq!(g.value(m).data(), &[2.0, 3.0]);
        assert_eq!(g.shape(m), &[2]);
        let one = g.constant(Tensor::from_rows(&[vec![5.0, 6.0]]));
        let m = g.mean_rows(one);
        assert_eq!(g.value(m).data(), &[5.0, 6.0]);
        let rep = g.constant(Tensor::from_rows(&vec![vec![0.3, -1.7, 2.5]; 7]));
        let m = g.mean_rows(rep);
        for (a, b) in g.value(m).data().iter().zip([0.3, -1.7, 2.5]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let gain = g.constant(Tensor::ones(&[3]));
        let bias = g.constant(Tensor::zeros(&[3]));
        let x = g.constant(Tensor::vector(vec![4.0, 4.0, 4.0]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);

        let gain2 = g.constant(Tensor::ones(&[2]));
        let bias2 = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(Tensor::vector(vec![1.0, -1.0]));
        let y = g.layer_norm(x, gain2, bias2).unwrap();
        assert_abs_diff_eq!(g.value(y).data()[0], 1.0, epsilon = 1e-5);
        assert_abs_diff_eq!(g.value(y).data()[1], -1.0, epsilon = 1e-5);

        let zero_gain = g.constant(Tensor::zeros(&[3]));
        let b = g.constant(Tensor::vector(vec![0.5, -0.25, 2.0]));
        let x = g.constant(Tensor::vector(vec![7.0, -3.0, 1.0]));
        let y = g.layer_norm(x, zero_gain, b).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, -0.25, 2.0]);
    }

    #[test]
    fn quick_gelu_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 10.0, 1.0]));
        let y = g.quick_gelu(x);
        let v = g.value(y).data();
        assert_eq!(v[0], 0.0);
        assert_abs_diff_eq!(v[1], 10.0, epsilon = 1e-6);
        // 1 / (1 + e^-1.702) to five places
        assert_abs_diff_eq!(v[2], 0.84579, epsilon = 1e-4);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[1, 2]));
        let l = g.cross_entropy(z, &[1]).unwrap();
        assert_abs_diff_eq!(scalar(&g, l), 2f64.ln(), epsilon = 1e-12);
        for c in [1usize, 3, 7, 100] {
            let z = g.constant(Tensor::zeros(&[2, c]));
            let l = g.cross_entropy(z, &[0, c - 1]).unwrap();
            assert_abs_diff_eq!(scalar(&g, l), (c as f64).ln(), epsilon = 1e-12);
        }
        let z = g.constant(Tensor::from_rows(&[vec![0.0, 50.0, 0.0]]));
        let l = g.cross_entropy(z, &[1]).unwrap();
        assert!(scalar(&g, l) < 1e-20);
        let z = g.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(
            g.cross_entropy(z, &[2]),
            Err(XmicError::BadLabel { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn attention_rejects_bad_heads() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 12]));
        assert!(matches!(
            g.attention(x, x, x, 8, 2),
            Err(XmicError::BadShape(_))
        ));
    }

    #[test]
    fn select_and_concat() {
        let mut g = Graph::new();
        let a = g.variable(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = g.constant(Tensor::from_rows(&[vec![5.0, 6.0]]));
        let c = g.concat_rows(&[a, b]).unwrap();
        assert_eq!(g.shape(c), &[3, 2]);
        let s = g.select_rows(c, &[2, 0, 0]).unwrap();
        assert_eq!(g.value(s).data(), &[5.0, 6.0, 1.0, 2.0, 1.0, 2.0]);
        let y = g.sum(s);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[2.0, 2.0, 0.0, 0.0]);
        assert!(g.concat_rows(&[]).is_err());
    }
}
