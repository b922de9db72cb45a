//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its variables. Parameters
//! are read from a borrowed [`ParamStore`], so one store can back many
//! short-lived graphs (one per training step or sampling step).

use std::sync::Arc;

use super::params::{ParamId, ParamStore};
use super::tensor::{gemm_nn, gemm_nt, gemm_tn, split_axis, Broadcast, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Silu(Var),
    Relu(Var),
    Sin(Var),
    Cos(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Gather {
        x: Var,
        axis: usize,
        idx: Arc<[usize]>,
    },
    MaxAxis {
        x: Var,
        axis: usize,
        argmax: Vec<usize>,
    },
    SumAxis {
        x: Var,
        axis: usize,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    SumAll(Var),
    MeanAll(Var),
    MseLoss(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

/// Gradients of one backward pass.
pub struct Gradients {
    node_grads: Vec<Option<Vec<f64>>>,
    param_vars: Vec<Option<Var>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to a variable; `None` when it does not reach it.
    pub fn wrt(&self, v: Var) -> Option<Tensor> {
        let g = self.node_grads[v.0].as_ref()?;
        Some(Tensor::new(&self.shapes[v.0], g.clone()).expect("gradient shape"))
    }

    /// Gradients aligned with the store's parameters.
    pub fn params(&self) -> Vec<Option<Tensor>> {
        self.param_vars
            .iter()
            .map(|v| v.and_then(|v| self.wrt(v)))
            .collect()
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let nd = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..data.len() {
        out.push(data[off]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::Shape(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok(())
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked (used by gradient checks).
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(self.store.get(id).clone(), Op::Param, true);
        self.param_vars[id.0] = Some(v);
        v
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out = if ta.shape() == tb.shape() {
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(ta.shape(), data)?
        } else {
            let bc = Broadcast::new(ta.shape(), tb.shape())?;
            let (da, db) = (ta.data(), tb.data());
            let mut data = Vec::with_capacity(bc.runs.len() * bc.run_len);
            for &(oa, ob) in &bc.runs {
                for i in 0..bc.run_len {
                    data.push(f(da[oa + i * bc.inner.0], db[ob + i * bc.inner.1]));
                }
            }
            Tensor::new(&bc.out_shape, data)?
        };
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = &self.nodes[a.0].value;
        let out =
            Tensor::new(t.shape(), t.data().iter().map(|x| x * c).collect()).expect("same shape");
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = &self.nodes[a.0].value;
        let out =
            Tensor::new(t.shape(), t.data().iter().map(|&x| f(x)).collect()).expect("same shape");
        let ng = self.ng(a);
        self.push(out, op, ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, f64::sin, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, f64::cos, Op::Cos(a))
    }

    /// `[..., k] x [k, n] -> [..., n]`
    pub fn matmul(&mut self, a: Var, w: Var) -> Result<Var> {
        let (ta, tw) = (&self.nodes[a.0].value, &self.nodes[w.0].value);
        if tw.ndim() != 2 || ta.ndim() == 0 || ta.shape()[ta.ndim() - 1] != tw.shape()[0] {
            return Err(Error::Shape(format!(
                "matmul {:?} x {:?}",
                ta.shape(),
                tw.shape()
            )));
        }
        let (k, n) = (tw.shape()[0], tw.shape()[1]);
        let m = ta.numel() / k;
        let mut out = vec![0.0; m * n];
        gemm_nn(ta.data(), tw.data(), &mut out, m, k, n);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().expect("ndim >= 1") = n;
        let ng = self.ng(a) || self.ng(w);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul(a, w), ng))
    }

    /// Batched `[..., m, k] x [..., k, n]`, or `[..., m, k] x [..., n, k]^T`
    /// when `trans_b`. Leading dimensions must match exactly.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() < 2 || sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::Shape(format!("bmm {sa:?} x {sb:?}")));
        }
        let nd = sa.len();
        let (m, k) = (sa[nd - 2], sa[nd - 1]);
        let (kb, n) = if trans_b {
            (sb[nd - 1], sb[nd - 2])
        } else {
            (sb[nd - 2], sb[nd - 1])
        };
        if k != kb {
            return Err(Error::Shape(format!(
                "bmm inner dimensions {sa:?} x {sb:?} (trans_b={trans_b})"
            )));
        }
        let batch: usize = sa[..nd - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        for i in 0..batch {
            let aa = &ta.data()[i * m * k..(i + 1) * m * k];
            let bb = &tb.data()[i * k * n..(i + 1) * k * n];
            let cc = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                gemm_nt(aa, bb, cc, m, k, n);
            } else {
                gemm_nn(aa, bb, cc, m, k, n);
            }
        }
        let mut shape = sa.to_vec();
        shape[nd - 1] = n;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::BatchMatMul { a, b, trans_b },
            ng,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if t.ndim() == 0 {
            return Err(Error::Shape("softmax of a scalar".into()));
        }
        let n = t.shape()[t.ndim() - 1];
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let out = Tensor::new(t.shape(), out)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::Softmax(a), ng))
    }

    /// Normalization over the last axis without affine parameters.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if t.ndim() == 0 {
            return Err(Error::Shape("layer norm of a scalar".into()));
        }
        let n = t.shape()[t.ndim() - 1];
        let mut out = t.data().to_vec();
        let mut rstd = Vec::with_capacity(out.len() / n);
        for row in out.chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * r;
            }
            rstd.push(r);
        }
        let out = Tensor::new(t.shape(), out)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::LayerNorm { x: a, rstd }, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.nodes[a.0].value.clone().reshaped(shape)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let mut seen = vec![false; t.ndim()];
        if perm.len() != t.ndim()
            || perm
                .iter()
                .any(|&p| p >= t.ndim() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::Shape(format!(
                "invalid permutation {perm:?} for {:?}",
                t.shape()
            )));
        }
        let (data, shape) = permute_data(t.data(), t.shape(), perm);
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::new(&shape, data)?,
            Op::Permute(a, perm.to_vec()),
            ng,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let base = self.shape(*first).to_vec();
        check_axis(&base, axis)?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter()
                    .enumerate()
                    .any(|(i, &d)| i != axis && d != base[i])
            {
                return Err(Error::Shape(format!(
                    "concat {base:?} with {s:?} along {axis}"
                )));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = &self.nodes[p.0].value;
                let n = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        check_axis(t.shape(), axis)?;
        if start >= end || end > t.shape()[axis] {
            return Err(Error::Shape(format!(
                "slice {start}..{end} of axis {axis} in {:?}",
                t.shape()
            )));
        }
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let len = end - start;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&t.data()[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Slice { x: a, axis, start },
            ng,
        ))
    }

    /// Selects entries `idx` along `axis` (repeats allowed).
    pub fn gather(&mut self, a: Var, axis: usize, idx: Arc<[usize]>) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        check_axis(t.shape(), axis)?;
        let (outer, n, inner) = split_axis(t.shape(), axis);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Shape(format!("gather index {bad} out of range {n}")));
        }
        let mut out = Vec::with_capacity(outer * idx.len() * inner);
        for o in 0..outer {
            for &i in idx.iter() {
                out.extend_from_slice(&t.data()[(o * n + i) * inner..(o * n + i + 1) * inner]);
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = idx.len();
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Gather { x: a, axis, idx },
            ng,
        ))
    }

    fn reduce_axis(&self, a: Var, axis: usize) -> Result<(Vec<usize>, usize, usize, usize)> {
        let s = self.shape(a);
        check_axis(s, axis)?;
        let (outer, n, inner) = split_axis(s, axis);
        let mut shape = s.to_vec();
        shape.remove(axis);
        Ok((shape, outer, n, inner))
    }

    /// Maximum along `axis` (removed); ties resolve to the lowest index.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (shape, outer, n, inner) = self.reduce_axis(a, axis)?;
        let d = self.nodes[a.0].value.data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &d[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (i, &x) in row.iter().enumerate() {
                    if x > out[o * inner + i] {
                        out[o * inner + i] = x;
                        arg[o * inner + i] = j;
                    }
                }
            }
        }
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::MaxAxis {
                x: a,
                axis,
                argmax: arg,
            },
            ng,
        ))
    }

    fn sum_axis_data(&self, a: Var, axis: usize) -> Result<(Vec<usize>, Vec<f64>, usize)> {
        let (shape, outer, n, inner) = self.reduce_axis(a, axis)?;
        let d = self.nodes[a.0].value.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &d[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (acc, &x) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += x;
                }
            }
        }
        Ok((shape, out, n))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (shape, out, _) = self.sum_axis_data(a, axis)?;
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(&shape, out)?, Op::SumAxis { x: a, axis }, ng))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (shape, mut out, n) = self.sum_axis_data(a, axis)?;
        out.iter_mut().for_each(|x| *x /= n as f64);
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MeanAxis { x: a, axis }, ng))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let s = t.data().iter().sum::<f64>() / t.numel().max(1) as f64;
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::MeanAll(a), ng)
    }

    /// Mean of squared differences over all elements.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "mse {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let s = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / ta.numel().max(1) as f64;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::scalar(s), Op::MseLoss(a, b), ng))
    }

    /// Reverse pass from a scalar.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.backprop(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            node_grads: grads,
            param_vars: self.param_vars.clone(),
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                let is_mul = matches!(node.op, Op::Mul(..));
                let (ta, tb) = (val(a), val(b));
                if ta.shape() == tb.shape() {
                    if let Some(ga) = self.slot(grads, a) {
                        for (k, x) in ga.iter_mut().enumerate() {
                            *x += if is_mul { g[k] * tb.data()[k] } else { g[k] };
                        }
                    }
                    if let Some(gb) = self.slot(grads, b) {
                        for (k, x) in gb.iter_mut().enumerate() {
                            *x += if is_mul {
                                g[k] * ta.data()[k]
                            } else {
                                sign * g[k]
                            };
                        }
                    }
                    return;
                }
                let bc = Broadcast::new(ta.shape(), tb.shape()).expect("checked in forward");
                if let Some(ga) = self.slot(grads, a) {
                    for (r, &(oa, ob)) in bc.runs.iter().enumerate() {
                        for k in 0..bc.run_len {
                            let go = g[r * bc.run_len + k];
                            ga[oa + k * bc.inner.0] += if is_mul {
                                go * tb.data()[ob + k * bc.inner.1]
                            } else {
                                go
                            };
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    for (r, &(oa, ob)) in bc.runs.iter().enumerate() {
                        for k in 0..bc.run_len {
                            let go = g[r * bc.run_len + k];
                            gb[ob + k * bc.inner.1] += if is_mul {
                                go * ta.data()[oa + k * bc.inner.0]
                            } else {
                                sign * go
                            };
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (x, &go) in ga.iter_mut().zip(g) {
                        *x += c * go;
                    }
                }
            }
            Op::MatMul(a, w) => {
                let (ta, tw) = (val(*a), val(*w));
                let (k, n) = (tw.shape()[0], tw.shape()[1]);
                let m = ta.numel() / k;
                if let Some(ga) = self.slot(grads, *a) {
                    gemm_nt(g, tw.data(), ga, m, n, k);
                }
                if let Some(gw) = self.slot(grads, *w) {
                    gemm_tn(ta.data(), g, gw, m, k, n);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (ta, tb) = (val(*a), val(*b));
                let sa = ta.shape();
                let nd = sa.len();
                let (m, k) = (sa[nd - 2], sa[nd - 1]);
                let n = node.value.shape()[nd - 1];
                let batch: usize = sa[..nd - 2].iter().product();
                if let Some(ga) = self.slot(grads, *a) {
                    for bi in 0..batch {
                        let gg = &g[bi * m * n..(bi + 1) * m * n];
                        let bb = &tb.data()[bi * k * n..(bi + 1) * k * n];
                        let out = &mut ga[bi * m * k..(bi + 1) * m * k];
                        if *trans_b {
                            gemm_nn(gg, bb, out, m, n, k);
                        } else {
                            gemm_nt(gg, bb, out, m, n, k);
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for bi in 0..batch {
                        let gg = &g[bi * m * n..(bi + 1) * m * n];
                        let aa = &ta.data()[bi * m * k..(bi + 1) * m * k];
                        let out = &mut gb[bi * k * n..(bi + 1) * k * n];
                        if *trans_b {
                            gemm_tn(gg, aa, out, m, n, k);
                        } else {
                            gemm_tn(aa, gg, out, m, k, n);
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = node.value.shape()[node.value.ndim() - 1];
                if let Some(ga) = self.slot(grads, *a) {
                    for ((gr, yr), out) in g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        for ((o, &gi), &yi) in out.iter_mut().zip(gr).zip(yr) {
                            *o += yi * (gi - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, rstd } => {
                let xhat = node.value.data();
                let n = node.value.shape()[node.value.ndim() - 1];
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, ((gr, xr), out)) in g
                        .chunks(n)
                        .zip(xhat.chunks(n))
                        .zip(gx.chunks_mut(n))
                        .enumerate()
                    {
                        let mg = gr.iter().sum::<f64>() / n as f64;
                        let mgx = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for ((o, &gi), &xi) in out.iter_mut().zip(gr).zip(xr) {
                            *o += rstd[r] * (gi - mg - xi * mgx);
                        }
                    }
                }
            }
            Op::Gelu(a) | Op::Silu(a) | Op::Relu(a) | Op::Sin(a) | Op::Cos(a) => {
                let x = val(*a).data();
                let d: fn(f64) -> f64 = match node.op {
                    Op::Gelu(_) => gelu_grad,
                    Op::Silu(_) => |x| {
                        let s = sigmoid(x);
                        s * (1.0 + x * (1.0 - s))
                    },
                    Op::Relu(_) => |x| if x > 0.0 { 1.0 } else { 0.0 },
                    Op::Sin(_) => f64::cos,
                    _ => |x: f64| -x.sin(),
                };
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, &gi), &xi) in ga.iter_mut().zip(g).zip(x) {
                        *o += gi * d(xi);
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (o, &gi) in ga.iter_mut().zip(g) {
                        *o += gi;
                    }
                }
            }
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (back, _) = permute_data(g, node.value.shape(), &inv);
                if let Some(ga) = self.slot(grads, *a) {
                    for (o, gi) in ga.iter_mut().zip(back) {
                        *o += gi;
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut start = 0;
                for &p in parts {
                    let n = val(p).shape()[*axis];
                    if let Some(gp) = self.slot(grads, p) {
                        for o in 0..outer {
                            let src =
                                &g[(o * total + start) * inner..(o * total + start + n) * inner];
                            for (d, &s) in
                                gp[o * n * inner..(o + 1) * n * inner].iter_mut().zip(src)
                            {
                                *d += s;
                            }
                        }
                    }
                    start += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, n, inner) = split_axis(val(*x).shape(), *axis);
                let len = node.value.shape()[*axis];
                if let Some(gx) = self.slot(grads, *x) {
                    for o in 0..outer {
                        let dst = &mut gx[(o * n + start) * inner..(o * n + start + len) * inner];
                        for (d, &s) in dst
                            .iter_mut()
                            .zip(&g[o * len * inner..(o + 1) * len * inner])
                        {
                            *d += s;
                        }
                    }
                }
            }
            Op::Gather { x, axis, idx } => {
                let (outer, n, inner) = split_axis(val(*x).shape(), *axis);
                if let Some(gx) = self.slot(grads, *x) {
                    let m = idx.len();
                    for o in 0..outer {
                        for (j, &src) in idx.iter().enumerate() {
                            let from = &g[(o * m + j) * inner..(o * m + j + 1) * inner];
                            for (d, &s) in gx[(o * n + src) * inner..(o * n + src + 1) * inner]
                                .iter_mut()
                                .zip(from)
                            {
                                *d += s;
                            }
                        }
                    }
                }
            }
            Op::MaxAxis { x, axis, argmax } => {
                let (outer, n, inner) = split_axis(val(*x).shape(), *axis);
                if let Some(gx) = self.slot(grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let j = argmax[o * inner + i];
                            gx[(o * n + j) * inner + i] += g[o * inner + i];
                        }
                    }
                }
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let (outer, n, inner) = split_axis(val(*x).shape(), *axis);
                let c = if matches!(node.op, Op::MeanAxis { .. }) {
                    1.0 / n as f64
                } else {
                    1.0
                };
                if let Some(gx) = self.slot(grads, *x) {
                    for o in 0..outer {
                        for j in 0..n {
                            for i in 0..inner {
                                gx[(o * n + j) * inner + i] += c * g[o * inner + i];
                            }
                        }
                    }
                }
            }
            Op::SumAll(a) | Op::MeanAll(a) => {
                let n = val(*a).numel();
                let c = if matches!(node.op, Op::MeanAll(_)) {
                    g[0] / n.max(1) as f64
                } else {
                    g[0]
                };
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += c);
                }
            }
            Op::MseLoss(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let c = 2.0 * g[0] / ta.numel().max(1) as f64;
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, x), y) in ga.iter_mut().zip(ta.data()).zip(tb.data()) {
                        *o += c * (x - y);
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((o, x), y) in gb.iter_mut().zip(ta.data()).zip(tb.data()) {
                        *o -= c * (x - y);
                    }
                }
            }
        }
    }
}
