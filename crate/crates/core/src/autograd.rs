//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends one node to the [`Graph`]; a node's parents always
//! have smaller indices, so walking the tape from the end visits each node
//! once in reverse topological order.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{self, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        normed: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax {
        x: Var,
        outer: usize,
        axis: usize,
        inner: usize,
    },
    Mean {
        x: Var,
        outer: usize,
        axis: usize,
        inner: usize,
    },
    Sum(Var),
    Transpose(Var),
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        outer: usize,
        widths: Vec<usize>,
    },
    Slice {
        x: Var,
        outer: usize,
        full: usize,
        offset: usize,
        width: usize,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
        cols: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
    FrobeniusSq(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        nq: usize,
        nk: usize,
        heads: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// The computation tape: node values, recorded operations and adjoints.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Index {
            what: "axis",
            index: axis,
            bound: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + math::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + math::erf(x * core::f64::consts::FRAC_1_SQRT_2));
    let pdf = math::exp(-0.5 * x * x) / math::sqrt(2.0 * core::f64::consts::PI);
    cdf + x * pdf
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

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.input(value, false)
    }

    /// A leaf; when `requires_grad` is set its adjoint is kept after `backward`.
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf whose gradient is later collected by [`ParamStore::accumulate`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.input(store.value(id).clone(), true);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.nodes.iter().filter_map(|n| match (n.param, &n.grad) {
            (Some(id), Some(g)) => Some((id, g.as_slice())),
            _ => None,
        })
    }

    /// Attention probabilities `[batch, heads, nq, nk]` saved by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let av = self.value(a);
        Tensor::new(
            av.shape().to_vec(),
            av.data().iter().map(|x| f(*x)).collect(),
        )
        .expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.map(a, |x| x * factor);
        self.push(value, Op::Scale(a, factor), &[a])
    }

    /// Adds a length-C vector to every row of a tensor whose last dimension is C.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let cols = *self.shape(x).last().unwrap_or(&1);
        if self.shape(bias) != [cols] {
            return Err(Error::dim("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(cols) {
            for (o, bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        Ok(self.push(value, Op::AddRow(x, bias), &[x, bias]))
    }

    /// `x · w + b` for row-major `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.map(a, gelu);
        self.push(value, Op::Gelu(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.map(a, |x| if x > 0.0 { x } else { 0.0 });
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.map(a, math::sigmoid);
        self.push(value, Op::Sigmoid(a), &[a])
    }

    /// Normalizes each row over the last dimension, then applies the optional affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>) -> Result<Var> {
        let cols = *self.shape(x).last().unwrap_or(&1);
        for p in [gamma, beta].into_iter().flatten() {
            if self.shape(p) != [cols] {
                return Err(Error::dim("layer_norm", self.shape(x), self.shape(p)));
            }
        }
        let xv = self.value(x);
        let rows = xv.len() / cols;
        let mut normed = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv.data()[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / math::sqrt(var + LAYER_NORM_EPS);
            rstd[r] = rs;
            for (o, v) in normed[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let mut out = normed.clone();
        if let Some(g) = gamma {
            let gv = self.value(g).data();
            for row in out.chunks_mut(cols) {
                row.iter_mut().zip(gv).for_each(|(o, s)| *o *= s);
            }
        }
        if let Some(b) = beta {
            let bv = self.value(b).data();
            for row in out.chunks_mut(cols) {
                row.iter_mut().zip(bv).for_each(|(o, s)| *o += s);
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let mut parents = vec![x];
        parents.extend(gamma);
        parents.extend(beta);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                rstd,
            },
            &parents,
        ))
    }

    /// Softmax along `axis`, stabilized by subtracting the maximum.
    ///
    /// NaN inputs propagate to NaN outputs.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = split_axis(self.shape(x), axis)?;
        let xv = self.value(x);
        let mut out = xv.data().to_vec();
        for o in 0..outer {
            for t in 0..inner {
                let base = o * n * inner + t;
                let max = (0..n)
                    .map(|a| xv.data()[base + a * inner])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for a in 0..n {
                    let e = math::exp(xv.data()[base + a * inner] - max);
                    out[base + a * inner] = e;
                    sum += e;
                }
                for a in 0..n {
                    out[base + a * inner] /= sum;
                }
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::Softmax {
                x,
                outer,
                axis: n,
                inner,
            },
            &[x],
        ))
    }

    /// Arithmetic mean along `axis`; the axis is removed from the shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis)?;
        let xv = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..n {
                let src = &xv[(o * n + a) * inner..(o * n + a + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        let mut new_shape = shape.clone();
        new_shape.remove(axis);
        let value = Tensor::new(new_shape, out)?;
        Ok(self.push(
            value,
            Op::Mean {
                x,
                outer,
                axis: n,
                inner,
            },
            &[x],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Concatenates tensors that agree on every dimension except `axis`.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Validation("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        let (outer, _, inner) = split_axis(&base, axis)?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total_axis = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", &base, s));
            }
            widths.push(s[axis] * inner);
            total_axis += s[axis];
        }
        let row: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (p, w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p).data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = total_axis;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                widths,
            },
            parts,
        ))
    }

    /// Elements `[start, start + len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis)?;
        if len == 0 || start + len > n {
            return Err(Error::dim("slice", &shape, &[start, len]));
        }
        let full = n * inner;
        let (offset, width) = (start * inner, len * inner);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * width);
        for o in 0..outer {
            out.extend_from_slice(&xv[o * full + offset..o * full + offset + width]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let value = Tensor::new(new_shape, out)?;
        Ok(self.push(
            value,
            Op::Slice {
                x,
                outer,
                full,
                offset,
                width,
            },
            &[x],
        ))
    }

    /// Rows of a matrix picked by `index` (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2()?;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * cols);
        for &r in index {
            if r >= rows {
                return Err(Error::Index {
                    what: "row",
                    index: r,
                    bound: rows,
                });
            }
            out.extend_from_slice(&xv[r * cols..(r + 1) * cols]);
        }
        let value = Tensor::new(vec![index.len(), cols], out)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                index: index.to_vec(),
                cols,
            },
            &[x],
        ))
    }

    /// Mean over rows of `−log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (b, s) = self.value(logits).dims2()?;
        if targets.len() != b {
            return Err(Error::dim("cross_entropy", &[b, s], &[targets.len()]));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; b * s];
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= s {
                return Err(Error::Index {
                    what: "target class",
                    index: t,
                    bound: s,
                });
            }
            let row = &lv[r * s..(r + 1) * s];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| math::exp(v - max)).sum();
            let lse = max + math::ln(sum);
            loss += lse - row[t];
            for (p, v) in probs[r * s..(r + 1) * s].iter_mut().zip(row) {
                *p = math::exp(v - lse);
            }
        }
        let value = Tensor::scalar(loss / b as f64);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Mean binary cross-entropy of sigmoid(logits) against 0/1 targets,
    /// in the form `max(x, 0) − x·y + ln(1 + e^{−|x|})`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        if self.shape(logits) != targets.shape() {
            return Err(Error::dim(
                "bce_with_logits",
                self.shape(logits),
                targets.shape(),
            ));
        }
        if let Some(bad) = targets.data().iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(Error::Validation(alloc::format!(
                "binary cross-entropy target {bad} is not 0 or 1"
            )));
        }
        let lv = self.value(logits).data();
        let total: f64 = lv
            .iter()
            .zip(targets.data())
            .map(|(&x, &y)| x.max(0.0) - x * y + math::ln1p(math::exp(-x.abs())))
            .sum();
        let value = Tensor::scalar(total / lv.len() as f64);
        Ok(self.push(
            value,
            Op::BceWithLogits {
                logits,
                targets: targets.data().to_vec(),
            },
            &[logits],
        ))
    }

    pub fn frobenius_norm_sq(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(s), Op::FrobeniusSq(x), &[x])
    }

    /// Multi-head scaled dot-product attention over a batch of sequences.
    ///
    /// `q` is `[batch·nq, D]`, `k` and `v` are `[batch·nk, D]`; `D` splits into
    /// `heads` contiguous column blocks. Output is `[batch·nq, D]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, heads: usize) -> Result<Var> {
        let (rq, d) = self.value(q).dims2()?;
        let (rk, dk) = self.value(k).dims2()?;
        if self.shape(k) != self.shape(v) || d != dk || heads == 0 || d % heads != 0 {
            return Err(Error::dim("attention", self.shape(q), self.shape(k)));
        }
        if batch == 0 || rq % batch != 0 || rk % batch != 0 {
            return Err(Error::dim("attention", &[rq, rk], &[batch]));
        }
        let (nq, nk) = (rq / batch, rk / batch);
        let hd = d / heads;
        let scale = 1.0 / math::sqrt(hd as f64);
        let (qv, kv, vv) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![0.0; batch * heads * nq * nk];
        let mut out = vec![0.0; rq * d];
        for b in 0..batch {
            for h in 0..heads {
                let col = h * hd;
                for i in 0..nq {
                    let qrow = &qv[(b * nq + i) * d + col..(b * nq + i) * d + col + hd];
                    let p = &mut probs
                        [((b * heads + h) * nq + i) * nk..((b * heads + h) * nq + i + 1) * nk];
                    let mut max = f64::NEG_INFINITY;
                    for (j, pj) in p.iter_mut().enumerate() {
                        let krow = &kv[(b * nk + j) * d + col..(b * nk + j) * d + col + hd];
                        *pj = tensor::dot(qrow, krow) * scale;
                        max = max.max(*pj);
                    }
                    let mut sum = 0.0;
                    for pj in p.iter_mut() {
                        *pj = math::exp(*pj - max);
                        sum += *pj;
                    }
                    let orow = &mut out[(b * nq + i) * d + col..(b * nq + i) * d + col + hd];
                    for (j, pj) in p.iter_mut().enumerate() {
                        *pj /= sum;
                        let vrow = &vv[(b * nk + j) * d + col..(b * nk + j) * d + col + hd];
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += *pj * x;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![rq, d], out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                batch,
                nq,
                nk,
                heads,
                probs,
            },
            &[q, k, v],
        ))
    }

    // ----------------------------------------------------------- backward

    /// Clears stored adjoints, then propagates `d root / d node` to every
    /// node that requires a gradient. `root` must hold a single element.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::dim("backward", self.shape(root), &[]));
        }
        self.backward_with_seed(root, vec![1.0])
    }

    /// Like [`Graph::backward`] but seeds the root adjoint explicitly.
    pub fn backward_with_seed(&mut self, root: Var, seed: Vec<f64>) -> Result<()> {
        if seed.len() != self.value(root).len() {
            return Err(Error::dim("backward", self.shape(root), &[seed.len()]));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[root.0].grad = Some(seed);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.local_grads(i, &g);
            self.nodes[i].grad = Some(g);
            for (parent, contrib) in contributions {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut self.nodes[parent.0].grad {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().expect("2d");
                let n = self.value(*b).shape()[1];
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    tensor::matmul_nt_acc(g, self.value(*b).data(), m, n, k, &mut da);
                    out.push((*a, da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    tensor::matmul_tn_acc(self.value(*a).data(), g, m, k, n, &mut db);
                    out.push((*b, db));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.iter().map(|x| -x).collect()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    out.push((*a, g.iter().zip(bv).map(|(g, y)| g * y).collect()));
                }
                if self.wants(*b) {
                    out.push((*b, g.iter().zip(av).map(|(g, x)| g * x).collect()));
                }
            }
            Op::Scale(a, f) => out.push((*a, g.iter().map(|x| x * f).collect())),
            Op::AddRow(x, b) => {
                out.push((*x, g.to_vec()));
                if self.wants(*b) {
                    let cols = self.value(*b).len();
                    let mut db = vec![0.0; cols];
                    for row in g.chunks(cols) {
                        db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                    }
                    out.push((*b, db));
                }
            }
            Op::Gelu(a) => {
                let av = self.value(*a).data();
                out.push((
                    *a,
                    g.iter().zip(av).map(|(g, x)| g * gelu_grad(*x)).collect(),
                ));
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                out.push((
                    *a,
                    g.iter()
                        .zip(av)
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect(),
                ));
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                out.push((
                    *a,
                    g.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect(),
                ));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                rstd,
            } => {
                let cols = *node.value.shape().last().unwrap_or(&1);
                let gv = gamma.map(|p| self.value(p).data());
                if let Some(b) = beta.filter(|b| self.wants(*b)) {
                    let mut db = vec![0.0; cols];
                    for row in g.chunks(cols) {
                        db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                    }
                    out.push((b, db));
                }
                if let Some(gm) = gamma.filter(|p| self.wants(*p)) {
                    let mut dg = vec![0.0; cols];
                    for (grow, nrow) in g.chunks(cols).zip(normed.chunks(cols)) {
                        for ((d, gr), nr) in dg.iter_mut().zip(grow).zip(nrow) {
                            *d += gr * nr;
                        }
                    }
                    out.push((gm, dg));
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; g.len()];
                    let mut dn = vec![0.0; cols];
                    for (r, rs) in rstd.iter().enumerate() {
                        let grow = &g[r * cols..(r + 1) * cols];
                        let nrow = &normed[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            dn[c] = grow[c] * gv.map_or(1.0, |gv| gv[c]);
                        }
                        let mean_dn = dn.iter().sum::<f64>() / cols as f64;
                        let mean_dn_n =
                            dn.iter().zip(nrow).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for c in 0..cols {
                            dx[r * cols + c] = rs * (dn[c] - mean_dn - nrow[c] * mean_dn_n);
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::Softmax {
                x,
                outer,
                axis,
                inner,
            } => {
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for o in 0..*outer {
                    for t in 0..*inner {
                        let base = o * axis * inner + t;
                        let dotp: f64 = (0..*axis)
                            .map(|a| g[base + a * inner] * y[base + a * inner])
                            .sum();
                        for a in 0..*axis {
                            let idx = base + a * inner;
                            dx[idx] = y[idx] * (g[idx] - dotp);
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::Mean {
                x,
                outer,
                axis,
                inner,
            } => {
                let mut dx = vec![0.0; outer * axis * inner];
                let w = 1.0 / *axis as f64;
                for o in 0..*outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for a in 0..*axis {
                        let dst = &mut dx[(o * axis + a) * inner..(o * axis + a + 1) * inner];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d = s * w);
                    }
                }
                out.push((*x, dx));
            }
            Op::Sum(x) => out.push((*x, vec![g[0]; self.value(*x).len()])),
            Op::Transpose(x) => {
                let (m, n) = self.value(*x).dims2().expect("2d");
                out.push((*x, tensor::transpose(g, n, m)));
            }
            Op::Reshape(x) => out.push((*x, g.to_vec())),
            Op::Concat {
                parts,
                outer,
                widths,
            } => {
                let row: usize = widths.iter().sum();
                let mut offset = 0;
                for (p, w) in parts.iter().zip(widths) {
                    if self.wants(*p) {
                        let mut dp = Vec::with_capacity(outer * w);
                        for o in 0..*outer {
                            dp.extend_from_slice(&g[o * row + offset..o * row + offset + w]);
                        }
                        out.push((*p, dp));
                    }
                    offset += w;
                }
            }
            Op::Slice {
                x,
                outer,
                full,
                offset,
                width,
            } => {
                let mut dx = vec![0.0; outer * full];
                for o in 0..*outer {
                    dx[o * full + offset..o * full + offset + width]
                        .copy_from_slice(&g[o * width..(o + 1) * width]);
                }
                out.push((*x, dx));
            }
            Op::GatherRows { x, index, cols } => {
                let mut dx = vec![0.0; self.value(*x).len()];
                for (o, &r) in index.iter().enumerate() {
                    let src = &g[o * cols..(o + 1) * cols];
                    dx[r * cols..(r + 1) * cols]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, s)| *d += s);
                }
                out.push((*x, dx));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let b = targets.len();
                let s = probs.len() / b;
                let w = g[0] / b as f64;
                let mut dl: Vec<f64> = probs.iter().map(|p| p * w).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dl[r * s + t] -= w;
                }
                out.push((*logits, dl));
            }
            Op::BceWithLogits { logits, targets } => {
                let lv = self.value(*logits).data();
                let w = g[0] / lv.len() as f64;
                out.push((
                    *logits,
                    lv.iter()
                        .zip(targets)
                        .map(|(x, y)| (math::sigmoid(*x) - y) * w)
                        .collect(),
                ));
            }
            Op::FrobeniusSq(x) => {
                out.push((
                    *x,
                    self.value(*x)
                        .data()
                        .iter()
                        .map(|v| 2.0 * v * g[0])
                        .collect(),
                ));
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                nq,
                nk,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                );
                let d = self.value(*q).shape()[1];
                let hd = d / heads;
                let scale = 1.0 / math::sqrt(hd as f64);
                let mut dq = vec![0.0; qv.len()];
                let mut dk = vec![0.0; kv.len()];
                let mut dv = vec![0.0; vv.len()];
                let mut ds = vec![0.0; *nk];
                for b in 0..*batch {
                    for h in 0..*heads {
                        let col = h * hd;
                        for i in 0..*nq {
                            let qi = (b * nq + i) * d + col;
                            let grow = &g[qi..qi + hd];
                            let p = &probs[((b * heads + h) * nq + i) * nk
                                ..((b * heads + h) * nq + i + 1) * nk];
                            let mut weighted = 0.0;
                            for j in 0..*nk {
                                let vj = (b * nk + j) * d + col;
                                let dp = tensor::dot(grow, &vv[vj..vj + hd]);
                                ds[j] = dp;
                                weighted += dp * p[j];
                                dv[vj..vj + hd]
                                    .iter_mut()
                                    .zip(grow)
                                    .for_each(|(o, x)| *o += p[j] * x);
                            }
                            for j in 0..*nk {
                                let s = p[j] * (ds[j] - weighted) * scale;
                                let kj = (b * nk + j) * d + col;
                                for c in 0..hd {
                                    dq[qi + c] += s * kv[kj + c];
                                    dk[kj + c] += s * qv[qi + c];
                                }
                            }
                        }
                    }
                }
                out.push((*q, dq));
                out.push((*k, dk));
                out.push((*v, dv));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_tensor(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec())
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[4]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn softmax_is_stable_for_large_inputs() {
        let mut g = Graph::new();
        let x = g.constant(vec_tensor(&[1000.0, 1000.0]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_propagates_nan() {
        let mut g = Graph::new();
        let x = g.constant(vec_tensor(&[f64::NAN, 1.0]));
        let y = g.softmax(x, 0).unwrap();
        assert!(g.value(y).data().iter().all(|v| v.is_nan()));
    }

    #[test]
    fn softmax_rejects_bad_axis() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.softmax(x, 2), Err(Error::Index { .. })));
    }

    #[test]
    fn cross_entropy_limits() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 4]));
        let l = g.cross_entropy(x, &[2]).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-15);

        let x = g.constant(Tensor::matrix(1, 3, vec![0.0, 200.0, 0.0]).unwrap());
        let l = g.cross_entropy(x, &[1]).unwrap();
        assert!(g.value(l).item() < 1e-80);

        assert!(matches!(
            g.cross_entropy(x, &[3]),
            Err(Error::Index { bound: 3, .. })
        ));
    }

    #[test]
    fn bce_reference_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 1, vec![0.0]).unwrap());
        let l = g
            .bce_with_logits(x, &Tensor::matrix(1, 1, vec![1.0]).unwrap())
            .unwrap();
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-15);

        let x = g.constant(Tensor::matrix(1, 1, vec![50.0]).unwrap());
        let l = g
            .bce_with_logits(x, &Tensor::matrix(1, 1, vec![1.0]).unwrap())
            .unwrap();
        assert!(g.value(l).item() < 1e-20 && g.value(l).item().is_finite());

        let bad = Tensor::matrix(1, 1, vec![0.5]).unwrap();
        assert!(matches!(
            g.bce_with_logits(x, &bad),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn frobenius_examples() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[3, 3]));
        let f = g.frobenius_norm_sq(z);
        assert_eq!(g.value(f).item(), 0.0);
        let mut three = Tensor::eye(2);
        three.data_mut().iter_mut().for_each(|v| *v *= 3.0);
        let t = g.constant(three);
        let f = g.frobenius_norm_sq(t);
        assert_eq!(g.value(f).item(), 18.0);
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 5], 3.7));
        let y = g.layer_norm(x, None, None).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn relu_examples() {
        let mut g = Graph::new();
        let x = g.constant(vec_tensor(&[-1.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn mean_removes_axis() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 3, 2], (0..12).map(f64::from).collect()).unwrap());
        let m = g.mean(x, 1).unwrap();
        assert_eq!(g.shape(m), &[2, 2]);
        assert_eq!(g.value(m).data(), &[2.0, 3.0, 8.0, 9.0]);
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::matrix(2, 1, vec![5.0, 6.0]).unwrap());
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let s = g.slice(c, 1, 2, 1).unwrap();
        assert_eq!(g.value(s), g.value(b));
        assert!(g.concat(&[a, b], 0).is_err());
    }

    #[test]
    fn shape_errors_name_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        assert_eq!(
            g.add(a, b).unwrap_err(),
            Error::Dimension {
                op: "add",
                left: vec![2, 3],
                right: vec![3, 2]
            }
        );
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::full(&[2], 2.0));
        let b = g.input(Tensor::full(&[2], 3.0), true);
        let p = g.mul(a, b).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert!(g.grad(a).is_none());
        assert_eq!(g.grad(b).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        // d/dx (x*x + x) = 2x + 1
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1.5, -2.0]), true);
        let sq = g.mul(x, x).unwrap();
        let y = g.add(sq, x).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4.0, -3.0]);
    }

    #[test]
    fn single_key_attention_returns_value() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::matrix(3, 4, (0..12).map(f64::from).collect()).unwrap());
        let k = g.constant(Tensor::matrix(1, 4, vec![0.3, -0.1, 0.2, 0.9]).unwrap());
        let v = g.constant(Tensor::matrix(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let o = g.attention(q, k, v, 1, 2).unwrap();
        for r in 0..3 {
            assert_eq!(g.value(o).row(r), &[1.0, 2.0, 3.0, 4.0]);
        }
    }
}
