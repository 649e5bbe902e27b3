//! Layers shared by the encoder, decoder and heads.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::math;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Xavier-uniform weight `[fan_in, fan_out]`.
pub fn xavier<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let a = math::sqrt(6.0 / (fan_in + fan_out) as f64);
    let mut t = Tensor::zeros(&[fan_in, fan_out]);
    for v in t.data_mut() {
        *v = (2.0 * rng.random::<f64>() - 1.0) * a;
    }
    t
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.w"), xavier(fan_in, fan_out, rng), true);
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]), false);
        Linear { w, b }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.linear(x, w, b)
    }

    /// The same map on a plain matrix, without recording anything.
    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut y = x.matmul(store.value(self.w))?;
        let b = store.value(self.b).data();
        let n = b.len();
        for row in y.data_mut().chunks_mut(n) {
            row.iter_mut().zip(b).for_each(|(o, v)| *o += v);
        }
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.g"), Tensor::full(&[dim], 1.0), false);
        let beta = store.add(format!("{name}.b"), Tensor::zeros(&[dim]), false);
        LayerNorm { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, Some(gamma), Some(beta))
    }
}

/// Multi-head attention with separate query/key/value/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        query_dim: usize,
        kv_dim: usize,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), query_dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), kv_dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), kv_dim, dim, rng),
            out: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
        })
    }

    /// Returns the projected output and the raw attention node (for its probabilities).
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query: Var,
        kv: Var,
        batch: usize,
    ) -> Result<(Var, Var)> {
        let q = self.q.forward(g, store, query)?;
        let k = self.k.forward(g, store, kv)?;
        let v = self.v.forward(g, store, kv)?;
        let a = g.attention(q, k, v, batch, self.heads)?;
        let o = self.out.forward(g, store, a)?;
        Ok((o, a))
    }
}

/// Pre-norm transformer block: `x + MHA(LN(x))`, then `x + MLP(LN(x))` with a
/// GELU MLP of width `4·dim`.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Block {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(
                store,
                &format!("{name}.attn"),
                dim,
                dim,
                dim,
                heads,
                rng,
            )?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, 4 * dim, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), 4 * dim, dim, rng),
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        batch: usize,
    ) -> Result<(Var, Var)> {
        let h = self.ln1.forward(g, store, x)?;
        let (a, probs) = self.attn.forward(g, store, h, h, batch)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, store, x)?;
        let h = self.fc1.forward(g, store, h)?;
        let h = g.gelu(h);
        let h = self.fc2.forward(g, store, h)?;
        Ok((g.add(x, h)?, probs))
    }
}

/// Fixed sinusoidal positions `[n, d]`: sin on even columns, cos on odd ones.
pub fn sinusoidal(n: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, d]);
    for pos in 0..n {
        for i in (0..d).step_by(2) {
            let freq = math::exp(-(i as f64) * math::ln(10_000.0) / d as f64);
            let angle = pos as f64 * freq;
            t.set(pos, i, math::sin(angle));
            if i + 1 < d {
                t.set(pos, i + 1, math::cos(angle));
            }
        }
    }
    t
}

/// Stacks `times` copies of a matrix vertically.
pub fn tile_rows(t: &Tensor, times: usize) -> Tensor {
    let (r, c) = t.dims2().expect("matrix");
    let mut data = Vec::with_capacity(r * c * times);
    for _ in 0..times {
        data.extend_from_slice(t.data());
    }
    Tensor::new(alloc::vec![r * times, c], data).expect("tiled shape")
}

/// Head-averaged attention `[batch, nq, nk]` from an attention node.
pub fn head_average(g: &Graph, attn: Var, batch: usize, heads: usize) -> Result<Vec<Tensor>> {
    let probs = g
        .attention_probs(attn)
        .ok_or_else(|| Error::Validation("node is not an attention node".into()))?;
    let per = probs.len() / (batch * heads);
    let nq = g.shape(attn)[0] / batch;
    let nk = per / nq;
    let mut out = Vec::with_capacity(batch);
    for b in 0..batch {
        let mut m = Tensor::zeros(&[nq, nk]);
        for h in 0..heads {
            let src = &probs[(b * heads + h) * per..(b * heads + h + 1) * per];
            m.data_mut().iter_mut().zip(src).for_each(|(o, p)| *o += p);
        }
        m.data_mut().iter_mut().for_each(|v| *v /= heads as f64);
        out.push(m);
    }
    Ok(out)
}
