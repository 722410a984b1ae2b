//! Parameterized layers. Each layer records only parameter names; values
//! live in a [`ParameterStore`] and are bound into a graph per forward pass.

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::params::{init_normal, init_uniform, BoundParams, ParameterStore};
use crate::rng::SeededRng;
use crate::tensor::{Float, Tensor};

/// Std of the normal used for positional tables and CLS/SEP vectors.
pub const EMBEDDING_INIT_STD: f64 = 0.02;

/// Train/eval switch and the dropout stream for one forward pass.
pub struct ForwardCtx<'r> {
    pub train: bool,
    pub rng: &'r mut SeededRng,
}

impl<'r> ForwardCtx<'r> {
    pub fn eval(rng: &'r mut SeededRng) -> Self {
        ForwardCtx { train: false, rng }
    }

    pub fn train(rng: &'r mut SeededRng) -> Self {
        ForwardCtx { train: true, rng }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Registers `{prefix}.weight` `[in, out]` and `{prefix}.bias` `[out]`,
    /// both uniform in ±1/√in.
    pub fn register<T: Float>(
        store: &mut ParameterStore<T>,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let weight = format!("{prefix}.weight");
        let bias = format!("{prefix}.bias");
        store.insert(&weight, init_uniform(&[in_dim, out_dim], bound, rng))?;
        store.insert(&bias, init_uniform(&[out_dim], bound, rng))?;
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    /// `x · W + b` over the last axis; leading axes are preserved.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &BoundParams, x: Var) -> Result<Var> {
        linear(g, x, p.get(&self.weight)?, p.get(&self.bias)?)
    }
}

/// `x[..., Din] · w[Din, Dout] + b[Dout]`.
pub fn linear<T: Float>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    let ws = g.shape(w).to_vec();
    if ws.len() != 2 || xs.last() != Some(&ws[0]) {
        return Err(shape_err!("linear: input {xs:?} does not fit weight {ws:?}"));
    }
    if g.shape(b) != [ws[1]] {
        return Err(shape_err!("linear: bias {:?} vs output {}", g.shape(b), ws[1]));
    }
    let rows = xs[..xs.len() - 1].iter().product();
    let flat = if xs.len() == 2 {
        x
    } else {
        g.reshape(x, &[rows, ws[0]])?
    };
    let y = g.matmul(flat, w)?;
    let y = g.add_broadcast(y, b)?;
    if xs.len() == 2 {
        return Ok(y);
    }
    let mut out_shape = xs;
    *out_shape.last_mut().expect("rank >= 1") = ws[1];
    g.reshape(y, &out_shape)
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: String,
    pub bias: String,
    pub eps: f64,
}

impl LayerNorm {
    pub fn register<T: Float>(
        store: &mut ParameterStore<T>,
        prefix: &str,
        dim: usize,
        eps: f64,
    ) -> Result<Self> {
        let gain = format!("{prefix}.gain");
        let bias = format!("{prefix}.bias");
        store.insert(&gain, Tensor::full(&[dim], T::one()))?;
        store.insert(&bias, Tensor::zeros(&[dim]))?;
        Ok(LayerNorm { gain, bias, eps })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &BoundParams, x: Var) -> Result<Var> {
        g.layer_norm(x, p.get(&self.gain)?, p.get(&self.bias)?, self.eps)
    }
}

/// A learned vector (CLS or SEP).
#[derive(Clone, Debug)]
pub struct LearnedVector {
    pub name: String,
    pub dim: usize,
}

impl LearnedVector {
    pub fn register<T: Float>(
        store: &mut ParameterStore<T>,
        name: &str,
        dim: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        store.insert(name, init_normal(&[dim], EMBEDDING_INIT_STD, rng))?;
        Ok(LearnedVector {
            name: name.to_string(),
            dim,
        })
    }

    /// The vector repeated as a `[batch, 1, dim]` one-position sequence.
    pub fn as_sequence<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        batch: usize,
    ) -> Result<Var> {
        let v = p.get(&self.name)?;
        let v = g.reshape(v, &[1, self.dim])?;
        Ok(g.expand(v, batch))
    }
}

/// Learned positional embeddings, `max_len × dim`.
#[derive(Clone, Debug)]
pub struct PositionalTable {
    pub name: String,
    pub max_len: usize,
    pub dim: usize,
}

impl PositionalTable {
    pub fn register<T: Float>(
        store: &mut ParameterStore<T>,
        name: &str,
        max_len: usize,
        dim: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        store.insert(name, init_normal(&[max_len, dim], EMBEDDING_INIT_STD, rng))?;
        Ok(PositionalTable {
            name: name.to_string(),
            max_len,
            dim,
        })
    }

    /// Adds positions `0..T` to `x` of shape `[B, T, dim]`.
    pub fn add_to<T: Float>(&self, g: &mut Graph<T>, p: &BoundParams, x: Var) -> Result<Var> {
        let t = g.shape(x)[1];
        if t > self.max_len {
            return Err(shape_err!(
                "sequence length {t} exceeds positional table {} ({} positions)",
                self.name,
                self.max_len
            ));
        }
        let table = p.get(&self.name)?;
        let rows = g.narrow(table, 0, 0, t)?;
        g.add_broadcast(x, rows)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadSelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadSelfAttention {
    pub fn register<T: Float>(
        store: &mut ParameterStore<T>,
        prefix: &str,
        dim: usize,
        heads: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!(
                "model dimension {dim} not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadSelfAttention {
            query: Linear::register(store, &format!("{prefix}.query"), dim, dim, rng)?,
            key: Linear::register(store, &format!("{prefix}.key"), dim, dim, rng)?,
            value: Linear::register(store, &format!("{prefix}.value"), dim, dim, rng)?,
            output: Linear::register(store, &format!("{prefix}.output"), dim, dim, rng)?,
            heads,
        })
    }

    /// `x`: `[B, T, D]`; `key_valid`: `B*T` flags, false for padding.
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        x: Var,
        key_valid: &[bool],
    ) -> Result<Var> {
        let q = self.query.forward(g, p, x)?;
        let k = self.key.forward(g, p, x)?;
        let v = self.value.forward(g, p, x)?;
        let o = g.attention(q, k, v, key_valid, self.heads)?;
        self.output.forward(g, p, o)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attention: MultiHeadSelfAttention,
    pub norm1: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub norm2: LayerNorm,
    pub dropout: f64,
    pub norm_first: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderShape {
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub norm_first: bool,
    pub ln_eps: f64,
}

impl EncoderLayer {
    pub fn register<T: Float>(
        store: &mut ParameterStore<T>,
        prefix: &str,
        shape: EncoderShape,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let EncoderShape {
            dim,
            heads,
            ffn_dim,
            dropout,
            norm_first,
            ln_eps,
        } = shape;
        Ok(EncoderLayer {
            attention: MultiHeadSelfAttention::register(
                store,
                &format!("{prefix}.attention"),
                dim,
                heads,
                rng,
            )?,
            norm1: LayerNorm::register(store, &format!("{prefix}.norm1"), dim, ln_eps)?,
            ff_in: Linear::register(store, &format!("{prefix}.ff_in"), dim, ffn_dim, rng)?,
            ff_out: Linear::register(store, &format!("{prefix}.ff_out"), ffn_dim, dim, rng)?,
            norm2: LayerNorm::register(store, &format!("{prefix}.norm2"), dim, ln_eps)?,
            dropout,
            norm_first,
        })
    }

    fn feed_forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        x: Var,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var> {
        let h = self.ff_in.forward(g, p, x)?;
        let h = g.relu(h);
        let h = g.dropout(h, self.dropout, ctx.train, ctx.rng)?;
        let h = self.ff_out.forward(g, p, h)?;
        g.dropout(h, self.dropout, ctx.train, ctx.rng)
    }

    fn self_attention<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        x: Var,
        key_valid: &[bool],
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var> {
        let a = self.attention.forward(g, p, x, key_valid)?;
        g.dropout(a, self.dropout, ctx.train, ctx.rng)
    }

    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        x: Var,
        key_valid: &[bool],
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var> {
        if self.norm_first {
            let n = self.norm1.forward(g, p, x)?;
            let a = self.self_attention(g, p, n, key_valid, ctx)?;
            let x = g.add(x, a)?;
            let n = self.norm2.forward(g, p, x)?;
            let f = self.feed_forward(g, p, n, ctx)?;
            g.add(x, f)
        } else {
            let a = self.self_attention(g, p, x, key_valid, ctx)?;
            let x = g.add(x, a)?;
            let x = self.norm1.forward(g, p, x)?;
            let f = self.feed_forward(g, p, x, ctx)?;
            let x = g.add(x, f)?;
            self.norm2.forward(g, p, x)
        }
    }
}

#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    pub layers: Vec<EncoderLayer>,
}

impl TransformerEncoder {
    pub fn register<T: Float>(
        store: &mut ParameterStore<T>,
        prefix: &str,
        depth: usize,
        shape: EncoderShape,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let layers = (0..depth)
            .map(|i| EncoderLayer::register(store, &format!("{prefix}.{i}"), shape, rng))
            .collect::<Result<_>>()?;
        Ok(TransformerEncoder { layers })
    }

    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        mut x: Var,
        key_valid: &[bool],
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(g, p, x, key_valid, ctx)?;
        }
        Ok(x)
    }
}
