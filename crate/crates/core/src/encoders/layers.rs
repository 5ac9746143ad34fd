//! Transformer building blocks over a [`ParamStore`].

use rand::Rng;

use crate::error::{Error, Result};
use crate::numkernel::{Graph, Init, ParamId, ParamStore, Tensor, Var};

pub const LN_EPS: f64 = 1e-12;
/// Standard deviation of embedding tables and learned tokens.
pub const INIT_STD: f64 = 0.02;
/// Added to attention scores of masked keys.
pub const MASKED_SCORE: f64 = -1e30;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Weights are drawn with standard deviation `1/sqrt(inputs)`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: store.register(
                format!("{name}.weight"),
                &[inputs, outputs],
                Init::TruncNormal(1.0 / (inputs as f64).sqrt()),
                rng,
            ),
            bias: store.register(format!("{name}.bias"), &[1, outputs], Init::Zeros, rng),
        }
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Result<Var> {
        let y = g.matmul(x, g.param(self.weight))?;
        g.add_row(y, g.param(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        Self {
            gamma: store.register(format!("{name}.gamma"), &[1, dim], Init::Ones, rng),
            beta: store.register(format!("{name}.beta"), &[1, dim], Init::Zeros, rng),
        }
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Result<Var> {
        g.layernorm_rows(x, g.param(self.gamma), g.param(self.beta), LN_EPS)
    }
}

/// Additive attention bias hiding the keys whose flag is `false`.
pub fn key_mask_bias(n_queries: usize, keep: &[bool]) -> Result<Tensor> {
    if !keep.iter().any(|&k| k) {
        return Err(Error::InvalidArgument("every attention key is masked".into()));
    }
    let row: Vec<f64> = keep
        .iter()
        .map(|&k| if k { 0.0 } else { MASKED_SCORE })
        .collect();
    let data = (0..n_queries).flat_map(|_| row.iter().copied()).collect();
    Tensor::matrix(n_queries, keep.len(), data)
}

/// Multi-head self-attention with full (non-causal) visibility.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.key"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
            heads,
        }
    }

    /// `x` is `[n, d]`; `bias`, when given, is an `[n, n]` additive score mask.
    pub fn forward(&self, g: &Graph, x: Var, bias: Option<Var>) -> Result<Var> {
        let d = g.shape(x)[1];
        let dh = d / self.heads;
        let q = self.query.forward(g, x)?;
        let k = self.key.forward(g, x)?;
        let v = self.value.forward(g, x)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let mut scores = g.scale(g.matmul_nt(qh, kh)?, scale);
            if let Some(b) = bias {
                scores = g.add(scores, b)?;
            }
            let attn = g.softmax_rows(scores)?;
            outs.push(g.matmul(attn, vh)?);
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        self.out.forward(g, merged)
    }
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln_attn: LayerNorm,
    pub attn: SelfAttention,
    pub ln_mlp: LayerNorm,
    pub fc_in: Linear,
    pub fc_out: Linear,
}

pub const MLP_RATIO: usize = 4;

impl Block {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            ln_attn: LayerNorm::new(store, &format!("{name}.ln_attn"), dim, rng),
            attn: SelfAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            ln_mlp: LayerNorm::new(store, &format!("{name}.ln_mlp"), dim, rng),
            fc_in: Linear::new(store, &format!("{name}.fc_in"), dim, MLP_RATIO * dim, rng),
            fc_out: Linear::new(store, &format!("{name}.fc_out"), MLP_RATIO * dim, dim, rng),
        }
    }

    pub fn forward(&self, g: &Graph, x: Var, bias: Option<Var>) -> Result<Var> {
        let a = self.attn.forward(g, self.ln_attn.forward(g, x)?, bias)?;
        let x = g.add(x, a)?;
        let h = self.fc_in.forward(g, self.ln_mlp.forward(g, x)?)?;
        let m = self.fc_out.forward(g, g.gelu(h))?;
        g.add(x, m)
    }
}

/// Two-layer prediction head: linear, GELU, layer norm, linear.
#[derive(Clone, Debug)]
pub struct Head {
    pub dense: Linear,
    pub ln: LayerNorm,
    pub proj: Linear,
}

impl Head {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            dense: Linear::new(store, &format!("{name}.dense"), dim, dim, rng),
            ln: LayerNorm::new(store, &format!("{name}.ln"), dim, rng),
            proj: Linear::new(store, &format!("{name}.proj"), dim, outputs, rng),
        }
    }

    pub fn forward(&self, g: &Graph, x: Var) -> Result<Var> {
        let h = g.gelu(self.dense.forward(g, x)?);
        self.proj.forward(g, self.ln.forward(g, h)?)
    }
}
