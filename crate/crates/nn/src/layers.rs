//! Building blocks shared by the attribute encoder, policy and grounder.
//!
//! Layers only hold [`ParamId`]s; values live in the [`ParamSet`] they were
//! registered with and are read through a [`Graph`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamSet};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = ps.add_normal(format!("{name}.w"), in_dim, out_dim, rng);
        let b = ps.add_zeros(format!("{name}.b"), 1, out_dim);
        Self {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

/// Layer normalization with learned gain and bias.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, dim: usize) -> Self {
        Self {
            gain: ps.add_filled(format!("{name}.gain"), 1, dim, 1.0),
            bias: ps.add_zeros(format!("{name}.bias"), 1, dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = g.layer_norm(x);
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let y = g.mul_row(n, gain);
        g.add_row(y, bias)
    }
}

/// Two-layer GELU MLP.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(ps: &mut ParamSet, name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            up: Linear::new(ps, &format!("{name}.up"), dim, hidden, rng),
            down: Linear::new(ps, &format!("{name}.down"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.up.forward(g, x);
        let h = g.gelu(h);
        self.down.forward(g, h)
    }
}

/// Multi-head scaled dot-product attention. No positional information is
/// added: permuting the key/value rows leaves the output unchanged.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new(ps: &mut ParamSet, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert_eq!(dim % heads, 0, "model dim must divide into heads");
        Self {
            q: Linear::new(ps, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(ps, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(ps, &format!("{name}.v"), dim, dim, rng),
            o: Linear::new(ps, &format!("{name}.o"), dim, dim, rng),
            heads,
            dim,
        }
    }

    /// `queries`: n×dim, `context`: m×dim → n×dim.
    pub fn forward(&self, g: &mut Graph, queries: Var, context: Var) -> Var {
        let (n, m) = (g.shape(queries).0, g.shape(context).0);
        self.forward_grouped(g, queries, context, n, m)
    }

    /// Independent attention over consecutive groups of `nq` queries and
    /// `nk` context rows.
    pub fn forward_grouped(&self, g: &mut Graph, queries: Var, context: Var, nq: usize, nk: usize) -> Var {
        let q = self.q.forward(g, queries);
        let k = self.k.forward(g, context);
        let v = self.v.forward(g, context);
        let a = g.attention(q, k, v, self.heads, nq, nk);
        self.o.forward(g, a)
    }
}

/// Pre-norm transformer encoder layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderLayer {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        dim: usize,
        heads: usize,
        ff_hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), dim, heads, rng),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), dim),
            ff: FeedForward::new(ps, &format!("{name}.ff"), dim, ff_hidden, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let rows = g.shape(x).0;
        self.forward_grouped(g, x, rows)
    }

    /// Runs independent sequences of `group` rows stacked in `x`.
    pub fn forward_grouped(&self, g: &mut Graph, x: Var, group: usize) -> Var {
        let n = self.ln1.forward(g, x);
        let a = self.attn.forward_grouped(g, n, n, group, group);
        let x = g.add(x, a);
        let n = self.ln2.forward(g, x);
        let f = self.ff.forward(g, n);
        g.add(x, f)
    }
}

/// Pre-norm cross-attention block: queries attend over an encoded memory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossAttentionBlock {
    pub ln_q: LayerNorm,
    pub ln_mem: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff: FeedForward,
}

impl CrossAttentionBlock {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        dim: usize,
        heads: usize,
        ff_hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            ln_q: LayerNorm::new(ps, &format!("{name}.ln_q"), dim),
            ln_mem: LayerNorm::new(ps, &format!("{name}.ln_mem"), dim),
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), dim, heads, rng),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), dim),
            ff: FeedForward::new(ps, &format!("{name}.ff"), dim, ff_hidden, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, query: Var, memory: Var) -> Var {
        let (n, m) = (g.shape(query).0, g.shape(memory).0);
        self.forward_grouped(g, query, memory, n, m)
    }

    /// Groups of `nq` query rows attending to groups of `nk` memory rows.
    pub fn forward_grouped(&self, g: &mut Graph, query: Var, memory: Var, nq: usize, nk: usize) -> Var {
        let q = self.ln_q.forward(g, query);
        let m = self.ln_mem.forward(g, memory);
        let a = self.attn.forward_grouped(g, q, m, nq, nk);
        let x = g.add(query, a);
        let n = self.ln2.forward(g, x);
        let f = self.ff.forward(g, n);
        g.add(x, f)
    }
}

/// Gated recurrent unit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GruCell {
    pub input: Linear,
    pub hidden: Linear,
    pub hidden_dim: usize,
}

impl GruCell {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            input: Linear::new(ps, &format!("{name}.x"), input_dim, 3 * hidden_dim, rng),
            hidden: Linear::new(ps, &format!("{name}.h"), hidden_dim, 3 * hidden_dim, rng),
            hidden_dim,
        }
    }

    /// One step on a 1×input row and a 1×hidden state.
    pub fn forward(&self, g: &mut Graph, x: Var, h: Var) -> Var {
        let d = self.hidden_dim;
        let xi = self.input.forward(g, x);
        let hh = self.hidden.forward(g, h);
        let xr = g.slice_cols(xi, 0, d);
        let xz = g.slice_cols(xi, d, d);
        let xn = g.slice_cols(xi, 2 * d, d);
        let hr = g.slice_cols(hh, 0, d);
        let hz = g.slice_cols(hh, d, d);
        let hn = g.slice_cols(hh, 2 * d, d);
        let r = g.add(xr, hr);
        let r = g.sigmoid(r);
        let z = g.add(xz, hz);
        let z = g.sigmoid(z);
        let rh = g.mul(r, hn);
        let n = g.add(xn, rh);
        let n = g.tanh(n);
        // h' = n + z ⊙ (h − n)
        let diff = g.sub(h, n);
        let zd = g.mul(z, diff);
        g.add(n, zd)
    }
}
