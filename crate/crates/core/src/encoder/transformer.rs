//! Multi-head self-attention and post-norm Transformer encoder layers.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::nn::{Ctx, LayerNorm, Linear};
use crate::params::{Mat, ParamStore};

/// Fixed sinusoidal position table: even columns `sin`, odd columns `cos`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Mat {
    Mat::from_shape_fn((len, dim), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(
        params: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        assert!(
            heads > 0 && dim.is_multiple_of(heads),
            "dim {dim} not divisible by {heads} heads"
        );
        MultiHeadAttention {
            query: Linear::new(params, rng, &format!("{name}.query"), dim, dim),
            key: Linear::new(params, rng, &format!("{name}.key"), dim, dim),
            value: Linear::new(params, rng, &format!("{name}.value"), dim, dim),
            output: Linear::new(params, rng, &format!("{name}.output"), dim, dim),
            heads,
        }
    }

    /// Self-attention over the rows of `x`. Also returns the per-head
    /// attention probability matrices (`T×T`, rows sum to one).
    pub fn forward(&self, g: &mut Graph, x: Var) -> (Var, Vec<Var>) {
        let dim = g.shape(x).1;
        let head_dim = dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let q = self.query.forward(g, x);
        let k = self.key.forward(g, x);
        let v = self.value.forward(g, x);
        let mut contexts = Vec::with_capacity(self.heads);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * head_dim, head_dim);
            let kh = g.slice_cols(k, h * head_dim, head_dim);
            let vh = g.slice_cols(v, h * head_dim, head_dim);
            let scores = g.matmul_t(qh, kh);
            let scores = g.scale(scores, scale);
            let p = g.softmax_rows(scores);
            contexts.push(g.matmul(p, vh));
            probs.push(p);
        }
        let joined = g.concat_cols(&contexts);
        (self.output.forward(g, joined), probs)
    }
}

/// One encoder layer: multi-head self-attention followed by a ReLU
/// feed-forward block, each closed by residual + layer norm.
///
/// With `attention_post_norm` off the layer follows the literal two-step
/// form `LN(FFN(MHA(X)) + X)`, where the attention output feeds the FFN with
/// no residual of its own.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub attention: MultiHeadAttention,
    pub attention_norm: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub ffn_norm: LayerNorm,
    pub attention_post_norm: bool,
    pub dropout: f64,
}

impl TransformerLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        params: &mut ParamStore,
        rng: &mut R,
        name: &str,
        dim: usize,
        ffn_dim: usize,
        heads: usize,
        dropout: f64,
        attention_post_norm: bool,
    ) -> Self {
        TransformerLayer {
            attention: MultiHeadAttention::new(
                params,
                rng,
                &format!("{name}.attention"),
                dim,
                heads,
            ),
            attention_norm: LayerNorm::new(params, &format!("{name}.attention_norm"), dim),
            ffn_in: Linear::new(params, rng, &format!("{name}.ffn_in"), dim, ffn_dim),
            ffn_out: Linear::new(params, rng, &format!("{name}.ffn_out"), ffn_dim, dim),
            ffn_norm: LayerNorm::new(params, &format!("{name}.ffn_norm"), dim),
            attention_post_norm,
            dropout,
        }
    }

    fn ffn(&self, g: &mut Graph, ctx: &mut Ctx, x: Var) -> Var {
        let h = self.ffn_in.forward(g, x);
        let h = g.relu(h);
        let h = self.ffn_out.forward(g, h);
        ctx.dropout(g, h, self.dropout)
    }

    pub fn forward(&self, g: &mut Graph, ctx: &mut Ctx, x: Var) -> (Var, Vec<Var>) {
        let (attended, probs) = self.attention.forward(g, x);
        let attended = ctx.dropout(g, attended, self.dropout);
        let out = if self.attention_post_norm {
            let res = g.add(x, attended);
            let mid = self.attention_norm.forward(g, res);
            let f = self.ffn(g, ctx, mid);
            let res = g.add(mid, f);
            self.ffn_norm.forward(g, res)
        } else {
            let f = self.ffn(g, ctx, attended);
            let res = g.add(f, x);
            self.ffn_norm.forward(g, res)
        };
        (out, probs)
    }
}
