//! Satisfaction head: two GRU streams (content vectors and dialogue-act
//! features), vanilla attention over each, a sigmoid gate mixing the two
//! summaries, and a three-way classifier.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::nn::Mlp;
use crate::params::{xavier_uniform, Mat, ParamId, ParamStore};

pub const NUM_CLASSES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    /// One gate value per coordinate of the recurrent state.
    #[default]
    Vector,
    /// A single gate value shared by every coordinate.
    Scalar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SatisfactionConfig {
    /// Recurrent width; defaults to the encoder width.
    pub recurrent_dim: Option<usize>,
    pub gate: GateKind,
    /// When false only the content stream is used (no dialogue-act features).
    pub use_da_features: bool,
}

impl Default for SatisfactionConfig {
    fn default() -> Self {
        SatisfactionConfig {
            recurrent_dim: None,
            gate: GateKind::Vector,
            use_da_features: true,
        }
    }
}

/// Gated recurrent unit with update and reset gates; zero initial state.
#[derive(Clone, Debug)]
pub struct Gru {
    pub input_weight: ParamId,
    pub hidden_weight: ParamId,
    pub input_bias: ParamId,
    pub hidden_bias: ParamId,
    pub hidden: usize,
}

impl Gru {
    pub fn new<R: Rng>(
        params: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> Self {
        let mut wx = Mat::zeros((input, 3 * hidden));
        let mut wh = Mat::zeros((hidden, 3 * hidden));
        for gate in 0..3 {
            let cols = gate * hidden..(gate + 1) * hidden;
            wx.slice_mut(ndarray::s![.., cols.clone()])
                .assign(&xavier_uniform(rng, input, hidden));
            wh.slice_mut(ndarray::s![.., cols])
                .assign(&xavier_uniform(rng, hidden, hidden));
        }
        Gru {
            input_weight: params.add(format!("{name}.input_weight"), wx),
            hidden_weight: params.add(format!("{name}.hidden_weight"), wh),
            input_bias: params.add(format!("{name}.input_bias"), Mat::zeros((1, 3 * hidden))),
            hidden_bias: params.add(format!("{name}.hidden_bias"), Mat::zeros((1, 3 * hidden))),
            hidden,
        }
    }

    /// Runs over the rows of `x` in order; returns all states (`T×hidden`).
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = self.hidden;
        let wx = g.param(self.input_weight);
        let wh = g.param(self.hidden_weight);
        let bx = g.param(self.input_bias);
        let bh = g.param(self.hidden_bias);
        let gx = g.matmul(x, wx);
        let gx = g.add_row(gx, bx);
        let mut h = g.constant(Mat::zeros((1, n)));
        let mut states = Vec::with_capacity(g.shape(x).0);
        for t in 0..g.shape(x).0 {
            let xt = g.slice_rows(gx, t, 1);
            let ht = g.matmul(h, wh);
            let ht = g.add_row(ht, bh);
            let xz = g.slice_cols(xt, 0, n);
            let hz = g.slice_cols(ht, 0, n);
            let z = g.add(xz, hz);
            let z = g.sigmoid(z);
            let xr = g.slice_cols(xt, n, n);
            let hr = g.slice_cols(ht, n, n);
            let r = g.add(xr, hr);
            let r = g.sigmoid(r);
            let xn = g.slice_cols(xt, 2 * n, n);
            let hn = g.slice_cols(ht, 2 * n, n);
            let gated = g.mul(r, hn);
            let cand = g.add(xn, gated);
            let cand = g.tanh(cand);
            // h' = (1 - z) ⊙ cand + z ⊙ h
            let diff = g.sub(h, cand);
            let keep = g.mul(z, diff);
            h = g.add(cand, keep);
            states.push(h);
        }
        g.concat_rows(&states)
    }
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub projection: ParamId,
    pub context: ParamId,
}

impl Attention {
    pub fn new<R: Rng>(params: &mut ParamStore, rng: &mut R, name: &str, dim: usize) -> Self {
        Attention {
            projection: params.add(format!("{name}.projection"), xavier_uniform(rng, dim, dim)),
            context: params.add(format!("{name}.context"), xavier_uniform(rng, dim, 1)),
        }
    }

    pub fn forward(&self, g: &mut Graph, v: Var) -> (Var, Var) {
        let w = g.param(self.projection);
        let u = g.param(self.context);
        attend(g, v, w, u)
    }
}

/// `α = softmax(u · tanh(V W))` over the `T` rows of `V`, and `o = αᵀ V`.
/// `w` is `d×d_att` and `u` is `d_att×1`; `α` is `1×T`, `o` is `1×d`.
pub fn attend(g: &mut Graph, v: Var, w: Var, u: Var) -> (Var, Var) {
    let proj = g.matmul(v, w);
    let proj = g.tanh(proj);
    let scores = g.matmul(proj, u);
    let scores = g.transpose(scores);
    let alpha = g.softmax_rows(scores);
    let o = g.matmul(alpha, v);
    (alpha, o)
}

/// `g = sigmoid([o_c; o_a] W_g)` and `o = g ⊙ o_a + (1 − g) ⊙ o_c`.
/// `W_g` is `2d×d` for a vector gate or `2d×1` for a scalar gate.
pub fn fuse(g: &mut Graph, o_c: Var, o_a: Var, w_g: Var) -> (Var, Var) {
    let width = g.shape(o_c).1;
    let joined = g.concat_cols(&[o_c, o_a]);
    let pre = g.matmul(joined, w_g);
    let mut gate = g.sigmoid(pre);
    let gate_value = gate;
    if g.shape(gate).1 == 1 && width != 1 {
        let ones = g.constant(Mat::ones((1, width)));
        gate = g.matmul(gate, ones);
    }
    // o = o_c + g ⊙ (o_a − o_c)
    let diff = g.sub(o_a, o_c);
    let mixed = g.mul(gate, diff);
    let o = g.add(o_c, mixed);
    (gate_value, o)
}

/// Cross-entropy `−log softmax(logits)[class]`, computed stably.
pub fn use_loss(g: &mut Graph, logits: Var, class: usize) -> Var {
    let logp = g.log_softmax_rows(logits);
    let picked = g.pick(logp, 0, class);
    g.scale(picked, -1.0)
}

#[derive(Clone, Debug)]
pub struct SatisfactionHead {
    pub content_gru: Gru,
    pub content_attention: Attention,
    pub act_gru: Option<Gru>,
    pub act_attention: Option<Attention>,
    pub gate: Option<ParamId>,
    pub classifier: Mlp,
    pub recurrent_dim: usize,
}

/// Tape handles of one satisfaction forward pass.
#[derive(Clone, Copy, Debug)]
pub struct SatisfactionVars {
    pub v_c: Var,
    pub alpha_c: Var,
    pub o_c: Var,
    pub v_a: Option<Var>,
    pub alpha_a: Option<Var>,
    pub o_a: Option<Var>,
    pub gate: Option<Var>,
    pub o: Var,
    pub logits: Var,
}

impl SatisfactionHead {
    pub fn new<R: Rng>(
        params: &mut ParamStore,
        rng: &mut R,
        content_dim: usize,
        act_dim: usize,
        config: &SatisfactionConfig,
    ) -> Self {
        let d = config.recurrent_dim.unwrap_or(content_dim);
        let content_gru = Gru::new(params, rng, "use.content_gru", content_dim, d);
        let content_attention = Attention::new(params, rng, "use.content_attention", d);
        let (act_gru, act_attention, gate) = if config.use_da_features {
            let gru = Gru::new(params, rng, "use.act_gru", act_dim, d);
            let att = Attention::new(params, rng, "use.act_attention", d);
            let width = match config.gate {
                GateKind::Vector => d,
                GateKind::Scalar => 1,
            };
            let gate = params.add("use.gate", xavier_uniform(rng, 2 * d, width));
            (Some(gru), Some(att), Some(gate))
        } else {
            (None, None, None)
        };
        let classifier = Mlp::new(params, rng, "use.classifier", d, d, NUM_CLASSES);
        SatisfactionHead {
            content_gru,
            content_attention,
            act_gru,
            act_attention,
            gate,
            classifier,
            recurrent_dim: d,
        }
    }

    pub fn uses_da_features(&self) -> bool {
        self.act_gru.is_some()
    }

    /// `c` is `T×d`; `a` (`T×K`) is required when dialogue-act features are on.
    pub fn forward(&self, g: &mut Graph, c: Var, a: Option<Var>) -> SatisfactionVars {
        let v_c = self.content_gru.forward(g, c);
        let (alpha_c, o_c) = self.content_attention.forward(g, v_c);
        let (v_a, alpha_a, o_a, gate, o) = match (&self.act_gru, &self.act_attention, self.gate, a)
        {
            (Some(gru), Some(att), Some(w_g), Some(a)) => {
                let v_a = gru.forward(g, a);
                let (alpha_a, o_a) = att.forward(g, v_a);
                let w_g = g.param(w_g);
                let (gate, o) = fuse(g, o_c, o_a, w_g);
                (Some(v_a), Some(alpha_a), Some(o_a), Some(gate), o)
            }
            (Some(_), ..) => panic!("dialogue-act features required by this head"),
            _ => (None, None, None, None, o_c),
        };
        let logits = self.classifier.forward(g, o);
        SatisfactionVars {
            v_c,
            alpha_c,
            o_c,
            v_a,
            alpha_a,
            o_a,
            gate,
            o,
            logits,
        }
    }
}

/// Everything the fusion produced for one dialogue, kept for analysis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionTrace {
    pub alpha_c: Vec<f64>,
    pub alpha_a: Option<Vec<f64>>,
    pub o_c: Vec<f64>,
    pub o_a: Option<Vec<f64>>,
    pub gate: Option<Vec<f64>>,
    pub o: Vec<f64>,
    pub p_use: Vec<f64>,
}

impl FusionTrace {
    pub fn from_vars(g: &Graph, vars: &SatisfactionVars) -> Self {
        let flat = |v: Var| g.value(v).iter().copied().collect::<Vec<f64>>();
        let p = crate::autodiff::softmax_rows(g.value(vars.logits));
        FusionTrace {
            alpha_c: flat(vars.alpha_c),
            alpha_a: vars.alpha_a.map(flat),
            o_c: flat(vars.o_c),
            o_a: vars.o_a.map(flat),
            gate: vars.gate.map(flat),
            o: flat(vars.o),
            p_use: p.iter().copied().collect(),
        }
    }

    /// Mean of the gate components (the gate itself when scalar).
    pub fn scalar_gate(&self) -> Option<f64> {
        self.gate
            .as_ref()
            .filter(|g| !g.is_empty())
            .map(|g| g.iter().sum::<f64>() / g.len() as f64)
    }

    pub fn predicted(&self) -> usize {
        crate::autodiff::argmax(self.p_use.iter().copied())
    }

    /// Checks the probability and gate-range invariants.
    pub fn check(&self, tol: f64) -> Result<()> {
        let fail = |what: &str| {
            Err(crate::error::Error::NonFinite(format!(
                "fusion trace invariant: {what}"
            )))
        };
        let sums_to_one =
            |v: &[f64]| (v.iter().sum::<f64>() - 1.0).abs() <= tol && v.iter().all(|x| *x >= 0.0);
        if !sums_to_one(&self.alpha_c) {
            return fail("alpha_c");
        }
        if let Some(a) = &self.alpha_a {
            if !sums_to_one(a) {
                return fail("alpha_a");
            }
        }
        if let Some(gate) = &self.gate {
            if !gate.iter().all(|x| *x > 0.0 && *x < 1.0) {
                return fail("gate outside (0, 1)");
            }
        }
        if !sums_to_one(&self.p_use) {
            return fail("p_use");
        }
        Ok(())
    }
}
