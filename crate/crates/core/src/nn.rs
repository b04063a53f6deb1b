//! Small reusable layers built on the autodiff tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::params::{xavier_uniform, Mat, ParamId, ParamStore};

/// Forward-pass context: carries the dropout generator while training.
pub struct Ctx {
    rng: Option<ChaCha8Rng>,
}

impl Ctx {
    pub fn eval() -> Self {
        Ctx { rng: None }
    }

    pub fn train(seed: u64) -> Self {
        Ctx {
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    /// Inverted dropout; identity in eval mode or at rate 0.
    pub fn dropout(&mut self, g: &mut Graph, x: Var, rate: f64) -> Var {
        let Some(rng) = self.rng.as_mut() else {
            return x;
        };
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let mask = Mat::from_shape_fn(g.shape(x), |_| {
            if rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let mask = g.constant(mask);
        g.mul(x, mask)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(
        params: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input: usize,
        output: usize,
    ) -> Self {
        let weight = params.add(format!("{name}.weight"), xavier_uniform(rng, input, output));
        let bias = params.add(format!("{name}.bias"), Mat::zeros((1, output)));
        Linear { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let xw = g.matmul(x, w);
        g.add_row(xw, b)
    }

    pub fn output_dim(&self, params: &ParamStore) -> usize {
        params.get(self.weight).ncols()
    }
}

/// One hidden layer with ReLU.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

impl Mlp {
    pub fn new<R: Rng>(
        params: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
    ) -> Self {
        Mlp {
            hidden: Linear::new(params, rng, &format!("{name}.hidden"), input, hidden),
            output: Linear::new(params, rng, &format!("{name}.output"), hidden, output),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.hidden.forward(g, x);
        let h = g.relu(h);
        self.output.forward(g, h)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(params: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: params.add(format!("{name}.gain"), Mat::ones((1, dim))),
            bias: params.add(format!("{name}.bias"), Mat::zeros((1, dim))),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = g.layer_norm_rows(x, self.eps);
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let scaled = g.mul_row(n, gain);
        g.add_row(scaled, bias)
    }
}
