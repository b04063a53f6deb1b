//! Gradient-descent optimisers over a [`ParamStore`].

use serde::{Deserialize, Serialize};

use crate::params::{Gradients, Mat, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam(Adam),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: &ParamStore) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(lr, params)),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) {
        match self {
            Optimizer::Sgd { lr } => {
                for id in params.ids().collect::<Vec<_>>() {
                    if let Some(g) = grads.get(id) {
                        params.get_mut(id).scaled_add(-*lr, g);
                    }
                }
            }
            Optimizer::Adam(adam) => adam.step(params, grads),
        }
    }
}

/// Adaptive-moment estimation with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    first: Vec<Mat>,
    second: Vec<Mat>,
}

impl Adam {
    pub fn new(lr: f64, params: &ParamStore) -> Self {
        let zeros: Vec<Mat> = params.iter().map(|(_, _, v)| Mat::zeros(v.dim())).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        for id in params.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            m.zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            v.zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let p = params.get_mut(id);
            ndarray::Zip::from(p)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use ndarray::array;

    fn minimise(kind: OptimizerKind, lr: f64) -> f64 {
        let mut params = ParamStore::new();
        let x = params.add("x", array![[3.0, -2.0]]);
        let mut opt = Optimizer::new(kind, lr, &params);
        for _ in 0..500 {
            let grads = {
                let mut g = Graph::new(&params);
                let v = g.param(x);
                let l = g.sum_squares(v);
                g.backward(l)
            };
            opt.step(&mut params, &grads);
        }
        params.get(x).iter().map(|v| v.abs()).fold(0.0, f64::max)
    }

    #[test]
    fn both_optimisers_reach_the_minimum() {
        assert!(minimise(OptimizerKind::Sgd, 0.1) < 1e-6);
        assert!(minimise(OptimizerKind::Adam, 0.05) < 1e-2);
    }
}
