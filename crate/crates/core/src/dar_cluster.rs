//! Unsupervised dialogue-act recognition with a latent subspace-clustering
//! auto-encoder.
//!
//! Contextualised vectors `C` are encoded to latent codes `X`, compared with
//! `K` memory vectors `M` (`A = X Mᵀ`), re-expressed as `X* = softmax(A) M`
//! and decoded back to `C*`. The loss combines reconstruction,
//! self-representation and an orthogonality penalty on `M`.

use std::collections::{BTreeMap, HashSet};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{argmax, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::params::{uniform, Mat, ParamId, ParamStore};

/// How the per-turn dialogue-act features handed to the satisfaction head are
/// derived from the similarity logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DaFeature {
    #[default]
    Logits,
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub num_clusters: usize,
    /// Defaults to half the hidden width.
    pub latent_dim: Option<usize>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub feature: DaFeature,
    /// Keep the clustering loss from updating the shared encoder.
    pub stop_gradient: bool,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            num_clusters: 20,
            latent_dim: None,
            lambda1: 1.0,
            lambda2: 10.0,
            feature: DaFeature::Logits,
            stop_gradient: false,
        }
    }
}

impl ClusterConfig {
    pub fn latent(&self, hidden_dim: usize) -> usize {
        self.latent_dim.unwrap_or((hidden_dim / 2).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_clusters < 2 {
            return Err(Error::Config("cluster count must be at least 2".into()));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config(
                "cluster loss weights must be non-negative".into(),
            ));
        }
        if self.latent_dim == Some(0) {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ClusterHead {
    pub encoder: Mlp,
    pub memory: ParamId,
    pub decoder: Mlp,
    pub num_clusters: usize,
    pub latent_dim: usize,
}

impl ClusterHead {
    pub fn new<R: Rng>(
        params: &mut ParamStore,
        rng: &mut R,
        dim: usize,
        config: &ClusterConfig,
    ) -> Self {
        let k = config.num_clusters;
        let latent = config.latent(dim);
        if latent < k {
            log::warn!(
                "latent_dim {latent} < {k} clusters: memory rows cannot be exactly orthonormal"
            );
        }
        let encoder = Mlp::new(params, rng, "cluster.encoder", dim, dim, latent);
        let mut m = uniform(rng, k, latent, 0.1);
        for mut row in m.rows_mut() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.mapv_inplace(|v| v / norm);
        }
        let memory = params.add("cluster.memory", m);
        let decoder = Mlp::new(params, rng, "cluster.decoder", latent, dim, dim);
        ClusterHead {
            encoder,
            memory,
            decoder,
            num_clusters: k,
            latent_dim: latent,
        }
    }

    pub fn forward(&self, g: &mut Graph, c: Var) -> ClusterVars {
        let m = g.param(self.memory);
        cluster_forward(
            g,
            c,
            m,
            |g, x| self.encoder.forward(g, x),
            |g, x| self.decoder.forward(g, x),
        )
    }

    pub fn loss(&self, g: &mut Graph, c: Var, out: &ClusterVars, config: &ClusterConfig) -> Var {
        let m = g.param(self.memory);
        cluster_loss(g, c, out, m, config.lambda1, config.lambda2)
    }
}

/// Tape handles produced by [`cluster_forward`].
#[derive(Clone, Copy, Debug)]
pub struct ClusterVars {
    /// `T×latent` codes.
    pub x: Var,
    /// `T×K` similarity logits.
    pub a: Var,
    /// `softmax(A)`, rows sum to one.
    pub weights: Var,
    /// `T×latent` self-representation.
    pub x_star: Var,
    /// `T×d` reconstruction.
    pub c_star: Var,
}

/// Values of one clustering forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterOutput {
    pub x: Mat,
    pub a: Mat,
    pub x_star: Mat,
    pub c_star: Mat,
}

impl ClusterOutput {
    pub fn from_vars(g: &Graph, vars: &ClusterVars) -> Self {
        ClusterOutput {
            x: g.value(vars.x).clone(),
            a: g.value(vars.a).clone(),
            x_star: g.value(vars.x_star).clone(),
            c_star: g.value(vars.c_star).clone(),
        }
    }
}

/// `X = enc(C)`, `A = X Mᵀ`, `X* = softmax(A) M`, `C* = dec(X*)`.
pub fn cluster_forward(
    g: &mut Graph,
    c: Var,
    memory: Var,
    encode: impl FnOnce(&mut Graph, Var) -> Var,
    decode: impl FnOnce(&mut Graph, Var) -> Var,
) -> ClusterVars {
    let x = encode(g, c);
    let a = g.matmul_t(x, memory);
    let weights = g.softmax_rows(a);
    let x_star = g.matmul(weights, memory);
    let c_star = decode(g, x_star);
    ClusterVars {
        x,
        a,
        weights,
        x_star,
        c_star,
    }
}

/// `‖C* − C‖²_F + λ₁‖X* − X‖²_F + λ₂‖M Mᵀ − I‖_F`.
pub fn cluster_loss(
    g: &mut Graph,
    c: Var,
    out: &ClusterVars,
    memory: Var,
    lambda1: f64,
    lambda2: f64,
) -> Var {
    let recon = g.sub(out.c_star, c);
    let recon = g.sum_squares(recon);
    let selfrep = g.sub(out.x_star, out.x);
    let selfrep = g.sum_squares(selfrep);
    let selfrep = g.scale(selfrep, lambda1);
    let k = g.shape(memory).0;
    let gram = g.matmul_t(memory, memory);
    let eye = g.constant(Mat::eye(k));
    let off = g.sub(gram, eye);
    let reg = g.sum_squares(off);
    let reg = g.sqrt(reg);
    let reg = g.scale(reg, lambda2);
    g.add_all(&[recon, selfrep, reg])
}

/// Hard cluster per turn (row-wise argmax, ties to the smallest index).
pub fn assign_clusters(a: &Mat) -> Vec<usize> {
    a.rows()
        .into_iter()
        .map(|r| argmax(r.iter().copied()))
        .collect()
}

/// Largest absolute off-diagonal entry of `M Mᵀ`.
pub fn max_off_diagonal_gram(memory: &Mat) -> f64 {
    let gram = memory.dot(&memory.t());
    let mut worst: f64 = 0.0;
    for ((i, j), v) in gram.indexed_iter() {
        if i != j {
            worst = worst.max(v.abs());
        }
    }
    worst
}

/// A small English stop-word list.
pub const DEFAULT_STOP_WORDS: &[&str] = &[
    "a", "about", "am", "an", "and", "are", "as", "at", "be", "but", "by", "can", "do", "for",
    "from", "have", "he", "her", "i", "if", "in", "is", "it", "its", "me", "my", "no", "not", "of",
    "on", "or", "our", "she", "so", "that", "the", "their", "them", "there", "they", "this", "to",
    "was", "we", "were", "what", "with", "would", "you", "your",
];

/// Ranked words of one cluster.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterWords {
    pub cluster: usize,
    pub turns: usize,
    pub words: Vec<(String, usize)>,
}

/// Counts word frequencies among the user turns assigned to each cluster,
/// drops stop words and keeps the `n` most frequent (ties alphabetical).
/// Clusters that received no turns get an empty list.
pub fn top_words<'a>(
    assigned: impl IntoIterator<Item = (usize, &'a str)>,
    num_clusters: usize,
    stop_words: &[&str],
    n: usize,
) -> Vec<ClusterWords> {
    let stop: HashSet<&str> = stop_words.iter().copied().collect();
    let mut counts: Vec<BTreeMap<String, usize>> = vec![BTreeMap::new(); num_clusters];
    let mut turns = vec![0usize; num_clusters];
    for (cluster, text) in assigned {
        turns[cluster] += 1;
        for w in crate::encoder::words(text) {
            if !stop.contains(w.as_str()) {
                *counts[cluster].entry(w).or_default() += 1;
            }
        }
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(cluster, c)| {
            let mut ranked: Vec<(String, usize)> = c.into_iter().collect();
            ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            ranked.truncate(n);
            ClusterWords {
                cluster,
                turns: turns[cluster],
                words: ranked,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::softmax_rows;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn single_cluster_weights_are_one() {
        let params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new(&params);
        let c = g.constant(random(&mut rng, 3, 4));
        let m = g.constant(random(&mut rng, 1, 4));
        let out = cluster_forward(&mut g, c, m, |_, x| x, |_, x| x);
        assert!(g.value(out.weights).iter().all(|&w| w == 1.0));
        for row in g.value(out.x_star).rows() {
            assert_eq!(row, g.value(m).row(0));
        }
    }

    #[test]
    fn code_on_a_memory_row_selects_it() {
        let params = ParamStore::new();
        let mut g = Graph::new(&params);
        let m = Mat::eye(4).mapv(|v| v * 10.0);
        let x = m.row(2).to_owned().insert_axis(ndarray::Axis(0));
        let xv = g.constant(x);
        let mv = g.constant(m);
        let out = cluster_forward(&mut g, xv, mv, |_, x| x, |_, x| x);
        let w = g.value(out.weights);
        assert_eq!(assign_clusters(g.value(out.a)), vec![2]);
        assert!(w[[0, 2]] > 1.0 - 1e-12);
    }

    #[test]
    fn shapes_through_head() {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let config = ClusterConfig {
            num_clusters: 5,
            ..Default::default()
        };
        let head = ClusterHead::new(&mut params, &mut rng, 8, &config);
        let mut g = Graph::new(&params);
        let c = g.constant(random(&mut rng, 3, 8));
        let out = head.forward(&mut g, c);
        assert_eq!(g.shape(out.a), (3, 5));
        assert_eq!(g.shape(out.c_star), (3, 8));
        assert_eq!(g.shape(out.x), (3, 4));
        for row in g.value(out.weights).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        let loss = head.loss(&mut g, c, &out, &config);
        assert!(g.scalar(loss) >= 0.0);
    }

    #[test]
    fn perfect_reconstruction_has_zero_loss() {
        let params = ParamStore::new();
        let mut g = Graph::new(&params);
        // Orthonormal memory with one cluster: X* equals the single memory row,
        // so choosing X and C equal to it makes every term vanish.
        let m = Mat::from_shape_vec((1, 3), vec![0.0, 1.0, 0.0]).unwrap();
        let c = Mat::from_shape_fn((2, 3), |(_, j)| m[[0, j]]);
        let cv = g.constant(c);
        let mv = g.constant(m);
        let out = cluster_forward(&mut g, cv, mv, |_, x| x, |_, x| x);
        let loss = cluster_loss(&mut g, cv, &out, mv, 1.0, 10.0);
        assert_eq!(g.scalar(loss), 0.0);
    }

    #[test]
    fn orthonormal_memory_has_zero_regulariser() {
        let params = ParamStore::new();
        let mut g = Graph::new(&params);
        let m = g.constant(Mat::eye(3));
        let c = g.constant(Mat::zeros((2, 3)));
        let out = cluster_forward(&mut g, c, m, |_, x| x, |g, x| g.scale(x, 0.0));
        let with_reg = cluster_loss(&mut g, c, &out, m, 0.0, 10.0);
        let without = cluster_loss(&mut g, c, &out, m, 0.0, 0.0);
        assert_eq!(g.scalar(with_reg), g.scalar(without));
    }

    #[test]
    fn loss_matches_term_by_term_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = random(&mut rng, 3, 4);
        let w_enc = random(&mut rng, 4, 2);
        let w_dec = random(&mut rng, 2, 4);
        let m = random(&mut rng, 3, 2);
        let (l1, l2) = (0.7, 3.0);

        let x = c.dot(&w_enc);
        let a = x.dot(&m.t());
        let xs = softmax_rows(&a).dot(&m);
        let cs = xs.dot(&w_dec);
        let sq = |m: &Mat| m.iter().map(|v| v * v).sum::<f64>();
        let expected =
            sq(&(&cs - &c)) + l1 * sq(&(&xs - &x)) + l2 * sq(&(m.dot(&m.t()) - Mat::eye(3))).sqrt();

        let params = ParamStore::new();
        let mut g = Graph::new(&params);
        let cv = g.constant(c);
        let mv = g.constant(m);
        let we = g.constant(w_enc);
        let wd = g.constant(w_dec);
        let out = cluster_forward(
            &mut g,
            cv,
            mv,
            |g, x| g.matmul(x, we),
            |g, x| g.matmul(x, wd),
        );
        let loss = cluster_loss(&mut g, cv, &out, mv, l1, l2);
        assert!((g.scalar(loss) - expected).abs() < 1e-8);
    }

    #[test]
    fn assignment_ties_and_oracle() {
        let a = Mat::from_shape_vec((2, 3), vec![0.0, 0.0, 0.0, -1.0, 5.0, 4.0]).unwrap();
        assert_eq!(assign_clusters(&a), vec![0, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = random(&mut rng, 10, 6);
        let oracle: Vec<usize> = r
            .rows()
            .into_iter()
            .map(|row| {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                row.iter().position(|&v| v == max).unwrap()
            })
            .collect();
        assert_eq!(assign_clusters(&r), oracle);
    }

    #[test]
    fn top_words_filters_stop_words() {
        let turns = vec![
            (0, "the hotel please the"),
            (0, "the hotel cheap"),
            (1, "the no thanks"),
        ];
        let out = top_words(turns, 3, &["the"], 2);
        assert_eq!(
            out[0].words,
            vec![("hotel".to_string(), 2), ("cheap".to_string(), 1)]
        );
        assert_eq!(out[1].words[0].0, "no");
        assert!(out[2].words.is_empty());
        assert_eq!(out[2].turns, 0);
        assert!(out.iter().all(|c| c.words.iter().all(|(w, _)| w != "the")));
    }

    #[test]
    fn config_validation() {
        assert!(ClusterConfig::default().validate().is_ok());
        assert!(ClusterConfig {
            num_clusters: 1,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(ClusterConfig {
            lambda2: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert_eq!(ClusterConfig::default().latent(64), 32);
    }
}
