//! Supervised dialogue-act recognition: per-turn scores from an MLP over the
//! contextualised exchange vectors, and a linear-chain CRF over the turn
//! sequence.
//!
//! The transition matrix is `(K+2)×(K+2)`; index `K` is the start label and
//! `K+1` the end label. Start and end carry no emission score. Transitions
//! into start and out of end are never used by any path.

use rand::Rng;

use crate::autodiff::{argmax, log_sum_exp, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::params::{uniform, Mat, ParamId, ParamStore};

/// Value stored in the transitions that no path may take.
pub const MASKED: f64 = -1.0e4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DaDecoding {
    #[default]
    Viterbi,
    /// Independent per-turn argmax of the scores.
    Argmax,
}

#[derive(Clone, Debug)]
pub struct CrfHead {
    pub mlp: Mlp,
    pub transitions: ParamId,
    pub num_labels: usize,
}

impl CrfHead {
    pub fn new<R: Rng>(
        params: &mut ParamStore,
        rng: &mut R,
        dim: usize,
        num_labels: usize,
    ) -> Self {
        let mlp = Mlp::new(params, rng, "dar.mlp", dim, dim, num_labels);
        let transitions = params.add("dar.transitions", initial_transitions(rng, num_labels));
        CrfHead {
            mlp,
            transitions,
            num_labels,
        }
    }

    /// `T×K` dialogue-act scores for `T×d` contextualised vectors.
    pub fn da_scores(&self, g: &mut Graph, c: Var) -> Var {
        self.mlp.forward(g, c)
    }

    pub fn nll(&self, g: &mut Graph, scores: Var, labels: &[usize]) -> Result<Var> {
        let trans = g.param(self.transitions);
        crf_nll(g, scores, trans, labels)
    }

    pub fn decode(&self, params: &ParamStore, scores: &Mat, decoding: DaDecoding) -> Vec<usize> {
        match decoding {
            DaDecoding::Viterbi => viterbi_decode(scores, params.get(self.transitions)),
            DaDecoding::Argmax => argmax_decode(scores),
        }
    }
}

/// Small random transitions with the unusable entries masked.
pub fn initial_transitions<R: Rng>(rng: &mut R, num_labels: usize) -> Mat {
    let mut t = uniform(rng, num_labels + 2, num_labels + 2, 0.1);
    mask_transitions(&mut t);
    t
}

pub fn mask_transitions(t: &mut Mat) {
    let k = t.nrows() - 2;
    let (start, end) = (k, k + 1);
    for i in 0..k + 2 {
        t[[i, start]] = MASKED;
        t[[end, i]] = MASKED;
    }
    t[[start, end]] = MASKED;
}

fn check_shapes(scores: &Mat, transitions: &Mat) -> usize {
    let k = scores.ncols();
    assert_eq!(
        transitions.dim(),
        (k + 2, k + 2),
        "transition matrix must be (K+2)x(K+2)"
    );
    k
}

fn check_labels(labels: &[usize], scores: &Mat) -> Result<()> {
    let k = scores.ncols();
    if labels.len() != scores.nrows() {
        return Err(Error::Config(format!(
            "{} labels for {} turns",
            labels.len(),
            scores.nrows()
        )));
    }
    match labels.iter().find(|&&l| l >= k) {
        Some(&label) => Err(Error::LabelOutOfRange {
            label,
            num_labels: k,
        }),
        None => Ok(()),
    }
}

/// Path score: start→y₁ and y_T→end transitions, consecutive transitions, and
/// the emission of each label.
pub fn sequence_score(scores: &Mat, transitions: &Mat, labels: &[usize]) -> Result<f64> {
    let k = check_shapes(scores, transitions);
    check_labels(labels, scores)?;
    let (start, end) = (k, k + 1);
    let mut total = 0.0;
    let mut prev = start;
    for (t, &y) in labels.iter().enumerate() {
        total += transitions[[prev, y]] + scores[[t, y]];
        prev = y;
    }
    Ok(total + transitions[[prev, end]])
}

/// Forward variables `α_t(k)` (log-space, including the emission at `t`).
fn forward_table(scores: &Mat, transitions: &Mat) -> Mat {
    let k = check_shapes(scores, transitions);
    let t_len = scores.nrows();
    let mut alpha = Mat::zeros((t_len, k));
    for y in 0..k {
        alpha[[0, y]] = transitions[[k, y]] + scores[[0, y]];
    }
    for t in 1..t_len {
        for y in 0..k {
            alpha[[t, y]] = scores[[t, y]]
                + log_sum_exp((0..k).map(|p| alpha[[t - 1, p]] + transitions[[p, y]]));
        }
    }
    alpha
}

/// Backward variables `β_t(k)`: log-sum of all continuations after turn `t`.
fn backward_table(scores: &Mat, transitions: &Mat) -> Mat {
    let k = check_shapes(scores, transitions);
    let t_len = scores.nrows();
    let mut beta = Mat::zeros((t_len, k));
    for y in 0..k {
        beta[[t_len - 1, y]] = transitions[[y, k + 1]];
    }
    for t in (0..t_len - 1).rev() {
        for y in 0..k {
            beta[[t, y]] = log_sum_exp(
                (0..k).map(|n| transitions[[y, n]] + scores[[t + 1, n]] + beta[[t + 1, n]]),
            );
        }
    }
    beta
}

/// Log partition function by the forward recursion.
pub fn log_partition(scores: &Mat, transitions: &Mat) -> f64 {
    let k = scores.ncols();
    let alpha = forward_table(scores, transitions);
    let last = alpha.nrows() - 1;
    log_sum_exp((0..k).map(|y| alpha[[last, y]] + transitions[[y, k + 1]]))
}

/// Log partition function by the backward recursion.
pub fn log_partition_backward(scores: &Mat, transitions: &Mat) -> f64 {
    let k = scores.ncols();
    let beta = backward_table(scores, transitions);
    log_sum_exp((0..k).map(|y| transitions[[k, y]] + scores[[0, y]] + beta[[0, y]]))
}

/// `log p(labels | scores)`.
pub fn log_likelihood(scores: &Mat, transitions: &Mat, labels: &[usize]) -> Result<f64> {
    let score = sequence_score(scores, transitions, labels)?;
    let ll = score - log_partition(scores, transitions);
    if !ll.is_finite() {
        return Err(Error::NonFinite("CRF log-likelihood".into()));
    }
    Ok(ll)
}

/// Negative log-likelihood with its gradients with respect to the scores and
/// the transitions (marginal minus observed counts).
pub fn nll_with_gradients(
    scores: &Mat,
    transitions: &Mat,
    labels: &[usize],
) -> Result<(f64, Mat, Mat)> {
    let k = check_shapes(scores, transitions);
    check_labels(labels, scores)?;
    let t_len = scores.nrows();
    let alpha = forward_table(scores, transitions);
    let beta = backward_table(scores, transitions);
    let log_z = log_sum_exp((0..k).map(|y| alpha[[t_len - 1, y]] + transitions[[y, k + 1]]));
    let nll = log_z - sequence_score(scores, transitions, labels)?;
    if !nll.is_finite() {
        return Err(Error::NonFinite("CRF log-likelihood".into()));
    }

    let mut d_scores = Mat::zeros((t_len, k));
    for t in 0..t_len {
        for y in 0..k {
            d_scores[[t, y]] = (alpha[[t, y]] + beta[[t, y]] - log_z).exp();
        }
        d_scores[[t, labels[t]]] -= 1.0;
    }

    let mut d_trans = Mat::zeros((k + 2, k + 2));
    for y in 0..k {
        d_trans[[k, y]] = (transitions[[k, y]] + scores[[0, y]] + beta[[0, y]] - log_z).exp();
        d_trans[[y, k + 1]] = (alpha[[t_len - 1, y]] + transitions[[y, k + 1]] - log_z).exp();
    }
    for t in 0..t_len.saturating_sub(1) {
        for p in 0..k {
            for n in 0..k {
                d_trans[[p, n]] +=
                    (alpha[[t, p]] + transitions[[p, n]] + scores[[t + 1, n]] + beta[[t + 1, n]]
                        - log_z)
                        .exp();
            }
        }
    }
    let mut prev = k;
    for &y in labels {
        d_trans[[prev, y]] -= 1.0;
        prev = y;
    }
    d_trans[[prev, k + 1]] -= 1.0;
    Ok((nll, d_scores, d_trans))
}

/// CRF negative log-likelihood as a tape node.
pub fn crf_nll(g: &mut Graph, scores: Var, transitions: Var, labels: &[usize]) -> Result<Var> {
    let (nll, ds, dt) = nll_with_gradients(g.value(scores), g.value(transitions), labels)?;
    Ok(g.external_scalar(nll, vec![(scores, ds), (transitions, dt)]))
}

/// Highest-scoring label sequence. Among equally scoring paths the
/// lexicographically smallest is returned.
pub fn viterbi_decode(scores: &Mat, transitions: &Mat) -> Vec<usize> {
    let k = check_shapes(scores, transitions);
    let t_len = scores.nrows();
    if t_len == 0 {
        return Vec::new();
    }
    // best[t][y]: best score of turns t.. given label y at t, including the
    // emission at t and the final transition to end.
    let mut best = Mat::zeros((t_len, k));
    for y in 0..k {
        best[[t_len - 1, y]] = scores[[t_len - 1, y]] + transitions[[y, k + 1]];
    }
    for t in (0..t_len - 1).rev() {
        for y in 0..k {
            let cont = (0..k)
                .map(|n| transitions[[y, n]] + best[[t + 1, n]])
                .fold(f64::NEG_INFINITY, f64::max);
            best[[t, y]] = scores[[t, y]] + cont;
        }
    }
    let mut path = Vec::with_capacity(t_len);
    let mut prev = k;
    for t in 0..t_len {
        let cands: Vec<f64> = (0..k)
            .map(|y| transitions[[prev, y]] + best[[t, y]])
            .collect();
        let top = cands.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let tol = 1e-12 * (1.0 + top.abs());
        let y = cands.iter().position(|&c| c >= top - tol).unwrap_or(0);
        path.push(y);
        prev = y;
    }
    path
}

/// Per-turn argmax, ties to the smallest label.
pub fn argmax_decode(scores: &Mat) -> Vec<usize> {
    scores
        .rows()
        .into_iter()
        .map(|r| argmax(r.iter().copied()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, t: usize, k: usize) -> (Mat, Mat) {
        let a = Mat::from_shape_fn((t, k), |_| rng.gen_range(-2.0..2.0));
        let g = Mat::from_shape_fn((k + 2, k + 2), |_| rng.gen_range(-2.0..2.0));
        (a, g)
    }

    /// Every label sequence of length `t` over `k` labels, lexicographic.
    fn all_paths(t: usize, k: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        for _ in 0..t {
            out = out
                .into_iter()
                .flat_map(|p| {
                    (0..k).map(move |y| {
                        let mut q = p.clone();
                        q.push(y);
                        q
                    })
                })
                .collect();
        }
        out
    }

    fn explicit_score(a: &Mat, g: &Mat, y: &[usize]) -> f64 {
        let k = a.ncols();
        let mut labels = vec![k];
        labels.extend_from_slice(y);
        labels.push(k + 1);
        let mut s = 0.0;
        for w in labels.windows(2) {
            s += g[[w[0], w[1]]];
        }
        for (t, &l) in y.iter().enumerate() {
            s += a[[t, l]];
        }
        s
    }

    #[test]
    fn score_examples() {
        let a = array![[1.0, 2.0]];
        let g = Mat::zeros((4, 4));
        assert_eq!(sequence_score(&a, &g, &[1]).unwrap(), 2.0);
        let a = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(sequence_score(&a, &g, &[0, 1]).unwrap(), 2.0);
        assert!(matches!(
            sequence_score(&a, &g, &[0, 2]),
            Err(Error::LabelOutOfRange {
                label: 2,
                num_labels: 2
            })
        ));
    }

    #[test]
    fn score_matches_explicit_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (a, g) = random(&mut rng, 4, 3);
        for y in all_paths(4, 3) {
            let s = sequence_score(&a, &g, &y).unwrap();
            assert!((s - explicit_score(&a, &g, &y)).abs() < 1e-12);
        }
    }

    #[test]
    fn single_label_has_probability_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a, g) = random(&mut rng, 5, 1);
        assert!(log_likelihood(&a, &g, &[0; 5]).unwrap().abs() < 1e-12);
        assert_eq!(viterbi_decode(&a, &g), vec![0; 5]);
    }

    #[test]
    fn likelihood_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (a, g) = random(&mut rng, 3, 2);
        let paths = all_paths(3, 2);
        let log_z = log_sum_exp(paths.iter().map(|p| explicit_score(&a, &g, p)));
        for p in &paths {
            let expected = explicit_score(&a, &g, p) - log_z;
            assert!((log_likelihood(&a, &g, p).unwrap() - expected).abs() < 1e-8);
        }
    }

    #[test]
    fn row_shift_leaves_likelihood_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (a, g) = random(&mut rng, 4, 3);
        let y = [2, 0, 0, 1];
        let before = log_likelihood(&a, &g, &y).unwrap();
        let mut shifted = a.clone();
        shifted.row_mut(2).mapv_inplace(|v| v + 7.5);
        let after = log_likelihood(&shifted, &g, &y).unwrap();
        assert!((before - after).abs() < 1e-10);
    }

    #[test]
    fn forward_and_backward_partitions_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for t in 1..7 {
            let (a, g) = random(&mut rng, t, 4);
            assert!((log_partition(&a, &g) - log_partition_backward(&a, &g)).abs() < 1e-8);
        }
    }

    #[test]
    fn decoupled_chain_is_per_turn_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (a, _) = random(&mut rng, 6, 4);
        let g = Mat::zeros((6, 6));
        assert_eq!(viterbi_decode(&a, &g), argmax_decode(&a));
    }

    #[test]
    fn viterbi_matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (a, g) = random(&mut rng, 4, 3);
        let mut best = (f64::NEG_INFINITY, vec![]);
        for p in all_paths(4, 3) {
            let s = explicit_score(&a, &g, &p);
            if s > best.0 {
                best = (s, p);
            }
        }
        assert_eq!(viterbi_decode(&a, &g), best.1);
    }

    #[test]
    fn viterbi_ties_pick_lexicographically_smallest() {
        let a = Mat::zeros((3, 3));
        let g = Mat::zeros((5, 5));
        assert_eq!(viterbi_decode(&a, &g), vec![0, 0, 0]);
        let a = array![[0.0, 1.0, 1.0], [2.0, 2.0, 0.0]];
        assert_eq!(viterbi_decode(&a, &Mat::zeros((5, 5))), vec![1, 0]);
    }

    #[test]
    fn masked_transitions_never_chosen() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let t = initial_transitions(&mut rng, 3);
        assert_eq!(t[[0, 3]], MASKED);
        assert_eq!(t[[4, 1]], MASKED);
        let a = Mat::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));
        let (_, _, dt) = nll_with_gradients(&a, &t, &[0, 1, 2, 0]).unwrap();
        for i in 0..5 {
            assert_eq!(dt[[i, 3]], 0.0);
            assert_eq!(dt[[4, i]], 0.0);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (a, g) = random(&mut rng, 4, 3);
        let y = [1, 1, 0, 2];
        let (_, da, dg) = nll_with_gradients(&a, &g, &y).unwrap();
        let nll = |a: &Mat, g: &Mat| -log_likelihood(a, g, &y).unwrap();
        let eps = 1e-6;
        for ((r, c), &analytic) in da.indexed_iter() {
            let mut p = a.clone();
            p[[r, c]] += eps;
            let mut m = a.clone();
            m[[r, c]] -= eps;
            let numeric = (nll(&p, &g) - nll(&m, &g)) / (2.0 * eps);
            assert!((analytic - numeric).abs() < 1e-7, "dA[{r},{c}]");
        }
        for ((r, c), &analytic) in dg.indexed_iter() {
            let mut p = g.clone();
            p[[r, c]] += eps;
            let mut m = g.clone();
            m[[r, c]] -= eps;
            let numeric = (nll(&a, &p) - nll(&a, &m)) / (2.0 * eps);
            assert!((analytic - numeric).abs() < 1e-7, "dG[{r},{c}]");
        }
    }

    #[test]
    fn identity_mlp_scores_equal_input() {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = CrfHead::new(&mut params, &mut rng, 2, 2);
        let eye = Mat::eye(2);
        params.get_mut(head.mlp.hidden.weight).assign(&eye);
        params.get_mut(head.mlp.output.weight).assign(&eye);
        let c = array![[0.5, 1.5], [2.0, 0.25]];
        let mut g = Graph::new(&params);
        let cv = g.constant(c.clone());
        let s = head.da_scores(&mut g, cv);
        assert_eq!(g.value(s), &c);
    }
}
