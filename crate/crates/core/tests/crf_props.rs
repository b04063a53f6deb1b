use ndarray::Array2;
use proptest::prelude::*;
use usda::dar_crf::{log_partition, mask_transitions, sequence_score, viterbi_decode};

fn inputs() -> impl Strategy<Value = (Array2<f64>, Array2<f64>)> {
    (1usize..5, 1usize..4).prop_flat_map(|(t, k)| {
        (
            prop::collection::vec(-3.0..3.0f64, t * k),
            prop::collection::vec(-2.0..2.0f64, (k + 2) * (k + 2)),
        )
            .prop_map(move |(s, tr)| {
                let mut trans = Array2::from_shape_vec((k + 2, k + 2), tr).unwrap();
                mask_transitions(&mut trans);
                (Array2::from_shape_vec((t, k), s).unwrap(), trans)
            })
    })
}

fn paths(t: usize, k: usize) -> Vec<Vec<usize>> {
    (0..k.pow(t as u32))
        .map(|mut n| {
            (0..t)
                .map(|_| {
                    let l = n % k;
                    n /= k;
                    l
                })
                .collect()
        })
        .collect()
}

proptest! {
    #[test]
    fn partition_and_viterbi_agree_with_enumeration((scores, trans) in inputs()) {
        let (t, k) = scores.dim();
        let all: Vec<(f64, Vec<usize>)> = paths(t, k)
            .into_iter()
            .map(|p| (sequence_score(&scores, &trans, &p).unwrap(), p))
            .collect();
        let max = all.iter().map(|(s, _)| *s).fold(f64::NEG_INFINITY, f64::max);
        let logz = max + all.iter().map(|(s, _)| (s - max).exp()).sum::<f64>().ln();
        prop_assert!((log_partition(&scores, &trans) - logz).abs() < 1e-9);
        let best = viterbi_decode(&scores, &trans);
        prop_assert!((sequence_score(&scores, &trans, &best).unwrap() - max).abs() < 1e-9);
    }
}
