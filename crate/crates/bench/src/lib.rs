//! Inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use usda::dar_crf::mask_transitions;
use usda::model::{DarKind, ModelConfig, UsdaModel};
use usda::synthetic::{self, SyntheticSpec};
use usda::{Dialogue, EncoderConfig, Mat, Vocab};

/// Random emission scores (`t×k`) and masked transitions.
pub fn crf_inputs(t: usize, k: usize, seed: u64) -> (Mat, Mat) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scores = Mat::from_shape_fn((t, k), |_| rng.gen_range(-2.0..2.0));
    let mut trans = Mat::from_shape_fn((k + 2, k + 2), |_| rng.gen_range(-1.0..1.0));
    mask_transitions(&mut trans);
    (scores, trans)
}

pub fn corpus(size: usize) -> Vec<Dialogue> {
    synthetic::generate(&SyntheticSpec {
        size,
        seed: 11,
        ..Default::default()
    })
    .expect("synthetic corpus")
}

pub fn model(dar: DarKind, dim: usize, dialogues: &[Dialogue]) -> UsdaModel {
    let config = ModelConfig {
        encoder: EncoderConfig {
            token_dim: dim,
            hidden_dim: dim,
            ffn_dim: 2 * dim,
            heads: 2,
            exchange_layers: 1,
            dialogue_layers: 1,
            ..Default::default()
        },
        dar,
        num_da: synthetic::da_vocab().len(),
        ..Default::default()
    };
    UsdaModel::new(config, Vocab::build(dialogues, 1, 10_000), 5).expect("model")
}
