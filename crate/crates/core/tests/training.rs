use usda::model::{DarKind, ModelConfig};
use usda::nn::Ctx;
use usda::synthetic::{self, SyntheticSpec};
use usda::trainer::{self, dialogue_gradients};
use usda::{Dialogue, EncoderConfig, ParamStore, TrainConfig, TrainMode, UsdaModel, Vocab};

fn corpus(size: usize, seed: u64) -> Vec<Dialogue> {
    synthetic::generate(&SyntheticSpec {
        size,
        seed,
        max_turns: 5,
        ..Default::default()
    })
    .unwrap()
}

fn model(dar: DarKind, dialogues: &[Dialogue], seed: u64) -> UsdaModel {
    let config = ModelConfig {
        encoder: EncoderConfig {
            token_dim: 8,
            hidden_dim: 8,
            ffn_dim: 16,
            heads: 2,
            exchange_layers: 1,
            dialogue_layers: 1,
            ..Default::default()
        },
        dar,
        num_da: synthetic::da_vocab().len(),
        ..Default::default()
    };
    UsdaModel::new(config, Vocab::build(dialogues, 1, 10_000), seed).unwrap()
}

fn config(mode: TrainMode, epochs: usize) -> TrainConfig {
    TrainConfig {
        mode,
        lambda: 1.0,
        learning_rate: 5e-3,
        batch_size: 8,
        max_epochs: epochs,
        seed: 3,
        ..Default::default()
    }
}

fn same_params(a: &ParamStore, b: &ParamStore) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b.iter())
            .all(|((_, n1, m1), (_, n2, m2))| n1 == n2 && m1 == m2)
}

#[test]
fn training_loss_decreases() {
    let data = corpus(60, 1);
    for mode in [TrainMode::Mtl, TrainMode::Clu, TrainMode::StlUse] {
        let mut m = model(mode.dar_kind(), &data, 2);
        let out = trainer::train(&mut m, &data, &[], &config(mode, 6)).unwrap();
        let first = out.history.first().unwrap().train_loss;
        let last = out.history.last().unwrap().train_loss;
        assert!(last < first, "{mode}: {first} -> {last}");
        assert!(m.params.all_finite());
    }
}

#[test]
fn training_is_deterministic() {
    let data = corpus(40, 4);
    let valid = corpus(10, 5);
    let run = || {
        let mut m = model(DarKind::Crf, &data, 9);
        let out = trainer::train(&mut m, &data, &valid, &config(TrainMode::Mtl, 3)).unwrap();
        (m, out.history)
    };
    let (a, ha) = run();
    let (b, hb) = run();
    assert_eq!(ha, hb);
    assert!(same_params(&a.params, &b.params));
}

#[test]
fn zero_lambda_matches_satisfaction_only() {
    let data = corpus(30, 6);
    let mut mtl = model(DarKind::Crf, &data, 1);
    let mut stl = model(DarKind::Crf, &data, 1);
    let mut c_mtl = config(TrainMode::Mtl, 2);
    c_mtl.lambda = 0.0;
    let c_stl = config(TrainMode::StlUse, 2);

    let d = &data[0];
    let (p1, g1) = dialogue_gradients(&mtl, &mtl.params, d, &c_mtl, &mut Ctx::train(7)).unwrap();
    let (p2, g2) = dialogue_gradients(&stl, &stl.params, d, &c_stl, &mut Ctx::train(7)).unwrap();
    assert_eq!(p1.total, p2.total);
    for id in mtl.params.ids() {
        assert_eq!(g1.get(id), g2.get(id), "{}", mtl.params.name(id));
    }

    trainer::train(&mut mtl, &data, &[], &c_mtl).unwrap();
    trainer::train(&mut stl, &data, &[], &c_stl).unwrap();
    assert!(same_params(&mtl.params, &stl.params));
}

#[test]
fn checkpoint_round_trip_keeps_predictions() {
    let data = corpus(20, 8);
    for dar in [DarKind::Crf, DarKind::Cluster] {
        let m = model(dar, &data, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        let back = UsdaModel::load(&path).unwrap();
        for d in &data {
            let (a, b) = (m.predict(d).unwrap(), back.predict(d).unwrap());
            assert_eq!(a.satisfaction, b.satisfaction);
            assert_eq!(a.dialogue_acts, b.dialogue_acts);
            assert_eq!(a.da_scores, b.da_scores);
        }
    }
}
