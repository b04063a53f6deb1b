//! Task-adaptive pre-training of the hierarchical encoder with system
//! response selection (per turn) and dialogue incoherence detection (per
//! dialogue).

pub mod bm25;
pub mod samples;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, Graph, Var};
use crate::corpus::Dialogue;
use crate::encoder::{EncoderConfig, HierarchicalEncoder, Vocab};
use crate::error::{Error, Result};
use crate::metrics::ClassificationReport;
use crate::model::{Checkpoint, ModelConfig, UsdaModel};
use crate::nn::{Ctx, Linear};
use crate::optim::{Optimizer, OptimizerKind};
use crate::params::{Gradients, ParamStore};
use crate::trainer::mix_seed;

pub use bm25::Bm25Index;
pub use samples::{
    generate_samples, make_did_negative, make_srs_negative, read_samples, write_samples,
    ConfounderOptions, DidMode, GenerationOptions, Perturbation, PretrainSample,
    ThresholdDirection,
};

/// `−[y log σ(z) + (1−y) log(1−σ(z))]` written as `softplus(z) − y z`.
pub fn bce_with_logits(z: f64, y: f64) -> f64 {
    softplus(z) - y * z
}

/// Cross-entropy of a probability, clamped away from 0 and 1.
pub fn bce(p: f64, y: f64) -> f64 {
    let p = p.clamp(1e-15, 1.0 - 1e-15);
    let loss = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
    if (p - y).abs() < 1e-12 {
        0.0
    } else {
        loss
    }
}

fn bce_var(g: &mut Graph, z: Var, y: &[f64]) -> Var {
    // mean over entries of softplus(z) − y ⊙ z, z is a row or column
    let n = y.len() as f64;
    let (r, c) = g.shape(z);
    let targets =
        g.constant(crate::params::Mat::from_shape_vec((r, c), y.to_vec()).expect("shape"));
    let sp = g.softplus(z);
    let yz = g.mul(targets, z);
    let diff = g.sub(sp, yz);
    let total = g.sum(diff);
    g.scale(total, 1.0 / n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub clip_norm: Option<f64>,
    pub optimizer: OptimizerKind,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 5,
            seed: 0,
            clip_norm: Some(1.0),
            optimizer: OptimizerKind::Adam,
        }
    }
}

/// Encoder plus the two binary heads used only during pre-training.
#[derive(Clone, Debug)]
pub struct PretrainModel {
    pub config: EncoderConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
    pub encoder: HierarchicalEncoder,
    pub srs_head: Linear,
    pub did_head: Linear,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainLoss {
    pub srs: f64,
    pub did: f64,
}

impl PretrainLoss {
    pub fn total(&self) -> f64 {
        self.srs + self.did
    }
}

/// Turns that carry a system utterance; only they are scored for SRS.
pub fn srs_turns(dialogue: &Dialogue) -> Vec<usize> {
    (0..dialogue.num_turns())
        .filter(|&t| dialogue.exchanges[t].system.is_some())
        .collect()
}

impl PretrainModel {
    /// The encoder is built exactly as inside [`crate::UsdaModel`] so its
    /// parameters carry the same names and seed-order.
    pub fn new(config: EncoderConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        let mut config = config;
        config.vocab_size = vocab.len();
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = HierarchicalEncoder::new(&mut params, &mut rng, &config);
        let d = config.hidden_dim;
        let srs_head = Linear::new(&mut params, &mut rng, "pretrain.srs", d, 1);
        let did_head = Linear::new(&mut params, &mut rng, "pretrain.did", d, 1);
        Ok(PretrainModel {
            config,
            vocab,
            params,
            encoder,
            srs_head,
            did_head,
        })
    }

    fn tokenized(&self, d: &Dialogue) -> Dialogue {
        let mut d = d.clone();
        self.vocab.tokenize_dialogue(&mut d);
        d
    }

    /// SRS logits (one per turn) and the DID logit.
    pub fn logits(&self, g: &mut Graph, ctx: &mut Ctx, dialogue: &Dialogue) -> Result<(Var, Var)> {
        let enc = self.encoder.encode(g, ctx, dialogue)?;
        let srs = self.srs_head.forward(g, enc.c);
        let pooled = g.mean_rows(enc.c);
        let did = self.did_head.forward(g, pooled);
        Ok((srs, did))
    }

    /// Mean SRS cross-entropy over scored turns and the DID cross-entropy.
    pub fn losses(
        &self,
        g: &mut Graph,
        ctx: &mut Ctx,
        sample: &PretrainSample,
    ) -> Result<(Var, Var)> {
        let (srs, did) = self.logits(g, ctx, &sample.dialogue)?;
        let turns = srs_turns(&sample.dialogue);
        let srs_loss = if turns.is_empty() {
            g.constant(crate::params::Mat::zeros((1, 1)))
        } else {
            let rows: Vec<Var> = turns.iter().map(|&t| g.slice_rows(srs, t, 1)).collect();
            let picked = g.concat_rows(&rows);
            let y: Vec<f64> = turns
                .iter()
                .map(|&t| f64::from(sample.srs_labels[t]))
                .collect();
            bce_var(g, picked, &y)
        };
        let did_loss = bce_var(g, did, &[f64::from(sample.did_label)]);
        Ok((srs_loss, did_loss))
    }

    /// One optimiser update on `batch`; returns the batch-mean losses.
    pub fn step(
        &mut self,
        batch: &[&PretrainSample],
        optimizer: &mut Optimizer,
        config: &PretrainConfig,
        step_seed: u64,
    ) -> Result<PretrainLoss> {
        let results: Vec<Result<(PretrainLoss, Gradients)>> = batch
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let mut g = Graph::new(&self.params);
                let mut ctx = Ctx::train(mix_seed(step_seed, 1, i as u64));
                let (srs, did) = self.losses(&mut g, &mut ctx, s)?;
                let total = g.add(srs, did);
                let parts = PretrainLoss {
                    srs: g.scalar(srs),
                    did: g.scalar(did),
                };
                Ok((parts, g.backward(total)))
            })
            .collect();
        let mut grads = Gradients::zeros_like(&self.params);
        let mut sum = PretrainLoss::default();
        for (s, r) in batch.iter().zip(results) {
            let (parts, g) = r?;
            if !parts.total().is_finite() || !g.all_finite() {
                return Err(Error::NonFinite(format!(
                    "pre-training loss on {}",
                    s.dialogue.id
                )));
            }
            sum.srs += parts.srs;
            sum.did += parts.did;
            grads.accumulate(&g);
        }
        let n = batch.len().max(1) as f64;
        grads.scale(1.0 / n);
        if let Some(c) = config.clip_norm {
            grads.clip_global_norm(c);
        }
        optimizer.step(&mut self.params, &grads);
        Ok(PretrainLoss {
            srs: sum.srs / n,
            did: sum.did / n,
        })
    }

    /// Turn-level SRS and dialogue-level DID reports at threshold 0.5.
    pub fn evaluate(&self, samples: &[PretrainSample]) -> Result<PretrainReport> {
        if samples.is_empty() {
            return Err(Error::Empty("pre-training evaluation set"));
        }
        let outputs = samples
            .par_iter()
            .map(|s| {
                let d = self.tokenized(&s.dialogue);
                let mut g = Graph::new(&self.params);
                let (srs, did) = self.logits(&mut g, &mut Ctx::eval(), &d)?;
                let srs: Vec<f64> = g.value(srs).iter().copied().collect();
                Ok((srs, g.scalar(did)))
            })
            .collect::<Result<Vec<_>>>()?;
        let (mut sg, mut sp, mut dg, mut dp) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (s, (srs, did)) in samples.iter().zip(outputs) {
            for t in srs_turns(&s.dialogue) {
                sg.push(usize::from(s.srs_labels[t]));
                sp.push(usize::from(srs[t] > 0.0));
            }
            dg.push(usize::from(s.did_label));
            dp.push(usize::from(did > 0.0));
        }
        Ok(PretrainReport {
            srs: ClassificationReport::compute(&sg, &sp, 2)?,
            did: ClassificationReport::compute(&dg, &dp, 2)?,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint<EncoderConfig> {
        Checkpoint::new(
            "pretrain",
            self.config.clone(),
            self.vocab.clone(),
            None,
            self.params.clone(),
        )
    }

    pub fn from_checkpoint(ckpt: Checkpoint<EncoderConfig>) -> Result<Self> {
        ckpt.expect_kind("pretrain")?;
        let mut model = PretrainModel::new(ckpt.config, ckpt.vocab, 0)?;
        model.params.load_exact(&ckpt.params)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }

    /// A joint model sharing this encoder's configuration, vocabulary and
    /// weights. The two pre-training heads are dropped.
    pub fn joint_model(&self, mut config: ModelConfig, seed: u64) -> Result<UsdaModel> {
        config.encoder = self.config.clone();
        let mut model = UsdaModel::new(config, self.vocab.clone(), seed)?;
        let heads = self
            .params
            .iter()
            .filter(|(_, name, _)| name.starts_with("pretrain."))
            .count();
        let copied = model.params.load_matching(&self.params);
        if copied + heads != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "copied {copied} of {} encoder parameters",
                self.params.len() - heads
            )));
        }
        Ok(model)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Turn-level; F1 is the macro average over the two labels.
    pub srs: ClassificationReport,
    pub did: ClassificationReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub srs_loss: f64,
    pub did_loss: f64,
    pub valid: Option<PretrainReport>,
}

/// Runs `config.epochs` passes over `samples` in seeded shuffled order.
pub fn pretrain(
    model: &mut PretrainModel,
    samples: &[PretrainSample],
    valid: &[PretrainSample],
    config: &PretrainConfig,
) -> Result<Vec<PretrainEpoch>> {
    if config.batch_size == 0 || config.learning_rate.is_nan() || config.learning_rate <= 0.0 {
        return Err(Error::Config(
            "batch_size and learning_rate must be positive".into(),
        ));
    }
    if config.epochs == 0 {
        return Ok(Vec::new());
    }
    if samples.is_empty() {
        return Err(Error::Empty("pre-training samples"));
    }
    let prepared: Vec<PretrainSample> = samples
        .iter()
        .map(|s| PretrainSample {
            dialogue: model.tokenized(&s.dialogue),
            ..s.clone()
        })
        .collect();
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate, &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut history = Vec::new();
    let mut step = 0u64;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sum = PretrainLoss::default();
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&PretrainSample> = chunk.iter().map(|&i| &prepared[i]).collect();
            step += 1;
            let l = model.step(
                &batch,
                &mut optimizer,
                config,
                mix_seed(config.seed, epoch as u64, step),
            )?;
            sum.srs += l.srs * batch.len() as f64;
            sum.did += l.did * batch.len() as f64;
        }
        let n = prepared.len() as f64;
        let valid = if valid.is_empty() {
            None
        } else {
            Some(model.evaluate(valid)?)
        };
        log::info!(
            "pretrain epoch {epoch}: srs={:.5} did={:.5}{}",
            sum.srs / n,
            sum.did / n,
            valid.as_ref().map_or(String::new(), |r| format!(
                " srs_f1={:.4} did_f1={:.4}",
                r.srs.macro_f1, r.did.macro_f1
            ))
        );
        history.push(PretrainEpoch {
            epoch,
            srs_loss: sum.srs / n,
            did_loss: sum.did / n,
            valid,
        });
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_examples() {
        assert_eq!(bce(1.0, 1.0), 0.0);
        assert_eq!(bce(0.0, 0.0), 0.0);
        assert!((bce(0.5, 1.0) - 2f64.ln()).abs() < 1e-15);
        assert!((bce(0.5, 0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((bce_with_logits(0.0, 1.0) - 2f64.ln()).abs() < 1e-15);
        assert!(bce_with_logits(-800.0, 1.0).is_finite());
        for z in [-3.0, -0.2, 0.0, 1.7] {
            let p = crate::autodiff::sigmoid(z);
            for y in [0.0, 1.0] {
                assert!((bce_with_logits(z, y) - bce(p, y)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tape_bce_matches_scalar() {
        let params = ParamStore::new();
        let mut g = Graph::new(&params);
        let z = g.row(&[0.3, -1.2, 2.0]);
        let l = bce_var(&mut g, z, &[1.0, 0.0, 1.0]);
        let expected =
            (bce_with_logits(0.3, 1.0) + bce_with_logits(-1.2, 0.0) + bce_with_logits(2.0, 1.0))
                / 3.0;
        assert!((g.scalar(l) - expected).abs() < 1e-14);
    }

    #[test]
    fn encoder_names_match_joint_model() {
        let d = crate::model::tests_support::toy_dialogue("a", 3);
        let vocab = Vocab::build([&d], 1, 50);
        let config = EncoderConfig {
            token_dim: 8,
            hidden_dim: 8,
            ffn_dim: 8,
            heads: 2,
            ..Default::default()
        };
        let pre = PretrainModel::new(config.clone(), vocab.clone(), 1).unwrap();
        let mut joint = crate::model::UsdaModel::new(
            crate::model::ModelConfig {
                encoder: config,
                num_da: 3,
                ..Default::default()
            },
            vocab,
            2,
        )
        .unwrap();
        let copied = joint.params.load_matching(&pre.params);
        assert_eq!(copied, pre.params.len() - 4);
        let from_pre = pre.joint_model(joint.config.clone(), 3).unwrap();
        for (id, name, value) in pre.params.iter() {
            if !name.starts_with("pretrain.") {
                assert_eq!(
                    from_pre.params.get(from_pre.params.id(name).unwrap()),
                    value,
                    "{id:?}"
                );
            }
        }
    }
}
