//! Joint optimisation, evaluation and checkpoint selection.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::corpus::Dialogue;
use crate::error::{Error, Result};
use crate::metrics::{ClassificationReport, EvalReport};
use crate::model::{DarHead, DarKind, UsdaModel};
use crate::nn::Ctx;
use crate::optim::{Optimizer, OptimizerKind};
use crate::params::{Gradients, ParamStore};
use crate::satisfaction::NUM_CLASSES;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Satisfaction loss only.
    StlUse,
    /// Dialogue-act loss only.
    StlDar,
    /// Satisfaction plus weighted CRF loss.
    #[default]
    Mtl,
    /// Satisfaction plus weighted clustering loss; no dialogue-act labels.
    Clu,
}

impl TrainMode {
    pub fn dar_kind(self) -> DarKind {
        match self {
            TrainMode::Clu => DarKind::Cluster,
            _ => DarKind::Crf,
        }
    }

    pub fn needs_da_labels(self) -> bool {
        matches!(self, TrainMode::StlDar | TrainMode::Mtl)
    }

    pub fn uses_satisfaction(self) -> bool {
        self != TrainMode::StlDar
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::StlUse => "stl-use",
            TrainMode::StlDar => "stl-dar",
            TrainMode::Mtl => "mtl",
            TrainMode::Clu => "clu",
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "stl-use" => Ok(TrainMode::StlUse),
            "stl-dar" => Ok(TrainMode::StlDar),
            "mtl" => Ok(TrainMode::Mtl),
            "clu" => Ok(TrainMode::Clu),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Mtl,
            lambda: 0.01,
            learning_rate: 1e-3,
            batch_size: 16,
            max_epochs: 20,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda {} must be a non-negative number",
                self.lambda
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if let Some(c) = self.clip_norm {
            if c <= 0.0 {
                return Err(Error::Config("clip_norm must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Combines task losses for a mode. `dar_loss` may be omitted only in
/// `stl-use` mode.
pub fn joint_loss(
    use_loss: f64,
    dar_loss: Option<f64>,
    lambda: f64,
    mode: TrainMode,
) -> Result<f64> {
    let need_dar =
        || dar_loss.ok_or_else(|| Error::Config(format!("mode {mode} needs a dialogue-act loss")));
    Ok(match mode {
        TrainMode::StlUse => use_loss,
        TrainMode::StlDar => need_dar()?,
        TrainMode::Mtl | TrainMode::Clu => {
            let dar = need_dar()?;
            if lambda == 0.0 {
                use_loss
            } else {
                use_loss + lambda * dar
            }
        }
    })
}

/// Per-dialogue loss terms from one forward/backward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub use_loss: f64,
    pub dar_loss: f64,
}

/// Loss and parameter gradients of one dialogue under `mode`.
pub fn dialogue_gradients(
    model: &UsdaModel,
    params: &ParamStore,
    dialogue: &Dialogue,
    config: &TrainConfig,
    ctx: &mut Ctx,
) -> Result<(LossParts, Gradients)> {
    let mode = config.mode;
    let mut g = Graph::new(params);
    let vars = model.forward(&mut g, ctx, dialogue)?;
    let use_var = model.use_loss(&mut g, &vars, dialogue);
    let need_dar =
        mode != TrainMode::StlUse && !(mode != TrainMode::StlDar && config.lambda == 0.0);
    let dar_var = if need_dar {
        Some(model.dar_loss(&mut g, &vars, dialogue)?)
    } else {
        None
    };
    let loss = match (mode, dar_var) {
        (TrainMode::StlUse, _) | (_, None) => use_var,
        (TrainMode::StlDar, Some(d)) => d,
        (_, Some(d)) => {
            let weighted = g.scale(d, config.lambda);
            g.add(use_var, weighted)
        }
    };
    let parts = LossParts {
        total: g.scalar(loss),
        use_loss: g.scalar(use_var),
        dar_loss: dar_var.map_or(0.0, |d| g.scalar(d)),
    };
    Ok((parts, g.backward(loss)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_use_loss: f64,
    pub train_dar_loss: f64,
    pub valid: Option<EvalReport>,
    /// Validation score used for checkpoint selection.
    pub selection: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    /// Epoch (1-based) whose parameters the model holds on return.
    pub best_epoch: Option<usize>,
    pub best_selection: Option<f64>,
}

/// Deterministic per-(seed, epoch, position) stream seed.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z =
        seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn check_corpus(model: &UsdaModel, dialogues: &[Dialogue], mode: TrainMode) -> Result<()> {
    let kind = match model.dar {
        DarHead::Crf(_) => DarKind::Crf,
        DarHead::Cluster(_) => DarKind::Cluster,
    };
    if kind != mode.dar_kind() {
        return Err(Error::Config(format!(
            "mode {mode} needs a {:?} dialogue-act head",
            mode.dar_kind()
        )));
    }
    for d in dialogues {
        d.validate()?;
        if mode.needs_da_labels() {
            let labels = d.da_labels.as_ref().ok_or_else(|| Error::InvalidDialogue {
                id: d.id.clone(),
                message: format!("mode {mode} requires dialogue-act labels"),
            })?;
            if let Some(&bad) = labels.iter().find(|&&l| l >= model.config.num_da) {
                return Err(Error::LabelOutOfRange {
                    label: bad,
                    num_labels: model.config.num_da,
                });
            }
        }
    }
    Ok(())
}

/// Mini-batch training with per-epoch validation. On return the model holds
/// the parameters of the best validation epoch (satisfaction macro-F1, or
/// dialogue-act macro-F1 in `stl-dar` mode).
pub fn train(
    model: &mut UsdaModel,
    train: &[Dialogue],
    valid: &[Dialogue],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(model, train, valid, config, |_| {})
}

/// [`train`] with a callback invoked after every epoch.
pub fn train_with(
    model: &mut UsdaModel,
    train: &[Dialogue],
    valid: &[Dialogue],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if config.max_epochs == 0 {
        return Ok(TrainOutcome {
            history: Vec::new(),
            best_epoch: None,
            best_selection: None,
        });
    }
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    check_corpus(model, train, config.mode)?;
    check_corpus(model, valid, config.mode)?;
    let train = model.prepare(train);
    let valid = model.prepare(valid);

    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate, &model.params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sums = LossParts::default();
        for batch in order.chunks(config.batch_size) {
            let results: Vec<Result<(LossParts, Gradients)>> = batch
                .par_iter()
                .map(|&i| {
                    let mut ctx = Ctx::train(mix_seed(config.seed, epoch as u64, i as u64));
                    dialogue_gradients(model, &model.params, &train[i], config, &mut ctx)
                })
                .collect();
            let mut grads = Gradients::zeros_like(&model.params);
            for (&i, r) in batch.iter().zip(results) {
                let (parts, g) = r?;
                if !parts.total.is_finite() || !g.all_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss at epoch {epoch}, dialogue {} (total={}, use={}, dar={}); batch={:?}",
                        train[i].id,
                        parts.total,
                        parts.use_loss,
                        parts.dar_loss,
                        batch
                            .iter()
                            .map(|&j| train[j].id.as_str())
                            .collect::<Vec<_>>()
                    )));
                }
                sums.total += parts.total;
                sums.use_loss += parts.use_loss;
                sums.dar_loss += parts.dar_loss;
                grads.accumulate(&g);
            }
            grads.scale(1.0 / batch.len() as f64);
            if let Some(c) = config.clip_norm {
                grads.clip_global_norm(c);
            }
            optimizer.step(&mut model.params, &grads);
        }
        let n = train.len() as f64;
        let valid_report = if valid.is_empty() {
            None
        } else {
            Some(evaluate(model, &valid, config.mode)?)
        };
        let selection = valid_report
            .as_ref()
            .map_or(-sums.total / n, |r| selection_score(r, config.mode));
        let record = EpochRecord {
            epoch,
            train_loss: sums.total / n,
            train_use_loss: sums.use_loss / n,
            train_dar_loss: sums.dar_loss / n,
            valid: valid_report,
            selection,
        };
        log::info!(
            "epoch {epoch}: loss={:.5} use={:.5} dar={:.5} selection={:.4}",
            record.train_loss,
            record.train_use_loss,
            record.train_dar_loss,
            record.selection
        );
        on_epoch(&record);
        history.push(record);
        if best.as_ref().is_none_or(|(s, _, _)| selection > *s) {
            best = Some((selection, epoch, model.params.clone()));
        }
    }
    let (score, epoch, params) = best.expect("at least one epoch ran");
    model.params = params;
    Ok(TrainOutcome {
        history,
        best_epoch: Some(epoch),
        best_selection: Some(score),
    })
}

pub fn selection_score(report: &EvalReport, mode: TrainMode) -> f64 {
    match mode {
        TrainMode::StlDar => report.dar_f1(),
        _ => report.use_f1(),
    }
}

/// Satisfaction metrics over dialogues and, in `mtl`/`stl-dar` mode with gold
/// labels available, dialogue-act metrics over turns.
pub fn evaluate(model: &UsdaModel, dialogues: &[Dialogue], mode: TrainMode) -> Result<EvalReport> {
    if dialogues.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let predictions = dialogues
        .par_iter()
        .map(|d| model.predict(d))
        .collect::<Result<Vec<_>>>()?;
    let satisfaction = if mode.uses_satisfaction() {
        let gold: Vec<usize> = dialogues.iter().map(|d| d.satisfaction.index()).collect();
        let pred: Vec<usize> = predictions.iter().map(|p| p.satisfaction).collect();
        Some(ClassificationReport::compute(&gold, &pred, NUM_CLASSES)?)
    } else {
        None
    };
    let with_labels = dialogues.iter().all(|d| d.da_labels.is_some());
    let dialogue_acts = if mode.needs_da_labels() && with_labels {
        let mut gold = Vec::new();
        let mut pred = Vec::new();
        for (d, p) in dialogues.iter().zip(&predictions) {
            gold.extend(d.da_labels.as_ref().expect("checked above"));
            pred.extend(&p.dialogue_acts);
        }
        Some(ClassificationReport::compute(
            &gold,
            &pred,
            model.config.num_da,
        )?)
    } else {
        None
    };
    Ok(EvalReport {
        satisfaction,
        dialogue_acts,
        num_dialogues: dialogues.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn joint_loss_examples() {
        assert_eq!(
            joint_loss(0.7, Some(3.0), 0.0, TrainMode::Mtl).unwrap(),
            0.7
        );
        assert!((joint_loss(1.0, Some(2.0), 0.01, TrainMode::Mtl).unwrap() - 1.02).abs() < 1e-15);
        assert!((joint_loss(1.0, Some(2.0), 0.01, TrainMode::Clu).unwrap() - 1.02).abs() < 1e-15);
        assert_eq!(
            joint_loss(123.0, Some(2.0), 0.5, TrainMode::StlDar).unwrap(),
            2.0
        );
        assert_eq!(joint_loss(1.5, None, 0.5, TrainMode::StlUse).unwrap(), 1.5);
        assert!(joint_loss(1.5, None, 0.5, TrainMode::Mtl).is_err());
    }

    #[test]
    fn mode_parsing() {
        for m in [
            TrainMode::StlUse,
            TrainMode::StlDar,
            TrainMode::Mtl,
            TrainMode::Clu,
        ] {
            assert_eq!(m.as_str().parse::<TrainMode>().unwrap(), m);
        }
        assert_eq!("stl_use".parse::<TrainMode>().unwrap(), TrainMode::StlUse);
        assert!("joint".parse::<TrainMode>().is_err());
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            lambda: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn seeds_mix() {
        assert_ne!(mix_seed(0, 1, 2), mix_seed(0, 2, 1));
        assert_eq!(mix_seed(7, 1, 2), mix_seed(7, 1, 2));
    }
}
