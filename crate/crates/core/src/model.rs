//! The assembled joint model: hierarchical encoder, a dialogue-act head
//! (CRF or clustering) and the satisfaction head, plus checkpoint files.

use std::borrow::Cow;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, Graph, Var};
use crate::corpus::{DaVocab, Dialogue};
use crate::dar_cluster::{
    assign_clusters, top_words, ClusterConfig, ClusterHead, ClusterVars, ClusterWords, DaFeature,
};
use crate::dar_crf::{CrfHead, DaDecoding};
use crate::encoder::{EncodedDialogue, EncoderConfig, HierarchicalEncoder, Vocab};
use crate::error::{Error, Result};
use crate::nn::Ctx;
use crate::params::{Mat, ParamStore};
use crate::satisfaction::{
    use_loss, FusionTrace, SatisfactionConfig, SatisfactionHead, SatisfactionVars,
};

pub const CHECKPOINT_FORMAT: &str = "usda-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DarKind {
    /// Supervised labels through a linear-chain CRF.
    #[default]
    Crf,
    /// Unsupervised latent subspace clustering.
    Cluster,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub satisfaction: SatisfactionConfig,
    pub dar: DarKind,
    /// Number of dialogue-act labels for the CRF head.
    pub num_da: usize,
    pub cluster: ClusterConfig,
    pub decoding: DaDecoding,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            satisfaction: SatisfactionConfig::default(),
            dar: DarKind::Crf,
            num_da: 0,
            cluster: ClusterConfig::default(),
            decoding: DaDecoding::Viterbi,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        match self.dar {
            DarKind::Crf if self.num_da == 0 => Err(Error::Config(
                "num_da must be positive for the CRF head".into(),
            )),
            DarKind::Cluster => self.cluster.validate(),
            _ => Ok(()),
        }
    }

    /// Width of the per-turn dialogue-act features.
    pub fn da_width(&self) -> usize {
        match self.dar {
            DarKind::Crf => self.num_da,
            DarKind::Cluster => self.cluster.num_clusters,
        }
    }
}

#[derive(Clone, Debug)]
pub enum DarHead {
    Crf(CrfHead),
    Cluster(ClusterHead),
}

#[derive(Clone, Debug)]
pub struct UsdaModel {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub da_vocab: Option<DaVocab>,
    pub params: ParamStore,
    pub encoder: HierarchicalEncoder,
    pub dar: DarHead,
    pub satisfaction: SatisfactionHead,
}

/// Tape handles of one full forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub encoded: EncodedDialogue,
    /// `c` as seen by the dialogue-act head (detached under stop-gradient).
    pub dar_input: Var,
    /// `T×K` CRF scores or cluster similarity logits.
    pub da_scores: Var,
    pub cluster: Option<ClusterVars>,
    pub satisfaction: SatisfactionVars,
}

/// Eval-mode outputs for one dialogue.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub satisfaction: usize,
    pub dialogue_acts: Vec<usize>,
    pub da_scores: Mat,
    pub trace: FusionTrace,
}

impl UsdaModel {
    /// Parameters are created in a fixed order (encoder, dialogue-act head,
    /// satisfaction head) from a generator seeded with `seed`.
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        let mut config = config;
        config.encoder.vocab_size = vocab.len();
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = HierarchicalEncoder::new(&mut params, &mut rng, &config.encoder);
        let d = config.encoder.hidden_dim;
        let dar = match config.dar {
            DarKind::Crf => DarHead::Crf(CrfHead::new(&mut params, &mut rng, d, config.num_da)),
            DarKind::Cluster => {
                DarHead::Cluster(ClusterHead::new(&mut params, &mut rng, d, &config.cluster))
            }
        };
        let satisfaction = SatisfactionHead::new(
            &mut params,
            &mut rng,
            d,
            config.da_width(),
            &config.satisfaction,
        );
        Ok(UsdaModel {
            config,
            vocab,
            da_vocab: None,
            params,
            encoder,
            dar,
            satisfaction,
        })
    }

    /// Copies of `dialogues` tokenized with this model's vocabulary.
    pub fn prepare(&self, dialogues: &[Dialogue]) -> Vec<Dialogue> {
        dialogues
            .iter()
            .map(|d| {
                let mut d = d.clone();
                self.vocab.tokenize_dialogue(&mut d);
                d
            })
            .collect()
    }

    fn tokenized<'a>(&self, dialogue: &'a Dialogue) -> Cow<'a, Dialogue> {
        let ready = dialogue.exchanges.iter().all(|ex| {
            !ex.user.tokens.is_empty() && ex.system.as_ref().is_none_or(|s| !s.tokens.is_empty())
        });
        if ready {
            Cow::Borrowed(dialogue)
        } else {
            let mut d = dialogue.clone();
            self.vocab.tokenize_dialogue(&mut d);
            Cow::Owned(d)
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        ctx: &mut Ctx,
        dialogue: &Dialogue,
    ) -> Result<ForwardVars> {
        let dialogue = self.tokenized(dialogue);
        let encoded = self.encoder.encode(g, ctx, &dialogue)?;
        let c = encoded.c;
        let (dar_input, da_scores, features, cluster) = match &self.dar {
            DarHead::Crf(head) => {
                let scores = head.da_scores(g, c);
                (c, scores, scores, None)
            }
            DarHead::Cluster(head) => {
                let input = if self.config.cluster.stop_gradient {
                    g.detach(c)
                } else {
                    c
                };
                let out = head.forward(g, input);
                let features = match self.config.cluster.feature {
                    DaFeature::Logits => out.a,
                    DaFeature::Softmax => out.weights,
                };
                (input, out.a, features, Some(out))
            }
        };
        let a = self.satisfaction.uses_da_features().then_some(features);
        let satisfaction = self.satisfaction.forward(g, c, a);
        Ok(ForwardVars {
            encoded,
            dar_input,
            da_scores,
            cluster,
            satisfaction,
        })
    }

    pub fn use_loss(&self, g: &mut Graph, vars: &ForwardVars, dialogue: &Dialogue) -> Var {
        use_loss(g, vars.satisfaction.logits, dialogue.satisfaction.index())
    }

    /// CRF negative log-likelihood (needs gold labels) or clustering loss.
    pub fn dar_loss(&self, g: &mut Graph, vars: &ForwardVars, dialogue: &Dialogue) -> Result<Var> {
        match &self.dar {
            DarHead::Crf(head) => {
                let labels = dialogue
                    .da_labels
                    .as_ref()
                    .ok_or_else(|| Error::InvalidDialogue {
                        id: dialogue.id.clone(),
                        message: "dialogue-act labels required".into(),
                    })?;
                head.nll(g, vars.da_scores, labels)
            }
            DarHead::Cluster(head) => {
                let out = vars.cluster.expect("cluster head produces cluster vars");
                Ok(head.loss(g, vars.dar_input, &out, &self.config.cluster))
            }
        }
    }

    pub fn predict(&self, dialogue: &Dialogue) -> Result<Prediction> {
        let mut g = Graph::new(&self.params);
        let vars = self.forward(&mut g, &mut Ctx::eval(), dialogue)?;
        let trace = FusionTrace::from_vars(&g, &vars.satisfaction);
        let scores = g.value(vars.da_scores).clone();
        let dialogue_acts = match &self.dar {
            DarHead::Crf(head) => head.decode(&self.params, &scores, self.config.decoding),
            DarHead::Cluster(_) => assign_clusters(&scores),
        };
        Ok(Prediction {
            satisfaction: trace.predicted(),
            dialogue_acts,
            da_scores: scores,
            trace,
        })
    }

    /// Row-stochastic cluster weights `softmax(A)` (clustering head only).
    pub fn cluster_weights(&self, dialogue: &Dialogue) -> Result<Option<Mat>> {
        if !matches!(self.dar, DarHead::Cluster(_)) {
            return Ok(None);
        }
        Ok(Some(softmax_rows(&self.predict(dialogue)?.da_scores)))
    }

    /// Most frequent non-stop words of the user turns assigned to each cluster.
    pub fn cluster_top_words(
        &self,
        dialogues: &[Dialogue],
        stop_words: &[&str],
        n: usize,
    ) -> Result<Vec<ClusterWords>> {
        let DarHead::Cluster(head) = &self.dar else {
            return Err(Error::Config("model has no clustering head".into()));
        };
        let mut assigned = Vec::new();
        for d in dialogues {
            let pred = self.predict(d)?;
            for (ex, k) in d.exchanges.iter().zip(pred.dialogue_acts) {
                assigned.push((k, ex.user.text.as_str()));
            }
        }
        Ok(top_words(assigned, head.num_clusters, stop_words, n))
    }

    pub fn to_checkpoint(&self) -> Checkpoint<ModelConfig> {
        Checkpoint::new(
            "model",
            self.config.clone(),
            self.vocab.clone(),
            self.da_vocab.clone(),
            self.params.clone(),
        )
    }

    pub fn from_checkpoint(ckpt: Checkpoint<ModelConfig>) -> Result<Self> {
        ckpt.expect_kind("model")?;
        let mut model = UsdaModel::new(ckpt.config, ckpt.vocab, 0)?;
        model.params.load_exact(&ckpt.params)?;
        model.da_vocab = ckpt.da_vocab;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}

/// On-disk model state: a format header, the configuration needed to rebuild
/// the architecture, the vocabulary and every parameter.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint<C> {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub config: C,
    pub vocab: Vocab,
    pub da_vocab: Option<DaVocab>,
    pub params: ParamStore,
    /// Run manifest of the command that wrote this file.
    #[serde(default)]
    pub manifest: Option<String>,
}

impl<C: Serialize + DeserializeOwned> Checkpoint<C> {
    pub fn new(
        kind: &str,
        config: C,
        vocab: Vocab,
        da_vocab: Option<DaVocab>,
        params: ParamStore,
    ) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            kind: kind.into(),
            config,
            vocab,
            da_vocab,
            params,
            manifest: None,
        }
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            format: String,
            version: u32,
        }
        let header: Header = serde_json::from_str(text)
            .map_err(|e| Error::Checkpoint(format!("unreadable header: {e}")))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unknown format {:?}",
                header.format
            )));
        }
        if header.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                header.version
            )));
        }
        let mut ckpt: Checkpoint<C> = serde_json::from_str(text)?;
        ckpt.vocab.reindex();
        ckpt.params.reindex();
        Ok(ckpt)
    }
}

#[cfg(test)]
pub(crate) mod tests_support {
    use crate::corpus::{Dialogue, Exchange, Satisfaction};

    pub fn toy_dialogue(id: &str, turns: usize) -> Dialogue {
        let mut exchanges: Vec<Exchange> = (0..turns)
            .map(|t| {
                Exchange::new(
                    format!("user says {t} hello"),
                    Some(&format!("system replies {t}")),
                )
            })
            .collect();
        exchanges.last_mut().unwrap().system = None;
        Dialogue {
            id: id.into(),
            da_labels: Some((0..turns).map(|t| t % 3).collect()),
            exchanges,
            satisfaction: Satisfaction::Neutral,
            raw_rating: None,
        }
    }
}
