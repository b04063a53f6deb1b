//! Joint user satisfaction estimation (USE) and dialogue act recognition
//! (DAR) for goal-oriented dialogues.
//!
//! The model encodes each exchange with a small Transformer, contextualises
//! the exchange sequence with a dialogue-level Transformer, recognises
//! dialogue acts either with a linear-chain CRF (supervised) or a latent
//! subspace-clustering auto-encoder (unsupervised), and estimates satisfaction
//! from two attentive GRU streams fused by a learned gate.

pub mod analysis;
pub mod autodiff;
pub mod corpus;
pub mod dar_cluster;
pub mod dar_crf;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pretrain;
pub mod satisfaction;
pub mod synthetic;
pub mod trainer;

pub use autodiff::{Graph, Var};
pub use corpus::{CorpusSplit, Dialogue, Exchange, Satisfaction, Speaker, Utterance};
pub use encoder::{EncoderConfig, ExchangeRepresentations, Vocab};
pub use error::{Error, Result};
pub use metrics::{ClassificationReport, EvalReport};
pub use model::{ModelConfig, UsdaModel};
pub use params::{Gradients, Mat, ParamId, ParamStore};
pub use satisfaction::FusionTrace;
pub use trainer::{TrainConfig, TrainMode};
