//! Hierarchical Transformer encoder.
//!
//! Each exchange `[CLS] user [SEP] system [SEP]` is encoded by a small
//! token-level Transformer whose `[CLS]` output becomes the exchange vector
//! `h_t`. The sequence `h_1..h_T` plus positional encodings then passes
//! through the dialogue-level Transformer, yielding contextualised vectors
//! `c_1..c_T`.

mod transformer;
mod vocab;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use transformer::{sinusoidal_positions, MultiHeadAttention, TransformerLayer};
pub use vocab::{words, ExchangeInput, Vocab, CLS, PAD, SEP, UNK};

use crate::autodiff::{Graph, Var};
use crate::corpus::{Dialogue, Exchange};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Linear};
use crate::params::{uniform, xavier_uniform, Mat, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Positional {
    #[default]
    Sinusoidal,
    Learned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub token_dim: usize,
    pub exchange_layers: usize,
    pub dialogue_layers: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub dropout: f64,
    pub max_exchange_tokens: usize,
    /// Residual + layer norm after the attention sub-layer as well as the FFN.
    pub attention_post_norm: bool,
    pub positional: Positional,
    /// Table size for learned positions.
    pub max_positions: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 0,
            token_dim: 64,
            exchange_layers: 1,
            dialogue_layers: 2,
            hidden_dim: 64,
            ffn_dim: 128,
            heads: 4,
            dropout: 0.1,
            max_exchange_tokens: 64,
            attention_post_norm: true,
            positional: Positional::Sinusoidal,
            max_positions: 128,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("token_dim", self.token_dim),
            ("hidden_dim", self.hidden_dim),
            ("ffn_dim", self.ffn_dim),
            ("heads", self.heads),
            ("max_exchange_tokens", self.max_exchange_tokens),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.hidden_dim.is_multiple_of(self.heads) || !self.token_dim.is_multiple_of(self.heads)
        {
            return Err(Error::Config(format!(
                "token_dim {} and hidden_dim {} must be divisible by heads {}",
                self.token_dim, self.hidden_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} not in [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Anything that maps an exchange to a `1×d` vector on the tape.
pub trait ExchangeEncoder {
    fn output_dim(&self) -> usize;
    fn encode_exchange(&self, g: &mut Graph, ctx: &mut Ctx, exchange: &Exchange) -> Result<Var>;
}

/// Token-level Transformer over one exchange; output is the `[CLS]` row.
#[derive(Clone, Debug)]
pub struct TransformerExchangeEncoder {
    pub token_embedding: ParamId,
    pub segment_embedding: ParamId,
    pub positions: Option<ParamId>,
    pub layers: Vec<TransformerLayer>,
    pub projection: Option<Linear>,
    pub token_dim: usize,
    pub hidden_dim: usize,
    pub max_tokens: usize,
    pub dropout: f64,
}

impl TransformerExchangeEncoder {
    pub fn new<R: Rng>(params: &mut ParamStore, rng: &mut R, config: &EncoderConfig) -> Self {
        let td = config.token_dim;
        let token_embedding = params.add(
            "exchange.token_embedding",
            uniform(rng, config.vocab_size, td, 0.1),
        );
        let segment_embedding = params.add("exchange.segment_embedding", uniform(rng, 2, td, 0.1));
        let positions = (config.positional == Positional::Learned).then(|| {
            params.add(
                "exchange.positions",
                uniform(rng, config.max_exchange_tokens, td, 0.1),
            )
        });
        let layers = (0..config.exchange_layers)
            .map(|l| {
                TransformerLayer::new(
                    params,
                    rng,
                    &format!("exchange.layer{l}"),
                    td,
                    config.ffn_dim,
                    config.heads,
                    config.dropout,
                    config.attention_post_norm,
                )
            })
            .collect();
        let projection = (td != config.hidden_dim)
            .then(|| Linear::new(params, rng, "exchange.projection", td, config.hidden_dim));
        TransformerExchangeEncoder {
            token_embedding,
            segment_embedding,
            positions,
            layers,
            projection,
            token_dim: td,
            hidden_dim: config.hidden_dim,
            max_tokens: config.max_exchange_tokens,
            dropout: config.dropout,
        }
    }

    pub fn encode_input(&self, g: &mut Graph, ctx: &mut Ctx, input: &ExchangeInput) -> Result<Var> {
        if input.ids.is_empty() {
            return Err(Error::Empty("exchange token sequence"));
        }
        let n = input.ids.len();
        let table = g.param(self.token_embedding);
        let ids: Vec<usize> = input.ids.iter().map(|&i| i as usize).collect();
        let vocab = g.shape(table).0;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Config(format!(
                "token id {bad} outside vocabulary of {vocab}"
            )));
        }
        let tokens = g.gather_rows(table, &ids);
        let seg_table = g.param(self.segment_embedding);
        let segs: Vec<usize> = input.segments.iter().map(|&s| s as usize).collect();
        let segments = g.gather_rows(seg_table, &segs);
        let pos = match self.positions {
            Some(p) => {
                let table = g.param(p);
                g.slice_rows(table, 0, n)
            }
            None => g.constant(sinusoidal_positions(n, self.token_dim)),
        };
        let x = g.add(tokens, segments);
        let x = g.scale(x, (self.token_dim as f64).sqrt());
        let mut x = g.add(x, pos);
        x = ctx.dropout(g, x, self.dropout);
        for layer in &self.layers {
            x = layer.forward(g, ctx, x).0;
        }
        let cls = g.slice_rows(x, 0, 1);
        Ok(match &self.projection {
            Some(p) => p.forward(g, cls),
            None => cls,
        })
    }
}

impl ExchangeEncoder for TransformerExchangeEncoder {
    fn output_dim(&self) -> usize {
        self.hidden_dim
    }

    fn encode_exchange(&self, g: &mut Graph, ctx: &mut Ctx, exchange: &Exchange) -> Result<Var> {
        let input = ExchangeInput::from_exchange(exchange, self.max_tokens)?;
        self.encode_input(g, ctx, &input)
    }
}

/// Adapter for externally computed exchange vectors (for instance a frozen
/// pretrained encoder). Its outputs are constants on the tape.
pub struct FixedExchangeEncoder<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&Exchange) -> Vec<f64>> FixedExchangeEncoder<F> {
    pub fn new(dim: usize, f: F) -> Self {
        FixedExchangeEncoder { dim, f }
    }
}

impl<F: Fn(&Exchange) -> Vec<f64>> ExchangeEncoder for FixedExchangeEncoder<F> {
    fn output_dim(&self) -> usize {
        self.dim
    }

    fn encode_exchange(&self, g: &mut Graph, _ctx: &mut Ctx, exchange: &Exchange) -> Result<Var> {
        let v = (self.f)(exchange);
        if v.len() != self.dim {
            return Err(Error::Config(format!(
                "fixed encoder returned {} values, expected {}",
                v.len(),
                self.dim
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("fixed exchange encoding".into()));
        }
        Ok(g.row(&v))
    }
}

/// Dialogue-level Transformer over exchange vectors.
#[derive(Clone, Debug)]
pub struct DialogueEncoder {
    pub layers: Vec<TransformerLayer>,
    pub positions: Option<ParamId>,
    pub dim: usize,
    pub dropout: f64,
}

impl DialogueEncoder {
    pub fn new<R: Rng>(params: &mut ParamStore, rng: &mut R, config: &EncoderConfig) -> Self {
        let d = config.hidden_dim;
        let positions = (config.positional == Positional::Learned).then(|| {
            params.add(
                "dialogue.positions",
                xavier_uniform(rng, config.max_positions, d),
            )
        });
        let layers = (0..config.dialogue_layers)
            .map(|l| {
                TransformerLayer::new(
                    params,
                    rng,
                    &format!("dialogue.layer{l}"),
                    d,
                    config.ffn_dim,
                    config.heads,
                    config.dropout,
                    config.attention_post_norm,
                )
            })
            .collect();
        DialogueEncoder {
            layers,
            positions,
            dim: d,
            dropout: config.dropout,
        }
    }

    /// `h` is `T×d`; returns `c` (`T×d`) and every attention matrix.
    pub fn forward(&self, g: &mut Graph, ctx: &mut Ctx, h: Var) -> Result<(Var, Vec<Var>)> {
        let (t, d) = g.shape(h);
        if t == 0 {
            return Err(Error::Empty("dialogue exchanges"));
        }
        if g.value(h).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("exchange representations".into()));
        }
        let pos = match self.positions {
            Some(p) => {
                let table = g.param(p);
                if t > g.shape(table).0 {
                    return Err(Error::Config(format!(
                        "dialogue of {t} turns exceeds learned position table"
                    )));
                }
                g.slice_rows(table, 0, t)
            }
            None => g.constant(sinusoidal_positions(t, d)),
        };
        let mut x = g.add(h, pos);
        x = ctx.dropout(g, x, self.dropout);
        let mut probs = Vec::new();
        for layer in &self.layers {
            let (out, p) = layer.forward(g, ctx, x);
            x = out;
            probs.extend(p);
        }
        Ok((x, probs))
    }
}

/// Exchange-level and dialogue-level vectors for one dialogue.
#[derive(Clone, Debug, PartialEq)]
pub struct ExchangeRepresentations {
    /// `T×d` exchange vectors.
    pub h: Mat,
    /// `T×d` contextualised vectors.
    pub c: Mat,
}

/// Tape handles for one encoded dialogue.
#[derive(Clone, Debug)]
pub struct EncodedDialogue {
    pub h: Var,
    pub c: Var,
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct HierarchicalEncoder {
    pub exchange: TransformerExchangeEncoder,
    pub dialogue: DialogueEncoder,
}

impl HierarchicalEncoder {
    pub fn new<R: Rng>(params: &mut ParamStore, rng: &mut R, config: &EncoderConfig) -> Self {
        HierarchicalEncoder {
            exchange: TransformerExchangeEncoder::new(params, rng, config),
            dialogue: DialogueEncoder::new(params, rng, config),
        }
    }

    pub fn encode(
        &self,
        g: &mut Graph,
        ctx: &mut Ctx,
        dialogue: &Dialogue,
    ) -> Result<EncodedDialogue> {
        self.encode_with(g, ctx, &self.exchange, dialogue)
    }

    /// Same as [`Self::encode`] with a substitute exchange encoder.
    pub fn encode_with(
        &self,
        g: &mut Graph,
        ctx: &mut Ctx,
        exchange_encoder: &dyn ExchangeEncoder,
        dialogue: &Dialogue,
    ) -> Result<EncodedDialogue> {
        if exchange_encoder.output_dim() != self.dialogue.dim {
            return Err(Error::Config(format!(
                "exchange encoder width {} does not match dialogue width {}",
                exchange_encoder.output_dim(),
                self.dialogue.dim
            )));
        }
        let rows = dialogue
            .exchanges
            .iter()
            .map(|ex| exchange_encoder.encode_exchange(g, ctx, ex))
            .collect::<Result<Vec<_>>>()?;
        if rows.is_empty() {
            return Err(Error::Empty("dialogue exchanges"));
        }
        let h = g.concat_rows(&rows);
        let (c, attention) = self.dialogue.forward(g, ctx, h)?;
        Ok(EncodedDialogue { h, c, attention })
    }

    /// Eval-mode representations of a tokenized dialogue.
    pub fn representations(
        &self,
        params: &ParamStore,
        dialogue: &Dialogue,
    ) -> Result<ExchangeRepresentations> {
        let mut g = Graph::new(params);
        let enc = self.encode(&mut g, &mut Ctx::eval(), dialogue)?;
        Ok(ExchangeRepresentations {
            h: g.value(enc.h).clone(),
            c: g.value(enc.c).clone(),
        })
    }
}
