use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::corpus::{Dialogue, Exchange};
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
const SPECIALS: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

/// Lower-cased whitespace tokens.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

/// Frequency-built word vocabulary with `[UNK]` fallback.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds from every utterance, keeping words seen at least `min_count`
    /// times, most frequent first (ties alphabetical), capped at `max_size`
    /// entries including the special tokens.
    pub fn build<'a>(
        dialogues: impl IntoIterator<Item = &'a Dialogue>,
        min_count: usize,
        max_size: usize,
    ) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for d in dialogues {
            for ex in &d.exchanges {
                for w in words(&ex.user.text) {
                    *counts.entry(w).or_default() += 1;
                }
                if let Some(s) = &ex.system {
                    for w in words(&s.text) {
                        *counts.entry(w).or_default() += 1;
                    }
                }
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count)
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let room = max_size.saturating_sub(tokens.len());
        tokens.extend(ranked.into_iter().take(room).map(|(w, _)| w));
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let mut v = Vocab {
            tokens,
            index: HashMap::new(),
        };
        v.reindex();
        v
    }

    pub fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        words(text).map(|w| self.id(&w)).collect()
    }

    /// Fills the `tokens` field of every utterance.
    pub fn tokenize_dialogue(&self, dialogue: &mut Dialogue) {
        for ex in &mut dialogue.exchanges {
            ex.user.tokens = self.encode(&ex.user.text);
            if let Some(s) = &mut ex.system {
                s.tokens = self.encode(&s.text);
            }
        }
    }
}

/// `[CLS] user [SEP] system [SEP]` token ids with segment ids (0 for the user
/// part, 1 for the system part).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExchangeInput {
    pub ids: Vec<u32>,
    pub segments: Vec<u8>,
}

impl ExchangeInput {
    /// Builds the input from tokenized utterances, truncating to `max_tokens`
    /// (the final position is always `[SEP]`).
    pub fn from_exchange(exchange: &Exchange, max_tokens: usize) -> Result<Self> {
        if exchange.user.tokens.is_empty() {
            return Err(Error::Empty("exchange user tokens"));
        }
        let mut ids = vec![CLS];
        ids.extend(&exchange.user.tokens);
        ids.push(SEP);
        let mut segments = vec![0u8; ids.len()];
        if let Some(sys) = &exchange.system {
            ids.extend(&sys.tokens);
            ids.push(SEP);
            segments.resize(ids.len(), 1);
        }
        let max_tokens = max_tokens.max(2);
        if ids.len() > max_tokens {
            ids.truncate(max_tokens);
            segments.truncate(max_tokens);
            ids[max_tokens - 1] = SEP;
        }
        Ok(ExchangeInput { ids, segments })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Satisfaction;

    #[test]
    fn build_orders_by_frequency() {
        let d = Dialogue {
            id: "a".into(),
            exchanges: vec![
                Exchange::new("Book a a table", Some("a table for how many")),
                Exchange::new("two", None),
            ],
            da_labels: None,
            satisfaction: Satisfaction::Neutral,
            raw_rating: None,
        };
        let v = Vocab::build([&d], 1, 100);
        assert_eq!(v.token(4), "a");
        assert_eq!(v.token(5), "table");
        assert_eq!(v.id("book"), v.id("BOOK".to_lowercase().as_str()));
        assert_eq!(v.id("zebra"), UNK);
        let small = Vocab::build([&d], 2, 100);
        assert_eq!(small.len(), 6);
    }

    #[test]
    fn exchange_layout_and_truncation() {
        let mut ex = Exchange::new("u", Some("s"));
        ex.user.tokens = vec![10, 11, 12];
        ex.system.as_mut().unwrap().tokens = vec![20, 21];
        let full = ExchangeInput::from_exchange(&ex, 64).unwrap();
        assert_eq!(full.ids, vec![CLS, 10, 11, 12, SEP, 20, 21, SEP]);
        assert_eq!(full.segments, vec![0, 0, 0, 0, 0, 1, 1, 1]);
        let cut = ExchangeInput::from_exchange(&ex, 6).unwrap();
        assert_eq!(cut.ids, vec![CLS, 10, 11, 12, SEP, SEP]);

        let mut last = Exchange::new("u", None);
        last.user.tokens = vec![7];
        assert_eq!(
            ExchangeInput::from_exchange(&last, 64).unwrap().ids,
            vec![CLS, 7, SEP]
        );
        last.user.tokens.clear();
        assert!(ExchangeInput::from_exchange(&last, 64).is_err());
    }
}
