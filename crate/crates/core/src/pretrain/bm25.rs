//! BM25 retrieval over every utterance of a corpus.

use std::collections::{BTreeMap, HashMap};

use crate::corpus::{Dialogue, Speaker};
use crate::encoder::words;
use crate::error::{Error, Result};

pub const K1: f64 = 1.5;
pub const B: f64 = 0.75;

/// One indexed utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Document {
    pub dialogue: String,
    pub turn: usize,
    pub speaker: Speaker,
    pub text: String,
    pub len: usize,
}

#[derive(Clone, Debug)]
pub struct Bm25Index {
    pub documents: Vec<Document>,
    /// term -> (document, term frequency), documents ascending.
    postings: HashMap<String, Vec<(usize, u32)>>,
    avg_len: f64,
    pub k1: f64,
    pub b: f64,
}

impl Bm25Index {
    /// Indexes every user and system utterance once.
    pub fn build(corpus: &[Dialogue]) -> Result<Self> {
        let mut texts = Vec::new();
        for d in corpus {
            for (t, ex) in d.exchanges.iter().enumerate() {
                texts.push((d.id.clone(), t, Speaker::User, ex.user.text.clone()));
                if let Some(s) = &ex.system {
                    texts.push((d.id.clone(), t, Speaker::System, s.text.clone()));
                }
            }
        }
        Self::from_documents(texts)
    }

    pub fn from_documents(texts: Vec<(String, usize, Speaker, String)>) -> Result<Self> {
        if texts.is_empty() {
            return Err(Error::Empty("corpus for retrieval index"));
        }
        let mut documents = Vec::with_capacity(texts.len());
        let mut postings: HashMap<String, Vec<(usize, u32)>> = HashMap::new();
        let mut total_len = 0usize;
        for (i, (dialogue, turn, speaker, text)) in texts.into_iter().enumerate() {
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            let mut len = 0;
            for w in words(&text) {
                *tf.entry(w).or_default() += 1;
                len += 1;
            }
            for (w, c) in tf {
                postings.entry(w).or_default().push((i, c));
            }
            total_len += len;
            documents.push(Document {
                dialogue,
                turn,
                speaker,
                text,
                len,
            });
        }
        let avg_len = (total_len as f64 / documents.len() as f64).max(1e-9);
        Ok(Bm25Index {
            documents,
            postings,
            avg_len,
            k1: K1,
            b: B,
        })
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn document_frequency(&self, term: &str) -> usize {
        self.postings.get(term).map_or(0, Vec::len)
    }

    /// `ln((N − df + 0.5) / (df + 0.5) + 1)`, always positive.
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.documents.len() as f64;
        let df = self.document_frequency(term) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    fn term_weight(&self, tf: f64, len: usize) -> f64 {
        tf * (self.k1 + 1.0) / (tf + self.k1 * (1.0 - self.b + self.b * len as f64 / self.avg_len))
    }

    fn query_terms(query: &str) -> Vec<String> {
        let mut terms: Vec<String> = words(query).collect();
        terms.sort();
        terms.dedup();
        terms
    }

    /// Raw BM25 scores of every document sharing a term with `query`.
    pub fn raw_scores(&self, query: &str) -> HashMap<usize, f64> {
        let mut scores: HashMap<usize, f64> = HashMap::new();
        for term in Self::query_terms(query) {
            let Some(list) = self.postings.get(&term) else {
                continue;
            };
            let idf = self.idf(&term);
            for &(doc, tf) in list {
                *scores.entry(doc).or_default() +=
                    idf * self.term_weight(tf as f64, self.documents[doc].len);
            }
        }
        scores
    }

    /// Score of the query against a document identical to itself.
    pub fn self_score(&self, query: &str) -> f64 {
        let mut tf: BTreeMap<String, u32> = BTreeMap::new();
        let mut len = 0;
        for w in words(query) {
            *tf.entry(w).or_default() += 1;
            len += 1;
        }
        tf.iter()
            .map(|(term, &c)| self.idf(term) * self.term_weight(c as f64, len))
            .sum()
    }

    /// Score of `query` against `doc`, divided by the query's self-score and
    /// capped at 1.
    pub fn normalized_score(&self, query: &str, doc: usize) -> f64 {
        let norm = self.self_score(query);
        if norm <= 0.0 {
            return 0.0;
        }
        (self.raw_scores(query).get(&doc).copied().unwrap_or(0.0) / norm).min(1.0)
    }

    /// Normalized scores of every document with a non-zero score, best first
    /// (ties by document order), at most `n`.
    pub fn search(&self, query: &str, n: usize) -> Vec<(usize, f64)> {
        let norm = self.self_score(query);
        if norm <= 0.0 {
            return Vec::new();
        }
        let mut hits: Vec<(usize, f64)> = self
            .raw_scores(query)
            .into_iter()
            .map(|(d, s)| (d, (s / norm).min(1.0)))
            .collect();
        hits.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        hits.truncate(n);
        hits
    }

    /// Normalized score of `query` against every document (zeros included).
    pub fn all_scores(&self, query: &str) -> Vec<f64> {
        let norm = self.self_score(query);
        let mut out = vec![0.0; self.documents.len()];
        if norm <= 0.0 {
            return out;
        }
        for (d, s) in self.raw_scores(query) {
            out[d] = (s / norm).min(1.0);
        }
        out
    }
}
