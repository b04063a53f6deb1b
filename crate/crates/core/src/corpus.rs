//! Dialogue data model, line-delimited JSON ingestion, rating mapping and
//! train/valid/test splitting.
//!
//! One dialogue per line:
//!
//! ```text
//! {"id": "d1", "exchanges": [{"user": "...", "system": "..."}, {"user": "...", "system": null}],
//!  "da_labels": [0, 3], "satisfaction": 2}
//! ```
//!
//! `satisfaction` (0 = dissatisfied, 1 = neutral, 2 = satisfied) may be
//! replaced by an average `rating` in `[1, 5]`. An optional first line
//! `{"da_vocab": ["inform", ...]}` declares the dialogue-act names; when it is
//! present every label must index into it.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    System,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
    /// Token ids, filled in by [`crate::encoder::Vocab::tokenize_dialogue`].
    pub tokens: Vec<u32>,
}

impl Utterance {
    pub fn new(speaker: Speaker, text: impl Into<String>) -> Self {
        Utterance {
            speaker,
            text: text.into(),
            tokens: Vec::new(),
        }
    }

    pub fn user(text: impl Into<String>) -> Self {
        Self::new(Speaker::User, text)
    }

    pub fn system(text: impl Into<String>) -> Self {
        Self::new(Speaker::System, text)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Exchange {
    pub user: Utterance,
    pub system: Option<Utterance>,
}

impl Exchange {
    pub fn new(user: impl Into<String>, system: Option<&str>) -> Self {
        Exchange {
            user: Utterance::user(user),
            system: system.map(Utterance::system),
        }
    }
}

/// Dialogue-level satisfaction class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Satisfaction {
    Dissatisfied = 0,
    Neutral = 1,
    Satisfied = 2,
}

impl Satisfaction {
    pub const ALL: [Satisfaction; 3] = [
        Satisfaction::Dissatisfied,
        Satisfaction::Neutral,
        Satisfaction::Satisfied,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn short_name(self) -> &'static str {
        match self {
            Satisfaction::Dissatisfied => "DSAT",
            Satisfaction::Neutral => "NEU",
            Satisfaction::Satisfied => "SAT",
        }
    }
}

/// Maps an average user rating to a satisfaction class: below 3 is
/// dissatisfied, exactly 3 neutral, above 3 satisfied.
pub fn map_rating(rating: f64) -> Result<Satisfaction> {
    if !(1.0..=5.0).contains(&rating) {
        return Err(Error::RatingOutOfRange(rating));
    }
    Ok(if rating < 3.0 {
        Satisfaction::Dissatisfied
    } else if rating == 3.0 {
        Satisfaction::Neutral
    } else {
        Satisfaction::Satisfied
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dialogue {
    pub id: String,
    pub exchanges: Vec<Exchange>,
    pub da_labels: Option<Vec<usize>>,
    pub satisfaction: Satisfaction,
    pub raw_rating: Option<f64>,
}

impl Dialogue {
    pub fn num_turns(&self) -> usize {
        self.exchanges.len()
    }

    /// Checks the structural invariants every loaded dialogue satisfies.
    pub fn validate(&self) -> Result<()> {
        let fail = |message: String| Error::InvalidDialogue {
            id: self.id.clone(),
            message,
        };
        if self.exchanges.len() < 2 {
            return Err(fail(format!(
                "{} exchanges, need at least 2",
                self.exchanges.len()
            )));
        }
        let last = self.exchanges.len() - 1;
        for (t, ex) in self.exchanges.iter().enumerate() {
            if ex.user.text.trim().is_empty() {
                return Err(fail(format!("empty user utterance at exchange {t}")));
            }
            match &ex.system {
                None if t != last => {
                    return Err(fail(format!("missing system utterance at exchange {t}")))
                }
                Some(s) if s.text.trim().is_empty() => {
                    return Err(fail(format!("empty system utterance at exchange {t}")))
                }
                _ => {}
            }
        }
        if let Some(labels) = &self.da_labels {
            if labels.len() != self.exchanges.len() {
                return Err(fail(format!(
                    "{} dialogue-act labels for {} exchanges",
                    labels.len(),
                    self.exchanges.len()
                )));
            }
        }
        Ok(())
    }

    /// First `n` exchanges (all of them when `n` exceeds the length).
    pub fn truncated(&self, n: usize) -> Dialogue {
        let n = n.min(self.exchanges.len());
        Dialogue {
            id: self.id.clone(),
            exchanges: self.exchanges[..n].to_vec(),
            da_labels: self.da_labels.as_ref().map(|l| l[..n].to_vec()),
            satisfaction: self.satisfaction,
            raw_rating: self.raw_rating,
        }
    }
}

/// Ordered dialogue-act names; class id = position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DaVocab {
    pub names: Vec<String>,
}

impl DaVocab {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Generic names `da0..da{n-1}` for corpora without a declared vocabulary.
    pub fn anonymous(n: usize) -> Self {
        DaVocab {
            names: (0..n).map(|i| format!("da{i}")).collect(),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct CorpusSplit {
    pub train: Vec<Dialogue>,
    pub valid: Vec<Dialogue>,
    pub test: Vec<Dialogue>,
    pub da_vocab: Option<DaVocab>,
    /// Dialogues discarded for having fewer than two exchanges.
    pub dropped: usize,
}

impl CorpusSplit {
    pub fn all(&self) -> impl Iterator<Item = &Dialogue> {
        self.train.iter().chain(&self.valid).chain(&self.test)
    }

    pub fn manifest(&self) -> SplitManifest {
        let ids = |ds: &[Dialogue]| ds.iter().map(|d| d.id.clone()).collect();
        SplitManifest {
            train: ids(&self.train),
            valid: ids(&self.valid),
            test: ids(&self.test),
        }
    }

    pub fn split(&self, which: SplitName) -> &[Dialogue] {
        match which {
            SplitName::Train => &self.train,
            SplitName::Valid => &self.valid,
            SplitName::Test => &self.test,
        }
    }

    /// Number of dialogue-act classes implied by the vocabulary.
    pub fn num_da(&self) -> Option<usize> {
        self.da_vocab.as_ref().map(DaVocab::len)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Valid,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(SplitName::Train),
            "valid" | "dev" => Ok(SplitName::Valid),
            "test" => Ok(SplitName::Test),
            other => Err(format!("unknown split {other}")),
        }
    }
}

/// Dialogue ids per split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorpusFormat {
    /// One file; splits drawn with [`LoadOptions`].
    Jsonl,
    /// A directory holding `train.jsonl`, `valid.jsonl` and `test.jsonl`.
    SplitDir,
}

#[derive(Clone, Debug)]
pub struct LoadOptions {
    /// Train/valid/test proportions.
    pub ratios: [usize; 3],
    pub seed: u64,
    pub stratified: bool,
    /// Fixed assignment of ids to splits, overriding the seeded shuffle.
    pub manifest: Option<SplitManifest>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            ratios: [8, 1, 1],
            seed: 0,
            stratified: false,
            manifest: None,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RawExchange {
    user: String,
    system: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawRecord {
    id: String,
    exchanges: Vec<RawExchange>,
    #[serde(default)]
    da_labels: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    satisfaction: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rating: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHeader {
    da_vocab: Vec<String>,
}

fn record_to_dialogue(raw: RawRecord, line: usize) -> Result<Dialogue> {
    let record_err = |message: String| Error::Record { line, message };
    let satisfaction = match (raw.satisfaction, raw.rating) {
        (Some(s), _) => Satisfaction::from_index(s)
            .ok_or_else(|| record_err(format!("satisfaction {s} not in {{0,1,2}}")))?,
        (None, Some(r)) => map_rating(r).map_err(|e| record_err(e.to_string()))?,
        (None, None) => return Err(record_err("missing satisfaction or rating".into())),
    };
    let exchanges = raw
        .exchanges
        .into_iter()
        .map(|e| Exchange {
            user: Utterance::user(e.user),
            system: e.system.map(Utterance::system),
        })
        .collect();
    Ok(Dialogue {
        id: raw.id,
        exchanges,
        da_labels: raw.da_labels,
        satisfaction,
        raw_rating: raw.rating,
    })
}

fn dialogue_to_record(d: &Dialogue) -> RawRecord {
    RawRecord {
        id: d.id.clone(),
        exchanges: d
            .exchanges
            .iter()
            .map(|e| RawExchange {
                user: e.user.text.clone(),
                system: e.system.as_ref().map(|s| s.text.clone()),
            })
            .collect(),
        da_labels: d.da_labels.clone(),
        satisfaction: Some(d.satisfaction.index()),
        rating: d.raw_rating,
    }
}

/// Serialises one dialogue as a single JSON line (no trailing newline).
pub fn dialogue_to_json(d: &Dialogue) -> String {
    serde_json::to_string(&dialogue_to_record(d)).expect("dialogue serialises")
}

/// Parses one dialogue record; `line` is used in error messages.
pub fn dialogue_from_json(text: &str, line: usize) -> Result<Dialogue> {
    let raw: RawRecord = serde_json::from_str(text).map_err(|e| Error::Record {
        line,
        message: e.to_string(),
    })?;
    record_to_dialogue(raw, line)
}

/// Result of reading one dialogue file.
#[derive(Clone, Debug, Default)]
pub struct DialogueFile {
    pub dialogues: Vec<Dialogue>,
    pub da_vocab: Option<DaVocab>,
    pub dropped: usize,
}

/// Reads a line-delimited dialogue file, validating every record.
pub fn read_dialogues(path: &Path) -> Result<DialogueFile> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_dialogues(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

pub fn parse_dialogues<R: BufRead>(reader: R) -> Result<DialogueFile> {
    let mut out = DialogueFile::default();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io("<input>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        if out.dialogues.is_empty() && out.da_vocab.is_none() && out.dropped == 0 {
            if let Ok(header) = serde_json::from_str::<RawHeader>(&line) {
                out.da_vocab = Some(DaVocab {
                    names: header.da_vocab,
                });
                continue;
            }
        }
        let dialogue = dialogue_from_json(&line, lineno)?;
        if !seen.insert(dialogue.id.clone()) {
            return Err(Error::Record {
                line: lineno,
                message: format!("duplicate dialogue id {}", dialogue.id),
            });
        }
        if dialogue.exchanges.len() < 2 {
            out.dropped += 1;
            continue;
        }
        dialogue.validate().map_err(|e| Error::Record {
            line: lineno,
            message: e.to_string(),
        })?;
        if let (Some(vocab), Some(labels)) = (&out.da_vocab, &dialogue.da_labels) {
            if let Some(&bad) = labels.iter().find(|&&l| l >= vocab.len()) {
                return Err(Error::Record {
                    line: lineno,
                    message: format!(
                        "dialogue-act label {bad} outside declared vocabulary of size {}",
                        vocab.len()
                    ),
                });
            }
        }
        out.dialogues.push(dialogue);
    }
    if out.da_vocab.is_none() {
        let max = out
            .dialogues
            .iter()
            .filter_map(|d| d.da_labels.as_ref())
            .flatten()
            .max()
            .copied();
        out.da_vocab = max.map(|m| DaVocab::anonymous(m + 1));
    }
    Ok(out)
}

/// Writes dialogues in the line format, preceded by the vocabulary header
/// when one is given.
pub fn write_dialogues<W: Write>(
    mut out: W,
    dialogues: &[Dialogue],
    da_vocab: Option<&DaVocab>,
) -> std::io::Result<()> {
    if let Some(vocab) = da_vocab {
        let header = RawHeader {
            da_vocab: vocab.names.clone(),
        };
        writeln!(
            out,
            "{}",
            serde_json::to_string(&header).expect("header serialises")
        )?;
    }
    for d in dialogues {
        writeln!(out, "{}", dialogue_to_json(d))?;
    }
    Ok(())
}

pub fn write_dialogues_file(
    path: &Path,
    dialogues: &[Dialogue],
    da_vocab: Option<&DaVocab>,
) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_dialogues(&mut w, dialogues, da_vocab).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads and splits a corpus.
pub fn load_corpus(
    path: &Path,
    format: CorpusFormat,
    options: &LoadOptions,
) -> Result<CorpusSplit> {
    match format {
        CorpusFormat::Jsonl => {
            let file = read_dialogues(path)?;
            let (train, valid, test) = match &options.manifest {
                Some(m) => apply_manifest(file.dialogues, m)?,
                None => split_dialogues(
                    file.dialogues,
                    options.ratios,
                    options.seed,
                    options.stratified,
                ),
            };
            Ok(CorpusSplit {
                train,
                valid,
                test,
                da_vocab: file.da_vocab,
                dropped: file.dropped,
            })
        }
        CorpusFormat::SplitDir => {
            let mut parts = Vec::new();
            for name in ["train", "valid", "test"] {
                parts.push(read_dialogues(&path.join(format!("{name}.jsonl")))?);
            }
            let dropped = parts.iter().map(|p| p.dropped).sum();
            let vocab = parts.iter().find_map(|p| p.da_vocab.clone());
            let mut ids = HashSet::new();
            for d in parts.iter().flat_map(|p| &p.dialogues) {
                if !ids.insert(d.id.as_str()) {
                    return Err(Error::InvalidDialogue {
                        id: d.id.clone(),
                        message: "appears in more than one split".into(),
                    });
                }
            }
            let mut parts = parts.into_iter().map(|p| p.dialogues);
            Ok(CorpusSplit {
                train: parts.next().unwrap_or_default(),
                valid: parts.next().unwrap_or_default(),
                test: parts.next().unwrap_or_default(),
                da_vocab: vocab,
                dropped,
            })
        }
    }
}

fn split_counts(n: usize, ratios: [usize; 3]) -> (usize, usize) {
    let total: usize = ratios.iter().sum::<usize>().max(1);
    let train = n * ratios[0] / total;
    let valid = n * ratios[1] / total;
    (train, valid)
}

/// Deterministic seeded split. Stratified splitting applies the ratios within
/// each satisfaction class.
pub fn split_dialogues(
    dialogues: Vec<Dialogue>,
    ratios: [usize; 3],
    seed: u64,
    stratified: bool,
) -> (Vec<Dialogue>, Vec<Dialogue>, Vec<Dialogue>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups: Vec<Vec<Dialogue>> = if stratified {
        let mut by_class: BTreeMap<Satisfaction, Vec<Dialogue>> = BTreeMap::new();
        for d in dialogues {
            by_class.entry(d.satisfaction).or_default().push(d);
        }
        by_class.into_values().collect()
    } else {
        vec![dialogues]
    };
    let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for mut group in groups {
        group.shuffle(&mut rng);
        let (n_train, n_valid) = split_counts(group.len(), ratios);
        let rest = group.split_off(n_train);
        train.extend(group);
        let mut rest = rest;
        let tail = rest.split_off(n_valid.min(rest.len()));
        valid.extend(rest);
        test.extend(tail);
    }
    (train, valid, test)
}

fn apply_manifest(
    dialogues: Vec<Dialogue>,
    manifest: &SplitManifest,
) -> Result<(Vec<Dialogue>, Vec<Dialogue>, Vec<Dialogue>)> {
    let mut by_id: BTreeMap<String, Dialogue> =
        dialogues.into_iter().map(|d| (d.id.clone(), d)).collect();
    let mut take = |ids: &[String]| -> Result<Vec<Dialogue>> {
        ids.iter()
            .map(|id| {
                by_id.remove(id).ok_or_else(|| Error::InvalidDialogue {
                    id: id.clone(),
                    message: "listed in split manifest but absent or listed twice".into(),
                })
            })
            .collect()
    };
    Ok((
        take(&manifest.train)?,
        take(&manifest.valid)?,
        take(&manifest.test)?,
    ))
}
