//! Positive and negative samples for response selection (SRS) and incoherence
//! detection (DID).

use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::bm25::Bm25Index;
use crate::corpus::{
    dialogue_from_json, dialogue_to_json, Dialogue, Satisfaction, Speaker, Utterance,
};
use crate::error::{Error, Result};
use crate::trainer::mix_seed;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Perturbation {
    None,
    /// System utterances replaced at these turns.
    Replace {
        turns: Vec<usize>,
    },
    /// Original exchange indices removed.
    Delete {
        turns: Vec<usize>,
    },
    /// Original positions `turns[i]` now hold the exchange from `order[i]`.
    Shuffle {
        turns: Vec<usize>,
        order: Vec<usize>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainSample {
    pub dialogue: Dialogue,
    pub srs_labels: Vec<u8>,
    pub did_label: u8,
    pub perturbation: Perturbation,
}

impl PretrainSample {
    pub fn positive(dialogue: Dialogue) -> Self {
        let t = dialogue.num_turns();
        PretrainSample {
            dialogue,
            srs_labels: vec![1; t],
            did_label: 1,
            perturbation: Perturbation::None,
        }
    }

    /// Label-consistency invariants.
    pub fn check(&self) -> Result<()> {
        let t = self.dialogue.num_turns();
        let fail = |m: String| {
            Err(Error::InvalidDialogue {
                id: self.dialogue.id.clone(),
                message: m,
            })
        };
        if t < 2 {
            return fail(format!("{t} exchanges"));
        }
        if self.srs_labels.len() != t {
            return fail(format!(
                "{} SRS labels for {t} exchanges",
                self.srs_labels.len()
            ));
        }
        if self
            .srs_labels
            .iter()
            .chain([&self.did_label])
            .any(|&l| l > 1)
        {
            return fail("labels must be binary".into());
        }
        match &self.perturbation {
            Perturbation::None => {
                if self.did_label != 1 || self.srs_labels.iter().any(|&l| l != 1) {
                    return fail("unperturbed sample must be all ones".into());
                }
            }
            Perturbation::Replace { turns } => {
                if self.did_label != 0 || turns.is_empty() {
                    return fail("replacement must flag incoherence".into());
                }
                for (i, &l) in self.srs_labels.iter().enumerate() {
                    if (l == 0) != turns.contains(&i) {
                        return fail(format!(
                            "SRS label {l} at turn {i} disagrees with replacements {turns:?}"
                        ));
                    }
                }
                if turns
                    .iter()
                    .any(|&i| self.dialogue.exchanges[i].system.is_none())
                {
                    return fail("replaced turn has no system utterance".into());
                }
            }
            Perturbation::Delete { turns } | Perturbation::Shuffle { turns, .. } => {
                if self.did_label != 0
                    || turns.is_empty()
                    || self.srs_labels.iter().any(|&l| l != 1)
                {
                    return fail("deletion/shuffle must have DID 0 and all SRS 1".into());
                }
                if let Perturbation::Shuffle { turns, order } = &self.perturbation {
                    if order.len() != turns.len() || order == turns {
                        return fail("shuffle must be a non-identity permutation".into());
                    }
                    let mut a = turns.clone();
                    let mut b = order.clone();
                    a.sort();
                    b.sort();
                    if a != b {
                        return fail("shuffle order is not a permutation of its turns".into());
                    }
                }
            }
        }
        self.dialogue.validate()
    }

    pub fn to_json(&self) -> String {
        let mut v: serde_json::Value =
            serde_json::from_str(&dialogue_to_json(&self.dialogue)).expect("valid json");
        let obj = v.as_object_mut().expect("record is an object");
        obj.insert("srs_labels".into(), serde_json::json!(self.srs_labels));
        obj.insert("did_label".into(), serde_json::json!(self.did_label));
        obj.insert(
            "perturbation".into(),
            serde_json::to_value(&self.perturbation).expect("serialises"),
        );
        serde_json::to_string(&v).expect("serialises")
    }

    pub fn from_json(text: &str, line: usize) -> Result<Self> {
        let record_err = |message: String| Error::Record { line, message };
        let mut v: serde_json::Value =
            serde_json::from_str(text).map_err(|e| record_err(e.to_string()))?;
        let obj = v
            .as_object_mut()
            .ok_or_else(|| record_err("expected an object".into()))?;
        let mut take = |key: &str| {
            obj.remove(key)
                .ok_or_else(|| record_err(format!("missing {key}")))
        };
        let srs_labels: Vec<u8> =
            serde_json::from_value(take("srs_labels")?).map_err(|e| record_err(e.to_string()))?;
        let did_label: u8 =
            serde_json::from_value(take("did_label")?).map_err(|e| record_err(e.to_string()))?;
        let perturbation: Perturbation =
            serde_json::from_value(take("perturbation")?).map_err(|e| record_err(e.to_string()))?;
        let dialogue = dialogue_from_json(&v.to_string(), line)?;
        let sample = PretrainSample {
            dialogue,
            srs_labels,
            did_label,
            perturbation,
        };
        sample.check().map_err(|e| record_err(e.to_string()))?;
        Ok(sample)
    }
}

pub fn write_samples<W: Write>(mut w: W, samples: &[PretrainSample]) -> std::io::Result<()> {
    for s in samples {
        writeln!(w, "{}", s.to_json())?;
    }
    Ok(())
}

pub fn read_samples<R: BufRead>(r: R) -> Result<Vec<PretrainSample>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::Record {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(PretrainSample::from_json(&line, i + 1)?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdDirection {
    /// Confounders must score below the threshold (not paraphrases).
    #[default]
    Below,
    /// Confounders must score at or above the threshold.
    Above,
}

impl FromStr for ThresholdDirection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "below" => Ok(ThresholdDirection::Below),
            "above" => Ok(ThresholdDirection::Above),
            other => Err(Error::Config(format!(
                "unknown threshold direction {other:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConfounderOptions {
    pub threshold: f64,
    pub sim_min: f64,
    pub direction: ThresholdDirection,
    /// Confounders are drawn uniformly from this many best-scoring candidates.
    pub pool: usize,
}

impl Default for ConfounderOptions {
    fn default() -> Self {
        ConfounderOptions {
            threshold: 0.7,
            sim_min: 0.0,
            direction: ThresholdDirection::Below,
            pool: 10,
        }
    }
}

impl ConfounderOptions {
    pub fn accepts(&self, score: f64) -> bool {
        match self.direction {
            ThresholdDirection::Below => score >= self.sim_min && score < self.threshold,
            ThresholdDirection::Above => score >= self.threshold.max(self.sim_min),
        }
    }
}

/// A system utterance from another dialogue whose normalized score against
/// `original` passes the threshold; `None` when nothing qualifies.
pub fn find_confounder<R: Rng>(
    index: &Bm25Index,
    original: &str,
    own_dialogue: &str,
    options: &ConfounderOptions,
    rng: &mut R,
) -> Option<(usize, f64)> {
    let scores = index.all_scores(original);
    let mut candidates: Vec<(usize, f64)> = index
        .documents
        .iter()
        .enumerate()
        .filter(|(_, d)| {
            d.speaker == Speaker::System && d.dialogue != own_dialogue && d.text != original
        })
        .map(|(i, _)| (i, scores[i]))
        .filter(|&(_, s)| options.accepts(s))
        .collect();
    if candidates.is_empty() {
        return None;
    }
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    candidates.truncate(options.pool.max(1));
    Some(candidates[rng.gen_range(0..candidates.len())])
}

/// Replaces `k ~ U[1, ⌊T/2⌋]` distinct system utterances with confounders.
pub fn make_srs_negative<R: Rng>(
    dialogue: &Dialogue,
    index: &Bm25Index,
    options: &ConfounderOptions,
    rng: &mut R,
) -> Result<PretrainSample> {
    let t = dialogue.num_turns();
    let with_system: Vec<usize> = (0..t)
        .filter(|&i| dialogue.exchanges[i].system.is_some())
        .collect();
    if with_system.len() < 2 {
        return Err(Error::Unconstructible(format!(
            "dialogue {} has {} system turns, need 2",
            dialogue.id,
            with_system.len()
        )));
    }
    let k = rng.gen_range(1..=(t / 2).max(1)).min(with_system.len());
    let mut chosen: Vec<usize> = index::sample(rng, with_system.len(), k)
        .into_iter()
        .map(|i| with_system[i])
        .collect();
    chosen.sort();
    let mut out = dialogue.clone();
    let mut replaced = Vec::new();
    for turn in chosen {
        let original = &dialogue.exchanges[turn]
            .system
            .as_ref()
            .expect("filtered")
            .text;
        if let Some((doc, _)) = find_confounder(index, original, &dialogue.id, options, rng) {
            out.exchanges[turn].system = Some(Utterance::system(index.documents[doc].text.clone()));
            replaced.push(turn);
        }
    }
    if replaced.is_empty() {
        return Err(Error::Unconstructible(format!(
            "no confounder for any turn of {}",
            dialogue.id
        )));
    }
    let srs_labels = (0..t).map(|i| u8::from(!replaced.contains(&i))).collect();
    Ok(PretrainSample {
        dialogue: out,
        srs_labels,
        did_label: 0,
        perturbation: Perturbation::Replace { turns: replaced },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DidMode {
    Delete,
    Shuffle,
}

/// Deletes or shuffles exchanges. The final exchange takes part only when it
/// carries a system reply, so the result stays a well-formed dialogue.
pub fn make_did_negative<R: Rng>(
    dialogue: &Dialogue,
    mode: DidMode,
    rng: &mut R,
) -> Result<PretrainSample> {
    let t = dialogue.num_turns();
    let movable = if dialogue
        .exchanges
        .last()
        .is_some_and(|e| e.system.is_some())
    {
        t
    } else {
        t - 1
    };
    let unconstructible = |m: String| Err(Error::Unconstructible(format!("{}: {m}", dialogue.id)));
    let (exchanges, da_labels, perturbation) = match mode {
        DidMode::Delete => {
            if t < 3 {
                return unconstructible(format!("deletion needs 3 exchanges, found {t}"));
            }
            let k = rng.gen_range(1..=(t / 2).max(1)).min(t - 2).min(movable);
            let mut turns: Vec<usize> = index::sample(rng, movable, k).into_vec();
            turns.sort();
            let keep: Vec<usize> = (0..t).filter(|i| !turns.contains(i)).collect();
            let ex = keep
                .iter()
                .map(|&i| dialogue.exchanges[i].clone())
                .collect();
            let labels = dialogue
                .da_labels
                .as_ref()
                .map(|l| keep.iter().map(|&i| l[i]).collect());
            (ex, labels, Perturbation::Delete { turns })
        }
        DidMode::Shuffle => {
            if t < 2 || movable < 2 {
                return unconstructible(format!(
                    "shuffle needs 2 exchanges with system replies, found {movable}"
                ));
            }
            let k = rng.gen_range(2..=(t / 2).max(2)).min(movable);
            let mut turns: Vec<usize> = index::sample(rng, movable, k).into_vec();
            turns.sort();
            let mut order = turns.clone();
            while order == turns {
                order.shuffle(rng);
            }
            let mut ex = dialogue.exchanges.clone();
            let mut labels = dialogue.da_labels.clone();
            for (&dst, &src) in turns.iter().zip(&order) {
                ex[dst] = dialogue.exchanges[src].clone();
                if let (Some(l), Some(orig)) = (labels.as_mut(), dialogue.da_labels.as_ref()) {
                    l[dst] = orig[src];
                }
            }
            (ex, labels, Perturbation::Shuffle { turns, order })
        }
    };
    let n = exchanges.len();
    Ok(PretrainSample {
        dialogue: Dialogue {
            exchanges,
            da_labels,
            ..dialogue.clone()
        },
        srs_labels: vec![1; n],
        did_label: 0,
        perturbation,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationOptions {
    pub srs: bool,
    pub did: bool,
    /// Negatives per positive for each task; the fractional part is a
    /// per-dialogue Bernoulli draw.
    pub neg_ratio: f64,
    pub seed: u64,
    pub confounder: ConfounderOptions,
}

impl Default for GenerationOptions {
    fn default() -> Self {
        GenerationOptions {
            srs: true,
            did: true,
            neg_ratio: 1.0,
            seed: 0,
            confounder: ConfounderOptions::default(),
        }
    }
}

fn draw_count<R: Rng>(rng: &mut R, ratio: f64) -> usize {
    let whole = ratio.floor();
    whole as usize + usize::from(rng.gen::<f64>() < ratio - whole)
}

/// Samples for every satisfied dialogue: the positive, then SRS negatives,
/// then DID negatives. Unconstructible negatives are skipped. Each dialogue
/// gets its own generator so the output does not depend on thread count.
pub fn generate_samples(
    corpus: &[Dialogue],
    options: &GenerationOptions,
) -> Result<Vec<PretrainSample>> {
    if options.neg_ratio < 0.0 || !options.neg_ratio.is_finite() {
        return Err(Error::Config("neg_ratio must be non-negative".into()));
    }
    let index = Bm25Index::build(corpus)?;
    let positives: Vec<(usize, &Dialogue)> = corpus
        .iter()
        .enumerate()
        .filter(|(_, d)| d.satisfaction == Satisfaction::Satisfied)
        .collect();
    let per_dialogue: Vec<Vec<PretrainSample>> = positives
        .par_iter()
        .map(|&(i, d)| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(options.seed, 0x5EED, i as u64));
            let mut out = vec![PretrainSample::positive(d.clone())];
            if options.srs {
                for _ in 0..draw_count(&mut rng, options.neg_ratio) {
                    if let Ok(s) = make_srs_negative(d, &index, &options.confounder, &mut rng) {
                        out.push(s);
                    }
                }
            }
            if options.did {
                for _ in 0..draw_count(&mut rng, options.neg_ratio) {
                    let first = if rng.gen::<bool>() {
                        DidMode::Delete
                    } else {
                        DidMode::Shuffle
                    };
                    let second = if first == DidMode::Delete {
                        DidMode::Shuffle
                    } else {
                        DidMode::Delete
                    };
                    if let Ok(s) = make_did_negative(d, first, &mut rng)
                        .or_else(|_| make_did_negative(d, second, &mut rng))
                    {
                        out.push(s);
                    }
                }
            }
            out
        })
        .collect();
    Ok(per_dialogue.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Exchange;

    fn dialogue(id: &str, texts: &[(&str, Option<&str>)]) -> Dialogue {
        Dialogue {
            id: id.into(),
            exchanges: texts.iter().map(|(u, s)| Exchange::new(*u, *s)).collect(),
            da_labels: None,
            satisfaction: Satisfaction::Satisfied,
            raw_rating: None,
        }
    }

    fn corpus() -> Vec<Dialogue> {
        vec![
            dialogue(
                "a",
                &[
                    ("find a hotel", Some("the grand hotel is free")),
                    ("book it", Some("booked for two nights")),
                    ("and a taxi", Some("a red taxi will come")),
                    ("thanks", None),
                ],
            ),
            dialogue(
                "b",
                &[
                    ("train to york", Some("the train leaves at nine")),
                    ("price", Some("ten pounds please")),
                    ("ok", None),
                ],
            ),
            dialogue(
                "c",
                &[
                    ("any museum", Some("the city museum opens at ten")),
                    ("address", Some("main street number five")),
                    ("bye", None),
                ],
            ),
        ]
    }

    #[test]
    fn srs_negative_labels_mark_replaced_turns() {
        let c = corpus();
        let index = Bm25Index::build(&c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let s =
                make_srs_negative(&c[0], &index, &ConfounderOptions::default(), &mut rng).unwrap();
            s.check().unwrap();
            let Perturbation::Replace { turns } = &s.perturbation else {
                panic!()
            };
            assert!(!turns.is_empty() && turns.len() <= 2);
            for &t in turns {
                let new = &s.dialogue.exchanges[t].system.as_ref().unwrap().text;
                let old = &c[0].exchanges[t].system.as_ref().unwrap().text;
                assert_ne!(new, old);
                assert!(
                    index.normalized_score(
                        old,
                        index.documents.iter().position(|d| &d.text == new).unwrap()
                    ) < 0.7
                );
            }
        }
    }

    #[test]
    fn srs_label_pattern() {
        let mut d = dialogue(
            "x",
            &[
                ("a", Some("s0")),
                ("b", Some("s1")),
                ("c", Some("s2")),
                ("d", None),
            ],
        );
        let s = PretrainSample {
            srs_labels: vec![1, 0, 1, 1],
            did_label: 0,
            perturbation: Perturbation::Replace { turns: vec![1] },
            dialogue: d.clone(),
        };
        s.check().unwrap();
        d.id = "y".into();
        let p = PretrainSample::positive(d);
        assert_eq!(p.srs_labels, vec![1, 1, 1, 1]);
        assert_eq!(p.did_label, 1);
    }

    #[test]
    fn srs_needs_two_system_turns() {
        let c = corpus();
        let index = Bm25Index::build(&c).unwrap();
        let d = dialogue("z", &[("hello", Some("hi")), ("bye", None)]);
        let err = make_srs_negative(
            &d,
            &index,
            &ConfounderOptions::default(),
            &mut ChaCha8Rng::seed_from_u64(1),
        );
        assert!(matches!(err, Err(Error::Unconstructible(_))));
    }

    #[test]
    fn delete_middle_exchange() {
        let d = dialogue("d", &[("e1", Some("s1")), ("e2", Some("s2")), ("e3", None)]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let s = make_did_negative(&d, DidMode::Delete, &mut rng).unwrap();
            s.check().unwrap();
            assert_eq!(s.dialogue.num_turns(), 2);
            assert_eq!(s.srs_labels, vec![1, 1]);
            assert_eq!(s.dialogue.exchanges.last().unwrap().user.text, "e3");
        }
        let short = dialogue("s", &[("e1", Some("s1")), ("e2", None)]);
        assert!(make_did_negative(&short, DidMode::Delete, &mut rng).is_err());
    }

    #[test]
    fn shuffle_swaps_first_two() {
        let d = dialogue("d", &[("e1", Some("s1")), ("e2", Some("s2")), ("e3", None)]);
        let s = make_did_negative(&d, DidMode::Shuffle, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        s.check().unwrap();
        let users: Vec<&str> = s
            .dialogue
            .exchanges
            .iter()
            .map(|e| e.user.text.as_str())
            .collect();
        assert_eq!(users, vec!["e2", "e1", "e3"]);
        assert_eq!(s.did_label, 0);
    }

    #[test]
    fn samples_round_trip_through_json() {
        let c = corpus();
        let samples = generate_samples(&c, &GenerationOptions::default()).unwrap();
        assert!(samples.len() > 3);
        let mut buf = Vec::new();
        write_samples(&mut buf, &samples).unwrap();
        let back = read_samples(&buf[..]).unwrap();
        assert_eq!(back, samples);
    }

    #[test]
    fn generation_is_reproducible() {
        let c = corpus();
        let opts = GenerationOptions {
            seed: 4,
            ..Default::default()
        };
        assert_eq!(
            generate_samples(&c, &opts).unwrap(),
            generate_samples(&c, &opts).unwrap()
        );
    }

    #[test]
    fn threshold_direction() {
        let below = ConfounderOptions::default();
        assert!(below.accepts(0.0) && below.accepts(0.69) && !below.accepts(0.7));
        let above = ConfounderOptions {
            direction: ThresholdDirection::Above,
            ..Default::default()
        };
        assert!(!above.accepts(0.69) && above.accepts(0.7));
    }
}
