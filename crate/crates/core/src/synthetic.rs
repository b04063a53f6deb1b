//! Synthetic dialogue corpora whose satisfaction label is a function of the
//! dialogue-act sequence.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{DaVocab, Dialogue, Exchange, Satisfaction};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    /// Any immediately repeated act ⇒ dissatisfied; otherwise a final
    /// "accept" ⇒ satisfied; otherwise neutral.
    #[default]
    RepeatDaDissatisfied,
    /// Labels independent of the acts.
    Random,
}

impl FromStr for Rule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "repeat-da-dissatisfied" => Ok(Rule::RepeatDaDissatisfied),
            "random" => Ok(Rule::Random),
            other => Err(Error::Config(format!("unknown synthetic rule {other:?}"))),
        }
    }
}

pub const ACT_NAMES: [&str; 8] = [
    "inform", "request", "confirm", "negate", "accept", "reqalts", "thank", "complain",
];

/// Index of the act that marks a satisfied ending.
pub const ACCEPT: usize = 4;

const SIGNATURES: [[&str; 4]; 8] = [
    ["need", "looking", "want", "find"],
    ["what", "address", "phone", "where"],
    ["so", "correct", "right", "sure"],
    ["no", "not", "wrong", "never"],
    ["great", "perfect", "book", "yes"],
    ["another", "else", "other", "different"],
    ["thanks", "thank", "appreciate", "cheers"],
    ["again", "still", "useless", "already"],
];

/// The word a system reply uses to answer each act.
const REPLIES: [&str; 8] = [
    "options",
    "located",
    "confirmed",
    "sorry",
    "reserved",
    "alternative",
    "welcome",
    "understand",
];

const FILLER: [&str; 24] = [
    "the", "a", "please", "i", "me", "for", "in", "today", "maybe", "just", "ok", "um", "well",
    "and", "it", "that", "there", "some", "now", "then", "one", "could", "would", "place",
];

const ENTITY_STEMS: [&str; 30] = [
    "alpha", "bravo", "cedar", "delta", "ember", "falcon", "garnet", "harbor", "indigo", "juniper",
    "kestrel", "lotus", "maple", "nimbus", "onyx", "pepper", "quartz", "raven", "saffron", "tango",
    "umber", "violet", "willow", "xenon", "yarrow", "zephyr", "amber", "birch", "cobalt", "dune",
];

const ENTITY_SUFFIXES: [&str; 7] = ["", "ton", "ville", "field", "port", "wood", "ridge"];

const SYSTEM_WORDS: [&str; 6] = ["sure", "here", "is", "the", "we", "have"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub size: usize,
    pub seed: u64,
    pub rule: Rule,
    pub min_turns: usize,
    pub max_turns: usize,
    /// Target class proportions (dissatisfied, neutral, satisfied).
    pub proportions: [f64; 3],
    /// Probability that a user word comes from the act's signature words.
    pub signal: f64,
    pub min_words: usize,
    pub max_words: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            size: 500,
            seed: 0,
            rule: Rule::RepeatDaDissatisfied,
            min_turns: 3,
            max_turns: 8,
            proportions: [1.0 / 3.0; 3],
            signal: 0.5,
            min_words: 4,
            max_words: 8,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.min_turns < 2 || self.max_turns < self.min_turns {
            return Err(Error::Config(
                "turn range must satisfy 2 <= min_turns <= max_turns".into(),
            ));
        }
        if self.min_words == 0 || self.max_words < self.min_words {
            return Err(Error::Config(
                "word range must satisfy 1 <= min_words <= max_words".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.signal) {
            return Err(Error::Config("signal must be in [0, 1]".into()));
        }
        let total: f64 = self.proportions.iter().sum();
        if self.proportions.iter().any(|p| *p < 0.0) || total <= 0.0 {
            return Err(Error::Config(
                "class proportions must be non-negative with a positive sum".into(),
            ));
        }
        Ok(())
    }
}

pub fn da_vocab() -> DaVocab {
    DaVocab {
        names: ACT_NAMES.iter().map(|s| s.to_string()).collect(),
    }
}

/// Satisfaction implied by an act sequence under the repeat rule.
pub fn label_for(acts: &[usize]) -> Satisfaction {
    if acts.windows(2).any(|w| w[0] == w[1]) {
        Satisfaction::Dissatisfied
    } else if acts.last() == Some(&ACCEPT) {
        Satisfaction::Satisfied
    } else {
        Satisfaction::Neutral
    }
}

fn sample_class<R: Rng>(rng: &mut R, proportions: &[f64; 3]) -> Satisfaction {
    let total: f64 = proportions.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (k, p) in proportions.iter().enumerate() {
        if u < *p {
            return Satisfaction::from_index(k).expect("three classes");
        }
        u -= p;
    }
    Satisfaction::Satisfied
}

/// Draws an act sequence of length `t` that the rule maps to `class`.
fn sample_acts<R: Rng>(rng: &mut R, t: usize, class: Satisfaction) -> Vec<usize> {
    let k = ACT_NAMES.len();
    loop {
        let mut acts: Vec<usize> = Vec::with_capacity(t);
        for i in 0..t {
            let mut a = rng.gen_range(0..k);
            // Keep accidental repeats rare so every class is reachable quickly.
            if i > 0 && a == acts[i - 1] && class != Satisfaction::Dissatisfied {
                a = (a + rng.gen_range(1..k)) % k;
            }
            acts.push(a);
        }
        match class {
            Satisfaction::Dissatisfied => {
                let pos = rng.gen_range(1..t);
                acts[pos] = acts[pos - 1];
            }
            Satisfaction::Satisfied => {
                acts[t - 1] = ACCEPT;
            }
            Satisfaction::Neutral => {}
        }
        if label_for(&acts) == class {
            return acts;
        }
    }
}

fn user_text<R: Rng>(rng: &mut R, act: usize, entity: &str, spec: &SyntheticSpec) -> String {
    let n = rng.gen_range(spec.min_words..=spec.max_words);
    let mut words: Vec<&str> = (0..n)
        .map(|_| {
            if rng.gen::<f64>() < spec.signal {
                *SIGNATURES[act].choose(rng).expect("non-empty")
            } else {
                *FILLER.choose(rng).expect("non-empty")
            }
        })
        .collect();
    let at = rng.gen_range(0..=words.len());
    words.insert(at, entity);
    words.join(" ")
}

fn system_text<R: Rng>(rng: &mut R, act: usize, entity: &str) -> String {
    let n = rng.gen_range(2..=4);
    let mut words: Vec<&str> = (0..n)
        .map(|_| *SYSTEM_WORDS.choose(rng).expect("non-empty"))
        .collect();
    let at = rng.gen_range(0..=words.len());
    words.insert(at, REPLIES[act]);
    let at = rng.gen_range(0..=words.len());
    words.insert(at, entity);
    words.join(" ")
}

/// Generates `spec.size` dialogues with ids `syn-{seed}-{i}`.
pub fn generate(spec: &SyntheticSpec) -> Result<Vec<Dialogue>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.size);
    for i in 0..spec.size {
        let t = rng.gen_range(spec.min_turns..=spec.max_turns);
        let (acts, satisfaction) = match spec.rule {
            Rule::RepeatDaDissatisfied => {
                let class = sample_class(&mut rng, &spec.proportions);
                (sample_acts(&mut rng, t, class), class)
            }
            Rule::Random => {
                let acts: Vec<usize> = (0..t).map(|_| rng.gen_range(0..ACT_NAMES.len())).collect();
                (acts, sample_class(&mut rng, &spec.proportions))
            }
        };
        let exchanges = acts
            .iter()
            .enumerate()
            .map(|(pos, &a)| {
                let stem = ENTITY_STEMS.choose(&mut rng).expect("non-empty");
                let entity = format!(
                    "{stem}{}",
                    ENTITY_SUFFIXES.choose(&mut rng).expect("non-empty")
                );
                let user = user_text(&mut rng, a, &entity, spec);
                if pos + 1 == t {
                    Exchange::new(user, None)
                } else {
                    let system = system_text(&mut rng, a, &entity);
                    Exchange::new(user, Some(&system))
                }
            })
            .collect();
        out.push(Dialogue {
            id: format!("syn-{}-{i}", spec.seed),
            exchanges,
            da_labels: Some(acts),
            satisfaction,
            raw_rating: None,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rule_examples() {
        assert_eq!(label_for(&[3, 3, 1]), Satisfaction::Dissatisfied);
        assert_eq!(label_for(&[1, 2, ACCEPT]), Satisfaction::Satisfied);
        assert_eq!(label_for(&[1, 2, 3]), Satisfaction::Neutral);
        assert_eq!(label_for(&[ACCEPT, ACCEPT]), Satisfaction::Dissatisfied);
    }

    #[test]
    fn generated_labels_follow_rule() {
        let ds = generate(&SyntheticSpec {
            size: 300,
            seed: 4,
            ..Default::default()
        })
        .unwrap();
        for d in &ds {
            d.validate().unwrap();
            assert_eq!(label_for(d.da_labels.as_ref().unwrap()), d.satisfaction);
        }
    }

    #[test]
    fn proportions_within_ten_points() {
        let targets = [0.2, 0.5, 0.3];
        let ds = generate(&SyntheticSpec {
            size: 500,
            seed: 11,
            proportions: targets,
            ..Default::default()
        })
        .unwrap();
        let mut counts = [0usize; 3];
        for d in &ds {
            counts[d.satisfaction.index()] += 1;
        }
        for k in 0..3 {
            let frac = counts[k] as f64 / 500.0;
            assert!((frac - targets[k]).abs() <= 0.10, "class {k}: {frac}");
        }
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let spec = SyntheticSpec {
            size: 20,
            seed: 9,
            ..Default::default()
        };
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = SyntheticSpec { seed: 10, ..spec };
        assert_ne!(
            generate(&other).unwrap()[0].exchanges,
            generate(&SyntheticSpec { seed: 9, ..other }).unwrap()[0].exchanges
        );
    }

    #[test]
    fn system_echoes_user_entity() {
        let ds = generate(&SyntheticSpec {
            size: 10,
            seed: 1,
            ..Default::default()
        })
        .unwrap();
        for d in &ds {
            for ex in &d.exchanges {
                if let Some(s) = &ex.system {
                    let is_entity = |w: &str| ENTITY_STEMS.iter().any(|e| w.starts_with(e));
                    let shared = s
                        .text
                        .split(' ')
                        .filter(|w| is_entity(w))
                        .any(|w| ex.user.text.split(' ').any(|u| u == w));
                    assert!(shared);
                }
            }
        }
    }
}
