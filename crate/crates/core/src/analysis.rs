//! Post-hoc analyses over per-dialogue fusion traces: dialogue-act
//! subsequence impact scores, gate distributions, per-class breakdowns and
//! sensitivity to the number of turns.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::Dialogue;
use crate::error::{Error, Result};
use crate::metrics::ClassificationReport;
use crate::model::UsdaModel;
use crate::satisfaction::{FusionTrace, NUM_CLASSES};
use crate::trainer::{evaluate, TrainMode};

/// One analysed dialogue.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub id: String,
    /// Grouping key for gate distributions (mode, dataset, ...).
    #[serde(default)]
    pub tag: String,
    pub gold_satisfaction: Option<usize>,
    pub predicted_satisfaction: usize,
    #[serde(default)]
    pub gold_da: Option<Vec<usize>>,
    pub predicted_da: Vec<usize>,
    pub trace: FusionTrace,
}

impl TraceRecord {
    fn da_gate_weight(&self, convention: GateConvention) -> Result<f64> {
        let g = self
            .trace
            .scalar_gate()
            .ok_or_else(|| Error::Config(format!("trace {} has no fusion gate", self.id)))?;
        Ok(match convention {
            GateConvention::OneMinusGate => 1.0 - g,
            GateConvention::Gate => g,
        })
    }
}

/// Traces for `dialogues` predicted by `model`.
pub fn collect_traces(
    model: &UsdaModel,
    dialogues: &[Dialogue],
    tag: &str,
) -> Result<Vec<TraceRecord>> {
    dialogues
        .par_iter()
        .map(|d| {
            let p = model.predict(d)?;
            Ok(TraceRecord {
                id: d.id.clone(),
                tag: tag.to_string(),
                gold_satisfaction: Some(d.satisfaction.index()),
                predicted_satisfaction: p.satisfaction,
                gold_da: d.da_labels.clone(),
                predicted_da: p.dialogue_acts,
                trace: p.trace,
            })
        })
        .collect()
}

pub fn write_traces<W: Write>(mut w: W, records: &[TraceRecord]) -> std::io::Result<()> {
    for r in records {
        writeln!(w, "{}", serde_json::to_string(r).expect("trace serialises"))?;
    }
    Ok(())
}

pub fn read_traces<R: BufRead>(r: R) -> Result<Vec<TraceRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::Record {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceRecord = serde_json::from_str(&line).map_err(|e| Error::Record {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Which gate quantity weights the dialogue-act attention in the impact score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GateConvention {
    /// `1 − g`.
    #[default]
    OneMinusGate,
    /// `g`, the weight the fusion gives the act summary.
    Gate,
}

impl FromStr for GateConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one-minus-gate" => Ok(GateConvention::OneMinusGate),
            "gate" => Ok(GateConvention::Gate),
            other => Err(Error::Config(format!("unknown gate convention {other:?}"))),
        }
    }
}

/// Start positions of every contiguous occurrence of `q` in `seq`.
pub fn occurrences(seq: &[usize], q: &[usize]) -> Vec<usize> {
    if q.is_empty() || q.len() > seq.len() {
        return Vec::new();
    }
    (0..=seq.len() - q.len())
        .filter(|&s| &seq[s..s + q.len()] == q)
        .collect()
}

/// Highest mean act attention over the occurrences of `q`, if any.
fn best_occurrence_attention(record: &TraceRecord, q: &[usize]) -> Result<Option<f64>> {
    let starts = occurrences(&record.predicted_da, q);
    if starts.is_empty() {
        return Ok(None);
    }
    let alpha = record
        .trace
        .alpha_a
        .as_ref()
        .ok_or_else(|| Error::Config(format!("trace {} has no act attention", record.id)))?;
    if alpha.len() != record.predicted_da.len() {
        return Err(Error::Config(format!(
            "trace {}: {} attention weights for {} acts",
            record.id,
            alpha.len(),
            record.predicted_da.len()
        )));
    }
    let best = starts
        .into_iter()
        .map(|s| alpha[s..s + q.len()].iter().sum::<f64>() / q.len() as f64)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(Some(best))
}

/// `imp(Q, C)`: over dialogues whose predicted acts contain `q`, the average
/// of `w · mean α_a(match)` for those predicted as `class` (0 for the rest),
/// with `w = 1 − g` or `g` per `convention`. `None` when no dialogue contains
/// `q`.
pub fn impact_score(
    records: &[TraceRecord],
    q: &[usize],
    class: usize,
    convention: GateConvention,
) -> Result<Option<f64>> {
    if q.is_empty() {
        return Err(Error::Config("subsequence must be non-empty".into()));
    }
    let mut support = 0usize;
    let mut total = 0.0;
    for r in records {
        let Some(att) = best_occurrence_attention(r, q)? else {
            continue;
        };
        support += 1;
        if r.predicted_satisfaction == class {
            total += r.da_gate_weight(convention)? * att;
        }
    }
    Ok((support > 0).then(|| total / support as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSubsequence {
    pub acts: Vec<usize>,
    pub impact: f64,
    /// Number of dialogues containing the subsequence.
    pub support: usize,
}

/// Every contiguous predicted subsequence of length `1..=max_len` present in
/// at least `min_support` dialogues, ranked by impact for `class` (ties by
/// larger support, then lexicographic).
pub fn top_subsequences(
    records: &[TraceRecord],
    class: usize,
    max_len: usize,
    top_n: usize,
    min_support: usize,
    convention: GateConvention,
) -> Result<Vec<ScoredSubsequence>> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    let mut support: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    for r in records {
        let mut seen: Vec<&[usize]> = Vec::new();
        for len in 1..=max_len.min(r.predicted_da.len()) {
            for w in r.predicted_da.windows(len) {
                if !seen.contains(&w) {
                    seen.push(w);
                }
            }
        }
        for w in seen {
            *support.entry(w.to_vec()).or_default() += 1;
        }
    }
    let mut scored = Vec::new();
    for (acts, count) in support {
        if count < min_support {
            continue;
        }
        let impact = impact_score(records, &acts, class, convention)?.unwrap_or(0.0);
        scored.push(ScoredSubsequence {
            acts,
            impact,
            support: count,
        });
    }
    scored.sort_by(|a, b| {
        b.impact
            .total_cmp(&a.impact)
            .then(b.support.cmp(&a.support))
            .then_with(|| a.acts.cmp(&b.acts))
    });
    scored.truncate(top_n);
    Ok(scored)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateSummary {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub min: f64,
    pub max: f64,
    /// `(lower edge, upper edge, count)` over equal-width bins of [0, 1].
    pub histogram: Vec<(f64, f64, usize)>,
}

/// Linear-interpolation quantile of sorted values.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn summarize_gates(values: &[f64], bins: usize) -> Result<GateSummary> {
    if values.is_empty() {
        return Err(Error::Empty("gate values"));
    }
    if bins == 0 {
        return Err(Error::Config("bins must be positive".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut counts = vec![0usize; bins];
    for &v in &sorted {
        let b = ((v * bins as f64).floor() as isize).clamp(0, bins as isize - 1) as usize;
        counts[b] += 1;
    }
    let width = 1.0 / bins as f64;
    Ok(GateSummary {
        count: sorted.len(),
        mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
        median: quantile(&sorted, 0.5),
        q1: quantile(&sorted, 0.25),
        q3: quantile(&sorted, 0.75),
        min: sorted[0],
        max: sorted[sorted.len() - 1],
        histogram: counts
            .into_iter()
            .enumerate()
            .map(|(i, c)| (i as f64 * width, (i + 1) as f64 * width, c))
            .collect(),
    })
}

/// Scalar-gate statistics per tag, under `convention`.
pub fn gate_distribution(
    records: &[TraceRecord],
    bins: usize,
    convention: GateConvention,
) -> Result<BTreeMap<String, GateSummary>> {
    if records.is_empty() {
        return Err(Error::Empty("traces"));
    }
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in records {
        groups
            .entry(r.tag.clone())
            .or_default()
            .push(r.da_gate_weight(convention)?);
    }
    groups
        .into_iter()
        .map(|(k, v)| Ok((k, summarize_gates(&v, bins)?)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerClassReport {
    pub satisfaction: ClassificationReport,
    pub dialogue_acts: Option<ClassificationReport>,
    /// Mean scalar gate per predicted satisfaction class.
    pub mean_gate: BTreeMap<usize, f64>,
}

pub fn per_class(records: &[TraceRecord], num_da: Option<usize>) -> Result<PerClassReport> {
    let labelled: Vec<&TraceRecord> = records
        .iter()
        .filter(|r| r.gold_satisfaction.is_some())
        .collect();
    let gold: Vec<usize> = labelled
        .iter()
        .map(|r| r.gold_satisfaction.expect("filtered"))
        .collect();
    let pred: Vec<usize> = labelled.iter().map(|r| r.predicted_satisfaction).collect();
    let satisfaction = ClassificationReport::compute(&gold, &pred, NUM_CLASSES)?;
    let dialogue_acts = match num_da {
        Some(k) if records.iter().all(|r| r.gold_da.is_some()) => {
            let (mut g, mut p) = (Vec::new(), Vec::new());
            for r in records {
                g.extend(r.gold_da.as_ref().expect("checked"));
                p.extend(&r.predicted_da);
            }
            Some(ClassificationReport::compute(&g, &p, k)?)
        }
        _ => None,
    };
    let mut sums: HashMap<usize, (f64, usize)> = HashMap::new();
    for r in records {
        if let Some(g) = r.trace.scalar_gate() {
            let e = sums.entry(r.predicted_satisfaction).or_default();
            e.0 += g;
            e.1 += 1;
        }
    }
    Ok(PerClassReport {
        satisfaction,
        dialogue_acts,
        mean_gate: sums
            .into_iter()
            .map(|(k, (s, n))| (k, s / n as f64))
            .collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnPoint {
    pub turns: usize,
    pub macro_f1: f64,
    pub accuracy: f64,
}

/// Satisfaction metrics after truncating every dialogue to its first `n`
/// exchanges, for `n = 2..=max_turns`.
pub fn turn_sensitivity(
    model: &UsdaModel,
    dialogues: &[Dialogue],
    max_turns: usize,
) -> Result<Vec<TurnPoint>> {
    let mut out = Vec::new();
    for n in 2..=max_turns {
        let truncated: Vec<Dialogue> = dialogues.iter().map(|d| d.truncated(n)).collect();
        let report = evaluate(model, &truncated, TrainMode::StlUse)?;
        let r = report.satisfaction.expect("satisfaction metrics requested");
        out.push(TurnPoint {
            turns: n,
            macro_f1: r.macro_f1,
            accuracy: r.accuracy,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn record(
        id: &str,
        acts: &[usize],
        alpha: &[f64],
        gate: f64,
        pred: usize,
    ) -> TraceRecord {
        TraceRecord {
            id: id.into(),
            tag: "t".into(),
            gold_satisfaction: Some(pred),
            predicted_satisfaction: pred,
            gold_da: None,
            predicted_da: acts.to_vec(),
            trace: FusionTrace {
                alpha_c: vec![1.0 / acts.len() as f64; acts.len()],
                alpha_a: Some(alpha.to_vec()),
                o_c: vec![0.0],
                o_a: Some(vec![0.0]),
                gate: Some(vec![gate]),
                o: vec![0.0],
                p_use: vec![1.0 / 3.0; 3],
            },
        }
    }

    #[test]
    fn single_dialogue_example() {
        let r = record("a", &[5, 1, 2, 7], &[0.1, 0.3, 0.5, 0.1], 0.4, 0);
        let imp = impact_score(&[r], &[1, 2], 0, GateConvention::OneMinusGate)
            .unwrap()
            .unwrap();
        assert!((imp - 0.24).abs() < 1e-12);
    }

    #[test]
    fn empty_match_sets() {
        let r = record("a", &[1, 2], &[0.5, 0.5], 0.4, 1);
        assert_eq!(
            impact_score(
                std::slice::from_ref(&r),
                &[1, 2],
                0,
                GateConvention::OneMinusGate
            )
            .unwrap(),
            Some(0.0)
        );
        assert_eq!(
            impact_score(&[r], &[3], 0, GateConvention::OneMinusGate).unwrap(),
            None
        );
    }

    #[test]
    fn length_one_and_multiple_occurrences() {
        let r = record("a", &[4, 1, 4], &[0.2, 0.3, 0.5], 0.0, 2);
        let imp = impact_score(
            std::slice::from_ref(&r),
            &[4],
            2,
            GateConvention::OneMinusGate,
        )
        .unwrap()
        .unwrap();
        assert!((imp - 0.5).abs() < 1e-15);
        let imp = impact_score(&[r], &[4], 2, GateConvention::Gate)
            .unwrap()
            .unwrap();
        assert_eq!(imp, 0.0);
    }

    #[test]
    fn top_subsequences_behaviour() {
        let mut records = Vec::new();
        for i in 0..6 {
            records.push(record(
                &format!("d{i}"),
                &[3, 3, 1],
                &[0.45, 0.45, 0.1],
                0.2,
                0,
            ));
        }
        for i in 0..6 {
            records.push(record(
                &format!("e{i}"),
                &[3, 2, 4],
                &[0.2, 0.3, 0.5],
                0.2,
                2,
            ));
        }
        let top = top_subsequences(&records, 0, 2, 3, 5, GateConvention::OneMinusGate).unwrap();
        assert_eq!(top[0].acts, vec![3, 3]);
        let all = top_subsequences(&records, 0, 3, 1000, 1, GateConvention::OneMinusGate).unwrap();
        assert_eq!(all.len(), 10);
        assert!(
            top_subsequences(&records, 0, 3, 10, 100, GateConvention::OneMinusGate)
                .unwrap()
                .is_empty()
        );
    }

    #[test]
    fn gate_summaries() {
        let records: Vec<TraceRecord> = (0..5)
            .map(|i| record(&format!("{i}"), &[1, 2], &[0.5, 0.5], 0.5, 0))
            .collect();
        let s = &gate_distribution(&records, 10, GateConvention::Gate).unwrap()["t"];
        assert_eq!((s.mean, s.median), (0.5, 0.5));
        assert_eq!(s.histogram.iter().filter(|b| b.2 > 0).count(), 1);

        let s = summarize_gates(&[0.2, 0.8], 10).unwrap();
        assert!((s.mean - 0.5).abs() < 1e-15);
        assert_eq!(s.histogram[2].2, 1);
        assert_eq!(s.histogram[8].2, 1);
        assert_eq!(summarize_gates(&[1.0], 4).unwrap().histogram[3].2, 1);
    }

    #[test]
    fn quartiles_match_recomputation() {
        let v = [0.9, 0.1, 0.4, 0.3, 0.7];
        let s = summarize_gates(&v, 5).unwrap();
        // sorted: 0.1 0.3 0.4 0.7 0.9
        assert_eq!(s.median, 0.4);
        assert!((s.q1 - 0.3).abs() < 1e-15);
        assert!((s.q3 - 0.7).abs() < 1e-15);
        let mut rev = v;
        rev.reverse();
        assert_eq!(summarize_gates(&rev, 5).unwrap(), s);
    }

    #[test]
    fn traces_round_trip() {
        let records = vec![record("a", &[1, 2], &[0.25, 0.75], 0.3, 1)];
        let mut buf = Vec::new();
        write_traces(&mut buf, &records).unwrap();
        assert_eq!(read_traces(&buf[..]).unwrap(), records);
    }
}
