//! Answer extraction, knowledge sensitivity, per-answer causal scores and the
//! majority-vote baseline.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cot::ConsistencyRecord;
use crate::eval::normalize_answer;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("missing grid cell (cluster {cluster}, variant {variant}) in {what}")]
    MissingCell {
        what: &'static str,
        cluster: usize,
        variant: usize,
    },
    #[error("duplicate grid cell (cluster {cluster}, variant {variant}) in {what}")]
    DuplicateCell {
        what: &'static str,
        cluster: usize,
        variant: usize,
    },
    #[error("grid cell (cluster {cluster}, variant {variant}) is outside the {clusters}x{variants} grid")]
    OutOfGrid {
        cluster: usize,
        variant: usize,
        clusters: usize,
        variants: usize,
    },
    #[error("variant probabilities sum to {0}, expected 1")]
    NotNormalized(f64),
    #[error("score table is empty: no cluster produced an extractable answer")]
    EmptyTable,
    #[error("no sample has an extractable answer")]
    NoAnswers,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedAnswer {
    pub answer: String,
    pub found: bool,
}

const KEYWORD: &str = "answer is";

/// Span after the last case-insensitive "answer is", up to the end of that
/// sentence, normalized like EM scoring.
pub fn extract_answer(text: &str) -> ExtractedAnswer {
    let lower = text.to_lowercase();
    // to_lowercase can change byte lengths; fall back to ASCII folding then.
    let haystack = if lower.len() == text.len() {
        lower
    } else {
        text.to_ascii_lowercase()
    };
    let Some(pos) = haystack.rfind(KEYWORD) else {
        return ExtractedAnswer {
            answer: String::new(),
            found: false,
        };
    };
    let rest = &text[pos + KEYWORD.len()..];
    let rest = rest.trim_start_matches([':', ' ', '\t']);
    let mut end = rest.len();
    let chars: Vec<(usize, char)> = rest.char_indices().collect();
    for (k, &(i, c)) in chars.iter().enumerate() {
        if c == '\n' {
            end = i;
            break;
        }
        if matches!(c, '.' | '!' | '?') {
            let next = chars.get(k + 1).map(|&(_, n)| n);
            if next.is_none_or(char::is_whitespace) {
                end = i;
                break;
            }
        }
    }
    let span = rest[..end].trim().trim_end_matches(|c: char| c.is_ascii_punctuation());
    ExtractedAnswer {
        answer: normalize_answer(span),
        found: true,
    }
}

/// Answer sensitivity of the gated variant CoTs for one (cluster, variant) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRecord {
    pub cluster: usize,
    pub variant: usize,
    pub retained: usize,
    pub indicators: Vec<u8>,
    pub probability: f64,
    /// The similarity gate retained no CoT; the probability is then 0.
    pub gate_empty: bool,
}

/// Fraction of `retained` answers that differ from `reference`. Both sides
/// must already be normalized.
pub fn sensitivity(reference: &str, retained: &[String]) -> (Vec<u8>, f64, bool) {
    if retained.is_empty() {
        return (Vec::new(), 0.0, true);
    }
    let indicators: Vec<u8> = retained.iter().map(|a| u8::from(a != reference)).collect();
    let ones = indicators.iter().filter(|&&i| i == 1).count();
    (indicators, ones as f64 / retained.len() as f64, false)
}

/// Builds the sensitivity record for one cell from its consistency record and
/// the answers of the variant CoTs.
pub fn sensitivity_record(
    consistency: &ConsistencyRecord,
    reference: &str,
    variant_answers: &[String],
) -> SensitivityRecord {
    let retained: Vec<String> = consistency
        .indicators
        .iter()
        .zip(variant_answers)
        .filter(|(g, _)| **g == 1)
        .map(|(_, a)| a.clone())
        .collect();
    let (indicators, probability, gate_empty) = sensitivity(reference, &retained);
    SensitivityRecord {
        cluster: consistency.cluster,
        variant: consistency.variant,
        retained: retained.len(),
        indicators,
        probability,
        gate_empty,
    }
}

/// Representative answer and size of one cluster.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAnswer {
    /// Normalized medoid answer; `None` when the medoid has none.
    pub answer: Option<String>,
    pub members: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contribution {
    pub cluster: usize,
    pub variant: usize,
    pub answer: Option<String>,
    pub consistency: f64,
    pub sensitivity: f64,
    pub variant_probability: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedAnswer {
    pub answer: String,
    pub score: f64,
    pub members: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalScoreTable {
    pub scores: BTreeMap<String, f64>,
    /// Total membership of the clusters credited to each answer.
    pub membership: BTreeMap<String, usize>,
    /// Every (cluster, variant) term, ordered by cluster then variant.
    pub ledger: Vec<Contribution>,
}

/// Order-independent float sum.
fn stable_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.into_iter().collect();
    v.sort_by(f64::total_cmp);
    v.into_iter().sum()
}

fn grid<'a, T>(
    what: &'static str,
    items: &'a [T],
    cell: impl Fn(&T) -> (usize, usize),
    clusters: usize,
    variants: usize,
) -> Result<Vec<&'a T>, EstimatorError> {
    let mut slots: Vec<Option<&T>> = vec![None; clusters * variants];
    for item in items {
        let (cluster, variant) = cell(item);
        if cluster >= clusters || variant >= variants {
            return Err(EstimatorError::OutOfGrid {
                cluster,
                variant,
                clusters,
                variants,
            });
        }
        let slot = &mut slots[cluster * variants + variant];
        if slot.is_some() {
            return Err(EstimatorError::DuplicateCell { what, cluster, variant });
        }
        *slot = Some(item);
    }
    slots
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            s.ok_or(EstimatorError::MissingCell {
                what,
                cluster: i / variants,
                variant: i % variants,
            })
        })
        .collect()
}

/// Credits each (cluster, variant) term `consistency * sensitivity * P(e*_t)`
/// to the cluster's medoid answer and sums per answer. Clusters without an
/// answer appear in the ledger only.
pub fn aggregate(
    consistency: &[ConsistencyRecord],
    sensitivity: &[SensitivityRecord],
    variant_probs: &[f64],
    clusters: &[ClusterAnswer],
) -> Result<CausalScoreTable, EstimatorError> {
    let total = variant_probs.iter().sum::<f64>();
    if (total - 1.0).abs() > 1e-9 {
        return Err(EstimatorError::NotNormalized(total));
    }
    let (n, t) = (clusters.len(), variant_probs.len());
    let cons = grid("consistency", consistency, |r| (r.cluster, r.variant), n, t)?;
    let sens = grid("sensitivity", sensitivity, |r| (r.cluster, r.variant), n, t)?;

    let mut ledger = Vec::with_capacity(n * t);
    let mut per_answer: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut membership: BTreeMap<String, usize> = BTreeMap::new();
    for (ci, cluster) in clusters.iter().enumerate() {
        if let Some(a) = &cluster.answer {
            *membership.entry(a.clone()).or_default() += cluster.members;
        }
        for (vi, &p) in variant_probs.iter().enumerate() {
            let c = cons[ci * t + vi].probability;
            let s = sens[ci * t + vi].probability;
            let value = c * s * p;
            if let Some(a) = &cluster.answer {
                per_answer.entry(a.clone()).or_default().push(value);
            }
            ledger.push(Contribution {
                cluster: ci,
                variant: vi,
                answer: cluster.answer.clone(),
                consistency: c,
                sensitivity: s,
                variant_probability: p,
                value,
            });
        }
    }
    let scores = per_answer.into_iter().map(|(a, v)| (a, stable_sum(v))).collect();
    Ok(CausalScoreTable {
        scores,
        membership,
        ledger,
    })
}

impl CausalScoreTable {
    /// Answers by descending score, then larger membership, then lexicographic.
    pub fn ranked(&self) -> Vec<RankedAnswer> {
        let mut out: Vec<RankedAnswer> = self
            .scores
            .iter()
            .map(|(a, &s)| RankedAnswer {
                answer: a.clone(),
                score: s,
                members: self.membership.get(a).copied().unwrap_or(0),
            })
            .collect();
        out.sort_by(|x, y| {
            y.score
                .total_cmp(&x.score)
                .then(y.members.cmp(&x.members))
                .then(x.answer.cmp(&y.answer))
        });
        out
    }

    pub fn grand_total(&self) -> f64 {
        stable_sum(self.scores.values().copied())
    }

    /// Sum of the ledger terms of one cluster.
    pub fn cluster_total(&self, cluster: usize) -> f64 {
        stable_sum(self.ledger.iter().filter(|c| c.cluster == cluster).map(|c| c.value))
    }
}

/// Highest-scoring answer with its score.
pub fn select_answer(table: &CausalScoreTable) -> Result<RankedAnswer, EstimatorError> {
    table.ranked().into_iter().next().ok_or(EstimatorError::EmptyTable)
}

/// Most frequent extracted answer; ties go to the lexicographically smallest.
pub fn majority_vote(answers: &[ExtractedAnswer]) -> Result<String, EstimatorError> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for a in answers.iter().filter(|a| a.found) {
        *counts.entry(a.answer.as_str()).or_default() += 1;
    }
    // BTreeMap iterates in lexicographic order, so the first maximum wins.
    let mut best: Option<(&str, usize)> = None;
    for (a, c) in counts {
        if best.is_none_or(|(_, bc)| c > bc) {
            best = Some((a, c));
        }
    }
    best.map(|(a, _)| a.to_string()).ok_or(EstimatorError::NoAnswers)
}

/// Distinct answers among `answers`, for reporting.
pub fn distinct_answers(answers: &[ExtractedAnswer]) -> BTreeSet<String> {
    answers.iter().filter(|a| a.found).map(|a| a.answer.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ans(s: &str) -> ExtractedAnswer {
        ExtractedAnswer {
            answer: s.into(),
            found: true,
        }
    }

    fn cons(cluster: usize, variant: usize, p: f64) -> ConsistencyRecord {
        ConsistencyRecord {
            cluster,
            variant,
            indicators: Vec::new(),
            similarities: Vec::new(),
            probability: p,
        }
    }

    fn sens(cluster: usize, variant: usize, p: f64) -> SensitivityRecord {
        SensitivityRecord {
            cluster,
            variant,
            retained: 1,
            indicators: Vec::new(),
            probability: p,
            gate_empty: false,
        }
    }

    fn cluster(a: &str, members: usize) -> ClusterAnswer {
        ClusterAnswer {
            answer: Some(a.into()),
            members,
        }
    }

    #[test]
    fn extraction_examples() {
        assert_eq!(
            extract_answer("Gong's guitarist... so the answer is Steve Hillage."),
            ans("steve hillage")
        );
        assert_eq!(
            extract_answer("no keyword here"),
            ExtractedAnswer {
                answer: String::new(),
                found: false
            }
        );
        assert_eq!(extract_answer("answer is A. No wait, the answer is B"), ans("b"));
        assert_eq!(extract_answer("The ANSWER IS: 3.5 meters! Done."), ans("35 meters"));
        assert_eq!(extract_answer("So the answer is U.S.A.\nMore text"), ans("usa"));
        assert_eq!(extract_answer("the answer is"), ans(""));
    }

    #[test]
    fn sensitivity_examples() {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        assert_eq!(sensitivity("x", &s(&["x", "x"])).1, 0.0);
        assert_eq!(sensitivity("x", &s(&["x", "y", "z", "w"])).1, 0.75);
        assert_eq!(sensitivity("x", &[]), (vec![], 0.0, true));
    }

    #[test]
    fn sensitivity_uses_only_gated_cots() {
        let c = ConsistencyRecord {
            cluster: 0,
            variant: 1,
            indicators: vec![1, 0, 1, 0],
            similarities: vec![0.9, 0.1, 0.95, 0.2],
            probability: 0.5,
        };
        let r = sensitivity_record(&c, "x", &["x".into(), "y".into(), "z".into(), "w".into()]);
        assert_eq!(r.retained, 2);
        assert_eq!(r.indicators, vec![0, 1]);
        assert_eq!(r.probability, 0.5);
    }

    #[test]
    fn aggregate_hand_example() {
        let c = [cons(0, 0, 1.0), cons(0, 1, 0.5), cons(1, 0, 1.0), cons(1, 1, 1.0)];
        let s = [sens(0, 0, 1.0), sens(0, 1, 1.0), sens(1, 0, 0.0), sens(1, 1, 0.0)];
        let table = aggregate(&c, &s, &[0.5, 0.5], &[cluster("x", 3), cluster("y", 4)]).unwrap();
        assert_eq!(table.scores["x"], 0.75);
        assert_eq!(table.scores["y"], 0.0);
        assert_eq!(select_answer(&table).unwrap().answer, "x");
        assert_eq!(table.ledger.len(), 4);
    }

    #[test]
    fn aggregate_groups_and_annihilates() {
        let c = [cons(0, 0, 0.6), cons(1, 0, 0.4)];
        let s = [sens(0, 0, 0.5), sens(1, 0, 0.5)];
        let table = aggregate(&c, &s, &[1.0], &[cluster("x", 1), cluster("x", 1)]).unwrap();
        assert!((table.scores["x"] - 0.5).abs() < 1e-15);
        assert_eq!(table.membership["x"], 2);

        let s0 = [sens(0, 0, 0.0), sens(1, 0, 0.0)];
        let table = aggregate(&c, &s0, &[1.0], &[cluster("x", 1), cluster("y", 1)]).unwrap();
        assert!(table.scores.values().all(|&v| v == 0.0));
    }

    #[test]
    fn aggregate_validates_grid() {
        let c = [cons(0, 0, 1.0)];
        let s = [sens(0, 0, 1.0)];
        assert!(matches!(
            aggregate(&c, &s, &[0.5, 0.5], &[cluster("x", 1)]),
            Err(EstimatorError::MissingCell { variant: 1, .. })
        ));
        assert!(matches!(
            aggregate(&c, &s, &[0.5], &[cluster("x", 1)]),
            Err(EstimatorError::NotNormalized(_))
        ));
        let dup = [cons(0, 0, 1.0), cons(0, 0, 1.0)];
        assert!(matches!(
            aggregate(&dup, &s, &[1.0], &[cluster("x", 1)]),
            Err(EstimatorError::DuplicateCell { .. })
        ));
    }

    #[test]
    fn unanswered_clusters_stay_in_ledger_only() {
        let c = [cons(0, 0, 1.0), cons(1, 0, 1.0)];
        let s = [sens(0, 0, 1.0), sens(1, 0, 1.0)];
        let none = ClusterAnswer {
            answer: None,
            members: 5,
        };
        let table = aggregate(&c, &s, &[1.0], &[none.clone(), cluster("x", 1)]).unwrap();
        assert_eq!(table.scores.len(), 1);
        assert_eq!(table.ledger.len(), 2);
        let empty = aggregate(&c[..1], &s[..1], &[1.0], &[none]).unwrap();
        assert_eq!(select_answer(&empty), Err(EstimatorError::EmptyTable));
    }

    #[test]
    fn selection_tie_breaks() {
        let table = CausalScoreTable {
            scores: [("b".to_string(), 0.4), ("a".to_string(), 0.4), ("c".to_string(), 0.4)].into(),
            membership: [("b".to_string(), 3), ("a".to_string(), 3), ("c".to_string(), 7)].into(),
            ledger: Vec::new(),
        };
        assert_eq!(select_answer(&table).unwrap().answer, "c");
        let table = CausalScoreTable {
            membership: [("b".to_string(), 3), ("a".to_string(), 3), ("c".to_string(), 3)].into(),
            ..table
        };
        assert_eq!(select_answer(&table).unwrap().answer, "a");
        let single = CausalScoreTable {
            scores: [("z".to_string(), 0.0)].into(),
            membership: BTreeMap::new(),
            ledger: Vec::new(),
        };
        assert_eq!(select_answer(&single).unwrap().answer, "z");
    }

    #[test]
    fn majority_examples() {
        assert_eq!(majority_vote(&[ans("a"), ans("a"), ans("b")]).unwrap(), "a");
        assert_eq!(majority_vote(&[ans("c"), ans("b"), ans("d")]).unwrap(), "b");
        let missing = ExtractedAnswer {
            answer: String::new(),
            found: false,
        };
        assert_eq!(
            majority_vote(std::slice::from_ref(&missing)),
            Err(EstimatorError::NoAnswers)
        );
        assert_eq!(majority_vote(&[missing, ans("q")]).unwrap(), "q");
    }

    #[test]
    fn majority_and_causal_selection_can_disagree() {
        // 4 samples favour the knowledge-insensitive answer "w"; the single
        // adaptive cluster answering "g" carries the causal score.
        let samples = [ans("w"), ans("w"), ans("w"), ans("w"), ans("g")];
        let c = [cons(0, 0, 0.8), cons(0, 1, 0.8), cons(1, 0, 0.4), cons(1, 1, 0.4)];
        let s = [sens(0, 0, 0.0), sens(0, 1, 0.0), sens(1, 0, 1.0), sens(1, 1, 0.5)];
        let table = aggregate(&c, &s, &[0.6, 0.4], &[cluster("w", 4), cluster("g", 1)]).unwrap();
        assert_eq!(majority_vote(&samples).unwrap(), "w");
        assert_eq!(select_answer(&table).unwrap().answer, "g");
    }
}
