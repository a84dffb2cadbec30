//! Query records, dataset loaders, EM/F1 scoring and robustness perturbations.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("record {index}: {reason}")]
    Malformed { index: usize, reason: String },
    #[error("duplicate record id `{0}`")]
    DuplicateId(String),
    #[error("record `{0}` has no gold answer")]
    NoGold(String),
    #[error("distractor pool is empty")]
    EmptyPool,
    #[error("duplicate prediction for `{0}`")]
    DuplicatePrediction(String),
    #[error("prediction for unknown record `{0}`")]
    UnknownPrediction(String),
    #[error("no prediction ids intersect the dataset")]
    EmptyIntersection,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct RecordMeta {
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hops: Option<u32>,
    /// Answer candidates kept for reference; never shown to the model.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: String,
    pub question: String,
    #[serde(default)]
    pub context: Vec<String>,
    pub answers: Vec<String>,
    #[serde(default)]
    pub metadata: RecordMeta,
}

impl QueryRecord {
    /// Context sentences joined into one knowledge passage.
    pub fn knowledge(&self) -> String {
        self.context.join(" ")
    }
}

/// Lowercase, drop ASCII punctuation and the articles a/an/the, collapse whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lowered = text.to_lowercase();
    let no_punct: String = lowered.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    no_punct
        .split_whitespace()
        .filter(|t| !matches!(*t, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn exact_match(prediction: &str, golds: &[String]) -> u8 {
    let p = normalize_answer(prediction);
    u8::from(golds.iter().any(|g| normalize_answer(g) == p))
}

fn f1_single(prediction: &str, gold: &str) -> f64 {
    let p = normalize_answer(prediction);
    let g = normalize_answer(gold);
    let pt: Vec<&str> = p.split_whitespace().collect();
    let gt: Vec<&str> = g.split_whitespace().collect();
    if pt.is_empty() || gt.is_empty() {
        return if pt == gt { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, i64> = HashMap::new();
    for t in &gt {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0i64;
    for t in &pt {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pt.len() as f64;
    let recall = common as f64 / gt.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Token-multiset F1, maximized over gold answers.
pub fn f1(prediction: &str, golds: &[String]) -> f64 {
    golds.iter().map(|g| f1_single(prediction, g)).fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordScore {
    pub id: String,
    pub prediction: String,
    pub em: u8,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub config_digest: String,
    pub seed: u64,
    pub records: Vec<RecordScore>,
    pub missing_predictions: usize,
    pub em: f64,
    pub f1: f64,
}

impl MetricsReport {
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<24} {:>3} {:>7}  prediction\n", "id", "EM", "F1"));
        for r in &self.records {
            out.push_str(&format!("{:<24} {:>3} {:>7.4}  {}\n", r.id, r.em, r.f1, r.prediction));
        }
        out.push_str(&format!(
            "method={} records={} missing={} EM={:.4} F1={:.4}\n",
            self.method,
            self.records.len(),
            self.missing_predictions,
            self.em,
            self.f1
        ));
        out
    }
}

/// One prediction line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub prediction: String,
    #[serde(default)]
    pub method: String,
}

/// Scores predictions against a dataset. Records without a prediction score
/// zero and are counted in `missing_predictions`.
pub fn score(
    predictions: &[Prediction],
    dataset: &[QueryRecord],
    method: &str,
    config_digest: &str,
    seed: u64,
) -> Result<MetricsReport, EvalError> {
    let mut by_id: BTreeMap<&str, &str> = BTreeMap::new();
    for p in predictions {
        if by_id.insert(&p.id, &p.prediction).is_some() {
            return Err(EvalError::DuplicatePrediction(p.id.clone()));
        }
    }
    let known: BTreeSet<&str> = dataset.iter().map(|r| r.id.as_str()).collect();
    if !by_id.keys().any(|id| known.contains(id)) {
        return Err(EvalError::EmptyIntersection);
    }
    if let Some(id) = by_id.keys().find(|id| !known.contains(*id)) {
        return Err(EvalError::UnknownPrediction(id.to_string()));
    }
    let mut records = Vec::with_capacity(dataset.len());
    let mut missing = 0;
    for r in dataset {
        let pred = match by_id.get(r.id.as_str()) {
            Some(p) => p.to_string(),
            None => {
                missing += 1;
                String::new()
            }
        };
        records.push(RecordScore {
            id: r.id.clone(),
            em: if pred.is_empty() {
                0
            } else {
                exact_match(&pred, &r.answers)
            },
            f1: if pred.is_empty() { 0.0 } else { f1(&pred, &r.answers) },
            prediction: pred,
        });
    }
    let n = records.len().max(1) as f64;
    let em = records.iter().map(|r| r.em as f64).sum::<f64>() / n;
    let f1 = records.iter().map(|r| r.f1).sum::<f64>() / n;
    Ok(MetricsReport {
        method: method.to_string(),
        config_digest: config_digest.to_string(),
        seed,
        records,
        missing_predictions: missing,
        em,
        f1,
    })
}

/// Inserts `ceil(0.1 * |context|)` sentences drawn from `pool` at seeded
/// positions. Pool sentences already present in the record are ignored.
pub fn perturb_inject(record: &QueryRecord, pool: &[String], seed: u64) -> Result<QueryRecord, EvalError> {
    let own: BTreeSet<&String> = record.context.iter().collect();
    let foreign: Vec<&String> = pool.iter().filter(|s| !own.contains(s)).collect();
    if foreign.is_empty() {
        return Err(EvalError::EmptyPool);
    }
    let count = (record.context.len() as f64 * 0.1).ceil() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut context = record.context.clone();
    for _ in 0..count {
        let sentence = foreign[rng.gen_range(0..foreign.len())].clone();
        let pos = rng.gen_range(0..=context.len());
        context.insert(pos, sentence);
    }
    Ok(QueryRecord {
        context,
        ..record.clone()
    })
}

/// Picks `floor(0.5 * |context|)` seeded positions and cyclically permutes the
/// sentences among them (no selected position keeps its sentence).
pub fn perturb_shuffle(record: &QueryRecord, seed: u64) -> Result<QueryRecord, EvalError> {
    let n = record.context.len();
    let k = n / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut positions: Vec<usize> = (0..n).collect();
    positions.shuffle(&mut rng);
    positions.truncate(k);
    positions.sort_unstable();
    // Sattolo's algorithm: a uniformly random single cycle
    let mut perm: Vec<usize> = (0..k).collect();
    for i in (1..k).rev() {
        let j = rng.gen_range(0..i);
        perm.swap(i, j);
    }
    let mut context = record.context.clone();
    for (slot, &src) in perm.iter().enumerate() {
        context[positions[slot]] = record.context[positions[src]].clone();
    }
    Ok(QueryRecord {
        context,
        ..record.clone()
    })
}

/// Reads normalized records, one JSON object per line.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(reader: impl BufRead) -> Result<Vec<T>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| EvalError::Json { line: i + 1, source })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(mut writer: impl Write, items: &[T]) -> Result<(), EvalError> {
    for item in items {
        let line = serde_json::to_string(item).map_err(|source| EvalError::Json { line: 0, source })?;
        writeln!(writer, "{line}")?;
    }
    Ok(())
}

/// Reads a normalized dataset and checks id uniqueness and gold presence.
pub fn read_dataset(reader: impl BufRead) -> Result<Vec<QueryRecord>, EvalError> {
    let records: Vec<QueryRecord> = read_jsonl(reader)?;
    validate(&records)?;
    Ok(records)
}

pub fn validate(records: &[QueryRecord]) -> Result<(), EvalError> {
    let mut seen = BTreeSet::new();
    for r in records {
        if !seen.insert(&r.id) {
            return Err(EvalError::DuplicateId(r.id.clone()));
        }
        if r.answers.is_empty() {
            return Err(EvalError::NoGold(r.id.clone()));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceDataset {
    SciQ,
    HotpotQa,
    WikiHop,
    MuSiQue,
}

impl std::str::FromStr for SourceDataset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sciq" => Ok(Self::SciQ),
            "hotpotqa" => Ok(Self::HotpotQa),
            "wikihop" => Ok(Self::WikiHop),
            "musique" => Ok(Self::MuSiQue),
            other => Err(format!("unknown dataset `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct LoadReport {
    pub loaded: usize,
    pub excluded_missing_hops: usize,
    pub excluded_few_hops: usize,
}

/// Minimum hop count kept from MuSiQue ("more than three").
pub const MUSIQUE_MIN_HOPS: u32 = 4;

/// Splits a passage into sentences at `.`, `!` or `?` followed by whitespace.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        cur.push(c);
        if matches!(c, '.' | '!' | '?') && chars.peek().is_none_or(|n| n.is_whitespace()) {
            let s = cur.trim();
            if !s.is_empty() {
                out.push(s.to_string());
            }
            cur.clear();
        }
    }
    let s = cur.trim();
    if !s.is_empty() {
        out.push(s.to_string());
    }
    out
}

fn str_field(v: &Value, key: &str, index: usize) -> Result<String, EvalError> {
    v.get(key)
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| EvalError::Malformed {
            index,
            reason: format!("missing string field `{key}`"),
        })
}

fn items(raw: &str) -> Result<Vec<Value>, EvalError> {
    let trimmed = raw.trim_start();
    if trimmed.starts_with('[') {
        let v: Vec<Value> = serde_json::from_str(raw).map_err(|source| EvalError::Json { line: 0, source })?;
        Ok(v)
    } else {
        read_jsonl(raw.as_bytes())
    }
}

/// Maps a benchmark's published JSON (array) or JSONL file into records.
pub fn load_source(source: SourceDataset, raw: &str) -> Result<(Vec<QueryRecord>, LoadReport), EvalError> {
    let mut report = LoadReport::default();
    let mut out = Vec::new();
    for (i, v) in items(raw)?.iter().enumerate() {
        let rec = match source {
            SourceDataset::SciQ => QueryRecord {
                id: v
                    .get("id")
                    .and_then(Value::as_str)
                    .map(str::to_string)
                    .unwrap_or_else(|| format!("sciq-{i}")),
                question: str_field(v, "question", i)?,
                context: split_sentences(v.get("support").and_then(Value::as_str).unwrap_or("")),
                answers: vec![str_field(v, "correct_answer", i)?],
                metadata: RecordMeta {
                    source: "sciq".into(),
                    hops: None,
                    candidates: ["correct_answer", "distractor1", "distractor2", "distractor3"]
                        .iter()
                        .filter_map(|k| v.get(*k).and_then(Value::as_str).map(str::to_string))
                        .collect(),
                },
            },
            SourceDataset::HotpotQa => {
                let mut context = Vec::new();
                if let Some(docs) = v.get("context").and_then(Value::as_array) {
                    for doc in docs {
                        if let Some(sents) = doc.get(1).and_then(Value::as_array) {
                            context.extend(
                                sents
                                    .iter()
                                    .filter_map(Value::as_str)
                                    .map(|s| s.trim().to_string())
                                    .filter(|s| !s.is_empty()),
                            );
                        }
                    }
                }
                QueryRecord {
                    id: str_field(v, "_id", i).or_else(|_| str_field(v, "id", i))?,
                    question: str_field(v, "question", i)?,
                    context,
                    answers: vec![str_field(v, "answer", i)?],
                    metadata: RecordMeta {
                        source: "hotpotqa".into(),
                        ..Default::default()
                    },
                }
            }
            SourceDataset::WikiHop => QueryRecord {
                id: str_field(v, "id", i)?,
                question: str_field(v, "query", i)?.replace('_', " "),
                context: v
                    .get("supports")
                    .and_then(Value::as_array)
                    .map(|a| a.iter().filter_map(Value::as_str).map(str::to_string).collect())
                    .unwrap_or_default(),
                answers: vec![str_field(v, "answer", i)?],
                metadata: RecordMeta {
                    source: "wikihop".into(),
                    hops: None,
                    candidates: v
                        .get("candidates")
                        .and_then(Value::as_array)
                        .map(|a| a.iter().filter_map(Value::as_str).map(str::to_string).collect())
                        .unwrap_or_default(),
                },
            },
            SourceDataset::MuSiQue => {
                let hops = v
                    .get("question_decomposition")
                    .and_then(Value::as_array)
                    .map(|a| a.len() as u32);
                let Some(hops) = hops else {
                    report.excluded_missing_hops += 1;
                    continue;
                };
                if hops < MUSIQUE_MIN_HOPS {
                    report.excluded_few_hops += 1;
                    continue;
                }
                let mut answers = vec![str_field(v, "answer", i)?];
                if let Some(aliases) = v.get("answer_aliases").and_then(Value::as_array) {
                    answers.extend(aliases.iter().filter_map(Value::as_str).map(str::to_string));
                }
                QueryRecord {
                    id: str_field(v, "id", i)?,
                    question: str_field(v, "question", i)?,
                    context: v
                        .get("paragraphs")
                        .and_then(Value::as_array)
                        .map(|a| {
                            a.iter()
                                .filter_map(|p| p.get("paragraph_text").and_then(Value::as_str))
                                .map(str::to_string)
                                .collect()
                        })
                        .unwrap_or_default(),
                    answers,
                    metadata: RecordMeta {
                        source: "musique".into(),
                        hops: Some(hops),
                        candidates: Vec::new(),
                    },
                }
            }
        };
        out.push(rec);
    }
    validate(&out)?;
    report.loaded = out.len();
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(x: &[&str]) -> Vec<String> {
        x.iter().map(|s| s.to_string()).collect()
    }

    fn record(n: usize) -> QueryRecord {
        QueryRecord {
            id: "r".into(),
            question: "q?".into(),
            context: (0..n).map(|i| format!("sentence {i}.")).collect(),
            answers: g(&["x"]),
            metadata: RecordMeta::default(),
        }
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_answer("The Eiffel Tower!"), "eiffel tower");
        assert_eq!(normalize_answer(""), "");
        assert_eq!(normalize_answer("  A  dog "), "dog");
    }

    #[test]
    fn em_and_f1() {
        assert_eq!(exact_match("Paris France", &g(&["Paris"])), 0);
        assert!((f1("Paris France", &g(&["Paris"])) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(exact_match("the cat", &g(&["Cat"])), 1);
        assert_eq!(f1("cat", &g(&["cat"])), 1.0);
        assert_eq!(f1("dog", &g(&["cat"])), 0.0);
        assert_eq!(f1("dog", &g(&["cat", "dog"])), 1.0);
    }

    #[test]
    fn inject_counts() {
        let pool = g(&["foreign one.", "foreign two."]);
        let out = perturb_inject(&record(10), &pool, 1).unwrap();
        assert_eq!(out.context.len(), 11);
        assert_eq!(out.context.iter().filter(|s| s.starts_with("foreign")).count(), 1);
        let out = perturb_inject(&record(1), &pool, 1).unwrap();
        assert_eq!(out.context.len(), 2);
        assert_eq!(
            perturb_inject(&record(10), &pool, 9).unwrap(),
            perturb_inject(&record(10), &pool, 9).unwrap()
        );
        assert!(matches!(
            perturb_inject(&record(3), &record(3).context, 0),
            Err(EvalError::EmptyPool)
        ));
    }

    #[test]
    fn shuffle_counts() {
        let r = record(4);
        let out = perturb_shuffle(&r, 3).unwrap();
        let moved = r.context.iter().zip(&out.context).filter(|(a, b)| a != b).count();
        assert_eq!(moved, 2);
        let mut a = r.context.clone();
        let mut b = out.context.clone();
        a.sort();
        b.sort();
        assert_eq!(a, b);
        assert_eq!(perturb_shuffle(&r, 5).unwrap(), perturb_shuffle(&r, 5).unwrap());
        assert_eq!(perturb_shuffle(&record(1), 0).unwrap(), record(1));
    }

    #[test]
    fn scoring_errors() {
        let ds = vec![record(1)];
        let p = |id: &str| Prediction {
            id: id.into(),
            prediction: "x".into(),
            method: "cfd".into(),
        };
        assert!(matches!(
            score(&[p("zz")], &ds, "m", "", 0),
            Err(EvalError::EmptyIntersection)
        ));
        assert!(matches!(
            score(&[p("r"), p("r")], &ds, "m", "", 0),
            Err(EvalError::DuplicatePrediction(id)) if id == "r"
        ));
        let rep = score(&[p("r")], &ds, "m", "", 0).unwrap();
        assert_eq!(rep.em, 1.0);
    }

    #[test]
    fn sentence_splitting() {
        assert_eq!(
            split_sentences("It is 3.5 m long. Really? Yes!"),
            g(&["It is 3.5 m long.", "Really?", "Yes!"])
        );
    }

    #[test]
    fn loaders_map_published_shapes() {
        let hotpot = r#"[{"_id":"h1","question":"Who?","answer":"Bob","context":[["T1",["Bob met Al."," Al left."]],["T2",["X."]]]}]"#;
        let (recs, _) = load_source(SourceDataset::HotpotQa, hotpot).unwrap();
        assert_eq!(recs[0].context, g(&["Bob met Al.", "Al left.", "X."]));

        let sciq = r#"[{"question":"What?","correct_answer":"mitochondria","distractor1":"a","distractor2":"b","distractor3":"c","support":"Cells have parts. Mitochondria make energy."}]"#;
        let (recs, _) = load_source(SourceDataset::SciQ, sciq).unwrap();
        assert_eq!(recs[0].id, "sciq-0");
        assert_eq!(recs[0].context.len(), 2);
        assert_eq!(recs[0].metadata.candidates.len(), 4);

        let wikihop = r#"[{"id":"w1","query":"country_of_citizenship alan","answer":"france","candidates":["france","spain"],"supports":["Alan lived in France."]}]"#;
        let (recs, _) = load_source(SourceDataset::WikiHop, wikihop).unwrap();
        assert_eq!(recs[0].question, "country of citizenship alan");
        assert_eq!(recs[0].metadata.candidates, g(&["france", "spain"]));

        let musique = concat!(
            r#"{"id":"4hop1","question":"Q4","answer":"A","answer_aliases":["AA"],"paragraphs":[{"paragraph_text":"P1"}],"question_decomposition":[{},{},{},{}]}"#,
            "\n",
            r#"{"id":"2hop1","question":"Q2","answer":"B","paragraphs":[],"question_decomposition":[{},{}]}"#,
            "\n",
            r#"{"id":"nohop","question":"Q","answer":"C","paragraphs":[]}"#
        );
        let (recs, rep) = load_source(SourceDataset::MuSiQue, musique).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].answers, g(&["A", "AA"]));
        assert_eq!(rep.excluded_few_hops, 1);
        assert_eq!(rep.excluded_missing_hops, 1);
    }

    #[test]
    fn normalized_form_roundtrips() {
        let recs = vec![record(3)];
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &recs).unwrap();
        assert_eq!(read_dataset(buf.as_slice()).unwrap(), recs);
    }
}
