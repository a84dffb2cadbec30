//! End-to-end answer selection over a dataset: CFD scoring and the CoT-SC,
//! CoT and ICL baselines.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::PipelineConfig;
use crate::cot::{self, ConsistencyRecord, CotError, CotJob, CotPrompting};
use crate::counterfactual::{self, CounterfactualError, CounterfactualPrompting, CounterfactualSet, WeightedEntity};
use crate::estimator::{self, ClusterAnswer, Contribution, EstimatorError, RankedAnswer, SensitivityRecord};
use crate::eval::{self, EvalError, Prediction, QueryRecord};
use crate::gateway::{ChatRequest, Gateway, GatewayError};
use crate::prompts::{self, vars, Template, TemplateError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Counterfactual(#[from] CounterfactualError),
    #[error(transparent)]
    Cot(#[from] CotError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("record `{id}`: {source}")]
    Record {
        id: String,
        #[source]
        source: Box<PipelineError>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Cfd,
    CotSc,
    Cot,
    Icl,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Cfd => "cfd",
            Method::CotSc => "cot-sc",
            Method::Cot => "cot",
            Method::Icl => "icl",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cfd" => Ok(Method::Cfd),
            "cot-sc" => Ok(Method::CotSc),
            "cot" => Ok(Method::Cot),
            "icl" => Ok(Method::Icl),
            other => Err(format!("unknown method `{other}` (expected cfd, cot-sc, cot or icl)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Perturbation {
    #[default]
    None,
    Inject,
    Shuffle,
}

impl FromStr for Perturbation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Perturbation::None),
            "inject" => Ok(Perturbation::Inject),
            "shuffle" => Ok(Perturbation::Shuffle),
            other => Err(format!(
                "unknown perturbation `{other}` (expected none, inject or shuffle)"
            )),
        }
    }
}

/// Seed for one record, derived from the run seed and the record id.
pub fn record_seed(seed: u64, id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 8 bytes"))
}

/// Applies a perturbation to every record. The inject pool is the union of
/// all context sentences in the dataset; each record only receives sentences
/// from other records.
pub fn perturb_dataset(records: &[QueryRecord], kind: Perturbation, seed: u64) -> Result<Vec<QueryRecord>, EvalError> {
    match kind {
        Perturbation::None => Ok(records.to_vec()),
        Perturbation::Inject => {
            let pool: Vec<String> = records.iter().flat_map(|r| r.context.iter().cloned()).collect();
            records
                .iter()
                .map(|r| eval::perturb_inject(r, &pool, record_seed(seed ^ 0x1_1ec7, &r.id)))
                .collect()
        }
        Perturbation::Shuffle => records
            .iter()
            .map(|r| eval::perturb_shuffle(r, record_seed(seed ^ 0x5_4ff1e, &r.id)))
            .collect(),
    }
}

/// Lookup key of the CoTs sampled under counterfactual variant `t` (1-based).
pub fn variant_key(id: &str, t: usize) -> String {
    format!("{id}#e{t}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub medoid: usize,
    pub members: usize,
    pub answer: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub omitted_index: usize,
    pub kept_entity: String,
    pub probability: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct GateStats {
    pub cells: usize,
    pub empty_cells: usize,
    pub passed: usize,
    pub compared: usize,
}

/// Everything computed for one record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordReport {
    pub id: String,
    pub method: Method,
    pub prediction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub majority_answer: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ranked: Vec<RankedAnswer>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub entities: Vec<WeightedEntity>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub counterfactuals: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub variants: Vec<VariantSummary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub clusters: Vec<ClusterSummary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub consistency: Vec<ConsistencyRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sensitivity: Vec<SensitivityRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ledger: Vec<Contribution>,
    #[serde(default)]
    pub gate: GateStats,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    pub config_digest: String,
}

impl RecordReport {
    fn new(id: &str, method: Method, digest: &str) -> Self {
        RecordReport {
            id: id.to_string(),
            method,
            prediction: String::new(),
            majority_answer: None,
            ranked: Vec::new(),
            entities: Vec::new(),
            counterfactuals: Vec::new(),
            variants: Vec::new(),
            clusters: Vec::new(),
            consistency: Vec::new(),
            sensitivity: Vec::new(),
            ledger: Vec::new(),
            gate: GateStats::default(),
            warnings: Vec::new(),
            config_digest: digest.to_string(),
        }
    }

    /// Human-readable case study.
    pub fn render(&self) -> String {
        let mut out = format!(
            "record {} [{}]\n  prediction: {}\n",
            self.id, self.method, self.prediction
        );
        if let Some(m) = &self.majority_answer {
            out += &format!("  majority vote: {m}\n");
        }
        if !self.ranked.is_empty() {
            out += "  ranked answers:\n";
            for r in &self.ranked {
                out += &format!("    {:<30} {:.6}  ({} CoTs)\n", r.answer, r.score, r.members);
            }
        }
        if self.gate.cells > 0 {
            out += &format!(
                "  similarity gate: {}/{} CoT comparisons passed, {} of {} cells empty\n",
                self.gate.passed, self.gate.compared, self.gate.empty_cells, self.gate.cells
            );
        }
        for w in &self.warnings {
            out += &format!("  warning: {w}\n");
        }
        out
    }
}

fn cot_prompting(cfg: &PipelineConfig) -> CotPrompting {
    CotPrompting {
        template_version: cfg.template_version.clone(),
        temperature: cfg.cot_temperature,
        max_tokens: cfg.max_tokens,
    }
}

fn base_samples(
    gw: &Gateway,
    cfg: &PipelineConfig,
    record: &QueryRecord,
    knowledge: &str,
    seed: u64,
) -> Result<Vec<cot::CotSample>, PipelineError> {
    let texts = cot::sample_cots(
        gw,
        &cot_prompting(cfg),
        &record.id,
        &record.question,
        knowledge,
        cfg.m,
        seed,
    )?;
    Ok(cot::build_samples(gw, texts)?)
}

fn single_reply(
    gw: &Gateway,
    cfg: &PipelineConfig,
    template_id: &str,
    record: &QueryRecord,
    knowledge: &str,
    seed: u64,
) -> Result<String, PipelineError> {
    let template = Template::builtin(template_id, &cfg.template_version)?;
    let v = vars([
        ("question", record.question.clone()),
        ("knowledge", knowledge.to_string()),
    ]);
    let mut req = ChatRequest::from_template(&template, &v, record.id.clone(), 0, 0.0)?;
    req.max_tokens = cfg.max_tokens;
    req.seed = Some(seed);
    Ok(gw.chat(&req)?.text)
}

/// Runs one method on one record.
pub fn run_record(
    gw: &Gateway,
    cfg: &PipelineConfig,
    method: Method,
    record: &QueryRecord,
) -> Result<RecordReport, PipelineError> {
    let seed = record_seed(cfg.seed, &record.id);
    let knowledge = record.knowledge();
    let mut report = RecordReport::new(&record.id, method, &cfg.digest());
    match method {
        Method::Icl | Method::Cot => {
            let tpl = if method == Method::Icl {
                prompts::ICL
            } else {
                prompts::COT
            };
            let text = single_reply(gw, cfg, tpl, record, &knowledge, seed)?;
            let a = estimator::extract_answer(&text);
            if !a.found {
                report.warnings.push("reply has no \"answer is\" span".into());
            }
            report.prediction = a.answer;
        }
        Method::CotSc => {
            let samples = base_samples(gw, cfg, record, &knowledge, seed)?;
            let answers: Vec<_> = samples.into_iter().map(|s| s.answer).collect();
            let m = estimator::majority_vote(&answers)?;
            report.majority_answer = Some(m.clone());
            report.prediction = m;
        }
        Method::Cfd => run_cfd(gw, cfg, record, &knowledge, seed, &mut report)?,
    }
    Ok(report)
}

fn run_cfd(
    gw: &Gateway,
    cfg: &PipelineConfig,
    record: &QueryRecord,
    knowledge: &str,
    seed: u64,
    report: &mut RecordReport,
) -> Result<(), PipelineError> {
    let cf_prompting = CounterfactualPrompting {
        template_version: cfg.template_version.clone(),
        temperature: cfg.extraction_temperature,
        seed: Some(seed),
    };
    let extraction =
        counterfactual::extract_entities(gw, &cf_prompting, &record.id, &record.question, knowledge, cfg.t)?;
    report.warnings.extend(extraction.warnings);
    let entities = extraction.entities;
    let cfs = counterfactual::counterfactual_entities(gw, &cf_prompting, &record.id, &record.question, &entities)?;
    let set: CounterfactualSet = counterfactual::enumerate_variants(knowledge, &entities, &cfs)?;
    report.counterfactuals = cfs.iter().map(|c| c.surface.clone()).collect();
    report.variants = set
        .variants
        .iter()
        .map(|v| VariantSummary {
            omitted_index: v.omitted_index,
            kept_entity: entities[v.omitted_index - 1].surface.clone(),
            probability: v.probability,
        })
        .collect();
    report.entities = entities;

    let mut jobs = vec![CotJob {
        key: record.id.clone(),
        query: record.question.clone(),
        knowledge: knowledge.to_string(),
        count: cfg.m,
    }];
    jobs.extend(set.variants.iter().map(|v| CotJob {
        key: variant_key(&record.id, v.omitted_index),
        query: record.question.clone(),
        knowledge: v.text.clone(),
        count: cfg.p,
    }));
    let mut batches = cot::sample_many(gw, &cot_prompting(cfg), &jobs, seed)?.into_iter();
    let base = cot::build_samples(gw, batches.next().expect("base batch"))?;
    let variant_samples = batches
        .map(|texts| cot::build_samples(gw, texts))
        .collect::<Result<Vec<_>, _>>()?;

    let base_answers: Vec<_> = base.iter().map(|s| s.answer.clone()).collect();
    report.majority_answer = estimator::majority_vote(&base_answers).ok();

    let vectors: Vec<Vec<f64>> = base.iter().map(|s| s.embedding.clone()).collect();
    let clusters = cot::kmeans(&vectors, cfg.n, seed)?;
    let sizes = clusters.sizes();
    let cluster_answers: Vec<ClusterAnswer> = clusters
        .medoids
        .iter()
        .zip(&sizes)
        .map(|(&m, &members)| ClusterAnswer {
            answer: base[m].answer.found.then(|| base[m].answer.answer.clone()),
            members,
        })
        .collect();
    report.clusters = clusters
        .medoids
        .iter()
        .zip(&cluster_answers)
        .map(|(&medoid, ca)| ClusterSummary {
            medoid,
            members: ca.members,
            answer: ca.answer.clone(),
        })
        .collect();

    let mut consistency = Vec::new();
    let mut sensitivity = Vec::new();
    for (n, &medoid) in clusters.medoids.iter().enumerate() {
        let reference = &base[medoid].answer.answer;
        for (t, samples) in variant_samples.iter().enumerate() {
            let embs: Vec<Vec<f64>> = samples.iter().map(|s| s.embedding.clone()).collect();
            let c = cot::consistency_prob(n, t, &base[medoid].embedding, &embs, cfg.s)?;
            let answers: Vec<String> = samples.iter().map(|s| s.answer.answer.clone()).collect();
            let s = estimator::sensitivity_record(&c, reference, &answers);
            report.gate.cells += 1;
            report.gate.compared += c.indicators.len();
            report.gate.passed += c.passed();
            if s.gate_empty {
                report.gate.empty_cells += 1;
            }
            consistency.push(c);
            sensitivity.push(s);
        }
    }
    if report.gate.empty_cells > 0 {
        report.warnings.push(format!(
            "similarity gate retained no CoT in {} of {} cells (sensitivity set to 0)",
            report.gate.empty_cells, report.gate.cells
        ));
    }
    let probs: Vec<f64> = set.variants.iter().map(|v| v.probability).collect();
    let table = estimator::aggregate(&consistency, &sensitivity, &probs, &cluster_answers)?;
    let best = estimator::select_answer(&table)?;
    report.prediction = best.answer;
    report.ranked = table.ranked();
    report.ledger = table.ledger;
    report.consistency = consistency;
    report.sensitivity = sensitivity;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordFailure {
    pub id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    pub method: Method,
    pub config_digest: String,
    pub predictions: Vec<Prediction>,
    pub reports: Vec<RecordReport>,
    pub failures: Vec<RecordFailure>,
}

/// Runs `method` over all records with record-level parallelism bounded by
/// `cfg.parallelism`. Outputs keep dataset order. Failed records are skipped
/// and listed unless `cfg.fail_fast` is set.
pub fn run_dataset(
    gw: &Gateway,
    cfg: &PipelineConfig,
    method: Method,
    records: &[QueryRecord],
) -> Result<RunOutput, PipelineError> {
    let slots: Vec<Mutex<Option<Result<RecordReport, PipelineError>>>> =
        records.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let workers = cfg.parallelism.clamp(1, records.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                if abort.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= records.len() {
                    break;
                }
                let r = run_record(gw, cfg, method, &records[i]);
                if r.is_err() && cfg.fail_fast {
                    abort.store(true, Ordering::SeqCst);
                }
                *slots[i].lock().expect("slot poisoned") = Some(r);
            });
        }
    });

    let mut out = RunOutput {
        method,
        config_digest: cfg.digest(),
        predictions: Vec::new(),
        reports: Vec::new(),
        failures: Vec::new(),
    };
    for (record, slot) in records.iter().zip(slots) {
        match slot.into_inner().expect("slot poisoned") {
            Some(Ok(report)) => {
                out.predictions.push(Prediction {
                    id: report.id.clone(),
                    prediction: report.prediction.clone(),
                    method: method.name().to_string(),
                });
                out.reports.push(report);
            }
            Some(Err(e)) => {
                if cfg.fail_fast {
                    return Err(PipelineError::Record {
                        id: record.id.clone(),
                        source: Box::new(e),
                    });
                }
                warn!("record {}: {e}", record.id);
                out.failures.push(RecordFailure {
                    id: record.id.clone(),
                    error: e.to_string(),
                });
            }
            None => {}
        }
    }
    info!(
        "{method}: {} predictions, {} failures",
        out.predictions.len(),
        out.failures.len()
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::ScriptedFixture;

    fn record() -> QueryRecord {
        QueryRecord {
            id: "r1".into(),
            question: "Who founded Gong?".into(),
            context: vec![
                "Daevid Allen founded Gong in Paris.".into(),
                "Gong toured Europe.".into(),
            ],
            answers: vec!["Daevid Allen".into()],
            metadata: Default::default(),
        }
    }

    #[test]
    fn record_seed_is_stable_and_id_dependent() {
        assert_eq!(record_seed(1, "a"), record_seed(1, "a"));
        assert_ne!(record_seed(1, "a"), record_seed(1, "b"));
        assert_ne!(record_seed(1, "a"), record_seed(2, "a"));
    }

    #[test]
    fn method_names_roundtrip() {
        for m in [Method::Cfd, Method::CotSc, Method::Cot, Method::Icl] {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("sc".parse::<Method>().is_err());
    }

    #[test]
    fn icl_and_cot_baselines() {
        let mut f = ScriptedFixture::default();
        f.push(prompts::ICL, "r1", Some(0), "The answer is Daevid Allen.");
        f.push(
            prompts::COT,
            "r1",
            Some(0),
            "Gong was founded in Paris. So the answer is Paris.",
        );
        let gw = Gateway::scripted(f, 1);
        let cfg = PipelineConfig::default();
        assert_eq!(
            run_record(&gw, &cfg, Method::Icl, &record()).unwrap().prediction,
            "daevid allen"
        );
        assert_eq!(
            run_record(&gw, &cfg, Method::Cot, &record()).unwrap().prediction,
            "paris"
        );
    }

    #[test]
    fn failures_are_skipped_or_fatal() {
        let gw = Gateway::scripted(ScriptedFixture::default(), 1);
        let mut cfg = PipelineConfig::default();
        let out = run_dataset(&gw, &cfg, Method::Icl, &[record()]).unwrap();
        assert!(out.predictions.is_empty());
        assert_eq!(out.failures.len(), 1);
        assert!(out.failures[0].error.contains("r1"));
        cfg.fail_fast = true;
        assert!(matches!(
            run_dataset(&gw, &cfg, Method::Icl, &[record()]),
            Err(PipelineError::Record { .. })
        ));
    }

    #[test]
    fn perturbations_are_deterministic() {
        let mut other = record();
        other.id = "r2".into();
        other.context = vec!["Steve Hillage plays guitar.".into(), "Hillage lives in London.".into()];
        let data = [record(), other];
        let a = perturb_dataset(&data, Perturbation::Inject, 9).unwrap();
        assert_eq!(a, perturb_dataset(&data, Perturbation::Inject, 9).unwrap());
        assert_eq!(a[0].context.len(), 3);
        assert!(a[0].context.iter().any(|s| s.contains("Hillage")));
        let s = perturb_dataset(&data, Perturbation::Shuffle, 9).unwrap();
        assert_eq!(s, perturb_dataset(&data, Perturbation::Shuffle, 9).unwrap());
        assert_eq!(perturb_dataset(&data, Perturbation::None, 9).unwrap(), data.to_vec());
    }
}
