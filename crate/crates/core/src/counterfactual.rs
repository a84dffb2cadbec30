//! Counterfactual external knowledge: entity ranking, counterfactual entity
//! generation, substitution variants and their weight-product probabilities.

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{ChatRequest, Gateway, GatewayError};
use crate::prompts::{self, vars, Template, TemplateError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CounterfactualError {
    #[error("need T >= 2 entities, got {0}")]
    TooFewRequested(usize),
    #[error("knowledge text is empty")]
    EmptyKnowledge,
    #[error("entity list is empty")]
    NoEntities,
    #[error("weight {0} outside (0, 1]")]
    BadWeight(f64),
    #[error("reply for `{key}` is unusable after re-asking: {reason}")]
    Unparseable { key: String, reason: String },
    #[error("only {found} distinct entities found in the knowledge, {wanted} requested")]
    InsufficientEntities { found: usize, wanted: usize },
    #[error("no usable counterfactual for entity `{entity}` after re-asking")]
    MissingCounterfactual { entity: String },
    #[error("entity `{entity}` does not occur in the knowledge text")]
    EntityNotFound { entity: String },
    #[error("{entities} entities but {counterfactuals} counterfactuals")]
    Misaligned { entities: usize, counterfactuals: usize },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedEntity {
    pub surface: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterfactualEntity {
    /// 1-based position of the original entity.
    pub index: usize,
    pub surface: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualVariant {
    pub text: String,
    /// 1-based index of the one counterfactual entity left out.
    pub omitted_index: usize,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualSet {
    pub knowledge: String,
    pub variants: Vec<CounterfactualVariant>,
}

/// Entities together with any warnings raised while parsing the reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extraction {
    pub entities: Vec<WeightedEntity>,
    pub warnings: Vec<String>,
}

/// Backend-facing settings shared by extraction and counterfactual generation.
#[derive(Debug, Clone, PartialEq)]
pub struct CounterfactualPrompting {
    pub template_version: String,
    pub temperature: f64,
    pub seed: Option<u64>,
}

impl Default for CounterfactualPrompting {
    fn default() -> Self {
        CounterfactualPrompting {
            template_version: "v1".into(),
            temperature: 0.0,
            seed: None,
        }
    }
}

impl CounterfactualPrompting {
    fn request(
        &self,
        template: &Template,
        vars: &BTreeMap<String, String>,
        key: &str,
        rep: u32,
    ) -> Result<ChatRequest, TemplateError> {
        let mut r = ChatRequest::from_template(template, vars, key, rep, self.temperature)?;
        r.seed = self.seed;
        Ok(r)
    }
}

fn warn_push(warnings: &mut Vec<String>, msg: String) {
    warn!("{msg}");
    warnings.push(msg);
}

/// Byte ranges of whole-token, case-insensitive occurrences of `needles` in
/// `text`. Scanning is single-pass and left to right; at each position the
/// longest matching needle wins. Returns `(start, end, needle index)`.
fn find_tokens(text: &str, needles: &[&str]) -> Vec<(usize, usize, usize)> {
    let mut order: Vec<usize> = (0..needles.len()).filter(|&i| !needles[i].is_empty()).collect();
    order.sort_by(|&a, &b| {
        needles[b]
            .chars()
            .count()
            .cmp(&needles[a].chars().count())
            .then(a.cmp(&b))
    });
    let lowered: Vec<Vec<char>> = needles
        .iter()
        .map(|n| n.chars().flat_map(char::to_lowercase).collect())
        .collect();

    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let boundary_before = |i: usize| i == 0 || !chars[i - 1].1.is_alphanumeric();
    let boundary_after = |i: usize| i >= chars.len() || !chars[i].1.is_alphanumeric();

    let mut hits = Vec::new();
    let mut i = 0;
    'outer: while i < chars.len() {
        if boundary_before(i) {
            for &n in &order {
                let want = &lowered[n];
                let mut j = i;
                let mut k = 0;
                while k < want.len() && j < chars.len() {
                    let mut lc = chars[j].1.to_lowercase();
                    let mut ok = true;
                    for c in lc.by_ref() {
                        if k < want.len() && want[k] == c {
                            k += 1;
                        } else {
                            ok = false;
                            break;
                        }
                    }
                    if !ok {
                        break;
                    }
                    j += 1;
                }
                if k == want.len() && boundary_after(j) {
                    let start = chars[i].0;
                    let end = if j < chars.len() { chars[j].0 } else { text.len() };
                    hits.push((start, end, n));
                    i = j;
                    continue 'outer;
                }
            }
        }
        i += 1;
    }
    hits
}

/// True when `entity` occurs in `text` as a whole token sequence, ignoring case.
pub fn contains_entity(text: &str, entity: &str) -> bool {
    !find_tokens(text, &[entity]).is_empty()
}

/// Replaces every whole-token, case-insensitive occurrence of each key of
/// `map` by its value; overlapping keys resolve longest-first.
pub fn substitute(text: &str, map: &[(&str, &str)]) -> String {
    let needles: Vec<&str> = map.iter().map(|(k, _)| *k).collect();
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    for (start, end, n) in find_tokens(text, &needles) {
        out.push_str(&text[last..start]);
        out.push_str(map[n].1);
        last = end;
    }
    out.push_str(&text[last..]);
    out
}

fn parse_entity_reply(reply: &str) -> Vec<(String, Option<f64>)> {
    reply
        .lines()
        .filter_map(|line| {
            let (name, weight) = line.split_once('|')?;
            let name = name
                .trim()
                .trim_start_matches(|c: char| c == '-' || c == '*' || c.is_ascii_digit() || c == '.' || c == ')')
                .trim()
                .trim_matches('"');
            if name.is_empty() {
                return None;
            }
            Some((
                name.to_string(),
                weight.trim().parse::<f64>().ok().filter(|w| w.is_finite()),
            ))
        })
        .collect()
}

/// Asks the backend for the `t` entities of `knowledge` most relevant to
/// `query`, returning them with weights sorted non-increasing.
///
/// Weights are clamped to `[0.01, 1]`. If any weight fails to parse, rank
/// weights `(T - t + 1) / T` replace all of them. Entities absent from the
/// knowledge trigger one re-ask (repetition 1); duplicates are dropped keeping
/// the highest weight, which may lower `t`.
pub fn extract_entities(
    gw: &Gateway,
    prompting: &CounterfactualPrompting,
    key: &str,
    query: &str,
    knowledge: &str,
    t: usize,
) -> Result<Extraction, CounterfactualError> {
    if t < 2 {
        return Err(CounterfactualError::TooFewRequested(t));
    }
    if knowledge.trim().is_empty() {
        return Err(CounterfactualError::EmptyKnowledge);
    }
    let template = Template::builtin(prompts::EXTRACT_ENTITIES, &prompting.template_version)?;
    let v = vars([
        ("question", query.to_string()),
        ("knowledge", knowledge.to_string()),
        ("count", t.to_string()),
    ]);
    let mut warnings = Vec::new();
    let mut last_reason = String::new();
    for rep in 0..2u32 {
        let reply = gw.chat(&prompting.request(&template, &v, key, rep)?)?;
        let parsed = parse_entity_reply(&reply.text);
        if parsed.is_empty() {
            last_reason = "no `entity | weight` lines".into();
            warn_push(&mut warnings, format!("{key}: {last_reason}; re-asking"));
            continue;
        }
        let absent: Vec<&str> = parsed
            .iter()
            .map(|(n, _)| n.as_str())
            .filter(|n| !contains_entity(knowledge, n))
            .collect();
        if !absent.is_empty() {
            last_reason = format!("entities not in knowledge: {}", absent.join(", "));
            warn_push(&mut warnings, format!("{key}: {last_reason}; rejected"));
            continue;
        }
        return finish_extraction(key, parsed, t, warnings);
    }
    Err(CounterfactualError::Unparseable {
        key: key.to_string(),
        reason: last_reason,
    })
}

fn finish_extraction(
    key: &str,
    parsed: Vec<(String, Option<f64>)>,
    t: usize,
    mut warnings: Vec<String>,
) -> Result<Extraction, CounterfactualError> {
    let n = parsed.len();
    let mut weighted: Vec<(String, f64)> = if parsed.iter().all(|(_, w)| w.is_some()) {
        parsed
            .into_iter()
            .map(|(name, w)| {
                let raw = w.unwrap_or_default();
                let clamped = raw.clamp(0.01, 1.0);
                if clamped != raw {
                    warn_push(
                        &mut warnings,
                        format!("{key}: weight {raw} for `{name}` clamped to {clamped}"),
                    );
                }
                (name, clamped)
            })
            .collect()
    } else {
        warn_push(&mut warnings, format!("{key}: unparseable weights, using rank weights"));
        parsed
            .into_iter()
            .enumerate()
            .map(|(i, (name, _))| (name, (n - i) as f64 / n as f64))
            .collect()
    };

    let mut deduped: Vec<(String, f64)> = Vec::new();
    let mut had_duplicates = false;
    for (name, w) in weighted.drain(..) {
        let lower = name.to_lowercase();
        if let Some(existing) = deduped.iter_mut().find(|(e, _)| e.to_lowercase() == lower) {
            had_duplicates = true;
            existing.1 = existing.1.max(w);
        } else {
            deduped.push((name, w));
        }
    }
    deduped.sort_by(|a, b| b.1.total_cmp(&a.1));
    deduped.truncate(t);

    if deduped.len() < t {
        if had_duplicates && deduped.len() >= 2 {
            warn_push(
                &mut warnings,
                format!(
                    "{key}: duplicate entities removed, T lowered from {t} to {}",
                    deduped.len()
                ),
            );
        } else {
            return Err(CounterfactualError::InsufficientEntities {
                found: deduped.len(),
                wanted: t,
            });
        }
    }
    Ok(Extraction {
        entities: deduped
            .into_iter()
            .map(|(surface, weight)| WeightedEntity { surface, weight })
            .collect(),
        warnings,
    })
}

fn parse_counterfactual_reply(reply: &str, entities: &[WeightedEntity]) -> Vec<Option<String>> {
    let mut out = vec![None; entities.len()];
    for line in reply.lines() {
        let Some((orig, alt)) = line.split_once("->") else {
            continue;
        };
        let orig = orig.trim().trim_start_matches(['-', '*']).trim().to_lowercase();
        let alt = alt.trim().trim_matches('"').trim();
        if alt.is_empty() {
            continue;
        }
        if let Some(i) = entities.iter().position(|e| e.surface.to_lowercase() == orig) {
            if out[i].is_none() {
                out[i] = Some(alt.to_string());
            }
        }
    }
    out
}

/// Asks the backend for one counterfactual per entity, index-aligned with the
/// input. Missing or unchanged alternatives trigger one re-ask.
pub fn counterfactual_entities(
    gw: &Gateway,
    prompting: &CounterfactualPrompting,
    key: &str,
    query: &str,
    entities: &[WeightedEntity],
) -> Result<Vec<CounterfactualEntity>, CounterfactualError> {
    if entities.is_empty() {
        return Err(CounterfactualError::NoEntities);
    }
    let template = Template::builtin(prompts::COUNTERFACTUAL, &prompting.template_version)?;
    let listing = entities
        .iter()
        .map(|e| e.surface.as_str())
        .collect::<Vec<_>>()
        .join("\n");
    let v = vars([("question", query.to_string()), ("entities", listing)]);
    let mut best: Vec<Option<String>> = vec![None; entities.len()];
    for rep in 0..2u32 {
        let reply = gw.chat(&prompting.request(&template, &v, key, rep)?)?;
        for (i, alt) in parse_counterfactual_reply(&reply.text, entities)
            .into_iter()
            .enumerate()
        {
            let usable = alt.filter(|a| a.to_lowercase() != entities[i].surface.to_lowercase());
            if best[i].is_none() {
                best[i] = usable;
            }
        }
        if best.iter().all(Option::is_some) {
            break;
        }
    }
    best.into_iter()
        .enumerate()
        .map(|(i, alt)| {
            alt.map(|surface| CounterfactualEntity { index: i + 1, surface })
                .ok_or_else(|| CounterfactualError::MissingCounterfactual {
                    entity: entities[i].surface.clone(),
                })
        })
        .collect()
}

/// Probability of each variant: entry `t` is the product of every weight
/// except `w_t` (the weights of the substituted entities), normalized.
pub fn variant_probabilities(weights: &[f64]) -> Result<Vec<f64>, CounterfactualError> {
    if weights.is_empty() {
        return Err(CounterfactualError::NoEntities);
    }
    if let Some(&w) = weights.iter().find(|w| !(**w > 0.0 && **w <= 1.0)) {
        return Err(CounterfactualError::BadWeight(w));
    }
    let t = weights.len();
    if weights.iter().all(|&w| w == weights[0]) {
        return Ok(vec![1.0 / t as f64; t]);
    }
    // Products of prefixes and suffixes avoid dividing by w_t.
    let mut prefix = vec![1.0; t + 1];
    for i in 0..t {
        prefix[i + 1] = prefix[i] * weights[i];
    }
    let mut suffix = vec![1.0; t + 1];
    for i in (0..t).rev() {
        suffix[i] = suffix[i + 1] * weights[i];
    }
    let products: Vec<f64> = (0..t).map(|i| prefix[i] * suffix[i + 1]).collect();
    let total: f64 = products.iter().sum();
    Ok(products.into_iter().map(|p| p / total).collect())
}

/// Builds the `T` variants: variant `t` substitutes every counterfactual
/// except the `t`-th.
pub fn enumerate_variants(
    knowledge: &str,
    entities: &[WeightedEntity],
    counterfactuals: &[CounterfactualEntity],
) -> Result<CounterfactualSet, CounterfactualError> {
    if entities.is_empty() {
        return Err(CounterfactualError::NoEntities);
    }
    if entities.len() != counterfactuals.len() || counterfactuals.iter().enumerate().any(|(i, c)| c.index != i + 1) {
        return Err(CounterfactualError::Misaligned {
            entities: entities.len(),
            counterfactuals: counterfactuals.len(),
        });
    }
    for e in entities {
        if !contains_entity(knowledge, &e.surface) {
            return Err(CounterfactualError::EntityNotFound {
                entity: e.surface.clone(),
            });
        }
    }
    let weights: Vec<f64> = entities.iter().map(|e| e.weight).collect();
    let probs = variant_probabilities(&weights)?;
    let variants = (0..entities.len())
        .map(|skip| {
            let map: Vec<(&str, &str)> = entities
                .iter()
                .zip(counterfactuals)
                .enumerate()
                .filter(|(i, _)| *i != skip)
                .map(|(_, (e, c))| (e.surface.as_str(), c.surface.as_str()))
                .collect();
            CounterfactualVariant {
                text: substitute(knowledge, &map),
                omitted_index: skip + 1,
                probability: probs[skip],
            }
        })
        .collect();
    Ok(CounterfactualSet {
        knowledge: knowledge.to_string(),
        variants,
    })
}
