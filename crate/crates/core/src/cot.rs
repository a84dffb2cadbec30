//! CoT sampling, embedding, k-means clustering, medoid selection and the
//! similarity-gated consistency probability.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::{extract_answer, ExtractedAnswer};
use crate::gateway::{ChatRequest, Gateway, GatewayError};
use crate::prompts::{self, vars, Template, TemplateError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CotError {
    #[error("need at least one sample")]
    NoSamples,
    #[error("sample {index} of {total} for `{key}` failed: {source}")]
    SampleFailed {
        key: String,
        index: usize,
        total: usize,
        failed: Vec<usize>,
        #[source]
        source: Box<GatewayError>,
    },
    #[error("embedding {0} has zero norm")]
    ZeroNorm(usize),
    #[error("vectors have dimensions {0} and {1}")]
    Dimension(usize, usize),
    #[error("{clusters} clusters requested for {points} points")]
    TooManyClusters { clusters: usize, points: usize },
    #[error("cluster count must be at least 1")]
    NoClusters,
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("no negative samples")]
    NoNegatives,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CotSample {
    pub text: String,
    pub answer: ExtractedAnswer,
    pub embedding: Vec<f64>,
}

/// Sampling settings for the CoT template.
#[derive(Debug, Clone, PartialEq)]
pub struct CotPrompting {
    pub template_version: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for CotPrompting {
    fn default() -> Self {
        CotPrompting {
            template_version: "v1".into(),
            temperature: 0.7,
            max_tokens: 512,
        }
    }
}

/// One batch of CoTs for a single `(query, knowledge)` pair, requested under
/// lookup key `key` with repetitions `0..count`.
#[derive(Debug, Clone, PartialEq)]
pub struct CotJob {
    pub key: String,
    pub query: String,
    pub knowledge: String,
    pub count: usize,
}

/// Runs every job concurrently through the gateway. Replies come back per job
/// in repetition order.
pub fn sample_many(
    gw: &Gateway,
    prompting: &CotPrompting,
    jobs: &[CotJob],
    seed: u64,
) -> Result<Vec<Vec<String>>, CotError> {
    if jobs.is_empty() || jobs.iter().any(|j| j.count == 0) {
        return Err(CotError::NoSamples);
    }
    let template = Template::builtin(prompts::COT, &prompting.template_version)?;
    let mut requests = Vec::new();
    for job in jobs {
        let v = vars([("question", job.query.clone()), ("knowledge", job.knowledge.clone())]);
        for rep in 0..job.count as u32 {
            let mut r = ChatRequest::from_template(&template, &v, job.key.clone(), rep, prompting.temperature)?;
            r.max_tokens = prompting.max_tokens;
            r.seed = Some(seed.wrapping_add(rep as u64));
            requests.push(r);
        }
    }
    let mut results = gw.chat_many(&requests).into_iter();
    let mut out = Vec::with_capacity(jobs.len());
    for job in jobs {
        let batch: Vec<_> = results.by_ref().take(job.count).collect();
        let failed: Vec<usize> = (0..batch.len()).filter(|&i| batch[i].is_err()).collect();
        let mut texts = Vec::with_capacity(job.count);
        for (i, r) in batch.into_iter().enumerate() {
            match r {
                Ok(reply) => texts.push(reply.text),
                Err(source) => {
                    return Err(CotError::SampleFailed {
                        key: job.key.clone(),
                        index: i,
                        total: job.count,
                        failed,
                        source: Box::new(source),
                    })
                }
            }
        }
        out.push(texts);
    }
    Ok(out)
}

/// Requests `m` CoTs for `(query, knowledge)` under lookup key `key`.
pub fn sample_cots(
    gw: &Gateway,
    prompting: &CotPrompting,
    key: &str,
    query: &str,
    knowledge: &str,
    m: usize,
    seed: u64,
) -> Result<Vec<String>, CotError> {
    let job = CotJob {
        key: key.to_string(),
        query: query.to_string(),
        knowledge: knowledge.to_string(),
        count: m,
    };
    Ok(sample_many(gw, prompting, &[job], seed)?.remove(0))
}

/// Scales `v` to unit length.
pub fn normalize(v: &mut [f64]) -> bool {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    true
}

/// Embeds `texts` through the gateway and L2-normalizes every vector.
pub fn embed(gw: &Gateway, texts: &[String]) -> Result<Vec<Vec<f64>>, CotError> {
    if texts.is_empty() {
        return Err(CotError::NoSamples);
    }
    let mut vectors = gw.embed_batch(texts)?;
    for (i, v) in vectors.iter_mut().enumerate() {
        if !normalize(v) {
            return Err(CotError::ZeroNorm(i));
        }
    }
    Ok(vectors)
}

/// Samples with extracted answers and unit embeddings.
pub fn build_samples(gw: &Gateway, texts: Vec<String>) -> Result<Vec<CotSample>, CotError> {
    let embeddings = embed(gw, &texts)?;
    Ok(texts
        .into_iter()
        .zip(embeddings)
        .map(|(text, embedding)| CotSample {
            answer: extract_answer(&text),
            text,
            embedding,
        })
        .collect())
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, CotError> {
    if u.len() != v.len() {
        return Err(CotError::Dimension(u.len(), v.len()));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 {
        return Err(CotError::ZeroNorm(0));
    }
    if nv == 0.0 {
        return Err(CotError::ZeroNorm(1));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

fn sq_dist(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSet {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub medoids: Vec<usize>,
}

impl ClusterSet {
    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&i| self.assignments[i] == cluster)
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.len()];
        for &a in &self.assignments {
            s[a] += 1;
        }
        s
    }
}

pub const KMEANS_MAX_ITER: usize = 100;
pub const KMEANS_TOL: f64 = 1e-6;

fn check_dims(vectors: &[Vec<f64>]) -> Result<usize, CotError> {
    let dim = vectors.first().map_or(0, Vec::len);
    match vectors.iter().find(|v| v.len() != dim) {
        Some(v) => Err(CotError::Dimension(dim, v.len())),
        None => Ok(dim),
    }
}

fn plus_plus_init(vectors: &[Vec<f64>], n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut chosen = vec![rng.gen_range(0..vectors.len())];
    let mut d2: Vec<f64> = vectors.iter().map(|v| sq_dist(v, &vectors[chosen[0]])).collect();
    while chosen.len() < n {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 {
                    pick = Some(i);
                    if target < d {
                        break;
                    }
                    target -= d;
                }
            }
            pick.expect("positive total has a positive entry")
        } else {
            // every point coincides with a centre: take any unused index
            let unused: Vec<usize> = (0..vectors.len()).filter(|i| !chosen.contains(i)).collect();
            unused[rng.gen_range(0..unused.len())]
        };
        chosen.push(next);
        for (i, v) in vectors.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(v, &vectors[next]));
        }
    }
    chosen.into_iter().map(|i| vectors[i].clone()).collect()
}

fn nearest(v: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(v, c);
        if d < best_d {
            best = j;
            best_d = d;
        }
    }
    best
}

fn centroids_of(vectors: &[Vec<f64>], assign: &[usize], n: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; dim]; n];
    let mut counts = vec![0usize; n];
    for (v, &a) in vectors.iter().zip(assign) {
        counts[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(v) {
            *s += x;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            s.iter_mut().for_each(|x| *x /= c as f64);
        }
    }
    sums
}

/// Moves the point farthest from its centroid into each empty cluster, taking
/// only from clusters with more than one member.
fn repair_empty(vectors: &[Vec<f64>], assign: &mut [usize], centroids: &mut [Vec<f64>]) {
    let n = centroids.len();
    loop {
        let mut counts = vec![0usize; n];
        for &a in assign.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let mut far = None;
        let mut far_d = -1.0;
        for (i, v) in vectors.iter().enumerate() {
            if counts[assign[i]] > 1 {
                let d = sq_dist(v, &centroids[assign[i]]);
                if d > far_d {
                    far = Some(i);
                    far_d = d;
                }
            }
        }
        let i = far.expect("n <= points leaves a cluster with spare members");
        assign[i] = empty;
        centroids[empty] = vectors[i].clone();
    }
}

/// Seeded k-means with k-means++ initialization and Euclidean distance.
/// Clusters are labelled in order of their smallest member index.
pub fn kmeans(vectors: &[Vec<f64>], n: usize, seed: u64) -> Result<ClusterSet, CotError> {
    if n == 0 {
        return Err(CotError::NoClusters);
    }
    if n > vectors.len() {
        return Err(CotError::TooManyClusters {
            clusters: n,
            points: vectors.len(),
        });
    }
    let dim = check_dims(vectors)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_init(vectors, n, &mut rng);
    let mut assign: Vec<usize> = vectors.iter().map(|v| nearest(v, &centroids)).collect();
    repair_empty(vectors, &mut assign, &mut centroids);
    for _ in 0..KMEANS_MAX_ITER {
        let updated = centroids_of(vectors, &assign, n, dim);
        let shift = updated
            .iter()
            .zip(&centroids)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        let mut next: Vec<usize> = vectors.iter().map(|v| nearest(v, &centroids)).collect();
        repair_empty(vectors, &mut next, &mut centroids);
        let stable = next == assign;
        assign = next;
        if stable || shift < KMEANS_TOL {
            break;
        }
    }
    centroids = centroids_of(vectors, &assign, n, dim);

    let mut first_member = vec![usize::MAX; n];
    for (i, &a) in assign.iter().enumerate() {
        first_member[a] = first_member[a].min(i);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&j| first_member[j]);
    let mut relabel = vec![0; n];
    for (new, &old) in order.iter().enumerate() {
        relabel[old] = new;
    }
    let assignments: Vec<usize> = assign.iter().map(|&a| relabel[a]).collect();
    let centroids: Vec<Vec<f64>> = order.iter().map(|&old| centroids[old].clone()).collect();
    let mut set = ClusterSet {
        assignments,
        centroids,
        medoids: Vec::new(),
    };
    set.medoids = medoids(vectors, &set);
    Ok(set)
}

/// Per cluster, the member closest to the centroid; ties go to the lower index.
pub fn medoids(vectors: &[Vec<f64>], clusters: &ClusterSet) -> Vec<usize> {
    (0..clusters.len())
        .map(|j| {
            let mut best = usize::MAX;
            let mut best_d = f64::INFINITY;
            for i in clusters.members(j) {
                let d = sq_dist(&vectors[i], &clusters.centroids[j]);
                if d < best_d - 1e-12 * best_d.abs().max(1e-300) || best == usize::MAX {
                    best = i;
                    best_d = d;
                }
            }
            best
        })
        .collect()
}

/// Similarity gate between one medoid and the `P` CoTs of one variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyRecord {
    pub cluster: usize,
    pub variant: usize,
    pub indicators: Vec<u8>,
    pub similarities: Vec<f64>,
    pub probability: f64,
}

impl ConsistencyRecord {
    pub fn passed(&self) -> usize {
        self.indicators.iter().filter(|&&i| i == 1).count()
    }
}

/// Indicator `cosine >= s` for each variant CoT, averaged.
pub fn consistency_prob(
    cluster: usize,
    variant: usize,
    medoid: &[f64],
    variant_embeddings: &[Vec<f64>],
    s: f64,
) -> Result<ConsistencyRecord, CotError> {
    if variant_embeddings.is_empty() {
        return Err(CotError::NoSamples);
    }
    let similarities = variant_embeddings
        .iter()
        .map(|v| cosine(medoid, v))
        .collect::<Result<Vec<f64>, _>>()?;
    let indicators: Vec<u8> = similarities.iter().map(|&d| u8::from(d >= s)).collect();
    let ones = indicators.iter().filter(|&&i| i == 1).count();
    Ok(ConsistencyRecord {
        cluster,
        variant,
        probability: ones as f64 / indicators.len() as f64,
        indicators,
        similarities,
    })
}

/// InfoNCE loss for one anchor, using dot-product similarities.
pub fn infonce_loss(anchor: &[f64], positive: &[f64], negatives: &[Vec<f64>], tau: f64) -> Result<f64, CotError> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(CotError::BadTemperature(tau));
    }
    if negatives.is_empty() {
        return Err(CotError::NoNegatives);
    }
    let dot = |v: &[f64]| -> Result<f64, CotError> {
        if v.len() != anchor.len() {
            return Err(CotError::Dimension(anchor.len(), v.len()));
        }
        Ok(anchor.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / tau)
    };
    let mut logits = vec![dot(positive)?];
    for n in negatives {
        logits.push(dot(n)?);
    }
    Ok(infonce_from_logits(&logits))
}

/// `-log softmax(logits)[0]` via log-sum-exp.
pub fn infonce_from_logits(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    (lse - logits[0]).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{FixtureFailure, ScriptedFixture};

    fn unit(v: &[f64]) -> Vec<f64> {
        let mut v = v.to_vec();
        normalize(&mut v);
        v
    }

    fn cot_fixture(key: &str, n: u32) -> ScriptedFixture {
        let mut f = ScriptedFixture::default();
        for i in 0..n {
            f.push(prompts::COT, key, Some(i), format!("step {i}. So the answer is a{i}."));
        }
        f
    }

    #[test]
    fn samples_keep_fixture_order() {
        let g = Gateway::scripted(cot_fixture("r", 30), 4);
        let texts = sample_cots(&g, &CotPrompting::default(), "r", "q", "k", 30, 1).unwrap();
        assert_eq!(texts.len(), 30);
        for (i, t) in texts.iter().enumerate() {
            assert_eq!(extract_answer(t).answer, format!("a{i}"));
        }
        let one = sample_cots(&g, &CotPrompting::default(), "r", "q", "k", 1, 1).unwrap();
        assert_eq!(one.len(), 1);
    }

    #[test]
    fn failed_sample_is_named() {
        let mut f = cot_fixture("r", 10);
        f.failures.push(FixtureFailure {
            template: prompts::COT.into(),
            key: "r".into(),
            rep: Some(7),
            transient: 0,
            always: true,
        });
        let g = Gateway::scripted(f, 3);
        let err = sample_cots(&g, &CotPrompting::default(), "r", "q", "k", 10, 1).unwrap_err();
        assert!(matches!(err, CotError::SampleFailed { index: 7, ref failed, .. } if failed == &vec![7]));
        assert!(err.to_string().starts_with("sample 7 of 10 for `r`"));
    }

    #[test]
    fn embeddings_are_unit_and_deterministic() {
        let g = Gateway::scripted(ScriptedFixture::default(), 1);
        let texts: Vec<String> = (0..30).map(|i| format!("text number {i} with words")).collect();
        let v = embed(&g, &texts).unwrap();
        assert_eq!(v.len(), 30);
        for x in &v {
            let n: f64 = x.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        let again = embed(&g, &["same".into(), "same".into()]).unwrap();
        assert_eq!(again[0], again[1]);
        assert!(matches!(embed(&g, &["...".into()]), Err(CotError::ZeroNorm(0))));
    }

    #[test]
    fn kmeans_singletons() {
        let pts: Vec<Vec<f64>> = (0..4).map(|i| unit(&[i as f64, 1.0, 0.5])).collect();
        let c = kmeans(&pts, 4, 3).unwrap();
        assert_eq!(c.assignments, vec![0, 1, 2, 3]);
        assert_eq!(c.medoids, vec![0, 1, 2, 3]);
        assert!(matches!(kmeans(&pts, 5, 3), Err(CotError::TooManyClusters { .. })));
    }

    #[test]
    fn kmeans_duplicates_with_full_k_never_empty() {
        let pts = vec![unit(&[1.0, 0.0]); 4];
        let c = kmeans(&pts, 4, 0).unwrap();
        assert_eq!(c.sizes(), vec![1, 1, 1, 1]);
    }

    #[test]
    fn kmeans_recovers_separated_groups() {
        let mut pts = vec![unit(&[1.0, 0.0, 0.0]); 5];
        pts.extend(vec![unit(&[0.0, 1.0, 0.0]); 5]);
        for seed in 0..20 {
            let c = kmeans(&pts, 2, seed).unwrap();
            assert_eq!(c.assignments, vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1]);
            assert_eq!(c, kmeans(&pts, 2, seed).unwrap());
        }
    }

    #[test]
    fn medoid_cases() {
        let pts = vec![unit(&[1.0, 0.0]), unit(&[0.0, 1.0])];
        let set = ClusterSet {
            assignments: vec![0, 0],
            centroids: vec![vec![0.5, 0.5]],
            medoids: Vec::new(),
        };
        assert_eq!(medoids(&pts, &set), vec![0]);

        let pts = vec![vec![1.0, 0.0], vec![0.5, 0.5], vec![0.0, 1.0]];
        let set = ClusterSet {
            assignments: vec![0, 0, 0],
            centroids: vec![vec![0.5, 0.5]],
            medoids: Vec::new(),
        };
        assert_eq!(medoids(&pts, &set), vec![1]);

        let set = ClusterSet {
            assignments: vec![0, 1, 0],
            centroids: vec![vec![0.5, 0.5], vec![0.5, 0.5]],
            medoids: Vec::new(),
        };
        assert_eq!(medoids(&pts, &set), vec![0, 1]);
    }

    #[test]
    fn cosine_cases() {
        let v = [0.3, -0.4, 1.2];
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((cosine(&v, &neg).unwrap() + 1.0).abs() < 1e-15);
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(CotError::ZeroNorm(0))));
    }

    #[test]
    fn consistency_cases() {
        let m = unit(&[1.0, 2.0, 3.0]);
        let r = consistency_prob(0, 0, &m, &vec![m.clone(); 5], 0.8).unwrap();
        assert_eq!(r.probability, 1.0);

        let near = unit(&[1.0, 2.0, 3.1]);
        let far = unit(&[-3.0, 0.0, 1.0]);
        let mut vs = vec![near.clone(); 7];
        vs.extend(vec![far.clone(); 3]);
        let r = consistency_prob(1, 2, &m, &vs, 0.8).unwrap();
        assert_eq!(r.passed(), 7);
        assert_eq!(r.probability, 0.7);

        let axes: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..4).map(|j| f64::from(u8::from(i == j))).collect())
            .collect();
        let r = consistency_prob(0, 0, &unit(&[1.0, 1.0, 1.0, 1.0]), &axes, 0.999).unwrap();
        assert_eq!(r.probability, 0.0);

        // boundary counts as consistent
        let r = consistency_prob(0, 0, &[1.0, 0.0], &[vec![1.0, 0.0]], 1.0 - 1e-12).unwrap();
        assert_eq!(r.indicators, vec![1]);
    }

    #[test]
    fn infonce_cases() {
        let a = [1.0, 0.0];
        let k = 4;
        let negs = vec![vec![1.0, 0.0]; k];
        let l = infonce_loss(&a, &[1.0, 0.0], &negs, 0.07).unwrap();
        assert!((l - ((k + 1) as f64).ln()).abs() < 1e-12);

        let tau = 0.07;
        let big = infonce_loss(&a, &[50.0, 0.0], &[vec![0.0, 0.0]], 1.0).unwrap();
        assert!(big < 1e-9);
        let far = infonce_loss(&a, &[1.0, 0.0], &[vec![1.0 - 50.0 * tau, 0.0]], tau).unwrap();
        assert!(far < 1e-9);

        let negs = vec![vec![0.2, 0.0], vec![-0.5, 0.0]];
        let mut prev = f64::INFINITY;
        for tau in [2.0, 1.0, 0.5, 0.2, 0.1, 0.07] {
            let l = infonce_loss(&a, &[0.9, 0.0], &negs, tau).unwrap();
            assert!(l < prev);
            prev = l;
        }
        assert!(matches!(
            infonce_loss(&a, &a, &negs, 0.0),
            Err(CotError::BadTemperature(_))
        ));
        assert!(matches!(infonce_loss(&a, &a, &[], 1.0), Err(CotError::NoNegatives)));
    }

    #[test]
    fn infonce_is_shift_invariant() {
        let logits = [3.0, 1.0, -2.0, 0.5];
        let base = infonce_from_logits(&logits);
        for shift in [-1000.0, -3.0, 7.5, 800.0] {
            let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
            assert!((infonce_from_logits(&shifted) - base).abs() < 1e-9);
        }
    }
}
