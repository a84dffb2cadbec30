//! Discrete structural causal models as an exact probabilistic oracle.
//!
//! Interventional ground truth comes from truncated factorization; the
//! back-door, standard front-door and conditional front-door formulas are
//! evaluated from the joint and compared against it.
//!
//! CPT rows are indexed by the parent assignment with parents in lexicographic
//! label order and the first parent most significant.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{self, CausalDag, GraphError, NodeSet};

pub const DEFAULT_STATE_CAP: usize = 10_000_000;
const ROW_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScmError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("node `{0}` needs cardinality >= 2")]
    Cardinality(String),
    #[error("node `{node}`: expected {expected} CPT rows, found {found}")]
    RowCount {
        node: String,
        expected: usize,
        found: usize,
    },
    #[error("node `{node}` row {row}: {reason}")]
    BadRow { node: String, row: usize, reason: String },
    #[error("missing CPT for node `{0}`")]
    MissingCpt(String),
    #[error("state {state} out of range for `{node}`")]
    UnknownState { node: String, state: usize },
    #[error("joint state space of {0} assignments exceeds the cap")]
    StateSpace(usize),
    #[error("{criterion} criterion fails for ({treatment}, {outcome}); refusing to report a causal estimate")]
    CriterionViolation {
        criterion: String,
        treatment: String,
        outcome: String,
    },
    #[error("conditional on a zero-probability context carries positive weight: {0}")]
    UndefinedConditional(String),
}

/// Serialized SCM: a graph spec plus cardinalities and CPT rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScmSpec {
    pub nodes: Vec<String>,
    #[serde(default)]
    pub edges: Vec<(String, String)>,
    #[serde(default)]
    pub latent: Vec<String>,
    /// Defaults to 2 for unlisted nodes.
    #[serde(default)]
    pub cardinality: BTreeMap<String, usize>,
    pub cpt: BTreeMap<String, Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteScm {
    dag: CausalDag,
    cards: Vec<usize>,
    cpts: Vec<Vec<Vec<f64>>>,
}

impl DiscreteScm {
    /// `cards` and `cpts` are keyed by node label.
    pub fn new(
        dag: CausalDag,
        cards: &BTreeMap<String, usize>,
        cpts: &BTreeMap<String, Vec<Vec<f64>>>,
    ) -> Result<Self, ScmError> {
        let n = dag.len();
        let mut card_vec = Vec::with_capacity(n);
        for name in dag.nodes() {
            let c = cards.get(name).copied().unwrap_or(2);
            if c < 2 {
                return Err(ScmError::Cardinality(name.clone()));
            }
            card_vec.push(c);
        }
        let mut cpt_vec = Vec::with_capacity(n);
        for (i, name) in dag.nodes().iter().enumerate() {
            let rows = cpts.get(name).ok_or_else(|| ScmError::MissingCpt(name.clone()))?;
            let expected: usize = dag.parent_indices(i).iter().map(|&p| card_vec[p]).product();
            if rows.len() != expected {
                return Err(ScmError::RowCount {
                    node: name.clone(),
                    expected,
                    found: rows.len(),
                });
            }
            for (r, row) in rows.iter().enumerate() {
                let bad = |reason: String| ScmError::BadRow {
                    node: name.clone(),
                    row: r,
                    reason,
                };
                if row.len() != card_vec[i] {
                    return Err(bad(format!("expected {} entries, found {}", card_vec[i], row.len())));
                }
                if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                    return Err(bad("negative or non-finite entry".into()));
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > ROW_TOLERANCE {
                    return Err(bad(format!("sums to {sum}")));
                }
            }
            cpt_vec.push(rows.clone());
        }
        Ok(DiscreteScm {
            dag,
            cards: card_vec,
            cpts: cpt_vec,
        })
    }

    pub fn from_spec(spec: &ScmSpec) -> Result<Self, ScmError> {
        let dag = CausalDag::new(&spec.nodes, &spec.edges, &spec.latent)?;
        Self::new(dag, &spec.cardinality, &spec.cpt)
    }

    pub fn to_spec(&self) -> ScmSpec {
        let g = self.dag.to_spec();
        ScmSpec {
            nodes: g.nodes,
            edges: g.edges,
            latent: g.latent,
            cardinality: self
                .dag
                .nodes()
                .iter()
                .cloned()
                .zip(self.cards.iter().copied())
                .collect(),
            cpt: self
                .dag
                .nodes()
                .iter()
                .cloned()
                .zip(self.cpts.iter().cloned())
                .collect(),
        }
    }

    pub fn dag(&self) -> &CausalDag {
        &self.dag
    }

    pub fn cardinality(&self, node: &str) -> Result<usize, ScmError> {
        Ok(self.cards[self.dag.idx(node)?])
    }

    pub fn cpt(&self, node: &str) -> Result<&[Vec<f64>], ScmError> {
        Ok(&self.cpts[self.dag.idx(node)?])
    }

    fn state_count(&self) -> Option<usize> {
        self.cards.iter().try_fold(1usize, |acc, &c| acc.checked_mul(c))
    }
}

/// A probability table over a declared list of variables, stored densely with
/// the first variable most significant.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Distribution {
    pub vars: Vec<String>,
    pub cards: Vec<usize>,
    pub probs: Vec<f64>,
}

impl Distribution {
    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }

    fn offset(&self, assignment: &[usize]) -> usize {
        assignment.iter().zip(&self.cards).fold(0, |acc, (&v, &c)| acc * c + v)
    }

    pub fn prob(&self, assignment: &[usize]) -> f64 {
        self.probs[self.offset(assignment)]
    }

    /// Sums out every variable not listed, keeping the listed order.
    pub fn marginal<S: AsRef<str>>(&self, keep: &[S]) -> Result<Distribution, ScmError> {
        let pos: Vec<usize> = keep
            .iter()
            .map(|k| {
                self.vars
                    .iter()
                    .position(|v| v == k.as_ref())
                    .ok_or_else(|| ScmError::Graph(GraphError::UnknownNode(k.as_ref().to_string())))
            })
            .collect::<Result<_, _>>()?;
        let cards: Vec<usize> = pos.iter().map(|&p| self.cards[p]).collect();
        let mut probs = vec![0.0; cards.iter().product()];
        let mut assignment = vec![0usize; self.vars.len()];
        for &p in &self.probs {
            let off = pos.iter().zip(&cards).fold(0, |acc, (&i, &c)| acc * c + assignment[i]);
            probs[off] += p;
            increment(&mut assignment, &self.cards);
        }
        Ok(Distribution {
            vars: pos.iter().map(|&p| self.vars[p].clone()).collect(),
            cards,
            probs,
        })
    }
}

fn increment(assignment: &mut [usize], cards: &[usize]) {
    for i in (0..assignment.len()).rev() {
        assignment[i] += 1;
        if assignment[i] < cards[i] {
            return;
        }
        assignment[i] = 0;
    }
}

/// Full joint by the Markov factorization.
pub fn joint(scm: &DiscreteScm) -> Result<Distribution, ScmError> {
    joint_capped(scm, DEFAULT_STATE_CAP)
}

pub fn joint_capped(scm: &DiscreteScm, cap: usize) -> Result<Distribution, ScmError> {
    let size = scm.state_count().unwrap_or(usize::MAX);
    if size > cap {
        return Err(ScmError::StateSpace(size));
    }
    let order = scm.dag.topo_indices()?;
    let n = scm.dag.len();
    let mut probs = Vec::with_capacity(size);
    let mut assignment = vec![0usize; n];
    for _ in 0..size {
        let mut p = 1.0;
        for &v in &order {
            let row = scm
                .dag
                .parent_indices(v)
                .iter()
                .fold(0, |acc, &u| acc * scm.cards[u] + assignment[u]);
            p *= scm.cpts[v][row][assignment[v]];
            if p == 0.0 {
                break;
            }
        }
        probs.push(p);
        increment(&mut assignment, &scm.cards);
    }
    Ok(Distribution {
        vars: scm.dag.nodes().to_vec(),
        cards: scm.cards.clone(),
        probs,
    })
}

/// `do(node = value)`: the node's incoming edges are cut and its CPT becomes a
/// point mass.
pub fn intervene(scm: &DiscreteScm, node: &str, value: usize) -> Result<DiscreteScm, ScmError> {
    let i = scm.dag.idx(node)?;
    if value >= scm.cards[i] {
        return Err(ScmError::UnknownState {
            node: node.to_string(),
            state: value,
        });
    }
    let dag = graph::mutilate(&scm.dag, &graph::node_set(&[node]), &NodeSet::new())?;
    let mut cpts = scm.cpts.clone();
    let mut row = vec![0.0; scm.cards[i]];
    row[value] = 1.0;
    cpts[i] = vec![row];
    Ok(DiscreteScm {
        dag,
        cards: scm.cards.clone(),
        cpts,
    })
}

/// `P(outcome | do(treatment = q))` for every treatment state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectTable {
    pub treatment: String,
    pub outcome: String,
    /// `rows[q][a]`
    pub rows: Vec<Vec<f64>>,
}

impl EffectTable {
    pub fn max_abs_deviation(&self, other: &EffectTable) -> f64 {
        self.rows
            .iter()
            .zip(&other.rows)
            .flat_map(|(r, s)| r.iter().zip(s).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max)
    }
}

/// Interventional ground truth by truncated factorization.
pub fn interventional(scm: &DiscreteScm, treatment: &str, outcome: &str) -> Result<EffectTable, ScmError> {
    let qc = scm.cardinality(treatment)?;
    scm.cardinality(outcome)?;
    let mut rows = Vec::with_capacity(qc);
    for q in 0..qc {
        let m = joint(&intervene(scm, treatment, q)?)?.marginal(&[outcome])?;
        rows.push(m.probs);
    }
    Ok(EffectTable {
        treatment: treatment.to_string(),
        outcome: outcome.to_string(),
        rows,
    })
}

/// Dense table over `(q, a, z, w)` where `z` and `w` are joint indices over
/// node sets.
struct Grid {
    qc: usize,
    ac: usize,
    zc: usize,
    wc: usize,
    p: Vec<f64>,
}

impl Grid {
    fn build(scm: &DiscreteScm, q: &str, a: &str, z: &NodeSet, w: &NodeSet) -> Result<Self, ScmError> {
        let mut vars: Vec<&str> = vec![q, a];
        vars.extend(z.iter().map(String::as_str));
        vars.extend(w.iter().map(String::as_str));
        let m = joint(scm)?.marginal(&vars)?;
        let card = |set: &NodeSet| -> Result<usize, ScmError> { set.iter().map(|n| scm.cardinality(n)).product() };
        Ok(Grid {
            qc: scm.cardinality(q)?,
            ac: scm.cardinality(a)?,
            zc: card(z)?,
            wc: card(w)?,
            p: m.probs,
        })
    }

    fn at(&self, q: usize, a: usize, z: usize, w: usize) -> f64 {
        self.p[((q * self.ac + a) * self.zc + z) * self.wc + w]
    }

    fn p_w(&self, w: usize) -> f64 {
        let mut s = 0.0;
        for q in 0..self.qc {
            for a in 0..self.ac {
                for z in 0..self.zc {
                    s += self.at(q, a, z, w);
                }
            }
        }
        s
    }

    fn p_qw(&self, q: usize, w: usize) -> f64 {
        let mut s = 0.0;
        for a in 0..self.ac {
            for z in 0..self.zc {
                s += self.at(q, a, z, w);
            }
        }
        s
    }

    fn p_qzw(&self, q: usize, z: usize, w: usize) -> f64 {
        (0..self.ac).map(|a| self.at(q, a, z, w)).sum()
    }
}

/// Evaluates `Σ_w P(w) Σ_z P(z | q, w) Σ_q' P(a | z, q', w) P(q' | w)` without
/// checking any graphical criterion. With an empty `w` this is the standard
/// front-door formula in nested form.
pub fn frontdoor_formula(
    scm: &DiscreteScm,
    q: &str,
    a: &str,
    z: &NodeSet,
    w: &NodeSet,
) -> Result<EffectTable, ScmError> {
    let g = Grid::build(scm, q, a, z, w)?;
    let mut rows = vec![vec![0.0; g.ac]; g.qc];
    for (q0, row) in rows.iter_mut().enumerate() {
        for wi in 0..g.wc {
            let pw = g.p_w(wi);
            if pw == 0.0 {
                continue;
            }
            let pqw = g.p_qw(q0, wi);
            if pqw == 0.0 {
                return Err(ScmError::UndefinedConditional(format!(
                    "P(z | {q}={q0}, w#{wi}) with P(w#{wi}) = {pw}"
                )));
            }
            for zi in 0..g.zc {
                let pz = g.p_qzw(q0, zi, wi) / pqw;
                if pz == 0.0 {
                    continue;
                }
                for q1 in 0..g.qc {
                    let pq1 = g.p_qw(q1, wi) / pw;
                    let weight = pw * pz * pq1;
                    if weight == 0.0 {
                        continue;
                    }
                    let denom = g.p_qzw(q1, zi, wi);
                    if denom == 0.0 {
                        return Err(ScmError::UndefinedConditional(format!(
                            "P({a} | z#{zi}, {q}={q1}, w#{wi}) with weight {weight}"
                        )));
                    }
                    for (ai, slot) in row.iter_mut().enumerate() {
                        *slot += weight * g.at(q1, ai, zi, wi) / denom;
                    }
                }
            }
        }
    }
    Ok(EffectTable {
        treatment: q.to_string(),
        outcome: a.to_string(),
        rows,
    })
}

fn violation(criterion: &str, q: &str, a: &str) -> ScmError {
    ScmError::CriterionViolation {
        criterion: criterion.to_string(),
        treatment: q.to_string(),
        outcome: a.to_string(),
    }
}

/// `Σ_u P(a | q, u) P(u)` after checking the back-door criterion. Latent
/// nodes are allowed in `adjust` because the oracle can see them.
pub fn backdoor_estimate(scm: &DiscreteScm, q: &str, a: &str, adjust: &NodeSet) -> Result<EffectTable, ScmError> {
    if !graph::check_backdoor(&scm.dag, adjust, q, a)?.satisfied {
        return Err(violation("back-door", q, a));
    }
    let g = Grid::build(scm, q, a, &NodeSet::new(), adjust)?;
    let mut rows = vec![vec![0.0; g.ac]; g.qc];
    for (q0, row) in rows.iter_mut().enumerate() {
        for ui in 0..g.wc {
            let pu = g.p_w(ui);
            if pu == 0.0 {
                continue;
            }
            let denom = g.p_qw(q0, ui);
            if denom == 0.0 {
                return Err(ScmError::UndefinedConditional(format!(
                    "P({a} | {q}={q0}, u#{ui}) with P(u#{ui}) = {pu}"
                )));
            }
            for (ai, slot) in row.iter_mut().enumerate() {
                *slot += pu * g.at(q0, ai, 0, ui) / denom;
            }
        }
    }
    Ok(EffectTable {
        treatment: q.to_string(),
        outcome: a.to_string(),
        rows,
    })
}

/// Standard front-door estimate, refused unless `z` satisfies the criterion.
pub fn sfd_estimate(scm: &DiscreteScm, q: &str, a: &str, z: &NodeSet) -> Result<EffectTable, ScmError> {
    if !graph::check_standard_frontdoor(&scm.dag, z, q, a)?.satisfied {
        return Err(violation("standard front-door", q, a));
    }
    frontdoor_formula(scm, q, a, z, &NodeSet::new())
}

/// Conditional front-door estimate from observed quantities only.
pub fn cfd_estimate(scm: &DiscreteScm, q: &str, a: &str, z: &NodeSet, w: &NodeSet) -> Result<EffectTable, ScmError> {
    if !graph::check_conditional_frontdoor(&scm.dag, z, w, q, a)?.satisfied {
        return Err(violation("conditional front-door", q, a));
    }
    frontdoor_formula(scm, q, a, z, w)
}

/// Draws CPTs for `dag`: entries uniform, normalized, clamped to at least
/// `0.01` and renormalized.
pub fn random_scm<R: Rng>(
    dag: &CausalDag,
    cards: &BTreeMap<String, usize>,
    rng: &mut R,
) -> Result<DiscreteScm, ScmError> {
    let card = |n: &str| cards.get(n).copied().unwrap_or(2);
    let mut cpts = BTreeMap::new();
    for (i, name) in dag.nodes().iter().enumerate() {
        let rows: usize = dag.parent_indices(i).iter().map(|&p| card(dag.name(p))).product();
        let k = card(name);
        let table: Vec<Vec<f64>> = (0..rows)
            .map(|_| {
                let raw: Vec<f64> = (0..k).map(|_| rng.gen::<f64>()).collect();
                let s: f64 = raw.iter().sum();
                let clamped: Vec<f64> = raw.iter().map(|x| (x / s).max(0.01)).collect();
                let s: f64 = clamped.iter().sum();
                let mut row: Vec<f64> = clamped.iter().map(|x| x / s).collect();
                // absorb rounding so the row sums to one as tightly as possible
                let head: f64 = row[..k - 1].iter().sum();
                row[k - 1] = 1.0 - head;
                row
            })
            .collect();
        cpts.insert(name.clone(), table);
    }
    DiscreteScm::new(dag.clone(), cards, &cpts)
}

/// Seed of a knowledge-graph SCM on which the front-door formula that ignores
/// the knowledge node is visibly biased.
pub const BIAS_FIXTURE_SEED: u64 = 2;
/// Max deviation of that biased evaluation from the interventional truth.
pub const BIAS_FIXTURE_DEVIATION: f64 = 3.173_892_536_106_126_5e-2;

/// A binary SCM over the knowledge-intensive reasoning graph with random CPTs.
pub fn random_knowledge_scm(seed: u64) -> DiscreteScm {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    random_scm(&graph::reference::knowledge_intensive(), &BTreeMap::new(), &mut rng)
        .expect("reference graph yields a valid SCM")
}
