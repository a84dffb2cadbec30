//! Causal DAGs and graphical identification.
//!
//! Provides path enumeration, d-separation, mutilated graphs, the back-door,
//! standard front-door and conditional front-door criteria, and applicability
//! checks for the three rules of do-calculus.
//!
//! Latent nodes take part in paths and d-separation like any other node. They
//! are only refused where a caller asks to condition or adjust on them.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Upper bound on enumerated simple paths before giving up.
pub const DEFAULT_PATH_CAP: usize = 10_000;

pub type NodeSet = BTreeSet<String>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("duplicate node `{0}`")]
    DuplicateNode(String),
    #[error("self-loop on `{0}`")]
    SelfLoop(String),
    #[error("duplicate edge {0} -> {1}")]
    DuplicateEdge(String, String),
    #[error("graph contains a cycle through `{0}`")]
    Cycle(String),
    #[error("node sets must be pairwise disjoint; `{0}` appears twice")]
    NotDisjoint(String),
    #[error("cannot condition on latent node `{0}`")]
    LatentConditioning(String),
    #[error("path enumeration exceeded the cap of {0} paths")]
    PathLimit(usize),
    #[error("endpoints must differ (`{0}`)")]
    SameEndpoints(String),
    #[error("missing required node `{0}`")]
    MissingNode(String),
}

/// Serialized form of a graph: `nodes`, `edges` as `[from, to]` pairs, `latent`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct GraphSpec {
    pub nodes: Vec<String>,
    #[serde(default)]
    pub edges: Vec<(String, String)>,
    #[serde(default)]
    pub latent: Vec<String>,
}

/// A directed acyclic graph over string-labelled nodes.
///
/// Nodes are stored in lexicographic order and every query returns results in
/// that order, so reports are byte-stable.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CausalDag {
    names: Vec<String>,
    index: BTreeMap<String, usize>,
    parents: Vec<BTreeSet<usize>>,
    children: Vec<BTreeSet<usize>>,
    latent: BTreeSet<usize>,
}

impl CausalDag {
    pub fn new<S: AsRef<str>>(nodes: &[S], edges: &[(S, S)], latent: &[S]) -> Result<Self, GraphError> {
        let mut sorted: Vec<String> = nodes.iter().map(|n| n.as_ref().to_string()).collect();
        sorted.sort();
        for w in sorted.windows(2) {
            if w[0] == w[1] {
                return Err(GraphError::DuplicateNode(w[0].clone()));
            }
        }
        let index: BTreeMap<String, usize> = sorted.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        let n = sorted.len();
        let mut parents = vec![BTreeSet::new(); n];
        let mut children = vec![BTreeSet::new(); n];
        for (from, to) in edges {
            let (from, to) = (from.as_ref(), to.as_ref());
            let f = *index
                .get(from)
                .ok_or_else(|| GraphError::UnknownNode(from.to_string()))?;
            let t = *index.get(to).ok_or_else(|| GraphError::UnknownNode(to.to_string()))?;
            if f == t {
                return Err(GraphError::SelfLoop(from.to_string()));
            }
            if !children[f].insert(t) {
                return Err(GraphError::DuplicateEdge(from.to_string(), to.to_string()));
            }
            parents[t].insert(f);
        }
        let mut latent_idx = BTreeSet::new();
        for l in latent {
            let l = l.as_ref();
            latent_idx.insert(*index.get(l).ok_or_else(|| GraphError::UnknownNode(l.to_string()))?);
        }
        let dag = CausalDag {
            names: sorted,
            index,
            parents,
            children,
            latent: latent_idx,
        };
        dag.topological_order()?;
        Ok(dag)
    }

    pub fn from_spec(spec: &GraphSpec) -> Result<Self, GraphError> {
        Self::new(&spec.nodes, &spec.edges, &spec.latent)
    }

    pub fn to_spec(&self) -> GraphSpec {
        GraphSpec {
            nodes: self.names.clone(),
            edges: self.edges(),
            latent: self.latent_nodes().into_iter().collect(),
        }
    }

    pub fn nodes(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn contains(&self, node: &str) -> bool {
        self.index.contains_key(node)
    }

    /// All edges as `(from, to)` pairs in lexicographic order.
    pub fn edges(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for (f, kids) in self.children.iter().enumerate() {
            for &t in kids {
                out.push((self.names[f].clone(), self.names[t].clone()));
            }
        }
        out
    }

    pub fn has_edge(&self, from: &str, to: &str) -> bool {
        match (self.index.get(from), self.index.get(to)) {
            (Some(&f), Some(&t)) => self.children[f].contains(&t),
            _ => false,
        }
    }

    pub fn latent_nodes(&self) -> NodeSet {
        self.latent.iter().map(|&i| self.names[i].clone()).collect()
    }

    pub fn is_latent(&self, node: &str) -> bool {
        self.index.get(node).map(|i| self.latent.contains(i)).unwrap_or(false)
    }

    pub fn parents(&self, node: &str) -> Result<NodeSet, GraphError> {
        let i = self.idx(node)?;
        Ok(self.parents[i].iter().map(|&p| self.names[p].clone()).collect())
    }

    pub fn children(&self, node: &str) -> Result<NodeSet, GraphError> {
        let i = self.idx(node)?;
        Ok(self.children[i].iter().map(|&c| self.names[c].clone()).collect())
    }

    /// Returns a copy with one extra edge, failing if it would create a cycle.
    pub fn with_edge(&self, from: &str, to: &str) -> Result<Self, GraphError> {
        let mut edges = self.edges();
        edges.push((from.to_string(), to.to_string()));
        let latent: Vec<String> = self.latent_nodes().into_iter().collect();
        Self::new(&self.names, &edges, &latent)
    }

    /// Returns the subgraph obtained by deleting `node` and its incident edges.
    pub fn without_node(&self, node: &str) -> Result<Self, GraphError> {
        self.idx(node)?;
        let nodes: Vec<String> = self.names.iter().filter(|n| *n != node).cloned().collect();
        let edges: Vec<(String, String)> = self
            .edges()
            .into_iter()
            .filter(|(f, t)| f != node && t != node)
            .collect();
        let latent: Vec<String> = self.latent_nodes().into_iter().filter(|n| n != node).collect();
        Self::new(&nodes, &edges, &latent)
    }

    pub fn topological_order(&self) -> Result<Vec<String>, GraphError> {
        Ok(self
            .topo_indices()?
            .into_iter()
            .map(|i| self.names[i].clone())
            .collect())
    }

    pub(crate) fn topo_indices(&self) -> Result<Vec<usize>, GraphError> {
        let n = self.names.len();
        let mut indeg: Vec<usize> = self.parents.iter().map(|p| p.len()).collect();
        let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(&i) = ready.iter().next() {
            ready.remove(&i);
            order.push(i);
            for &c in &self.children[i] {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    ready.insert(c);
                }
            }
        }
        if order.len() != n {
            let stuck = (0..n).find(|&i| indeg[i] > 0).unwrap_or(0);
            return Err(GraphError::Cycle(self.names[stuck].clone()));
        }
        Ok(order)
    }

    pub(crate) fn idx(&self, node: &str) -> Result<usize, GraphError> {
        self.index
            .get(node)
            .copied()
            .ok_or_else(|| GraphError::UnknownNode(node.to_string()))
    }

    pub(crate) fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub(crate) fn parent_indices(&self, i: usize) -> &BTreeSet<usize> {
        &self.parents[i]
    }

    fn idx_set(&self, set: &NodeSet) -> Result<BTreeSet<usize>, GraphError> {
        set.iter().map(|n| self.idx(n)).collect()
    }

    fn names_of(&self, set: &BTreeSet<usize>) -> NodeSet {
        set.iter().map(|&i| self.names[i].clone()).collect()
    }

    fn descendants_idx(&self, start: usize) -> BTreeSet<usize> {
        let mut seen = BTreeSet::new();
        let mut stack = vec![start];
        while let Some(v) = stack.pop() {
            for &c in &self.children[v] {
                if seen.insert(c) {
                    stack.push(c);
                }
            }
        }
        seen
    }

    /// Nodes reachable from `node` by a directed path, excluding `node`.
    pub fn descendants(&self, node: &str) -> Result<NodeSet, GraphError> {
        let i = self.idx(node)?;
        Ok(self.names_of(&self.descendants_idx(i)))
    }
}

/// Builds a set of node labels from string slices.
pub fn node_set<S: AsRef<str>>(items: &[S]) -> NodeSet {
    items.iter().map(|s| s.as_ref().to_string()).collect()
}

/// Removes edges into `cut_incoming` and out of `cut_outgoing`.
pub fn mutilate(dag: &CausalDag, cut_incoming: &NodeSet, cut_outgoing: &NodeSet) -> Result<CausalDag, GraphError> {
    let inc = dag.idx_set(cut_incoming)?;
    let out = dag.idx_set(cut_outgoing)?;
    let mut res = dag.clone();
    for v in 0..res.names.len() {
        if inc.contains(&v) {
            let ps: Vec<usize> = res.parents[v].iter().copied().collect();
            for p in ps {
                res.children[p].remove(&v);
            }
            res.parents[v].clear();
        }
        if out.contains(&v) {
            let cs: Vec<usize> = res.children[v].iter().copied().collect();
            for c in cs {
                res.parents[c].remove(&v);
            }
            res.children[v].clear();
        }
    }
    Ok(res)
}

/// All nodes with a directed path into some target, excluding the targets.
pub fn ancestors(dag: &CausalDag, targets: &NodeSet) -> Result<NodeSet, GraphError> {
    let t = dag.idx_set(targets)?;
    let mut seen = BTreeSet::new();
    let mut stack: Vec<usize> = t.iter().copied().collect();
    while let Some(v) = stack.pop() {
        for &p in &dag.parents[v] {
            if seen.insert(p) {
                stack.push(p);
            }
        }
    }
    let found: BTreeSet<usize> = seen.difference(&t).copied().collect();
    Ok(dag.names_of(&found))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Direction {
    /// `nodes[i] -> nodes[i + 1]`
    Forward,
    /// `nodes[i] <- nodes[i + 1]`
    Backward,
}

/// A simple path with the orientation of each traversed edge.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GraphPath {
    pub nodes: Vec<String>,
    pub steps: Vec<Direction>,
}

impl GraphPath {
    pub fn is_directed(&self) -> bool {
        self.steps.iter().all(|d| *d == Direction::Forward)
    }

    pub fn starts_with_incoming(&self) -> bool {
        self.steps.first() == Some(&Direction::Backward)
    }

    /// Interior nodes where both adjacent edges point inward.
    pub fn colliders(&self) -> Vec<&str> {
        (1..self.nodes.len().saturating_sub(1))
            .filter(|&i| self.steps[i - 1] == Direction::Forward && self.steps[i] == Direction::Backward)
            .map(|i| self.nodes[i].as_str())
            .collect()
    }

    /// Checks that nodes are distinct and that every step is an edge of `dag`.
    pub fn is_valid_in(&self, dag: &CausalDag) -> bool {
        if self.nodes.len() != self.steps.len() + 1 || self.nodes.is_empty() {
            return false;
        }
        let distinct: BTreeSet<&String> = self.nodes.iter().collect();
        if distinct.len() != self.nodes.len() {
            return false;
        }
        self.steps.iter().enumerate().all(|(i, d)| match d {
            Direction::Forward => dag.has_edge(&self.nodes[i], &self.nodes[i + 1]),
            Direction::Backward => dag.has_edge(&self.nodes[i + 1], &self.nodes[i]),
        })
    }
}

impl fmt::Display for GraphPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, n) in self.nodes.iter().enumerate() {
            if i > 0 {
                let arrow = match self.steps[i - 1] {
                    Direction::Forward => "→",
                    Direction::Backward => "←",
                };
                f.write_str(arrow)?;
            }
            f.write_str(n)?;
        }
        Ok(())
    }
}

/// Every simple undirected path between `x` and `y`, lexicographic by node sequence.
pub fn enumerate_paths(dag: &CausalDag, x: &str, y: &str) -> Result<Vec<GraphPath>, GraphError> {
    enumerate_paths_capped(dag, x, y, DEFAULT_PATH_CAP)
}

pub fn enumerate_paths_capped(dag: &CausalDag, x: &str, y: &str, cap: usize) -> Result<Vec<GraphPath>, GraphError> {
    let xi = dag.idx(x)?;
    let yi = dag.idx(y)?;
    if xi == yi {
        return Err(GraphError::SameEndpoints(x.to_string()));
    }
    let mut out = Vec::new();
    let mut on_path = vec![false; dag.len()];
    let mut nodes = vec![xi];
    let mut steps = Vec::new();
    on_path[xi] = true;
    dfs_paths(dag, yi, &mut on_path, &mut nodes, &mut steps, &mut out, cap)?;
    out.sort();
    Ok(out)
}

fn neighbours(dag: &CausalDag, v: usize) -> Vec<(usize, Direction)> {
    let mut nb: Vec<(usize, Direction)> = dag.children[v]
        .iter()
        .map(|&c| (c, Direction::Forward))
        .chain(dag.parents[v].iter().map(|&p| (p, Direction::Backward)))
        .collect();
    nb.sort_by(|a, b| dag.names[a.0].cmp(&dag.names[b.0]));
    nb
}

fn dfs_paths(
    dag: &CausalDag,
    target: usize,
    on_path: &mut [bool],
    nodes: &mut Vec<usize>,
    steps: &mut Vec<Direction>,
    out: &mut Vec<GraphPath>,
    cap: usize,
) -> Result<(), GraphError> {
    let v = *nodes.last().expect("path is never empty");
    for (w, d) in neighbours(dag, v) {
        if on_path[w] {
            continue;
        }
        nodes.push(w);
        steps.push(d);
        if w == target {
            if out.len() >= cap {
                return Err(GraphError::PathLimit(cap));
            }
            out.push(GraphPath {
                nodes: nodes.iter().map(|&i| dag.names[i].clone()).collect(),
                steps: steps.clone(),
            });
        } else {
            on_path[w] = true;
            dfs_paths(dag, target, on_path, nodes, steps, out, cap)?;
            on_path[w] = false;
        }
        nodes.pop();
        steps.pop();
    }
    Ok(())
}

/// Whether `path` is blocked by conditioning on `given`.
///
/// A collider opens iff it or one of its descendants is in `given`; a
/// non-collider blocks iff it is in `given`.
pub fn is_blocked(dag: &CausalDag, path: &GraphPath, given: &NodeSet) -> Result<bool, GraphError> {
    for i in 1..path.nodes.len().saturating_sub(1) {
        let v = &path.nodes[i];
        let collider = path.steps[i - 1] == Direction::Forward && path.steps[i] == Direction::Backward;
        if collider {
            let opened = given.contains(v) || dag.descendants(v)?.iter().any(|d| given.contains(d));
            if !opened {
                return Ok(true);
            }
        } else if given.contains(v) {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Paths from `x` to `y` whose first edge points into `x`.
pub fn backdoor_paths(dag: &CausalDag, x: &str, y: &str) -> Result<Vec<GraphPath>, GraphError> {
    Ok(enumerate_paths(dag, x, y)?
        .into_iter()
        .filter(GraphPath::starts_with_incoming)
        .collect())
}

/// Outcome of a d-separation query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Separation {
    pub separated: bool,
    /// Unblocked paths, only populated when `separated` is false.
    pub witnesses: Vec<GraphPath>,
}

fn check_disjoint(sets: &[&NodeSet]) -> Result<(), GraphError> {
    let mut seen = BTreeSet::new();
    for s in sets {
        for n in s.iter() {
            if !seen.insert(n) {
                return Err(GraphError::NotDisjoint(n.clone()));
            }
        }
    }
    Ok(())
}

/// Reachability-based d-separation test (Bayes-ball).
pub fn d_separated_fast(dag: &CausalDag, xs: &NodeSet, ys: &NodeSet, zs: &NodeSet) -> Result<bool, GraphError> {
    check_disjoint(&[xs, ys, zs])?;
    let x = dag.idx_set(xs)?;
    let y = dag.idx_set(ys)?;
    let z = dag.idx_set(zs)?;
    // nodes that are in Z or have a descendant in Z
    let mut z_anc: BTreeSet<usize> = z.clone();
    let mut stack: Vec<usize> = z.iter().copied().collect();
    while let Some(v) = stack.pop() {
        for &p in &dag.parents[v] {
            if z_anc.insert(p) {
                stack.push(p);
            }
        }
    }
    // state: (node, arrived_from_child) where "up" means travelling against edges
    let mut visited: BTreeSet<(usize, bool)> = BTreeSet::new();
    let mut queue: VecDeque<(usize, bool)> = x.iter().map(|&v| (v, true)).collect();
    while let Some((v, up)) = queue.pop_front() {
        if !visited.insert((v, up)) {
            continue;
        }
        if !z.contains(&v) && y.contains(&v) {
            return Ok(false);
        }
        if up {
            if !z.contains(&v) {
                for &p in &dag.parents[v] {
                    queue.push_back((p, true));
                }
                for &c in &dag.children[v] {
                    queue.push_back((c, false));
                }
            }
        } else {
            if !z.contains(&v) {
                for &c in &dag.children[v] {
                    queue.push_back((c, false));
                }
            }
            if z_anc.contains(&v) {
                for &p in &dag.parents[v] {
                    queue.push_back((p, true));
                }
            }
        }
    }
    Ok(true)
}

/// d-separation of `xs` and `ys` given `zs`, with unblocked witness paths on failure.
pub fn d_separated(dag: &CausalDag, xs: &NodeSet, ys: &NodeSet, zs: &NodeSet) -> Result<Separation, GraphError> {
    if d_separated_fast(dag, xs, ys, zs)? {
        return Ok(Separation {
            separated: true,
            witnesses: Vec::new(),
        });
    }
    let mut witnesses = Vec::new();
    for x in xs {
        for y in ys {
            for p in enumerate_paths(dag, x, y)? {
                // paths through other members of X or Y are subsumed by shorter ones
                let interior_hits = p.nodes[1..p.nodes.len() - 1]
                    .iter()
                    .any(|n| xs.contains(n) || ys.contains(n));
                if !interior_hits && !is_blocked(dag, &p, zs)? {
                    witnesses.push(p);
                }
            }
        }
    }
    witnesses.sort();
    Ok(Separation {
        separated: false,
        witnesses,
    })
}

/// Verdict of one numbered condition of a criterion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConditionVerdict {
    pub id: String,
    pub description: String,
    pub holds: bool,
    pub witnesses: Vec<GraphPath>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CriterionReport {
    pub criterion: String,
    pub satisfied: bool,
    pub conditions: Vec<ConditionVerdict>,
}

impl CriterionReport {
    fn from_conditions(criterion: &str, conditions: Vec<ConditionVerdict>) -> Self {
        CriterionReport {
            criterion: criterion.to_string(),
            satisfied: conditions.iter().all(|c| c.holds),
            conditions,
        }
    }

    pub fn condition(&self, id: &str) -> Option<&ConditionVerdict> {
        self.conditions.iter().find(|c| c.id == id)
    }

    /// All witness paths across conditions.
    pub fn witnesses(&self) -> Vec<&GraphPath> {
        self.conditions.iter().flat_map(|c| c.witnesses.iter()).collect()
    }
}

impl fmt::Display for CriterionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{}: {}",
            self.criterion,
            if self.satisfied { "SATISFIED" } else { "VIOLATED" }
        )?;
        for c in &self.conditions {
            writeln!(
                f,
                "  ({}) {} ... {}",
                c.id,
                c.description,
                if c.holds { "ok" } else { "FAIL" }
            )?;
            for w in &c.witnesses {
                writeln!(f, "      witness: {w}")?;
            }
        }
        Ok(())
    }
}

fn refuse_latent(dag: &CausalDag, set: &NodeSet) -> Result<(), GraphError> {
    for n in set {
        dag.idx(n)?;
        if dag.is_latent(n) {
            return Err(GraphError::LatentConditioning(n.clone()));
        }
    }
    Ok(())
}

fn interception(dag: &CausalDag, mediators: &NodeSet, x: &str, y: &str) -> Result<ConditionVerdict, GraphError> {
    let witnesses: Vec<GraphPath> = enumerate_paths(dag, x, y)?
        .into_iter()
        .filter(|p| p.is_directed())
        .filter(|p| !p.nodes.iter().any(|n| mediators.contains(n)))
        .collect();
    Ok(ConditionVerdict {
        id: "1".into(),
        description: format!("mediator set intercepts all directed paths {x} to {y}"),
        holds: witnesses.is_empty(),
        witnesses,
    })
}

fn unblocked_backdoors(dag: &CausalDag, from: &str, to: &str, given: &NodeSet) -> Result<Vec<GraphPath>, GraphError> {
    let mut out = Vec::new();
    for p in backdoor_paths(dag, from, to)? {
        if !is_blocked(dag, &p, given)? {
            out.push(p);
        }
    }
    Ok(out)
}

fn frontdoor_conditions(
    dag: &CausalDag,
    mediators: &NodeSet,
    conditioning: &NodeSet,
    x: &str,
    y: &str,
) -> Result<Vec<ConditionVerdict>, GraphError> {
    let mut c2 = Vec::new();
    for z in mediators {
        c2.extend(unblocked_backdoors(dag, x, z, conditioning)?);
    }
    let mut given3 = conditioning.clone();
    given3.insert(x.to_string());
    let mut c3 = Vec::new();
    for z in mediators {
        c3.extend(unblocked_backdoors(dag, z, y, &given3)?);
    }
    let w_label = if conditioning.is_empty() {
        "unconditionally".to_string()
    } else {
        format!("by {}", fmt_set(conditioning))
    };
    Ok(vec![
        interception(dag, mediators, x, y)?,
        ConditionVerdict {
            id: "2".into(),
            description: format!("back-door paths {x} to mediators blocked {w_label}"),
            holds: c2.is_empty(),
            witnesses: c2,
        },
        ConditionVerdict {
            id: "3".into(),
            description: format!("back-door paths mediators to {y} blocked by {}", fmt_set(&given3)),
            holds: c3.is_empty(),
            witnesses: c3,
        },
    ])
}

pub(crate) fn fmt_set(set: &NodeSet) -> String {
    format!("{{{}}}", set.iter().cloned().collect::<Vec<_>>().join(","))
}

fn check_pair(dag: &CausalDag, x: &str, y: &str) -> Result<(), GraphError> {
    dag.idx(x)?;
    dag.idx(y)?;
    if x == y {
        return Err(GraphError::SameEndpoints(x.to_string()));
    }
    Ok(())
}

/// The back-door criterion for `adjust` relative to `(x, y)`. Latent nodes are
/// allowed in `adjust`; callers that can observe them (the SCM oracle) use this.
pub fn check_backdoor(dag: &CausalDag, adjust: &NodeSet, x: &str, y: &str) -> Result<CriterionReport, GraphError> {
    check_pair(dag, x, y)?;
    check_disjoint(&[adjust, &node_set(&[x, y])])?;
    dag.idx_set(adjust)?;
    let desc = dag.descendants(x)?;
    let bad: Vec<&String> = adjust.iter().filter(|a| desc.contains(*a)).collect();
    let c2 = unblocked_backdoors(dag, x, y, adjust)?;
    Ok(CriterionReport::from_conditions(
        "back-door",
        vec![
            ConditionVerdict {
                id: "1".into(),
                description: format!(
                    "no adjustment node descends from {x}{}",
                    if bad.is_empty() {
                        String::new()
                    } else {
                        format!(
                            " (offending: {})",
                            bad.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(",")
                        )
                    }
                ),
                holds: bad.is_empty(),
                witnesses: Vec::new(),
            },
            ConditionVerdict {
                id: "2".into(),
                description: format!("adjustment set blocks every back-door path {x} to {y}"),
                holds: c2.is_empty(),
                witnesses: c2,
            },
        ],
    ))
}

/// The standard front-door criterion for `mediators` relative to `(x, y)`.
pub fn check_standard_frontdoor(
    dag: &CausalDag,
    mediators: &NodeSet,
    x: &str,
    y: &str,
) -> Result<CriterionReport, GraphError> {
    check_pair(dag, x, y)?;
    check_disjoint(&[mediators, &node_set(&[x, y])])?;
    refuse_latent(dag, mediators)?;
    let conds = frontdoor_conditions(dag, mediators, &NodeSet::new(), x, y)?;
    Ok(CriterionReport::from_conditions("standard front-door", conds))
}

/// The conditional front-door criterion for `mediators` with conditioning set
/// `conditioning` relative to `(x, y)`.
pub fn check_conditional_frontdoor(
    dag: &CausalDag,
    mediators: &NodeSet,
    conditioning: &NodeSet,
    x: &str,
    y: &str,
) -> Result<CriterionReport, GraphError> {
    check_pair(dag, x, y)?;
    check_disjoint(&[mediators, conditioning, &node_set(&[x, y])])?;
    refuse_latent(dag, conditioning)?;
    refuse_latent(dag, mediators)?;
    let conds = frontdoor_conditions(dag, mediators, conditioning, x, y)?;
    Ok(CriterionReport::from_conditions("conditional front-door", conds))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DoRule {
    /// Insertion/deletion of observations.
    One,
    /// Action/observation exchange.
    Two,
    /// Insertion/deletion of actions.
    Three,
}

impl DoRule {
    pub fn number(self) -> u8 {
        match self {
            DoRule::One => 1,
            DoRule::Two => 2,
            DoRule::Three => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleCheck {
    pub applicable: bool,
    pub graph: CausalDag,
    pub separation: Separation,
}

/// Tests the graphical side condition of a do-calculus rule:
/// `(outcome ⫫ z_set | do_set ∪ w_set)` in the rule's mutilated graph.
pub fn rule_applicable(
    dag: &CausalDag,
    rule: DoRule,
    do_set: &NodeSet,
    z_set: &NodeSet,
    w_set: &NodeSet,
    outcome: &NodeSet,
) -> Result<RuleCheck, GraphError> {
    check_disjoint(&[do_set, z_set, w_set, outcome])?;
    let graph = match rule {
        DoRule::One => mutilate(dag, do_set, &NodeSet::new())?,
        DoRule::Two => mutilate(dag, do_set, z_set)?,
        DoRule::Three => {
            let cut = mutilate(dag, do_set, &NodeSet::new())?;
            let anc = ancestors(&cut, w_set)?;
            let mut incoming: NodeSet = z_set.difference(&anc).cloned().collect();
            incoming.extend(do_set.iter().cloned());
            mutilate(dag, &incoming, &NodeSet::new())?
        }
    };
    let given: NodeSet = do_set.union(w_set).cloned().collect();
    let separation = d_separated(&graph, outcome, z_set, &given)?;
    Ok(RuleCheck {
        applicable: separation.separated,
        graph,
        separation,
    })
}

/// One step of the conditional front-door derivation audit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AuditStep {
    pub description: String,
    pub rule: u8,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DerivationAudit {
    pub steps: Vec<AuditStep>,
}

impl DerivationAudit {
    pub fn passed(&self) -> bool {
        self.steps.iter().all(|s| s.holds)
    }
}

/// Re-checks every rule application used to derive the conditional front-door
/// formula for query `Q`, chain of thought `C`, knowledge `E` and answer `A`.
pub fn audit_cfd_derivation(dag: &CausalDag) -> Result<DerivationAudit, GraphError> {
    for n in ["Q", "A", "C", "E"] {
        if !dag.contains(n) {
            return Err(GraphError::MissingNode(n.to_string()));
        }
    }
    let s = |x: &[&str]| node_set(x);
    let checks = [
        (
            "P(A|do(Q),c,e) = P(A|do(Q),do(c),e): (A ⫫ C | Q,E) with edges into Q and out of C removed",
            DoRule::Two,
            s(&["Q"]),
            s(&["C"]),
            s(&["E"]),
            s(&["A"]),
        ),
        (
            "P(A|do(Q),do(c),e) = P(A|do(c),e): (A ⫫ Q | C,E) with edges into C and into Q(E) removed",
            DoRule::Three,
            s(&["C"]),
            s(&["Q"]),
            s(&["E"]),
            s(&["A"]),
        ),
        (
            "P(A|do(c),q,e) = P(A|c,q,e): (A ⫫ C | Q,E) with edges out of C removed",
            DoRule::Two,
            NodeSet::new(),
            s(&["C"]),
            s(&["Q", "E"]),
            s(&["A"]),
        ),
        (
            "P(q|do(c),e) = P(q|e): (Q ⫫ C | E) with edges into C(E) removed",
            DoRule::Three,
            NodeSet::new(),
            s(&["C"]),
            s(&["E"]),
            s(&["Q"]),
        ),
    ];
    let mut steps = Vec::new();
    for (desc, rule, d, z, w, o) in checks {
        let r = rule_applicable(dag, rule, &d, &z, &w, &o)?;
        steps.push(AuditStep {
            description: desc.to_string(),
            rule: rule.number(),
            holds: r.applicable,
        });
    }
    Ok(DerivationAudit { steps })
}

/// Reference graphs: query `Q`, answer `A`, chain of thought `C`, knowledge
/// `E`, latent bias `U`.
pub mod reference {
    use super::CausalDag;

    /// Direct reasoning with latent confounding.
    pub fn direct() -> CausalDag {
        CausalDag::new(&["Q", "A", "U"], &[("U", "Q"), ("U", "A"), ("Q", "A")], &["U"]).expect("valid reference graph")
    }

    /// Reasoning through a chain of thought.
    pub fn chain_of_thought() -> CausalDag {
        CausalDag::new(
            &["Q", "A", "C", "U"],
            &[("U", "Q"), ("U", "A"), ("Q", "C"), ("C", "A")],
            &["U"],
        )
        .expect("valid reference graph")
    }

    /// Chain of thought with external knowledge confounding query and reasoning.
    pub fn knowledge_intensive() -> CausalDag {
        CausalDag::new(
            &["Q", "A", "C", "E", "U"],
            &[("U", "Q"), ("U", "A"), ("E", "Q"), ("E", "C"), ("Q", "C"), ("C", "A")],
            &["U"],
        )
        .expect("valid reference graph")
    }
}

#[cfg(test)]
mod tests {
    use super::reference::*;
    use super::*;

    fn s(x: &[&str]) -> NodeSet {
        node_set(x)
    }

    fn edge_set(d: &CausalDag) -> BTreeSet<(String, String)> {
        d.edges().into_iter().collect()
    }

    fn pairs(x: &[(&str, &str)]) -> BTreeSet<(String, String)> {
        x.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn rejects_malformed_graphs() {
        assert!(matches!(
            CausalDag::new(&["A", "B"], &[("A", "B"), ("B", "A")], &[]),
            Err(GraphError::Cycle(_))
        ));
        assert!(matches!(
            CausalDag::new(&["A"], &[("A", "A")], &[]),
            Err(GraphError::SelfLoop(_))
        ));
        assert!(matches!(
            CausalDag::new(&["A", "B"], &[("A", "B"), ("A", "B")], &[]),
            Err(GraphError::DuplicateEdge(..))
        ));
        assert!(matches!(
            CausalDag::new(&["A"], &[("A", "X")], &[]),
            Err(GraphError::UnknownNode(_))
        ));
        assert!(matches!(
            CausalDag::new(&["A"], &[], &["Z"]),
            Err(GraphError::UnknownNode(_))
        ));
    }

    #[test]
    fn labels_are_case_sensitive() {
        let d = CausalDag::new(&["e", "E"], &[("e", "E")], &[]).unwrap();
        assert_eq!(d.len(), 2);
    }

    #[test]
    fn mutilate_cases() {
        let g = knowledge_intensive();
        let cut = mutilate(&g, &s(&["Q"]), &NodeSet::new()).unwrap();
        assert_eq!(edge_set(&cut), pairs(&[("U", "A"), ("E", "C"), ("Q", "C"), ("C", "A")]));
        assert_eq!(cut.nodes(), g.nodes());
        assert_eq!(mutilate(&g, &NodeSet::new(), &NodeSet::new()).unwrap(), g);
        let out = mutilate(&g, &NodeSet::new(), &s(&["C"])).unwrap();
        let mut expect = edge_set(&g);
        expect.remove(&("C".to_string(), "A".to_string()));
        assert_eq!(edge_set(&out), expect);
        assert!(matches!(
            mutilate(&g, &s(&["X"]), &NodeSet::new()),
            Err(GraphError::UnknownNode(_))
        ));
    }

    #[test]
    fn ancestors_cases() {
        let g = knowledge_intensive();
        assert_eq!(ancestors(&g, &s(&["A"])).unwrap(), s(&["U", "E", "Q", "C"]));
        assert!(ancestors(&g, &s(&["U"])).unwrap().is_empty());
        assert_eq!(ancestors(&g, &s(&["C"])).unwrap(), s(&["E", "Q", "U"]));
    }

    fn show(paths: &[GraphPath]) -> Vec<String> {
        paths.iter().map(|p| p.to_string()).collect()
    }

    #[test]
    fn enumerate_paths_cases() {
        assert_eq!(show(&enumerate_paths(&direct(), "Q", "A").unwrap()), ["Q→A", "Q←U→A"]);
        assert_eq!(
            show(&enumerate_paths(&chain_of_thought(), "Q", "A").unwrap()),
            ["Q→C→A", "Q←U→A"]
        );
        let iso = CausalDag::new(&["X", "Y"], &[], &[]).unwrap();
        assert!(enumerate_paths(&iso, "X", "Y").unwrap().is_empty());
        assert!(matches!(
            enumerate_paths(&iso, "X", "X"),
            Err(GraphError::SameEndpoints(_))
        ));
    }

    #[test]
    fn path_cap_is_enforced() {
        // complete DAG on 9 nodes has far more than 50 paths between its ends
        let names: Vec<String> = (0..9).map(|i| format!("N{i}")).collect();
        let mut edges = Vec::new();
        for i in 0..9 {
            for j in i + 1..9 {
                edges.push((names[i].clone(), names[j].clone()));
            }
        }
        let g = CausalDag::new(&names, &edges, &[]).unwrap();
        assert_eq!(
            enumerate_paths_capped(&g, "N0", "N8", 50),
            Err(GraphError::PathLimit(50))
        );
    }

    #[test]
    fn d_separation_cases() {
        let r = d_separated(&direct(), &s(&["Q"]), &s(&["A"]), &NodeSet::new()).unwrap();
        assert!(!r.separated);
        assert_eq!(show(&r.witnesses), ["Q→A", "Q←U→A"]);
        let cut = mutilate(&knowledge_intensive(), &s(&["C"]), &NodeSet::new()).unwrap();
        assert!(d_separated(&cut, &s(&["Q"]), &s(&["C"]), &s(&["E"])).unwrap().separated);
        let chain = CausalDag::new(&["X", "M", "Y"], &[("X", "M"), ("M", "Y")], &[]).unwrap();
        assert!(
            d_separated(&chain, &s(&["X"]), &s(&["Y"]), &s(&["M"]))
                .unwrap()
                .separated
        );
        assert!(matches!(
            d_separated(&chain, &s(&["X"]), &s(&["X"]), &NodeSet::new()),
            Err(GraphError::NotDisjoint(_))
        ));
    }

    #[test]
    fn collider_opens_through_descendant() {
        let g = CausalDag::new(&["X", "Y", "K", "D"], &[("X", "K"), ("Y", "K"), ("K", "D")], &[]).unwrap();
        assert!(
            d_separated(&g, &s(&["X"]), &s(&["Y"]), &NodeSet::new())
                .unwrap()
                .separated
        );
        assert!(!d_separated(&g, &s(&["X"]), &s(&["Y"]), &s(&["D"])).unwrap().separated);
    }

    #[test]
    fn backdoor_cases() {
        assert_eq!(show(&backdoor_paths(&direct(), "Q", "A").unwrap()), ["Q←U→A"]);
        let plain = CausalDag::new(&["Q", "A"], &[("Q", "A")], &[]).unwrap();
        assert!(backdoor_paths(&plain, "Q", "A").unwrap().is_empty());
        assert_eq!(
            show(&backdoor_paths(&knowledge_intensive(), "Q", "C").unwrap()),
            ["Q←E→C", "Q←U→A←C"]
        );
    }

    #[test]
    fn standard_frontdoor_cases() {
        let r = check_standard_frontdoor(&chain_of_thought(), &s(&["C"]), "Q", "A").unwrap();
        assert!(r.satisfied, "{r}");
        let r = check_standard_frontdoor(&knowledge_intensive(), &s(&["C"]), "Q", "A").unwrap();
        assert!(!r.satisfied);
        let c2 = r.condition("2").unwrap();
        assert!(!c2.holds);
        assert_eq!(show(&c2.witnesses), ["Q←E→C"]);
        let r = check_standard_frontdoor(&direct(), &NodeSet::new(), "Q", "A").unwrap();
        assert!(!r.condition("1").unwrap().holds);
        assert_eq!(show(&r.condition("1").unwrap().witnesses), ["Q→A"]);
    }

    #[test]
    fn conditional_frontdoor_cases() {
        let g = knowledge_intensive();
        let r = check_conditional_frontdoor(&g, &s(&["C"]), &s(&["E"]), "Q", "A").unwrap();
        assert!(r.satisfied, "{r}");
        let r = check_conditional_frontdoor(&g, &s(&["C"]), &NodeSet::new(), "Q", "A").unwrap();
        assert!(!r.satisfied);
        let r = check_conditional_frontdoor(&chain_of_thought(), &s(&["C"]), &NodeSet::new(), "Q", "A").unwrap();
        assert!(r.satisfied);
        assert_eq!(
            check_conditional_frontdoor(&g, &s(&["C"]), &s(&["U"]), "Q", "A"),
            Err(GraphError::LatentConditioning("U".into()))
        );
    }

    #[test]
    fn rule_cases() {
        let g = knowledge_intensive();
        assert!(
            rule_applicable(&g, DoRule::Two, &s(&["Q"]), &s(&["C"]), &s(&["E"]), &s(&["A"]))
                .unwrap()
                .applicable
        );
        assert!(
            rule_applicable(&g, DoRule::Three, &s(&["C"]), &s(&["Q"]), &s(&["E"]), &s(&["A"]))
                .unwrap()
                .applicable
        );
        assert!(
            rule_applicable(
                &g,
                DoRule::Two,
                &NodeSet::new(),
                &s(&["C"]),
                &s(&["Q", "E"]),
                &s(&["A"])
            )
            .unwrap()
            .applicable
        );
        // observing C in the unmodified graph does not license dropping it
        assert!(
            !rule_applicable(&g, DoRule::One, &NodeSet::new(), &s(&["C"]), &s(&["Q"]), &s(&["A"]))
                .unwrap()
                .applicable
        );
        assert!(matches!(
            rule_applicable(&g, DoRule::One, &s(&["Q"]), &s(&["Q"]), &NodeSet::new(), &s(&["A"])),
            Err(GraphError::NotDisjoint(_))
        ));
    }

    #[test]
    fn rule_three_keeps_ancestors_of_w() {
        // Z -> W: Z is an ancestor of W so its incoming edges stay in place
        let g = CausalDag::new(
            &["X", "Z", "W", "Y", "U"],
            &[("U", "Z"), ("U", "Y"), ("Z", "W"), ("X", "Y")],
            &[],
        )
        .unwrap();
        let r = rule_applicable(&g, DoRule::Three, &s(&["X"]), &s(&["Z"]), &s(&["W"]), &s(&["Y"])).unwrap();
        assert!(r.graph.has_edge("U", "Z"));
        assert!(!r.applicable);
    }

    #[test]
    fn audit_cases() {
        let g = knowledge_intensive();
        let a = audit_cfd_derivation(&g).unwrap();
        assert_eq!(a.steps.len(), 4);
        assert!(a.passed());
        assert_eq!(a.steps.iter().map(|s| s.rule).collect::<Vec<_>>(), [2, 3, 2, 3]);

        let extra = g.with_edge("E", "A").unwrap();
        let a = audit_cfd_derivation(&extra).unwrap();
        assert!(a.steps[0].holds);
        let recomputed =
            rule_applicable(&extra, DoRule::Three, &s(&["C"]), &s(&["Q"]), &s(&["E"]), &s(&["A"])).unwrap();
        assert_eq!(a.steps[1].holds, recomputed.applicable);

        let missing = g.without_node("E").unwrap();
        assert_eq!(audit_cfd_derivation(&missing), Err(GraphError::MissingNode("E".into())));
    }

    #[test]
    fn report_display_lists_witnesses() {
        let r = check_standard_frontdoor(&knowledge_intensive(), &s(&["C"]), "Q", "A").unwrap();
        let text = r.to_string();
        assert!(text.contains("VIOLATED"));
        assert!(text.contains("witness: Q←E→C"));
    }
}
