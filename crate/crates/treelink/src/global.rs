//! The global spanning-tree model: log-partition and edge marginals via the
//! directed Matrix Tree Theorem, the cluster-factorized negative
//! log-likelihood and its analytic gradients.
//!
//! Numerical scheme: incoming log-weights are shifted per column by their
//! maximum before exponentiation (every arborescence takes exactly one edge
//! per column, so the shifts add back onto the log-determinant), and the
//! determinant of the Laplacian minor is taken through a pivoted LU
//! factorization.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::corpus::{GoldCluster, Span, SpanCandidate};
use crate::graph::{EdgeKind, ScoredGraph};
use crate::oracle::log_sum_exp;
use crate::scorer::{
    coref_edge_backward, link_edge_backward, nil_edge_backward, Gradients, Params, ScorerError,
};

#[derive(Debug, Error)]
pub enum GlobalError {
    #[error("graph admits no spanning tree under the current weights")]
    NoSpanningTree,
    #[error("non-finite edge weight")]
    NonFinite,
    #[error(transparent)]
    Scorer(#[from] ScorerError),
}

// ---------------------------------------------------------------------------
// Pivoted LU over small dense row-major matrices.

fn lu_factor(n: usize, a: &mut [f64]) -> Option<(Vec<usize>, f64)> {
    let mut piv = Vec::with_capacity(n);
    let mut sign = 1.0;
    for k in 0..n {
        let mut p = k;
        let mut max = a[k * n + k].abs();
        for i in k + 1..n {
            let v = a[i * n + k].abs();
            if v > max {
                max = v;
                p = i;
            }
        }
        if max == 0.0 || !max.is_finite() {
            return None;
        }
        if p != k {
            for j in 0..n {
                a.swap(k * n + j, p * n + j);
            }
            sign = -sign;
        }
        piv.push(p);
        let pivot = a[k * n + k];
        for i in k + 1..n {
            let f = a[i * n + k] / pivot;
            a[i * n + k] = f;
            for j in k + 1..n {
                a[i * n + j] -= f * a[k * n + j];
            }
        }
    }
    Some((piv, sign))
}

fn lu_solve(n: usize, lu: &[f64], piv: &[usize], b: &mut [f64]) {
    for k in 0..n {
        b.swap(k, piv[k]);
    }
    for i in 0..n {
        for j in 0..i {
            b[i] -= lu[i * n + j] * b[j];
        }
    }
    for i in (0..n).rev() {
        for j in i + 1..n {
            b[i] -= lu[i * n + j] * b[j];
        }
        b[i] /= lu[i * n + i];
    }
}

fn invert(n: usize, a: &[f64]) -> Option<Vec<f64>> {
    let mut lu = a.to_vec();
    let (piv, _) = lu_factor(n, &mut lu)?;
    let mut inv = vec![0.0; n * n];
    let mut col = vec![0.0; n];
    for j in 0..n {
        col.iter_mut().for_each(|x| *x = 0.0);
        col[j] = 1.0;
        lu_solve(n, &lu, &piv, &mut col);
        for i in 0..n {
            inv[i * n + j] = col[i];
        }
    }
    Some(inv)
}

// ---------------------------------------------------------------------------
// Matrix-Tree-Theorem core over a node subset.

/// Log-partition (and optionally edge marginals, as `(edge index, prob)`)
/// over arborescences rooted at `root_node` spanning `members`. Only edges
/// between members or from the root into a member participate.
fn sub_mtt(
    graph: &ScoredGraph,
    root_node: usize,
    members: &[usize],
    want_marginals: bool,
) -> Result<(f64, Vec<(usize, f64)>), GlobalError> {
    let n = members.len();
    if n == 0 {
        return Ok((0.0, Vec::new()));
    }
    debug_assert!(!members.contains(&root_node));
    let sub_index: BTreeMap<usize, usize> =
        members.iter().enumerate().map(|(i, &v)| (v, i)).collect();

    struct SubEdge {
        idx: usize,
        from: Option<usize>,
        to: usize,
        w: f64,
    }
    let mut sub_edges = Vec::new();
    for (idx, e) in graph.edges.iter().enumerate() {
        let Some(&tv) = sub_index.get(&e.to) else { continue };
        let from = if e.from == root_node {
            None
        } else {
            match sub_index.get(&e.from) {
                Some(&fu) => Some(fu),
                None => continue,
            }
        };
        if !e.log_weight.is_finite() {
            return Err(GlobalError::NonFinite);
        }
        sub_edges.push(SubEdge { idx, from, to: tv, w: e.log_weight });
    }

    let mut shift = vec![f64::NEG_INFINITY; n];
    for e in &sub_edges {
        if e.w > shift[e.to] {
            shift[e.to] = e.w;
        }
    }
    if shift.iter().any(|s| !s.is_finite()) {
        return Err(GlobalError::NoSpanningTree);
    }

    let mut lap = vec![0.0; n * n];
    let mut theta = Vec::with_capacity(sub_edges.len());
    for e in &sub_edges {
        let t = (e.w - shift[e.to]).exp();
        theta.push(t);
        lap[e.to * n + e.to] += t;
        if let Some(fu) = e.from {
            lap[fu * n + e.to] -= t;
        }
    }

    let mut lu = lap.clone();
    let Some((_, mut sign)) = lu_factor(n, &mut lu) else {
        return Err(GlobalError::NoSpanningTree);
    };
    let mut log_abs_det = 0.0;
    for k in 0..n {
        let d = lu[k * n + k];
        if d < 0.0 {
            sign = -sign;
        }
        log_abs_det += d.abs().ln();
    }
    if sign <= 0.0 || !log_abs_det.is_finite() {
        return Err(GlobalError::NoSpanningTree);
    }
    let log_z = shift.iter().sum::<f64>() + log_abs_det;

    if !want_marginals {
        return Ok((log_z, Vec::new()));
    }
    let inv = invert(n, &lap).ok_or(GlobalError::NoSpanningTree)?;
    let mut marginals = Vec::with_capacity(sub_edges.len());
    for (e, &t) in sub_edges.iter().zip(&theta) {
        let mu = match e.from {
            None => t * inv[e.to * n + e.to],
            Some(fu) => t * (inv[e.to * n + e.to] - inv[e.to * n + fu]),
        };
        marginals.push((e.idx, mu));
    }
    Ok((log_z, marginals))
}

fn all_non_root(graph: &ScoredGraph) -> Vec<usize> {
    (0..graph.num_nodes()).filter(|&v| v != graph.root).collect()
}

/// Log of the sum over all arborescences of the exponentiated tree scores.
pub fn log_partition(graph: &ScoredGraph) -> Result<f64, GlobalError> {
    sub_mtt(graph, graph.root, &all_non_root(graph), false).map(|(z, _)| z)
}

/// Per-edge appearance probabilities under the Gibbs distribution over
/// arborescences, indexed like `graph.edges`.
pub fn edge_marginals(graph: &ScoredGraph) -> Result<Vec<f64>, GlobalError> {
    let (_, m) = sub_mtt(graph, graph.root, &all_non_root(graph), true)?;
    let mut out = vec![0.0; graph.edges.len()];
    for (idx, mu) in m {
        out[idx] = mu;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Gold-derived constraints.

/// One gold linked cluster surviving pruning: its entity node and the member
/// mention nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkedComponent {
    pub entity_node: usize,
    pub mention_nodes: Vec<usize>,
}

/// The numerator structure of the tree likelihood: linked components, NIL
/// components (each forced to hang off the root through exactly one child),
/// root attachments for non-gold spans and unused entities.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClusterConstraint {
    pub linked: Vec<LinkedComponent>,
    pub nil: Vec<Vec<usize>>,
    pub root_spans: Vec<usize>,
    pub unused_entities: Vec<usize>,
    /// Linked gold clusters where no surviving mention carries the gold
    /// entity as a candidate; these degrade to NIL components.
    pub unsolvable_clusters: usize,
}

/// Maps gold clusters onto graph nodes. Gold mentions pruned away are
/// dropped from their clusters; clusters left empty are dropped entirely.
/// Clusters sharing one gold entity are merged, since a tree can hang only
/// one subtree off an entity node.
pub fn derive_constraint(
    graph: &ScoredGraph,
    spans: &[SpanCandidate],
    gold: &[GoldCluster],
) -> ClusterConstraint {
    let span_to_mention: BTreeMap<Span, usize> =
        spans.iter().enumerate().map(|(i, s)| (s.span(), i)).collect();
    let entity_idx: BTreeMap<&str, usize> = graph
        .entity_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let link_edges: BTreeSet<(usize, usize)> = graph
        .edges
        .iter()
        .filter_map(|e| match e.kind {
            EdgeKind::EntityMention { entity, mention } => Some((entity, mention)),
            _ => None,
        })
        .collect();

    let mut constraint = ClusterConstraint::default();
    let mut in_gold = vec![false; spans.len()];
    let mut linked_by_entity: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for cluster in gold {
        let mut members: Vec<usize> = cluster
            .mentions
            .iter()
            .filter_map(|sp| span_to_mention.get(sp).copied())
            .collect();
        members.sort_unstable();
        if members.is_empty() {
            continue;
        }
        for &m in &members {
            in_gold[m] = true;
        }
        let mention_nodes: Vec<usize> = members.iter().map(|&m| graph.mention_node(m)).collect();
        let solvable_entity = cluster
            .link
            .as_deref()
            .and_then(|id| entity_idx.get(id).copied())
            .filter(|&e| members.iter().any(|&m| link_edges.contains(&(e, m))));
        match (cluster.link.is_some(), solvable_entity) {
            (true, Some(e)) => linked_by_entity.entry(e).or_default().extend(mention_nodes),
            (true, None) => {
                constraint.unsolvable_clusters += 1;
                constraint.nil.push(mention_nodes);
            }
            (false, _) => constraint.nil.push(mention_nodes),
        }
    }
    for (e, mut mention_nodes) in linked_by_entity {
        mention_nodes.sort_unstable();
        constraint
            .linked
            .push(LinkedComponent { entity_node: graph.entity_node(e), mention_nodes });
    }
    for m in 0..spans.len() {
        if !in_gold[m] {
            constraint.root_spans.push(graph.mention_node(m));
        }
    }
    let used: BTreeSet<usize> = constraint.linked.iter().map(|c| c.entity_node).collect();
    for e in 0..graph.num_entities() {
        let node = graph.entity_node(e);
        if !used.contains(&node) {
            constraint.unused_entities.push(node);
        }
    }
    constraint
}

fn root_edge_index(graph: &ScoredGraph) -> BTreeMap<usize, usize> {
    graph
        .edges
        .iter()
        .enumerate()
        .filter(|(_, e)| e.from == graph.root)
        .map(|(idx, e)| (e.to, idx))
        .collect()
}

fn constrained(
    graph: &ScoredGraph,
    c: &ClusterConstraint,
    want_marginals: bool,
) -> Result<(f64, Vec<f64>), GlobalError> {
    let root_edges = root_edge_index(graph);
    let mut total = 0.0;
    let mut marg = vec![0.0; graph.edges.len()];

    for comp in &c.linked {
        let (z, m) = sub_mtt(graph, comp.entity_node, &comp.mention_nodes, want_marginals)?;
        total += z; // the root -> entity edge contributes its fixed weight 0
        for (idx, mu) in m {
            marg[idx] += mu;
        }
        if want_marginals {
            marg[root_edges[&comp.entity_node]] += 1.0;
        }
    }

    for comp in &c.nil {
        // exactly one root child per NIL cluster: sum over the choice
        let mut terms = Vec::with_capacity(comp.len());
        let mut branches = Vec::new();
        for &m_node in comp {
            let others: Vec<usize> = comp.iter().copied().filter(|&x| x != m_node).collect();
            let (z, m) = sub_mtt(graph, m_node, &others, want_marginals)?;
            let ridx = *root_edges.get(&m_node).ok_or(GlobalError::NoSpanningTree)?;
            terms.push(graph.edges[ridx].log_weight + z);
            if want_marginals {
                branches.push((ridx, m));
            }
        }
        let lse = log_sum_exp(terms.iter().copied());
        if !lse.is_finite() {
            return Err(GlobalError::NoSpanningTree);
        }
        total += lse;
        if want_marginals {
            for (t, (ridx, m)) in terms.iter().zip(branches) {
                let p = (t - lse).exp();
                marg[ridx] += p;
                for (idx, mu) in m {
                    marg[idx] += p * mu;
                }
            }
        }
    }

    for &node in c.root_spans.iter().chain(&c.unused_entities) {
        let ridx = *root_edges.get(&node).ok_or(GlobalError::NoSpanningTree)?;
        total += graph.edges[ridx].log_weight;
        if want_marginals {
            marg[ridx] += 1.0;
        }
    }
    Ok((total, marg))
}

/// Log of the numerator: the sum over constraint-consistent arborescences.
pub fn constrained_log_partition(
    graph: &ScoredGraph,
    constraint: &ClusterConstraint,
) -> Result<f64, GlobalError> {
    constrained(graph, constraint, false).map(|(z, _)| z)
}

/// Numerator log-partition plus per-edge marginals under the constrained
/// tree distribution.
pub fn constrained_marginals(
    graph: &ScoredGraph,
    constraint: &ClusterConstraint,
) -> Result<(f64, Vec<f64>), GlobalError> {
    constrained(graph, constraint, true)
}

/// Negative log-likelihood of the gold clusters: full log-partition minus
/// the constrained log-partition. Non-negative up to float error since the
/// numerator trees are a subset of all trees.
pub fn global_loss(graph: &ScoredGraph, constraint: &ClusterConstraint) -> Result<f64, GlobalError> {
    Ok(log_partition(graph)? - constrained_log_partition(graph, constraint)?)
}

/// Loss plus analytic parameter gradients. The gradient of the loss in an
/// edge log-weight is `marginal_full - marginal_constrained`, routed back
/// through the scorer networks; both directions of a mention pair share one
/// weight, so their coefficients are summed before the backward pass.
pub fn global_loss_and_grads(
    params: &Params,
    spans: &[SpanCandidate],
    graph: &ScoredGraph,
    constraint: &ClusterConstraint,
    grads: &mut Gradients,
) -> Result<f64, GlobalError> {
    let (log_z_full, full_list) = sub_mtt(graph, graph.root, &all_non_root(graph), true)?;
    let mut full = vec![0.0; graph.edges.len()];
    for (idx, mu) in full_list {
        full[idx] = mu;
    }
    let (log_z_constrained, constr) = constrained(graph, constraint, true)?;
    let loss = log_z_full - log_z_constrained;

    let mut pair_coeff: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (idx, e) in graph.edges.iter().enumerate() {
        let d = full[idx] - constr[idx];
        match e.kind {
            EdgeKind::RootEntity { .. } => {}
            EdgeKind::RootMention { mention } => {
                nil_edge_backward(params, &spans[mention].g, d, grads)
            }
            EdgeKind::EntityMention { entity, mention } => link_edge_backward(
                params,
                &spans[mention].g,
                &graph.entity_embeddings[entity],
                d,
                grads,
            ),
            EdgeKind::MentionPair { later, earlier } => {
                *pair_coeff.entry((later, earlier)).or_insert(0.0) += d;
            }
        }
    }
    for ((later, earlier), d) in pair_coeff {
        coref_edge_backward(
            params,
            &spans[later].g,
            &spans[earlier].g,
            later - earlier,
            d,
            grads,
        );
    }
    Ok(loss)
}
