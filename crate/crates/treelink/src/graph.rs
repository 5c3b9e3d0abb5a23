//! The scored document graph: a virtual root, deduplicated entity nodes and
//! pruned mention nodes with directed log-weighted edges.

use std::collections::BTreeMap;

use crate::corpus::SpanCandidate;
use crate::scorer::{
    entity_score, nil_edge_score, pair_score, prune_score, Params, ScorerError,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Root,
    /// Index into [`ScoredGraph::entity_ids`].
    Entity(usize),
    /// Index into the pruned span list.
    Mention(usize),
}

/// What parameterized the edge weight; drives gradient routing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    /// Root -> entity, weight fixed at 0.
    RootEntity { entity: usize },
    /// Root -> mention, weight from the nil edge score.
    RootMention { mention: usize },
    /// Entity -> mention, only for entities on the mention's candidate list.
    EntityMention { entity: usize, mention: usize },
    /// Mention pair; both directions carry the same weight, computed with the
    /// textually later span in the anaphor role.
    MentionPair { later: usize, earlier: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub log_weight: f64,
    pub kind: EdgeKind,
}

/// Directed graph over root/entity/mention nodes. Node 0 is always the root,
/// entity nodes follow in first-appearance order, then mention nodes in
/// pruned document order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredGraph {
    pub nodes: Vec<NodeKind>,
    pub entity_ids: Vec<String>,
    pub entity_embeddings: Vec<Vec<f64>>,
    pub edges: Vec<Edge>,
    pub root: usize,
}

impl ScoredGraph {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_entities(&self) -> usize {
        self.entity_ids.len()
    }

    pub fn entity_node(&self, entity: usize) -> usize {
        1 + entity
    }

    pub fn mention_node(&self, mention: usize) -> usize {
        1 + self.entity_ids.len() + mention
    }

    /// Pruned span index of a mention node, if it is one.
    pub fn mention_index(&self, node: usize) -> Option<usize> {
        match self.nodes[node] {
            NodeKind::Mention(i) => Some(i),
            _ => None,
        }
    }

    /// Incoming edge indices per node.
    pub fn in_edges(&self) -> Vec<Vec<usize>> {
        let mut incoming = vec![Vec::new(); self.nodes.len()];
        for (idx, e) in self.edges.iter().enumerate() {
            incoming[e.to].push(idx);
        }
        incoming
    }

    /// Test/oracle constructor: `n_non_root` mention-like nodes under a root,
    /// with explicit weighted edges (node 0 is the root).
    pub fn from_weighted_edges(n_non_root: usize, weighted: &[(usize, usize, f64)]) -> ScoredGraph {
        let mut nodes = vec![NodeKind::Root];
        nodes.extend((0..n_non_root).map(NodeKind::Mention));
        ScoredGraph::with_nodes(nodes, Vec::new(), Vec::new(), weighted)
    }

    /// Builds a graph from explicit nodes and weighted edges, classifying
    /// each edge from its endpoint kinds.
    pub fn with_nodes(
        nodes: Vec<NodeKind>,
        entity_ids: Vec<String>,
        entity_embeddings: Vec<Vec<f64>>,
        weighted: &[(usize, usize, f64)],
    ) -> ScoredGraph {
        let edges = weighted
            .iter()
            .map(|&(from, to, log_weight)| {
                let kind = match (nodes[from], nodes[to]) {
                    (NodeKind::Root, NodeKind::Entity(e)) => EdgeKind::RootEntity { entity: e },
                    (NodeKind::Root, NodeKind::Mention(m)) => EdgeKind::RootMention { mention: m },
                    (NodeKind::Entity(e), NodeKind::Mention(m)) => {
                        EdgeKind::EntityMention { entity: e, mention: m }
                    }
                    (NodeKind::Mention(a), NodeKind::Mention(b)) => {
                        EdgeKind::MentionPair { later: a.max(b), earlier: a.min(b) }
                    }
                    (f, t) => panic!("edge kind {f:?} -> {t:?} is not allowed"),
                };
                Edge { from, to, log_weight, kind }
            })
            .collect();
        ScoredGraph { nodes, entity_ids, entity_embeddings, edges, root: 0 }
    }
}

/// Builds the full document graph over pruned spans: root -> entity edges at
/// weight 0, root -> mention nil edges, entity -> mention link edges for
/// candidates, and symmetric mention-pair edges in both directions.
pub fn build_graph(params: &Params, spans: &[SpanCandidate]) -> Result<ScoredGraph, ScorerError> {
    // entities deduplicated by id, first appearance over (span, candidate) order
    let mut entity_ids: Vec<String> = Vec::new();
    let mut entity_embeddings: Vec<Vec<f64>> = Vec::new();
    let mut entity_index: BTreeMap<&str, usize> = BTreeMap::new();
    for sc in spans {
        for cand in &sc.candidates {
            if !entity_index.contains_key(cand.entity_id.as_str()) {
                entity_index.insert(cand.entity_id.as_str(), entity_ids.len());
                entity_ids.push(cand.entity_id.clone());
                entity_embeddings.push(cand.embedding.clone());
            }
        }
    }

    let n_entities = entity_ids.len();
    let n_mentions = spans.len();
    let mut nodes = Vec::with_capacity(1 + n_entities + n_mentions);
    nodes.push(NodeKind::Root);
    nodes.extend((0..n_entities).map(NodeKind::Entity));
    nodes.extend((0..n_mentions).map(NodeKind::Mention));

    let phi_p: Vec<f64> = spans
        .iter()
        .map(|sc| prune_score(params, &sc.g))
        .collect::<Result<_, _>>()?;

    let mut edges = Vec::new();
    for e in 0..n_entities {
        edges.push(Edge {
            from: 0,
            to: 1 + e,
            log_weight: 0.0,
            kind: EdgeKind::RootEntity { entity: e },
        });
    }
    for (i, sc) in spans.iter().enumerate() {
        edges.push(Edge {
            from: 0,
            to: 1 + n_entities + i,
            log_weight: nil_edge_score(params, &sc.g)?,
            kind: EdgeKind::RootMention { mention: i },
        });
    }
    for (i, sc) in spans.iter().enumerate() {
        for cand in &sc.candidates {
            let e = entity_index[cand.entity_id.as_str()];
            // score against the node's stored embedding so all edges of one
            // entity node are consistent
            let w = phi_p[i] + entity_score(params, &sc.g, &entity_embeddings[e])?;
            edges.push(Edge {
                from: 1 + e,
                to: 1 + n_entities + i,
                log_weight: w,
                kind: EdgeKind::EntityMention { entity: e, mention: i },
            });
        }
    }
    for i in 0..n_mentions {
        for j in 0..i {
            let w = phi_p[i] + phi_p[j] + pair_score(params, &spans[i].g, &spans[j].g, i - j)?;
            let (ni, nj) = (1 + n_entities + i, 1 + n_entities + j);
            let kind = EdgeKind::MentionPair { later: i, earlier: j };
            edges.push(Edge { from: nj, to: ni, log_weight: w, kind });
            edges.push(Edge { from: ni, to: nj, log_weight: w, kind });
        }
    }

    Ok(ScoredGraph { nodes, entity_ids, entity_embeddings, edges, root: 0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::EntityCandidate;
    use crate::scorer::Dims;

    fn dims() -> Dims {
        Dims { d_g: 6, d_e: 4, d_phi: 3, h: 5 }
    }

    fn span(i: usize, cands: &[&str]) -> SpanCandidate {
        SpanCandidate {
            start: i,
            end: i + 1,
            g: vec![0.1 * (i + 1) as f64; 6],
            candidates: cands
                .iter()
                .enumerate()
                .map(|(k, id)| EntityCandidate {
                    entity_id: id.to_string(),
                    prior: 0.9 - 0.1 * k as f64,
                    embedding: vec![0.2; 4],
                })
                .collect(),
        }
    }

    #[test]
    fn two_mentions_one_shared_entity() {
        let params = Params::init(dims(), 4);
        let spans = vec![span(0, &["E"]), span(1, &["E"])];
        let g = build_graph(&params, &spans).unwrap();
        assert_eq!(g.nodes.len(), 4); // root, E, m1, m2
        assert_eq!(g.entity_ids, vec!["E".to_string()]);
        // root->E, root->m1, root->m2, E->m1, E->m2, m1<->m2
        assert_eq!(g.edges.len(), 7);
        let re = g.edges.iter().find(|e| e.kind == EdgeKind::RootEntity { entity: 0 }).unwrap();
        assert_eq!(re.log_weight, 0.0);
    }

    #[test]
    fn mention_without_candidates_keeps_root_and_pair_edges() {
        let params = Params::init(dims(), 4);
        let spans = vec![span(0, &["E"]), span(1, &[])];
        let g = build_graph(&params, &spans).unwrap();
        let m2 = g.mention_node(1);
        let inbound: Vec<_> = g.edges.iter().filter(|e| e.to == m2).collect();
        // root edge plus one pair edge, no entity edge
        assert_eq!(inbound.len(), 2);
        assert!(inbound.iter().all(|e| !matches!(e.kind, EdgeKind::EntityMention { .. })));
    }

    #[test]
    fn entity_shared_by_three_mentions_is_one_node() {
        let params = Params::init(dims(), 4);
        let spans = vec![span(0, &["E", "X"]), span(1, &["E"]), span(2, &["E"])];
        let g = build_graph(&params, &spans).unwrap();
        assert_eq!(g.entity_ids, vec!["E".to_string(), "X".to_string()]);
        let e_node = g.entity_node(0);
        let out: Vec<_> = g.edges.iter().filter(|e| e.from == e_node).collect();
        assert_eq!(out.len(), 3);
    }

    #[test]
    fn pair_edges_share_one_weight_in_both_directions() {
        let params = Params::init(dims(), 9);
        let spans = vec![span(0, &[]), span(3, &[])];
        let g = build_graph(&params, &spans).unwrap();
        let (a, b) = (g.mention_node(0), g.mention_node(1));
        let fwd = g.edges.iter().find(|e| e.from == a && e.to == b).unwrap();
        let bwd = g.edges.iter().find(|e| e.from == b && e.to == a).unwrap();
        assert_eq!(fwd.log_weight, bwd.log_weight);
        assert_eq!(fwd.kind, bwd.kind);
    }
}
