//! Maximum spanning arborescence decoding (Chu-Liu/Edmonds) and conversion
//! of a decoded tree into cluster and link predictions.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Span, SpanCandidate};
use crate::graph::{NodeKind, ScoredGraph};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("graph admits no spanning tree rooted at the root")]
    NoSpanningTree,
    #[error("malformed tree: {0}")]
    Malformed(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },
}

/// A rooted spanning arborescence: one parent per non-root node and the sum
/// of its edge log-weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Arborescence {
    pub parent: Vec<Option<usize>>,
    pub total_score: f64,
}

impl Arborescence {
    /// Edges as `(parent, child)` pairs sorted by child.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.parent
            .iter()
            .enumerate()
            .filter_map(|(child, p)| p.map(|parent| (parent, child)))
            .collect()
    }

    /// Checks that every non-root node has a parent and reaches the root.
    pub fn validate(&self, root: usize) -> Result<(), DecodeError> {
        let n = self.parent.len();
        if root >= n || self.parent[root].is_some() {
            return Err(DecodeError::Malformed("root must exist and have no parent".into()));
        }
        for v in 0..n {
            if v != root && self.parent[v].is_none() {
                return Err(DecodeError::Malformed(format!("node {v} has no parent")));
            }
            let mut cur = v;
            for _ in 0..=n {
                if cur == root {
                    break;
                }
                match self.parent[cur] {
                    Some(p) if p < n => cur = p,
                    _ => return Err(DecodeError::Malformed(format!("node {v} does not reach the root"))),
                }
            }
            if cur != root {
                return Err(DecodeError::Malformed(format!("cycle through node {v}")));
            }
        }
        Ok(())
    }
}

/// One predicted cluster: a set of mention spans and an optional entity link.
#[derive(Debug, Clone, PartialEq)]
pub struct PredCluster {
    pub mentions: Vec<Span>,
    pub link: Option<String>,
}

/// All predicted clusters of one document.
#[derive(Debug, Clone, PartialEq)]
pub struct DocPrediction {
    pub doc_id: String,
    pub clusters: Vec<PredCluster>,
}

// ---------------------------------------------------------------------------
// Chu-Liu/Edmonds.

#[derive(Debug, Clone, Copy)]
struct WorkEdge {
    from: usize,
    to: usize,
    w: f64,
    /// Original `(from, to)` endpoints, used for deterministic tie-breaking.
    key: (usize, usize),
    /// Index into the previous recursion level's edge list.
    src: usize,
}

fn better(a: &WorkEdge, b: &WorkEdge) -> bool {
    a.w > b.w || (a.w == b.w && a.key < b.key)
}

/// Returns the indices (into `edges`) of the chosen arborescence edges.
fn solve(nodes: &BTreeSet<usize>, edges: &[WorkEdge], root: usize, next_id: usize) -> Result<Vec<usize>, DecodeError> {
    // best incoming edge per non-root node, ties toward the smallest
    // original (from, to) pair
    let mut best: BTreeMap<usize, usize> = BTreeMap::new();
    for (idx, e) in edges.iter().enumerate() {
        if e.to == root || e.from == e.to {
            continue;
        }
        match best.get(&e.to) {
            Some(&cur) if !better(e, &edges[cur]) => {}
            _ => {
                best.insert(e.to, idx);
            }
        }
    }
    for &v in nodes {
        if v != root && !best.contains_key(&v) {
            return Err(DecodeError::NoSpanningTree);
        }
    }

    // cycle detection in the functional graph v -> best[v].from
    let mut color: BTreeMap<usize, u8> = BTreeMap::new();
    let mut cycle: Option<Vec<usize>> = None;
    'outer: for &start in nodes {
        if start == root || color.get(&start) == Some(&2) {
            continue;
        }
        let mut path = Vec::new();
        let mut v = start;
        loop {
            if v == root || color.get(&v) == Some(&2) {
                break;
            }
            if color.get(&v) == Some(&1) {
                let pos = path.iter().position(|&x| x == v).expect("node on current path");
                cycle = Some(path[pos..].to_vec());
                break 'outer;
            }
            color.insert(v, 1);
            path.push(v);
            v = edges[best[&v]].from;
        }
        for x in path {
            color.insert(x, 2);
        }
    }

    let cycle = match cycle {
        None => return Ok(best.values().copied().collect()),
        Some(c) => c,
    };
    let in_cycle: BTreeSet<usize> = cycle.iter().copied().collect();

    // contract the cycle into a fresh node
    let c_id = next_id;
    let mut contracted: Vec<WorkEdge> = Vec::new();
    for (idx, e) in edges.iter().enumerate() {
        let from_in = in_cycle.contains(&e.from);
        let to_in = in_cycle.contains(&e.to);
        match (from_in, to_in) {
            (true, true) => {}
            (false, true) => contracted.push(WorkEdge {
                from: e.from,
                to: c_id,
                w: e.w - edges[best[&e.to]].w,
                key: e.key,
                src: idx,
            }),
            (true, false) => contracted.push(WorkEdge { from: c_id, to: e.to, w: e.w, key: e.key, src: idx }),
            (false, false) => contracted.push(WorkEdge { src: idx, ..*e }),
        }
    }
    let mut sub_nodes: BTreeSet<usize> = nodes.difference(&in_cycle).copied().collect();
    sub_nodes.insert(c_id);

    let sub_chosen = solve(&sub_nodes, &contracted, root, next_id + 1)?;

    let mut result: Vec<usize> = Vec::new();
    let mut cycle_entry: Option<usize> = None;
    for idx in sub_chosen {
        let e = &contracted[idx];
        if e.to == c_id {
            // the edge that breaks the cycle; its true head is the original 'to'
            cycle_entry = Some(edges[e.src].to);
        }
        result.push(e.src);
    }
    let entry = cycle_entry.ok_or(DecodeError::NoSpanningTree)?;
    for &v in &cycle {
        if v != entry {
            result.push(best[&v]);
        }
    }
    Ok(result)
}

/// Decodes the maximum-total-log-weight arborescence rooted at the graph
/// root. Ties prefer the edge with the lexicographically smallest original
/// `(from, to)` endpoints.
pub fn edmonds_msa(graph: &ScoredGraph) -> Result<Arborescence, DecodeError> {
    let n = graph.num_nodes();
    let nodes: BTreeSet<usize> = (0..n).collect();
    let edges: Vec<WorkEdge> = graph
        .edges
        .iter()
        .enumerate()
        .map(|(idx, e)| WorkEdge {
            from: e.from,
            to: e.to,
            w: e.log_weight,
            key: (e.from, e.to),
            src: idx,
        })
        .collect();
    let chosen = solve(&nodes, &edges, graph.root, n)?;
    let mut parent = vec![None; n];
    let mut total = 0.0;
    for idx in chosen {
        let e = &graph.edges[idx];
        parent[e.to] = Some(e.from);
        total += e.log_weight;
    }
    let tree = Arborescence { parent, total_score: total };
    tree.validate(graph.root)?;
    Ok(tree)
}

// ---------------------------------------------------------------------------
// Tree -> clusters.

/// Converts an arborescence over a document graph into cluster predictions:
/// each entity child of the root yields one linked cluster of its mention
/// descendants, each mention child a NIL cluster; NIL singletons are dropped
/// as indistinguishable from pruned non-mention spans.
pub fn extract_clusters(
    graph: &ScoredGraph,
    tree: &Arborescence,
    spans: &[SpanCandidate],
    doc_id: &str,
) -> Result<DocPrediction, DecodeError> {
    if tree.parent.len() != graph.num_nodes() {
        return Err(DecodeError::Malformed(format!(
            "tree covers {} nodes, graph has {}",
            tree.parent.len(),
            graph.num_nodes()
        )));
    }
    tree.validate(graph.root)?;

    let mut children = vec![Vec::new(); graph.num_nodes()];
    for (child, p) in tree.parent.iter().enumerate() {
        if let Some(parent) = *p {
            children[parent].push(child);
        }
    }

    let mention_descendants = |start: usize| -> Vec<Span> {
        let mut out = Vec::new();
        let mut stack = vec![start];
        while let Some(v) = stack.pop() {
            if let Some(m) = graph.mention_index(v) {
                out.push(spans[m].span());
            }
            stack.extend(children[v].iter().copied());
        }
        out.sort_unstable();
        out
    };

    let mut clusters = Vec::new();
    for &child in &children[graph.root] {
        match graph.nodes[child] {
            NodeKind::Entity(e) => {
                let mentions = mention_descendants(child);
                if !mentions.is_empty() {
                    clusters.push(PredCluster {
                        mentions,
                        link: Some(graph.entity_ids[e].clone()),
                    });
                }
            }
            NodeKind::Mention(_) => {
                let mentions = mention_descendants(child);
                if mentions.len() >= 2 {
                    clusters.push(PredCluster { mentions, link: None });
                }
            }
            NodeKind::Root => {
                return Err(DecodeError::Malformed("root cannot be its own child".into()))
            }
        }
    }
    clusters.sort_by(|a, b| a.mentions.cmp(&b.mentions));
    Ok(DocPrediction { doc_id: doc_id.to_string(), clusters })
}

// ---------------------------------------------------------------------------
// Prediction files.

#[derive(Serialize, Deserialize)]
struct PredClusterRecord {
    mentions: Vec<[usize; 2]>,
    link: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct PredictionRecord {
    doc_id: String,
    clusters: Vec<PredClusterRecord>,
}

/// Writes predictions as JSONL, one document per line.
pub fn write_predictions<P: AsRef<Path>>(path: P, preds: &[DocPrediction]) -> Result<(), DecodeError> {
    let mut w = BufWriter::new(File::create(path)?);
    for pred in preds {
        let rec = PredictionRecord {
            doc_id: pred.doc_id.clone(),
            clusters: pred
                .clusters
                .iter()
                .map(|c| PredClusterRecord {
                    mentions: c.mentions.iter().map(|&(s, e)| [s, e]).collect(),
                    link: c.link.clone(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &rec)
            .map_err(|e| DecodeError::Parse { line: 0, message: e.to_string() })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_predictions<P: AsRef<Path>>(path: P) -> Result<Vec<DocPrediction>, DecodeError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredictionRecord = serde_json::from_str(&line)
            .map_err(|e| DecodeError::Parse { line: idx + 1, message: e.to_string() })?;
        out.push(DocPrediction {
            doc_id: rec.doc_id,
            clusters: rec
                .clusters
                .into_iter()
                .map(|c| PredCluster {
                    mentions: c.mentions.into_iter().map(|[s, e]| (s, e)).collect(),
                    link: c.link,
                })
                .collect(),
        });
    }
    Ok(out)
}
