//! Brute-force reference implementations used only for verification:
//! exhaustive arborescence enumeration and brute log-partition, marginals
//! and argmax trees.

use thiserror::Error;

use crate::decode::Arborescence;
use crate::graph::ScoredGraph;

/// Enumeration is capped; parent assignments grow as fast as n^n.
pub const MAX_ORACLE_NODES: usize = 8;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("graph has {0} non-root nodes; enumeration is capped at {MAX_ORACLE_NODES}")]
    TooLarge(usize),
}

/// Every arborescence of the graph rooted at the root, exactly once, as
/// (chosen edge indices, total log-weight).
#[derive(Debug, Clone)]
pub struct TreeEnumeration {
    pub trees: Vec<(Vec<usize>, f64)>,
}

impl TreeEnumeration {
    pub fn arborescences(&self, graph: &ScoredGraph) -> Vec<(Arborescence, f64)> {
        self.trees
            .iter()
            .map(|(edges, score)| {
                let mut parent = vec![None; graph.num_nodes()];
                for &idx in edges {
                    parent[graph.edges[idx].to] = Some(graph.edges[idx].from);
                }
                (Arborescence { parent, total_score: *score }, *score)
            })
            .collect()
    }
}

/// Exhaustively enumerates arborescences by assigning one inbound edge per
/// non-root node and rejecting assignments with cycles.
pub fn enumerate_arborescences(graph: &ScoredGraph) -> Result<TreeEnumeration, OracleError> {
    let n = graph.num_nodes();
    let non_root: Vec<usize> = (0..n).filter(|&v| v != graph.root).collect();
    if non_root.len() > MAX_ORACLE_NODES {
        return Err(OracleError::TooLarge(non_root.len()));
    }
    let incoming = graph.in_edges();

    let mut trees = Vec::new();
    let mut choice: Vec<usize> = Vec::with_capacity(non_root.len());

    fn is_arborescence(
        graph: &ScoredGraph,
        non_root: &[usize],
        choice: &[usize],
    ) -> bool {
        let n = graph.num_nodes();
        let mut parent = vec![usize::MAX; n];
        for (pos, &v) in non_root.iter().enumerate() {
            parent[v] = graph.edges[choice[pos]].from;
        }
        for &v in non_root {
            let mut cur = v;
            let mut steps = 0;
            while cur != graph.root {
                cur = parent[cur];
                steps += 1;
                if steps > n {
                    return false;
                }
            }
        }
        true
    }

    fn recurse(
        graph: &ScoredGraph,
        non_root: &[usize],
        incoming: &[Vec<usize>],
        choice: &mut Vec<usize>,
        trees: &mut Vec<(Vec<usize>, f64)>,
    ) {
        if choice.len() == non_root.len() {
            if is_arborescence(graph, non_root, choice) {
                let score = choice.iter().map(|&i| graph.edges[i].log_weight).sum();
                trees.push((choice.clone(), score));
            }
            return;
        }
        let v = non_root[choice.len()];
        for &edge_idx in &incoming[v] {
            choice.push(edge_idx);
            recurse(graph, non_root, incoming, choice, trees);
            choice.pop();
        }
    }

    recurse(graph, &non_root, &incoming, &mut choice, &mut trees);
    Ok(TreeEnumeration { trees })
}

/// log sum over enumerated trees of exp(total log-weight); negative infinity
/// when the graph admits no arborescence.
pub fn brute_log_partition(graph: &ScoredGraph) -> Result<f64, OracleError> {
    let enumeration = enumerate_arborescences(graph)?;
    Ok(log_sum_exp(enumeration.trees.iter().map(|&(_, s)| s)))
}

/// Per-edge probability of appearing in a tree drawn from the Gibbs
/// distribution over arborescences, indexed like `graph.edges`.
pub fn brute_marginals(graph: &ScoredGraph) -> Result<Vec<f64>, OracleError> {
    let enumeration = enumerate_arborescences(graph)?;
    let log_z = log_sum_exp(enumeration.trees.iter().map(|&(_, s)| s));
    let mut marginals = vec![0.0; graph.edges.len()];
    for (edges, score) in &enumeration.trees {
        let p = (score - log_z).exp();
        for &idx in edges {
            marginals[idx] += p;
        }
    }
    Ok(marginals)
}

/// Highest-scoring arborescence; ties broken toward the lexicographically
/// smallest sorted (from, to) edge list. `None` when no tree exists.
pub fn brute_best_tree(graph: &ScoredGraph) -> Result<Option<Arborescence>, OracleError> {
    let enumeration = enumerate_arborescences(graph)?;
    let mut best: Option<(Vec<(usize, usize)>, Vec<usize>, f64)> = None;
    for (edges, score) in &enumeration.trees {
        let mut key: Vec<(usize, usize)> = edges
            .iter()
            .map(|&i| (graph.edges[i].from, graph.edges[i].to))
            .collect();
        key.sort_unstable();
        let replace = match &best {
            None => true,
            Some((bkey, _, bscore)) => *score > *bscore || (*score == *bscore && key < *bkey),
        };
        if replace {
            best = Some((key, edges.clone(), *score));
        }
    }
    Ok(best.map(|(_, edges, score)| {
        let mut parent = vec![None; graph.num_nodes()];
        for idx in edges {
            parent[graph.edges[idx].to] = Some(graph.edges[idx].from);
        }
        Arborescence { parent, total_score: score }
    }))
}

pub(crate) fn log_sum_exp(values: impl Iterator<Item = f64>) -> f64 {
    let values: Vec<f64> = values.collect();
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
