//! Verification suites: oracle equivalence for the tree machinery, gradient
//! checks against finite differences, loss properties and metric fixtures.
//! Shared by the CLI `verify` command and the acceptance tests.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{EntityCandidate, GoldCluster, SpanCandidate};
use crate::decode::edmonds_msa;
use crate::global::{
    constrained_log_partition, derive_constraint, edge_marginals, global_loss,
    global_loss_and_grads, log_partition, ClusterConstraint,
};
use crate::graph::{build_graph, ScoredGraph};
use crate::local::local_loss_and_grads;
use crate::metrics;
use crate::oracle::{brute_best_tree, brute_log_partition, brute_marginals, enumerate_arborescences};
use crate::scorer::{self, finite_difference_max_rel_err, Dims, Params};

/// Result of one verification suite.
#[derive(Debug, Clone)]
pub struct SuiteOutcome {
    pub name: String,
    pub failures: Vec<String>,
    pub stats: BTreeMap<String, f64>,
}

impl SuiteOutcome {
    fn new(name: &str) -> Self {
        SuiteOutcome { name: name.to_string(), failures: Vec::new(), stats: BTreeMap::new() }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    fn fail(&mut self, message: String) {
        // keep the output bounded; the count still reflects every failure
        if self.failures.len() < 20 {
            self.failures.push(message);
        }
        *self.stats.entry("failure_count".into()).or_insert(0.0) += 1.0;
    }

    fn track_max(&mut self, key: &str, value: f64) {
        let entry = self.stats.entry(key.to_string()).or_insert(0.0);
        if value > *entry {
            *entry = value;
        }
    }
}

/// Compares a computed value against a reference; returns a failure message
/// when the relative error (against `max(1, |reference|)`) exceeds `tol`.
pub fn compare_value(name: &str, got: f64, reference: f64, tol: f64) -> Option<String> {
    let err = (got - reference).abs() / reference.abs().max(1.0);
    if err > tol || !got.is_finite() {
        Some(format!("{name}: got {got}, reference {reference}, rel err {err:.3e}"))
    } else {
        None
    }
}

// ---------------------------------------------------------------------------
// Random instances.

fn stable_jitter(graph_id: u64, from: usize, to: usize) -> f64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ graph_id.wrapping_mul(0x0100_0000_01b3);
    for b in [from as u64, to as u64] {
        h ^= b;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    (h % 1_000_003) as f64 / 1_000_003.0
}

/// Complete directed graph under a root with log-weights uniform in
/// `(-2, 2)`; `jitter` adds a deterministic hash perturbation at 1e-7 scale
/// so maxima are unique.
pub fn random_complete_graph(
    rng: &mut ChaCha8Rng,
    n_non_root: usize,
    graph_id: u64,
    jitter: bool,
) -> ScoredGraph {
    let mut edges = Vec::new();
    let mut push = |from: usize, to: usize, w: f64| {
        let w = if jitter { w + 1e-7 * stable_jitter(graph_id, from, to) } else { w };
        edges.push((from, to, w));
    };
    for v in 1..=n_non_root {
        push(0, v, rng.gen_range(-2.0..2.0));
    }
    for a in 1..=n_non_root {
        for b in 1..=n_non_root {
            if a != b {
                push(a, b, rng.gen_range(-2.0..2.0));
            }
        }
    }
    ScoredGraph::from_weighted_edges(n_non_root, &edges)
}

/// A small random document as pruned spans plus gold clusters; entity
/// candidates draw from a fixed pool with per-call embeddings.
pub fn random_small_doc(
    rng: &mut ChaCha8Rng,
    dims: Dims,
) -> (Vec<SpanCandidate>, Vec<GoldCluster>) {
    let pool = ["A", "B", "C", "D"];
    let embeddings: Vec<Vec<f64>> = pool.iter().map(|_| unit_vector(rng, dims.d_e)).collect();
    let n_spans = rng.gen_range(3..=5usize);
    let mut spans = Vec::with_capacity(n_spans);
    for i in 0..n_spans {
        let n_cands = rng.gen_range(0..=2usize);
        let mut ids: Vec<usize> = (0..pool.len()).collect();
        for k in 0..n_cands {
            let j = rng.gen_range(k..ids.len());
            ids.swap(k, j);
        }
        let candidates = ids[..n_cands]
            .iter()
            .map(|&p| EntityCandidate {
                entity_id: pool[p].to_string(),
                prior: 0.5,
                embedding: embeddings[p].clone(),
            })
            .collect();
        spans.push(SpanCandidate {
            start: 2 * i,
            end: 2 * i + 1,
            g: unit_vector(rng, dims.d_g),
            candidates,
        });
    }
    // partition a random subset of spans into one or two gold clusters
    let n_clusters = rng.gen_range(1..=2usize);
    let mut clusters: Vec<GoldCluster> = (0..n_clusters)
        .map(|_| GoldCluster {
            mentions: vec![],
            link: if rng.gen_bool(0.5) {
                Some(pool[rng.gen_range(0..pool.len())].to_string())
            } else {
                None
            },
        })
        .collect();
    for sc in &spans {
        if rng.gen_bool(0.75) {
            let c = rng.gen_range(0..n_clusters);
            clusters[c].mentions.push(sc.span());
        }
    }
    clusters.retain(|c| !c.mentions.is_empty());
    (spans, clusters)
}

fn unit_vector(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
    v.into_iter().map(|x| x / norm).collect()
}

// ---------------------------------------------------------------------------
// Suites.

/// Log-partition and marginal equivalence against brute-force enumeration,
/// per-node inbound marginal sums, and the closed-form arborescence count of
/// complete zero-weight graphs.
pub fn check_mtt(seed: u64, n_graphs: usize, max_nodes: usize, tol: f64) -> SuiteOutcome {
    let mut out = SuiteOutcome::new("mtt");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for gi in 0..n_graphs {
        let n = rng.gen_range(2..=max_nodes);
        let graph = random_complete_graph(&mut rng, n, gi as u64, false);
        let log_z = match log_partition(&graph) {
            Ok(z) => z,
            Err(e) => {
                out.fail(format!("graph {gi}: log_partition failed: {e}"));
                continue;
            }
        };
        let brute_z = brute_log_partition(&graph).expect("within oracle cap");
        let z_err = (log_z - brute_z).abs() / brute_z.abs().max(1.0);
        out.track_max("max_logz_rel_err", z_err);
        if z_err > tol {
            out.fail(format!("graph {gi}: logZ {log_z} vs brute {brute_z}"));
        }
        let marginals = edge_marginals(&graph).expect("logZ was finite");
        let brute = brute_marginals(&graph).expect("within oracle cap");
        for (ei, (m, b)) in marginals.iter().zip(&brute).enumerate() {
            let err = (m - b).abs();
            out.track_max("max_marginal_err", err);
            if err > tol {
                out.fail(format!("graph {gi} edge {ei}: marginal {m} vs brute {b}"));
            }
            if *m < -tol || *m > 1.0 + tol {
                out.fail(format!("graph {gi} edge {ei}: marginal {m} outside [0, 1]"));
            }
        }
        for v in 1..graph.num_nodes() {
            let sum: f64 = graph
                .edges
                .iter()
                .enumerate()
                .filter(|(_, e)| e.to == v)
                .map(|(i, _)| marginals[i])
                .sum();
            out.track_max("max_inbound_sum_err", (sum - 1.0).abs());
            if (sum - 1.0).abs() > tol {
                out.fail(format!("graph {gi} node {v}: inbound marginals sum to {sum}"));
            }
        }
    }
    // exp(logZ) of the all-zero complete graph equals (n+1)^(n-1)
    for n in 2..=5usize {
        let mut edges: Vec<(usize, usize, f64)> = (1..=n).map(|v| (0, v, 0.0)).collect();
        for a in 1..=n {
            for b in 1..=n {
                if a != b {
                    edges.push((a, b, 0.0));
                }
            }
        }
        let graph = ScoredGraph::from_weighted_edges(n, &edges);
        let count = log_partition(&graph).expect("complete graph").exp();
        let expect = ((n + 1) as f64).powi(n as i32 - 1);
        if let Some(msg) = compare_value(&format!("count n={n}"), count, expect, tol) {
            out.fail(msg);
        }
    }
    out
}

/// Decoded maximum arborescences match brute force exactly on tie-broken
/// random graphs.
pub fn check_edmonds(seed: u64, n_graphs: usize, max_nodes: usize) -> SuiteOutcome {
    let mut out = SuiteOutcome::new("edmonds");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for gi in 0..n_graphs {
        let n = rng.gen_range(2..=max_nodes);
        let graph = random_complete_graph(&mut rng, n, gi as u64, true);
        let tree = match edmonds_msa(&graph) {
            Ok(t) => t,
            Err(e) => {
                out.fail(format!("graph {gi}: decode failed: {e}"));
                continue;
            }
        };
        let brute = brute_best_tree(&graph).expect("within cap").expect("complete graph");
        if tree.parent != brute.parent {
            out.fail(format!(
                "graph {gi}: decoded {:?} vs brute {:?} (scores {} vs {})",
                tree.parent, brute.parent, tree.total_score, brute.total_score
            ));
        }
        out.track_max("max_score_gap", (tree.total_score - brute.total_score).abs());
    }
    out
}

/// Per-scorer finite-difference checks over every parameter coordinate.
/// Draws are rejection-sampled so every hidden pre-activation stays a few
/// steps away from the rectifier kink, where central differences are
/// invalid.
pub fn check_scorer_gradients(seed: u64, draws: usize, step: f64, tol: f64) -> SuiteOutcome {
    let mut out = SuiteOutcome::new("scorer-gradients");
    let dims = Dims { d_g: 6, d_e: 4, d_phi: 3, h: 5 };
    for draw in 0..draws {
        let mut sub = 0u64;
        let (mut params, gi, gj, e) = loop {
            let draw_seed = seed
                .wrapping_add(draw as u64)
                .wrapping_mul(6364136223846793005)
                .wrapping_add(sub);
            let mut rng = ChaCha8Rng::seed_from_u64(draw_seed);
            let params = Params::init(dims, draw_seed ^ 0x5555);
            let gi = unit_vector(&mut rng, dims.d_g);
            let gj = unit_vector(&mut rng, dims.d_g);
            let e = unit_vector(&mut rng, dims.d_e);
            let probe = vec![
                SpanCandidate { start: 0, end: 1, g: gj.clone(), candidates: vec![] },
                SpanCandidate {
                    start: 2,
                    end: 3,
                    g: gi.clone(),
                    candidates: vec![EntityCandidate {
                        entity_id: "A".into(),
                        prior: 0.5,
                        embedding: e.clone(),
                    }],
                },
            ];
            if scorer::rectifier_margin(&params, &probe) > 3.0 * step {
                break (params, gi, gj, e);
            }
            sub += 1;
        };
        let cases: Vec<(&str, Box<dyn Fn(&Params) -> f64>, Box<dyn Fn(&Params, &mut scorer::Gradients)>)> = vec![
            (
                "prune",
                Box::new({
                    let gi = gi.clone();
                    move |p: &Params| scorer::prune_score(p, &gi).unwrap()
                }),
                Box::new({
                    let gi = gi.clone();
                    move |p: &Params, g: &mut scorer::Gradients| scorer::prune_backward(p, &gi, 1.0, g)
                }),
            ),
            (
                "pair",
                Box::new({
                    let (gi, gj) = (gi.clone(), gj.clone());
                    move |p: &Params| scorer::pair_score(p, &gi, &gj, 1).unwrap()
                }),
                Box::new({
                    let (gi, gj) = (gi.clone(), gj.clone());
                    move |p: &Params, g: &mut scorer::Gradients| {
                        scorer::pair_backward(p, &gi, &gj, 1, 1.0, g)
                    }
                }),
            ),
            (
                "entity",
                Box::new({
                    let (gi, e) = (gi.clone(), e.clone());
                    move |p: &Params| scorer::entity_score(p, &gi, &e).unwrap()
                }),
                Box::new({
                    let (gi, e) = (gi.clone(), e.clone());
                    move |p: &Params, g: &mut scorer::Gradients| {
                        scorer::entity_backward(p, &gi, &e, 1.0, g)
                    }
                }),
            ),
            (
                "nil",
                Box::new({
                    let gi = gi.clone();
                    move |p: &Params| scorer::nil_edge_score(p, &gi).unwrap()
                }),
                Box::new({
                    let gi = gi.clone();
                    move |p: &Params, g: &mut scorer::Gradients| {
                        scorer::nil_edge_backward(p, &gi, 1.0, g)
                    }
                }),
            ),
        ];
        for (name, forward, backward) in cases {
            let mut grads = params.new_gradients();
            backward(&params, &mut grads);
            let err = finite_difference_max_rel_err(&mut params, &grads, |p| forward(p), step);
            out.track_max("max_rel_err", err);
            if err > tol {
                out.fail(format!("draw {draw} {name}: max rel err {err:.3e}"));
            }
        }
    }
    out
}

/// Finite-difference checks of the full local and global losses on random
/// small documents, rejection-sampled clear of the rectifier kink.
pub fn check_loss_gradients(seed: u64, n_docs: usize, step: f64, tol: f64) -> SuiteOutcome {
    let mut out = SuiteOutcome::new("loss-gradients");
    let dims = Dims { d_g: 8, d_e: 6, d_phi: 4, h: 8 };
    for doc in 0..n_docs {
        let mut sub = 0u64;
        let (mut params, spans, gold) = loop {
            let doc_seed = seed
                .wrapping_add(doc as u64)
                .wrapping_mul(2862933555777941757)
                .wrapping_add(sub);
            let mut rng = ChaCha8Rng::seed_from_u64(doc_seed);
            let (spans, gold) = random_small_doc(&mut rng, dims);
            let params = Params::init(dims, doc_seed ^ 0xaaaa);
            if scorer::rectifier_margin(&params, &spans) > 3.0 * step {
                break (params, spans, gold);
            }
            sub += 1;
        };

        let mut grads = params.new_gradients();
        local_loss_and_grads(&params, &spans, &gold, true, Some(&mut grads)).unwrap();
        let err = finite_difference_max_rel_err(
            &mut params,
            &grads,
            |p| local_loss_and_grads(p, &spans, &gold, true, None).unwrap().0,
            step,
        );
        out.track_max("local_max_rel_err", err);
        if err > tol {
            out.fail(format!("doc {doc}: local loss max rel err {err:.3e}"));
        }

        let mut grads = params.new_gradients();
        let graph = build_graph(&params, &spans).unwrap();
        let constraint = derive_constraint(&graph, &spans, &gold);
        global_loss_and_grads(&params, &spans, &graph, &constraint, &mut grads).unwrap();
        let err = finite_difference_max_rel_err(
            &mut params,
            &grads,
            |p| {
                let graph = build_graph(p, &spans).unwrap();
                let constraint = derive_constraint(&graph, &spans, &gold);
                global_loss(&graph, &constraint).unwrap()
            },
            step,
        );
        out.track_max("global_max_rel_err", err);
        if err > tol {
            out.fail(format!("doc {doc}: global loss max rel err {err:.3e}"));
        }
    }
    out
}

/// Checks one arborescence against the numerator structure: every node's
/// parent must be admissible and every NIL component must hang off the root
/// through exactly one child.
fn tree_is_constraint_consistent(
    graph: &ScoredGraph,
    constraint: &ClusterConstraint,
    parent: &[Option<usize>],
) -> bool {
    let root = graph.root;
    for comp in &constraint.linked {
        for &m in &comp.mention_nodes {
            let p = parent[m].expect("non-root node");
            let ok = p == comp.entity_node || comp.mention_nodes.contains(&p);
            if !ok {
                return false;
            }
        }
        // no outside mention may hang under this entity
        for (node, p) in parent.iter().enumerate() {
            if *p == Some(comp.entity_node) && !comp.mention_nodes.contains(&node) {
                return false;
            }
        }
    }
    for comp in &constraint.nil {
        let mut root_children = 0;
        for &m in comp {
            let p = parent[m].expect("non-root node");
            if p == root {
                root_children += 1;
            } else if !comp.contains(&p) {
                return false;
            }
        }
        if root_children != 1 {
            return false;
        }
    }
    for &s in &constraint.root_spans {
        if parent[s] != Some(root) {
            return false;
        }
    }
    true
}

/// Loss non-negativity, the zero-loss case, and the factorized numerator
/// against brute-force enumeration filtered by constraint consistency.
pub fn check_loss_properties(seed: u64, n_cases: usize, tol: f64) -> SuiteOutcome {
    let mut out = SuiteOutcome::new("loss-properties");
    let dims = Dims { d_g: 8, d_e: 6, d_phi: 4, h: 8 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..n_cases {
        let (spans, gold) = random_small_doc(&mut rng, dims);
        let params = Params::init(dims, seed.wrapping_add(7000 + case as u64));
        let graph = build_graph(&params, &spans).unwrap();
        if graph.num_nodes() - 1 > crate::oracle::MAX_ORACLE_NODES {
            continue;
        }
        let constraint = derive_constraint(&graph, &spans, &gold);
        let loss = match global_loss(&graph, &constraint) {
            Ok(l) => l,
            Err(e) => {
                out.fail(format!("case {case}: loss failed: {e}"));
                continue;
            }
        };
        if loss < -tol {
            out.fail(format!("case {case}: negative loss {loss}"));
        }
        out.track_max("min_loss_violation", (-loss).max(0.0));

        // factorization: the numerator equals the brute-force sum over
        // constraint-consistent trees
        let trees = enumerate_arborescences(&graph).expect("guarded above");
        let mut consistent = Vec::new();
        for (edges, score) in &trees.trees {
            let mut parent = vec![None; graph.num_nodes()];
            for &ei in edges {
                parent[graph.edges[ei].to] = Some(graph.edges[ei].from);
            }
            if tree_is_constraint_consistent(&graph, &constraint, &parent) {
                consistent.push(*score);
            }
        }
        let brute_numerator = crate::oracle::log_sum_exp(consistent.into_iter());
        let numerator = constrained_log_partition(&graph, &constraint).unwrap();
        let err = (numerator - brute_numerator).abs() / brute_numerator.abs().max(1.0);
        out.track_max("max_factorization_err", err);
        if err > tol {
            out.fail(format!(
                "case {case}: constrained logZ {numerator} vs brute {brute_numerator}"
            ));
        }
    }

    // a constraint admitting every tree has zero loss
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    for case in 0..20 {
        let w = rng.gen_range(-2.0..2.0);
        let graph = ScoredGraph::from_weighted_edges(1, &[(0, 1, w)]);
        let constraint = ClusterConstraint { nil: vec![vec![1]], ..Default::default() };
        let loss = global_loss(&graph, &constraint).unwrap();
        if loss.abs() > 1e-10 {
            out.fail(format!("zero case {case}: loss {loss}"));
        }
    }
    out
}

/// Hand-derived metric fixtures.
pub fn check_metric_fixtures(tol: f64) -> SuiteOutcome {
    let mut out = SuiteOutcome::new("metrics");
    let set = |spans: &[(usize, usize)]| -> metrics::Cluster { spans.iter().copied().collect() };
    let gold = vec![set(&[(0, 1), (1, 2), (2, 3)]), set(&[(3, 4), (4, 5)])];
    let pred = vec![set(&[(0, 1), (1, 2)]), set(&[(2, 3)]), set(&[(3, 4), (4, 5)])];

    let cases = [
        ("muc.p", metrics::muc(&gold, &pred).precision, 1.0),
        ("muc.r", metrics::muc(&gold, &pred).recall, 2.0 / 3.0),
        ("muc.f", metrics::muc(&gold, &pred).f1, 0.8),
        ("b3.p", metrics::b_cubed(&gold, &pred).precision, 1.0),
        ("b3.r", metrics::b_cubed(&gold, &pred).recall, 11.0 / 15.0),
        ("b3.f", metrics::b_cubed(&gold, &pred).f1, 22.0 / 26.0),
        ("ceafe.p", metrics::ceaf_e(&gold, &pred).precision, 0.6),
        ("ceafe.r", metrics::ceaf_e(&gold, &pred).recall, 0.9),
        ("ceafe.f", metrics::ceaf_e(&gold, &pred).f1, 0.72),
    ];
    for (name, got, want) in cases {
        if let Some(msg) = compare_value(name, got, want, tol) {
            out.fail(msg);
        }
    }
    out
}

/// Runs every suite at its acceptance-grade settings.
pub fn run_all(seed: u64) -> Vec<SuiteOutcome> {
    vec![
        check_mtt(seed, 500, 6, 1e-9),
        check_edmonds(seed.wrapping_add(1), 500, 6),
        check_scorer_gradients(seed.wrapping_add(2), 20, 1e-4, 1e-4),
        check_loss_gradients(seed.wrapping_add(3), 10, 1e-4, 1e-4),
        check_loss_properties(seed.wrapping_add(4), 200, 1e-9),
        check_metric_fixtures(1e-12),
    ]
}

/// Runs one named suite at the same settings as [`run_all`].
pub fn run_suite(name: &str, seed: u64) -> Option<SuiteOutcome> {
    match name {
        "mtt" => Some(check_mtt(seed, 500, 6, 1e-9)),
        "edmonds" => Some(check_edmonds(seed.wrapping_add(1), 500, 6)),
        "scorer-gradients" => Some(check_scorer_gradients(seed.wrapping_add(2), 20, 1e-4, 1e-4)),
        "loss-gradients" => Some(check_loss_gradients(seed.wrapping_add(3), 10, 1e-4, 1e-4)),
        "loss-properties" => Some(check_loss_properties(seed.wrapping_add(4), 200, 1e-9)),
        "metrics" => Some(check_metric_fixtures(1e-12)),
        _ => None,
    }
}
