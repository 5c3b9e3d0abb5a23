//! Coreference and entity-linking evaluation: MUC, B-cubed, CEAF-e and
//! their average F1, strong-matching mention-level linking F1, cluster-level
//! hard F1, corner-case accuracy and per-cluster-size link accuracy.
//!
//! All metrics aggregate exact per-document counts, so corpus-level scores
//! are independent of document order, and 0/0 ratios resolve to 0.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{Document, Span};
use crate::decode::DocPrediction;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Exact numerators and denominators of one precision/recall pair; summing
/// these across documents and finalizing is the corpus-level metric.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricCounts {
    pub p_num: f64,
    pub p_den: f64,
    pub r_num: f64,
    pub r_den: f64,
}

impl MetricCounts {
    pub fn add(&mut self, other: &MetricCounts) {
        self.p_num += other.p_num;
        self.p_den += other.p_den;
        self.r_num += other.r_num;
        self.r_den += other.r_den;
    }

    pub fn prf(&self) -> Prf {
        let precision = ratio(self.p_num, self.p_den);
        let recall = ratio(self.r_num, self.r_den);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Prf { precision, recall, f1 }
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

pub type Cluster = BTreeSet<Span>;

// ---------------------------------------------------------------------------
// Coreference metrics.

/// Number of parts a cluster splits into under a partitioning cluster set;
/// mentions missing from every partition cluster count as singleton parts.
fn partition_count(cluster: &Cluster, by: &[Cluster]) -> usize {
    let mut parts = 0;
    let mut covered = 0;
    for other in by {
        let overlap = cluster.intersection(other).count();
        if overlap > 0 {
            parts += 1;
            covered += overlap;
        }
    }
    parts + (cluster.len() - covered)
}

/// Link-based MUC counts.
pub fn muc_counts(gold: &[Cluster], pred: &[Cluster]) -> MetricCounts {
    let mut c = MetricCounts::default();
    for g in gold {
        c.r_num += (g.len() - partition_count(g, pred)) as f64;
        c.r_den += (g.len() - 1) as f64;
    }
    for p in pred {
        c.p_num += (p.len() - partition_count(p, gold)) as f64;
        c.p_den += (p.len() - 1) as f64;
    }
    c
}

pub fn muc(gold: &[Cluster], pred: &[Cluster]) -> Prf {
    muc_counts(gold, pred).prf()
}

/// Mention-based B-cubed counts.
pub fn b_cubed_counts(gold: &[Cluster], pred: &[Cluster]) -> MetricCounts {
    let mut c = MetricCounts::default();
    for g in gold {
        for m in g {
            let overlap = pred
                .iter()
                .find(|p| p.contains(m))
                .map_or(0, |p| g.intersection(p).count());
            c.r_num += overlap as f64 / g.len() as f64;
            c.r_den += 1.0;
        }
    }
    for p in pred {
        for m in p {
            let overlap = gold
                .iter()
                .find(|g| g.contains(m))
                .map_or(0, |g| p.intersection(g).count());
            c.p_num += overlap as f64 / p.len() as f64;
            c.p_den += 1.0;
        }
    }
    c
}

pub fn b_cubed(gold: &[Cluster], pred: &[Cluster]) -> Prf {
    b_cubed_counts(gold, pred).prf()
}

/// Entity-based CEAF counts with similarity
/// `phi4(c, r) = 2 |c n r| / (|c| + |r|)` under the optimal one-to-one
/// cluster alignment.
pub fn ceaf_e_counts(gold: &[Cluster], pred: &[Cluster]) -> MetricCounts {
    let phi4 = |g: &Cluster, p: &Cluster| -> f64 {
        2.0 * g.intersection(p).count() as f64 / (g.len() + p.len()) as f64
    };
    let matched = max_similarity_assignment(gold.len(), pred.len(), |i, j| phi4(&gold[i], &pred[j]));
    let total: f64 = matched.iter().map(|&(i, j)| phi4(&gold[i], &pred[j])).sum();
    MetricCounts {
        p_num: total,
        p_den: pred.len() as f64,
        r_num: total,
        r_den: gold.len() as f64,
    }
}

pub fn ceaf_e(gold: &[Cluster], pred: &[Cluster]) -> Prf {
    ceaf_e_counts(gold, pred).prf()
}

/// Arithmetic mean of the MUC, B-cubed and CEAF-e F1 scores.
pub fn coref_avg_f1(muc: &Prf, b3: &Prf, ceaf_e: &Prf) -> f64 {
    (muc.f1 + b3.f1 + ceaf_e.f1) / 3.0
}

// ---------------------------------------------------------------------------
// Optimal assignment (Kuhn-Munkres with potentials, O(n^3)), maximizing
// total similarity. Rectangular inputs are padded to square with zeros.

fn max_similarity_assignment(
    rows: usize,
    cols: usize,
    sim: impl Fn(usize, usize) -> f64,
) -> Vec<(usize, usize)> {
    let n = rows.max(cols);
    if n == 0 {
        return Vec::new();
    }
    let cost = |i: usize, j: usize| -> f64 {
        if i < rows && j < cols {
            -sim(i, j)
        } else {
            0.0
        }
    };
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = Vec::new();
    for j in 1..=n {
        let i = p[j];
        if i >= 1 && i - 1 < rows && j - 1 < cols {
            out.push((i - 1, j - 1));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Entity-linking metrics (strong matching, non-NIL only).

/// Predicted clusters as `(mention set, link)` pairs.
pub type LinkedClusters = Vec<(Cluster, Option<String>)>;

/// Mention-level linking counts: a true positive is a predicted linked
/// mention whose span exactly matches a gold non-NIL mention and whose
/// entity equals that mention's gold link.
pub fn el_mention_counts(
    gold_links: &BTreeMap<Span, String>,
    pred: &LinkedClusters,
) -> MetricCounts {
    let mut c = MetricCounts { r_den: gold_links.len() as f64, ..Default::default() };
    for (mentions, link) in pred {
        let Some(link) = link else { continue };
        for m in mentions {
            c.p_den += 1.0;
            if gold_links.get(m) == Some(link) {
                c.p_num += 1.0;
                c.r_num += 1.0;
            }
        }
    }
    c
}

/// Cluster-level hard linking counts: a true positive is a predicted linked
/// cluster whose mention set exactly equals a gold linked cluster's and
/// whose link matches.
pub fn el_hard_counts(gold_linked: &[(Cluster, String)], pred: &LinkedClusters) -> MetricCounts {
    let mut c = MetricCounts { r_den: gold_linked.len() as f64, ..Default::default() };
    for (mentions, link) in pred {
        let Some(link) = link else { continue };
        c.p_den += 1.0;
        if gold_linked.iter().any(|(g, gl)| g == mentions && gl == link) {
            c.p_num += 1.0;
            c.r_num += 1.0;
        }
    }
    c
}

/// Corner-case link accuracy counts over gold non-NIL mentions whose own
/// candidate list lacks the gold entity but whose cluster is solvable
/// (some member carries the gold entity as a candidate).
pub fn corner_counts(
    gold_linked: &[(Cluster, String)],
    pred: &LinkedClusters,
    candidates: &BTreeMap<Span, BTreeSet<String>>,
) -> (usize, usize) {
    let pred_link = pred_link_by_span(pred);
    let mut num = 0;
    let mut den = 0;
    let empty = BTreeSet::new();
    for (mentions, link) in gold_linked {
        let solvable = mentions
            .iter()
            .any(|m| candidates.get(m).unwrap_or(&empty).contains(link));
        if !solvable {
            continue;
        }
        for m in mentions {
            if candidates.get(m).unwrap_or(&empty).contains(link) {
                continue; // not a corner case
            }
            den += 1;
            if pred_link.get(m) == Some(link) {
                num += 1;
            }
        }
    }
    (num, den)
}

fn pred_link_by_span(pred: &LinkedClusters) -> BTreeMap<Span, String> {
    let mut map = BTreeMap::new();
    for (mentions, link) in pred {
        if let Some(link) = link {
            for &m in mentions {
                map.insert(m, link.clone());
            }
        }
    }
    map
}

/// Per-cluster link accuracy, split by gold cluster size. A gold linked
/// cluster counts as correct only when every one of its mentions has an
/// exactly-matching predicted span carrying the gold link.
pub fn cluster_size_counts(
    gold_linked: &[(Cluster, String)],
    pred: &LinkedClusters,
) -> ((usize, usize), (usize, usize)) {
    let pred_link = pred_link_by_span(pred);
    let mut singleton = (0usize, 0usize);
    let mut multi = (0usize, 0usize);
    for (mentions, link) in gold_linked {
        let correct = mentions.iter().all(|m| pred_link.get(m) == Some(link));
        let slot = if mentions.len() == 1 { &mut singleton } else { &mut multi };
        slot.1 += 1;
        if correct {
            slot.0 += 1;
        }
    }
    (singleton, multi)
}

// ---------------------------------------------------------------------------
// Corpus-level report.

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportCounts {
    pub muc: MetricCounts,
    pub b3: MetricCounts,
    pub ceaf_e: MetricCounts,
    pub el_mention: MetricCounts,
    pub el_hard: MetricCounts,
    pub corner_correct: usize,
    pub corner_total: usize,
    pub singleton_correct: usize,
    pub singleton_total: usize,
    pub multi_correct: usize,
    pub multi_total: usize,
}

/// All metric values for one prediction set against gold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub muc: Prf,
    pub b3: Prf,
    pub ceaf_e: Prf,
    pub coref_avg_f1: f64,
    pub el_mention: Prf,
    pub el_hard: Prf,
    pub corner_accuracy: f64,
    pub cluster_accuracy_singleton: f64,
    pub cluster_accuracy_multi: f64,
    pub counts: ReportCounts,
}

impl EvalReport {
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }

    /// Fixed-order metric table, one `(name, precision, recall, f1)` row per
    /// line.
    pub fn table(&self) -> String {
        let row = |name: &str, prf: &Prf| {
            format!(
                "{name:<12} {:>8.4} {:>8.4} {:>8.4}\n",
                prf.precision, prf.recall, prf.f1
            )
        };
        let scalar = |name: &str, v: f64| format!("{name:<12} {v:>8.4}\n");
        let mut out = String::new();
        out.push_str(&row("muc", &self.muc));
        out.push_str(&row("b3", &self.b3));
        out.push_str(&row("ceaf_e", &self.ceaf_e));
        out.push_str(&scalar("coref_avg", self.coref_avg_f1));
        out.push_str(&row("el_mention", &self.el_mention));
        out.push_str(&row("el_hard", &self.el_hard));
        out.push_str(&scalar("corner_acc", self.corner_accuracy));
        out.push_str(&scalar("acc_single", self.cluster_accuracy_singleton));
        out.push_str(&scalar("acc_multi", self.cluster_accuracy_multi));
        out
    }
}

fn doc_clusters(doc: &Document) -> Vec<Cluster> {
    doc.gold_clusters
        .iter()
        .map(|c| c.mentions.iter().copied().collect())
        .collect()
}

fn doc_linked(doc: &Document) -> Vec<(Cluster, String)> {
    doc.gold_clusters
        .iter()
        .filter_map(|c| {
            c.link
                .clone()
                .map(|link| (c.mentions.iter().copied().collect(), link))
        })
        .collect()
}

/// Evaluates predictions against gold documents, aligned by `doc_id`.
/// `candidates` carries each document's per-span candidate entity ids for
/// the corner-case metric; documents may be absent from it.
pub fn evaluate_documents(
    golds: &[Document],
    preds: &[DocPrediction],
    candidates: &BTreeMap<String, BTreeMap<Span, BTreeSet<String>>>,
) -> EvalReport {
    let pred_by_doc: BTreeMap<&str, &DocPrediction> =
        preds.iter().map(|p| (p.doc_id.as_str(), p)).collect();
    let empty_candidates = BTreeMap::new();

    let mut counts = ReportCounts::default();
    for doc in golds {
        let gold_clusters = doc_clusters(doc);
        let gold_linked = doc_linked(doc);
        let gold_links: BTreeMap<Span, String> = gold_linked
            .iter()
            .flat_map(|(cluster, link)| cluster.iter().map(move |&m| (m, link.clone())))
            .collect();
        let pred: LinkedClusters = pred_by_doc
            .get(doc.doc_id.as_str())
            .map(|p| {
                p.clusters
                    .iter()
                    .map(|c| (c.mentions.iter().copied().collect(), c.link.clone()))
                    .collect()
            })
            .unwrap_or_default();
        let pred_clusters: Vec<Cluster> = pred.iter().map(|(c, _)| c.clone()).collect();

        counts.muc.add(&muc_counts(&gold_clusters, &pred_clusters));
        counts.b3.add(&b_cubed_counts(&gold_clusters, &pred_clusters));
        counts.ceaf_e.add(&ceaf_e_counts(&gold_clusters, &pred_clusters));
        counts.el_mention.add(&el_mention_counts(&gold_links, &pred));
        counts.el_hard.add(&el_hard_counts(&gold_linked, &pred));

        let doc_candidates = candidates.get(&doc.doc_id).unwrap_or(&empty_candidates);
        let (num, den) = corner_counts(&gold_linked, &pred, doc_candidates);
        counts.corner_correct += num;
        counts.corner_total += den;
        let ((sn, sd), (mn, md)) = cluster_size_counts(&gold_linked, &pred);
        counts.singleton_correct += sn;
        counts.singleton_total += sd;
        counts.multi_correct += mn;
        counts.multi_total += md;
    }

    let muc = counts.muc.prf();
    let b3 = counts.b3.prf();
    let ceaf_e = counts.ceaf_e.prf();
    EvalReport {
        coref_avg_f1: coref_avg_f1(&muc, &b3, &ceaf_e),
        muc,
        b3,
        ceaf_e,
        el_mention: counts.el_mention.prf(),
        el_hard: counts.el_hard.prf(),
        corner_accuracy: ratio(counts.corner_correct as f64, counts.corner_total as f64),
        cluster_accuracy_singleton: ratio(
            counts.singleton_correct as f64,
            counts.singleton_total as f64,
        ),
        cluster_accuracy_multi: ratio(counts.multi_correct as f64, counts.multi_total as f64),
        counts,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(spans: &[Span]) -> Cluster {
        spans.iter().copied().collect()
    }

    // gold {a,b,c},{d,e}; pred {a,b},{c},{d,e} with a..e at token offsets 0..5
    fn running_fixture() -> (Vec<Cluster>, Vec<Cluster>) {
        let gold = vec![set(&[(0, 1), (1, 2), (2, 3)]), set(&[(3, 4), (4, 5)])];
        let pred = vec![set(&[(0, 1), (1, 2)]), set(&[(2, 3)]), set(&[(3, 4), (4, 5)])];
        (gold, pred)
    }

    #[test]
    fn muc_running_fixture() {
        let (gold, pred) = running_fixture();
        let prf = muc(&gold, &pred);
        assert!((prf.precision - 1.0).abs() < 1e-12);
        assert!((prf.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((prf.f1 - 0.8).abs() < 1e-12);
    }

    #[test]
    fn b_cubed_running_fixture() {
        let (gold, pred) = running_fixture();
        let prf = b_cubed(&gold, &pred);
        assert!((prf.precision - 1.0).abs() < 1e-12);
        assert!((prf.recall - 11.0 / 15.0).abs() < 1e-12);
        assert!((prf.f1 - 22.0 / 26.0).abs() < 1e-12);
    }

    #[test]
    fn ceaf_e_running_fixture() {
        let (gold, pred) = running_fixture();
        let prf = ceaf_e(&gold, &pred);
        assert!((prf.precision - 0.6).abs() < 1e-12);
        assert!((prf.recall - 0.9).abs() < 1e-12);
        assert!((prf.f1 - 0.72).abs() < 1e-12);
    }

    #[test]
    fn average_f1_of_the_fixture() {
        let (gold, pred) = running_fixture();
        let avg = coref_avg_f1(&muc(&gold, &pred), &b_cubed(&gold, &pred), &ceaf_e(&gold, &pred));
        assert!((avg - (0.8 + 22.0 / 26.0 + 0.72) / 3.0).abs() < 1e-12);
        assert!((avg - 0.78872).abs() < 1e-5);
    }

    #[test]
    fn identical_clusters_score_one_and_empty_scores_zero() {
        let (gold, _) = running_fixture();
        for f in [muc, b_cubed, ceaf_e] {
            let prf = f(&gold, &gold.clone());
            assert!((prf.f1 - 1.0).abs() < 1e-12);
            let prf = f(&gold, &[]);
            assert_eq!((prf.precision, prf.recall, prf.f1), (0.0, 0.0, 0.0));
        }
    }

    #[test]
    fn all_singleton_predictions_have_zero_muc_recall() {
        let (gold, _) = running_fixture();
        let pred: Vec<Cluster> = gold.iter().flat_map(|c| c.iter().map(|&m| set(&[m]))).collect();
        let prf = muc(&gold, &pred);
        assert_eq!(prf.recall, 0.0);
    }

    #[test]
    fn el_mention_fixture() {
        // 3 gold linked mentions; 2 correct, 1 wrong entity, 1 spurious span
        let gold_links: BTreeMap<Span, String> = [
            ((0, 1), "A".to_string()),
            ((2, 3), "B".to_string()),
            ((4, 5), "C".to_string()),
        ]
        .into_iter()
        .collect();
        let pred: LinkedClusters = vec![
            (set(&[(0, 1)]), Some("A".into())),
            (set(&[(2, 3)]), Some("B".into())),
            (set(&[(4, 5)]), Some("X".into())),
            (set(&[(7, 8)]), Some("C".into())),
        ];
        let prf = el_mention_counts(&gold_links, &pred).prf();
        assert!((prf.precision - 0.5).abs() < 1e-12);
        assert!((prf.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((prf.f1 - 4.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn off_by_one_span_is_not_a_match() {
        let gold_links: BTreeMap<Span, String> = [((0, 2), "A".to_string())].into_iter().collect();
        let pred: LinkedClusters = vec![(set(&[(0, 1)]), Some("A".into()))];
        let c = el_mention_counts(&gold_links, &pred);
        assert_eq!((c.p_num, c.p_den, c.r_num, c.r_den), (0.0, 1.0, 0.0, 1.0));
    }

    #[test]
    fn el_hard_fixture() {
        let gold: Vec<(Cluster, String)> = vec![
            (set(&[(0, 1), (1, 2)]), "A".into()),
            (set(&[(3, 4), (5, 6)]), "B".into()),
        ];
        let pred: LinkedClusters = vec![
            (set(&[(0, 1), (1, 2)]), Some("A".into())),
            (set(&[(3, 4)]), Some("B".into())),
            (set(&[(5, 6)]), Some("B".into())),
        ];
        let prf = el_hard_counts(&gold, &pred).prf();
        assert!((prf.precision - 1.0 / 3.0).abs() < 1e-12);
        assert!((prf.recall - 0.5).abs() < 1e-12);
    }

    #[test]
    fn missing_mention_breaks_the_hard_match() {
        let gold: Vec<(Cluster, String)> = vec![(set(&[(0, 1), (1, 2)]), "A".into())];
        let pred: LinkedClusters = vec![(set(&[(0, 1)]), Some("A".into()))];
        let c = el_hard_counts(&gold, &pred);
        assert_eq!(c.p_num, 0.0);
    }

    fn corner_fixture() -> (Vec<(Cluster, String)>, BTreeMap<Span, BTreeSet<String>>) {
        // four 2-mention clusters; the first mention of each lacks the gold
        // entity in its candidate list, the second carries it
        let mut gold = Vec::new();
        let mut candidates = BTreeMap::new();
        for k in 0..4usize {
            let a = (10 * k, 10 * k + 1);
            let b = (10 * k + 2, 10 * k + 3);
            let link = format!("E{k}");
            gold.push((set(&[a, b]), link.clone()));
            candidates.insert(a, ["D0".to_string(), "D1".to_string()].into_iter().collect());
            candidates.insert(b, [link, "D0".to_string()].into_iter().collect());
        }
        (gold, candidates)
    }

    #[test]
    fn corner_accuracy_counts() {
        let (gold, candidates) = corner_fixture();
        // gold copied as predictions: every corner mention linked
        let pred: LinkedClusters =
            gold.iter().map(|(c, l)| (c.clone(), Some(l.clone()))).collect();
        assert_eq!(corner_counts(&gold, &pred, &candidates), (4, 4));
        // three of four clusters correct
        let mut partial = pred.clone();
        partial[3].1 = Some("WRONG".into());
        assert_eq!(corner_counts(&gold, &partial, &candidates), (3, 4));
        // candidate-list-restricted predictions can never hit a corner case
        let restricted: LinkedClusters = gold
            .iter()
            .flat_map(|(c, _)| {
                c.iter().map(|&m| {
                    let top = candidates[&m].iter().next().unwrap().clone();
                    (set(&[m]), Some(top))
                })
            })
            .collect();
        assert_eq!(corner_counts(&gold, &restricted, &candidates).0, 0);
    }

    #[test]
    fn unsolvable_clusters_are_excluded_from_corner_counts() {
        let gold: Vec<(Cluster, String)> = vec![(set(&[(0, 1), (2, 3)]), "E".into())];
        let mut candidates = BTreeMap::new();
        candidates.insert((0, 1), BTreeSet::from(["D".to_string()]));
        candidates.insert((2, 3), BTreeSet::from(["D".to_string()]));
        assert_eq!(corner_counts(&gold, &vec![], &candidates), (0, 0));
    }

    #[test]
    fn cluster_size_accuracy_fixture() {
        let gold: Vec<(Cluster, String)> = vec![
            (set(&[(0, 1)]), "A".into()),
            (set(&[(2, 3), (4, 5)]), "B".into()),
        ];
        // singleton correct; only one mention of the pair linked correctly
        let pred: LinkedClusters = vec![
            (set(&[(0, 1)]), Some("A".into())),
            (set(&[(2, 3)]), Some("B".into())),
            (set(&[(4, 5)]), Some("X".into())),
        ];
        let ((sn, sd), (mn, md)) = cluster_size_counts(&gold, &pred);
        assert_eq!((sn, sd), (1, 1));
        assert_eq!((mn, md), (0, 1));
        // gold copied
        let copy: LinkedClusters = gold.iter().map(|(c, l)| (c.clone(), Some(l.clone()))).collect();
        let ((sn, sd), (mn, md)) = cluster_size_counts(&gold, &copy);
        assert_eq!((sn, sd), (1, 1));
        assert_eq!((mn, md), (1, 1));
    }

    #[test]
    fn hard_tp_never_exceeds_mention_level_consistency() {
        let (gold, _) = running_fixture();
        let gold_linked: Vec<(Cluster, String)> = gold
            .iter()
            .enumerate()
            .map(|(i, c)| (c.clone(), format!("E{i}")))
            .collect();
        let pred: LinkedClusters =
            gold_linked.iter().map(|(c, l)| (c.clone(), Some(l.clone()))).collect();
        let hard = el_hard_counts(&gold_linked, &pred);
        assert!(hard.p_num <= pred.len() as f64);
        assert_eq!(hard.p_num, 2.0);
    }

    fn arb_clusters(max_mentions: usize) -> impl Strategy<Value = Vec<Cluster>> {
        // partition mentions 0..n into clusters by label
        (1..=max_mentions).prop_flat_map(|n| {
            proptest::collection::vec(0..4usize, n).prop_map(move |labels| {
                let mut by_label: BTreeMap<usize, Cluster> = BTreeMap::new();
                for (m, &l) in labels.iter().enumerate() {
                    by_label.entry(l).or_default().insert((m, m + 1));
                }
                by_label.into_values().collect()
            })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn metrics_are_permutation_invariant(
            gold in arb_clusters(8),
            pred in arb_clusters(8),
            seed in 0u64..1000,
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut gold2 = gold.clone();
            let mut pred2 = pred.clone();
            gold2.shuffle(&mut rng);
            pred2.shuffle(&mut rng);
            for f in [muc, b_cubed, ceaf_e] {
                let a = f(&gold, &pred);
                let b = f(&gold2, &pred2);
                prop_assert!((a.f1 - b.f1).abs() < 1e-12);
                prop_assert!((a.precision - b.precision).abs() < 1e-12);
            }
        }

        #[test]
        fn identical_prediction_scores_one(gold in arb_clusters(8)) {
            for f in [muc, b_cubed, ceaf_e] {
                let prf = f(&gold, &gold.clone());
                // MUC of all-singleton gold is 0/0, which resolves to 0
                let all_singletons = gold.iter().all(|c| c.len() == 1);
                if f as usize == muc as usize && all_singletons {
                    prop_assert_eq!(prf.f1, 0.0);
                } else {
                    prop_assert!((prf.f1 - 1.0).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn assignment_matches_exhaustive_search(
            rows in 1usize..=5,
            cols in 1usize..=5,
            seed in 0u64..10_000,
        ) {
            use rand::Rng;
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let sim: Vec<Vec<f64>> = (0..rows)
                .map(|_| (0..cols).map(|_| rng.gen_range(0.0..1.0)).collect())
                .collect();
            let matched = max_similarity_assignment(rows, cols, |i, j| sim[i][j]);
            let got: f64 = matched.iter().map(|&(i, j)| sim[i][j]).sum();
            // brute force over injective row -> col maps
            fn brute(sim: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
                if row == sim.len() {
                    return 0.0;
                }
                // the row may also stay unmatched when cols are scarce
                let mut best = brute(sim, row + 1, used);
                for j in 0..used.len() {
                    if !used[j] {
                        used[j] = true;
                        best = best.max(sim[row][j] + brute(sim, row + 1, used));
                        used[j] = false;
                    }
                }
                best
            }
            let best = brute(&sim, 0, &mut vec![false; cols]);
            prop_assert!((got - best).abs() < 1e-9, "got {got}, best {best}");
        }

        #[test]
        fn ceaf_alignment_matches_permutation_maximum(
            gold in arb_clusters(6),
            pred in arb_clusters(6),
        ) {
            prop_assume!(gold.len() <= 6 && pred.len() <= 6);
            let phi4 = |g: &Cluster, p: &Cluster| {
                2.0 * g.intersection(p).count() as f64 / (g.len() + p.len()) as f64
            };
            let counts = ceaf_e_counts(&gold, &pred);
            fn brute(gold: &[Cluster], pred: &[Cluster], gi: usize, used: &mut Vec<bool>,
                     phi4: &dyn Fn(&Cluster, &Cluster) -> f64) -> f64 {
                if gi == gold.len() {
                    return 0.0;
                }
                let mut best = brute(gold, pred, gi + 1, used, phi4);
                for pj in 0..pred.len() {
                    if !used[pj] {
                        used[pj] = true;
                        best = best.max(phi4(&gold[gi], &pred[pj]) + brute(gold, pred, gi + 1, used, phi4));
                        used[pj] = false;
                    }
                }
                best
            }
            let best = brute(&gold, &pred, 0, &mut vec![false; pred.len()], &phi4);
            prop_assert!((counts.p_num - best).abs() < 1e-9);
        }
    }
}
