//! The local antecedent-ranking model: every span distributes probability
//! over its earlier spans, its candidate entities and a dummy option, with a
//! marginalized gold likelihood and greedy decoding into clusters and links.

use std::collections::BTreeSet;

use crate::corpus::{GoldCluster, SpanCandidate};
use crate::decode::{DocPrediction, PredCluster};
use crate::oracle::log_sum_exp;
use crate::scorer::{
    coref_edge_backward, entity_score, link_edge_backward, pair_score, prune_score, Gradients,
    Params, ScorerError,
};

/// One option a span can attach to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocalChoice {
    /// The dummy option with fixed score 0.
    Dummy,
    /// An earlier span, by pruned index.
    Antecedent(usize),
    /// One of the span's own candidates, by candidate-list index.
    Entity(usize),
}

/// Scored options of one span. The dummy is always present at index 0;
/// antecedents strictly precede the span in pruned order.
#[derive(Debug, Clone)]
pub struct SpanOptions {
    pub choices: Vec<LocalChoice>,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LocalDiagnostics {
    /// Gold mentions of linked clusters whose target set came up empty and
    /// fell back to the dummy option.
    pub epsilon_fallbacks: usize,
}

fn phi_p_all(params: &Params, spans: &[SpanCandidate]) -> Result<Vec<f64>, ScorerError> {
    spans.iter().map(|sc| prune_score(params, &sc.g)).collect()
}

/// Builds the scored option list of span `i` over pruned spans.
pub fn span_options(
    params: &Params,
    spans: &[SpanCandidate],
    i: usize,
    include_entities: bool,
    phi_p: &[f64],
) -> Result<SpanOptions, ScorerError> {
    let mut choices = vec![LocalChoice::Dummy];
    let mut scores = vec![0.0];
    for j in 0..i {
        choices.push(LocalChoice::Antecedent(j));
        scores.push(phi_p[i] + phi_p[j] + pair_score(params, &spans[i].g, &spans[j].g, i - j)?);
    }
    if include_entities {
        for (ci, cand) in spans[i].candidates.iter().enumerate() {
            choices.push(LocalChoice::Entity(ci));
            scores.push(phi_p[i] + entity_score(params, &spans[i].g, &cand.embedding)?);
        }
    }
    Ok(SpanOptions { choices, scores })
}

/// Softmax over option scores, shifted by the maximum for overflow safety.
pub fn local_probability(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn cluster_assignment(spans: &[SpanCandidate], gold: &[GoldCluster]) -> Vec<Option<usize>> {
    spans
        .iter()
        .map(|sc| {
            gold.iter()
                .position(|cluster| cluster.mentions.contains(&sc.span()))
        })
        .collect()
}

/// Derives the per-span gold target sets (indices into each span's option
/// list): same-cluster antecedents plus the gold entity when it is on the
/// span's candidate list. Non-gold spans and spans left without any target
/// fall back to the dummy option.
pub fn derive_targets(
    params_options: &[SpanOptions],
    spans: &[SpanCandidate],
    gold: &[GoldCluster],
) -> (Vec<Vec<usize>>, LocalDiagnostics) {
    let cluster_of = cluster_assignment(spans, gold);
    let mut diag = LocalDiagnostics::default();
    let mut target_sets = Vec::with_capacity(spans.len());
    for (i, opts) in params_options.iter().enumerate() {
        let mut targets = Vec::new();
        if let Some(ci) = cluster_of[i] {
            for (oi, choice) in opts.choices.iter().enumerate() {
                match *choice {
                    LocalChoice::Antecedent(j) if cluster_of[j] == Some(ci) => targets.push(oi),
                    LocalChoice::Entity(c)
                        if gold[ci].link.as_deref()
                            == Some(spans[i].candidates[c].entity_id.as_str()) =>
                    {
                        targets.push(oi)
                    }
                    _ => {}
                }
            }
            if targets.is_empty() {
                if gold[ci].link.is_some() {
                    diag.epsilon_fallbacks += 1;
                }
                targets.push(0);
            }
        } else {
            targets.push(0);
        }
        target_sets.push(targets);
    }
    (target_sets, diag)
}

/// Marginalized negative log-likelihood over explicit target sets, with
/// optional gradient accumulation. The gradient of each option score is its
/// model probability minus its renormalized gold posterior.
pub fn local_loss_on_targets(
    params: &Params,
    spans: &[SpanCandidate],
    options: &[SpanOptions],
    target_sets: &[Vec<usize>],
    mut grads: Option<&mut Gradients>,
) -> f64 {
    let mut loss = 0.0;
    for (i, opts) in options.iter().enumerate() {
        let lse_all = log_sum_exp(opts.scores.iter().copied());
        let targets: BTreeSet<usize> = target_sets[i].iter().copied().collect();
        let lse_gold = log_sum_exp(targets.iter().map(|&t| opts.scores[t]));
        loss += lse_all - lse_gold;
        if let Some(grads) = grads.as_deref_mut() {
            for (oi, choice) in opts.choices.iter().enumerate() {
                let p = (opts.scores[oi] - lse_all).exp();
                let q = if targets.contains(&oi) {
                    (opts.scores[oi] - lse_gold).exp()
                } else {
                    0.0
                };
                let d = p - q;
                match *choice {
                    LocalChoice::Dummy => {}
                    LocalChoice::Antecedent(j) => {
                        coref_edge_backward(params, &spans[i].g, &spans[j].g, i - j, d, grads)
                    }
                    LocalChoice::Entity(c) => link_edge_backward(
                        params,
                        &spans[i].g,
                        &spans[i].candidates[c].embedding,
                        d,
                        grads,
                    ),
                }
            }
        }
    }
    loss
}

/// Full local loss over a pruned document: builds options, derives targets
/// from gold and returns the marginalized negative log-likelihood.
pub fn local_loss_and_grads(
    params: &Params,
    spans: &[SpanCandidate],
    gold: &[GoldCluster],
    include_entities: bool,
    grads: Option<&mut Gradients>,
) -> Result<(f64, LocalDiagnostics), ScorerError> {
    let phi_p = phi_p_all(params, spans)?;
    let options: Vec<SpanOptions> = (0..spans.len())
        .map(|i| span_options(params, spans, i, include_entities, &phi_p))
        .collect::<Result<_, _>>()?;
    let (target_sets, diag) = derive_targets(&options, spans, gold);
    let loss = local_loss_on_targets(params, spans, &options, &target_sets, grads);
    Ok((loss, diag))
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind((0..n).collect())
    }

    fn find(&mut self, x: usize) -> usize {
        if self.0[x] != x {
            let root = self.find(self.0[x]);
            self.0[x] = root;
        }
        self.0[x]
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Resolves precomputed argmax choices into cluster predictions: antecedent
/// choices are unioned, spans choosing the dummy with no inbound chooser are
/// dropped, and each cluster takes the highest-scoring entity choice among
/// its members (ties toward the earliest mention).
pub fn decode_choices(
    options: &[SpanOptions],
    spans: &[SpanCandidate],
    doc_id: &str,
) -> DocPrediction {
    let n = spans.len();
    // argmax with strict improvement, so ties resolve toward the dummy,
    // then earlier antecedents, then earlier candidates
    let mut picked: Vec<(LocalChoice, f64)> = Vec::with_capacity(n);
    for opts in options {
        let mut best = (opts.choices[0], opts.scores[0]);
        for (choice, score) in opts.choices.iter().zip(&opts.scores).skip(1) {
            if *score > best.1 {
                best = (*choice, *score);
            }
        }
        picked.push(best);
    }

    let mut uf = UnionFind::new(n);
    for (i, (choice, _)) in picked.iter().enumerate() {
        if let LocalChoice::Antecedent(j) = choice {
            uf.union(i, *j);
        }
    }

    let mut components: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..n {
        let root = uf.find(i);
        components.entry(root).or_default().push(i);
    }

    let mut clusters = Vec::new();
    for (_, members) in components {
        // best entity choice in the component, score first, earliest second
        let mut link: Option<(f64, usize, &str)> = None;
        for &m in &members {
            if let (LocalChoice::Entity(c), score) = picked[m] {
                let id = spans[m].candidates[c].entity_id.as_str();
                let replace = match link {
                    None => true,
                    Some((s, i, _)) => score > s || (score == s && m < i),
                };
                if replace {
                    link = Some((score, m, id));
                }
            }
        }
        if members.len() == 1 && link.is_none() {
            continue; // dummy singleton: indistinguishable from a non-mention
        }
        clusters.push(PredCluster {
            mentions: members.iter().map(|&m| spans[m].span()).collect(),
            link: link.map(|(_, _, id)| id.to_string()),
        });
    }
    clusters.sort_by(|a, b| a.mentions.cmp(&b.mentions));
    DocPrediction { doc_id: doc_id.to_string(), clusters }
}

/// Greedy decoding: each span takes its argmax option, then choices resolve
/// into clusters and links.
pub fn local_decode(
    params: &Params,
    spans: &[SpanCandidate],
    include_entities: bool,
    doc_id: &str,
) -> Result<DocPrediction, ScorerError> {
    let phi_p = phi_p_all(params, spans)?;
    let options: Vec<SpanOptions> = (0..spans.len())
        .map(|i| span_options(params, spans, i, include_entities, &phi_p))
        .collect::<Result<_, _>>()?;
    Ok(decode_choices(&options, spans, doc_id))
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
            g: vec![0.1; 6],
            candidates: cands
                .iter()
                .map(|id| EntityCandidate {
                    entity_id: id.to_string(),
                    prior: 0.5,
                    embedding: vec![0.3; 4],
                })
                .collect(),
        }
    }

    #[test]
    fn uniform_three_way_distribution() {
        let params = Params::zeros(dims());
        let spans = vec![span(0, &[]), span(1, &["E"])];
        let phi_p = phi_p_all(&params, &spans).unwrap();
        let opts = span_options(&params, &spans, 1, true, &phi_p).unwrap();
        assert_eq!(opts.choices.len(), 3); // dummy, antecedent, entity
        let p = local_probability(&opts.scores);
        for x in &p {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_option_set_is_a_point_mass_on_the_dummy() {
        let params = Params::zeros(dims());
        let spans = vec![span(0, &[])];
        let phi_p = phi_p_all(&params, &spans).unwrap();
        let opts = span_options(&params, &spans, 0, true, &phi_p).unwrap();
        assert_eq!(opts.choices, vec![LocalChoice::Dummy]);
        assert_eq!(local_probability(&opts.scores), vec![1.0]);
    }

    #[test]
    fn softmax_values_match_direct_evaluation() {
        let p = local_probability(&[2.0, 0.0, 0.0]);
        let e2 = 2f64.exp();
        let z = e2 + 2.0;
        assert!((p[0] - e2 / z).abs() < 1e-12);
        assert!((p[0] - 0.787).abs() < 1e-3);
        assert!((p[1] - 0.106).abs() < 1e-3);
    }

    #[test]
    fn probabilities_sum_to_one_and_shift_invariant() {
        let scores = vec![1.3, -0.2, 0.0, 4.1];
        let p = local_probability(&scores);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = scores.iter().map(|s| s + 123.0).collect();
        let q = local_probability(&shifted);
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_linked_mention_uniform_loss_is_ln3() {
        let params = Params::zeros(dims());
        let spans = vec![span(0, &[]), span(1, &["E"])];
        let gold = vec![GoldCluster { mentions: vec![(1, 2)], link: Some("E".into()) }];
        let (loss, diag) = local_loss_and_grads(&params, &spans, &gold, true, None).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
        assert_eq!(diag.epsilon_fallbacks, 0);
    }

    #[test]
    fn all_targets_everywhere_means_zero_loss() {
        let params = Params::zeros(dims());
        let spans = vec![span(0, &[]), span(1, &["E"])];
        let phi_p = phi_p_all(&params, &spans).unwrap();
        let options: Vec<SpanOptions> = (0..2)
            .map(|i| span_options(&params, &spans, i, true, &phi_p).unwrap())
            .collect();
        let targets: Vec<Vec<usize>> =
            options.iter().map(|o| (0..o.choices.len()).collect()).collect();
        let loss = local_loss_on_targets(&params, &spans, &options, &targets, None);
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn unsolvable_first_mention_falls_back_to_dummy() {
        let params = Params::zeros(dims());
        // linked cluster whose only mention lacks the gold entity candidate
        let spans = vec![span(0, &["WRONG"])];
        let gold = vec![GoldCluster { mentions: vec![(0, 1)], link: Some("E".into()) }];
        let (loss, diag) = local_loss_and_grads(&params, &spans, &gold, true, None).unwrap();
        assert_eq!(diag.epsilon_fallbacks, 1);
        assert!(loss.is_finite());
    }

    #[test]
    fn local_gradient_matches_finite_differences() {
        use crate::scorer::finite_difference_max_rel_err;
        let mut params = Params::init(dims(), 42);
        let spans = vec![span(0, &["A"]), span(1, &["A", "B"]), span(2, &[])];
        let gold = vec![GoldCluster { mentions: vec![(0, 1), (2, 3)], link: Some("A".into()) }];
        let mut grads = params.new_gradients();
        local_loss_and_grads(&params, &spans, &gold, true, Some(&mut grads)).unwrap();
        let err = finite_difference_max_rel_err(
            &mut params,
            &grads,
            |p| local_loss_and_grads(p, &spans, &gold, true, None).unwrap().0,
            1e-4,
        );
        assert!(err < 1e-4, "max rel err {err}");
    }

    fn options_from_table(table: &[Vec<(LocalChoice, f64)>]) -> Vec<SpanOptions> {
        table
            .iter()
            .map(|row| SpanOptions {
                choices: row.iter().map(|&(c, _)| c).collect(),
                scores: row.iter().map(|&(_, s)| s).collect(),
            })
            .collect()
    }

    #[test]
    fn decode_chain_resolution() {
        // m1 -> entity E, m2 -> m1: one cluster {m1, m2} linked to E
        let spans = vec![span(0, &["E"]), span(1, &[])];
        let options = options_from_table(&[
            vec![(LocalChoice::Dummy, 0.0), (LocalChoice::Entity(0), 2.0)],
            vec![(LocalChoice::Dummy, 0.0), (LocalChoice::Antecedent(0), 1.5)],
        ]);
        let pred = decode_choices(&options, &spans, "d");
        assert_eq!(pred.clusters.len(), 1);
        assert_eq!(pred.clusters[0].mentions, vec![(0, 1), (1, 2)]);
        assert_eq!(pred.clusters[0].link.as_deref(), Some("E"));
    }

    #[test]
    fn decode_all_dummy_is_empty() {
        let spans = vec![span(0, &[]), span(1, &[])];
        let options = options_from_table(&[
            vec![(LocalChoice::Dummy, 0.0)],
            vec![(LocalChoice::Dummy, 0.0), (LocalChoice::Antecedent(0), -1.0)],
        ]);
        let pred = decode_choices(&options, &spans, "d");
        assert!(pred.clusters.is_empty());
    }

    #[test]
    fn decode_split_by_entity_choice() {
        // m1 -> E1 (3), m2 -> m1, m3 -> E2 (5): clusters {m1, m2} -> E1, {m3} -> E2
        let spans = vec![span(0, &["E1"]), span(1, &[]), span(2, &["E2"])];
        let options = options_from_table(&[
            vec![(LocalChoice::Dummy, 0.0), (LocalChoice::Entity(0), 3.0)],
            vec![(LocalChoice::Dummy, 0.0), (LocalChoice::Antecedent(0), 2.0)],
            vec![
                (LocalChoice::Dummy, 0.0),
                (LocalChoice::Antecedent(1), 4.0),
                (LocalChoice::Entity(0), 5.0),
            ],
        ]);
        let pred = decode_choices(&options, &spans, "d");
        assert_eq!(pred.clusters.len(), 2);
        assert_eq!(pred.clusters[0].mentions, vec![(0, 1), (1, 2)]);
        assert_eq!(pred.clusters[0].link.as_deref(), Some("E1"));
        assert_eq!(pred.clusters[1].mentions, vec![(2, 3)]);
        assert_eq!(pred.clusters[1].link.as_deref(), Some("E2"));
    }

    #[test]
    fn forward_only_entity_is_unreachable_for_earlier_mentions() {
        // gold entity only on the later mention's candidate list: whatever the
        // scores, the earlier mention can only join a cluster whose earliest
        // member cannot pick the entity, so {m0, m1} -> E is never decoded
        let spans = vec![span(0, &[]), span(1, &["E"])];
        for (a, b) in [(5.0, 1.0), (1.0, 5.0), (3.0, 3.0)] {
            let options = options_from_table(&[
                vec![(LocalChoice::Dummy, 0.0)],
                vec![
                    (LocalChoice::Dummy, 0.0),
                    (LocalChoice::Antecedent(0), a),
                    (LocalChoice::Entity(0), b),
                ],
            ]);
            let pred = decode_choices(&options, &spans, "d");
            let linked_pair = pred
                .clusters
                .iter()
                .any(|c| c.mentions.len() == 2 && c.link.is_some());
            assert!(!linked_pair);
        }
    }
}
