//! Training and evaluation: run configuration, the per-document gradient
//! loop with an Adam optimizer, the four model variants and report files.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    attach_candidates, enumerate_spans, load_alias_table, load_corpus, AliasTable, CorpusError,
    CorpusFormat, Document, FeatureConfig, Span, SpanCandidate,
};
use crate::decode::{edmonds_msa, extract_clusters, DecodeError, DocPrediction, PredCluster};
use crate::global::{derive_constraint, global_loss_and_grads, GlobalError};
use crate::graph::build_graph;
use crate::local::{local_decode, local_loss_and_grads};
use crate::metrics::{evaluate_documents, EvalReport};
use crate::oracle::log_sum_exp;
use crate::scorer::{entity_backward, entity_score, prune_spans, Dims, Gradients, Params, ScorerError};
use crate::synth::SynthError;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error(transparent)]
    Global(#[from] GlobalError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch} on document {doc_id}")]
    Diverged { epoch: usize, doc_id: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Antecedent ranking only (no entity options anywhere).
    CorefOnly,
    /// Per-mention softmax over candidate entities only.
    LinkerOnly,
    /// Joint antecedent plus entity ranking per span.
    Local,
    /// Spanning-tree model with the tree likelihood.
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub step_size: f64,
    /// Multiplicative per-epoch step decay.
    pub decay: f64,
    pub epochs: usize,
    pub l2: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig { step_size: 1e-3, decay: 1.0, epochs: 20, l2: 0.0 }
    }
}

/// Everything the pipeline needs besides file paths; one document per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub model: ModelKind,
    pub seed: u64,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_prune_ratio")]
    pub prune_ratio: f64,
    #[serde(default = "default_prune_cap")]
    pub prune_cap: usize,
    #[serde(default = "default_max_span_width")]
    pub max_span_width: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub dims: Dims,
}

fn default_prune_ratio() -> f64 {
    0.4
}
fn default_prune_cap() -> usize {
    300
}
fn default_max_span_width() -> usize {
    5
}
fn default_k() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunPaths {
    pub corpus: String,
    pub alias_table: String,
    #[serde(default)]
    pub dev_corpus: Option<String>,
    pub checkpoint: String,
    pub report: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub settings: TrainSettings,
    pub paths: RunPaths,
}

pub fn load_run_config<P: AsRef<Path>>(path: P) -> Result<RunConfig, RunError> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| RunError::Config(e.to_string()))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosticCounts {
    /// Local targets that fell back to the dummy option on linked clusters.
    pub epsilon_fallbacks: usize,
    /// Linked gold clusters degraded to NIL in the tree numerator.
    pub unsolvable_clusters: usize,
    /// Documents skipped because no spanning tree existed.
    pub no_spanning_tree: usize,
    /// Linker-only mentions skipped for lacking the gold candidate.
    pub skipped_mentions: usize,
}

impl DiagnosticCounts {
    fn add(&mut self, other: &DiagnosticCounts) {
        self.epsilon_fallbacks += other.epsilon_fallbacks;
        self.unsolvable_clusters += other.unsolvable_clusters;
        self.no_spanning_tree += other.no_spanning_tree;
        self.skipped_mentions += other.skipped_mentions;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub diagnostics: DiagnosticCounts,
    pub dev: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub model: ModelKind,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub totals: DiagnosticCounts,
}

impl TrainReport {
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }
}

// ---------------------------------------------------------------------------
// Adam.

/// Adam with bias correction; step sizes scale per parameter by the inverse
/// root of the second-moment estimate.
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(n: usize) -> Adam {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn step(&mut self, params: &mut Params, grads: &Gradients, lr: f64) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        let data = params.flat_mut();
        for i in 0..data.len() {
            let g = grads.flat()[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / b1t;
            let v_hat = self.v[i] / b2t;
            data[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Document preparation.

/// A document with its enumerated spans (featurized, candidates attached)
/// and its gold mention spans prepared the same way.
pub struct PreparedDoc {
    pub doc: Document,
    pub spans: Vec<SpanCandidate>,
    pub gold_spans: Vec<SpanCandidate>,
}

pub fn prepare_documents(
    settings: &TrainSettings,
    docs: &[Document],
    table: &AliasTable,
) -> Result<Vec<PreparedDoc>, RunError> {
    let feat = FeatureConfig {
        d_g: settings.dims.d_g,
        d_e: settings.dims.d_e,
        seed: settings.seed,
    };
    let mut out = Vec::with_capacity(docs.len());
    for doc in docs {
        let spans = enumerate_spans(doc, settings.max_span_width);
        let attached = attach_candidates(doc, &spans, table, settings.k, &feat)?;
        let mut gold_mentions: Vec<Span> = doc
            .gold_clusters
            .iter()
            .flat_map(|c| c.mentions.iter().copied())
            .collect();
        gold_mentions.sort_unstable();
        let gold_spans = attach_candidates(doc, &gold_mentions, table, settings.k, &feat)?;
        out.push(PreparedDoc { doc: doc.clone(), spans: attached, gold_spans });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Per-model losses.

fn linker_loss_and_grads(
    params: &Params,
    prepared: &PreparedDoc,
    mut grads: Option<&mut Gradients>,
    counts: &mut DiagnosticCounts,
) -> Result<f64, RunError> {
    let gold_link: BTreeMap<Span, &str> = prepared
        .doc
        .gold_clusters
        .iter()
        .filter_map(|c| c.link.as_deref().map(|l| (l, &c.mentions)))
        .flat_map(|(l, mentions)| mentions.iter().map(move |&m| (m, l)))
        .collect();
    let mut loss = 0.0;
    for sc in &prepared.gold_spans {
        let Some(&link) = gold_link.get(&sc.span()) else { continue };
        let gold_idx = sc.candidates.iter().position(|c| c.entity_id == link);
        let Some(gold_idx) = gold_idx else {
            counts.skipped_mentions += 1;
            continue;
        };
        let scores: Vec<f64> = sc
            .candidates
            .iter()
            .map(|c| entity_score(params, &sc.g, &c.embedding))
            .collect::<Result<_, _>>()?;
        let lse = log_sum_exp(scores.iter().copied());
        loss += lse - scores[gold_idx];
        if let Some(grads) = grads.as_deref_mut() {
            for (ci, cand) in sc.candidates.iter().enumerate() {
                let d = (scores[ci] - lse).exp() - if ci == gold_idx { 1.0 } else { 0.0 };
                entity_backward(params, &sc.g, &cand.embedding, d, grads);
            }
        }
    }
    Ok(loss)
}

fn doc_loss_and_grads(
    model: ModelKind,
    params: &Params,
    prepared: &PreparedDoc,
    pruned: &[SpanCandidate],
    grads: &mut Gradients,
    counts: &mut DiagnosticCounts,
) -> Result<Option<f64>, RunError> {
    match model {
        ModelKind::Global => {
            let graph = build_graph(params, pruned)?;
            let constraint = derive_constraint(&graph, pruned, &prepared.doc.gold_clusters);
            counts.unsolvable_clusters += constraint.unsolvable_clusters;
            match global_loss_and_grads(params, pruned, &graph, &constraint, grads) {
                Ok(loss) => Ok(Some(loss)),
                Err(GlobalError::NoSpanningTree) => {
                    counts.no_spanning_tree += 1;
                    Ok(None)
                }
                Err(e) => Err(e.into()),
            }
        }
        ModelKind::Local | ModelKind::CorefOnly => {
            let include_entities = model == ModelKind::Local;
            let (loss, diag) = local_loss_and_grads(
                params,
                pruned,
                &prepared.doc.gold_clusters,
                include_entities,
                Some(grads),
            )?;
            counts.epsilon_fallbacks += diag.epsilon_fallbacks;
            Ok(Some(loss))
        }
        ModelKind::LinkerOnly => {
            Ok(Some(linker_loss_and_grads(params, prepared, Some(grads), counts)?))
        }
    }
}

// ---------------------------------------------------------------------------
// Decoding and evaluation.

fn decode_one(
    model: ModelKind,
    params: &Params,
    settings: &TrainSettings,
    prepared: &PreparedDoc,
) -> Result<DocPrediction, RunError> {
    let doc_id = prepared.doc.doc_id.as_str();
    match model {
        ModelKind::Global => {
            let pruned = prune_spans(
                params,
                &prepared.spans,
                prepared.doc.tokens.len(),
                settings.prune_ratio,
                settings.prune_cap,
            )?;
            let graph = build_graph(params, &pruned)?;
            let tree = edmonds_msa(&graph)?;
            Ok(extract_clusters(&graph, &tree, &pruned, doc_id)?)
        }
        ModelKind::Local | ModelKind::CorefOnly => {
            let pruned = prune_spans(
                params,
                &prepared.spans,
                prepared.doc.tokens.len(),
                settings.prune_ratio,
                settings.prune_cap,
            )?;
            Ok(local_decode(params, &pruned, model == ModelKind::Local, doc_id)?)
        }
        ModelKind::LinkerOnly => {
            // links every gold-matching span to its argmax candidate,
            // restricted to the span's own candidate list
            let mut clusters = Vec::new();
            for sc in &prepared.gold_spans {
                if sc.candidates.is_empty() {
                    continue;
                }
                let mut best = (0usize, f64::NEG_INFINITY);
                for (ci, cand) in sc.candidates.iter().enumerate() {
                    let s = entity_score(params, &sc.g, &cand.embedding)?;
                    if s > best.1 {
                        best = (ci, s);
                    }
                }
                clusters.push(PredCluster {
                    mentions: vec![sc.span()],
                    link: Some(sc.candidates[best.0].entity_id.clone()),
                });
            }
            clusters.sort_by(|a, b| a.mentions.cmp(&b.mentions));
            Ok(DocPrediction { doc_id: doc_id.to_string(), clusters })
        }
    }
}

/// Decodes every document under the given model.
pub fn decode_prepared(
    model: ModelKind,
    params: &Params,
    settings: &TrainSettings,
    prepared: &[PreparedDoc],
) -> Result<Vec<DocPrediction>, RunError> {
    prepared
        .iter()
        .map(|pd| decode_one(model, params, settings, pd))
        .collect()
}

/// Candidate entity ids of each gold mention span, per document; feeds the
/// corner-case metric.
pub fn gold_candidate_map(
    prepared: &[PreparedDoc],
) -> BTreeMap<String, BTreeMap<Span, BTreeSet<String>>> {
    prepared
        .iter()
        .map(|pd| {
            let spans = pd
                .gold_spans
                .iter()
                .map(|sc| {
                    (
                        sc.span(),
                        sc.candidates.iter().map(|c| c.entity_id.clone()).collect(),
                    )
                })
                .collect();
            (pd.doc.doc_id.clone(), spans)
        })
        .collect()
}

/// Decodes and scores prepared documents; a pure function of the checkpoint
/// and the corpus.
pub fn evaluate_prepared(
    model: ModelKind,
    params: &Params,
    settings: &TrainSettings,
    prepared: &[PreparedDoc],
) -> Result<(EvalReport, Vec<DocPrediction>), RunError> {
    let preds = decode_prepared(model, params, settings, prepared)?;
    let docs: Vec<Document> = prepared.iter().map(|pd| pd.doc.clone()).collect();
    let candidates = gold_candidate_map(prepared);
    Ok((evaluate_documents(&docs, &preds, &candidates), preds))
}

// ---------------------------------------------------------------------------
// The training loop.

/// Trains on prepared documents; deterministic given the settings and the
/// corpus. Returns the best-dev checkpoint and the per-epoch report.
pub fn train_documents(
    settings: &TrainSettings,
    train_docs: &[Document],
    table: &AliasTable,
    dev_docs: Option<&[Document]>,
) -> Result<(Params, TrainReport), RunError> {
    let prepared = prepare_documents(settings, train_docs, table)?;
    let dev_prepared = match dev_docs {
        Some(docs) => prepare_documents(settings, docs, table)?,
        None => prepare_documents(settings, train_docs, table)?,
    };

    let mut params = Params::init(settings.dims, settings.seed);
    let mut grads = params.new_gradients();
    let mut adam = Adam::new(params.num_params());
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(settings.seed ^ 0x9e37_79b9_7f4a_7c15);

    let mut best: Option<(f64, usize, Params)> = None;
    let mut epochs = Vec::new();
    let mut totals = DiagnosticCounts::default();

    for epoch in 1..=settings.optimizer.epochs {
        let lr = settings.optimizer.step_size * settings.optimizer.decay.powi(epoch as i32 - 1);
        order.shuffle(&mut shuffle_rng);
        let mut counts = DiagnosticCounts::default();
        let mut loss_sum = 0.0;
        for &di in &order {
            let pd = &prepared[di];
            let pruned = prune_spans(
                &params,
                &pd.spans,
                pd.doc.tokens.len(),
                settings.prune_ratio,
                settings.prune_cap,
            )?;
            grads.zero();
            let Some(loss) =
                doc_loss_and_grads(settings.model, &params, pd, &pruned, &mut grads, &mut counts)?
            else {
                continue;
            };
            if !loss.is_finite() {
                return Err(RunError::Diverged { epoch, doc_id: pd.doc.doc_id.clone() });
            }
            loss_sum += loss;
            if settings.optimizer.l2 > 0.0 {
                let l2 = settings.optimizer.l2;
                let pdata = params.flat().to_vec();
                for (g, w) in grads.flat_mut().iter_mut().zip(pdata) {
                    *g += l2 * w;
                }
            }
            adam.step(&mut params, &grads, lr);
        }

        let (dev, _) = evaluate_prepared(settings.model, &params, settings, &dev_prepared)?;
        let score = dev.coref_avg_f1 + dev.el_mention.f1;
        if best.as_ref().map_or(true, |(s, _, _)| score > *s) {
            best = Some((score, epoch, params.clone()));
        }
        totals.add(&counts);
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / prepared.len().max(1) as f64,
            diagnostics: counts,
            dev,
        });
    }

    let (best_epoch, best_params) = match best {
        Some((_, epoch, p)) => (epoch, p),
        None => (0, params), // zero epochs: the checkpoint is the initialization
    };
    let report = TrainReport {
        model: settings.model,
        seed: settings.seed,
        epochs,
        best_epoch,
        totals,
    };
    Ok((best_params, report))
}

// ---------------------------------------------------------------------------
// File-level orchestration used by the CLI.

pub fn train(config: &RunConfig) -> Result<(Params, TrainReport), RunError> {
    let docs = load_corpus(&config.paths.corpus, CorpusFormat::Jsonl)?;
    let table = load_alias_table(&config.paths.alias_table)?;
    let dev = match &config.paths.dev_corpus {
        Some(path) => Some(load_corpus(path, CorpusFormat::Jsonl)?),
        None => None,
    };
    let (params, report) = train_documents(&config.settings, &docs, &table, dev.as_deref())?;
    params.save(&config.paths.checkpoint)?;
    std::fs::write(&config.paths.report, report.to_json_pretty())?;
    Ok((params, report))
}

fn load_checkpoint_checked(config: &RunConfig, path: &str) -> Result<Params, RunError> {
    let params = Params::load(path)?;
    if params.dims != config.settings.dims {
        return Err(RunError::Config(format!(
            "checkpoint dims {:?} do not match config dims {:?}",
            params.dims, config.settings.dims
        )));
    }
    Ok(params)
}

pub fn evaluate(
    config: &RunConfig,
    checkpoint_path: &str,
    corpus_path: &str,
) -> Result<EvalReport, RunError> {
    let params = load_checkpoint_checked(config, checkpoint_path)?;
    let docs = load_corpus(corpus_path, CorpusFormat::Jsonl)?;
    let table = load_alias_table(&config.paths.alias_table)?;
    let prepared = prepare_documents(&config.settings, &docs, &table)?;
    let (report, _) = evaluate_prepared(config.settings.model, &params, &config.settings, &prepared)?;
    Ok(report)
}

pub fn decode(
    config: &RunConfig,
    checkpoint_path: &str,
    corpus_path: &str,
) -> Result<Vec<DocPrediction>, RunError> {
    let params = load_checkpoint_checked(config, checkpoint_path)?;
    let docs = load_corpus(corpus_path, CorpusFormat::Jsonl)?;
    let table = load_alias_table(&config.paths.alias_table)?;
    let prepared = prepare_documents(&config.settings, &docs, &table)?;
    decode_prepared(config.settings.model, &params, &config.settings, &prepared)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_synthetic, SynthConfig};

    fn settings(model: ModelKind, epochs: usize) -> TrainSettings {
        TrainSettings {
            model,
            seed: 13,
            optimizer: OptimizerConfig { epochs, ..Default::default() },
            prune_ratio: 0.8,
            prune_cap: 300,
            max_span_width: 1,
            k: 8,
            dims: Dims { d_g: 16, d_e: 8, d_phi: 4, h: 8 },
        }
    }

    fn tiny_corpus() -> crate::corpus::Corpus {
        generate_synthetic(
            &SynthConfig {
                n_docs: 6,
                clusters_per_doc: (2, 3),
                mentions_per_cluster: (1, 3),
                nil_fraction: 0.3,
                d_g: 16,
                d_e: 8,
                ..Default::default()
            },
            71,
        )
        .unwrap()
    }

    #[test]
    fn zero_epochs_returns_the_initialization() {
        let corpus = tiny_corpus();
        let s = settings(ModelKind::Global, 0);
        let (params, report) =
            train_documents(&s, &corpus.documents, &corpus.alias_table, None).unwrap();
        assert_eq!(params, Params::init(s.dims, s.seed));
        assert_eq!(report.best_epoch, 0);
        assert!(report.epochs.is_empty());
    }

    #[test]
    fn fixed_seed_gives_identical_reports() {
        let corpus = tiny_corpus();
        for model in [ModelKind::Global, ModelKind::Local, ModelKind::CorefOnly, ModelKind::LinkerOnly] {
            let s = settings(model, 2);
            let (p1, r1) =
                train_documents(&s, &corpus.documents, &corpus.alias_table, None).unwrap();
            let (p2, r2) =
                train_documents(&s, &corpus.documents, &corpus.alias_table, None).unwrap();
            assert_eq!(p1, p2);
            assert_eq!(r1.to_json_pretty(), r2.to_json_pretty());
        }
    }

    #[test]
    fn degenerate_documents_do_not_crash_training() {
        use crate::corpus::{AliasTable, Document};
        let docs = vec![
            Document {
                doc_id: "empty".into(),
                tokens: vec!["x".into()],
                gold_clusters: vec![],
                span_features: Default::default(),
            },
            Document {
                doc_id: "one-mention".into(),
                tokens: vec!["a".into(), "b".into()],
                gold_clusters: vec![crate::corpus::GoldCluster {
                    mentions: vec![(0, 1)],
                    link: Some("E".into()),
                }],
                span_features: Default::default(),
            },
        ];
        let table = AliasTable::new(); // no candidates anywhere
        for model in [ModelKind::Global, ModelKind::Local] {
            let s = settings(model, 2);
            let (_, report) = train_documents(&s, &docs, &table, None).unwrap();
            assert_eq!(report.epochs.len(), 2);
        }
    }

    #[test]
    fn evaluate_is_idempotent() {
        let corpus = tiny_corpus();
        let s = settings(ModelKind::Global, 1);
        let (params, _) =
            train_documents(&s, &corpus.documents, &corpus.alias_table, None).unwrap();
        let prepared = prepare_documents(&s, &corpus.documents, &corpus.alias_table).unwrap();
        let (r1, _) = evaluate_prepared(s.model, &params, &s, &prepared).unwrap();
        let (r2, _) = evaluate_prepared(s.model, &params, &s, &prepared).unwrap();
        assert_eq!(r1.to_json_pretty(), r2.to_json_pretty());
    }

    #[test]
    fn run_config_json_round_trip() {
        let config = RunConfig {
            settings: settings(ModelKind::Local, 3),
            paths: RunPaths {
                corpus: "train.jsonl".into(),
                alias_table: "aliases.jsonl".into(),
                dev_corpus: None,
                checkpoint: "model.json".into(),
                report: "report.json".into(),
            },
        };
        let json = serde_json::to_string_pretty(&config).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, config);
        assert!(json.contains(r#""model": "local""#));
    }
}
