//! Synthetic corpus generation for desk-scale experiments: planted span
//! features make the gold structure linearly separable, and candidate lists
//! are built so corner-case mentions (gold entity missing from their own
//! list) always sit in solvable clusters.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AliasEntry, AliasTable, Corpus, Document, GoldCluster};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    Config(String),
}

/// Placement of deficient (corner-case) mentions relative to the cluster
/// sibling that carries the gold candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrderMode {
    /// A carrier mention comes first in every cluster.
    SolvableFirst,
    /// Every deficient mention comes textually before all carriers.
    SolvableLast,
    /// Random within-cluster order.
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_docs: usize,
    /// Real entity vocabulary; each doc samples its cluster entities from it.
    pub n_entities: usize,
    /// Distractor entities used to pad candidate lists.
    pub n_distractors: usize,
    pub clusters_per_doc: (usize, usize),
    pub mentions_per_cluster: (usize, usize),
    /// Length of each alias-table candidate list.
    pub candidate_list_size: usize,
    pub nil_fraction: f64,
    /// Fraction of gold-linked mentions whose candidate list omits the gold
    /// entity (while at least one cluster sibling keeps it).
    pub corner_case_rate: f64,
    pub order_mode: OrderMode,
    pub d_g: usize,
    pub d_e: usize,
    pub feature_noise: f64,
    /// Filler tokens between mentions, inclusive range.
    pub filler_range: (usize, usize),
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_docs: 50,
            n_entities: 24,
            n_distractors: 16,
            clusters_per_doc: (2, 4),
            mentions_per_cluster: (1, 3),
            candidate_list_size: 4,
            nil_fraction: 0.25,
            corner_case_rate: 0.0,
            order_mode: OrderMode::Mixed,
            d_g: 64,
            d_e: 32,
            feature_noise: 0.05,
            filler_range: (1, 2),
        }
    }
}

impl SynthConfig {
    fn slot_count(&self) -> usize {
        self.clusters_per_doc.1
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let err = |msg: String| Err(SynthError::Config(msg));
        if self.n_docs == 0 {
            return err("n_docs must be positive".into());
        }
        if self.clusters_per_doc.0 < 1 || self.clusters_per_doc.0 > self.clusters_per_doc.1 {
            return err(format!("bad clusters_per_doc range {:?}", self.clusters_per_doc));
        }
        if self.mentions_per_cluster.0 < 1 || self.mentions_per_cluster.0 > self.mentions_per_cluster.1 {
            return err(format!("bad mentions_per_cluster range {:?}", self.mentions_per_cluster));
        }
        if self.corner_case_rate > 0.0 && self.mentions_per_cluster.1 < 2 {
            return err(
                "corner_case_rate > 0 requires clusters that can hold a deficient mention \
                 and a carrier (mentions_per_cluster max must be >= 2)"
                    .into(),
            );
        }
        if !(0.0..=1.0).contains(&self.corner_case_rate) || !(0.0..=1.0).contains(&self.nil_fraction) {
            return err("corner_case_rate and nil_fraction must lie in [0, 1]".into());
        }
        if self.n_entities < self.clusters_per_doc.1 {
            return err("n_entities must cover the largest clusters_per_doc".into());
        }
        if self.n_distractors < self.candidate_list_size {
            return err("n_distractors must cover candidate_list_size".into());
        }
        if self.candidate_list_size < 1 {
            return err("candidate_list_size must be positive".into());
        }
        if self.d_g < self.slot_count() + 3 {
            return err(format!(
                "d_g = {} too small for {} cluster slots",
                self.d_g,
                self.slot_count()
            ));
        }
        if self.d_e < 2 {
            return err("d_e must be at least 2".into());
        }
        if self.filler_range.0 < 1 || self.filler_range.0 > self.filler_range.1 {
            return err(format!("bad filler_range {:?}", self.filler_range));
        }
        Ok(())
    }
}

fn real_entity_id(k: usize) -> String {
    format!("E{k:03}")
}

fn distractor_id(k: usize) -> String {
    format!("D{k:03}")
}

/// Entity vector: a strong real/distractor marker in the first slot plus
/// per-entity noise, unit norm.
fn entity_vector(rng: &mut ChaCha8Rng, d_e: usize, real: bool) -> Vec<f64> {
    let mut v = vec![0.0; d_e];
    v[0] = if real { 1.0 } else { -1.0 };
    for x in v.iter_mut().skip(1) {
        *x = rng.gen_range(-0.2..0.2);
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Planted mention vector: mention marker, per-doc cluster slot, linked/NIL
/// flag and noise, unit norm. Non-mention spans are left to the hash
/// featurizer, which scatters them far from this structure.
fn mention_vector(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    slot: usize,
    linked: bool,
) -> Vec<f64> {
    let mut v = vec![0.0; cfg.d_g];
    v[0] = 1.0;
    v[1 + slot] = 1.0;
    v[1 + cfg.slot_count()] = if linked { 1.0 } else { -1.0 };
    for x in v.iter_mut().skip(2 + cfg.slot_count()) {
        *x = rng.gen_range(-cfg.feature_noise..cfg.feature_noise);
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

struct ClusterPlan {
    entity: Option<usize>, // real entity index; None for NIL clusters
    nil_surface: usize,
    size: usize,
    /// deficient flag per member
    deficient: Vec<bool>,
}

/// Generates a corpus deterministically from `(cfg, seed)`.
pub fn generate_synthetic(cfg: &SynthConfig, seed: u64) -> Result<Corpus, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // entity vocabulary and embeddings
    let real_embeddings: Vec<Vec<f64>> =
        (0..cfg.n_entities).map(|_| entity_vector(&mut rng, cfg.d_e, true)).collect();
    let distractor_embeddings: Vec<Vec<f64>> =
        (0..cfg.n_distractors).map(|_| entity_vector(&mut rng, cfg.d_e, false)).collect();

    // alias table: a full and a deficient surface per real entity, plus NIL
    // surfaces (every other one is absent from the table entirely)
    let mut table = AliasTable::new();
    let distractor_entries = |rng: &mut ChaCha8Rng, count: usize, top_prior: f64| {
        let mut pool: Vec<usize> = (0..cfg.n_distractors).collect();
        pool.shuffle(rng);
        pool.truncate(count);
        pool.iter()
            .enumerate()
            .map(|(rank, &d)| AliasEntry {
                entity: distractor_id(d),
                prior: top_prior * 0.7f64.powi(rank as i32),
                embedding: Some(distractor_embeddings[d].clone()),
            })
            .collect::<Vec<_>>()
    };
    for k in 0..cfg.n_entities {
        let mut full = vec![AliasEntry {
            entity: real_entity_id(k),
            prior: 0.8,
            embedding: Some(real_embeddings[k].clone()),
        }];
        full.extend(distractor_entries(&mut rng, cfg.candidate_list_size - 1, 0.1));
        table
            .insert(format!("ent{k}"), full)
            .map_err(SynthError::Config)?;
        let alt = distractor_entries(&mut rng, cfg.candidate_list_size, 0.3);
        table
            .insert(format!("alt{k}"), alt)
            .map_err(SynthError::Config)?;
        if k % 2 == 0 {
            let nil = distractor_entries(&mut rng, cfg.candidate_list_size.min(2), 0.2);
            table
                .insert(format!("nil{k}"), nil)
                .map_err(SynthError::Config)?;
        }
    }

    // first pass: cluster skeletons for the whole corpus
    let mut plans: Vec<Vec<ClusterPlan>> = Vec::with_capacity(cfg.n_docs);
    let mut linked_mentions = 0usize;
    for _ in 0..cfg.n_docs {
        let n_cl = rng.gen_range(cfg.clusters_per_doc.0..=cfg.clusters_per_doc.1);
        let mut entities: Vec<usize> = (0..cfg.n_entities).collect();
        entities.shuffle(&mut rng);
        let mut doc_plans = Vec::with_capacity(n_cl);
        for c in 0..n_cl {
            let nil = rng.gen::<f64>() < cfg.nil_fraction;
            let mut size = rng.gen_range(cfg.mentions_per_cluster.0..=cfg.mentions_per_cluster.1);
            if nil {
                // NIL singletons decode as non-mentions; keep NIL clusters
                // multi-mention so they stay predictable
                size = size.max(2);
            } else {
                linked_mentions += size;
            }
            doc_plans.push(ClusterPlan {
                entity: if nil { None } else { Some(entities[c]) },
                nil_surface: rng.gen_range(0..cfg.n_entities),
                size,
                deficient: vec![false; size],
            });
        }
        plans.push(doc_plans);
    }

    // second pass: mark exactly round(rate * linked mentions) deficient
    // mentions, never touching the designated carrier of each cluster
    let target = (cfg.corner_case_rate * linked_mentions as f64).round() as usize;
    if target > 0 {
        let mut eligible: Vec<(usize, usize, usize)> = Vec::new();
        for (d, doc_plans) in plans.iter().enumerate() {
            for (c, plan) in doc_plans.iter().enumerate() {
                if plan.entity.is_none() || plan.size < 2 {
                    continue;
                }
                let carrier = rng.gen_range(0..plan.size);
                for m in 0..plan.size {
                    if m != carrier {
                        eligible.push((d, c, m));
                    }
                }
            }
        }
        if target > eligible.len() {
            return Err(SynthError::Config(format!(
                "corner_case_rate {} asks for {target} deficient mentions but only {} \
                 cluster members can be deficient; increase mentions_per_cluster or lower \
                 the rate",
                cfg.corner_case_rate,
                eligible.len()
            )));
        }
        eligible.shuffle(&mut rng);
        for &(d, c, m) in eligible.iter().take(target) {
            plans[d][c].deficient[m] = true;
        }
    }

    // third pass: lay out tokens, gold clusters and planted features
    let mut documents = Vec::with_capacity(cfg.n_docs);
    for (d, doc_plans) in plans.iter().enumerate() {
        // interleave clusters across the document
        let mut sequence: Vec<usize> = doc_plans
            .iter()
            .enumerate()
            .flat_map(|(c, plan)| std::iter::repeat(c).take(plan.size))
            .collect();
        sequence.shuffle(&mut rng);

        // within-cluster member order per mode
        let mut member_queues: Vec<Vec<usize>> = doc_plans
            .iter()
            .map(|plan| {
                let mut deficient: Vec<usize> =
                    (0..plan.size).filter(|&m| plan.deficient[m]).collect();
                let mut carriers: Vec<usize> =
                    (0..plan.size).filter(|&m| !plan.deficient[m]).collect();
                deficient.shuffle(&mut rng);
                carriers.shuffle(&mut rng);
                let mut order = match cfg.order_mode {
                    OrderMode::SolvableLast => {
                        deficient.extend(carriers);
                        deficient
                    }
                    OrderMode::SolvableFirst => {
                        carriers.extend(deficient);
                        carriers
                    }
                    OrderMode::Mixed => {
                        carriers.extend(deficient);
                        carriers.shuffle(&mut rng);
                        carriers
                    }
                };
                order.reverse(); // consumed by pop()
                order
            })
            .collect();

        let mut tokens: Vec<String> = Vec::new();
        let mut span_features = std::collections::BTreeMap::new();
        let mut cluster_mentions: Vec<Vec<(usize, usize)>> = vec![Vec::new(); doc_plans.len()];
        for &c in &sequence {
            let fillers = rng.gen_range(cfg.filler_range.0..=cfg.filler_range.1);
            for _ in 0..fillers {
                tokens.push(format!("w{}", rng.gen_range(0..30)));
            }
            let plan = &doc_plans[c];
            let member = member_queues[c].pop().expect("sequence and sizes agree");
            let surface = match plan.entity {
                Some(k) if plan.deficient[member] => format!("alt{k}"),
                Some(k) => format!("ent{k}"),
                None => format!("nil{}", plan.nil_surface),
            };
            let start = tokens.len();
            tokens.push(surface);
            let span = (start, start + 1);
            cluster_mentions[c].push(span);
            span_features.insert(
                span,
                mention_vector(&mut rng, cfg, c, plan.entity.is_some()),
            );
        }
        for _ in 0..rng.gen_range(cfg.filler_range.0..=cfg.filler_range.1) {
            tokens.push(format!("w{}", rng.gen_range(0..30)));
        }

        let gold_clusters = doc_plans
            .iter()
            .enumerate()
            .map(|(c, plan)| {
                let mut mentions = cluster_mentions[c].clone();
                mentions.sort_unstable();
                GoldCluster { mentions, link: plan.entity.map(real_entity_id) }
            })
            .collect();
        let doc = Document {
            doc_id: format!("synth-{d:04}"),
            tokens,
            gold_clusters,
            span_features,
        };
        debug_assert!(doc.validate().is_ok());
        documents.push(doc);
    }

    Ok(Corpus { documents, alias_table: table })
}
