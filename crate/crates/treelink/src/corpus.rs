//! Document and alias-table data model: JSONL file formats, span
//! enumeration, candidate attachment and hashed featurization.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Token span `[start, end)`; `end` is exclusive.
pub type Span = (usize, usize);

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: validation error: {message}")]
    Validation { line: usize, message: String },
    #[error("feature error: {0}")]
    Feature(String),
    #[error("unknown corpus format `{0}`")]
    UnknownFormat(String),
}

/// Supported on-disk corpus encodings. Only JSONL exists today; the id is
/// kept explicit so files self-describe in configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    #[default]
    Jsonl,
}

impl FromStr for CorpusFormat {
    type Err = CorpusError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jsonl" => Ok(CorpusFormat::Jsonl),
            other => Err(CorpusError::UnknownFormat(other.to_string())),
        }
    }
}

impl fmt::Display for CorpusFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("jsonl")
    }
}

/// A set of coreferent gold mentions with a shared entity link
/// (`None` marks a NIL cluster).
#[derive(Debug, Clone, PartialEq)]
pub struct GoldCluster {
    pub mentions: Vec<Span>,
    pub link: Option<String>,
}

/// One input document: tokens, gold annotation and optional precomputed
/// span feature vectors keyed by `(start, end)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub doc_id: String,
    pub tokens: Vec<String>,
    pub gold_clusters: Vec<GoldCluster>,
    pub span_features: BTreeMap<Span, Vec<f64>>,
}

impl Document {
    /// Surface form of a span: tokens joined by single spaces, case kept.
    pub fn surface(&self, span: Span) -> String {
        self.tokens[span.0..span.1].join(" ")
    }

    /// Checks the structural invariants; returns a human-readable message
    /// naming the offending span or cluster on failure.
    pub fn validate(&self) -> Result<(), String> {
        let t = self.tokens.len();
        let mut seen: BTreeMap<Span, usize> = BTreeMap::new();
        for (ci, cluster) in self.gold_clusters.iter().enumerate() {
            if cluster.mentions.is_empty() {
                return Err(format!("doc {}: cluster {} is empty", self.doc_id, ci));
            }
            for &(s, e) in &cluster.mentions {
                if s >= e || e > t {
                    return Err(format!(
                        "doc {}: span ({}, {}) out of bounds for {} tokens",
                        self.doc_id, s, e, t
                    ));
                }
                if let Some(prev) = seen.insert((s, e), ci) {
                    return Err(format!(
                        "doc {}: span ({}, {}) appears in clusters {} and {}",
                        self.doc_id, s, e, prev, ci
                    ));
                }
            }
        }
        for (&(s, e), v) in &self.span_features {
            if s >= e || e > t {
                return Err(format!(
                    "doc {}: feature span ({}, {}) out of bounds for {} tokens",
                    self.doc_id, s, e, t
                ));
            }
            if v.is_empty() {
                return Err(format!("doc {}: feature span ({}, {}) is empty", self.doc_id, s, e));
            }
        }
        Ok(())
    }
}

/// One alias-table candidate: entity id, prior probability and an optional
/// precomputed embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct AliasEntry {
    pub entity: String,
    pub prior: f64,
    pub embedding: Option<Vec<f64>>,
}

/// Map from surface form to its ranked candidate entities. Priors within a
/// surface are non-increasing and every (surface, entity) pair is unique.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AliasTable {
    entries: BTreeMap<String, Vec<AliasEntry>>,
}

impl AliasTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a surface with its ranked candidates, enforcing the table
    /// invariants.
    pub fn insert(&mut self, surface: String, candidates: Vec<AliasEntry>) -> Result<(), String> {
        if self.entries.contains_key(&surface) {
            return Err(format!("duplicate surface `{surface}`"));
        }
        let mut prev = f64::INFINITY;
        let mut ids = std::collections::BTreeSet::new();
        for c in &candidates {
            if !(0.0..=1.0).contains(&c.prior) {
                return Err(format!("surface `{surface}`: prior {} outside [0, 1]", c.prior));
            }
            if c.prior > prev {
                return Err(format!("surface `{surface}`: priors are not non-increasing"));
            }
            prev = c.prior;
            if !ids.insert(c.entity.as_str()) {
                return Err(format!("surface `{surface}`: duplicate entity `{}`", c.entity));
            }
        }
        self.entries.insert(surface, candidates);
        Ok(())
    }

    pub fn lookup(&self, surface: &str) -> Option<&[AliasEntry]> {
        self.entries.get(surface).map(|v| v.as_slice())
    }

    pub fn surfaces(&self) -> impl Iterator<Item = (&String, &Vec<AliasEntry>)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// A candidate entity attached to a span, with its resolved embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityCandidate {
    pub entity_id: String,
    pub prior: f64,
    pub embedding: Vec<f64>,
}

/// A span enriched with its feature vector and ranked candidate list.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanCandidate {
    pub start: usize,
    pub end: usize,
    pub g: Vec<f64>,
    pub candidates: Vec<EntityCandidate>,
}

impl SpanCandidate {
    pub fn span(&self) -> Span {
        (self.start, self.end)
    }
}

/// Documents plus the alias table they are scored against.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub documents: Vec<Document>,
    pub alias_table: AliasTable,
}

impl Corpus {
    pub fn load<P: AsRef<Path>>(
        corpus_path: P,
        alias_path: P,
        format: CorpusFormat,
    ) -> Result<Corpus, CorpusError> {
        Ok(Corpus {
            documents: load_corpus(corpus_path, format)?,
            alias_table: load_alias_table(alias_path)?,
        })
    }
}

// ---------------------------------------------------------------------------
// JSONL records (the exact wire schema).

#[derive(Serialize, Deserialize)]
struct ClusterRecord {
    mentions: Vec<[usize; 2]>,
    link: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct DocumentRecord {
    doc_id: String,
    tokens: Vec<String>,
    clusters: Vec<ClusterRecord>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    span_features: BTreeMap<String, Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct AliasCandidateRecord {
    entity: String,
    prior: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    embedding: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct AliasRecord {
    surface: String,
    candidates: Vec<AliasCandidateRecord>,
}

fn span_key((s, e): Span) -> String {
    format!("{s},{e}")
}

fn parse_span_key(key: &str) -> Option<Span> {
    let (a, b) = key.split_once(',')?;
    Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
}

fn doc_to_record(doc: &Document) -> DocumentRecord {
    DocumentRecord {
        doc_id: doc.doc_id.clone(),
        tokens: doc.tokens.clone(),
        clusters: doc
            .gold_clusters
            .iter()
            .map(|c| ClusterRecord {
                mentions: c.mentions.iter().map(|&(s, e)| [s, e]).collect(),
                link: c.link.clone(),
            })
            .collect(),
        span_features: doc
            .span_features
            .iter()
            .map(|(&sp, v)| (span_key(sp), v.clone()))
            .collect(),
    }
}

fn record_to_doc(rec: DocumentRecord, line: usize) -> Result<Document, CorpusError> {
    let mut span_features = BTreeMap::new();
    for (key, v) in rec.span_features {
        let span = parse_span_key(&key).ok_or_else(|| CorpusError::Validation {
            line,
            message: format!("bad span_features key `{key}`"),
        })?;
        span_features.insert(span, v);
    }
    let doc = Document {
        doc_id: rec.doc_id,
        tokens: rec.tokens,
        gold_clusters: rec
            .clusters
            .into_iter()
            .map(|c| GoldCluster {
                mentions: c.mentions.into_iter().map(|[s, e]| (s, e)).collect(),
                link: c.link,
            })
            .collect(),
        span_features,
    };
    doc.validate()
        .map_err(|message| CorpusError::Validation { line, message })?;
    Ok(doc)
}

/// Loads and validates a JSONL corpus, one document per line.
pub fn load_corpus<P: AsRef<Path>>(
    path: P,
    format: CorpusFormat,
) -> Result<Vec<Document>, CorpusError> {
    let CorpusFormat::Jsonl = format;
    let reader = BufReader::new(File::open(path)?);
    let mut docs = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DocumentRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
        docs.push(record_to_doc(rec, line_no)?);
    }
    Ok(docs)
}

/// Writes documents in the JSONL corpus format.
pub fn write_corpus<P: AsRef<Path>>(path: P, docs: &[Document]) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(File::create(path)?);
    for doc in docs {
        let rec = doc_to_record(doc);
        serde_json::to_writer(&mut w, &rec).map_err(|e| CorpusError::Parse {
            line: 0,
            message: e.to_string(),
        })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Loads and validates a JSONL alias table, one surface per line.
pub fn load_alias_table<P: AsRef<Path>>(path: P) -> Result<AliasTable, CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    let mut table = AliasTable::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AliasRecord = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let candidates = rec
            .candidates
            .into_iter()
            .map(|c| AliasEntry {
                entity: c.entity,
                prior: c.prior,
                embedding: c.embedding,
            })
            .collect();
        table
            .insert(rec.surface, candidates)
            .map_err(|message| CorpusError::Validation { line: line_no, message })?;
    }
    Ok(table)
}

/// Writes an alias table in the JSONL alias format.
pub fn write_alias_table<P: AsRef<Path>>(path: P, table: &AliasTable) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(File::create(path)?);
    for (surface, candidates) in table.surfaces() {
        let rec = AliasRecord {
            surface: surface.clone(),
            candidates: candidates
                .iter()
                .map(|c| AliasCandidateRecord {
                    entity: c.entity.clone(),
                    prior: c.prior,
                    embedding: c.embedding.clone(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &rec).map_err(|e| CorpusError::Parse {
            line: 0,
            message: e.to_string(),
        })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Span enumeration, candidate attachment and featurization.

/// All spans `[start, end)` with `1 <= end - start <= max_span_width`, in
/// lexicographic `(start, end)` order.
pub fn enumerate_spans(doc: &Document, max_span_width: usize) -> Vec<Span> {
    assert!(max_span_width >= 1, "max_span_width must be >= 1");
    let t = doc.tokens.len();
    let mut spans = Vec::new();
    for start in 0..t {
        for end in start + 1..=(start + max_span_width).min(t) {
            spans.push((start, end));
        }
    }
    spans
}

/// Dimensions and seed used to resolve feature vectors that are not carried
/// by the corpus itself.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub d_g: usize,
    pub d_e: usize,
    pub seed: u64,
}

/// Attaches the top-`k` alias-table candidates (by prior) to every span and
/// resolves span/entity vectors. Spans without a table entry keep an empty
/// candidate list.
pub fn attach_candidates(
    doc: &Document,
    spans: &[Span],
    table: &AliasTable,
    k: usize,
    feat: &FeatureConfig,
) -> Result<Vec<SpanCandidate>, CorpusError> {
    assert!(k >= 1, "k must be >= 1");
    let mut out = Vec::with_capacity(spans.len());
    for &span in spans {
        let g = match doc.span_features.get(&span) {
            Some(v) => {
                if v.len() != feat.d_g {
                    return Err(CorpusError::Feature(format!(
                        "doc {}: span ({}, {}) has feature dimension {}, expected {}",
                        doc.doc_id,
                        span.0,
                        span.1,
                        v.len(),
                        feat.d_g
                    )));
                }
                v.clone()
            }
            None => featurize(doc, span, feat.d_g, feat.seed),
        };
        let surface = doc.surface(span);
        let candidates = match table.lookup(&surface) {
            Some(entries) => entries
                .iter()
                .take(k)
                .map(|entry| {
                    let embedding = match &entry.embedding {
                        Some(v) => {
                            if v.len() != feat.d_e {
                                return Err(CorpusError::Feature(format!(
                                    "entity {}: embedding dimension {}, expected {}",
                                    entry.entity,
                                    v.len(),
                                    feat.d_e
                                )));
                            }
                            v.clone()
                        }
                        None => entity_embedding(&entry.entity, feat.d_e, feat.seed),
                    };
                    Ok(EntityCandidate {
                        entity_id: entry.entity.clone(),
                        prior: entry.prior,
                        embedding,
                    })
                })
                .collect::<Result<Vec<_>, _>>()?,
            None => Vec::new(),
        };
        out.push(SpanCandidate {
            start: span.0,
            end: span.1,
            g,
            candidates,
        });
    }
    Ok(out)
}

// FNV-1a, fixed here so feature hashing is stable across platforms and
// toolchain versions.
fn fnv1a(seed: u64, parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x0100_0000_01b3);
    for part in parts {
        for &b in *part {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h ^= 0xff;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn hashed_unit_vector(fields: &[(&str, u8)], dim: usize, seed: u64) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for &(text, tag) in fields {
        let bytes = text.as_bytes();
        for n in 1..=4usize {
            if bytes.len() < n {
                continue;
            }
            for w in bytes.windows(n) {
                let h = fnv1a(seed, &[&[tag, n as u8], w]);
                let idx = (h % dim as u64) as usize;
                let sign = if h & (1 << 63) == 0 { 1.0 } else { -1.0 };
                v[idx] += sign;
            }
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    } else {
        v[0] = 1.0;
    }
    v
}

/// Deterministic span vector from hashed character n-grams (n = 1..4) of the
/// span surface plus a two-token context window, scaled to unit norm.
pub fn featurize(doc: &Document, span: Span, d_g: usize, seed: u64) -> Vec<f64> {
    let left_from = span.0.saturating_sub(2);
    let left = doc.tokens[left_from..span.0].join(" ");
    let right_to = (span.1 + 2).min(doc.tokens.len());
    let right = doc.tokens[span.1..right_to].join(" ");
    let surface = doc.surface(span);
    hashed_unit_vector(&[(&left, 0), (&surface, 1), (&right, 2)], d_g, seed)
}

/// Deterministic unit-norm entity vector hashed from the entity id; used when
/// the alias table carries no embedding for a candidate.
pub fn entity_embedding(entity_id: &str, d_e: usize, seed: u64) -> Vec<f64> {
    hashed_unit_vector(&[(entity_id, 3)], d_e, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(tokens: &[&str]) -> Document {
        Document {
            doc_id: "d0".into(),
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            gold_clusters: vec![],
            span_features: BTreeMap::new(),
        }
    }

    #[test]
    fn enumerate_spans_small() {
        let d = doc(&["a", "b", "c"]);
        assert_eq!(
            enumerate_spans(&d, 2),
            vec![(0, 1), (0, 2), (1, 2), (1, 3), (2, 3)]
        );
    }

    #[test]
    fn enumerate_spans_counts() {
        let d = doc(&["t"; 10]);
        assert_eq!(enumerate_spans(&d, 5).len(), 40); // 10+9+8+7+6
        let d1 = doc(&["t"]);
        assert_eq!(enumerate_spans(&d1, 5), vec![(0, 1)]);
    }

    #[test]
    fn enumerate_spans_matches_closed_form() {
        for t in 0..=50usize {
            let d = doc(&vec!["x"; t].iter().map(|s| *s).collect::<Vec<_>>());
            for w in 1..=5usize {
                let expect: usize = (1..=w).map(|k| t.saturating_sub(k - 1).min(t)).sum();
                assert_eq!(enumerate_spans(&d, w).len(), expect, "t={t} w={w}");
            }
        }
    }

    #[test]
    fn validation_rejects_out_of_bounds_span() {
        let mut d = doc(&["a", "b"]);
        d.gold_clusters.push(GoldCluster {
            mentions: vec![(0, 3)],
            link: None,
        });
        let err = d.validate().unwrap_err();
        assert!(err.contains("(0, 3)"), "{err}");
    }

    #[test]
    fn validation_rejects_duplicate_mention() {
        let mut d = doc(&["a", "b"]);
        d.gold_clusters.push(GoldCluster {
            mentions: vec![(0, 1), (0, 1)],
            link: None,
        });
        assert!(d.validate().is_err());
    }

    #[test]
    fn alias_table_rejects_increasing_priors() {
        let mut t = AliasTable::new();
        let err = t
            .insert(
                "x".into(),
                vec![
                    AliasEntry { entity: "A".into(), prior: 0.2, embedding: None },
                    AliasEntry { entity: "B".into(), prior: 0.5, embedding: None },
                ],
            )
            .unwrap_err();
        assert!(err.contains("non-increasing"));
    }

    #[test]
    fn attach_keeps_top_k_by_prior() {
        let mut table = AliasTable::new();
        let entries: Vec<AliasEntry> = (0..20)
            .map(|i| AliasEntry {
                entity: format!("E{i:02}"),
                prior: 1.0 - i as f64 * 0.04,
                embedding: None,
            })
            .collect();
        table.insert("a".into(), entries).unwrap();
        let d = doc(&["a", "b"]);
        let feat = FeatureConfig { d_g: 8, d_e: 4, seed: 1 };
        let sc = attach_candidates(&d, &[(0, 1), (1, 2)], &table, 16, &feat).unwrap();
        assert_eq!(sc[0].candidates.len(), 16);
        assert_eq!(sc[0].candidates[0].entity_id, "E00");
        assert_eq!(sc[0].candidates[15].entity_id, "E15");
        // absent surface keeps an empty list but the span is retained
        assert!(sc[1].candidates.is_empty());
    }

    #[test]
    fn attach_fewer_than_k() {
        let mut table = AliasTable::new();
        table
            .insert(
                "a".into(),
                vec![
                    AliasEntry { entity: "X".into(), prior: 0.5, embedding: None },
                    AliasEntry { entity: "Y".into(), prior: 0.3, embedding: None },
                    AliasEntry { entity: "Z".into(), prior: 0.1, embedding: None },
                ],
            )
            .unwrap();
        let d = doc(&["a"]);
        let feat = FeatureConfig { d_g: 8, d_e: 4, seed: 1 };
        let sc = attach_candidates(&d, &[(0, 1)], &table, 16, &feat).unwrap();
        assert_eq!(
            sc[0].candidates.iter().map(|c| c.entity_id.as_str()).collect::<Vec<_>>(),
            vec!["X", "Y", "Z"]
        );
    }

    #[test]
    fn featurize_is_deterministic_and_unit_norm() {
        let d1 = doc(&["the", "red", "fox", "ran", "off"]);
        let d2 = doc(&["the", "red", "fox", "ran", "off", "again"]);
        let a = featurize(&d1, (2, 3), 32, 7);
        let b = featurize(&d2, (2, 3), 32, 7);
        assert_eq!(a, b); // identical surface and context
        let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        let c = featurize(&d1, (2, 3), 32, 8);
        assert_ne!(a, c, "seed change must move the vector");
    }

    #[test]
    fn corpus_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let mut d = doc(&["a", "b", "c"]);
        d.gold_clusters.push(GoldCluster {
            mentions: vec![(0, 1), (2, 3)],
            link: Some("E1".into()),
        });
        d.span_features.insert((0, 1), vec![0.25, -1.5]);
        write_corpus(&path, &[d.clone()]).unwrap();
        let loaded = load_corpus(&path, CorpusFormat::Jsonl).unwrap();
        assert_eq!(loaded, vec![d]);
        // write -> load -> write is byte identical
        let bytes1 = std::fs::read(&path).unwrap();
        let path2 = dir.path().join("c2.jsonl");
        write_corpus(&path2, &loaded).unwrap();
        assert_eq!(bytes1, std::fs::read(&path2).unwrap());
    }

    #[test]
    fn load_rejects_bad_span() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            r#"{"doc_id":"d","tokens":["a"],"clusters":[{"mentions":[[0,2]],"link":null}]}"#,
        )
        .unwrap();
        let err = load_corpus(&path, CorpusFormat::Jsonl).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 1") && msg.contains("(0, 2)"), "{msg}");
    }

    #[test]
    fn empty_cluster_list_is_fine() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, r#"{"doc_id":"d","tokens":["a"],"clusters":[]}"#).unwrap();
        let docs = load_corpus(&path, CorpusFormat::Jsonl).unwrap();
        assert_eq!(docs.len(), 1);
        assert!(docs[0].gold_clusters.is_empty());
    }
}
