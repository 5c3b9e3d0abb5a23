//! Feed-forward scorers for span pruning, mention pairs and entity links,
//! with exact analytic gradients, plus top-N span pruning.
//!
//! All parameters live in one flat `f64` buffer so the optimizer and the
//! finite-difference checks can address every coordinate uniformly.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::SpanCandidate;

#[derive(Debug, Error)]
pub enum ScorerError {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("invalid pruning config: {0}")]
    Pruning(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Model dimensions: span vectors `d_g`, entity vectors `d_e`, distance
/// embeddings `d_phi` and the shared hidden size `h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub d_g: usize,
    pub d_e: usize,
    pub d_phi: usize,
    pub h: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Dims { d_g: 64, d_e: 32, d_phi: 16, h: 64 }
    }
}

/// Distance buckets over pruned-span index differences:
/// {0, 1, 2, 3, 4, 5-7, 8-15, 16-31, 32-63, 64+}.
pub const DIST_BUCKET_COUNT: usize = 10;
/// Extra bucket used for the positionless root edge.
pub const ROOT_BUCKET: usize = DIST_BUCKET_COUNT;
const BUCKET_ROWS: usize = DIST_BUCKET_COUNT + 1;

pub fn distance_bucket(dist: usize) -> usize {
    match dist {
        0..=4 => dist,
        5..=7 => 5,
        8..=15 => 6,
        16..=31 => 7,
        32..=63 => 8,
        _ => 9,
    }
}

/// Offsets of one `in -> h -> 1` rectified-linear network inside the flat
/// parameter buffer. `w1` is row-major `h x in`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct FfnnView {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    in_dim: usize,
    hidden: usize,
}

impl FfnnView {
    fn new(offset: usize, in_dim: usize, hidden: usize) -> (Self, usize) {
        let w1 = offset;
        let b1 = w1 + hidden * in_dim;
        let w2 = b1 + hidden;
        let b2 = w2 + hidden;
        (FfnnView { w1, b1, w2, b2, in_dim, hidden }, b2 + 1)
    }
}

/// All trainable parameters: the three scorer networks, the distance-bucket
/// embedding table and the learned root feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub dims: Dims,
    p: FfnnView,
    c: FfnnView,
    l: FfnnView,
    dist_off: usize,
    root_off: usize,
    data: Vec<f64>,
}

/// Accumulated loss gradients, shape-congruent with [`Params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    data: Vec<f64>,
}

impl Gradients {
    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn zero(&mut self) {
        self.data.iter_mut().for_each(|x| *x = 0.0);
    }
}

fn layout(dims: Dims) -> (FfnnView, FfnnView, FfnnView, usize, usize, usize) {
    let (p, off) = FfnnView::new(0, dims.d_g, dims.h);
    let (c, off) = FfnnView::new(off, 3 * dims.d_g + dims.d_phi, dims.h);
    let (l, off) = FfnnView::new(off, dims.d_g + dims.d_e, dims.h);
    let dist_off = off;
    let root_off = dist_off + BUCKET_ROWS * dims.d_phi;
    let total = root_off + dims.d_g;
    (p, c, l, dist_off, root_off, total)
}

impl Params {
    /// All-zero parameters (every score is exactly 0).
    pub fn zeros(dims: Dims) -> Params {
        let (p, c, l, dist_off, root_off, total) = layout(dims);
        Params { dims, p, c, l, dist_off, root_off, data: vec![0.0; total] }
    }

    /// Seeded initialization: weights, distance embeddings and the root
    /// feature uniform in [-0.1, 0.1], biases zero.
    pub fn init(dims: Dims, seed: u64) -> Params {
        let mut params = Params::zeros(dims);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |range: std::ops::Range<usize>, data: &mut [f64]| {
            for i in range {
                data[i] = rng.gen_range(-0.1..0.1);
            }
        };
        let (p, c, l) = (params.p, params.c, params.l);
        for v in [p, c, l] {
            fill(v.w1..v.w1 + v.hidden * v.in_dim, &mut params.data);
            fill(v.w2..v.w2 + v.hidden, &mut params.data);
        }
        let dist_len = BUCKET_ROWS * dims.d_phi;
        fill(params.dist_off..params.dist_off + dist_len, &mut params.data);
        fill(params.root_off..params.root_off + dims.d_g, &mut params.data);
        params
    }

    pub fn num_params(&self) -> usize {
        self.data.len()
    }

    pub fn flat(&self) -> &[f64] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn new_gradients(&self) -> Gradients {
        Gradients { data: vec![0.0; self.data.len()] }
    }

    pub fn root_feature(&self) -> &[f64] {
        &self.data[self.root_off..self.root_off + self.dims.d_g]
    }

    pub fn dist_embedding(&self, bucket: usize) -> &[f64] {
        let off = self.dist_off + bucket * self.dims.d_phi;
        &self.data[off..off + self.dims.d_phi]
    }

    fn tensors(&self) -> Vec<(&'static str, std::ops::Range<usize>)> {
        let mut out = Vec::new();
        let push_ffnn = |out: &mut Vec<(&'static str, std::ops::Range<usize>)>,
                         names: [&'static str; 4],
                         v: FfnnView| {
            out.push((names[0], v.w1..v.w1 + v.hidden * v.in_dim));
            out.push((names[1], v.b1..v.b1 + v.hidden));
            out.push((names[2], v.w2..v.w2 + v.hidden));
            out.push((names[3], v.b2..v.b2 + 1));
        };
        push_ffnn(&mut out, ["ffnn_p.w1", "ffnn_p.b1", "ffnn_p.w2", "ffnn_p.b2"], self.p);
        push_ffnn(&mut out, ["ffnn_c.w1", "ffnn_c.b1", "ffnn_c.w2", "ffnn_c.b2"], self.c);
        push_ffnn(&mut out, ["ffnn_l.w1", "ffnn_l.b1", "ffnn_l.w2", "ffnn_l.b2"], self.l);
        out.push(("dist_embed", self.dist_off..self.dist_off + BUCKET_ROWS * self.dims.d_phi));
        out.push(("root_feature", self.root_off..self.root_off + self.dims.d_g));
        out
    }

    pub fn to_checkpoint_json(&self) -> String {
        let mut tensors = BTreeMap::new();
        for (name, range) in self.tensors() {
            tensors.insert(name.to_string(), self.data[range].to_vec());
        }
        let file = CheckpointFile { version: 1, dims: self.dims, tensors };
        serde_json::to_string(&file).expect("checkpoint serialization cannot fail")
    }

    pub fn from_checkpoint_json(s: &str) -> Result<Params, ScorerError> {
        let file: CheckpointFile =
            serde_json::from_str(s).map_err(|e| ScorerError::Checkpoint(e.to_string()))?;
        if file.version != 1 {
            return Err(ScorerError::Checkpoint(format!(
                "unsupported checkpoint version {}",
                file.version
            )));
        }
        let mut params = Params::zeros(file.dims);
        for (name, range) in params.tensors() {
            let tensor = file.tensors.get(name).ok_or_else(|| {
                ScorerError::Checkpoint(format!("missing tensor `{name}`"))
            })?;
            if tensor.len() != range.len() {
                return Err(ScorerError::Checkpoint(format!(
                    "tensor `{name}` has {} values, expected {}",
                    tensor.len(),
                    range.len()
                )));
            }
            if tensor.iter().any(|x| !x.is_finite()) {
                return Err(ScorerError::Checkpoint(format!("tensor `{name}` is not finite")));
            }
            params.data[range].copy_from_slice(tensor);
        }
        Ok(params)
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<(), ScorerError> {
        std::fs::write(path, self.to_checkpoint_json())?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Params, ScorerError> {
        Params::from_checkpoint_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    dims: Dims,
    tensors: BTreeMap<String, Vec<f64>>,
}

// ---------------------------------------------------------------------------
// Forward / backward of one network.

fn ffnn_forward(data: &[f64], v: FfnnView, x: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), v.in_dim);
    let mut out = data[v.b2];
    for k in 0..v.hidden {
        let mut z = data[v.b1 + k];
        let row = &data[v.w1 + k * v.in_dim..v.w1 + (k + 1) * v.in_dim];
        for (w, xi) in row.iter().zip(x) {
            z += w * xi;
        }
        if z > 0.0 {
            out += data[v.w2 + k] * z;
        }
    }
    out
}

/// Backward through one network. `dx`, when given, must be zeroed by the
/// caller and receives d(score)/d(input).
fn ffnn_backward(
    data: &[f64],
    v: FfnnView,
    x: &[f64],
    dscore: f64,
    grad: &mut [f64],
    mut dx: Option<&mut [f64]>,
) {
    grad[v.b2] += dscore;
    for k in 0..v.hidden {
        let mut z = data[v.b1 + k];
        let row_off = v.w1 + k * v.in_dim;
        for (w, xi) in data[row_off..row_off + v.in_dim].iter().zip(x) {
            z += w * xi;
        }
        if z <= 0.0 {
            continue;
        }
        grad[v.w2 + k] += dscore * z;
        let dh = dscore * data[v.w2 + k];
        grad[v.b1 + k] += dh;
        for i in 0..v.in_dim {
            grad[row_off + i] += dh * x[i];
        }
        if let Some(dx) = dx.as_deref_mut() {
            for i in 0..v.in_dim {
                dx[i] += dh * data[row_off + i];
            }
        }
    }
}

fn check_dim(name: &str, got: usize, want: usize) -> Result<(), ScorerError> {
    if got != want {
        return Err(ScorerError::DimMismatch(format!("{name}: got {got}, expected {want}")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Scores.

/// Pruning score of one span vector.
pub fn prune_score(params: &Params, g: &[f64]) -> Result<f64, ScorerError> {
    check_dim("g", g.len(), params.dims.d_g)?;
    Ok(ffnn_forward(&params.data, params.p, g))
}

fn pair_input(params: &Params, g_i: &[f64], g_j: &[f64], bucket: usize) -> Vec<f64> {
    let d_g = params.dims.d_g;
    let mut x = Vec::with_capacity(3 * d_g + params.dims.d_phi);
    x.extend_from_slice(g_i);
    x.extend_from_slice(g_j);
    for (a, b) in g_i.iter().zip(g_j) {
        x.push(a * b);
    }
    x.extend_from_slice(params.dist_embedding(bucket));
    x
}

/// Pair compatibility score over `[g_i; g_j; g_i * g_j; phi_bucket]`, with
/// the distance measured in pruned-span index differences.
pub fn pair_score(params: &Params, g_i: &[f64], g_j: &[f64], dist: usize) -> Result<f64, ScorerError> {
    check_dim("g_i", g_i.len(), params.dims.d_g)?;
    check_dim("g_j", g_j.len(), params.dims.d_g)?;
    let x = pair_input(params, g_i, g_j, distance_bucket(dist));
    Ok(ffnn_forward(&params.data, params.c, &x))
}

/// Link compatibility score over `[g_i; e]`.
pub fn entity_score(params: &Params, g_i: &[f64], e: &[f64]) -> Result<f64, ScorerError> {
    check_dim("g_i", g_i.len(), params.dims.d_g)?;
    check_dim("e", e.len(), params.dims.d_e)?;
    let mut x = Vec::with_capacity(params.dims.d_g + params.dims.d_e);
    x.extend_from_slice(g_i);
    x.extend_from_slice(e);
    Ok(ffnn_forward(&params.data, params.l, &x))
}

/// Composite coreference edge score: prune(i) + prune(j) + pair(i, j).
pub fn coref_edge_score(
    params: &Params,
    g_i: &[f64],
    g_j: &[f64],
    dist: usize,
) -> Result<f64, ScorerError> {
    Ok(prune_score(params, g_i)? + prune_score(params, g_j)? + pair_score(params, g_i, g_j, dist)?)
}

/// Composite link edge score: prune(i) + entity(i, e).
pub fn link_edge_score(params: &Params, g_i: &[f64], e: &[f64]) -> Result<f64, ScorerError> {
    Ok(prune_score(params, g_i)? + entity_score(params, g_i, e)?)
}

/// Root-edge score for a span: prune(i) + pair(i, root), where the root side
/// uses the learned root feature and the dedicated root bucket. The root's
/// own prune score is fixed at zero.
pub fn nil_edge_score(params: &Params, g_i: &[f64]) -> Result<f64, ScorerError> {
    check_dim("g_i", g_i.len(), params.dims.d_g)?;
    let root: Vec<f64> = params.root_feature().to_vec();
    let x = pair_input(params, g_i, &root, ROOT_BUCKET);
    Ok(prune_score(params, g_i)? + ffnn_forward(&params.data, params.c, &x))
}

// ---------------------------------------------------------------------------
// Backward passes. Each accumulates d(loss)/d(param) for its score times the
// scalar `d` into `grads`.

pub fn prune_backward(params: &Params, g: &[f64], d: f64, grads: &mut Gradients) {
    ffnn_backward(&params.data, params.p, g, d, &mut grads.data, None);
}

pub fn pair_backward(
    params: &Params,
    g_i: &[f64],
    g_j: &[f64],
    dist: usize,
    d: f64,
    grads: &mut Gradients,
) {
    let bucket = distance_bucket(dist);
    let x = pair_input(params, g_i, g_j, bucket);
    let mut dx = vec![0.0; x.len()];
    ffnn_backward(&params.data, params.c, &x, d, &mut grads.data, Some(&mut dx));
    let d_g = params.dims.d_g;
    let phi_off = params.dist_off + bucket * params.dims.d_phi;
    for t in 0..params.dims.d_phi {
        grads.data[phi_off + t] += dx[3 * d_g + t];
    }
}

pub fn entity_backward(params: &Params, g_i: &[f64], e: &[f64], d: f64, grads: &mut Gradients) {
    let mut x = Vec::with_capacity(params.dims.d_g + params.dims.d_e);
    x.extend_from_slice(g_i);
    x.extend_from_slice(e);
    ffnn_backward(&params.data, params.l, &x, d, &mut grads.data, None);
}

/// Backward of the root-side pair term of [`nil_edge_score`]; routes input
/// gradients into the root feature (direct slot plus the elementwise-product
/// slot) and the root distance bucket.
pub fn nil_pair_backward(params: &Params, g_i: &[f64], d: f64, grads: &mut Gradients) {
    let root: Vec<f64> = params.root_feature().to_vec();
    let x = pair_input(params, g_i, &root, ROOT_BUCKET);
    let mut dx = vec![0.0; x.len()];
    ffnn_backward(&params.data, params.c, &x, d, &mut grads.data, Some(&mut dx));
    let d_g = params.dims.d_g;
    for t in 0..d_g {
        grads.data[params.root_off + t] += dx[d_g + t] + dx[2 * d_g + t] * g_i[t];
    }
    let phi_off = params.dist_off + ROOT_BUCKET * params.dims.d_phi;
    for t in 0..params.dims.d_phi {
        grads.data[phi_off + t] += dx[3 * d_g + t];
    }
}

pub fn coref_edge_backward(
    params: &Params,
    g_i: &[f64],
    g_j: &[f64],
    dist: usize,
    d: f64,
    grads: &mut Gradients,
) {
    prune_backward(params, g_i, d, grads);
    prune_backward(params, g_j, d, grads);
    pair_backward(params, g_i, g_j, dist, d, grads);
}

pub fn link_edge_backward(params: &Params, g_i: &[f64], e: &[f64], d: f64, grads: &mut Gradients) {
    prune_backward(params, g_i, d, grads);
    entity_backward(params, g_i, e, d, grads);
}

pub fn nil_edge_backward(params: &Params, g_i: &[f64], d: f64, grads: &mut Gradients) {
    prune_backward(params, g_i, d, grads);
    nil_pair_backward(params, g_i, d, grads);
}

// ---------------------------------------------------------------------------
// Pruning.

/// Keeps the `min(cap, ceil(ratio * token_count))` highest-scoring spans,
/// ties broken toward lexicographically smaller `(start, end)`, and returns
/// the survivors re-sorted into document order.
pub fn prune_spans(
    params: &Params,
    spans: &[SpanCandidate],
    token_count: usize,
    ratio: f64,
    cap: usize,
) -> Result<Vec<SpanCandidate>, ScorerError> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(ScorerError::Pruning(format!("ratio {ratio} outside (0, 1]")));
    }
    let n = cap.min((ratio * token_count as f64).ceil() as usize);
    let mut scored: Vec<(usize, f64)> = Vec::with_capacity(spans.len());
    for (i, sc) in spans.iter().enumerate() {
        scored.push((i, prune_score(params, &sc.g)?));
    }
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| spans[a.0].span().cmp(&spans[b.0].span()))
    });
    let mut kept: Vec<usize> = scored.iter().take(n).map(|&(i, _)| i).collect();
    kept.sort_by_key(|&i| spans[i].span());
    Ok(kept.into_iter().map(|i| spans[i].clone()).collect())
}

// ---------------------------------------------------------------------------
// Finite-difference checking, shared by tests and the verification suites.

fn ffnn_min_abs_z(data: &[f64], v: FfnnView, x: &[f64]) -> f64 {
    let mut min = f64::INFINITY;
    for k in 0..v.hidden {
        let mut z = data[v.b1 + k];
        for (w, xi) in data[v.w1 + k * v.in_dim..v.w1 + (k + 1) * v.in_dim].iter().zip(x) {
            z += w * xi;
        }
        min = min.min(z.abs());
    }
    min
}

/// Smallest |hidden pre-activation| across every network evaluation behind
/// the edge scores of a span list. Central differences are invalid within a
/// step of the rectifier kink, so finite-difference draws keep this margin
/// above a few steps.
pub fn rectifier_margin(params: &Params, spans: &[SpanCandidate]) -> f64 {
    let mut min = f64::INFINITY;
    let root: Vec<f64> = params.root_feature().to_vec();
    for (i, sc) in spans.iter().enumerate() {
        min = min.min(ffnn_min_abs_z(&params.data, params.p, &sc.g));
        let x = pair_input(params, &sc.g, &root, ROOT_BUCKET);
        min = min.min(ffnn_min_abs_z(&params.data, params.c, &x));
        for cand in &sc.candidates {
            let mut x = Vec::with_capacity(params.dims.d_g + params.dims.d_e);
            x.extend_from_slice(&sc.g);
            x.extend_from_slice(&cand.embedding);
            min = min.min(ffnn_min_abs_z(&params.data, params.l, &x));
        }
        for j in 0..i {
            let x = pair_input(params, &sc.g, &spans[j].g, distance_bucket(i - j));
            min = min.min(ffnn_min_abs_z(&params.data, params.c, &x));
        }
    }
    min
}

/// Max relative error between `analytic` and a central finite difference of
/// `loss` over every parameter coordinate. Relative error is
/// `|a - n| / max(1, |a|)`.
pub fn finite_difference_max_rel_err<F>(
    params: &mut Params,
    analytic: &Gradients,
    mut loss: F,
    step: f64,
) -> f64
where
    F: FnMut(&Params) -> f64,
{
    let n = params.num_params();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let orig = params.data[i];
        params.data[i] = orig + step;
        let up = loss(params);
        params.data[i] = orig - step;
        let down = loss(params);
        params.data[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic.data[i];
        let rel = (a - numeric).abs() / a.abs().max(1.0);
        if rel > worst {
            worst = rel;
        }
    }
    worst
}
