//! Feature selection by average precision and linear-probe training.
//!
//! The selection step ranks every scalar feature by how well it separates
//! one relation's support examples from the rest (binary AP on the support
//! set only), keeps the top `m` per class, and merges the lists. The probe
//! is a plain linear classifier trained full-batch with cross entropy and
//! Adam, zero-initialized so runs are reproducible.

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::corpus::Episode;
use crate::error::{Error, Result};
use crate::model::{forward, ModelWeights};
use crate::numerics::softmax_slice;
use crate::tracing::{extract_features, FeatureIndexMap, FeatureKind};

/// Probe inputs: one row per example, one column per scalar feature.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    pub values: Vec<Vec<f64>>,
    pub index_map: FeatureIndexMap,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub kind: FeatureKind,
}

impl FeatureMatrix {
    pub fn new(
        values: Vec<Vec<f64>>,
        index_map: FeatureIndexMap,
        labels: Vec<usize>,
        class_names: Vec<String>,
        kind: FeatureKind,
    ) -> Result<Self> {
        let m = index_map.len();
        if values.iter().any(|r| r.len() != m) {
            return Err(Error::Shape("feature row length disagrees with index map".into()));
        }
        if values.len() != labels.len() {
            return Err(Error::Shape("label count disagrees with example count".into()));
        }
        let c = class_names.len();
        if labels.iter().any(|&l| l >= c) {
            return Err(Error::Data("label id exceeds class count".into()));
        }
        Ok(Self { values, index_map, labels, class_names, kind })
    }

    pub fn n_examples(&self) -> usize {
        self.values.len()
    }

    pub fn n_features(&self) -> usize {
        self.index_map.len()
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    /// New matrix keeping only the given global feature columns (order kept,
    /// duplicates allowed when selection ran without dedup).
    pub fn restrict(&self, columns: &[usize]) -> Result<FeatureMatrix> {
        if let Some(&bad) = columns.iter().find(|&&c| c >= self.n_features()) {
            return Err(Error::Index(format!("feature column {bad} out of range")));
        }
        let values = self
            .values
            .iter()
            .map(|row| columns.iter().map(|&c| row[c]).collect())
            .collect();
        let entries = columns.iter().map(|&c| self.index_map.entries[c]).collect();
        Ok(FeatureMatrix {
            values,
            index_map: FeatureIndexMap { entries },
            labels: self.labels.clone(),
            class_names: self.class_names.clone(),
            kind: self.kind,
        })
    }
}

/// Binary average precision; ranks by descending score, ties broken by
/// ascending example index. AP is the mean of precision-at-rank over the
/// ranks holding positives.
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Result<f64> {
    if scores.len() != positives.len() || scores.is_empty() {
        return Err(Error::Shape("scores/positives length mismatch".into()));
    }
    let n_pos = positives.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return Err(Error::Data("average precision needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank0, &i) in order.iter().enumerate() {
        if positives[i] {
            hits += 1;
            sum += hits as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(sum / n_pos as f64)
}

/// Per-class AP-ranked feature lists plus the merged index set.
#[derive(Debug, Clone)]
pub struct SelectionResult {
    /// Per class: (global feature index, AP) in descending AP order.
    pub per_class: Vec<Vec<(usize, f64)>>,
    /// Merged selection defining the probe's feature vector. Deduplicated
    /// and sorted ascending when `dedup` was set; otherwise the per-class
    /// lists concatenated in class order.
    pub merged: Vec<usize>,
}

/// Ranks features per class by AP on the support set and keeps the top `m`.
pub fn select_features(support: &FeatureMatrix, m: usize, dedup: bool) -> Result<SelectionResult> {
    if m == 0 {
        return Err(Error::Config("m must be positive".into()));
    }
    let n_classes = support.n_classes();
    for c in 0..n_classes {
        if !support.labels.contains(&c) {
            return Err(Error::Data(format!("class {c} has no support examples")));
        }
    }
    let n_feat = support.n_features();
    let mut per_class = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let positives: Vec<bool> = support.labels.iter().map(|&l| l == c).collect();
        let mut scored: Vec<(usize, f64)> = (0..n_feat)
            .map(|f| {
                let col: Vec<f64> = support.values.iter().map(|row| row[f]).collect();
                average_precision(&col, &positives).map(|ap| (f, ap))
            })
            .collect::<Result<_>>()?;
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0))
        });
        scored.truncate(m);
        per_class.push(scored);
    }
    let merged = if dedup {
        let mut set: Vec<usize> = per_class.iter().flatten().map(|&(f, _)| f).collect();
        set.sort_unstable();
        set.dedup();
        set
    } else {
        per_class.iter().flatten().map(|&(f, _)| f).collect()
    };
    Ok(SelectionResult { per_class, merged })
}

/// Training hyperparameters. Paper-silent values (lr, betas, init) are the
/// standard Adam defaults with zero-initialized parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { epochs: 200, lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, seed: 0 }
    }
}

/// Linear probe: logits = b + W x over the selected features.
#[derive(Debug, Clone)]
pub struct ProbeModel {
    /// `[C][M']` weight rows.
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub index_map: FeatureIndexMap,
    pub class_names: Vec<String>,
    pub kind: FeatureKind,
    pub options: TrainOptions,
}

impl ProbeModel {
    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn n_features(&self) -> usize {
        self.index_map.len()
    }
}

/// Mean cross-entropy loss and its analytic gradient for a flat parameter
/// layout `[w row-major per class, then b]`. Shared by training and the
/// finite-difference checks.
pub fn cross_entropy_loss_grad(
    params: &[f64],
    x: &[Vec<f64>],
    labels: &[usize],
    n_classes: usize,
    n_features: usize,
) -> (f64, Vec<f64>) {
    let n = x.len();
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    let inv_n = 1.0 / n as f64;
    for (row, &y) in x.iter().zip(labels) {
        let logits: Vec<f64> = (0..n_classes)
            .map(|c| {
                let wrow = &params[c * n_features..(c + 1) * n_features];
                params[n_classes * n_features + c] + crate::numerics::dot(wrow, row)
            })
            .collect();
        let probs = softmax_slice(&logits, 1.0).expect("finite logits");
        loss -= probs[y].max(1e-300).ln() * inv_n;
        for c in 0..n_classes {
            let coeff = (probs[c] - if c == y { 1.0 } else { 0.0 }) * inv_n;
            let gw = &mut grad[c * n_features..(c + 1) * n_features];
            for (g, &xi) in gw.iter_mut().zip(row) {
                *g += coeff * xi;
            }
            grad[n_classes * n_features + c] += coeff;
        }
    }
    (loss, grad)
}

/// Trains a linear probe full-batch with Adam and cross-entropy loss.
pub fn train_probe(x: &FeatureMatrix, options: &TrainOptions) -> Result<ProbeModel> {
    let n_classes = x.n_classes();
    let n_features = x.n_features();
    if n_classes < 2 {
        return Err(Error::Data("probe training needs at least two classes".into()));
    }
    if x.n_examples() < n_classes {
        return Err(Error::Data("fewer examples than classes".into()));
    }
    let distinct: std::collections::BTreeSet<usize> = x.labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::Data("degenerate single-class labels".into()));
    }
    let n_params = n_classes * n_features + n_classes;
    let mut params = vec![0.0; n_params];
    let mut m1 = vec![0.0; n_params];
    let mut m2 = vec![0.0; n_params];
    for step in 1..=options.epochs {
        let (_, grad) = cross_entropy_loss_grad(&params, &x.values, &x.labels, n_classes, n_features);
        let bc1 = 1.0 - options.beta1.powi(step as i32);
        let bc2 = 1.0 - options.beta2.powi(step as i32);
        for i in 0..n_params {
            m1[i] = options.beta1 * m1[i] + (1.0 - options.beta1) * grad[i];
            m2[i] = options.beta2 * m2[i] + (1.0 - options.beta2) * grad[i] * grad[i];
            let mhat = m1[i] / bc1;
            let vhat = m2[i] / bc2;
            params[i] -= options.lr * mhat / (vhat.sqrt() + options.eps);
        }
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(Error::Invariant("probe parameters diverged".into()));
    }
    let w = (0..n_classes)
        .map(|c| params[c * n_features..(c + 1) * n_features].to_vec())
        .collect();
    let b = params[n_classes * n_features..].to_vec();
    Ok(ProbeModel {
        w,
        b,
        index_map: x.index_map.clone(),
        class_names: x.class_names.clone(),
        kind: x.kind,
        options: *options,
    })
}

/// Class logits and argmax prediction (ties resolved to the lowest class id).
pub fn predict(probe: &ProbeModel, x: &[f64]) -> Result<(Vec<f64>, usize)> {
    if x.len() != probe.n_features() {
        return Err(Error::Shape(format!(
            "input length {} != probe feature count {}",
            x.len(),
            probe.n_features()
        )));
    }
    let logits: Vec<f64> = probe
        .w
        .iter()
        .zip(&probe.b)
        .map(|(row, &b)| b + crate::numerics::dot(row, x))
        .collect();
    let mut best = 0;
    for (c, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = c;
        }
    }
    Ok((logits, best))
}

/// Outcome of one episode: probe, per-query predictions, and the restricted
/// query feature vectors (kept for attribution).
#[derive(Debug, Clone)]
pub struct EpisodeResult {
    pub probe: ProbeModel,
    pub selection: SelectionResult,
    pub golds: Vec<usize>,
    pub predictions: Vec<usize>,
    pub query_features: Vec<Vec<f64>>,
    pub accuracy: f64,
}

/// Per-episode hyperparameters for the probing pipeline.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeOptions {
    pub kind: FeatureKind,
    pub m: usize,
    pub dedup: bool,
    pub train: TrainOptions,
}

/// Full episode pipeline: trace every prompt, extract features at its recall
/// position, select features on the support set only, train, evaluate on
/// the query set.
pub fn run_episode(
    weights: &ModelWeights,
    episode: &Episode,
    options: &EpisodeOptions,
) -> Result<EpisodeResult> {
    let class_names: Vec<String> = episode.relation_names.clone();
    let mut sup_rows = Vec::new();
    let mut sup_labels = Vec::new();
    let mut index_map = None;
    for (class, inst) in episode.support_instances() {
        let tb = forward(weights, &inst.tokens)?;
        let (row, map) = extract_features(&tb, weights, options.kind, inst.recall_pos, Some(inst.j_e1))?;
        if index_map.get_or_insert(map.clone()) != &map {
            return Err(Error::Invariant("feature index map varies across examples".into()));
        }
        sup_rows.push(row);
        sup_labels.push(class);
    }
    let index_map = index_map.ok_or_else(|| Error::Data("episode has no support examples".into()))?;
    let support =
        FeatureMatrix::new(sup_rows, index_map.clone(), sup_labels, class_names.clone(), options.kind)?;
    let selection = select_features(&support, options.m, options.dedup)?;
    let restricted = support.restrict(&selection.merged)?;
    let probe = train_probe(&restricted, &options.train)?;

    let mut golds = Vec::new();
    let mut predictions = Vec::new();
    let mut query_features = Vec::new();
    for (class, inst) in episode.query_instances() {
        let tb = forward(weights, &inst.tokens)?;
        let (row, map) = extract_features(&tb, weights, options.kind, inst.recall_pos, Some(inst.j_e1))?;
        if map != index_map {
            return Err(Error::Invariant("query index map disagrees with support".into()));
        }
        let x: Vec<f64> = selection.merged.iter().map(|&c| row[c]).collect();
        let (_, pred) = predict(&probe, &x)?;
        golds.push(class);
        predictions.push(pred);
        query_features.push(x);
    }
    let correct = golds.iter().zip(&predictions).filter(|(g, p)| g == p).count();
    let accuracy = correct as f64 / golds.len().max(1) as f64;
    Ok(EpisodeResult { probe, selection, golds, predictions, query_features, accuracy })
}

// --- probe serialization -------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ProbeJson {
    w_b64: String,
    b_b64: String,
    n_classes: usize,
    n_features: usize,
    index_map: Vec<(u32, u32, u32)>,
    class_names: Vec<String>,
    kind: FeatureKind,
    options: TrainOptions,
}

fn encode_f64(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

fn decode_f64(s: &str) -> Result<Vec<f64>> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(s)
        .map_err(|e| Error::Format(format!("bad base64 payload: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Format("f64 payload length not a multiple of 8".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn probe_to_json(probe: &ProbeModel) -> Result<String> {
    let flat: Vec<f64> = probe.w.iter().flatten().copied().collect();
    let pj = ProbeJson {
        w_b64: encode_f64(&flat),
        b_b64: encode_f64(&probe.b),
        n_classes: probe.n_classes(),
        n_features: probe.n_features(),
        index_map: probe.index_map.entries.clone(),
        class_names: probe.class_names.clone(),
        kind: probe.kind,
        options: probe.options,
    };
    Ok(serde_json::to_string_pretty(&pj)?)
}

pub fn probe_from_json(json: &str) -> Result<ProbeModel> {
    let pj: ProbeJson = serde_json::from_str(json)?;
    let flat = decode_f64(&pj.w_b64)?;
    if flat.len() != pj.n_classes * pj.n_features {
        return Err(Error::Format("probe W payload shape mismatch".into()));
    }
    let b = decode_f64(&pj.b_b64)?;
    if b.len() != pj.n_classes || pj.index_map.len() != pj.n_features {
        return Err(Error::Format("probe bias/index map shape mismatch".into()));
    }
    let w = (0..pj.n_classes)
        .map(|c| flat[c * pj.n_features..(c + 1) * pj.n_features].to_vec())
        .collect();
    Ok(ProbeModel {
        w,
        b,
        index_map: FeatureIndexMap { entries: pj.index_map },
        class_names: pj.class_names,
        kind: pj.kind,
        options: pj.options,
    })
}
