//! Contribution features computed from a [`TraceBundle`].
//!
//! Attention-side contributions live in `R^{d_model}`; MLP-side variants
//! propagate them through a frozen linearization of the MLP sublayer
//! (norm scale and gate factor taken from the full pass) and live in
//! `R^{d_ff}`, measured after the gate and before the down projection.

use std::path::Path;

use crate::container::{Container, Section};
use crate::error::{Error, Result};
use crate::model::{ModelWeights, TraceBundle};
use crate::probing::FeatureMatrix;

/// Which contribution a feature vector is built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum FeatureKind {
    /// Per-head attention contribution at the recall position.
    AttnHead,
    /// Head-summed attention contribution from the e1 source token.
    AttnTokenTotal,
    /// Per-head attention contribution from the e1 source token.
    AttnTokenHead,
    /// Per-head attention contribution propagated through the frozen MLP.
    MlpHead,
    /// Head-summed e1 contribution propagated through the frozen MLP.
    MlpTokenTotal,
    /// Per-head e1 contribution propagated through the frozen MLP.
    MlpTokenHead,
    /// Full attention sublayer output (non-attributable baseline).
    FullAttention,
    /// Full post-gate MLP activation (non-attributable baseline).
    FullMlp,
}

impl FeatureKind {
    pub fn is_per_head(self) -> bool {
        matches!(self, FeatureKind::AttnHead | FeatureKind::AttnTokenHead | FeatureKind::MlpHead | FeatureKind::MlpTokenHead)
    }

    pub fn needs_source(self) -> bool {
        matches!(
            self,
            FeatureKind::AttnTokenTotal
                | FeatureKind::AttnTokenHead
                | FeatureKind::MlpTokenTotal
                | FeatureKind::MlpTokenHead
        )
    }

    pub fn code(self) -> u32 {
        match self {
            FeatureKind::AttnHead => 0,
            FeatureKind::AttnTokenTotal => 1,
            FeatureKind::AttnTokenHead => 2,
            FeatureKind::MlpHead => 3,
            FeatureKind::MlpTokenTotal => 4,
            FeatureKind::MlpTokenHead => 5,
            FeatureKind::FullAttention => 6,
            FeatureKind::FullMlp => 7,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        Ok(match code {
            0 => FeatureKind::AttnHead,
            1 => FeatureKind::AttnTokenTotal,
            2 => FeatureKind::AttnTokenHead,
            3 => FeatureKind::MlpHead,
            4 => FeatureKind::MlpTokenTotal,
            5 => FeatureKind::MlpTokenHead,
            6 => FeatureKind::FullAttention,
            7 => FeatureKind::FullMlp,
            _ => return Err(Error::Format(format!("unknown feature kind code {code}"))),
        })
    }
}

/// Sentinel head index used in index maps for head-summed feature kinds.
pub const HEAD_SUMMED: u32 = u32::MAX;

/// A single traced contribution vector.
#[derive(Debug, Clone)]
pub struct Contribution {
    pub layer: usize,
    pub head: Option<usize>,
    pub target: usize,
    pub source: Option<usize>,
    pub vector: Vec<f64>,
}

/// Flat-index → (layer, head, dim) mapping for probe features.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FeatureIndexMap {
    pub entries: Vec<(u32, u32, u32)>,
}

impl FeatureIndexMap {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn check_indices(trace: &TraceBundle, layer: usize, head: Option<usize>, t: usize) -> Result<()> {
    let cfg = &trace.config;
    if layer >= cfg.n_layers {
        return Err(Error::Index(format!("layer {layer} >= {}", cfg.n_layers)));
    }
    if let Some(h) = head {
        if h >= cfg.n_heads {
            return Err(Error::Index(format!("head {h} >= {}", cfg.n_heads)));
        }
    }
    if t >= trace.seq_len() {
        return Err(Error::Index(format!("target {t} >= T {}", trace.seq_len())));
    }
    Ok(())
}

/// `Δ_att,h(t) = W_{O,h} (Σ_j Attn_h(t,j)·V_h(j))`.
pub fn head_contribution(
    trace: &TraceBundle,
    weights: &ModelWeights,
    layer: usize,
    head: usize,
    t: usize,
) -> Result<Contribution> {
    check_indices(trace, layer, Some(head), t)?;
    let cfg = &trace.config;
    let a = &trace.attn_weights[layer][head];
    let vals = &trace.values[layer][head];
    let mut agg = vec![0.0; cfg.d_head];
    for j in 0..=t {
        let w = a.at(t, j);
        for (acc, &v) in agg.iter_mut().zip(vals.row(j)) {
            *acc += w * v;
        }
    }
    let mut out = vec![0.0; cfg.d_model];
    weights.wo_head(layer, head).accumulate(&agg, 1.0, &mut out);
    Ok(Contribution { layer, head: Some(head), target: t, source: None, vector: out })
}

/// `Δ_att,h(t,j) = W_{O,h} (Attn_h(t,j)·V_h(j))`.
pub fn head_token_contribution(
    trace: &TraceBundle,
    weights: &ModelWeights,
    layer: usize,
    head: usize,
    t: usize,
    j: usize,
) -> Result<Contribution> {
    check_indices(trace, layer, Some(head), t)?;
    if j > t {
        return Err(Error::Index(format!("source {j} > target {t} violates causality")));
    }
    let cfg = &trace.config;
    let w = trace.attn_weights[layer][head].at(t, j);
    let mut out = vec![0.0; cfg.d_model];
    weights
        .wo_head(layer, head)
        .accumulate(trace.values[layer][head].row(j), w, &mut out);
    Ok(Contribution { layer, head: Some(head), target: t, source: Some(j), vector: out })
}

/// Per-head and head-summed contributions from source position `j_e1`.
pub fn entity_contributions(
    trace: &TraceBundle,
    weights: &ModelWeights,
    layer: usize,
    t: usize,
    j_e1: usize,
) -> Result<(Vec<Contribution>, Contribution)> {
    check_indices(trace, layer, None, t)?;
    if j_e1 > t {
        return Err(Error::Index(format!("entity source {j_e1} > target {t}")));
    }
    let cfg = &trace.config;
    let per_head: Vec<Contribution> = (0..cfg.n_heads)
        .map(|h| head_token_contribution(trace, weights, layer, h, t, j_e1))
        .collect::<Result<_>>()?;
    let mut total = vec![0.0; cfg.d_model];
    for c in &per_head {
        for (acc, &v) in total.iter_mut().zip(&c.vector) {
            *acc += v;
        }
    }
    Ok((
        per_head,
        Contribution { layer, head: None, target: t, source: Some(j_e1), vector: total },
    ))
}

/// Propagates an attention-side contribution through the frozen MLP map:
/// `g[l][t] ⊙ (W_up (gamma ⊙ r[l][t] ⊙ delta))`, yielding a vector in
/// `R^{d_ff}` at the post-gate, pre-down-projection measurement point.
pub fn mlp_propagate(
    trace: &TraceBundle,
    weights: &ModelWeights,
    layer: usize,
    t: usize,
    delta: &Contribution,
) -> Result<Contribution> {
    check_indices(trace, layer, None, t)?;
    if delta.layer != layer {
        return Err(Error::Index(format!(
            "delta from layer {} propagated at layer {layer}",
            delta.layer
        )));
    }
    let cfg = &trace.config;
    if delta.vector.len() != cfg.d_model {
        return Err(Error::Shape(format!(
            "delta length {} != d_model {}",
            delta.vector.len(),
            cfg.d_model
        )));
    }
    let r = trace.mlp_scales[layer][t];
    let gamma = trace.mlp_gammas[layer].data();
    let scaled: Vec<f64> = delta
        .vector
        .iter()
        .zip(gamma)
        .map(|(&dv, &g)| g * r * dv)
        .collect();
    let w_up = &weights.layers[layer].w_up;
    let gate = trace.gate_act[layer].row(t);
    let mut out = vec![0.0; cfg.d_ff];
    for (i, &si) in scaled.iter().enumerate() {
        let wrow = w_up.row(i);
        for (o, &w) in out.iter_mut().zip(wrow) {
            *o += si * w;
        }
    }
    for (o, &g) in out.iter_mut().zip(gate) {
        *o *= g;
    }
    Ok(Contribution {
        layer,
        head: delta.head,
        target: t,
        source: delta.source,
        vector: out,
    })
}

/// Extracts the flat probe feature vector for `kind` at recall position `t`.
pub fn extract_features(
    trace: &TraceBundle,
    weights: &ModelWeights,
    kind: FeatureKind,
    t: usize,
    j_e1: Option<usize>,
) -> Result<(Vec<f64>, FeatureIndexMap)> {
    if kind.needs_source() && j_e1.is_none() {
        return Err(Error::Config(format!("{kind:?} requires j_e1")));
    }
    let cfg = &trace.config;
    check_indices(trace, 0, None, t)?;
    let mut values = Vec::new();
    let mut entries = Vec::new();
    for l in 0..cfg.n_layers {
        match kind {
            FeatureKind::AttnHead => {
                for h in 0..cfg.n_heads {
                    let c = head_contribution(trace, weights, l, h, t)?;
                    push_vec(&mut values, &mut entries, l, Some(h), &c.vector);
                }
            }
            FeatureKind::AttnTokenHead => {
                for h in 0..cfg.n_heads {
                    let c = head_token_contribution(trace, weights, l, h, t, j_e1.unwrap())?;
                    push_vec(&mut values, &mut entries, l, Some(h), &c.vector);
                }
            }
            FeatureKind::AttnTokenTotal => {
                let (_, total) = entity_contributions(trace, weights, l, t, j_e1.unwrap())?;
                push_vec(&mut values, &mut entries, l, None, &total.vector);
            }
            FeatureKind::MlpHead => {
                for h in 0..cfg.n_heads {
                    let c = head_contribution(trace, weights, l, h, t)?;
                    let m = mlp_propagate(trace, weights, l, t, &c)?;
                    push_vec(&mut values, &mut entries, l, Some(h), &m.vector);
                }
            }
            FeatureKind::MlpTokenHead => {
                for h in 0..cfg.n_heads {
                    let c = head_token_contribution(trace, weights, l, h, t, j_e1.unwrap())?;
                    let m = mlp_propagate(trace, weights, l, t, &c)?;
                    push_vec(&mut values, &mut entries, l, Some(h), &m.vector);
                }
            }
            FeatureKind::MlpTokenTotal => {
                let (_, total) = entity_contributions(trace, weights, l, t, j_e1.unwrap())?;
                let m = mlp_propagate(trace, weights, l, t, &total)?;
                push_vec(&mut values, &mut entries, l, None, &m.vector);
            }
            FeatureKind::FullAttention => {
                push_vec(&mut values, &mut entries, l, None, trace.attn_out[l].row(t));
            }
            FeatureKind::FullMlp => {
                push_vec(&mut values, &mut entries, l, None, trace.mlp_act[l].row(t));
            }
        }
    }
    Ok((values, FeatureIndexMap { entries }))
}

fn push_vec(
    values: &mut Vec<f64>,
    entries: &mut Vec<(u32, u32, u32)>,
    layer: usize,
    head: Option<usize>,
    v: &[f64],
) {
    let h = head.map(|h| h as u32).unwrap_or(HEAD_SUMMED);
    for (d, &x) in v.iter().enumerate() {
        values.push(x);
        entries.push((layer as u32, h, d as u32));
    }
}

/// JSON sidecar accompanying a feature dump.
#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct FeatureSidecar {
    kind: FeatureKind,
    class_names: Vec<String>,
}

/// Writes a feature matrix to the binary container format plus a `.json`
/// sidecar naming the relation classes.
pub fn save_feature_dump(matrix: &FeatureMatrix, path: &Path) -> Result<()> {
    let n = matrix.n_examples();
    let m = matrix.n_features();
    let mut c = Container::new(Vec::new());
    let flat: Vec<f32> = matrix.values.iter().flatten().map(|&v| v as f32).collect();
    c.push(Section::from_f32("features", vec![n as u64, m as u64], &flat));
    let idx: Vec<u32> = matrix
        .index_map
        .entries
        .iter()
        .flat_map(|&(l, h, d)| [l, h, d])
        .collect();
    c.push(Section::from_u32("index_map", vec![m as u64, 3], &idx));
    let labels: Vec<u32> = matrix.labels.iter().map(|&l| l as u32).collect();
    c.push(Section::from_u32("labels", vec![n as u64], &labels));
    c.push(Section::from_u32("kind", vec![1], &[matrix.kind.code()]));
    c.write_to(path)?;
    let sidecar = FeatureSidecar { kind: matrix.kind, class_names: matrix.class_names.clone() };
    let json_path = path.with_extension("json");
    std::fs::write(json_path, serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}

pub fn load_feature_dump(path: &Path) -> Result<FeatureMatrix> {
    let c = Container::read_from(path)?;
    let feats = c.section("features")?;
    let (n, m) = (feats.extents[0] as usize, feats.extents[1] as usize);
    let flat = feats.as_f32();
    let values: Vec<Vec<f64>> = (0..n)
        .map(|i| flat[i * m..(i + 1) * m].iter().map(|&v| v as f64).collect())
        .collect();
    let idx = c.section("index_map")?.as_u32();
    if idx.len() != m * 3 {
        return Err(Error::Format("index_map length disagrees with features".into()));
    }
    let entries = idx.chunks_exact(3).map(|c| (c[0], c[1], c[2])).collect();
    let labels: Vec<usize> = c.section("labels")?.as_u32().iter().map(|&l| l as usize).collect();
    if labels.len() != n {
        return Err(Error::Format("labels length disagrees with features".into()));
    }
    let kind = FeatureKind::from_code(c.section("kind")?.as_u32()[0])?;
    let sidecar: FeatureSidecar =
        serde_json::from_slice(&std::fs::read(path.with_extension("json"))?)?;
    FeatureMatrix::new(values, FeatureIndexMap { entries }, labels, sidecar.class_names, kind)
}
