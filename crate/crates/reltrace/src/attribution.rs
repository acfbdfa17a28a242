//! Probe-side attribution: contrast direction, HeadScore, TokenScore,
//! head concentration, the average-attention baseline, and deterministic
//! report rendering.
//!
//! All scores live on the raw feature scale, so the completeness
//! identities Σ HeadScore = ΔW·x and Σ_ℓ Σ_j TokenScore_ℓ(j) = ΔW·x hold
//! exactly up to floating-point error.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelWeights, TraceBundle};
use crate::numerics::softmax_slice;
use crate::probing::ProbeModel;
use crate::tracing::{head_token_contribution, FeatureKind};

/// Direction in feature space separating the predicted class from a
/// softmax-weighted mixture of its competitors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContrastDirection {
    pub delta_w: Vec<f64>,
    /// `(class, weight)` for every non-predicted class; weights sum to 1.
    pub pi: Vec<(usize, f64)>,
    pub predicted: usize,
    pub tau: f64,
    pub logits: Vec<f64>,
}

/// Signed per-head attribution scores, keyed by `(layer, head)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadScoreGrid {
    pub scores: BTreeMap<(u32, u32), f64>,
}

impl HeadScoreGrid {
    pub fn total(&self) -> f64 {
        self.scores.values().sum()
    }
}

/// Signed per-source-token attribution scores, per layer and aggregated.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenScoreMap {
    /// `per_layer[l][j]` for source positions `j ≤ t`.
    pub per_layer: Vec<Vec<f64>>,
    /// `aggregated[j] = Σ_l per_layer[l][j]`.
    pub aggregated: Vec<f64>,
}

impl TokenScoreMap {
    pub fn total(&self) -> f64 {
        self.aggregated.iter().sum()
    }
}

/// `ΔW = W_ĉ − Σ_{c≠ĉ} π_c W_c` with `π = softmax(competitor logits / τ)`.
pub fn contrast_direction(probe: &ProbeModel, x: &[f64], tau: f64) -> Result<ContrastDirection> {
    let c = probe.n_classes();
    if c < 2 {
        return Err(Error::Config("contrast direction needs at least 2 classes".into()));
    }
    if !tau.is_finite() || tau <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let (logits, predicted) = crate::probing::predict(probe, x)?;
    let others: Vec<usize> = (0..c).filter(|&i| i != predicted).collect();
    let other_logits: Vec<f64> = others.iter().map(|&i| logits[i]).collect();
    let weights = softmax_slice(&other_logits, tau)?;
    let m = probe.n_features();
    let mut delta_w = probe.w[predicted].clone();
    for (&cls, &w) in others.iter().zip(&weights) {
        for (dw, &wc) in delta_w.iter_mut().zip(&probe.w[cls][..m]) {
            *dw -= w * wc;
        }
    }
    Ok(ContrastDirection {
        delta_w,
        pi: others.into_iter().zip(weights).collect(),
        predicted,
        tau,
        logits,
    })
}

fn require_attn_head(kind: FeatureKind) -> Result<()> {
    if kind != FeatureKind::AttnHead {
        return Err(Error::Config(format!(
            "head/token attribution requires per-head attention features, got {kind:?}"
        )));
    }
    Ok(())
}

/// `HeadScore_{ℓ,h} = Σ_{m: ℓ_m=ℓ, h_m=h} ΔW_m x_m`.
pub fn head_score(probe: &ProbeModel, x: &[f64], direction: &ContrastDirection) -> Result<HeadScoreGrid> {
    require_attn_head(probe.kind)?;
    if x.len() != probe.n_features() || direction.delta_w.len() != probe.n_features() {
        return Err(Error::Shape(format!(
            "feature count mismatch: x {} vs probe {}",
            x.len(),
            probe.n_features()
        )));
    }
    let mut scores = BTreeMap::new();
    for (m, &(l, h, _)) in probe.index_map.entries.iter().enumerate() {
        *scores.entry((l, h)).or_insert(0.0) += direction.delta_w[m] * x[m];
    }
    Ok(HeadScoreGrid { scores })
}

/// `TokenScore_ℓ(j) = Σ_{m: ℓ_m=ℓ} ΔW_m [Δ_att,h_m(t,j)]_{d_m}`, recomputing
/// per-token features from the trace.
pub fn token_score(
    probe: &ProbeModel,
    trace: &TraceBundle,
    weights: &ModelWeights,
    t: usize,
    direction: &ContrastDirection,
) -> Result<TokenScoreMap> {
    require_attn_head(probe.kind)?;
    if t >= trace.seq_len() {
        return Err(Error::Index(format!("target {t} >= T {}", trace.seq_len())));
    }
    let n_layers = trace.config.n_layers;
    let mut per_layer = vec![vec![0.0; t + 1]; n_layers];
    // Group features by their head so each Δ_att,h(t,j) is computed once.
    let mut by_head: BTreeMap<(u32, u32), Vec<(usize, u32)>> = BTreeMap::new();
    for (m, &(l, h, d)) in probe.index_map.entries.iter().enumerate() {
        by_head.entry((l, h)).or_default().push((m, d));
    }
    for (&(l, h), feats) in &by_head {
        for (j, slot) in per_layer[l as usize].iter_mut().enumerate().take(t + 1) {
            let c = head_token_contribution(trace, weights, l as usize, h as usize, t, j)?;
            let mut s = 0.0;
            for &(m, d) in feats {
                s += direction.delta_w[m] * c.vector[d as usize];
            }
            *slot += s;
        }
    }
    let mut aggregated = vec![0.0; t + 1];
    for row in &per_layer {
        for (a, v) in aggregated.iter_mut().zip(row) {
            *a += v;
        }
    }
    Ok(TokenScoreMap { per_layer, aggregated })
}

/// Minimum number of heads, in descending |score| order (ties broken by
/// ascending (layer, head)), whose cumulative |score| reaches
/// `fraction · Σ|score|`.
pub fn concentration(grid: &HeadScoreGrid, fraction: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("fraction {fraction} outside [0, 1]")));
    }
    let total: f64 = grid.scores.values().map(|v| v.abs()).sum();
    if grid.scores.is_empty() || total == 0.0 {
        return Err(Error::Data("concentration undefined for an all-zero grid".into()));
    }
    let mut entries: Vec<(&(u32, u32), f64)> =
        grid.scores.iter().map(|(k, v)| (k, v.abs())).collect();
    entries.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(b.0)));
    let mut cum = 0.0;
    for (i, (_, v)) in entries.iter().enumerate() {
        cum += v;
        if cum >= fraction * total {
            return Ok(i + 1);
        }
    }
    Ok(entries.len())
}

/// Mean of `Attn_h(t, j)` over all layers and heads; a probe-free baseline.
pub fn avg_attention(trace: &TraceBundle, t: usize) -> Result<Vec<f64>> {
    if t >= trace.seq_len() {
        return Err(Error::Index(format!("target {t} >= T {}", trace.seq_len())));
    }
    let cfg = &trace.config;
    let mut out = vec![0.0; t + 1];
    for l in 0..cfg.n_layers {
        for h in 0..cfg.n_heads {
            for (j, o) in out.iter_mut().enumerate() {
                *o += trace.attn_weights[l][h].at(t, j);
            }
        }
    }
    let denom = (cfg.n_layers * cfg.n_heads) as f64;
    for o in &mut out {
        *o /= denom;
    }
    Ok(out)
}

// --- report emission ------------------------------------------------------

/// Emit-time re-verification of the completeness identities.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompletenessCheck {
    pub delta_dot_x: f64,
    pub head_sum: f64,
    pub token_sum: f64,
    pub head_error: f64,
    pub token_error: f64,
    pub head_ok: bool,
    pub token_ok: bool,
}

/// Full per-query attribution record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttributionReport {
    pub tokens: Vec<u32>,
    pub token_displays: Vec<String>,
    pub recall_pos: usize,
    pub predicted: usize,
    pub gold: Option<usize>,
    pub class_names: Vec<String>,
    pub logits: Vec<f64>,
    pub pi: Vec<(usize, f64)>,
    /// `(layer, head, score)` triples in ascending (layer, head) order.
    pub head_scores: Vec<(u32, u32, f64)>,
    pub token_scores_per_layer: Vec<Vec<f64>>,
    pub token_scores: Vec<f64>,
    pub avg_attention: Vec<f64>,
    pub completeness: CompletenessCheck,
}

/// Assembles the report for one query and re-verifies completeness.
#[allow(clippy::too_many_arguments)]
pub fn build_report(
    probe: &ProbeModel,
    x: &[f64],
    trace: &TraceBundle,
    weights: &ModelWeights,
    recall_pos: usize,
    gold: Option<usize>,
    token_displays: Vec<String>,
    tau: f64,
) -> Result<AttributionReport> {
    let direction = contrast_direction(probe, x, tau)?;
    let grid = head_score(probe, x, &direction)?;
    let tokens_map = token_score(probe, trace, weights, recall_pos, &direction)?;
    let delta_dot_x: f64 = direction.delta_w.iter().zip(x).map(|(w, v)| w * v).sum();
    let head_sum = grid.total();
    let token_sum = tokens_map.total();
    let head_error = (head_sum - delta_dot_x).abs();
    let token_error = (token_sum - delta_dot_x).abs();
    let scale = delta_dot_x.abs().max(1.0);
    let completeness = CompletenessCheck {
        delta_dot_x,
        head_sum,
        token_sum,
        head_error,
        token_error,
        head_ok: head_error <= 1e-10 * scale,
        token_ok: token_error <= 1e-9 * scale,
    };
    if !completeness.head_ok || !completeness.token_ok {
        return Err(Error::Invariant(format!(
            "attribution completeness violated: head err {head_error:.3e}, token err {token_error:.3e}"
        )));
    }
    Ok(AttributionReport {
        tokens: trace.tokens.clone(),
        token_displays,
        recall_pos,
        predicted: direction.predicted,
        gold,
        class_names: probe.class_names.clone(),
        logits: direction.logits.clone(),
        pi: direction.pi.clone(),
        head_scores: grid.scores.iter().map(|(&(l, h), &s)| (l, h, s)).collect(),
        token_scores_per_layer: tokens_map.per_layer,
        token_scores: tokens_map.aggregated,
        avg_attention: avg_attention(trace, recall_pos)?,
        completeness,
    })
}

fn cell_color(value: f64, max: f64) -> String {
    // Negative scores render as blank cells; stored data keeps the sign.
    let v = if max > 0.0 { (value.max(0.0) / max).clamp(0.0, 1.0) } else { 0.0 };
    let chan = (255.0 - v * 200.0).round() as u8;
    format!("rgb({chan},{chan},255)")
}

fn svg_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Deterministic SVG heatmap of TokenScores. With `per_layer` set, one row
/// per layer normalized within that row; otherwise a single aggregated row
/// normalized over the whole query.
pub fn render_heatmap_svg(report: &AttributionReport, per_layer: bool) -> String {
    let cols = report.token_scores.len();
    let rows: Vec<(String, &[f64])> = if per_layer {
        report
            .token_scores_per_layer
            .iter()
            .enumerate()
            .map(|(l, r)| (format!("L{l}"), r.as_slice()))
            .collect()
    } else {
        vec![("all".to_string(), report.token_scores.as_slice())]
    };
    let cell = 26;
    let label_w = 48;
    let header_h = 70;
    let width = label_w + cols * cell;
    let height = header_h + rows.len() * cell;
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         font-family=\"monospace\" font-size=\"9\">\n"
    ));
    for (j, disp) in report.token_displays.iter().take(cols).enumerate() {
        let x = label_w + j * cell + cell / 2;
        svg.push_str(&format!(
            "<text x=\"{x}\" y=\"{}\" text-anchor=\"start\" transform=\"rotate(-60 {x} {})\">{}</text>\n",
            header_h - 6,
            header_h - 6,
            svg_escape(disp)
        ));
    }
    for (r, (label, values)) in rows.iter().enumerate() {
        let y = header_h + r * cell;
        svg.push_str(&format!(
            "<text x=\"4\" y=\"{}\" dominant-baseline=\"middle\">{}</text>\n",
            y + cell / 2,
            svg_escape(label)
        ));
        let max = if per_layer {
            values.iter().cloned().fold(0.0f64, f64::max)
        } else {
            report.token_scores.iter().cloned().fold(0.0f64, f64::max)
        };
        for (j, &v) in values.iter().enumerate() {
            let x = label_w + j * cell;
            svg.push_str(&format!(
                "<rect x=\"{x}\" y=\"{y}\" width=\"{cell}\" height=\"{cell}\" fill=\"{}\" \
                 stroke=\"#999\"><title>{:.6}</title></rect>\n",
                cell_color(v, max),
                v
            ));
        }
    }
    svg.push_str("</svg>\n");
    svg
}
