//! Instrumented LLaMA-style decoder (pre-norm, RMSNorm, SwiGLU, no biases).
//!
//! The forward pass is the standard one; the point of this module is the
//! [`TraceBundle`] it returns, which caches every quantity the tracing
//! module needs to decompose sublayer outputs into per-head and per-source
//! contributions: attention weights, per-head value vectors, frozen MLP
//! norm scales, and post-nonlinearity gate activations.
//!
//! The absence of bias vectors makes the per-head decomposition of the
//! attention sublayer output an exact identity rather than an approximation.

use std::path::Path;

use crate::container::{Container, Section};
use crate::error::{Error, Result};
use crate::numerics::{rmsnorm, silu_scalar, softmax_slice, Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub use_rope: bool,
    pub norm_eps: f64,
    pub max_seq_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.n_layers,
            self.n_heads,
            self.d_model,
            self.d_head,
            self.d_ff,
            self.vocab_size,
            self.max_seq_len,
        ];
        if positive.contains(&0) {
            return Err(Error::Config("all model extents must be positive".into()));
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::Config(format!(
                "d_model {} != n_heads {} * d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if self.norm_eps.is_nan() || self.norm_eps < 0.0 {
            return Err(Error::Config("norm_eps must be non-negative".into()));
        }
        Ok(())
    }

    fn to_header(self) -> Vec<u8> {
        let mut b = Vec::with_capacity(33);
        for v in [
            self.n_layers,
            self.n_heads,
            self.d_model,
            self.d_head,
            self.d_ff,
            self.vocab_size,
            self.max_seq_len,
        ] {
            b.extend_from_slice(&(v as u32).to_le_bytes());
        }
        b.push(self.use_rope as u8);
        b.extend_from_slice(&(self.norm_eps as f32).to_le_bytes());
        b
    }

    fn from_header(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != 33 {
            return Err(Error::Format(format!("config header is {} bytes, expected 33", bytes.len())));
        }
        let u = |i: usize| u32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap()) as usize;
        let cfg = ModelConfig {
            n_layers: u(0),
            n_heads: u(1),
            d_model: u(2),
            d_head: u(3),
            d_ff: u(4),
            vocab_size: u(5),
            max_seq_len: u(6),
            use_rope: bytes[28] != 0,
            norm_eps: f32::from_le_bytes(bytes[29..33].try_into().unwrap()) as f64,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One decoder layer. Q/K/V are `[d_model × d_model]` with head `h`
/// occupying columns `h·d_head..(h+1)·d_head`; the output projection is
/// `[d_model × d_model]` with head `h` occupying the matching rows, so the
/// `W_{O,h}` slice is `[d_head × d_model]`.
#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub attn_norm: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub mlp_norm: Tensor,
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
}

#[derive(Debug, Clone)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub embed: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Tensor,
    pub unembed: Tensor,
}

impl ModelWeights {
    /// Random weights with entries uniform in [-scale, scale), quantized to
    /// f32 so container round-trips are bit-exact.
    pub fn random(config: ModelConfig, scale: f64, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let f = config.d_ff;
        let v = config.vocab_size;
        fn rt(shape: Vec<usize>, scale: f64, rng: &mut Rng) -> Tensor {
            let mut t = Tensor::random(shape, scale, rng);
            quantize_to_f32(&mut t);
            t
        }
        fn norm_weights(d: usize, rng: &mut Rng) -> Tensor {
            let mut t = Tensor::random(vec![d], 0.2, rng);
            for x in t.data_mut() {
                *x = (1.0 + *x) as f32 as f64;
            }
            t
        }
        let layers = (0..config.n_layers)
            .map(|_| LayerWeights {
                attn_norm: norm_weights(d, rng),
                wq: rt(vec![d, d], scale, rng),
                wk: rt(vec![d, d], scale, rng),
                wv: rt(vec![d, d], scale, rng),
                wo: rt(vec![d, d], scale, rng),
                mlp_norm: norm_weights(d, rng),
                w_gate: rt(vec![d, f], scale, rng),
                w_up: rt(vec![d, f], scale, rng),
                w_down: rt(vec![f, d], scale, rng),
            })
            .collect();
        Ok(Self {
            embed: rt(vec![v, d], scale, rng),
            layers,
            final_norm: norm_weights(d, rng),
            unembed: rt(vec![d, v], scale, rng),
            config,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let d = self.config.d_model;
        let f = self.config.d_ff;
        let v = self.config.vocab_size;
        let check = |t: &Tensor, shape: &[usize], name: &str| -> Result<()> {
            if t.shape() != shape {
                return Err(Error::Format(format!(
                    "{name}: shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            Ok(())
        };
        check(&self.embed, &[v, d], "embed")?;
        check(&self.final_norm, &[d], "final_norm")?;
        check(&self.unembed, &[d, v], "unembed")?;
        if self.layers.len() != self.config.n_layers {
            return Err(Error::Format("layer count disagrees with config".into()));
        }
        for (l, lw) in self.layers.iter().enumerate() {
            check(&lw.attn_norm, &[d], &format!("layers.{l}.attn_norm"))?;
            check(&lw.wq, &[d, d], &format!("layers.{l}.wq"))?;
            check(&lw.wk, &[d, d], &format!("layers.{l}.wk"))?;
            check(&lw.wv, &[d, d], &format!("layers.{l}.wv"))?;
            check(&lw.wo, &[d, d], &format!("layers.{l}.wo"))?;
            check(&lw.mlp_norm, &[d], &format!("layers.{l}.mlp_norm"))?;
            check(&lw.w_gate, &[d, f], &format!("layers.{l}.w_gate"))?;
            check(&lw.w_up, &[d, f], &format!("layers.{l}.w_up"))?;
            check(&lw.w_down, &[f, d], &format!("layers.{l}.w_down"))?;
        }
        Ok(())
    }

    /// The `[d_head × d_model]` output-projection slice of head `h`.
    pub fn wo_head<'a>(&'a self, layer: usize, head: usize) -> WoSlice<'a> {
        WoSlice { wo: &self.layers[layer].wo, head, d_head: self.config.d_head }
    }
}

/// Borrowed view of one head's rows of the output projection.
pub struct WoSlice<'a> {
    wo: &'a Tensor,
    head: usize,
    d_head: usize,
}

impl WoSlice<'_> {
    /// `out += coeff · (v ⋅ W_{O,h})` where `v ∈ R^{d_head}`.
    pub fn accumulate(&self, v: &[f64], coeff: f64, out: &mut [f64]) {
        let base = self.head * self.d_head;
        for (i, &vi) in v.iter().enumerate() {
            let row = self.wo.row(base + i);
            let c = coeff * vi;
            for (o, &w) in out.iter_mut().zip(row) {
                *o += c * w;
            }
        }
    }
}

pub fn quantize_to_f32(t: &mut Tensor) {
    for x in t.data_mut() {
        *x = *x as f32 as f64;
    }
}

/// Everything the forward pass caches for tracing.
#[derive(Debug, Clone)]
pub struct TraceBundle {
    pub config: ModelConfig,
    pub tokens: Vec<u32>,
    /// Per layer: residual stream entering the attention sublayer, `[T × d_model]`.
    pub hidden_pre_attn: Vec<Tensor>,
    /// Per layer: residual stream after the attention residual add.
    pub hidden_post_attn: Vec<Tensor>,
    /// Per layer: residual stream after the MLP residual add.
    pub hidden_post_mlp: Vec<Tensor>,
    /// Attention weights `A[l][h]` as `[T × T]`, causal rows.
    pub attn_weights: Vec<Vec<Tensor>>,
    /// Value vectors `Val[l][h]` as `[T × d_head]`.
    pub values: Vec<Vec<Tensor>>,
    /// Attention sublayer output (post `W_O`, pre residual add), `[T × d_model]`.
    pub attn_out: Vec<Tensor>,
    /// Frozen MLP-norm scales `r[l][t]`.
    pub mlp_scales: Vec<Vec<f64>>,
    /// MLP-norm gammas per layer (copied so tracing needs no weight lookup).
    pub mlp_gammas: Vec<Tensor>,
    /// Frozen gate activations `g[l]` as `[T × d_ff]`: the SiLU-gated factor
    /// multiplying `W_up·xn` in the forward pass.
    pub gate_act: Vec<Tensor>,
    /// Post-gate MLP activations `g ⊙ (W_up·xn)` as `[T × d_ff]` (the
    /// pre-down-projection measurement point).
    pub mlp_act: Vec<Tensor>,
    pub logits: Tensor,
}

impl TraceBundle {
    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    /// Checks causal structure and row normalization of every attention row.
    pub fn check_invariants(&self) -> Result<()> {
        let t_max = self.seq_len();
        for (l, heads) in self.attn_weights.iter().enumerate() {
            for (h, a) in heads.iter().enumerate() {
                for t in 0..t_max {
                    let row = a.row(t);
                    let sum: f64 = row[..=t].iter().sum();
                    if (sum - 1.0).abs() > 1e-9 {
                        return Err(Error::Invariant(format!(
                            "attention row (layer {l}, head {h}, t {t}) sums to {sum}"
                        )));
                    }
                    if row[t + 1..].iter().any(|&v| v != 0.0) {
                        return Err(Error::Invariant(format!(
                            "attention row (layer {l}, head {h}, t {t}) is not causal"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Full instrumented forward pass.
pub fn forward(weights: &ModelWeights, tokens: &[u32]) -> Result<TraceBundle> {
    weights.validate()?;
    let cfg = weights.config;
    let t_len = tokens.len();
    if t_len == 0 || t_len > cfg.max_seq_len {
        return Err(Error::Data(format!(
            "sequence length {t_len} outside 1..={}",
            cfg.max_seq_len
        )));
    }
    if let Some(&bad) = tokens.iter().find(|&&tok| tok as usize >= cfg.vocab_size) {
        return Err(Error::Data(format!("token id {bad} >= vocab size {}", cfg.vocab_size)));
    }
    let (d, dh, nh, df) = (cfg.d_model, cfg.d_head, cfg.n_heads, cfg.d_ff);
    let inv_sqrt_dh = 1.0 / (dh as f64).sqrt();

    let mut x = Tensor::zeros(vec![t_len, d]);
    for (t, &tok) in tokens.iter().enumerate() {
        x.row_mut(t).copy_from_slice(weights.embed.row(tok as usize));
    }

    let mut bundle = TraceBundle {
        config: cfg,
        tokens: tokens.to_vec(),
        hidden_pre_attn: Vec::with_capacity(cfg.n_layers),
        hidden_post_attn: Vec::with_capacity(cfg.n_layers),
        hidden_post_mlp: Vec::with_capacity(cfg.n_layers),
        attn_weights: Vec::with_capacity(cfg.n_layers),
        values: Vec::with_capacity(cfg.n_layers),
        attn_out: Vec::with_capacity(cfg.n_layers),
        mlp_scales: Vec::with_capacity(cfg.n_layers),
        mlp_gammas: Vec::with_capacity(cfg.n_layers),
        gate_act: Vec::with_capacity(cfg.n_layers),
        mlp_act: Vec::with_capacity(cfg.n_layers),
        logits: Tensor::zeros(vec![1, 1]),
    };

    for lw in &weights.layers {
        bundle.hidden_pre_attn.push(x.clone());

        // Attention sublayer.
        let mut xn = Tensor::zeros(vec![t_len, d]);
        for t in 0..t_len {
            let (y, _) = rmsnorm(x.row(t), lw.attn_norm.data(), cfg.norm_eps)?;
            xn.row_mut(t).copy_from_slice(&y);
        }
        let mut layer_a = Vec::with_capacity(nh);
        let mut layer_v = Vec::with_capacity(nh);
        let mut attn_out = Tensor::zeros(vec![t_len, d]);
        for h in 0..nh {
            let col = h * dh;
            let mut q = Tensor::zeros(vec![t_len, dh]);
            let mut k = Tensor::zeros(vec![t_len, dh]);
            let mut v = Tensor::zeros(vec![t_len, dh]);
            for t in 0..t_len {
                let xr = xn.row(t);
                for (dd, ((qv, kv), vv)) in q
                    .row_mut(t)
                    .iter_mut()
                    .zip(k.row_mut(t))
                    .zip(v.row_mut(t))
                    .enumerate()
                {
                    let mut qs = 0.0;
                    let mut ks = 0.0;
                    let mut vs = 0.0;
                    for (i, &xi) in xr.iter().enumerate() {
                        qs += xi * lw.wq.at(i, col + dd);
                        ks += xi * lw.wk.at(i, col + dd);
                        vs += xi * lw.wv.at(i, col + dd);
                    }
                    *qv = qs;
                    *kv = ks;
                    *vv = vs;
                }
            }
            if cfg.use_rope {
                for t in 0..t_len {
                    apply_rope(q.row_mut(t), t, dh);
                    apply_rope(k.row_mut(t), t, dh);
                }
            }
            let mut a = Tensor::zeros(vec![t_len, t_len]);
            for t in 0..t_len {
                let scores: Vec<f64> = (0..=t)
                    .map(|j| crate::numerics::dot(q.row(t), k.row(j)) * inv_sqrt_dh)
                    .collect();
                let probs = softmax_slice(&scores, 1.0)?;
                a.row_mut(t)[..=t].copy_from_slice(&probs);
            }
            // head output → W_{O,h} rows.
            for t in 0..t_len {
                let mut agg = vec![0.0; dh];
                for j in 0..=t {
                    let w = a.at(t, j);
                    for (acc, &vv) in agg.iter_mut().zip(v.row(j)) {
                        *acc += w * vv;
                    }
                }
                let out_row = attn_out.row_mut(t);
                for (i, &ai) in agg.iter().enumerate() {
                    let wrow = lw.wo.row(col + i);
                    for (o, &w) in out_row.iter_mut().zip(wrow) {
                        *o += ai * w;
                    }
                }
            }
            layer_a.push(a);
            layer_v.push(v);
        }
        bundle.attn_weights.push(layer_a);
        bundle.values.push(layer_v);
        for t in 0..t_len {
            for (xi, &ai) in x.row_mut(t).iter_mut().zip(attn_out.row(t)) {
                *xi += ai;
            }
        }
        bundle.attn_out.push(attn_out);
        bundle.hidden_post_attn.push(x.clone());

        // MLP sublayer with frozen-quantity caching.
        let mut scales = Vec::with_capacity(t_len);
        let mut gate = Tensor::zeros(vec![t_len, df]);
        let mut act = Tensor::zeros(vec![t_len, df]);
        for t in 0..t_len {
            let (y, r) = rmsnorm(x.row(t), lw.mlp_norm.data(), cfg.norm_eps)?;
            scales.push(r);
            let grow = gate.row_mut(t);
            let arow = act.row_mut(t);
            for ff in 0..df {
                let mut gp = 0.0;
                let mut up = 0.0;
                for (i, &yi) in y.iter().enumerate() {
                    gp += yi * lw.w_gate.at(i, ff);
                    up += yi * lw.w_up.at(i, ff);
                }
                let g = silu_scalar(gp);
                grow[ff] = g;
                arow[ff] = g * up;
            }
            let xr = x.row_mut(t);
            for (ff, &a) in arow.iter().enumerate().take(df) {
                let wrow = lw.w_down.row(ff);
                for (xi, &w) in xr.iter_mut().zip(wrow) {
                    *xi += a * w;
                }
            }
        }
        bundle.mlp_scales.push(scales);
        bundle.mlp_gammas.push(lw.mlp_norm.clone());
        bundle.gate_act.push(gate);
        bundle.mlp_act.push(act);
        bundle.hidden_post_mlp.push(x.clone());
    }

    // Final norm + unembedding.
    let mut logits = Tensor::zeros(vec![t_len, cfg.vocab_size]);
    for t in 0..t_len {
        let (y, _) = rmsnorm(x.row(t), weights.final_norm.data(), cfg.norm_eps)?;
        let lrow = logits.row_mut(t);
        for (i, &yi) in y.iter().enumerate() {
            let urow = weights.unembed.row(i);
            for (o, &u) in lrow.iter_mut().zip(urow) {
                *o += yi * u;
            }
        }
    }
    bundle.logits = logits;
    Ok(bundle)
}

/// Rotary position embedding over consecutive dim pairs, base 10000.
fn apply_rope(v: &mut [f64], pos: usize, d_head: usize) {
    let half = d_head / 2;
    for i in 0..half {
        let theta = (pos as f64) * (10000f64).powf(-2.0 * i as f64 / d_head as f64);
        let (sin, cos) = theta.sin_cos();
        let (a, b) = (v[2 * i], v[2 * i + 1]);
        v[2 * i] = a * cos - b * sin;
        v[2 * i + 1] = a * sin + b * cos;
    }
}

const SECTION_ORDER: [&str; 9] =
    ["attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_gate", "w_up", "w_down"];

pub fn save_weights(weights: &ModelWeights, path: &Path) -> Result<()> {
    weights.validate()?;
    let mut c = Container::new(weights.config.to_header());
    let push = |c: &mut Container, name: String, t: &Tensor| {
        let extents = t.shape().iter().map(|&e| e as u64).collect();
        let vals: Vec<f32> = t.data().iter().map(|&v| v as f32).collect();
        c.push(Section::from_f32(&name, extents, &vals));
    };
    push(&mut c, "embed".into(), &weights.embed);
    for (l, lw) in weights.layers.iter().enumerate() {
        let tensors = [
            &lw.attn_norm,
            &lw.wq,
            &lw.wk,
            &lw.wv,
            &lw.wo,
            &lw.mlp_norm,
            &lw.w_gate,
            &lw.w_up,
            &lw.w_down,
        ];
        for (name, t) in SECTION_ORDER.iter().zip(tensors) {
            push(&mut c, format!("layers.{l}.{name}"), t);
        }
    }
    push(&mut c, "final_norm".into(), &weights.final_norm);
    push(&mut c, "unembed".into(), &weights.unembed);
    c.write_to(path)
}

pub fn load_weights(path: &Path) -> Result<ModelWeights> {
    let c = Container::read_from(path)?;
    let config = ModelConfig::from_header(&c.header)?;
    let grab = |name: &str| -> Result<Tensor> {
        let s = c.section(name)?;
        let shape: Vec<usize> = s.extents.iter().map(|&e| e as usize).collect();
        let data: Vec<f64> = s.as_f32().into_iter().map(|v| v as f64).collect();
        Tensor::new(shape, data)
    };
    let mut layers = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        layers.push(LayerWeights {
            attn_norm: grab(&format!("layers.{l}.attn_norm"))?,
            wq: grab(&format!("layers.{l}.wq"))?,
            wk: grab(&format!("layers.{l}.wk"))?,
            wv: grab(&format!("layers.{l}.wv"))?,
            wo: grab(&format!("layers.{l}.wo"))?,
            mlp_norm: grab(&format!("layers.{l}.mlp_norm"))?,
            w_gate: grab(&format!("layers.{l}.w_gate"))?,
            w_up: grab(&format!("layers.{l}.w_up"))?,
            w_down: grab(&format!("layers.{l}.w_down"))?,
        });
    }
    let weights = ModelWeights {
        config,
        embed: grab("embed")?,
        layers,
        final_norm: grab("final_norm")?,
        unembed: grab("unembed")?,
    };
    weights.validate().map_err(|e| Error::Format(format!("weight container inconsistent: {e}")))?;
    Ok(weights)
}
