//! Straight-line reference implementation of the decoder forward pass,
//! written with plain nested vectors and no shared helper code, used as an
//! independent oracle for the instrumented forward pass.
//!
//! Index-based loops are intentional here: the point is a naive, obviously
//! correct transcription, not idiomatic iterator code.
#![allow(clippy::needless_range_loop)]

use reltrace::model::{forward, ModelConfig, ModelWeights};
use reltrace::numerics::Rng;

type Mat = Vec<Vec<f64>>;

fn mat_from(t: &reltrace::numerics::Tensor) -> Mat {
    let rows = t.shape()[0];
    (0..rows).map(|r| t.row(r).to_vec()).collect()
}

fn vec_from(t: &reltrace::numerics::Tensor) -> Vec<f64> {
    t.data().to_vec()
}

fn ref_rmsnorm(x: &[f64], gamma: &[f64], eps: f64) -> Vec<f64> {
    let ms: f64 = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let s = 1.0 / (ms + eps).sqrt();
    x.iter().zip(gamma).map(|(&v, &g)| g * s * v).collect()
}

fn ref_rope(v: &mut [f64], pos: usize, d_head: usize) {
    for i in 0..d_head / 2 {
        let theta = pos as f64 * 10000f64.powf(-2.0 * i as f64 / d_head as f64);
        let (a, b) = (v[2 * i], v[2 * i + 1]);
        v[2 * i] = a * theta.cos() - b * theta.sin();
        v[2 * i + 1] = a * theta.sin() + b * theta.cos();
    }
}

/// Plain-loop forward pass returning the logits matrix.
fn reference_forward(w: &ModelWeights, tokens: &[u32], use_rope: bool) -> Mat {
    let cfg = w.config;
    let (d, dh, nh, df) = (cfg.d_model, cfg.d_head, cfg.n_heads, cfg.d_ff);
    let n = tokens.len();
    let embed = mat_from(&w.embed);
    let mut x: Mat = tokens.iter().map(|&t| embed[t as usize].clone()).collect();

    for lw in &w.layers {
        let wq = mat_from(&lw.wq);
        let wk = mat_from(&lw.wk);
        let wv = mat_from(&lw.wv);
        let wo = mat_from(&lw.wo);
        let attn_gamma = vec_from(&lw.attn_norm);
        let xn: Mat = x.iter().map(|r| ref_rmsnorm(r, &attn_gamma, cfg.norm_eps)).collect();
        let mut delta = vec![vec![0.0; d]; n];
        for h in 0..nh {
            let col = h * dh;
            let project = |m: &Mat, t: usize| -> Vec<f64> {
                (0..dh).map(|dd| (0..d).map(|i| xn[t][i] * m[i][col + dd]).sum()).collect()
            };
            let mut q: Mat = (0..n).map(|t| project(&wq, t)).collect();
            let mut k: Mat = (0..n).map(|t| project(&wk, t)).collect();
            let v: Mat = (0..n).map(|t| project(&wv, t)).collect();
            if use_rope {
                for t in 0..n {
                    ref_rope(&mut q[t], t, dh);
                    ref_rope(&mut k[t], t, dh);
                }
            }
            for t in 0..n {
                let scores: Vec<f64> = (0..=t)
                    .map(|j| {
                        (0..dh).map(|i| q[t][i] * k[j][i]).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = exps.iter().sum();
                for j in 0..=t {
                    let a = exps[j] / z;
                    for i in 0..dh {
                        for o in 0..d {
                            delta[t][o] += a * v[j][i] * wo[col + i][o];
                        }
                    }
                }
            }
        }
        for t in 0..n {
            for o in 0..d {
                x[t][o] += delta[t][o];
            }
        }

        let w_gate = mat_from(&lw.w_gate);
        let w_up = mat_from(&lw.w_up);
        let w_down = mat_from(&lw.w_down);
        let mlp_gamma = vec_from(&lw.mlp_norm);
        for t in 0..n {
            let y = ref_rmsnorm(&x[t], &mlp_gamma, cfg.norm_eps);
            for ff in 0..df {
                let gp: f64 = (0..d).map(|i| y[i] * w_gate[i][ff]).sum();
                let up: f64 = (0..d).map(|i| y[i] * w_up[i][ff]).sum();
                let act = gp / (1.0 + (-gp).exp()) * up;
                for o in 0..d {
                    x[t][o] += act * w_down[ff][o];
                }
            }
        }
    }

    let final_gamma = vec_from(&w.final_norm);
    let unembed = mat_from(&w.unembed);
    (0..n)
        .map(|t| {
            let y = ref_rmsnorm(&x[t], &final_gamma, cfg.norm_eps);
            (0..cfg.vocab_size)
                .map(|o| (0..cfg.d_model).map(|i| y[i] * unembed[i][o]).sum())
                .collect()
        })
        .collect()
}

fn check_against_reference(use_rope: bool, seed: u64) {
    let config = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        d_head: 8,
        d_ff: 24,
        vocab_size: 30,
        use_rope,
        norm_eps: 1e-6,
        max_seq_len: 32,
    };
    let mut rng = Rng::new(seed);
    let weights = ModelWeights::random(config, 0.4, &mut rng).unwrap();
    let tokens: Vec<u32> = (0..5).map(|_| rng.below(30) as u32).collect();
    let trace = forward(&weights, &tokens).unwrap();
    let want = reference_forward(&weights, &tokens, use_rope);
    for t in 0..tokens.len() {
        for o in 0..config.vocab_size {
            let got = trace.logits.at(t, o);
            assert!(
                (got - want[t][o]).abs() < 1e-9,
                "rope={use_rope} t={t} o={o}: {got} vs {}",
                want[t][o]
            );
        }
    }
}

#[test]
fn forward_matches_straight_line_reference() {
    for seed in [1, 2, 3] {
        check_against_reference(false, seed);
    }
}

#[test]
fn forward_matches_reference_with_rope() {
    for seed in [4, 5, 6] {
        check_against_reference(true, seed);
    }
}
