//! Loop-based reference implementations and fixtures shared by the integration tests.
#![allow(dead_code)]

use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mcg::config::{Config, ModelConfig};
use mcg::model::McgModel;
use mcg::params::Mat;
use mcg::sampling::NormalizedClip;
use mcg::synthetic::{COLORS, DIRECTIONS, SQUARE};
use mcg::text::Vocabulary;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mat(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-scale..scale))
}

pub fn random_clip(rng: &mut impl Rng, frames: usize, res: usize) -> NormalizedClip {
    NormalizedClip {
        frames: Array4::from_shape_simple_fn((frames, res, res, 3), || rng.random_range(-1.0..1.0)),
        mean: [0.0; 3],
        std: [1.0; 3],
    }
}

/// Small model dimensions for exhaustive checks.
pub fn toy_model_config(depth: usize) -> ModelConfig {
    ModelConfig {
        hidden: 16,
        heads: 2,
        ffn_mult: 2,
        patch_size: 4,
        video_depth: depth,
        text_depth: depth,
        fusor_depth: depth,
        generator_depth: depth,
        max_text_len: 12,
        proj_dim: 8,
        memory_dim: 8,
        frames: 2,
        resolution: 8,
        max_answer_len: 4,
        init_std: 0.3,
        ..ModelConfig::default()
    }
}

pub fn toy_model(depth: usize, seed: u64) -> McgModel {
    let mut cfg = Config::default();
    cfg.model = toy_model_config(depth);
    cfg.train.seed = seed;
    cfg.train.batch_size = 3;
    McgModel::new(cfg, Vocabulary::toy()).unwrap()
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    dot(a, b) / ((na + 1e-12) * (nb + 1e-12))
}

fn rows(m: &Mat) -> Vec<Vec<f64>> {
    m.outer_iter().map(|r| r.to_vec()).collect()
}

fn project(x: &[Vec<f64>], w: &Mat) -> Vec<Vec<f64>> {
    x.iter()
        .map(|r| {
            (0..w.ncols())
                .map(|c| (0..w.nrows()).map(|k| r[k] * w[[k, c]]).sum())
                .collect()
        })
        .collect()
}

/// Symmetric InfoNCE, one term at a time.
pub fn icl_oracle(sim: &Mat, tau: f64) -> f64 {
    let b = sim.nrows();
    let mut total = 0.0;
    for i in 0..b {
        let row: Vec<f64> = (0..b).map(|j| sim[[i, j]] / tau).collect();
        let col: Vec<f64> = (0..b).map(|j| sim[[j, i]] / tau).collect();
        total += -(sim[[i, i]] / tau - log_sum_exp(&row));
        total += -(sim[[i, i]] / tau - log_sum_exp(&col));
    }
    total / (2 * b) as f64
}

/// `r = Σ_j softmax_j(tanh(m_j)·tanh(u)) m_j`
pub fn memory_oracle(memory: &[Vec<f64>], u: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let tu: Vec<f64> = u.iter().map(|x| x.tanh()).collect();
    let scores: Vec<f64> = memory
        .iter()
        .map(|m| m.iter().zip(&tu).map(|(a, b)| a.tanh() * b).sum())
        .collect();
    let lse = log_sum_exp(&scores);
    let rho: Vec<f64> = scores.iter().map(|s| (s - lse).exp()).collect();
    let mut r = vec![0.0; u.len()];
    for (m, p) in memory.iter().zip(&rho) {
        for (x, y) in r.iter_mut().zip(m) {
            *x += p * y;
        }
    }
    (r, rho)
}

/// One direction of the token loss: `1/(2n) Σ_k w_k (ℓ^{a2r} + ℓ^{r2a})`.
fn token_direction(states: &[Vec<f64>], memory: &[Vec<f64>], weights: &[f64], tau: f64) -> f64 {
    let n = states.len();
    let resp: Vec<Vec<f64>> = states.iter().map(|u| memory_oracle(memory, u).0).collect();
    let mut total = 0.0;
    for k in 0..n {
        let fwd: Vec<f64> = (0..n).map(|j| cosine(&states[k], &resp[j]) / tau).collect();
        let bwd: Vec<f64> = (0..n).map(|j| cosine(&resp[k], &states[j]) / tau).collect();
        let own = cosine(&states[k], &resp[k]) / tau;
        let l_fwd = -(own - log_sum_exp(&fwd));
        let l_bwd = -(own - log_sum_exp(&bwd));
        total += weights[k] * (l_fwd + l_bwd);
    }
    total / (2 * n) as f64
}

/// Token-grained loss for raw token sets, with explicit saliency `(α, β)` per pair.
pub fn tcl_oracle(
    pairs: &[(Mat, Mat)],
    video_map: &Mat,
    text_map: &Mat,
    tau: f64,
    saliency: &[(Vec<f64>, Vec<f64>)],
) -> f64 {
    let mut total = 0.0;
    for ((video, text), (alpha, beta)) in pairs.iter().zip(saliency) {
        let u = project(&rows(text), text_map);
        let m = project(&rows(video), video_map);
        total += token_direction(&u, &m, alpha, tau);
        total += token_direction(&m, &u, beta, tau);
    }
    total / (2 * pairs.len()) as f64
}

/// Multi-head masked attention with explicit loops. `mask[q][k]` allows key `k` for query `q`.
pub fn attention_oracle(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    heads: usize,
    mask: Option<&Array2<bool>>,
) -> Mat {
    let (nq, d) = q.dim();
    let nk = k.nrows();
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut out = Array2::zeros((nq, d));
    for h in 0..heads {
        for i in 0..nq {
            let allowed: Vec<usize> = (0..nk)
                .filter(|&j| mask.is_none_or(|m| m[[i, j]]))
                .collect();
            if allowed.is_empty() {
                continue;
            }
            let scores: Vec<f64> = allowed
                .iter()
                .map(|&j| {
                    (0..hd)
                        .map(|c| q[[i, h * hd + c]] * k[[j, h * hd + c]])
                        .sum::<f64>()
                        * scale
                })
                .collect();
            let lse = log_sum_exp(&scores);
            for (s, &j) in scores.iter().zip(&allowed) {
                let w = (s - lse).exp();
                for c in 0..hd {
                    out[[i, h * hd + c]] += w * v[[j, h * hd + c]];
                }
            }
        }
    }
    out
}

/// Mean negative log-likelihood over supervised rows.
pub fn lm_oracle(logits: &Mat, targets: &[usize], mask: &[bool]) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for t in 0..logits.nrows() {
        if mask[t] {
            let row = logits.row(t).to_vec();
            total -= row[targets[t]] - log_sum_exp(&row);
            n += 1;
        }
    }
    total / n as f64
}

/// Mean two-way cross-entropy; `rows` are `(logits, matched)`.
pub fn vtm_oracle(rows: &[([f64; 2], bool)]) -> f64 {
    let mut total = 0.0;
    for (l, matched) in rows {
        let lse = log_sum_exp(l);
        let idx = if *matched { 0 } else { 1 };
        total -= l[idx] - lse;
    }
    total / rows.len() as f64
}

/// Reads back (color, direction) from a raw synthetic clip by locating the square in two frames.
pub fn decode_attributes(frames: &Array4<u8>) -> Option<(usize, usize)> {
    let (n, h, w, _) = frames.dim();
    let locate = |f: usize| -> Option<(usize, [f64; 2])> {
        for (ci, (_, rgb)) in COLORS.iter().enumerate() {
            let mut hits = Vec::new();
            for r in 0..h {
                for c in 0..w {
                    if (0..3).all(|ch| frames[[f, r, c, ch]] == rgb[ch]) {
                        hits.push((r, c));
                    }
                }
            }
            if hits.len() == SQUARE * SQUARE {
                let cy = hits.iter().map(|p| p.0 as f64).sum::<f64>() / hits.len() as f64;
                let cx = hits.iter().map(|p| p.1 as f64).sum::<f64>() / hits.len() as f64;
                return Some((ci, [cy, cx]));
            }
        }
        None
    };
    let (c0, p0) = locate(0)?;
    let (c1, p1) = locate(n - 1)?;
    if c0 != c1 {
        return None;
    }
    let (dy, dx) = (p1[0] - p0[0], p1[1] - p0[1]);
    let dir = DIRECTIONS.iter().position(|(_, [y, x])| {
        if dy.abs() > dx.abs() {
            *x == 0 && (*y as f64) * dy > 0.0
        } else {
            *y == 0 && (*x as f64) * dx > 0.0
        }
    })?;
    Some((c0, dir))
}
