//! Multi-granularity contrastive learning.
//!
//! Instance level: summary tokens are projected by bias-free linear heads,
//! normalized to the unit sphere and compared by dot product; the loss is the
//! symmetric in-batch InfoNCE at temperature `τ1`.
//!
//! Token level: each video's tokens are mapped into a memory of dimension
//! `d_m`; every text token's state reads the memory with
//! `r = Mᵀ softmax(tanh(M) tanh(u))` and is contrasted (cosine similarity,
//! temperature `τ2`) against the responses of the other tokens of the same
//! pair. The symmetric text-memory direction is computed the same way, and
//!
//! ```text
//! L_tvc = 1/B Σ_i 1/(2K_i) Σ_k α_ik (ℓ^{y2r}_ik + ℓ^{r2y}_ik)
//! L_tlc = 1/B Σ_i 1/(2J_i) Σ_j β_ij (ℓ^{x2r̃}_ij + ℓ^{r̃2x}_ij)
//! L_TCL = (L_tvc + L_tlc) / 2
//! ```
//!
//! Temperatures are stored as logarithms so they stay positive.

use ndarray::Array2;

use crate::config::{ModelConfig, SaliencyProvider};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Initializer, Mat, ParameterTree};

/// Added to row norms before dividing, so zero vectors stay finite.
pub const NORM_EPS: f64 = 1e-12;

pub const VIDEO_HEAD: &str = "mcl.proj.video";
pub const TEXT_HEAD: &str = "mcl.proj.text";
pub const VIDEO_MEMORY_MAP: &str = "mcl.memory.video";
pub const TEXT_MEMORY_MAP: &str = "mcl.memory.text";
pub const LOG_TAU1: &str = "mcl.log_tau1";
pub const LOG_TAU2: &str = "mcl.log_tau2";

pub fn init_contrastive(
    tree: &mut ParameterTree,
    init: &mut Initializer,
    cfg: &ModelConfig,
) -> Result<()> {
    let d = cfg.hidden;
    tree.insert(format!("{VIDEO_HEAD}.weight"), init.normal(d, cfg.proj_dim))?;
    tree.insert(format!("{TEXT_HEAD}.weight"), init.normal(d, cfg.proj_dim))?;
    tree.insert(
        format!("{VIDEO_MEMORY_MAP}.weight"),
        init.normal(d, cfg.memory_dim),
    )?;
    tree.insert(
        format!("{TEXT_MEMORY_MAP}.weight"),
        init.normal(d, cfg.memory_dim),
    )?;
    tree.insert(LOG_TAU1, Array2::from_elem((1, 1), cfg.tau1_init.ln()))?;
    tree.insert(LOG_TAU2, Array2::from_elem((1, 1), cfg.tau2_init.ln()))?;
    if cfg.saliency == SaliencyProvider::Learned {
        for side in ["text", "video"] {
            tree.insert(format!("mcl.saliency.{side}.weight"), init.normal(d, 1))?;
            tree.insert(format!("mcl.saliency.{side}.bias"), init.zeros(1, 1))?;
        }
    }
    Ok(())
}

/// `(τ1, τ2)` currently stored in `tree`.
pub fn temperatures(tree: &ParameterTree) -> Result<(f64, f64)> {
    Ok((
        tree.require(LOG_TAU1)?[[0, 0]].exp(),
        tree.require(LOG_TAU2)?[[0, 0]].exp(),
    ))
}

/// Projects each row with a bias-free head and scales it to unit length.
pub fn project_normalize(g: &mut Graph, rows: Var, head: &str) -> Var {
    let w = g.param(&format!("{head}.weight"));
    let p = g.matmul(rows, w);
    g.l2_normalize(p, NORM_EPS)
}

/// `S[i][j] = zx_i · zy_j` for unit-normalized projections.
pub fn instance_similarity(g: &mut Graph, zx: Var, zy: Var) -> Result<Var> {
    let (bx, by) = (g.shape(zx), g.shape(zy));
    if bx != by || bx.0 == 0 {
        return Err(Error::shape(
            "instance_similarity (batch)",
            &[bx.0, bx.1],
            &[by.0, by.1],
        ));
    }
    Ok(g.matmul_t(zx, zy))
}

fn inverse_temperature(g: &mut Graph, log_tau: Var) -> Var {
    let neg = g.scale(log_tau, -1.0);
    g.exp(neg)
}

/// Symmetric in-batch InfoNCE over a square similarity matrix.
pub fn icl_loss(g: &mut Graph, sim: Var, log_tau: Var) -> Var {
    let b = g.shape(sim).0;
    assert_eq!(
        g.shape(sim),
        (b, b),
        "icl_loss needs a square similarity matrix"
    );
    let inv_tau = inverse_temperature(g, log_tau);
    let logits = g.scale_by(sim, inv_tau);
    let rows = g.log_softmax(logits, None);
    let x2y = g.diagonal(rows);
    let t = g.transpose(logits);
    let cols = g.log_softmax(t, None);
    let y2x = g.diagonal(cols);
    let both = g.add(x2y, y2x);
    let total = g.sum_all(both);
    g.scale(total, -1.0 / (2.0 * b as f64))
}

/// Memory read-out for each state row: returns responses `R = ρ M` and weights `ρ`.
pub fn memory_response(g: &mut Graph, memory: Var, states: Var) -> (Var, Var) {
    let tm = g.tanh(memory);
    let tu = g.tanh(states);
    let scores = g.matmul_t(tu, tm);
    let rho = g.softmax(scores, None);
    (g.matmul(rho, memory), rho)
}

/// `1/(2n) Σ_k w_k (ℓ^{a2b}_k + ℓ^{b2a}_k)` with cosine similarity between the rows of `a` and `b`.
pub fn token_contrast(g: &mut Graph, a: Var, b: Var, log_tau: Var, weights: Var) -> Var {
    let n = g.shape(a).0;
    let an = g.l2_normalize(a, NORM_EPS);
    let bn = g.l2_normalize(b, NORM_EPS);
    let sim = g.matmul_t(an, bn);
    let inv_tau = inverse_temperature(g, log_tau);
    let logits = g.scale_by(sim, inv_tau);
    let fwd = g.log_softmax(logits, None);
    let fwd = g.diagonal(fwd);
    let t = g.transpose(logits);
    let bwd = g.log_softmax(t, None);
    let bwd = g.diagonal(bwd);
    let both = g.add(fwd, bwd);
    let weighted = g.mul(both, weights);
    let total = g.sum_all(weighted);
    g.scale(total, -1.0 / (2.0 * n as f64))
}

/// Per-token saliency column for `tokens` (`n × d`).
pub fn saliency(g: &mut Graph, tokens: Var, provider: SaliencyProvider, side: &str) -> Var {
    let n = g.shape(tokens).0;
    match provider {
        SaliencyProvider::Uniform => g.constant(Array2::from_elem((n, 1), 1.0 / n as f64)),
        SaliencyProvider::Learned => {
            let w = g.param(&format!("mcl.saliency.{side}.weight"));
            let b = g.param(&format!("mcl.saliency.{side}.bias"));
            let z = g.matmul(tokens, w);
            let z = g.add_row(z, b);
            g.sigmoid(z)
        }
    }
}

/// Token sets of one video-text pair: `video` is `J × d_x`, `text` is `K × d_y`.
#[derive(Debug, Clone, Copy)]
pub struct TokenPair {
    pub video: Var,
    pub text: Var,
}

/// Saliency weights for one pair: `α` (`K × 1`) and `β` (`J × 1`).
#[derive(Debug, Clone, Copy)]
pub struct PairSaliency {
    pub text: Var,
    pub video: Var,
}

/// Both directions of the token-grained loss for one pair: `(L_tvc_i, L_tlc_i)`.
pub fn tcl_pair(g: &mut Graph, pair: TokenPair, weights: PairSaliency, log_tau: Var) -> (Var, Var) {
    let text_map = g.param(&format!("{TEXT_MEMORY_MAP}.weight"));
    let video_map = g.param(&format!("{VIDEO_MEMORY_MAP}.weight"));
    let states = g.matmul(pair.text, text_map);
    let memory = g.matmul(pair.video, video_map);
    let (video_resp, _) = memory_response(g, memory, states);
    let tvc = token_contrast(g, states, video_resp, log_tau, weights.text);
    let (text_resp, _) = memory_response(g, states, memory);
    let tlc = token_contrast(g, memory, text_resp, log_tau, weights.video);
    (tvc, tlc)
}

/// Token-grained loss averaged over pairs, with saliency from `provider`.
pub fn tcl_loss(g: &mut Graph, pairs: &[TokenPair], provider: SaliencyProvider) -> Result<Var> {
    let weights: Vec<PairSaliency> = pairs
        .iter()
        .map(|p| PairSaliency {
            text: saliency(g, p.text, provider, "text"),
            video: saliency(g, p.video, provider, "video"),
        })
        .collect();
    tcl_loss_weighted(g, pairs, &weights)
}

pub fn tcl_loss_weighted(
    g: &mut Graph,
    pairs: &[TokenPair],
    weights: &[PairSaliency],
) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::EmptyTokenSet("no pairs".into()));
    }
    for (i, p) in pairs.iter().enumerate() {
        if g.shape(p.text).0 == 0 || g.shape(p.video).0 == 0 {
            return Err(Error::EmptyTokenSet(format!("pair {i}")));
        }
    }
    let log_tau = g.param(LOG_TAU2);
    let mut terms = Vec::with_capacity(2 * pairs.len());
    let scale = 1.0 / (2.0 * pairs.len() as f64);
    for (&pair, &w) in pairs.iter().zip(weights) {
        let (tvc, tlc) = tcl_pair(g, pair, w, log_tau);
        terms.push((tvc, scale));
        terms.push((tlc, scale));
    }
    Ok(g.weighted_sum(&terms))
}

/// `θ1·L_ICL + θ2·L_TCL`
pub fn mcl_loss(icl: f64, tcl: f64, theta: [f64; 2]) -> f64 {
    theta[0] * icl + theta[1] * tcl
}

pub fn mcl_loss_graph(g: &mut Graph, icl: Var, tcl: Var, theta: [f64; 2]) -> Var {
    g.weighted_sum(&[(icl, theta[0]), (tcl, theta[1])])
}

/// Value of [`project_normalize`] for plain matrices.
pub fn project_normalize_value(rows: &Mat, weight: &Mat) -> Mat {
    let mut tree = ParameterTree::new();
    tree.insert("head.weight", weight.clone()).unwrap();
    let mut g = Graph::with_params(&tree);
    let x = g.constant(rows.clone());
    let z = project_normalize(&mut g, x, "head");
    g.value(z).clone()
}

/// Value of [`icl_loss`] for a plain similarity matrix.
pub fn icl_loss_value(sim: &Mat, tau: f64) -> Result<f64> {
    if sim.nrows() != sim.ncols() || sim.is_empty() {
        return Err(Error::shape(
            "icl_loss",
            &[sim.nrows(), sim.ncols()],
            &[sim.nrows(), sim.nrows()],
        ));
    }
    if tau <= 0.0 {
        return Err(Error::Invalid(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let mut g = Graph::new();
    let s = g.constant(sim.clone());
    let lt = g.scalar_constant(tau.ln());
    let l = icl_loss(&mut g, s, lt);
    Ok(g.scalar(l))
}

/// Value of [`memory_response`] for one state vector: `(r, ρ)`.
pub fn memory_response_value(memory: &Mat, state: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if memory.nrows() == 0 {
        return Err(Error::EmptyTokenSet("memory has no slots".into()));
    }
    if memory.ncols() != state.len() {
        return Err(Error::shape(
            "memory_response",
            &[memory.ncols()],
            &[state.len()],
        ));
    }
    let mut g = Graph::new();
    let m = g.constant(memory.clone());
    let u = g.constant(Array2::from_shape_vec((1, state.len()), state.to_vec()).unwrap());
    let (r, rho) = memory_response(&mut g, m, u);
    Ok((g.value(r).row(0).to_vec(), g.value(rho).row(0).to_vec()))
}

/// Raw token sets of one pair for [`tcl_loss_value`].
#[derive(Debug, Clone)]
pub struct TokenPairValue {
    pub video: Mat,
    pub text: Mat,
}

/// Value of the token-grained loss using the memory maps and `τ2` in `tree`.
///
/// `saliency` overrides the provider with fixed `(α, β)` columns per pair.
pub fn tcl_loss_value(
    tree: &ParameterTree,
    pairs: &[TokenPairValue],
    provider: SaliencyProvider,
    saliency: Option<&[(Vec<f64>, Vec<f64>)]>,
) -> Result<f64> {
    let mut g = Graph::with_params(tree);
    let vars: Vec<TokenPair> = pairs
        .iter()
        .map(|p| TokenPair {
            video: g.constant(p.video.clone()),
            text: g.constant(p.text.clone()),
        })
        .collect();
    let loss = match saliency {
        None => tcl_loss(&mut g, &vars, provider)?,
        Some(fixed) => {
            let weights: Vec<PairSaliency> = fixed
                .iter()
                .map(|(a, b)| PairSaliency {
                    text: g.constant(Array2::from_shape_vec((a.len(), 1), a.clone()).unwrap()),
                    video: g.constant(Array2::from_shape_vec((b.len(), 1), b.clone()).unwrap()),
                })
                .collect();
            tcl_loss_weighted(&mut g, &vars, &weights)?
        }
    };
    Ok(g.scalar(loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn projections_are_unit_and_scale_invariant() {
        let w = Initializer::new(1, 1.0).normal(4, 3);
        let x = Initializer::new(2, 1.0).normal(5, 4);
        let z = project_normalize_value(&x, &w);
        for row in z.outer_iter() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-6);
        }
        let z2 = project_normalize_value(&(&x * 7.5), &w);
        assert!((&z - &z2).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn zero_projection_stays_finite() {
        let z = project_normalize_value(&Array2::zeros((1, 3)), &Array2::ones((3, 2)));
        assert!(z.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn projection_matches_hand_matmul() {
        let x = array![[1.0, 2.0]];
        let w = array![[3.0, 0.0], [0.0, 2.0]];
        // (3, 4) / 5
        let z = project_normalize_value(&x, &w);
        assert!((z[[0, 0]] - 0.6).abs() < 1e-9 && (z[[0, 1]] - 0.8).abs() < 1e-9);
    }

    #[test]
    fn single_pair_icl_is_zero() {
        assert_eq!(icl_loss_value(&array![[0.37]], 0.07).unwrap(), 0.0);
    }

    #[test]
    fn identity_similarity_icl_hand_value() {
        // Each row/column softmax puts e/(e+1) on the diagonal.
        let l = icl_loss_value(&Array2::eye(2), 1.0).unwrap();
        assert!((l - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        assert!((l - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn icl_is_shift_invariant() {
        let s = Initializer::new(3, 0.5).normal(4, 4);
        let a = icl_loss_value(&s, 0.2).unwrap();
        let b = icl_loss_value(&(&s + 0.3), 0.2).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn memory_response_special_cases() {
        let (r, rho) = memory_response_value(&array![[0.4, -1.0]], &[3.0, 1.0]).unwrap();
        assert_eq!(rho, vec![1.0]);
        assert_eq!(r, vec![0.4, -1.0]);

        let m = array![[0.2, 0.5], [0.2, 0.5], [0.2, 0.5]];
        let (r, rho) = memory_response_value(&m, &[1.0, -2.0]).unwrap();
        assert!(rho.iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-12));
        assert!((r[0] - 0.2).abs() < 1e-12 && (r[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn memory_response_two_slot_hand_value() {
        // scores = (tanh 1 · tanh 2, 0) ≈ (0.73420, 0); ρ₁ = 1/(1+e^-0.73420).
        let (r, rho) = memory_response_value(&array![[1.0, 0.0], [0.0, 1.0]], &[2.0, 0.0]).unwrap();
        let s = 1.0f64.tanh() * 2.0f64.tanh();
        assert!((s - 0.73420).abs() < 1e-5);
        let p = 1.0 / (1.0 + (-s).exp());
        assert!((rho[0] - p).abs() < 1e-12 && (rho[0] - 0.67573).abs() < 1e-5);
        assert!((rho[1] - 0.32427).abs() < 1e-5);
        assert_eq!(r, rho);
    }

    fn tree(cfg: &ModelConfig) -> ParameterTree {
        let mut t = ParameterTree::new();
        init_contrastive(&mut t, &mut Initializer::new(5, 0.5), cfg).unwrap();
        t
    }

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            hidden: 4,
            memory_dim: 3,
            proj_dim: 3,
            tau2_init: 0.5,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn single_text_token_zeroes_the_text_direction() {
        let cfg = small_cfg();
        let t = tree(&cfg);
        let pair = TokenPairValue {
            video: Initializer::new(8, 1.0).normal(3, 4),
            text: Initializer::new(9, 1.0).normal(1, 4),
        };
        // With K = 1 only the video-side term survives.
        let only_video = tcl_loss_value(
            &t,
            std::slice::from_ref(&pair),
            SaliencyProvider::Uniform,
            Some(&[(vec![0.0], vec![1.0 / 3.0; 3])]),
        )
        .unwrap();
        let full = tcl_loss_value(&t, &[pair], SaliencyProvider::Uniform, None).unwrap();
        assert!((only_video - full).abs() < 1e-12);
    }

    #[test]
    fn uniform_saliency_is_ones_scaled_by_token_count() {
        let cfg = small_cfg();
        let t = tree(&cfg);
        // K = J = 3 so both directions scale by the same 1/3.
        let pair = TokenPairValue {
            video: Initializer::new(8, 1.0).normal(3, 4),
            text: Initializer::new(9, 1.0).normal(3, 4),
        };
        let uniform = tcl_loss_value(
            &t,
            std::slice::from_ref(&pair),
            SaliencyProvider::Uniform,
            None,
        )
        .unwrap();
        let ones = tcl_loss_value(
            &t,
            &[pair],
            SaliencyProvider::Uniform,
            Some(&[(vec![1.0; 3], vec![1.0; 3])]),
        )
        .unwrap();
        assert!((uniform * 3.0 - ones).abs() < 1e-12);
    }

    #[test]
    fn empty_token_set_rejected() {
        let cfg = small_cfg();
        let t = tree(&cfg);
        let pair = TokenPairValue {
            video: Array2::zeros((0, 4)),
            text: Initializer::new(9, 1.0).normal(2, 4),
        };
        let err = tcl_loss_value(&t, &[pair], SaliencyProvider::Uniform, None).unwrap_err();
        assert!(err.to_string().contains("empty token set"));
    }

    #[test]
    fn learned_saliency_is_in_unit_interval() {
        let cfg = ModelConfig {
            saliency: SaliencyProvider::Learned,
            ..small_cfg()
        };
        let t = tree(&cfg);
        let mut g = Graph::with_params(&t);
        let x = g.constant(Initializer::new(3, 1.0).normal(6, 4));
        let s = saliency(&mut g, x, SaliencyProvider::Learned, "text");
        assert!(g.value(s).iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn mcl_weights_components() {
        assert_eq!(mcl_loss(1.0, 2.0, [1.0, 1.0]), 3.0);
        assert_eq!(mcl_loss(1.0, 2.0, [1.0, 0.0]), 1.0);
        assert_eq!(mcl_loss(1.0, 2.0, [0.0, 1.0]), 2.0);
    }
}
