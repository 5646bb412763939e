//! Cross-modal fusor with the video-text matching head, and the answer generator.
//!
//! The fusor's queries are `[FUS]` followed by the text tokens (without the
//! text summary row). Each block runs padding-masked self-attention, then
//! cross-attention into the video tokens, then the feed-forward layer, all
//! pre-norm with residuals. Row 0 of the output summarizes the pair.
//!
//! The generator reads `question pieces, [GEN], answer…` under a causal mask
//! and cross-attends to the conditioning set (video tokens followed by the
//! fused evidence, or the fused evidence alone). Its output projection reuses
//! the token embedding table.

use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{DecodeConfig, DecodeMode, GeneratorConditioning, ModelConfig, NegativeMode};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers;
use crate::model::McgModel;
use crate::params::{Initializer, Mat, ParameterTree};
use crate::sampling::NormalizedClip;
use crate::text::{self, ReservedIds, TextEmbedding};
use crate::video::{self, VideoEmbedding};

pub const FUS: &str = "cfor.fus";
pub const VTM_HEAD: &str = "vtm.head";
pub const EMBED: &str = "agor.embed";

/// Index of the "match" class in VTM logits.
pub const MATCH: usize = 0;
pub const MISMATCH: usize = 1;
/// Probabilities are clipped to `[PROB_CLIP, 1 − PROB_CLIP]` in [`vtm_loss`].
pub const PROB_CLIP: f64 = 1e-7;
pub const MAX_BEAM_WIDTH: usize = 5;

pub fn init_fusor(
    tree: &mut ParameterTree,
    init: &mut Initializer,
    cfg: &ModelConfig,
) -> Result<()> {
    let d = cfg.hidden;
    tree.insert(FUS, init.normal(1, d))?;
    for b in 0..cfg.fusor_depth {
        let p = format!("cfor.block{b}");
        layers::init_layer_norm(tree, init, &format!("{p}.self_attn.norm"), d)?;
        layers::init_self_attention(tree, init, &format!("{p}.self_attn"), d)?;
        layers::init_layer_norm(tree, init, &format!("{p}.cross_attn.norm"), d)?;
        layers::init_cross_attention(tree, init, &format!("{p}.cross_attn"), d, d)?;
        layers::init_ffn(tree, init, &format!("{p}.ffn"), d, cfg.ffn_mult)?;
    }
    layers::init_layer_norm(tree, init, "cfor.norm", d)?;
    layers::init_linear(tree, init, VTM_HEAD, d, 2, true)
}

pub fn init_generator(
    tree: &mut ParameterTree,
    init: &mut Initializer,
    cfg: &ModelConfig,
    vocab_size: usize,
) -> Result<()> {
    let d = cfg.hidden;
    tree.insert(EMBED, init.normal(vocab_size, d))?;
    tree.insert("agor.pos", init.normal(cfg.generator_positions(), d))?;
    for b in 0..cfg.generator_depth {
        let p = format!("agor.block{b}");
        layers::init_layer_norm(tree, init, &format!("{p}.self_attn.norm"), d)?;
        layers::init_self_attention(tree, init, &format!("{p}.self_attn"), d)?;
        layers::init_layer_norm(tree, init, &format!("{p}.cross_attn.norm"), d)?;
        layers::init_cross_attention(tree, init, &format!("{p}.cross_attn"), d, d)?;
        layers::init_ffn(tree, init, &format!("{p}.ffn"), d, cfg.ffn_mult)?;
    }
    layers::init_layer_norm(tree, init, "agor.norm", d)
}

/// Fused pair representation; row 0 is the `[FUS]` state.
#[derive(Debug, Clone)]
pub struct FusedEvidence {
    pub tokens: Var,
    pub mask: Vec<bool>,
}

/// Pre-norm block: masked self-attention, cross-attention into `context`, FFN.
fn cross_block(
    g: &mut Graph,
    prefix: &str,
    x: Var,
    context: Var,
    self_mask: crate::graph::Mask,
    cross_mask: Option<crate::graph::Mask>,
    cfg: &ModelConfig,
) -> Var {
    let eps = cfg.layer_norm_eps;
    let h = layers::layer_norm(g, &format!("{prefix}.self_attn.norm"), x, eps);
    let a = layers::self_attention(
        g,
        &format!("{prefix}.self_attn"),
        h,
        cfg.heads,
        Some(self_mask),
    );
    let x = g.add(x, a);
    let h = layers::layer_norm(g, &format!("{prefix}.cross_attn.norm"), x, eps);
    let a = layers::cross_attention(
        g,
        &format!("{prefix}.cross_attn"),
        h,
        context,
        cfg.heads,
        cross_mask,
    );
    let x = g.add(x, a);
    let f = layers::ffn(g, &format!("{prefix}.ffn"), x, eps);
    g.add(x, f)
}

pub fn fuse(
    g: &mut Graph,
    text: &TextEmbedding,
    video: &VideoEmbedding,
    cfg: &ModelConfig,
) -> Result<FusedEvidence> {
    let (ty, dy) = g.shape(text.tokens);
    let (tx, dx) = g.shape(video.tokens);
    if dy != cfg.hidden || dx != cfg.hidden || ty == 0 || tx == 0 || text.mask.len() != ty {
        return Err(Error::shape(
            "fuse (text vs video tokens)",
            &[ty, dy],
            &[tx, dx],
        ));
    }
    let fus = g.param(FUS);
    let mut x = if ty > 1 {
        let body = g.slice_rows(text.tokens, 1, ty);
        g.concat_rows(&[fus, body])
    } else {
        fus
    };
    let mut mask = vec![true];
    mask.extend_from_slice(&text.mask[1..]);
    let self_mask = layers::key_padding_mask(mask.len(), &mask);
    for b in 0..cfg.fusor_depth {
        x = cross_block(
            g,
            &format!("cfor.block{b}"),
            x,
            video.tokens,
            self_mask.clone(),
            None,
            cfg,
        );
    }
    let tokens = layers::layer_norm(g, "cfor.norm", x, cfg.layer_norm_eps);
    Ok(FusedEvidence { tokens, mask })
}

/// `W·fus + b`, a `1 × 2` row of (match, mismatch) logits.
pub fn vtm_logits(g: &mut Graph, fused: &FusedEvidence) -> Var {
    let row = g.slice_rows(fused.tokens, 0, 1);
    layers::linear(g, VTM_HEAD, row)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VtmPrediction {
    /// Probabilities of (match, mismatch).
    pub p: [f64; 2],
    /// One-hot ground truth when known.
    pub q: Option<[f64; 2]>,
}

impl VtmPrediction {
    pub fn from_logits(logits: ArrayView1<'_, f64>) -> Self {
        let m = logits[0].max(logits[1]);
        let (a, b) = ((logits[0] - m).exp(), (logits[1] - m).exp());
        Self {
            p: [a / (a + b), b / (a + b)],
            q: None,
        }
    }

    pub fn labeled(mut self, matched: bool) -> Self {
        self.q = Some(if matched { [1.0, 0.0] } else { [0.0, 1.0] });
        self
    }

    pub fn match_probability(&self) -> f64 {
        self.p[MATCH]
    }
}

pub fn vtm_predict(g: &mut Graph, fused: &FusedEvidence) -> VtmPrediction {
    let l = vtm_logits(g, fused);
    VtmPrediction::from_logits(g.value(l).row(0))
}

/// Mean cross-entropy of positives (label match) and negatives (label mismatch).
pub fn vtm_loss(positives: &[VtmPrediction], negatives: &[VtmPrediction]) -> f64 {
    let n = positives.len() + negatives.len();
    if n == 0 {
        return 0.0;
    }
    let term = |p: f64| -p.clamp(PROB_CLIP, 1.0 - PROB_CLIP).ln();
    let sum: f64 = positives.iter().map(|p| term(p.p[MATCH])).sum::<f64>()
        + negatives.iter().map(|p| term(p.p[MISMATCH])).sum::<f64>();
    sum / n as f64
}

/// Differentiable [`vtm_loss`] over `(logits row, matched)` pairs, without clipping.
pub fn vtm_loss_graph(g: &mut Graph, rows: &[(Var, bool)]) -> Var {
    let logits: Vec<Var> = rows.iter().map(|r| r.0).collect();
    let stacked = g.concat_rows(&logits);
    let logp = g.log_softmax(stacked, None);
    let labels = rows
        .iter()
        .map(|&(_, m)| if m { MATCH } else { MISMATCH })
        .collect();
    let picked = g.pick_per_row(logp, labels);
    let mean = g.mean_all(picked);
    g.scale(mean, -1.0)
}

/// One mismatched `(video, text)` index pair per positive.
pub fn sample_negatives(
    sim: &Mat,
    mode: NegativeMode,
    tau: f64,
    seed: u64,
) -> Result<Vec<(usize, usize)>> {
    let b = sim.nrows();
    if b < 2 {
        return Err(Error::CannotFormNegatives(b));
    }
    if sim.ncols() != b {
        return Err(Error::shape("sample_negatives", &[b, sim.ncols()], &[b, b]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let j = match mode {
            NegativeMode::Uniform => {
                let r = rng.random_range(0..b - 1);
                if r >= i {
                    r + 1
                } else {
                    r
                }
            }
            NegativeMode::Hard => {
                let row = sim.row(i);
                let max = (0..b)
                    .filter(|&j| j != i)
                    .map(|j| row[j])
                    .fold(f64::NEG_INFINITY, f64::max);
                let weights: Vec<f64> = (0..b)
                    .map(|j| {
                        if j == i {
                            0.0
                        } else {
                            ((row[j] - max) / tau).exp()
                        }
                    })
                    .collect();
                let total: f64 = weights.iter().sum();
                let mut u = rng.random::<f64>() * total;
                let mut pick = if i == b - 1 { b - 2 } else { b - 1 };
                for (j, w) in weights.iter().enumerate() {
                    if *w > 0.0 && u < *w {
                        pick = j;
                        break;
                    }
                    u -= w;
                }
                pick
            }
        };
        out.push((i, j));
    }
    Ok(out)
}

/// Keys the generator cross-attends to, with their validity mask.
pub fn conditioning(
    g: &mut Graph,
    video: &VideoEmbedding,
    fused: &FusedEvidence,
    cfg: &ModelConfig,
) -> (Var, Vec<bool>) {
    match cfg.generator_conditioning {
        GeneratorConditioning::FusedOnly => (fused.tokens, fused.mask.clone()),
        GeneratorConditioning::VideoAndFused => {
            let tokens = g.concat_rows(&[video.tokens, fused.tokens]);
            let mut mask = vec![true; g.shape(video.tokens).0];
            mask.extend_from_slice(&fused.mask);
            (tokens, mask)
        }
    }
}

/// Next-token logits (`len × V`) for every position of `ids`.
pub fn decoder_logits(
    g: &mut Graph,
    ids: &[usize],
    cond: Var,
    cond_mask: &[bool],
    cfg: &ModelConfig,
) -> Result<Var> {
    let tree = g.params();
    let vocab_size = tree.require(EMBED)?.nrows();
    let positions = tree.require("agor.pos")?.nrows();
    if ids.is_empty() {
        return Err(Error::Invalid("generator input is empty".into()));
    }
    if ids.len() > positions {
        return Err(Error::GenerationOverflow {
            len: ids.len(),
            max: positions,
        });
    }
    if let Some(&id) = ids.iter().find(|&&id| id >= vocab_size) {
        return Err(Error::VocabularyOverflow {
            id,
            size: vocab_size,
        });
    }
    let (rows, cols) = g.shape(cond);
    if cols != cfg.hidden || rows != cond_mask.len() || rows == 0 {
        return Err(Error::shape(
            "decoder conditioning",
            &[rows, cols],
            &[cond_mask.len(), cfg.hidden],
        ));
    }
    let embed = g.param(EMBED);
    let pos = g.param("agor.pos");
    let e = g.select_rows(embed, ids.to_vec());
    let p = g.slice_rows(pos, 0, ids.len());
    let mut x = g.add(e, p);
    let causal = layers::causal_mask(ids.len());
    let cross = layers::key_padding_mask(ids.len(), cond_mask);
    for b in 0..cfg.generator_depth {
        x = cross_block(
            g,
            &format!("agor.block{b}"),
            x,
            cond,
            causal.clone(),
            Some(cross.clone()),
            cfg,
        );
    }
    let h = layers::layer_norm(g, "agor.norm", x, cfg.layer_norm_eps);
    Ok(g.matmul_t(h, embed))
}

/// Conditioning values detached from any graph, reused across decoding steps.
#[derive(Debug, Clone)]
pub struct Conditioning {
    pub tokens: Mat,
    pub mask: Vec<bool>,
}

/// Decoder state for one hypothesis. The prefix starts with `[GEN]`.
#[derive(Debug, Clone)]
pub struct GenerationState {
    context: Vec<usize>,
    prefix: Vec<usize>,
    logits: Vec<Vec<f64>>,
    finished: bool,
    truncated: bool,
}

impl GenerationState {
    pub fn new(context: Vec<usize>, gen: usize) -> Self {
        Self {
            context,
            prefix: vec![gen],
            logits: Vec::new(),
            finished: false,
            truncated: false,
        }
    }

    pub fn context(&self) -> &[usize] {
        &self.context
    }

    pub fn prefix(&self) -> &[usize] {
        &self.prefix
    }

    /// Logits produced by each step so far.
    pub fn logits(&self) -> &[Vec<f64>] {
        &self.logits
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn is_truncated(&self) -> bool {
        self.truncated
    }

    pub fn push(&mut self, id: usize) {
        self.prefix.push(id);
    }

    pub fn finish(&mut self, truncated: bool) {
        self.finished = true;
        self.truncated = truncated;
    }

    /// Generated tokens after `[GEN]`.
    pub fn generated(&self) -> &[usize] {
        &self.prefix[1..]
    }

    fn input_ids(&self) -> Vec<usize> {
        self.context.iter().chain(&self.prefix).copied().collect()
    }
}

/// Logits for the token following the current prefix.
pub fn generator_step(
    tree: &ParameterTree,
    cfg: &ModelConfig,
    state: &mut GenerationState,
    cond: &Conditioning,
) -> Result<Vec<f64>> {
    if state.prefix.is_empty() {
        return Err(Error::Invalid("generation prefix is empty".into()));
    }
    let ids = state.input_ids();
    let mut g = Graph::with_params(tree);
    let c = g.constant(cond.tokens.clone());
    let logits = decoder_logits(&mut g, &ids, c, &cond.mask, cfg)?;
    let last = g.value(logits).row(ids.len() - 1).to_vec();
    state.logits.push(last.clone());
    Ok(last)
}

/// Logits for every prefix position in a single teacher-forced pass.
pub fn teacher_forced_logits(
    tree: &ParameterTree,
    cfg: &ModelConfig,
    context: &[usize],
    prefix: &[usize],
    cond: &Conditioning,
) -> Result<Mat> {
    let ids: Vec<usize> = context.iter().chain(prefix).copied().collect();
    let mut g = Graph::with_params(tree);
    let c = g.constant(cond.tokens.clone());
    let logits = decoder_logits(&mut g, &ids, c, &cond.mask, cfg)?;
    let rows = g.value(logits);
    Ok(rows.slice(ndarray::s![context.len().., ..]).to_owned())
}

/// Teacher-forcing inputs with shifted targets; only answer positions are supervised.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LmExample {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
}

/// `context, [GEN], answer` as inputs; targets are `answer, [EOS]` on the answer positions.
pub fn lm_example(context: &[usize], answer: &[usize], reserved: &ReservedIds) -> LmExample {
    let mut inputs = context.to_vec();
    inputs.push(reserved.gen);
    inputs.extend_from_slice(answer);
    let mut targets: Vec<usize> = inputs[1..].to_vec();
    targets.push(reserved.eos);
    let mask = (0..inputs.len()).map(|t| t >= context.len()).collect();
    LmExample {
        inputs,
        targets,
        mask,
    }
}

/// Mean `−log softmax(logits)[target]` over supervised positions.
pub fn lm_loss(g: &mut Graph, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
    let (rows, vocab) = g.shape(logits);
    if targets.len() != rows || mask.len() != rows {
        return Err(Error::shape(
            "lm_loss",
            &[rows],
            &[targets.len(), mask.len()],
        ));
    }
    let keep: Vec<usize> = (0..rows).filter(|&t| mask[t]).collect();
    if keep.is_empty() {
        return Err(Error::NoSupervisedPositions);
    }
    if let Some(&id) = keep.iter().map(|&t| &targets[t]).find(|&&id| id >= vocab) {
        return Err(Error::VocabularyOverflow { id, size: vocab });
    }
    let picked_targets = keep.iter().map(|&t| targets[t]).collect();
    let rows = g.select_rows(logits, keep);
    let logp = g.log_softmax(rows, None);
    let picked = g.pick_per_row(logp, picked_targets);
    let mean = g.mean_all(picked);
    Ok(g.scale(mean, -1.0))
}

pub fn lm_loss_value(logits: &Mat, targets: &[usize], mask: &[bool]) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let loss = lm_loss(&mut g, l, targets, mask)?;
    Ok(g.scalar(loss))
}

fn log_softmax_vec(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
    logits.iter().map(|&x| x - lse).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedAnswer {
    pub text: String,
    pub ids: Vec<usize>,
    /// Decoding hit the length limit before emitting `[EOS]`.
    pub truncated: bool,
    /// Sum of token log-probabilities, `[EOS]` included when emitted.
    pub log_prob: f64,
}

#[derive(Debug, Clone)]
struct Hypothesis {
    state: GenerationState,
    log_prob: f64,
    /// Scored tokens, including `[EOS]`.
    length: usize,
}

impl Hypothesis {
    fn score(&self) -> f64 {
        if self.length == 0 {
            0.0
        } else {
            self.log_prob / self.length as f64
        }
    }
}

/// Beam search over `width` hypotheses ranked by length-normalized log-probability.
///
/// Width 1 is greedy decoding: argmax each step, lowest index on ties.
pub fn decode(
    tree: &ParameterTree,
    cfg: &ModelConfig,
    reserved: &ReservedIds,
    context: Vec<usize>,
    cond: &Conditioning,
    width: usize,
    max_len: usize,
) -> Result<(GenerationState, f64)> {
    if width == 0 || width > MAX_BEAM_WIDTH {
        return Err(Error::Config(format!(
            "beam width must be in 1..={MAX_BEAM_WIDTH}, got {width}"
        )));
    }
    let mut alive = vec![Hypothesis {
        state: GenerationState::new(context, reserved.gen),
        log_prob: 0.0,
        length: 0,
    }];
    let mut done: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let mut candidates: Vec<(f64, usize, usize, f64)> = Vec::new();
        for (bi, h) in alive.iter_mut().enumerate() {
            let logits = generator_step(tree, cfg, &mut h.state, cond)?;
            for (v, lp) in log_softmax_vec(&logits).into_iter().enumerate() {
                let total = h.log_prob + lp;
                candidates.push((total / (h.length + 1) as f64, bi, v, total));
            }
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut next = Vec::with_capacity(width);
        for &(_, bi, v, total) in candidates.iter().take(width) {
            let mut h = alive[bi].clone();
            h.log_prob = total;
            h.length += 1;
            if v == reserved.eos {
                h.state.finish(false);
                done.push(h);
            } else {
                h.state.push(v);
                next.push(h);
            }
        }
        alive = next;
        if alive.is_empty() {
            break;
        }
    }
    for mut h in alive {
        h.state.finish(true);
        done.push(h);
    }
    let best = done
        .into_iter()
        .reduce(|best, h| if h.score() > best.score() { h } else { best })
        .expect("at least one hypothesis");
    Ok((best.state, best.log_prob))
}

/// Encodes both modalities and fuses them; returns detached conditioning for decoding.
pub fn encode_for_generation(
    model: &McgModel,
    clip: &NormalizedClip,
    question: &str,
) -> Result<Conditioning> {
    let cfg = &model.config.model;
    let mut g = Graph::with_params(&model.params);
    let v = video::encode_video(&mut g, clip, cfg)?;
    let t = text::encode_text(&mut g, &model.tokenize(question), cfg)?;
    let fused = fuse(&mut g, &t, &v, cfg)?;
    let (tokens, mask) = conditioning(&mut g, &v, &fused, cfg);
    Ok(Conditioning {
        tokens: g.value(tokens).clone(),
        mask,
    })
}

pub fn generate_answer(
    model: &McgModel,
    clip: &NormalizedClip,
    question: &str,
    decode_cfg: &DecodeConfig,
) -> Result<GeneratedAnswer> {
    let cond = encode_for_generation(model, clip, question)?;
    let width = match decode_cfg.mode {
        DecodeMode::Greedy => 1,
        DecodeMode::Beam => decode_cfg.beam_width,
    };
    let (state, log_prob) = decode(
        &model.params,
        &model.config.model,
        &model.vocab.reserved,
        model.question_context(question),
        &cond,
        width,
        decode_cfg.max_len,
    )?;
    let ids = state.generated().to_vec();
    Ok(GeneratedAnswer {
        text: model.vocab.detokenize(&ids),
        ids,
        truncated: state.is_truncated(),
        log_prob,
    })
}

/// Text scored by the matching head for a multi-choice candidate.
pub fn candidate_text(question: &str, candidate: &str) -> String {
    format!("{question} {candidate}")
}

/// Match probability of each candidate; the best is the first maximum.
pub fn score_choices(
    model: &McgModel,
    clip: &NormalizedClip,
    question: &str,
    candidates: &[String],
) -> Result<(usize, Vec<f64>)> {
    if candidates.is_empty() {
        return Err(Error::Invalid("no candidates to score".into()));
    }
    let cfg = &model.config.model;
    let mut g = Graph::with_params(&model.params);
    let v = video::encode_video(&mut g, clip, cfg)?;
    let mut probs = Vec::with_capacity(candidates.len());
    for c in candidates {
        let t = text::encode_text(&mut g, &model.tokenize(&candidate_text(question, c)), cfg)?;
        let fused = fuse(&mut g, &t, &v, cfg)?;
        probs.push(vtm_predict(&mut g, &fused).match_probability());
    }
    Ok((argmax_first(&probs), probs))
}

/// Index of the first maximum.
pub fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// All-zero conditioning with every row visible.
pub fn zero_conditioning(rows: usize, dim: usize) -> Conditioning {
    Conditioning {
        tokens: Array2::zeros((rows, dim)),
        mask: vec![true; rows],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn cfg(depth: usize) -> ModelConfig {
        ModelConfig {
            hidden: 8,
            heads: 2,
            ffn_mult: 2,
            fusor_depth: depth,
            generator_depth: depth,
            max_text_len: 8,
            max_answer_len: 4,
            init_std: 0.3,
            ..ModelConfig::default()
        }
    }

    fn tree(cfg: &ModelConfig, vocab: usize) -> ParameterTree {
        let mut t = ParameterTree::new();
        let mut init = Initializer::new(11, cfg.init_std);
        init_fusor(&mut t, &mut init, cfg).unwrap();
        init_generator(&mut t, &mut init, cfg, vocab).unwrap();
        t
    }

    #[test]
    fn vtm_chance_and_perfect() {
        let chance = VtmPrediction {
            p: [0.5, 0.5],
            q: None,
        };
        assert!((vtm_loss(&[chance], &[chance]) - 2f64.ln()).abs() < 1e-12);
        let pos = VtmPrediction {
            p: [1.0, 0.0],
            q: None,
        };
        let neg = VtmPrediction {
            p: [0.0, 1.0],
            q: None,
        };
        let l = vtm_loss(&[pos], &[neg]);
        assert!((l - 1e-7).abs() < 1e-12);
    }

    #[test]
    fn zero_head_gives_even_prediction() {
        let c = cfg(1);
        let mut t = tree(&c, 20);
        t.get_mut("vtm.head.weight").unwrap().fill(0.0);
        let mut g = Graph::with_params(&t);
        let fused = FusedEvidence {
            tokens: g.constant(Initializer::new(1, 1.0).normal(3, 8)),
            mask: vec![true; 3],
        };
        assert_eq!(vtm_predict(&mut g, &fused).p, [0.5, 0.5]);
    }

    #[test]
    fn two_item_batch_negatives_are_swaps() {
        let s = array![[1.0, 0.2], [0.3, 1.0]];
        for mode in [NegativeMode::Uniform, NegativeMode::Hard] {
            for seed in 0..5 {
                assert_eq!(
                    sample_negatives(&s, mode, 0.07, seed).unwrap(),
                    vec![(0, 1), (1, 0)]
                );
            }
        }
        assert!(sample_negatives(&array![[1.0]], NegativeMode::Uniform, 0.07, 0).is_err());
    }

    #[test]
    fn negatives_are_deterministic_and_off_diagonal() {
        let s = Initializer::new(4, 1.0).normal(6, 6);
        for mode in [NegativeMode::Uniform, NegativeMode::Hard] {
            let a = sample_negatives(&s, mode, 0.1, 9).unwrap();
            assert_eq!(a, sample_negatives(&s, mode, 0.1, 9).unwrap());
            assert!(a
                .iter()
                .enumerate()
                .all(|(i, &(v, t))| v == i && t != i && t < 6));
        }
    }

    #[test]
    fn lm_loss_uniform_is_log_vocab() {
        let logits = Array2::zeros((3, 100));
        let l = lm_loss_value(&logits, &[4, 7, 99], &[true, true, false]).unwrap();
        assert!((l - 100f64.ln()).abs() < 1e-12);
        assert!(matches!(
            lm_loss_value(&logits, &[1, 2, 3], &[false; 3]),
            Err(Error::NoSupervisedPositions)
        ));
    }

    #[test]
    fn lm_example_supervises_answer_only() {
        let r = crate::text::Vocabulary::toy().reserved;
        let ex = lm_example(&[20, 21], &[40, 41], &r);
        assert_eq!(ex.inputs, vec![20, 21, r.gen, 40, 41]);
        assert_eq!(ex.targets, vec![21, r.gen, 40, 41, r.eos]);
        assert_eq!(ex.mask, vec![false, false, true, true, true]);
    }

    #[test]
    fn generator_depth_zero_is_tied_projection() {
        let c = cfg(0);
        let t = tree(&c, 20);
        let cond = zero_conditioning(2, 8);
        let logits = teacher_forced_logits(&t, &c, &[], &[4, 9], &cond).unwrap();
        let mut g = Graph::with_params(&t);
        let e = g.param(EMBED);
        let pos = g.param("agor.pos");
        let x = g.select_rows(e, vec![4, 9]);
        let p = g.slice_rows(pos, 0, 2);
        let x = g.add(x, p);
        let h = layers::layer_norm(&mut g, "agor.norm", x, c.layer_norm_eps);
        let expect = g.matmul_t(h, e);
        assert!((g.value(expect) - &logits).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn overflow_and_empty_prefix_rejected() {
        let c = cfg(1);
        let t = tree(&c, 20);
        let cond = zero_conditioning(2, 8);
        let mut state = GenerationState::new(vec![7; c.generator_positions()], 4);
        assert!(matches!(
            generator_step(&t, &c, &mut state, &cond),
            Err(Error::GenerationOverflow { .. })
        ));
    }

    #[test]
    fn width_one_beam_matches_greedy_steps() {
        let c = cfg(2);
        let t = tree(&c, 20);
        let r = crate::text::Vocabulary::toy().reserved;
        let cond = Conditioning {
            tokens: Initializer::new(3, 1.0).normal(3, 8),
            mask: vec![true, true, false],
        };
        let (state, _) = decode(&t, &c, &r, vec![10, 11], &cond, 1, 4).unwrap();
        let mut greedy = GenerationState::new(vec![10, 11], r.gen);
        for _ in 0..4 {
            let l = generator_step(&t, &c, &mut greedy, &cond).unwrap();
            let next = argmax_first(&log_softmax_vec(&l));
            if next == r.eos {
                break;
            }
            greedy.push(next);
        }
        assert_eq!(state.prefix(), greedy.prefix());
    }

    #[test]
    fn argmax_prefers_first() {
        assert_eq!(argmax_first(&[0.2, 0.7, 0.7]), 1);
        assert_eq!(argmax_first(&[0.5]), 0);
    }
}
