//! Joint objective, learning-rate schedule, AdamW and the training step.
//!
//! ```text
//! total = λ1·L_MCL + λ2·L_VTM + λ3·L_LM,   L_MCL = θ1·L_ICL + θ2·L_TCL
//! ```
//!
//! Fine-tuning keeps only the LM term. A component whose weight is zero is
//! not computed and reported as 0.

use log::debug;
use ndarray::{Array2, Zip};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{AnswerHead, ModelConfig, TrainConfig};
use crate::contrastive::{self, TokenPair};
use crate::error::{Error, Result};
use crate::eval::{normalize_answer, ManifestRecord};
use crate::fusion::{self, FusedEvidence};
use crate::graph::{Graph, Var};
use crate::layers;
use crate::model::McgModel;
use crate::params::{Initializer, Mat, ParameterTree};
use crate::sampling::{MediaSource, NormalizedClip, SampleMode};
use crate::text::{self, TokenizedText};
use crate::video::{self, VideoEmbedding};

pub const CLS_HEAD: &str = "cls_head";
pub const UNK_CLASS: &str = "[UNK]";

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBundle {
    pub l_icl: f64,
    pub l_tcl: f64,
    pub l_mcl: f64,
    pub l_vtm: f64,
    pub l_lm: f64,
    pub total: f64,
}

/// `λ1·mcl + λ2·vtm + λ3·lm` with the stage's effective weights.
pub fn total_loss(mcl: f64, vtm: f64, lm: f64, cfg: &TrainConfig) -> Result<f64> {
    for (name, v) in [("l_mcl", mcl), ("l_vtm", vtm), ("l_lm", lm)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss component {name} = {v}")));
        }
    }
    let [l1, l2, l3] = cfg.effective_lambda();
    Ok(l1 * mcl + l2 * vtm + l3 * lm)
}

/// Linear warmup to `peak_lr`, then linear decay to `final_lr` at the last step.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    let total = cfg.steps as f64;
    let warm = cfg.warmup_fraction * total;
    let s = (step as f64).min(total);
    if s < warm {
        cfg.peak_lr * s / warm
    } else if total <= warm {
        cfg.peak_lr
    } else {
        cfg.peak_lr + (cfg.final_lr - cfg.peak_lr) * (s - warm) / (total - warm)
    }
}

fn decays(name: &str) -> bool {
    !(name.ends_with(".bias")
        || name.ends_with(".gamma")
        || name.ends_with(".beta")
        || name.contains("log_tau"))
}

/// Adaptive moments with decoupled weight decay. Moments are indexed like the parameter tree.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
    pub t: u64,
}

impl AdamW {
    pub fn new(tree: &ParameterTree) -> Self {
        let zeros: Vec<Mat> = tree
            .iter()
            .map(|(_, p)| Array2::zeros(p.raw_dim()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// Clips by global norm, then updates every parameter that received a gradient.
    ///
    /// Returns the pre-clipping gradient norm. A non-finite gradient leaves
    /// parameters and moments untouched.
    pub fn apply(
        &mut self,
        tree: &mut ParameterTree,
        grads: Vec<(usize, Mat)>,
        lr: f64,
        cfg: &TrainConfig,
    ) -> Result<f64> {
        if let Some((i, _)) = grads.iter().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite(format!("gradient of {}", tree.name(*i))));
        }
        let norm = grads
            .iter()
            .map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let scale = if cfg.clip_norm > 0.0 && norm > cfg.clip_norm {
            cfg.clip_norm / norm
        } else {
            1.0
        };
        self.t += 1;
        let (b1, b2, eps) = (cfg.beta1, cfg.beta2, cfg.eps);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (i, g) in grads {
            let wd = if decays(tree.name(i)) {
                cfg.weight_decay
            } else {
                0.0
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = tree.by_index_mut(i);
            Zip::from(p).and(m).and(v).and(&g).for_each(|p, m, v, &g| {
                let g = g * scale;
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + eps);
                *p -= lr * (update + wd * *p);
            });
        }
        Ok(norm)
    }
}

/// One training example with its media already opened.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub id: String,
    pub source: MediaSource,
    pub question: String,
    pub answer: String,
    pub caption: Option<String>,
}

impl TrainingExample {
    /// Text paired with the video for the contrastive and matching losses.
    pub fn contrast_text(&self) -> String {
        match &self.caption {
            Some(c) => c.clone(),
            None => format!("{} {}", self.question, self.answer),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub examples: Vec<TrainingExample>,
}

impl Dataset {
    pub fn from_manifest(records: &[ManifestRecord]) -> Result<Self> {
        let examples = records
            .iter()
            .map(|r| {
                Ok(TrainingExample {
                    id: r.id.clone(),
                    source: MediaSource::open(&r.video)?,
                    question: r.question.clone(),
                    answer: r.gold_answer().to_string(),
                    caption: r.caption.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Distinct example indices for `step`; depends only on `(seed, step)`.
pub fn batch_indices(n: usize, batch: usize, seed: u64, step: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    index::sample(&mut rng, n, batch.min(n)).into_vec()
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.rotate_left(32));
    rand::Rng::random(&mut rng)
}

/// Model-ready inputs for one step.
#[derive(Debug, Clone)]
pub struct Batch {
    pub clips: Vec<NormalizedClip>,
    pub contrast: Vec<TokenizedText>,
    pub questions: Vec<TokenizedText>,
    pub contexts: Vec<Vec<usize>>,
    pub answers: Vec<Vec<usize>>,
    pub answer_texts: Vec<String>,
    /// Seeds negative sampling.
    pub seed: u64,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }
}

pub fn make_batch(
    model: &McgModel,
    examples: &[&TrainingExample],
    mode: SampleMode,
    seed: u64,
) -> Result<Batch> {
    let mut b = Batch {
        clips: Vec::new(),
        contrast: Vec::new(),
        questions: Vec::new(),
        contexts: Vec::new(),
        answers: Vec::new(),
        answer_texts: Vec::new(),
        seed,
    };
    for (i, ex) in examples.iter().enumerate() {
        b.clips
            .push(model.load_clip(&ex.source, mode, mix(seed, i as u64, 1))?);
        b.contrast.push(model.tokenize(&ex.contrast_text()));
        b.questions.push(model.tokenize(&ex.question));
        b.contexts.push(model.question_context(&ex.question));
        let mut answer = model.vocab.word_pieces(&ex.answer);
        answer.truncate(model.config.model.max_answer_len);
        b.answers.push(answer);
        b.answer_texts.push(ex.answer.clone());
    }
    Ok(b)
}

/// The training batch for `step`: example choice and frame sampling are fixed by `(seed, step)`.
pub fn training_batch(model: &McgModel, data: &Dataset, step: usize) -> Result<Batch> {
    let cfg = &model.config.train;
    let picked = batch_indices(data.len(), cfg.batch_size, cfg.seed, step);
    let examples: Vec<&TrainingExample> = picked.iter().map(|&i| &data.examples[i]).collect();
    make_batch(
        model,
        &examples,
        SampleMode::Train,
        mix(cfg.seed, step as u64, 2),
    )
}

/// Graph nodes of every computed loss component.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub icl: Option<Var>,
    pub tcl: Option<Var>,
    pub mcl: Option<Var>,
    pub vtm: Option<Var>,
    pub lm: Option<Var>,
    pub total: Var,
}

/// Summary rows projected and compared: `S[i][j] = z_x,i · z_y,j`.
fn similarity(
    g: &mut Graph,
    videos: &[VideoEmbedding],
    texts: &[text::TextEmbedding],
) -> Result<Var> {
    let vc: Vec<Var> = videos
        .iter()
        .map(|v| g.slice_rows(v.tokens, 0, 1))
        .collect();
    let tc: Vec<Var> = texts.iter().map(|t| g.slice_rows(t.tokens, 0, 1)).collect();
    let vx = g.concat_rows(&vc);
    let ty = g.concat_rows(&tc);
    let zx = contrastive::project_normalize(g, vx, contrastive::VIDEO_HEAD);
    let zy = contrastive::project_normalize(g, ty, contrastive::TEXT_HEAD);
    contrastive::instance_similarity(g, zx, zy)
}

/// Non-summary token rows: video patches and real text tokens after `[CLS]`.
fn token_pair(g: &mut Graph, v: &VideoEmbedding, t: &text::TextEmbedding) -> TokenPair {
    let rows = g.shape(v.tokens).0;
    let video = g.slice_rows(v.tokens, 1, rows);
    let keep: Vec<usize> = (1..t.mask.len()).filter(|&k| t.mask[k]).collect();
    let text = g.select_rows(t.tokens, keep);
    TokenPair { video, text }
}

/// Builds every loss with a non-zero weight for `batch`.
pub fn build_losses(g: &mut Graph, model: &McgModel, batch: &Batch) -> Result<LossVars> {
    let mcfg = &model.config.model;
    let tcfg = &model.config.train;
    let [l1, l2, l3] = tcfg.effective_lambda();
    let b = batch.len();
    if b == 0 {
        return Err(Error::Invalid("empty batch".into()));
    }
    let videos: Vec<VideoEmbedding> = batch
        .clips
        .iter()
        .map(|c| video::encode_video(g, c, mcfg))
        .collect::<Result<_>>()?;
    let need_contrast_text = l1 > 0.0 || l2 > 0.0;
    let texts: Vec<text::TextEmbedding> = if need_contrast_text {
        batch
            .contrast
            .iter()
            .map(|t| text::encode_text(g, t, mcfg))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let mut sim = None;
    let (mut icl, mut tcl, mut mcl) = (None, None, None);
    if l1 > 0.0 {
        let s = similarity(g, &videos, &texts)?;
        sim = Some(s);
        let log_tau = g.param(contrastive::LOG_TAU1);
        let icl_v = contrastive::icl_loss(g, s, log_tau);
        let pairs: Vec<TokenPair> = videos
            .iter()
            .zip(&texts)
            .map(|(v, t)| token_pair(g, v, t))
            .collect();
        let tcl_v = contrastive::tcl_loss(g, &pairs, mcfg.saliency)?;
        mcl = Some(contrastive::mcl_loss_graph(g, icl_v, tcl_v, tcfg.theta));
        icl = Some(icl_v);
        tcl = Some(tcl_v);
    }

    let mut vtm = None;
    if l2 > 0.0 {
        let s = match sim {
            Some(s) => s,
            None => similarity(g, &videos, &texts)?,
        };
        let tau1 = g.params().require(contrastive::LOG_TAU1)?[[0, 0]].exp();
        let negatives = fusion::sample_negatives(g.value(s), tcfg.negatives, tau1, batch.seed)?;
        let mut rows = Vec::with_capacity(2 * b);
        for i in 0..b {
            let fused = fusion::fuse(g, &texts[i], &videos[i], mcfg)?;
            rows.push((fusion::vtm_logits(g, &fused), true));
        }
        for &(vi, tj) in &negatives {
            let fused = fusion::fuse(g, &texts[tj], &videos[vi], mcfg)?;
            rows.push((fusion::vtm_logits(g, &fused), false));
        }
        vtm = Some(fusion::vtm_loss_graph(g, &rows));
    }

    let mut lm = None;
    if l3 > 0.0 {
        let mut terms = Vec::with_capacity(b);
        let mut class_rows = Vec::new();
        let mut labels = Vec::new();
        let classes = classifier_classes(mcfg);
        for i in 0..b {
            let q = text::encode_text(g, &batch.questions[i], mcfg)?;
            let fused = fusion::fuse(g, &q, &videos[i], mcfg)?;
            match mcfg.answer_head {
                AnswerHead::Generator => {
                    let ex = fusion::lm_example(
                        &batch.contexts[i],
                        &batch.answers[i],
                        &model.vocab.reserved,
                    );
                    let (cond, cond_mask) = fusion::conditioning(g, &videos[i], &fused, mcfg);
                    let logits = fusion::decoder_logits(g, &ex.inputs, cond, &cond_mask, mcfg)?;
                    terms.push((
                        fusion::lm_loss(g, logits, &ex.targets, &ex.mask)?,
                        1.0 / b as f64,
                    ));
                }
                AnswerHead::Classifier => {
                    class_rows.push(classifier_logits(g, &fused));
                    labels.push(class_index(&classes, &batch.answer_texts[i]));
                }
            }
        }
        lm = Some(match mcfg.answer_head {
            AnswerHead::Generator => g.weighted_sum(&terms),
            AnswerHead::Classifier => classifier_loss(g, &class_rows, &labels),
        });
    }

    let mut parts = Vec::new();
    for (v, w) in [(mcl, l1), (vtm, l2), (lm, l3)] {
        if let Some(v) = v {
            parts.push((v, w));
        }
    }
    let total = if parts.is_empty() {
        g.scalar_constant(0.0)
    } else {
        g.weighted_sum(&parts)
    };
    Ok(LossVars {
        icl,
        tcl,
        mcl,
        vtm,
        lm,
        total,
    })
}

pub fn bundle(g: &Graph, vars: &LossVars, cfg: &TrainConfig) -> Result<LossBundle> {
    let val = |v: Option<Var>| v.map(|v| g.scalar(v)).unwrap_or(0.0);
    let (l_icl, l_tcl) = (val(vars.icl), val(vars.tcl));
    let (l_mcl, l_vtm, l_lm) = (val(vars.mcl), val(vars.vtm), val(vars.lm));
    for (name, v) in [("l_icl", l_icl), ("l_tcl", l_tcl)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss component {name} = {v}")));
        }
    }
    Ok(LossBundle {
        l_icl,
        l_tcl,
        l_mcl,
        l_vtm,
        l_lm,
        total: total_loss(l_mcl, l_vtm, l_lm, cfg)?,
    })
}

/// Loss values without a parameter update.
pub fn compute_losses(model: &McgModel, batch: &Batch) -> Result<LossBundle> {
    let mut g = Graph::with_params(&model.params);
    let vars = build_losses(&mut g, model, batch)?;
    bundle(&g, &vars, &model.config.train)
}

/// Forward, backward and one AdamW update at `lr_schedule(step)`.
pub fn train_step(
    model: &mut McgModel,
    opt: &mut AdamW,
    batch: &Batch,
    step: usize,
) -> Result<LossBundle> {
    let (losses, grads) = {
        let mut g = Graph::with_params(&model.params);
        let vars = build_losses(&mut g, model, batch)?;
        let losses = bundle(&g, &vars, &model.config.train)?;
        let grads = g.backward(vars.total);
        (losses, g.param_grads(&grads))
    };
    let lr = lr_schedule(step, &model.config.train);
    let norm = opt.apply(&mut model.params, grads, lr, &model.config.train)?;
    debug!(
        "step {step}: total {:.5} lr {lr:.3e} grad norm {norm:.3}",
        losses.total
    );
    Ok(losses)
}

/// Step loop state: the model, its optimizer and the next step index.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: McgModel,
    pub optimizer: AdamW,
    pub step: usize,
}

impl Trainer {
    pub fn new(model: McgModel) -> Self {
        let optimizer = AdamW::new(&model.params);
        Self {
            model,
            optimizer,
            step: 0,
        }
    }

    pub fn step(&mut self, data: &Dataset) -> Result<LossBundle> {
        let batch = training_batch(&self.model, data, self.step)?;
        let losses = train_step(&mut self.model, &mut self.optimizer, &batch, self.step)?;
        self.step += 1;
        Ok(losses)
    }

    /// Runs until `train.steps`, calling `on_step` after each step.
    pub fn run(
        &mut self,
        data: &Dataset,
        mut on_step: impl FnMut(usize, &LossBundle),
    ) -> Result<Vec<LossBundle>> {
        let mut out = Vec::new();
        while self.step < self.model.config.train.steps {
            let l = self.step(data)?;
            on_step(self.step, &l);
            out.push(l);
        }
        Ok(out)
    }
}

/// Batch diagnostics: retrieval and matching accuracy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchMetrics {
    /// Fraction of videos and texts whose best in-batch match is their partner.
    pub retrieval_r1: f64,
    /// Matching accuracy over positives and the same number of shuffled pairs.
    pub vtm_accuracy: f64,
}

pub fn batch_metrics(model: &McgModel, batch: &Batch) -> Result<BatchMetrics> {
    let mcfg = &model.config.model;
    let mut g = Graph::with_params(&model.params);
    let videos: Vec<VideoEmbedding> = batch
        .clips
        .iter()
        .map(|c| video::encode_video(&mut g, c, mcfg))
        .collect::<Result<_>>()?;
    let texts: Vec<text::TextEmbedding> = batch
        .contrast
        .iter()
        .map(|t| text::encode_text(&mut g, t, mcfg))
        .collect::<Result<_>>()?;
    let s = similarity(&mut g, &videos, &texts)?;
    let s = g.value(s).clone();
    let b = batch.len();
    let mut hits = 0;
    for i in 0..b {
        let row: Vec<f64> = s.row(i).to_vec();
        let col: Vec<f64> = s.column(i).to_vec();
        hits +=
            (fusion::argmax_first(&row) == i) as usize + (fusion::argmax_first(&col) == i) as usize;
    }
    let negatives =
        fusion::sample_negatives(&s, crate::config::NegativeMode::Uniform, 1.0, batch.seed)?;
    let mut correct = 0;
    for i in 0..b {
        let f = fusion::fuse(&mut g, &texts[i], &videos[i], mcfg)?;
        correct += (fusion::vtm_predict(&mut g, &f).match_probability() > 0.5) as usize;
    }
    for &(vi, tj) in &negatives {
        let f = fusion::fuse(&mut g, &texts[tj], &videos[vi], mcfg)?;
        correct += (fusion::vtm_predict(&mut g, &f).match_probability() < 0.5) as usize;
    }
    Ok(BatchMetrics {
        retrieval_r1: hits as f64 / (2 * b) as f64,
        vtm_accuracy: correct as f64 / (2 * b) as f64,
    })
}

/// Closed answer set of the classifier variant; `[UNK]` is appended when absent.
pub fn classifier_classes(cfg: &ModelConfig) -> Vec<String> {
    let mut classes: Vec<String> = cfg.classes.iter().map(|c| normalize_answer(c)).collect();
    if !cfg.classes.iter().any(|c| c == UNK_CLASS) {
        classes.push(UNK_CLASS.to_string());
    }
    classes
}

/// Index of `answer` in `classes`, or of the `[UNK]` class.
pub fn class_index(classes: &[String], answer: &str) -> usize {
    let a = normalize_answer(answer);
    classes
        .iter()
        .position(|c| *c == a)
        .or_else(|| classes.iter().position(|c| c == UNK_CLASS))
        .unwrap_or(classes.len() - 1)
}

pub fn init_classifier_head(
    tree: &mut ParameterTree,
    init: &mut Initializer,
    cfg: &ModelConfig,
) -> Result<()> {
    layers::init_linear(
        tree,
        init,
        CLS_HEAD,
        cfg.hidden,
        classifier_classes(cfg).len(),
        true,
    )
}

/// K-way logits from the `[FUS]` row.
pub fn classifier_logits(g: &mut Graph, fused: &FusedEvidence) -> Var {
    let row = g.slice_rows(fused.tokens, 0, 1);
    layers::linear(g, CLS_HEAD, row)
}

/// Mean cross-entropy of stacked logit rows against class labels.
pub fn classifier_loss(g: &mut Graph, rows: &[Var], labels: &[usize]) -> Var {
    let stacked = g.concat_rows(rows);
    let logp = g.log_softmax(stacked, None);
    let picked = g.pick_per_row(logp, labels.to_vec());
    let mean = g.mean_all(picked);
    g.scale(mean, -1.0)
}

/// Predicted class and class probabilities for a question about `clip`.
pub fn classify(
    model: &McgModel,
    clip: &NormalizedClip,
    question: &str,
) -> Result<(usize, Vec<f64>)> {
    let cfg = &model.config.model;
    let mut g = Graph::with_params(&model.params);
    let v = video::encode_video(&mut g, clip, cfg)?;
    let t = text::encode_text(&mut g, &model.tokenize(question), cfg)?;
    let fused = fusion::fuse(&mut g, &t, &v, cfg)?;
    let logits = classifier_logits(&mut g, &fused);
    let probs = g.softmax(logits, None);
    let p = g.value(probs).row(0).to_vec();
    Ok((fusion::argmax_first(&p), p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Stage;

    #[test]
    fn total_loss_cases() {
        let mut cfg = TrainConfig::default();
        assert_eq!(total_loss(1.0, 2.0, 3.0, &cfg).unwrap(), 6.0);
        cfg.lambda = [0.0; 3];
        assert_eq!(total_loss(1.0, 2.0, 3.0, &cfg).unwrap(), 0.0);
        cfg.lambda = [1.0, 1.0, 2.0];
        cfg.stage = Stage::Finetune;
        assert_eq!(total_loss(5.0, 7.0, 3.0, &cfg).unwrap(), 6.0);
        let err = total_loss(f64::NAN, 0.0, 1.0, &cfg)
            .unwrap_err()
            .to_string();
        assert!(err.contains("l_mcl"), "{err}");
    }

    #[test]
    fn schedule_points() {
        let cfg = TrainConfig {
            steps: 1000,
            ..TrainConfig::default()
        };
        assert_eq!(lr_schedule(0, &cfg), 0.0);
        assert!((lr_schedule(100, &cfg) - 1e-4).abs() < 1e-18);
        assert!((lr_schedule(550, &cfg) - 5.5e-5).abs() < 1e-15);
        assert!((lr_schedule(1000, &cfg) - 1e-5).abs() < 1e-18);
        let peak = (0..=1000).map(|s| lr_schedule(s, &cfg)).fold(0.0, f64::max);
        assert_eq!(peak, lr_schedule(100, &cfg));
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut tree = ParameterTree::new();
        tree.insert("w.weight", Array2::from_elem((1, 2), 1.0))
            .unwrap();
        tree.insert("w.bias", Array2::from_elem((1, 1), 1.0))
            .unwrap();
        let cfg = TrainConfig {
            clip_norm: 0.0,
            ..TrainConfig::default()
        };
        let mut opt = AdamW::new(&tree);
        let grads = vec![
            (0, Array2::from_elem((1, 2), 0.5)),
            (1, Array2::from_elem((1, 1), -2.0)),
        ];
        opt.apply(&mut tree, grads, 0.1, &cfg).unwrap();
        // First bias-corrected step is ±lr; decay only on the weight.
        let w = tree.require("w.weight").unwrap()[[0, 0]];
        let expected = 1.0 - 0.1 * (0.5 / (0.5 + 1e-8) + 0.001);
        assert!((w - expected).abs() < 1e-12);
        let b = tree.require("w.bias").unwrap()[[0, 0]];
        assert!((b - (1.0 + 0.1 * 2.0 / (2.0 + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn adamw_rejects_non_finite() {
        let mut tree = ParameterTree::new();
        tree.insert("w.weight", Array2::from_elem((1, 1), 1.0))
            .unwrap();
        let mut opt = AdamW::new(&tree);
        let before = opt.clone();
        let err = opt
            .apply(
                &mut tree,
                vec![(0, Array2::from_elem((1, 1), f64::INFINITY))],
                0.1,
                &TrainConfig::default(),
            )
            .unwrap_err();
        assert!(err.to_string().contains("w.weight"));
        assert_eq!(opt, before);
        assert_eq!(tree.require("w.weight").unwrap()[[0, 0]], 1.0);
    }

    #[test]
    fn clipping_bounds_update_norm() {
        let mut tree = ParameterTree::new();
        tree.insert("w.bias", Array2::zeros((1, 1))).unwrap();
        let mut opt = AdamW::new(&tree);
        let norm = opt
            .apply(
                &mut tree,
                vec![(0, Array2::from_elem((1, 1), 30.0))],
                0.1,
                &TrainConfig::default(),
            )
            .unwrap();
        assert_eq!(norm, 30.0);
        assert!((opt.m[0][[0, 0]] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn batch_indices_are_distinct_and_reproducible() {
        let a = batch_indices(64, 16, 3, 7);
        assert_eq!(a, batch_indices(64, 16, 3, 7));
        assert_ne!(a, batch_indices(64, 16, 3, 8));
        let mut s = a.clone();
        s.sort();
        s.dedup();
        assert_eq!(s.len(), 16);
        assert_eq!(batch_indices(3, 16, 0, 0).len(), 3);
    }

    #[test]
    fn classifier_chance_and_unk() {
        let cfg = ModelConfig {
            classes: vec!["yes".into()],
            ..ModelConfig::default()
        };
        let classes = classifier_classes(&cfg);
        assert_eq!(classes, vec!["yes".to_string(), UNK_CLASS.to_string()]);
        assert_eq!(class_index(&classes, "Yes"), 0);
        assert_eq!(class_index(&classes, "maybe"), 1);
        let mut g = Graph::new();
        let logits = g.constant(Array2::zeros((1, 2)));
        let l = classifier_loss(&mut g, &[logits], &[0]);
        assert!((g.scalar(l) - 2f64.ln()).abs() < 1e-12);
    }
}
