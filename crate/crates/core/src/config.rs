//! `key = value` configuration files with dotted keys.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! errors. `train.stage` is applied first so that stage-dependent defaults
//! (frame count and resolution) can be overridden by later keys regardless
//! of their position in the file.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SaliencyProvider {
    Uniform,
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NegativeMode {
    Uniform,
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeneratorConditioning {
    VideoAndFused,
    FusedOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnswerHead {
    Generator,
    Classifier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    Greedy,
    Beam,
}

macro_rules! keyword_enum {
    ($ty:ident { $($text:literal => $variant:ident),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($ty::$variant),)+
                    other => Err(Error::Config(format!(
                        "invalid {} value {other:?}", stringify!($ty)
                    ))),
                }
            }
        }
        impl $ty {
            pub fn as_str(&self) -> &'static str {
                match self {
                    $($ty::$variant => $text,)+
                }
            }
        }
    };
}

keyword_enum!(Stage { "pretrain" => Pretrain, "finetune" => Finetune });
keyword_enum!(SaliencyProvider { "uniform" => Uniform, "learned" => Learned });
keyword_enum!(NegativeMode { "uniform" => Uniform, "hard" => Hard });
keyword_enum!(GeneratorConditioning { "video_and_fused" => VideoAndFused, "fused_only" => FusedOnly });
keyword_enum!(AnswerHead { "generator" => Generator, "classifier" => Classifier });
keyword_enum!(DecodeMode { "greedy" => Greedy, "beam" => Beam });

/// Architecture hyper-parameters shared by every component.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub hidden: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub patch_size: usize,
    pub video_depth: usize,
    pub text_depth: usize,
    pub fusor_depth: usize,
    pub generator_depth: usize,
    pub max_text_len: usize,
    pub proj_dim: usize,
    pub memory_dim: usize,
    pub timesformer_residuals: bool,
    pub generator_conditioning: GeneratorConditioning,
    pub saliency: SaliencyProvider,
    pub tau1_init: f64,
    pub tau2_init: f64,
    pub init_std: f64,
    pub layer_norm_eps: f64,
    /// Frames and resolution the video positional tables are sized for.
    pub frames: usize,
    pub resolution: usize,
    /// Longest generated answer, in tokens, excluding `[GEN]`.
    pub max_answer_len: usize,
    /// Closed answer set for the classifier-head variant.
    pub classes: Vec<String>,
    pub answer_head: AnswerHead,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 768,
            heads: 12,
            ffn_mult: 4,
            patch_size: 16,
            video_depth: 12,
            text_depth: 6,
            fusor_depth: 6,
            generator_depth: 6,
            max_text_len: 40,
            proj_dim: 256,
            memory_dim: 256,
            timesformer_residuals: false,
            generator_conditioning: GeneratorConditioning::VideoAndFused,
            saliency: SaliencyProvider::Uniform,
            tau1_init: 0.07,
            tau2_init: 0.07,
            init_std: 0.02,
            layer_norm_eps: 1e-6,
            frames: 4,
            resolution: 224,
            max_answer_len: 8,
            classes: Vec::new(),
            answer_head: AnswerHead::Generator,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden size {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            )));
        }
        if self.patch_size == 0 || !self.resolution.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "resolution {} is not divisible by patch size {}",
                self.resolution, self.patch_size
            )));
        }
        if self.frames == 0 {
            return Err(Error::Config("frame count must be positive".into()));
        }
        if self.max_text_len < 2 {
            return Err(Error::Config("max_text_len must be at least 2".into()));
        }
        if self.tau1_init <= 0.0 || self.tau2_init <= 0.0 {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if self.answer_head == AnswerHead::Classifier && self.classes.is_empty() {
            return Err(Error::Config(
                "classifier head requires a non-empty model.classes list".into(),
            ));
        }
        Ok(())
    }

    pub fn patches_per_frame(&self) -> usize {
        let side = self.resolution / self.patch_size;
        side * side
    }

    /// Positions needed by the generator: question context, `[GEN]`, answer and `[EOS]`.
    pub fn generator_positions(&self) -> usize {
        self.max_text_len + self.max_answer_len + 2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lambda: [f64; 3],
    pub theta: [f64; 2],
    pub warmup_fraction: f64,
    pub peak_lr: f64,
    pub final_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub negatives: NegativeMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Pretrain,
            steps: 1000,
            batch_size: 16,
            seed: 0,
            lambda: [1.0, 1.0, 1.0],
            theta: [1.0, 1.0],
            warmup_fraction: 0.1,
            peak_lr: 1e-4,
            final_lr: 1e-5,
            weight_decay: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            negatives: NegativeMode::Uniform,
        }
    }
}

impl TrainConfig {
    /// Loss weights in effect: fine-tuning keeps only the LM term.
    pub fn effective_lambda(&self) -> [f64; 3] {
        match self.stage {
            Stage::Pretrain => self.lambda,
            Stage::Finetune => [0.0, 0.0, self.lambda[2]],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub manifest: Option<String>,
    pub vocab: Option<String>,
    pub head_tail_ratio: f64,
    pub allow_repeat: bool,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            vocab: None,
            head_tail_ratio: 0.3,
            allow_repeat: false,
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub beam_width: usize,
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Greedy,
            beam_width: 1,
            max_len: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub decode: DecodeConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "invalid boolean {value:?} for {key}"
        ))),
    }
}

fn parse_triple(key: &str, value: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = value
        .split(',')
        .map(|p| parse::<f64>(key, p.trim()))
        .collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|_| Error::Config(format!("{key} expects three comma-separated values")))
}

fn join(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl Config {
    /// Stage-specific defaults: 4 frames at 224 for pre-training, 8 at 384 for fine-tuning.
    pub fn for_stage(stage: Stage) -> Self {
        let mut cfg = Config::default();
        cfg.set_stage(stage);
        cfg
    }

    fn set_stage(&mut self, stage: Stage) {
        self.train.stage = stage;
        match stage {
            Stage::Pretrain => {
                self.model.frames = 4;
                self.model.resolution = 224;
            }
            Stage::Finetune => {
                self.model.frames = 8;
                self.model.resolution = 384;
            }
        }
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::parse_text(&text)
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Applies the entries of a config document on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut entries = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            entries.push((key.trim().to_string(), value.trim().to_string()));
        }
        if let Some((_, stage)) = entries.iter().find(|(k, _)| k == "train.stage") {
            self.set_stage(stage.parse()?);
        }
        for (key, value) in &entries {
            if key != "train.stage" {
                self.set(key, value)?;
            }
        }
        self.model.validate()
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "train.stage" => self.set_stage(v.parse()?),
            "train.steps" => t.steps = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "loss.lambda1" => t.lambda[0] = parse(key, v)?,
            "loss.lambda2" => t.lambda[1] = parse(key, v)?,
            "loss.lambda3" => t.lambda[2] = parse(key, v)?,
            "loss.theta1" => t.theta[0] = parse(key, v)?,
            "loss.theta2" => t.theta[1] = parse(key, v)?,
            "sched.warmup_fraction" => t.warmup_fraction = parse(key, v)?,
            "sched.peak_lr" => t.peak_lr = parse(key, v)?,
            "sched.final_lr" => t.final_lr = parse(key, v)?,
            "optim.weight_decay" => t.weight_decay = parse(key, v)?,
            "optim.beta1" => t.beta1 = parse(key, v)?,
            "optim.beta2" => t.beta2 = parse(key, v)?,
            "optim.eps" => t.eps = parse(key, v)?,
            "optim.clip_norm" => t.clip_norm = parse(key, v)?,
            "vtm.negatives" => t.negatives = v.parse()?,
            "contrastive.tau1_init" => m.tau1_init = parse(key, v)?,
            "contrastive.tau2_init" => m.tau2_init = parse(key, v)?,
            "contrastive.saliency_provider" => m.saliency = v.parse()?,
            "contrastive.proj_dim" => m.proj_dim = parse(key, v)?,
            "contrastive.memory_dim" => m.memory_dim = parse(key, v)?,
            "data.manifest" => d.manifest = Some(v.to_string()),
            "data.vocab" => d.vocab = Some(v.to_string()),
            "data.frames" => m.frames = parse(key, v)?,
            "data.resolution" => m.resolution = parse(key, v)?,
            "data.head_tail_ratio" => d.head_tail_ratio = parse(key, v)?,
            "data.allow_repeat" => d.allow_repeat = parse_bool(key, v)?,
            "data.mean" => d.mean = parse_triple(key, v)?,
            "data.std" => d.std = parse_triple(key, v)?,
            "model.hidden" => m.hidden = parse(key, v)?,
            "model.heads" => m.heads = parse(key, v)?,
            "model.ffn_mult" => m.ffn_mult = parse(key, v)?,
            "model.patch_size" => m.patch_size = parse(key, v)?,
            "model.video_depth" => m.video_depth = parse(key, v)?,
            "model.text_depth" => m.text_depth = parse(key, v)?,
            "model.fusor_depth" => m.fusor_depth = parse(key, v)?,
            "model.generator_depth" => m.generator_depth = parse(key, v)?,
            "model.max_text_len" => m.max_text_len = parse(key, v)?,
            "model.max_answer_len" => m.max_answer_len = parse(key, v)?,
            "model.timesformer_residuals" => m.timesformer_residuals = parse_bool(key, v)?,
            "model.generator_conditioning" => m.generator_conditioning = v.parse()?,
            "model.init_std" => m.init_std = parse(key, v)?,
            "model.layer_norm_eps" => m.layer_norm_eps = parse(key, v)?,
            "model.answer_head" => m.answer_head = v.parse()?,
            "model.classes" => {
                m.classes = v
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect()
            }
            "decode.mode" => self.decode.mode = v.parse()?,
            "decode.beam_width" => self.decode.beam_width = parse(key, v)?,
            "decode.max_len" => self.decode.max_len = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other}"))),
        }
        Ok(())
    }

    /// Serializes every key; `parse_text(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let (m, t, d, dc) = (&self.model, &self.train, &self.data, &self.decode);
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("train.stage", t.stage.as_str().into());
        put("train.steps", t.steps.to_string());
        put("train.batch_size", t.batch_size.to_string());
        put("train.seed", t.seed.to_string());
        put("loss.lambda1", t.lambda[0].to_string());
        put("loss.lambda2", t.lambda[1].to_string());
        put("loss.lambda3", t.lambda[2].to_string());
        put("loss.theta1", t.theta[0].to_string());
        put("loss.theta2", t.theta[1].to_string());
        put("sched.warmup_fraction", t.warmup_fraction.to_string());
        put("sched.peak_lr", t.peak_lr.to_string());
        put("sched.final_lr", t.final_lr.to_string());
        put("optim.weight_decay", t.weight_decay.to_string());
        put("optim.beta1", t.beta1.to_string());
        put("optim.beta2", t.beta2.to_string());
        put("optim.eps", t.eps.to_string());
        put("optim.clip_norm", t.clip_norm.to_string());
        put("vtm.negatives", t.negatives.as_str().into());
        put("contrastive.tau1_init", m.tau1_init.to_string());
        put("contrastive.tau2_init", m.tau2_init.to_string());
        put("contrastive.saliency_provider", m.saliency.as_str().into());
        put("contrastive.proj_dim", m.proj_dim.to_string());
        put("contrastive.memory_dim", m.memory_dim.to_string());
        if let Some(p) = &d.manifest {
            put("data.manifest", p.clone());
        }
        if let Some(p) = &d.vocab {
            put("data.vocab", p.clone());
        }
        put("data.frames", m.frames.to_string());
        put("data.resolution", m.resolution.to_string());
        put("data.head_tail_ratio", d.head_tail_ratio.to_string());
        put("data.allow_repeat", d.allow_repeat.to_string());
        put("data.mean", join(&d.mean));
        put("data.std", join(&d.std));
        put("model.hidden", m.hidden.to_string());
        put("model.heads", m.heads.to_string());
        put("model.ffn_mult", m.ffn_mult.to_string());
        put("model.patch_size", m.patch_size.to_string());
        put("model.video_depth", m.video_depth.to_string());
        put("model.text_depth", m.text_depth.to_string());
        put("model.fusor_depth", m.fusor_depth.to_string());
        put("model.generator_depth", m.generator_depth.to_string());
        put("model.max_text_len", m.max_text_len.to_string());
        put("model.max_answer_len", m.max_answer_len.to_string());
        put(
            "model.timesformer_residuals",
            m.timesformer_residuals.to_string(),
        );
        put(
            "model.generator_conditioning",
            m.generator_conditioning.as_str().into(),
        );
        put("model.init_std", m.init_std.to_string());
        put("model.layer_norm_eps", m.layer_norm_eps.to_string());
        put("model.answer_head", m.answer_head.as_str().into());
        put("model.classes", m.classes.join(","));
        put("decode.mode", dc.mode.as_str().into());
        put("decode.beam_width", dc.beam_width.to_string());
        put("decode.max_len", dc.max_len.to_string());
        out
    }
}
