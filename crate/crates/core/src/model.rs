//! The assembled model: configuration, vocabulary and every parameter group.

use crate::config::{AnswerHead, Config};
use crate::contrastive;
use crate::error::Result;
use crate::fusion;
use crate::params::{Initializer, ParameterTree};
use crate::sampling::{
    self, FrameIndexPlan, MediaSource, NormalizedClip, SampleMode, SamplingConfig,
};
use crate::text::{self, TokenizedText, Vocabulary};
use crate::training;
use crate::video;

/// Parameter-name prefixes of the four transformer components.
pub const COMPONENTS: [&str; 4] = ["ivm", "iqm", "cfor", "agor"];

#[derive(Debug, Clone)]
pub struct McgModel {
    pub config: Config,
    pub vocab: Vocabulary,
    pub params: ParameterTree,
}

impl McgModel {
    /// Freshly initialized model seeded by `config.train.seed`.
    pub fn new(config: Config, vocab: Vocabulary) -> Result<Self> {
        config.model.validate()?;
        let params = init_params(&config, vocab.len())?;
        Ok(Self {
            config,
            vocab,
            params,
        })
    }

    pub fn tokenize(&self, text: &str) -> TokenizedText {
        self.vocab.tokenize(text, self.config.model.max_text_len)
    }

    /// Question word pieces used as the generator's conditioning prefix.
    pub fn question_context(&self, question: &str) -> Vec<usize> {
        let mut ids = self.vocab.word_pieces(question);
        ids.truncate(self.config.model.max_text_len);
        ids
    }

    pub fn sampling_config(&self) -> SamplingConfig {
        SamplingConfig {
            head_tail_ratio: self.config.data.head_tail_ratio,
            allow_repeat: self.config.data.allow_repeat,
        }
    }

    /// Samples, decodes, resizes and normalizes a clip for this model.
    pub fn load_clip(
        &self,
        source: &MediaSource,
        mode: SampleMode,
        seed: u64,
    ) -> Result<NormalizedClip> {
        let plan: FrameIndexPlan = sampling::head_tail_sample(
            &source.meta(),
            self.config.model.frames,
            mode,
            seed,
            &self.sampling_config(),
        )?;
        let clip = sampling::decode_frames(source, &plan)?;
        sampling::resize_normalize(
            &clip,
            self.config.model.resolution,
            self.config.data.mean,
            self.config.data.std,
        )
    }
}

pub fn init_params(config: &Config, vocab_size: usize) -> Result<ParameterTree> {
    let cfg = &config.model;
    let mut tree = ParameterTree::new();
    let mut init = Initializer::new(config.train.seed, cfg.init_std);
    video::init_video_encoder(&mut tree, &mut init, cfg)?;
    text::init_text_encoder(&mut tree, &mut init, cfg, vocab_size)?;
    contrastive::init_contrastive(&mut tree, &mut init, cfg)?;
    fusion::init_fusor(&mut tree, &mut init, cfg)?;
    match cfg.answer_head {
        AnswerHead::Generator => fusion::init_generator(&mut tree, &mut init, cfg, vocab_size)?,
        AnswerHead::Classifier => training::init_classifier_head(&mut tree, &mut init, cfg)?,
    }
    Ok(tree)
}
