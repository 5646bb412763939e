//! Vocabulary, greedy subword tokenizer and the intra-question encoder.
//!
//! Vocabulary files hold one token per line; token lines are numbered from 0
//! and that number is the id. A leading block of lines starting with `#`
//! forms the header and is not numbered. The header must declare the reserved tokens:
//!
//! ```text
//! # reserved: pad=[PAD] cls=[CLS] sep=[SEP] mask=[MASK] gen=[GEN] eos=[EOS] unk=[UNK]
//! ```

use std::collections::HashMap;
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers;
use crate::params::{Initializer, ParameterTree};

pub const TOY_VOCAB: &str = include_str!("../assets/toy_vocab.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReservedIds {
    pub pad: usize,
    pub cls: usize,
    /// End-of-text marker appended by the tokenizer.
    pub sep: usize,
    pub mask: usize,
    pub gen: usize,
    pub eos: usize,
    pub unk: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    pub reserved: ReservedIds,
}

impl Vocabulary {
    pub fn toy() -> Self {
        Self::parse(TOY_VOCAB).expect("bundled vocabulary is valid")
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut roles: HashMap<String, String> = HashMap::new();
        let mut tokens: Vec<String> = Vec::new();
        for line in text.lines() {
            let header = if tokens.is_empty() {
                line.strip_prefix('#')
            } else {
                None
            };
            if let Some(header) = header {
                if let Some(decl) = header.trim().strip_prefix("reserved:") {
                    for pair in decl.split_whitespace() {
                        let (role, tok) = pair.split_once('=').ok_or_else(|| {
                            Error::Vocabulary(format!("malformed reserved declaration {pair:?}"))
                        })?;
                        roles.insert(role.to_string(), tok.to_string());
                    }
                }
                continue;
            }
            let tok = line.trim_end_matches(['\r', '\n']);
            if tok.is_empty() {
                return Err(Error::Vocabulary(format!(
                    "empty token line at id {}",
                    tokens.len()
                )));
            }
            tokens.push(tok.to_string());
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Vocabulary(format!("duplicate token {t:?}")));
            }
        }
        let role = |name: &str| -> Result<usize> {
            let tok = roles
                .get(name)
                .ok_or_else(|| Error::Vocabulary(format!("reserved role {name} not declared")))?;
            ids.get(tok).copied().ok_or_else(|| {
                Error::Vocabulary(format!("reserved token {tok} missing from vocabulary"))
            })
        };
        let reserved = ReservedIds {
            pad: role("pad")?,
            cls: role("cls")?,
            sep: role("sep")?,
            mask: role("mask")?,
            gen: role("gen")?,
            eos: role("eos")?,
            unk: role("unk")?,
        };
        let all = [
            reserved.pad,
            reserved.cls,
            reserved.sep,
            reserved.mask,
            reserved.gen,
            reserved.eos,
            reserved.unk,
        ];
        for (i, a) in all.iter().enumerate() {
            if all[i + 1..].contains(a) {
                return Err(Error::Vocabulary("reserved ids must be distinct".into()));
            }
        }
        Ok(Self {
            tokens,
            ids,
            reserved,
        })
    }

    /// Vocabulary file text; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let r = &self.reserved;
        let mut out = format!(
            "# reserved: pad={} cls={} sep={} mask={} gen={} eos={} unk={}\n",
            self.tokens[r.pad],
            self.tokens[r.cls],
            self.tokens[r.sep],
            self.tokens[r.mask],
            self.tokens[r.gen],
            self.tokens[r.eos],
            self.tokens[r.unk]
        );
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn is_reserved(&self, id: usize) -> bool {
        let r = &self.reserved;
        [r.pad, r.cls, r.sep, r.mask, r.gen, r.eos, r.unk].contains(&id)
    }

    /// Lowercased words and punctuation marks, in order.
    pub fn split_words(text: &str) -> Vec<String> {
        let mut words = Vec::new();
        for chunk in text.to_lowercase().split_whitespace() {
            let mut current = String::new();
            for ch in chunk.chars() {
                if ch.is_alphanumeric() {
                    current.push(ch);
                } else {
                    if !current.is_empty() {
                        words.push(std::mem::take(&mut current));
                    }
                    words.push(ch.to_string());
                }
            }
            if !current.is_empty() {
                words.push(current);
            }
        }
        words
    }

    /// Greedy longest-match segmentation of one word; continuation pieces carry `##`.
    /// A word with any unmatched remainder becomes a single unknown id.
    pub fn segment_word(&self, word: &str) -> Vec<usize> {
        let chars: Vec<char> = word.chars().collect();
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut found = None;
            for end in (start + 1..=chars.len()).rev() {
                let body: String = chars[start..end].iter().collect();
                let piece = if start == 0 {
                    body
                } else {
                    format!("##{body}")
                };
                if let Some(id) = self.id(&piece) {
                    found = Some((id, end));
                    break;
                }
            }
            match found {
                Some((id, end)) => {
                    pieces.push(id);
                    start = end;
                }
                None => return vec![self.reserved.unk],
            }
        }
        pieces
    }

    /// Subword ids of `text` without the `[CLS]`/end markers.
    pub fn word_pieces(&self, text: &str) -> Vec<usize> {
        Self::split_words(text)
            .iter()
            .flat_map(|w| self.segment_word(w))
            .collect()
    }

    /// `[CLS] pieces… [SEP]`, truncating the tail of the pieces to fit `max_len`.
    pub fn tokenize(&self, text: &str, max_len: usize) -> TokenizedText {
        let mut pieces = self.word_pieces(text);
        pieces.truncate(max_len.saturating_sub(2));
        let mut ids = Vec::with_capacity(pieces.len() + 2);
        ids.push(self.reserved.cls);
        ids.extend(pieces);
        ids.push(self.reserved.sep);
        let mask = vec![true; ids.len()];
        TokenizedText { ids, mask }
    }

    /// Joins non-reserved pieces back into text, merging `##` continuations.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            if self.is_reserved(id) {
                continue;
            }
            let Some(tok) = self.token(id) else { continue };
            if let Some(rest) = tok.strip_prefix("##") {
                out.push_str(rest);
            } else if tok.chars().all(|c| !c.is_alphanumeric()) || out.is_empty() {
                out.push_str(tok);
            } else {
                out.push(' ');
                out.push_str(tok);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedText {
    pub ids: Vec<usize>,
    /// `true` for real tokens, `false` for padding.
    pub mask: Vec<bool>,
}

impl TokenizedText {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn padded(&self, len: usize, pad: usize) -> TokenizedText {
        let mut out = self.clone();
        while out.ids.len() < len {
            out.ids.push(pad);
            out.mask.push(false);
        }
        out
    }
}

/// Text token sequence `Y = {y_cls, y_1, …}` living in a graph.
#[derive(Debug, Clone)]
pub struct TextEmbedding {
    pub tokens: Var,
    pub mask: Vec<bool>,
}

pub fn init_text_encoder(
    tree: &mut ParameterTree,
    init: &mut Initializer,
    cfg: &ModelConfig,
    vocab_size: usize,
) -> Result<()> {
    let d = cfg.hidden;
    tree.insert("iqm.embed", init.normal(vocab_size, d))?;
    tree.insert("iqm.pos", init.normal(cfg.max_text_len, d))?;
    for b in 0..cfg.text_depth {
        let p = format!("iqm.block{b}");
        layers::init_layer_norm(tree, init, &format!("{p}.attn.norm"), d)?;
        layers::init_self_attention(tree, init, &format!("{p}.attn"), d)?;
        layers::init_ffn(tree, init, &format!("{p}.ffn"), d, cfg.ffn_mult)?;
    }
    layers::init_layer_norm(tree, init, "iqm.norm", d)
}

/// Token + position embeddings → bidirectional padding-masked blocks → layer norm.
pub fn encode_text(g: &mut Graph, tok: &TokenizedText, cfg: &ModelConfig) -> Result<TextEmbedding> {
    let tree = g.params();
    let vocab_size = tree.require("iqm.embed")?.nrows();
    let positions = tree.require("iqm.pos")?.nrows();
    if let Some(&id) = tok.ids.iter().find(|&&id| id >= vocab_size) {
        return Err(Error::VocabularyOverflow {
            id,
            size: vocab_size,
        });
    }
    if tok.ids.len() > positions || tok.ids.len() != tok.mask.len() || tok.ids.is_empty() {
        return Err(Error::shape(
            "encode_text (ids vs mask / positions)",
            &[tok.ids.len(), tok.mask.len()],
            &[positions],
        ));
    }
    let embed = g.param("iqm.embed");
    let pos = g.param("iqm.pos");
    let e = g.select_rows(embed, tok.ids.clone());
    let p = g.slice_rows(pos, 0, tok.ids.len());
    let mut x = g.add(e, p);
    let mask = layers::key_padding_mask(tok.ids.len(), &tok.mask);
    for b in 0..cfg.text_depth {
        let prefix = format!("iqm.block{b}");
        let h = layers::layer_norm(g, &format!("{prefix}.attn.norm"), x, cfg.layer_norm_eps);
        let a = layers::self_attention(
            g,
            &format!("{prefix}.attn"),
            h,
            cfg.heads,
            Some(mask.clone()),
        );
        x = g.add(x, a);
        let f = layers::ffn(g, &format!("{prefix}.ffn"), x, cfg.layer_norm_eps);
        x = g.add(x, f);
    }
    let tokens = layers::layer_norm(g, "iqm.norm", x, cfg.layer_norm_eps);
    Ok(TextEmbedding {
        tokens,
        mask: tok.mask.clone(),
    })
}
