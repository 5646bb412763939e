//! Manifests, answer metrics (top-1 accuracy, WUPS) and the evaluation loop.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{AnswerHead, DecodeConfig};
use crate::error::{Error, Result};
use crate::fusion;
use crate::model::McgModel;
use crate::sampling::{MediaSource, SampleMode};
use crate::training;

pub const TOY_TAXONOMY: &str = include_str!("../assets/toy_taxonomy.txt");

/// Per-type tag used for records without a `qtype`.
pub const UNTYPED: &str = "untyped";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Target {
    Open(String),
    Choice { index: usize, choices: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub id: String,
    /// Media path, resolved against the manifest's directory.
    pub video: PathBuf,
    pub question: String,
    pub target: Target,
    pub qtype: Option<String>,
    /// Free-text description of the video used as the contrastive/matching text.
    pub caption: Option<String>,
}

impl ManifestRecord {
    pub fn gold_answer(&self) -> &str {
        match &self.target {
            Target::Open(a) => a,
            Target::Choice { index, choices } => &choices[*index],
        }
    }

    pub fn type_tag(&self) -> &str {
        self.qtype.as_deref().unwrap_or(UNTYPED)
    }
}

/// One manifest line as written on disk.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawRecord {
    pub id: String,
    pub video: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qtype: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text, base, path)
}

pub fn parse_manifest(text: &str, base: &Path, path: &Path) -> Result<Vec<ManifestRecord>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fail = |message: String| Error::Manifest {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let raw: RawRecord = serde_json::from_str(line).map_err(|e| fail(e.to_string()))?;
        let target = match (raw.answer, raw.answer_index, raw.choices) {
            (Some(a), None, None) => Target::Open(a),
            (None, Some(index), Some(choices)) => {
                if index >= choices.len() {
                    return Err(fail(format!(
                        "record {}: answer_index {index} out of range for {} choices",
                        raw.id,
                        choices.len()
                    )));
                }
                Target::Choice { index, choices }
            }
            (None, None, None) => {
                return Err(fail(format!(
                    "record {}: missing both answer and answer_index/choices",
                    raw.id
                )))
            }
            _ => {
                return Err(fail(format!(
                    "record {}: needs exactly one of answer or answer_index with choices",
                    raw.id
                )))
            }
        };
        if !seen.insert(raw.id.clone()) {
            return Err(fail(format!("duplicate id {}", raw.id)));
        }
        let video = PathBuf::from(&raw.video);
        out.push(ManifestRecord {
            id: raw.id,
            video: if video.is_absolute() {
                video
            } else {
                base.join(video)
            },
            question: raw.question,
            target,
            qtype: raw.qtype,
            caption: raw.caption,
        });
    }
    Ok(out)
}

/// Lowercase, punctuation removed, whitespace collapsed, one leading article dropped.
pub fn normalize_answer(s: &str) -> String {
    let lowered: String = s
        .to_lowercase()
        .chars()
        .map(|c| if c.is_ascii_punctuation() { ' ' } else { c })
        .collect();
    let mut words: Vec<&str> = lowered.split_whitespace().collect();
    if words.len() > 1 && matches!(words[0], "a" | "an" | "the") {
        words.remove(0);
    }
    words.join(" ")
}

pub fn top1_accuracy(predictions: &[String], golds: &[String]) -> Result<f64> {
    if predictions.len() != golds.len() {
        return Err(Error::shape(
            "top1_accuracy",
            &[predictions.len()],
            &[golds.len()],
        ));
    }
    if golds.is_empty() {
        return Ok(0.0);
    }
    let hits = predictions
        .iter()
        .zip(golds)
        .filter(|(p, g)| normalize_answer(p) == normalize_answer(g))
        .count();
    Ok(hits as f64 / golds.len() as f64)
}

/// Directed acyclic is-a graph with a word → concept map.
#[derive(Debug)]
pub struct Taxonomy {
    names: Vec<String>,
    index: HashMap<String, usize>,
    parents: Vec<Vec<usize>>,
    root: usize,
    words: HashMap<String, Vec<usize>>,
    depth: Vec<usize>,
    warned: Mutex<HashSet<String>>,
}

impl Taxonomy {
    pub fn toy() -> Self {
        Self::parse(TOY_TAXONOMY).expect("bundled taxonomy is valid")
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Reads `root`, `concept` and `word` lines; see the bundled toy file for the format.
    pub fn parse(text: &str) -> Result<Self> {
        let mut names: Vec<String> = Vec::new();
        let mut index = HashMap::new();
        let mut parents: Vec<Vec<usize>> = Vec::new();
        let mut root = None;
        let mut aliases: Vec<(String, Vec<String>)> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let kind = parts.next().unwrap();
            let name = parts
                .next()
                .ok_or_else(|| Error::Taxonomy(format!("line {}: missing name", i + 1)))?
                .to_lowercase();
            let rest: Vec<String> = parts.map(str::to_lowercase).collect();
            match kind {
                "root" | "concept" => {
                    if index.contains_key(&name) {
                        return Err(Error::Taxonomy(format!(
                            "line {}: duplicate concept {name}",
                            i + 1
                        )));
                    }
                    let mut ps = Vec::new();
                    for p in &rest {
                        ps.push(*index.get(p).ok_or_else(|| {
                            Error::Taxonomy(format!("line {}: unknown parent {p}", i + 1))
                        })?);
                    }
                    if kind == "root" {
                        if root.is_some() || !ps.is_empty() {
                            return Err(Error::Taxonomy(format!(
                                "line {}: a single parentless root is required",
                                i + 1
                            )));
                        }
                        root = Some(names.len());
                    } else if ps.is_empty() {
                        return Err(Error::Taxonomy(format!(
                            "line {}: concept {name} has no parent",
                            i + 1
                        )));
                    }
                    index.insert(name.clone(), names.len());
                    names.push(name);
                    parents.push(ps);
                }
                "word" => aliases.push((name, rest)),
                other => {
                    return Err(Error::Taxonomy(format!(
                        "line {}: unknown entry {other}",
                        i + 1
                    )))
                }
            }
        }
        let root = root.ok_or_else(|| Error::Taxonomy("no root declared".into()))?;
        let mut words: HashMap<String, Vec<usize>> = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), vec![i]))
            .collect();
        for (word, concepts) in aliases {
            let ids = concepts
                .iter()
                .map(|c| {
                    index
                        .get(c)
                        .copied()
                        .ok_or_else(|| Error::Taxonomy(format!("word {word}: unknown concept {c}")))
                })
                .collect::<Result<Vec<_>>>()?;
            let entry = words.entry(word).or_default();
            for id in ids {
                if !entry.contains(&id) {
                    entry.push(id);
                }
            }
        }
        // Parents are declared before children, so depths resolve in one pass.
        let mut depth = vec![0; names.len()];
        depth[root] = 1;
        for c in 0..names.len() {
            if c != root {
                depth[c] = 1 + parents[c].iter().map(|&p| depth[p]).min().unwrap();
            }
        }
        Ok(Self {
            names,
            index,
            parents,
            root,
            words,
            depth,
            warned: Mutex::new(HashSet::new()),
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn root(&self) -> &str {
        &self.names[self.root]
    }

    pub fn concept(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Depth counted from the root, which has depth 1.
    pub fn depth(&self, concept: usize) -> usize {
        self.depth[concept]
    }

    pub fn senses(&self, word: &str) -> Option<&[usize]> {
        self.words.get(word).map(Vec::as_slice)
    }

    fn ancestors(&self, c: usize) -> HashSet<usize> {
        let mut seen = HashSet::from([c]);
        let mut stack = vec![c];
        while let Some(x) = stack.pop() {
            for &p in &self.parents[x] {
                if seen.insert(p) {
                    stack.push(p);
                }
            }
        }
        seen
    }

    /// Wu-Palmer similarity of two concepts.
    pub fn concept_similarity(&self, a: usize, b: usize) -> f64 {
        let common = self.ancestors(a);
        let lcs_depth = self
            .ancestors(b)
            .into_iter()
            .filter(|c| common.contains(c))
            .map(|c| self.depth[c])
            .max()
            .unwrap_or(0);
        2.0 * lcs_depth as f64 / (self.depth[a] + self.depth[b]) as f64
    }

    fn warn_once(&self, word: &str) {
        if self.warned.lock().unwrap().insert(word.to_string()) {
            warn!("word {word:?} is not in the taxonomy; using exact match");
        }
    }
}

/// Best Wu-Palmer similarity over the senses of `a` and `b`; exact match for unmapped words.
pub fn wup_similarity(a: &str, b: &str, taxonomy: &Taxonomy) -> f64 {
    if a == b {
        return 1.0;
    }
    let (sa, sb) = (taxonomy.senses(a), taxonomy.senses(b));
    match (sa, sb) {
        (Some(sa), Some(sb)) => sa
            .iter()
            .flat_map(|&x| sb.iter().map(move |&y| (x, y)))
            .map(|(x, y)| taxonomy.concept_similarity(x, y))
            .fold(0.0, f64::max),
        _ => {
            if sa.is_none() {
                taxonomy.warn_once(a);
            }
            if sb.is_none() {
                taxonomy.warn_once(b);
            }
            0.0
        }
    }
}

fn thresholded(w: f64, theta: f64) -> f64 {
    if w < theta {
        0.1 * w
    } else {
        w
    }
}

/// `min` over `from` tokens of the best thresholded similarity to any `to` token.
fn directed(from: &[&str], to: &[&str], theta: f64, taxonomy: &Taxonomy) -> f64 {
    from.iter()
        .map(|f| {
            to.iter()
                .map(|t| thresholded(wup_similarity(f, t, taxonomy), theta))
                .fold(0.0, f64::max)
        })
        .fold(1.0, f64::min)
}

/// WUPS of a single answer pair after normalization.
pub fn wups_pair(prediction: &str, gold: &str, theta: f64, taxonomy: &Taxonomy) -> f64 {
    let (p, g) = (normalize_answer(prediction), normalize_answer(gold));
    let pt: Vec<&str> = p.split_whitespace().collect();
    let gt: Vec<&str> = g.split_whitespace().collect();
    match (pt.is_empty(), gt.is_empty()) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => directed(&gt, &pt, theta, taxonomy).min(directed(&pt, &gt, theta, taxonomy)),
    }
}

pub fn wups_at(
    predictions: &[String],
    golds: &[String],
    theta: f64,
    taxonomy: &Taxonomy,
) -> Result<f64> {
    if predictions.len() != golds.len() {
        return Err(Error::shape(
            "wups_at",
            &[predictions.len()],
            &[golds.len()],
        ));
    }
    if golds.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = predictions
        .iter()
        .zip(golds)
        .map(|(p, g)| wups_pair(p, g, theta, taxonomy))
        .sum();
    Ok(total / golds.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct Counts {
    pub total: usize,
    pub evaluated: usize,
    pub failed: usize,
    pub per_type: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct MetricsReport {
    pub overall: f64,
    pub per_type: BTreeMap<String, f64>,
    pub wups_0_9: f64,
    pub wups_0_0: f64,
    pub counts: Counts,
}

impl MetricsReport {
    /// `key = value` lines in a fixed order.
    pub fn to_text(&self) -> String {
        let mut out = format!("overall = {}\n", self.overall);
        for (k, v) in &self.per_type {
            out.push_str(&format!("per_type.{k} = {v}\n"));
        }
        out.push_str(&format!("wups_0_9 = {}\n", self.wups_0_9));
        out.push_str(&format!("wups_0_0 = {}\n", self.wups_0_0));
        out.push_str(&format!("counts.total = {}\n", self.counts.total));
        out.push_str(&format!("counts.evaluated = {}\n", self.counts.evaluated));
        out.push_str(&format!("counts.failed = {}\n", self.counts.failed));
        for (k, v) in &self.counts.per_type {
            out.push_str(&format!("counts.per_type.{k} = {v}\n"));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// One evaluated record.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub qtype: String,
    pub predicted: String,
    pub gold: String,
    pub correct: bool,
}

/// Answers one record: generation (or the classifier head) for open-ended, matching scores for multi-choice.
pub fn predict_record(
    model: &McgModel,
    record: &ManifestRecord,
    decode: &DecodeConfig,
) -> Result<Prediction> {
    let source = MediaSource::open(&record.video)?;
    let clip = model.load_clip(&source, SampleMode::Eval, 0)?;
    let (predicted, correct) = match &record.target {
        Target::Choice { index, choices } => {
            let (best, _) = fusion::score_choices(model, &clip, &record.question, choices)?;
            (choices[best].clone(), best == *index)
        }
        Target::Open(gold) => {
            let predicted = match model.config.model.answer_head {
                AnswerHead::Generator => {
                    fusion::generate_answer(model, &clip, &record.question, decode)?.text
                }
                AnswerHead::Classifier => {
                    let (best, _) = training::classify(model, &clip, &record.question)?;
                    training::classifier_classes(&model.config.model)[best].clone()
                }
            };
            let correct = normalize_answer(&predicted) == normalize_answer(gold);
            (predicted, correct)
        }
    };
    Ok(Prediction {
        id: record.id.clone(),
        qtype: record.type_tag().to_string(),
        predicted,
        gold: record.gold_answer().to_string(),
        correct,
    })
}

/// Runs every record (in parallel) and aggregates in manifest order.
pub fn evaluate(
    model: &McgModel,
    records: &[ManifestRecord],
    decode: &DecodeConfig,
    taxonomy: &Taxonomy,
) -> (MetricsReport, Vec<Prediction>) {
    let results: Vec<Result<Prediction>> = records
        .par_iter()
        .map(|r| predict_record(model, r, decode))
        .collect();
    let mut predictions = Vec::new();
    let mut failed = 0;
    for (r, res) in records.iter().zip(results) {
        match res {
            Ok(p) => predictions.push(p),
            Err(e) => {
                warn!("record {} failed: {e}", r.id);
                failed += 1;
            }
        }
    }
    (
        aggregate(&predictions, records.len(), failed, taxonomy),
        predictions,
    )
}

pub fn aggregate(
    predictions: &[Prediction],
    total: usize,
    failed: usize,
    taxonomy: &Taxonomy,
) -> MetricsReport {
    let n = predictions.len();
    let mut hits: BTreeMap<String, usize> = BTreeMap::new();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for p in predictions {
        *counts.entry(p.qtype.clone()).or_default() += 1;
        *hits.entry(p.qtype.clone()).or_default() += p.correct as usize;
    }
    let correct: usize = hits.values().sum();
    let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let preds: Vec<String> = predictions.iter().map(|p| p.predicted.clone()).collect();
    let golds: Vec<String> = predictions.iter().map(|p| p.gold.clone()).collect();
    MetricsReport {
        overall: frac(correct, n),
        per_type: counts
            .iter()
            .map(|(k, &c)| (k.clone(), frac(hits[k], c)))
            .collect(),
        wups_0_9: wups_at(&preds, &golds, 0.9, taxonomy).unwrap(),
        wups_0_0: wups_at(&preds, &golds, 0.0, taxonomy).unwrap(),
        counts: Counts {
            total,
            evaluated: n,
            failed,
            per_type: counts,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Vec<ManifestRecord>> {
        parse_manifest(text, Path::new("/data"), Path::new("m.jsonl"))
    }

    #[test]
    fn empty_manifest_is_empty() {
        assert!(parse("").unwrap().is_empty());
    }

    #[test]
    fn manifest_validation() {
        let ok = parse(
            r#"{"id":"a","video":"v/a.mcgv","question":"q?","answer":"dog","qtype":"what"}
{"id":"b","video":"/abs/b","question":"q?","answer_index":1,"choices":["x","y"]}"#,
        )
        .unwrap();
        assert_eq!(ok[0].video, PathBuf::from("/data/v/a.mcgv"));
        assert_eq!(ok[1].gold_answer(), "y");
        assert_eq!(ok[1].type_tag(), UNTYPED);

        let err = parse(r#"{"id":"zz","video":"v","question":"q"}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("zz") && err.contains(":1:"), "{err}");
        let err = parse(
            "{\"id\":\"a\",\"video\":\"v\",\"question\":\"q\",\"answer\":\"x\"}\n\n{\"id\":\"a\",\"video\":\"v\",\"question\":\"q\",\"answer\":\"y\"}",
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("duplicate") && err.contains(":3:"), "{err}");
        assert!(parse("{not json").unwrap_err().to_string().contains(":1:"));
        assert!(
            parse(r#"{"id":"a","video":"v","question":"q","answer_index":2,"choices":["x"]}"#)
                .is_err()
        );
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_answer("The dog "), "dog");
        assert_eq!(normalize_answer("  A Red, ball!"), "red ball");
        assert_eq!(normalize_answer("the"), "the");
    }

    #[test]
    fn accuracy() {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        assert_eq!(
            top1_accuracy(&s(&["a b", "c", "x", "y"]), &s(&["a b", "c", "d", "e"])).unwrap(),
            0.5
        );
        assert_eq!(top1_accuracy(&s(&["The dog "]), &s(&["dog"])).unwrap(), 1.0);
        assert!(top1_accuracy(&s(&["a"]), &s(&[])).is_err());
    }

    #[test]
    fn toy_taxonomy_depths() {
        let t = Taxonomy::toy();
        assert!(t.len() >= 45 && t.len() <= 60, "{}", t.len());
        assert_eq!(t.root(), "entity");
        assert_eq!(t.depth(t.concept("animal").unwrap()), 2);
        assert_eq!(t.depth(t.concept("dog").unwrap()), 3);
        assert!((wup_similarity("dog", "cat", &t) - 2.0 / 3.0).abs() < 1e-12);
        assert!((wup_similarity("dog", "red", &t) - 2.0 / 7.0).abs() < 1e-12);
        assert_eq!(wup_similarity("quickly", "fast", &t), 1.0);
        assert_eq!(wup_similarity("zebra", "dog", &t), 0.0);
    }

    #[test]
    fn wups_thresholding() {
        let t = Taxonomy::toy();
        let p = vec!["cat".to_string()];
        let g = vec!["dog".to_string()];
        assert!((wups_at(&p, &g, 0.0, &t).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((wups_at(&p, &g, 0.9, &t).unwrap() - 0.2 / 3.0).abs() < 1e-12);
        assert_eq!(wups_pair("", "dog", 0.0, &t), 0.0);
    }

    #[test]
    fn report_text_order() {
        let preds = vec![
            Prediction {
                id: "1".into(),
                qtype: "color".into(),
                predicted: "red".into(),
                gold: "red".into(),
                correct: true,
            },
            Prediction {
                id: "2".into(),
                qtype: "direction".into(),
                predicted: "up".into(),
                gold: "left".into(),
                correct: false,
            },
        ];
        let r = aggregate(&preds, 3, 1, &Taxonomy::toy());
        assert_eq!(r.overall, 0.5);
        let text = r.to_text();
        let keys: Vec<&str> = text
            .lines()
            .map(|l| l.split(" = ").next().unwrap())
            .collect();
        assert_eq!(
            keys,
            [
                "overall",
                "per_type.color",
                "per_type.direction",
                "wups_0_9",
                "wups_0_0",
                "counts.total",
                "counts.evaluated",
                "counts.failed",
                "counts.per_type.color",
                "counts.per_type.direction"
            ]
        );
        assert!(serde_json::from_str::<serde_json::Value>(&r.to_json()).is_ok());
    }
}
