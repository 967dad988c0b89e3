//! Weakly-supervised image-text corpus cleaning over local JSONL records.
//!
//! Stages, each with reconciled counters:
//! 1. `image`: page language, dominance, size (both sides strictly above the
//!    minimum) and content flags.
//! 2. `text`: bad-span and noisy-word removal, then length and OOV-ratio checks.
//! 3. `score`: a [`SemanticScorer`] rates each (image, text); low scores drop.
//! 4. `aggregate`: texts attached to more than `max_dup` images are removed
//!    with all their pairs, then each image keeps its best-scoring text
//!    (ties to the lexicographically smallest text).
//!
//! Output is sorted by image id, so it does not depend on input order.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::error::{Error, Result};
use crate::io::{atomic_write, read_json, to_jsonl, write_json};
use crate::par::Exec;
use crate::tokenizer::Tokenizer;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextSource {
    Alt,
    Title,
    Surrounding,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContentFlag {
    Pornographic,
    Racy,
    Unnatural,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateText {
    pub source: TextSource,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub image_id: String,
    pub page_lang: String,
    pub is_dominant: bool,
    pub width: f64,
    pub height: f64,
    #[serde(default)]
    pub content_flags: BTreeSet<ContentFlag>,
    pub candidate_texts: Vec<CandidateText>,
    /// Latent content tags of the image, read by the reference scorer.
    #[serde(default)]
    pub tags: Vec<String>,
}

impl RawRecord {
    pub fn validate(&self) -> Result<()> {
        if self.image_id.is_empty() {
            return Err(Error::Input("record with an empty image_id".into()));
        }
        if !(self.width >= 0.0 && self.height >= 0.0) {
            return Err(Error::Input(format!("record {}: negative size", self.image_id)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub image_id: String,
    pub source: TextSource,
    pub text: String,
    pub score: f64,
    /// `[length prior, tag count, tag overlap]`: text-only, image-content and
    /// cross-modal features.
    pub features: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScorerConfig {
    pub bias: f64,
    /// Weights of `[length prior, tag count, tag overlap]`.
    pub weights: [f64; 3],
    /// Sentence length the length prior peaks at.
    pub length_mode: f64,
    pub length_scale: f64,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            bias: -4.0,
            weights: [1.0, 0.0, 8.0],
            length_mode: 13.0,
            length_scale: 8.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Policy {
    /// Both sides must be strictly larger.
    pub min_side: f64,
    pub languages: Vec<String>,
    pub require_dominant: bool,
    /// Regexes whose matches are cut out of candidate texts.
    pub bad_span_patterns: Vec<String>,
    /// Words removed wherever they occur (case-insensitive).
    pub noisy_words: Vec<String>,
    pub min_len: usize,
    pub max_len: usize,
    pub max_oov_ratio: f64,
    pub score_threshold: f64,
    pub max_dup: usize,
    pub scorer: ScorerConfig,
}

impl Default for Policy {
    fn default() -> Self {
        Self {
            min_side: 300.0,
            languages: vec!["en".into()],
            require_dominant: true,
            bad_span_patterns: vec![
                r"https?://\S+".into(),
                r"www\.\S+".into(),
                r"\S+@\S+\.\S+".into(),
                r"\S+\.(jpe?g|png|gif|bmp)\b".into(),
                r"(?i)\b(click here|read more|all rights reserved)\b".into(),
                r"[©®™|»«]".into(),
            ],
            noisy_words: vec!["img".into(), "dsc".into(), "untitled".into(), "thumbnail".into()],
            min_len: 3,
            max_len: 30,
            max_oov_ratio: 0.25,
            score_threshold: 0.5,
            max_dup: 10,
            scorer: ScorerConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    Language,
    NotDominant,
    Size,
    Content,
    Empty,
    Length,
    Oov,
    ScorerError,
    LowScore,
    OverDuplicated,
    NotBest,
}

/// Interpretable relevance model of an (image, text) pair.
pub trait SemanticScorer: Sync {
    fn features(&self, rec: &RawRecord, text: &str) -> Result<Vec<f64>>;
    /// Relevance in [0, 1].
    fn score(&self, features: &[f64]) -> f64;
}

/// Logistic regression over `[length prior, tag count, tag overlap]`, where
/// overlap is the fraction of the image's tags that appear as words of the text.
#[derive(Clone, Debug)]
pub struct ReferenceScorer {
    pub cfg: ScorerConfig,
    tok: Tokenizer,
}

impl ReferenceScorer {
    pub fn new(cfg: ScorerConfig, tok: Tokenizer) -> Self {
        Self { cfg, tok }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl SemanticScorer for ReferenceScorer {
    fn features(&self, rec: &RawRecord, text: &str) -> Result<Vec<f64>> {
        let words: HashSet<String> = self.tok.basic_split(text).into_iter().collect();
        let n = count_words(&self.tok, text) as f64;
        let z = (n - self.cfg.length_mode) / self.cfg.length_scale;
        let length_prior = if n == 0.0 { 0.0 } else { (-0.5 * z * z).exp() };
        let tags: BTreeSet<String> = rec.tags.iter().map(|t| t.to_lowercase()).collect();
        let overlap = if tags.is_empty() {
            0.0
        } else {
            tags.iter().filter(|t| words.contains(*t)).count() as f64 / tags.len() as f64
        };
        Ok(vec![length_prior, tags.len() as f64, overlap])
    }

    fn score(&self, f: &[f64]) -> f64 {
        if f[0] == 0.0 && f[2] == 0.0 {
            return 0.0;
        }
        let w = &self.cfg.weights;
        sigmoid(self.cfg.bias + w[0] * f[0] + w[1] * f[1] + w[2] * f[2])
    }
}

fn count_words(tok: &Tokenizer, text: &str) -> usize {
    tok.basic_split(text)
        .iter()
        .filter(|w| w.chars().any(|c| c.is_alphanumeric()))
        .count()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageStats {
    pub stage: String,
    pub input: usize,
    pub kept: usize,
    pub dropped: BTreeMap<DropReason, usize>,
}

impl StageStats {
    fn new(stage: &str) -> Self {
        Self {
            stage: stage.into(),
            input: 0,
            kept: 0,
            dropped: BTreeMap::new(),
        }
    }

    fn drop(&mut self, r: DropReason) {
        *self.dropped.entry(r).or_default() += 1;
    }

    pub fn reconciles(&self) -> bool {
        self.input == self.kept + self.dropped.values().sum::<usize>()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineStats {
    pub stages: Vec<StageStats>,
}

impl PipelineStats {
    pub fn reconciles(&self) -> bool {
        self.stages.iter().all(StageStats::reconciles)
    }

    pub fn stage(&self, name: &str) -> Option<&StageStats> {
        self.stages.iter().find(|s| s.stage == name)
    }
}

/// Compiled form of a [`Policy`].
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub policy: Policy,
    bad_spans: Vec<Regex>,
    noisy: HashSet<String>,
    tok: Tokenizer,
}

impl Pipeline {
    pub fn new(policy: Policy, tok: Tokenizer) -> Result<Self> {
        let bad_spans = policy
            .bad_span_patterns
            .iter()
            .map(|p| Regex::new(p).map_err(|e| Error::Config(format!("bad span pattern {p:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if policy.min_len > policy.max_len {
            return Err(Error::Config(format!(
                "min_len {} exceeds max_len {}",
                policy.min_len, policy.max_len
            )));
        }
        let noisy = policy.noisy_words.iter().map(|w| w.to_lowercase()).collect();
        Ok(Self {
            policy,
            bad_spans,
            noisy,
            tok,
        })
    }

    pub fn filter_image(&self, rec: &RawRecord) -> std::result::Result<(), DropReason> {
        let p = &self.policy;
        if !p.languages.iter().any(|l| l.eq_ignore_ascii_case(&rec.page_lang)) {
            return Err(DropReason::Language);
        }
        if p.require_dominant && !rec.is_dominant {
            return Err(DropReason::NotDominant);
        }
        if !(rec.width > p.min_side && rec.height > p.min_side) {
            return Err(DropReason::Size);
        }
        if !rec.content_flags.is_empty() {
            return Err(DropReason::Content);
        }
        Ok(())
    }

    pub fn clean_sentence(&self, text: &str) -> std::result::Result<String, DropReason> {
        let mut s = text.to_string();
        for re in &self.bad_spans {
            s = re.replace_all(&s, " ").into_owned();
        }
        let kept: Vec<&str> = s
            .split_whitespace()
            .filter(|w| !self.noisy.contains(&w.to_lowercase()))
            .collect();
        let cleaned = kept.join(" ");
        if cleaned.is_empty() {
            return Err(DropReason::Empty);
        }
        let words: Vec<String> = self
            .tok
            .basic_split(&cleaned)
            .into_iter()
            .filter(|w| w.chars().any(|c| c.is_alphanumeric()))
            .collect();
        if words.len() < self.policy.min_len || words.len() > self.policy.max_len {
            return Err(DropReason::Length);
        }
        let oov = words.iter().filter(|w| self.tok.is_oov(w)).count();
        if oov as f64 / words.len() as f64 > self.policy.max_oov_ratio {
            return Err(DropReason::Oov);
        }
        Ok(cleaned)
    }

    /// Runs every stage. Per-record work goes through `exec`; the result is
    /// identical for any worker count.
    pub fn run(
        &self,
        records: &[RawRecord],
        scorer: &dyn SemanticScorer,
        exec: Exec,
    ) -> Result<(Vec<ScoredPair>, PipelineStats)> {
        for r in records {
            r.validate()?;
        }
        enum Outcome {
            Image(DropReason),
            Texts(Vec<std::result::Result<ScoredPair, DropReason>>, usize, Vec<DropReason>),
        }
        let outcomes = exec.map(records, |rec| {
            if let Err(r) = self.filter_image(rec) {
                return Outcome::Image(r);
            }
            let mut text_drops = Vec::new();
            let mut scored = Vec::new();
            for c in &rec.candidate_texts {
                match self.clean_sentence(&c.text) {
                    Err(r) => text_drops.push(r),
                    Ok(text) => {
                        let pair = scorer
                            .features(rec, &text)
                            .map(|features| ScoredPair {
                                image_id: rec.image_id.clone(),
                                source: c.source,
                                score: scorer.score(&features),
                                text,
                                features,
                            })
                            .map_err(|_| DropReason::ScorerError);
                        scored.push(pair);
                    }
                }
            }
            Outcome::Texts(scored, rec.candidate_texts.len(), text_drops)
        });
        let mut image = StageStats::new("image");
        let mut text = StageStats::new("text");
        let mut score = StageStats::new("score");
        let mut passed = Vec::new();
        for o in outcomes {
            image.input += 1;
            match o {
                Outcome::Image(r) => image.drop(r),
                Outcome::Texts(scored, n, drops) => {
                    image.kept += 1;
                    text.input += n;
                    text.kept += scored.len();
                    drops.into_iter().for_each(|r| text.drop(r));
                    for s in scored {
                        score.input += 1;
                        match s {
                            Err(r) => score.drop(r),
                            Ok(p) if !(p.score >= self.policy.score_threshold) => score.drop(DropReason::LowScore),
                            Ok(p) => {
                                score.kept += 1;
                                passed.push(p);
                            }
                        }
                    }
                }
            }
        }
        let (out, agg) = aggregate(passed, self.policy.max_dup, &self.tok);
        Ok((
            out,
            PipelineStats {
                stages: vec![image, text, score, agg],
            },
        ))
    }
}

/// Duplicate removal, then per-image argmax. Output sorted by image id.
pub fn aggregate(pairs: Vec<ScoredPair>, max_dup: usize, tok: &Tokenizer) -> (Vec<ScoredPair>, StageStats) {
    let mut stats = StageStats::new("aggregate");
    stats.input = pairs.len();
    let mut images_per_text: HashMap<String, HashSet<&str>> = HashMap::new();
    for p in &pairs {
        images_per_text
            .entry(tok.normalize(&p.text))
            .or_default()
            .insert(p.image_id.as_str());
    }
    let banned: HashSet<String> = images_per_text
        .into_iter()
        .filter(|(_, imgs)| imgs.len() > max_dup)
        .map(|(t, _)| t)
        .collect();
    let mut best: BTreeMap<String, ScoredPair> = BTreeMap::new();
    for p in pairs {
        if banned.contains(&tok.normalize(&p.text)) {
            stats.drop(DropReason::OverDuplicated);
            continue;
        }
        match best.get(&p.image_id) {
            Some(cur) if !better(&p, cur) => stats.drop(DropReason::NotBest),
            Some(_) => {
                stats.drop(DropReason::NotBest);
                best.insert(p.image_id.clone(), p);
            }
            None => {
                best.insert(p.image_id.clone(), p);
            }
        }
    }
    let out: Vec<ScoredPair> = best.into_values().collect();
    stats.kept = out.len();
    (out, stats)
}

fn better(a: &ScoredPair, b: &ScoredPair) -> bool {
    a.score > b.score || (a.score == b.score && (a.text.as_str(), a.source) < (b.text.as_str(), b.source))
}

pub fn read_records(path: &Path) -> Result<Vec<RawRecord>> {
    crate::io::read_jsonl(path)
}

/// File-level entry point: reads `input`, writes the cleaned corpus to
/// `output` and the stage counters to `report`.
pub fn run_files(
    input: &Path,
    output: &Path,
    policy: Option<&Path>,
    report: &Path,
    tok: Tokenizer,
    exec: Exec,
) -> Result<PipelineStats> {
    let policy: Policy = match policy {
        Some(p) => read_json(p)?,
        None => Policy::default(),
    };
    let scorer = ReferenceScorer::new(policy.scorer.clone(), tok.clone());
    let pipe = Pipeline::new(policy, tok)?;
    let records = read_records(input)?;
    let (out, stats) = pipe.run(&records, &scorer, exec)?;
    atomic_write(output, to_jsonl(&out)?.as_bytes())?;
    write_json(report, &stats)?;
    Ok(stats)
}

/// Raw records describing a generated corpus: English, dominant, unflagged,
/// one alt text per caption, with the present class names as tags.
pub fn raw_records_from(ds: &Dataset) -> Vec<RawRecord> {
    ds.records
        .iter()
        .map(|r| {
            let tags: BTreeSet<String> = r
                .labels
                .iter()
                .filter_map(|&c| ds.meta.class_names.get(c).cloned())
                .collect();
            RawRecord {
                image_id: r.image_id.clone(),
                page_lang: "en".into(),
                is_dominant: true,
                width: r.width,
                height: r.height,
                content_flags: BTreeSet::new(),
                candidate_texts: r
                    .captions
                    .iter()
                    .map(|c| CandidateText {
                        source: TextSource::Alt,
                        text: c.clone(),
                    })
                    .collect(),
                tags: tags.into_iter().collect(),
            }
        })
        .collect()
}

pub fn write_records(path: &Path, records: &[RawRecord]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    atomic_write(path, to_jsonl(records)?.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::Vocab;

    fn pipe() -> Pipeline {
        Pipeline::new(Policy::default(), Tokenizer::new(Vocab::fixture())).unwrap()
    }

    fn rec(w: f64, h: f64) -> RawRecord {
        RawRecord {
            image_id: "a".into(),
            page_lang: "en".into(),
            is_dominant: true,
            width: w,
            height: h,
            content_flags: BTreeSet::new(),
            candidate_texts: vec![],
            tags: vec![],
        }
    }

    #[test]
    fn size_boundary_is_strict() {
        let p = pipe();
        assert_eq!(p.filter_image(&rec(301.0, 301.0)), Ok(()));
        assert_eq!(p.filter_image(&rec(300.0, 500.0)), Err(DropReason::Size));
        let mut r = rec(400.0, 400.0);
        r.content_flags.insert(ContentFlag::Racy);
        assert_eq!(p.filter_image(&r), Err(DropReason::Content));
        r.page_lang = "de".into();
        assert_eq!(p.filter_image(&r), Err(DropReason::Language));
    }

    #[test]
    fn sentence_rules() {
        let p = pipe();
        let s = "a man and a woman sitting on a bench in the park near the water";
        assert_eq!(p.clean_sentence(s), Ok(s.to_string()));
        assert_eq!(p.clean_sentence("a cat"), Err(DropReason::Length));
        assert_eq!(p.clean_sentence("a cat zzqx qqzv bench"), Err(DropReason::Oov));
        assert_eq!(
            p.clean_sentence("a dog on the grass http://x.io/a.jpg ©"),
            Ok("a dog on the grass".to_string())
        );
    }

    #[test]
    fn reference_scorer_by_hand() {
        let tok = Tokenizer::new(Vocab::fixture());
        let s = ReferenceScorer::new(ScorerConfig::default(), tok);
        let mut r = rec(400.0, 400.0);
        r.tags = vec!["cat".into(), "dog".into()];
        let f = s.features(&r, "a cat and a dog").unwrap();
        let prior = (-0.5 * ((5.0 - 13.0) / 8.0f64).powi(2)).exp();
        assert_eq!(f, vec![prior, 2.0, 1.0]);
        let expect = 1.0 / (1.0 + (-(-4.0 + prior + 8.0)).exp());
        assert!((s.score(&f) - expect).abs() < 1e-15);
        assert!(s.score(&f) > 0.9);
        assert_eq!(s.score(&s.features(&r, "").unwrap()), 0.0);
    }

    #[test]
    fn aggregate_keeps_best_and_drops_duplicates() {
        let tok = Tokenizer::new(Vocab::fixture());
        let sp = |img: &str, text: &str, score: f64| ScoredPair {
            image_id: img.into(),
            source: TextSource::Alt,
            text: text.into(),
            score,
            features: vec![],
        };
        let (out, st) = aggregate(vec![sp("a", "x y z", 0.6), sp("a", "p q r", 0.9)], 10, &tok);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].text, "p q r");
        assert!(st.reconciles());
        let many: Vec<ScoredPair> = (0..3).map(|i| sp(&format!("i{i}"), "same text", 0.9)).collect();
        let (out, st) = aggregate(many, 2, &tok);
        assert!(out.is_empty());
        assert_eq!(st.dropped[&DropReason::OverDuplicated], 3);
        let (out, _) = aggregate(vec![sp("a", "b b b", 0.7), sp("a", "a a a", 0.7)], 10, &tok);
        assert_eq!(out[0].text, "a a a");
    }
}
