//! IS × MSC corpus synthesis, scoring, filtering and preference pairs.
//!
//! Stages run in a fixed order so every artifact is a function of the inputs
//! and seeds: [`synthesize`] → [`score_all`] → [`dedup`] → [`stratified_sample`]
//! → [`audit_slice`] / [`build_pairs`]. Generation and scoring fan out over a
//! worker pool; everything after that is sequential over input order.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::generation::{par_map, DecodingPreset, Generator};
use crate::metrics::mae5;
use crate::prompting::{build_prompt_with, sha256_hex, PromptError, PromptOptions, TemplateSet};
use crate::scale::{parse_prediction, MappingKind};
use crate::schema::{
    Arena, IsDomain, IsProfile, MscFrame, PersonaSample, TaskFamily, TraitVector, MAX_REPLICATES,
};

pub const DEFAULT_DEDUP_THRESHOLD: f64 = 0.80;
pub const SHINGLE_LEN: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("{0} must not be empty")]
    EmptyInput(&'static str),
    #[error("replicates must be in 1..={MAX_REPLICATES}, got {0}")]
    Replicates(u8),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("scorer could not read sample {sample_id}: {reason}")]
    ScorerUnparsable { sample_id: String, reason: String },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{file}:{line}: {source}")]
    Json {
        file: String,
        line: usize,
        source: serde_json::Error,
    },
}

/// Deterministic `u64` derived from a label and parts.
pub fn derive_seed(label: &str, parts: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(label.as_bytes());
    for p in parts {
        h.update(p.to_le_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// Which IS profile, frame and emphasis domain config `j` is paired with.
///
/// Frames cycle fastest, then emphasis domains, then IS profiles, so any
/// `|frames| × 4` consecutive configs cover every (frame, emphasis) cell.
pub fn assignment(j: usize, n_is: usize, n_frames: usize) -> (usize, usize, IsDomain) {
    let frame = j % n_frames;
    let emphasis = IsDomain::ALL[(j / n_frames) % 4];
    let is = (j / (n_frames * 4)) % n_is;
    (is, frame, emphasis)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthesisPlan {
    pub configs: usize,
    pub replicates: u8,
    pub families: usize,
}

impl SynthesisPlan {
    pub fn per_family(&self) -> usize {
        self.configs * self.replicates as usize
    }

    pub fn total(&self) -> usize {
        self.per_family() * self.families
    }
}

#[derive(Debug, Clone)]
pub struct SynthesisConfig {
    pub model: String,
    pub replicates: u8,
    pub families: Vec<TaskFamily>,
    pub seed: u64,
    pub parallelism: usize,
    pub preset: DecodingPreset,
    /// Removal options applied to every prompt; `emphasis` is set per config.
    pub options: PromptOptions,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            model: "llama3_3_70B".into(),
            replicates: MAX_REPLICATES,
            families: TaskFamily::ALL.to_vec(),
            seed: 0,
            parallelism: 4,
            preset: DecodingPreset::CORPUS_SYNTHESIS,
            options: PromptOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisFailure {
    pub sample_id: String,
    pub error: String,
}

#[derive(Debug, Clone, Default)]
pub struct SynthesisOutput {
    pub samples: Vec<PersonaSample>,
    pub failures: Vec<SynthesisFailure>,
    pub truncated: usize,
}

struct Slot {
    id: String,
    prompt: usize,
    config: usize,
    family: TaskFamily,
    replicate: u8,
    seed: u64,
}

pub fn sample_id(family: TaskFamily, config: usize, replicate: u8) -> String {
    format!("{}-{config:05}-{replicate}", family.key())
}

/// Instantiates prompts for every (config, family) and generates
/// `replicates` completions for each. Generation errors are collected per
/// slot and never abort the run.
pub fn synthesize<G: Generator + ?Sized>(
    is_set: &[IsProfile],
    frames: &[MscFrame],
    configs: &[TraitVector],
    templates: &TemplateSet,
    cfg: &SynthesisConfig,
    generator: &G,
) -> Result<SynthesisOutput, CorpusError> {
    if is_set.is_empty() {
        return Err(CorpusError::EmptyInput("IS profile set"));
    }
    if frames.is_empty() {
        return Err(CorpusError::EmptyInput("frame set"));
    }
    if configs.is_empty() {
        return Err(CorpusError::EmptyInput("config set"));
    }
    if cfg.families.is_empty() {
        return Err(CorpusError::EmptyInput("task family list"));
    }
    if cfg.replicates == 0 || cfg.replicates > MAX_REPLICATES {
        return Err(CorpusError::Replicates(cfg.replicates));
    }

    let mut prompts = Vec::new();
    let mut slots = Vec::new();
    for &family in &cfg.families {
        for (j, t) in configs.iter().enumerate() {
            let (i, m, emphasis) = assignment(j, is_set.len(), frames.len());
            let opts = PromptOptions {
                emphasis: Some(emphasis),
                ..cfg.options.clone()
            };
            let p = build_prompt_with(templates, &is_set[i], &frames[m], t, family, &opts)?;
            prompts.push(p.full_text);
            for r in 0..cfg.replicates {
                slots.push(Slot {
                    id: sample_id(family, j, r),
                    prompt: prompts.len() - 1,
                    config: j,
                    family,
                    replicate: r,
                    seed: derive_seed("replicate", &[cfg.seed, j as u64, family as u64, r as u64]),
                });
            }
        }
    }

    let results = par_map(&slots, cfg.parallelism, |s| {
        generator.complete(&prompts[s.prompt], &cfg.preset, &cfg.model, Some(s.seed))
    });

    let mut out = SynthesisOutput::default();
    for (slot, res) in slots.iter().zip(results) {
        match res {
            Ok(rec) => {
                let (i, m, emphasis) = assignment(slot.config, is_set.len(), frames.len());
                let mut diagnostics = Vec::new();
                if rec.truncated {
                    out.truncated += 1;
                    diagnostics.push("truncated at max_new_tokens".to_string());
                }
                out.samples.push(PersonaSample {
                    id: slot.id.clone(),
                    prompt: prompts[slot.prompt].clone(),
                    completion: rec.response_text,
                    target: configs[slot.config],
                    task_family: slot.family,
                    is_id: is_set[i].id().to_string(),
                    frame_id: frames[m].id.clone(),
                    arena: frames[m].arena,
                    emphasis,
                    replicate_index: slot.replicate,
                    scorer_traits: None,
                    scorer_confidence: None,
                    diagnostics,
                });
            }
            Err(e) => out.failures.push(SynthesisFailure {
                sample_id: slot.id.clone(),
                error: e.to_string(),
            }),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerOutput {
    /// Scorer estimate after the unified percentile mapping.
    pub traits: TraitVector,
    pub confidence: f64,
    pub rationale: String,
}

/// The trait/consistency scorer `g(·)`.
pub trait Scorer: Sync {
    /// Provenance label written to the corpus manifest.
    fn version(&self) -> String;
    fn score_text(&self, sample_id: &str, text: &str) -> Result<ScorerOutput, CorpusError>;
}

pub fn score_sample<S: Scorer + ?Sized>(sample: &PersonaSample, scorer: &S) -> Result<ScorerOutput, CorpusError> {
    if sample.completion.trim().is_empty() {
        return Err(CorpusError::ScorerUnparsable {
            sample_id: sample.id.clone(),
            reason: "empty completion".into(),
        });
    }
    scorer.score_text(&sample.id, &sample.completion)
}

fn mapping_confidence(kind: MappingKind, notes: usize) -> f64 {
    match kind {
        MappingKind::UnknownPercentileClipped => 0.4,
        _ if notes > 0 => 0.7,
        _ => 1.0,
    }
}

/// Offline scorer: reads explicit numeric trait mentions from the text.
#[derive(Debug, Clone, Copy, Default)]
pub struct LexiconScorer;

impl Scorer for LexiconScorer {
    fn version(&self) -> String {
        "lexicon-v1".into()
    }

    fn score_text(&self, sample_id: &str, text: &str) -> Result<ScorerOutput, CorpusError> {
        let (traits, diag) = parse_prediction(text).map_err(|e| CorpusError::ScorerUnparsable {
            sample_id: sample_id.into(),
            reason: e.to_string(),
        })?;
        Ok(ScorerOutput {
            traits,
            confidence: mapping_confidence(diag.kind, diag.per_trait_notes.len()),
            rationale: format!("lexicon {}", diag.kind.label()),
        })
    }
}

/// Scorer backed by a judge model through the `trait_scoring` preset.
pub struct LlmJudgeScorer<'a, G: Generator + ?Sized> {
    pub generator: &'a G,
    pub templates: &'a TemplateSet,
    pub model: String,
}

pub const JUDGE_TEMPLATE: &str = "judge/trait_scoring";

impl<G: Generator + ?Sized> Scorer for LlmJudgeScorer<'_, G> {
    fn version(&self) -> String {
        format!("llm-judge:{}", self.model)
    }

    fn score_text(&self, sample_id: &str, text: &str) -> Result<ScorerOutput, CorpusError> {
        let unparsable = |reason: String| CorpusError::ScorerUnparsable {
            sample_id: sample_id.into(),
            reason,
        };
        let mut b = BTreeMap::new();
        b.insert("text", text.to_string());
        let prompt = self.templates.render(JUDGE_TEMPLATE, &b)?;
        let rec = self
            .generator
            .complete(&prompt, &DecodingPreset::TRAIT_SCORING, &self.model, None)
            .map_err(|e| unparsable(e.to_string()))?;
        let reply = rec.response_text;
        let (traits, diag) = parse_prediction(&reply).map_err(|e| unparsable(e.to_string()))?;
        let stated = confidence_regex()
            .captures(&reply)
            .and_then(|c| c[1].parse::<f64>().ok())
            .filter(|c| c.is_finite())
            .map(|c| c.clamp(0.0, 1.0));
        let confidence = stated
            .unwrap_or(0.5)
            .min(mapping_confidence(diag.kind, 0));
        Ok(ScorerOutput {
            traits,
            confidence,
            rationale: reply,
        })
    }
}

fn confidence_regex() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)confidence\s*[:=]\s*([0-9]*\.?[0-9]+)").unwrap())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlaggedSample {
    pub sample: PersonaSample,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct ScoringOutcome {
    pub kept: Vec<PersonaSample>,
    pub flagged: Vec<FlaggedSample>,
}

/// Scores every sample, attaches the scorer output, and flags samples the
/// scorer cannot read. With `max_mae = Some(x)`, samples whose scorer
/// estimate is further than `x` from the target are flagged as well.
pub fn score_all<S: Scorer + ?Sized>(
    samples: Vec<PersonaSample>,
    scorer: &S,
    max_mae: Option<f64>,
    parallelism: usize,
) -> ScoringOutcome {
    let results = par_map(&samples, parallelism, |s| score_sample(s, scorer));
    let mut out = ScoringOutcome::default();
    for (mut s, r) in samples.into_iter().zip(results) {
        match r {
            Ok(o) => {
                let dist = mae5(&o.traits, &s.target);
                s.scorer_traits = Some(o.traits);
                s.scorer_confidence = Some(o.confidence);
                match max_mae {
                    Some(limit) if dist > limit => out.flagged.push(FlaggedSample {
                        sample: s,
                        reason: format!("scorer MAE5 {dist:.2} exceeds {limit}"),
                    }),
                    _ => out.kept.push(s),
                }
            }
            Err(e) => out.flagged.push(FlaggedSample {
                sample: s,
                reason: e.to_string(),
            }),
        }
    }
    out
}

/// Similarity between two texts in `[0, 1]`.
pub trait Similarity {
    fn similarity(&self, a: &str, b: &str) -> f64;
}

/// Character n-grams of `text`. Texts shorter than `n` form one shingle;
/// the empty text has none.
pub fn shingles(text: &str, n: usize) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    if chars.is_empty() {
        return Vec::new();
    }
    if chars.len() < n {
        return vec![text.to_string()];
    }
    let mut v: Vec<String> = chars.windows(n).map(|w| w.iter().collect()).collect();
    v.sort_unstable();
    v.dedup();
    v
}

/// `|A ∩ B| / |A ∪ B|` over distinct shingles, with `J(∅, ∅) = 1`.
pub fn jaccard_from_counts(inter: usize, a: usize, b: usize) -> f64 {
    let union = a + b - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CharNgramJaccard {
    pub n: usize,
}

impl Default for CharNgramJaccard {
    fn default() -> Self {
        CharNgramJaccard { n: SHINGLE_LEN }
    }
}

impl Similarity for CharNgramJaccard {
    fn similarity(&self, a: &str, b: &str) -> f64 {
        let sa = shingles(a, self.n);
        let sb = shingles(b, self.n);
        let set: std::collections::HashSet<&String> = sa.iter().collect();
        let inter = sb.iter().filter(|s| set.contains(s)).count();
        jaccard_from_counts(inter, sa.len(), sb.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DedupDecision {
    /// Kept as the `n`-th kept text.
    Keep(usize),
    /// Removed because of kept text `matched`.
    Remove { matched: usize, similarity: f64 },
}

/// Streaming near-duplicate filter with an inverted shingle index.
///
/// Exact: every kept text sharing a shingle is scored from its overlap
/// count, and texts sharing none have similarity 0 (or 1 when both are
/// empty), which only matters for empty texts or a negative threshold.
#[derive(Debug, Clone)]
pub struct StreamingDedup {
    n: usize,
    threshold: f64,
    ids: HashMap<String, u32>,
    postings: Vec<Vec<u32>>,
    kept_sizes: Vec<usize>,
    counts: Vec<u32>,
    first_empty: Option<usize>,
}

impl StreamingDedup {
    pub fn new(threshold: f64) -> Self {
        Self::with_shingle_len(threshold, SHINGLE_LEN)
    }

    pub fn with_shingle_len(threshold: f64, n: usize) -> Self {
        StreamingDedup {
            n: n.max(1),
            threshold,
            ids: HashMap::new(),
            postings: Vec::new(),
            kept_sizes: Vec::new(),
            counts: Vec::new(),
            first_empty: None,
        }
    }

    pub fn kept(&self) -> usize {
        self.kept_sizes.len()
    }

    pub fn offer(&mut self, text: &str) -> DedupDecision {
        let sh = shingles(text, self.n);
        let kept = self.kept_sizes.len();
        self.counts.resize(kept, 0);
        let mut touched: Vec<u32> = Vec::new();
        for s in &sh {
            if let Some(&id) = self.ids.get(s) {
                for &d in &self.postings[id as usize] {
                    if self.counts[d as usize] == 0 {
                        touched.push(d);
                    }
                    self.counts[d as usize] += 1;
                }
            }
        }
        let mut best: Option<(usize, f64)> = None;
        for &d in &touched {
            let d = d as usize;
            let sim = jaccard_from_counts(self.counts[d] as usize, sh.len(), self.kept_sizes[d]);
            self.counts[d] = 0;
            if sim > self.threshold && best.is_none_or(|(b, _)| d < b) {
                best = Some((d, sim));
            }
        }
        // Kept texts sharing no shingle score 0, or 1 when both are empty.
        let untouched = |d: usize| !touched.contains(&(d as u32));
        if sh.is_empty() && 1.0 > self.threshold {
            if let Some(d) = self.first_empty.filter(|&d| untouched(d)) {
                best = best.filter(|(b, _)| *b < d).or(Some((d, 1.0)));
            }
        }
        if 0.0 > self.threshold && kept > 0 && best.is_none_or(|(b, _)| b > 0) && untouched(0) {
            let sim = if sh.is_empty() && self.kept_sizes[0] == 0 { 1.0 } else { 0.0 };
            best = Some((0, sim));
        }
        if let Some((matched, similarity)) = best {
            return DedupDecision::Remove { matched, similarity };
        }
        for s in sh.iter() {
            let next = self.ids.len() as u32;
            let id = *self.ids.entry(s.clone()).or_insert(next);
            if id as usize == self.postings.len() {
                self.postings.push(Vec::new());
            }
            self.postings[id as usize].push(kept as u32);
        }
        if sh.is_empty() {
            self.first_empty.get_or_insert(kept);
        }
        self.kept_sizes.push(sh.len());
        DedupDecision::Keep(kept)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DedupStats {
    pub threshold: f64,
    pub input: usize,
    pub kept: usize,
    pub removed: usize,
}

#[derive(Debug, Clone)]
pub struct DedupOutcome<T> {
    pub kept: Vec<T>,
    /// Removed items with the index (into `kept`) of the text that displaced them.
    pub removed: Vec<(T, usize, f64)>,
    pub stats: DedupStats,
}

/// Near-duplicate removal by character-5-gram Jaccard; earlier items win.
pub fn dedup_by<T>(items: Vec<T>, threshold: f64, text: impl Fn(&T) -> &str) -> DedupOutcome<T> {
    let input = items.len();
    let mut f = StreamingDedup::new(threshold);
    let mut kept = Vec::new();
    let mut removed = Vec::new();
    for it in items {
        match f.offer(text(&it)) {
            DedupDecision::Keep(_) => kept.push(it),
            DedupDecision::Remove { matched, similarity } => removed.push((it, matched, similarity)),
        }
    }
    let stats = DedupStats {
        threshold,
        input,
        kept: kept.len(),
        removed: removed.len(),
    };
    DedupOutcome { kept, removed, stats }
}

pub fn dedup(samples: Vec<PersonaSample>, threshold: f64) -> DedupOutcome<PersonaSample> {
    dedup_by(samples, threshold, |s| s.completion.as_str())
}

/// Same contract as [`dedup_by`] with any [`Similarity`], compared against
/// every kept item.
pub fn dedup_with<T, S: Similarity>(
    items: Vec<T>,
    threshold: f64,
    sim: &S,
    text: impl Fn(&T) -> &str,
) -> DedupOutcome<T> {
    let input = items.len();
    let mut kept: Vec<T> = Vec::new();
    let mut removed = Vec::new();
    'outer: for it in items {
        for (k, other) in kept.iter().enumerate() {
            let s = sim.similarity(text(other), text(&it));
            if s > threshold {
                removed.push((it, k, s));
                continue 'outer;
            }
        }
        kept.push(it);
    }
    let stats = DedupStats {
        threshold,
        input,
        kept: kept.len(),
        removed: removed.len(),
    };
    DedupOutcome { kept, removed, stats }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StratumCount {
    pub arena: Arena,
    pub emphasis: IsDomain,
    pub available: usize,
    pub selected: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub quota: usize,
    pub seed: u64,
    /// All 32 (arena, emphasis) strata, empty ones included.
    pub strata: Vec<StratumCount>,
}

impl CoverageReport {
    pub fn empty_strata(&self) -> impl Iterator<Item = &StratumCount> {
        self.strata.iter().filter(|s| s.available == 0)
    }
}

/// Up to `quota` samples per (arena, IS emphasis) stratum by seeded uniform
/// draw. Output keeps input order.
pub fn stratified_sample(
    samples: Vec<PersonaSample>,
    quota: usize,
    seed: u64,
) -> Result<(Vec<PersonaSample>, CoverageReport), CorpusError> {
    if quota == 0 {
        return Err(CorpusError::InvalidParameter("quota must be >= 1".into()));
    }
    let mut buckets: BTreeMap<(Arena, IsDomain), Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        buckets.entry((s.arena, s.emphasis)).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![false; samples.len()];
    let mut strata = Vec::with_capacity(32);
    for arena in Arena::ALL {
        for emphasis in IsDomain::ALL {
            let idx = buckets.get(&(arena, emphasis)).map(Vec::as_slice).unwrap_or(&[]);
            let k = quota.min(idx.len());
            if k > 0 {
                for p in sample_indices(&mut rng, idx.len(), k) {
                    chosen[idx[p]] = true;
                }
            }
            strata.push(StratumCount {
                arena,
                emphasis,
                available: idx.len(),
                selected: k,
            });
        }
    }
    let out = samples
        .into_iter()
        .zip(chosen)
        .filter_map(|(s, c)| c.then_some(s))
        .collect();
    Ok((out, CoverageReport { quota, seed, strata }))
}

/// `⌈fraction · n⌉`, robust to products that land a hair above an integer.
pub fn audit_size(n: usize, fraction: f64) -> usize {
    let x = fraction * n as f64;
    let r = x.round();
    let k = if (x - r).abs() < 1e-9 { r } else { x.ceil() };
    (k as usize).min(n)
}

/// Seeded uniform slice of `⌈fraction · n⌉` items, in input order.
pub fn audit_slice<T: Clone>(samples: &[T], fraction: f64, seed: u64) -> Result<Vec<T>, CorpusError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CorpusError::InvalidParameter(format!("audit fraction {fraction} not in (0, 1]")));
    }
    let k = audit_size(samples.len(), fraction);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample_indices(&mut rng, samples.len(), k).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| samples[i].clone()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    /// `MAE5(rejected) - MAE5(chosen)`, always > 0.
    pub margin: f64,
    pub chosen_id: String,
    pub rejected_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairConfig {
    pub margin_min: f64,
    pub confidence_min: f64,
}

impl Default for PairConfig {
    fn default() -> Self {
        PairConfig {
            margin_min: 5.0,
            confidence_min: 0.5,
        }
    }
}

/// Extra ranking distance for norm violations. Disabled unless supplied.
pub trait NormPenalty: Sync {
    fn penalty(&self, sample: &PersonaSample) -> f64;
}

pub fn build_pairs(samples: &[PersonaSample], cfg: &PairConfig) -> Vec<PreferencePair> {
    build_pairs_with(samples, cfg, None)
}

/// One best-vs-worst pair per prompt group, ranked by scorer MAE5 to the
/// target. Samples without scorer output are ignored; groups are visited in
/// order of first appearance.
pub fn build_pairs_with(
    samples: &[PersonaSample],
    cfg: &PairConfig,
    norm: Option<&dyn NormPenalty>,
) -> Vec<PreferencePair> {
    let mut order: Vec<&str> = Vec::new();
    let mut groups: HashMap<&str, Vec<(&PersonaSample, f64, f64)>> = HashMap::new();
    for s in samples {
        let (Some(p), Some(conf)) = (&s.scorer_traits, s.scorer_confidence) else {
            continue;
        };
        let d = mae5(p, &s.target) + norm.map_or(0.0, |n| n.penalty(s));
        let g = groups.entry(s.prompt.as_str()).or_insert_with(|| {
            order.push(s.prompt.as_str());
            Vec::new()
        });
        g.push((s, d, conf));
    }
    let mut pairs = Vec::new();
    for prompt in order {
        let g = &groups[prompt];
        if g.len() < 2 {
            continue;
        }
        let best = g
            .iter()
            .fold(&g[0], |a, b| if b.1 < a.1 { b } else { a });
        let worst = g
            .iter()
            .fold(&g[0], |a, b| if b.1 > a.1 { b } else { a });
        let margin = worst.1 - best.1;
        if !(margin > 0.0) || margin < cfg.margin_min {
            continue;
        }
        if best.2 < cfg.confidence_min || worst.2 < cfg.confidence_min {
            continue;
        }
        pairs.push(PreferencePair {
            prompt: prompt.to_string(),
            chosen: best.0.completion.clone(),
            rejected: worst.0.completion.clone(),
            margin,
            chosen_id: best.0.id.clone(),
            rejected_id: worst.0.id.clone(),
        });
    }
    pairs
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<String, CorpusError> {
    let mut buf = Vec::new();
    for it in items {
        serde_json::to_writer(&mut buf, it).map_err(|source| CorpusError::Json {
            file: path.display().to_string(),
            line: 0,
            source,
        })?;
        buf.push(b'\n');
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&buf)?;
    w.flush()?;
    Ok(sha256_hex(&buf))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CorpusError> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| CorpusError::Json {
            file: path.display().to_string(),
            line: i + 1,
            source,
        })?);
    }
    Ok(out)
}

pub fn write_pairs(path: &Path, pairs: &[PreferencePair]) -> Result<String, CorpusError> {
    write_jsonl(path, pairs)
}

pub fn read_pairs(path: &Path) -> Result<Vec<PreferencePair>, CorpusError> {
    read_jsonl(path)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardInfo {
    pub file: String,
    pub records: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusCounts {
    /// Slots for one task family: configs × replicates.
    pub planned_per_family: usize,
    /// Slots across all families in the run.
    pub planned: usize,
    pub generated: usize,
    pub generation_failures: usize,
    pub truncated: usize,
    pub scorer_flagged: usize,
    pub dedup: DedupStats,
    pub stratified: usize,
    pub audit: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub manifest_version: u32,
    pub model: String,
    pub scorer: String,
    pub families: Vec<TaskFamily>,
    pub replicates: u8,
    pub configs: usize,
    pub seeds: BTreeMap<String, u64>,
    pub template_checksums: BTreeMap<String, String>,
    pub counts: CorpusCounts,
    pub coverage: CoverageReport,
    pub shards: Vec<ShardInfo>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `samples` as numbered JSONL shards and returns their descriptors.
pub fn write_shards(dir: &Path, samples: &[PersonaSample], shard_size: usize) -> Result<Vec<ShardInfo>, CorpusError> {
    std::fs::create_dir_all(dir)?;
    let size = shard_size.max(1);
    let mut shards = Vec::new();
    for (k, chunk) in samples.chunks(size).enumerate() {
        let file = format!("shard-{k:04}.jsonl");
        let sha256 = write_jsonl(&dir.join(&file), chunk)?;
        shards.push(ShardInfo {
            file,
            records: chunk.len(),
            sha256,
        });
    }
    Ok(shards)
}

pub fn write_manifest(dir: &Path, manifest: &CorpusManifest) -> Result<(), CorpusError> {
    let mut s = serde_json::to_string_pretty(manifest).map_err(|source| CorpusError::Json {
        file: MANIFEST_FILE.into(),
        line: 0,
        source,
    })?;
    s.push('\n');
    std::fs::write(dir.join(MANIFEST_FILE), s)?;
    Ok(())
}

/// Reads a corpus directory, checking each shard against its manifest hash.
pub fn read_corpus(dir: &Path) -> Result<(CorpusManifest, Vec<PersonaSample>), CorpusError> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: CorpusManifest = serde_json::from_str(&text).map_err(|source| CorpusError::Json {
        file: MANIFEST_FILE.into(),
        line: 0,
        source,
    })?;
    let mut samples = Vec::new();
    for shard in &manifest.shards {
        let path = dir.join(&shard.file);
        let bytes = std::fs::read(&path)?;
        if sha256_hex(&bytes) != shard.sha256 {
            return Err(CorpusError::InvalidParameter(format!("{} does not match its manifest hash", shard.file)));
        }
        samples.extend(read_jsonl::<PersonaSample>(&path)?);
    }
    Ok((manifest, samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::validate_trait_vector;
    use proptest::prelude::*;

    fn tv(v: f64) -> TraitVector {
        validate_trait_vector([v; 5]).unwrap()
    }

    fn sample(id: &str, prompt: &str, completion: &str, arena: Arena, emphasis: IsDomain) -> PersonaSample {
        PersonaSample {
            id: id.into(),
            prompt: prompt.into(),
            completion: completion.into(),
            target: tv(50.0),
            task_family: TaskFamily::SelfDescription,
            is_id: "is".into(),
            frame_id: "f".into(),
            arena,
            emphasis,
            replicate_index: 0,
            scorer_traits: None,
            scorer_confidence: None,
            diagnostics: vec![],
        }
    }

    fn scored(id: &str, prompt: &str, score: f64, conf: f64) -> PersonaSample {
        let mut s = sample(id, prompt, &format!("text {id}"), Arena::Working, IsDomain::Edu);
        s.scorer_traits = Some(tv(score));
        s.scorer_confidence = Some(conf);
        s
    }

    #[test]
    fn plan_counts() {
        let p = SynthesisPlan { configs: 7776, replicates: 5, families: 1 };
        assert_eq!(p.total(), 38_880);
        let p = SynthesisPlan { configs: 1, replicates: 1, families: 1 };
        assert_eq!(p.total(), 1);
    }

    #[test]
    fn assignment_covers_all_cells() {
        let mut seen = std::collections::BTreeSet::new();
        for j in 0..16 * 4 {
            let (_, f, e) = assignment(j, 3, 16);
            seen.insert((f, e));
        }
        assert_eq!(seen.len(), 64);
    }

    #[test]
    fn dedup_trivial_cases() {
        let out = dedup_by(vec!["same text here", "same text here", "zzzzzzzzzz"], 0.8, |s| s);
        assert_eq!(out.kept, vec!["same text here", "zzzzzzzzzz"]);
        assert_eq!(out.removed[0].1, 0);
        assert_eq!(out.removed[0].2, 1.0);
        let out = dedup_by(vec!["abcdefgh", "stuvwxyz"], 0.8, |s| s);
        assert_eq!(out.kept.len(), 2);
        let out = dedup_by(vec!["", "", "ab", "ab"], 0.8, |s| s);
        assert_eq!(out.kept, vec!["", "ab"]);
    }

    #[test]
    fn shingle_edge_cases() {
        assert!(shingles("", 5).is_empty());
        assert_eq!(shingles("abc", 5), vec!["abc"]);
        assert_eq!(shingles("aaaaaaa", 5), vec!["aaaaa"]);
        let j = CharNgramJaccard::default();
        assert_eq!(j.similarity("", ""), 1.0);
        assert_eq!(j.similarity("", "abcdef"), 0.0);
    }

    #[test]
    fn stratified_quota_and_empty_strata() {
        let mut v = Vec::new();
        for (k, a) in Arena::ALL.iter().enumerate().take(3) {
            for i in 0..(k + 1) * 3 {
                v.push(sample(&format!("{k}-{i}"), "p", "c", *a, IsDomain::Life));
            }
        }
        let (out, rep) = stratified_sample(v.clone(), 4, 1).unwrap();
        assert_eq!(out.len(), 3 + 4 + 4);
        assert_eq!(rep.strata.len(), 32);
        assert_eq!(rep.empty_strata().count(), 29);
        let (again, _) = stratified_sample(v.clone(), 4, 1).unwrap();
        assert_eq!(out, again);
        assert!(stratified_sample(v, 0, 1).is_err());
    }

    #[test]
    fn audit_sizes() {
        assert_eq!(audit_size(38_880, 0.01), 389);
        assert_eq!(audit_size(100, 0.07), 7);
        assert_eq!(audit_size(10, 1.0), 10);
        let v: Vec<usize> = (0..50).collect();
        assert_eq!(audit_slice(&v, 1.0, 3).unwrap(), v);
        assert_eq!(audit_slice(&v, 0.1, 3).unwrap(), audit_slice(&v, 0.1, 3).unwrap());
        assert!(audit_slice(&v, 0.0, 3).is_err());
        assert!(audit_slice(&v, 1.5, 3).is_err());
    }

    #[test]
    fn pairs_best_vs_worst() {
        let g: Vec<_> = [50.0, 40.0, 70.0, 55.0, 45.0]
            .iter()
            .enumerate()
            .map(|(i, s)| scored(&i.to_string(), "p", *s, 0.9))
            .collect();
        let pairs = build_pairs(&g, &PairConfig::default());
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].chosen_id, "0");
        assert_eq!(pairs[0].rejected_id, "2");
        assert_eq!(pairs[0].margin, 20.0);
    }

    #[test]
    fn pairs_ties_and_confidence() {
        let tie = vec![scored("a", "p", 40.0, 0.9), scored("b", "p", 60.0, 0.9)];
        assert!(build_pairs(&tie, &PairConfig { margin_min: 0.0, ..Default::default() }).is_empty());
        let low = vec![scored("a", "p", 50.0, 0.9), scored("b", "p", 80.0, 0.3)];
        assert!(build_pairs(&low, &PairConfig::default()).is_empty());
        let small = vec![scored("a", "p", 50.0, 0.9), scored("b", "p", 53.0, 0.9)];
        assert!(build_pairs(&small, &PairConfig::default()).is_empty());
        let single = vec![scored("a", "p", 50.0, 0.9)];
        assert!(build_pairs(&single, &PairConfig::default()).is_empty());
    }

    struct PenalizeId(&'static str);
    impl NormPenalty for PenalizeId {
        fn penalty(&self, s: &PersonaSample) -> f64 {
            if s.id == self.0 { 100.0 } else { 0.0 }
        }
    }

    #[test]
    fn norm_penalty_hook_changes_ranking() {
        let g = vec![scored("a", "p", 50.0, 0.9), scored("b", "p", 60.0, 0.9), scored("c", "p", 52.0, 0.9)];
        let p = build_pairs_with(&g, &PairConfig::default(), Some(&PenalizeId("a")));
        assert_eq!((p[0].chosen_id.as_str(), p[0].rejected_id.as_str()), ("c", "a"));
    }

    #[test]
    fn lexicon_scorer_paths() {
        let s = sample("x", "p", "", Arena::Working, IsDomain::Edu);
        assert!(matches!(score_sample(&s, &LexiconScorer), Err(CorpusError::ScorerUnparsable { .. })));
        let s = sample("x", "p", "O: 10, C: 20, E: 30, A: 40, N: 50", Arena::Working, IsDomain::Edu);
        let o = score_sample(&s, &LexiconScorer).unwrap();
        assert_eq!(o.traits.as_array(), &[10.0, 20.0, 30.0, 40.0, 50.0]);
        assert_eq!(o.confidence, 1.0);
        let s = sample("x", "p", "O: 10, C: 20, E: 30, A: 40", Arena::Working, IsDomain::Edu);
        assert!(score_sample(&s, &LexiconScorer).is_err());
    }

    #[test]
    fn max_mae_filter() {
        let mut s = sample("x", "p", "O: 90, C: 90, E: 90, A: 90, N: 90", Arena::Working, IsDomain::Edu);
        s.target = tv(50.0);
        let out = score_all(vec![s.clone()], &LexiconScorer, Some(10.0), 2);
        assert_eq!(out.flagged.len(), 1);
        let out = score_all(vec![s], &LexiconScorer, None, 2);
        assert_eq!(out.kept.len(), 1);
        assert_eq!(out.kept[0].scorer_confidence, Some(1.0));
    }

    fn brute(texts: &[String], th: f64) -> Vec<usize> {
        let j = CharNgramJaccard::default();
        let mut kept: Vec<usize> = Vec::new();
        for (i, t) in texts.iter().enumerate() {
            if kept.iter().all(|&k| j.similarity(&texts[k], t) <= th) {
                kept.push(i);
            }
        }
        kept
    }

    proptest! {
        #[test]
        fn streaming_matches_bruteforce(
            texts in proptest::collection::vec("[ab ]{0,14}", 0..40),
            th in prop_oneof![Just(0.8), -0.5f64..1.2],
        ) {
            let items: Vec<(usize, &str)> = texts.iter().map(|t| t.as_str()).enumerate().collect();
            let out = dedup_by(items, th, |t| t.1);
            let kept: Vec<usize> = out.kept.iter().map(|t| t.0).collect();
            prop_assert_eq!(kept, brute(&texts, th));
            let again = dedup_by(out.kept.clone(), th, |t| t.1);
            prop_assert!(again.removed.is_empty());
        }

        #[test]
        fn stratified_never_exceeds_quota(
            cells in proptest::collection::vec((0usize..8, 0usize..4), 0..120),
            quota in 1usize..6,
            seed in any::<u64>(),
        ) {
            let v: Vec<_> = cells.iter().enumerate()
                .map(|(i, (a, d))| sample(&i.to_string(), "p", "c", Arena::ALL[*a], IsDomain::ALL[*d]))
                .collect();
            let (out, rep) = stratified_sample(v, quota, seed).unwrap();
            for s in &rep.strata {
                prop_assert!(s.selected <= quota);
                prop_assert_eq!(s.selected, quota.min(s.available));
            }
            prop_assert_eq!(out.len(), rep.strata.iter().map(|s| s.selected).sum::<usize>());
        }

        #[test]
        fn pairs_have_strict_margin(
            scores in proptest::collection::vec((0.0f64..=100.0, 0.0f64..=1.0), 0..30),
            groups in 1usize..4,
            margin_min in 0.0f64..20.0,
        ) {
            let v: Vec<_> = scores.iter().enumerate()
                .map(|(i, (s, c))| scored(&i.to_string(), &format!("p{}", i % groups), *s, *c))
                .collect();
            let cfg = PairConfig { margin_min, confidence_min: 0.5 };
            for p in build_pairs(&v, &cfg) {
                prop_assert!(p.margin > 0.0 && p.margin >= margin_min);
                let d = |id: &str| {
                    let s = v.iter().find(|s| s.id == id).unwrap();
                    mae5(s.scorer_traits.as_ref().unwrap(), &s.target)
                };
                prop_assert!(d(&p.chosen_id) < d(&p.rejected_id));
            }
        }
    }
}
