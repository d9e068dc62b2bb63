//! Table reports, fixture checks and the single-factor ablation protocol.
//!
//! An ablation removes exactly one IS domain or one MSC arena and reruns the
//! evaluation path; [`AblationSpec::Full`] goes through the same code with
//! nothing removed, so its output is identical to [`run_evaluation`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::corpus::{assignment, Scorer};
use crate::generation::{generate_batch, BatchItem, DecodingPreset, Generator};
use crate::metrics::{
    aggregate_runs, delta_profile_acc, fmt2, DeltaConvention, MetricAccumulator, MetricReport, MetricsError,
    RunSummary,
};
use crate::prompting::{build_prompt_with, sha256_hex, PromptError, PromptOptions, TemplateSet};
use crate::schema::{subset_configs, Arena, IsDomain, IsProfile, MscFrame, SchemaError, TaskFamily, TraitVector};

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("unknown ablation component `{0}`")]
    UnknownComponent(String),
    #[error("required row missing: {0}")]
    MissingRow(String),
    #[error("fixture checksum mismatch (expected {expected}, got {actual})")]
    FixtureChecksum { expected: String, actual: String },
    #[error("no frames left after removing arena {0}")]
    EmptyFramePool(Arena),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Schema(#[from] SchemaError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    Is,
    Msc,
}

impl Block {
    pub fn label(self) -> &'static str {
        match self {
            Block::Is => "IS",
            Block::Msc => "MSC",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Domain(IsDomain),
    Arena(Arena),
}

/// Zero or one component removed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationSpec {
    Full,
    Remove(Component),
}

pub const FULL_LABEL: &str = "Full (no removal)";

impl AblationSpec {
    /// Accepts `full`, an IS domain key or title, or an arena tag or title.
    pub fn parse(s: &str) -> Result<Self, ReportError> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("full") || t.eq_ignore_ascii_case(FULL_LABEL) {
            return Ok(AblationSpec::Full);
        }
        if let Some(d) = IsDomain::parse(t) {
            return Ok(AblationSpec::Remove(Component::Domain(d)));
        }
        if let Some(a) = Arena::parse(t) {
            return Ok(AblationSpec::Remove(Component::Arena(a)));
        }
        Err(ReportError::UnknownComponent(s.to_string()))
    }

    /// Full plus every single-component removal, in table order.
    pub fn all() -> Vec<AblationSpec> {
        let mut v = vec![AblationSpec::Full];
        v.extend(IsDomain::ALL.map(|d| AblationSpec::Remove(Component::Domain(d))));
        v.extend(Arena::ALL.map(|a| AblationSpec::Remove(Component::Arena(a))));
        v
    }

    pub fn block(&self) -> Option<Block> {
        match self {
            AblationSpec::Full => None,
            AblationSpec::Remove(Component::Domain(_)) => Some(Block::Is),
            AblationSpec::Remove(Component::Arena(_)) => Some(Block::Msc),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            AblationSpec::Full => FULL_LABEL,
            AblationSpec::Remove(Component::Domain(d)) => d.title(),
            AblationSpec::Remove(Component::Arena(a)) => a.title(),
        }
    }

    pub fn prompt_options(&self, tag_only: bool) -> (PromptOptions, Option<Arena>) {
        let mut o = PromptOptions::default();
        let mut drop_frames = None;
        match self {
            AblationSpec::Full => {}
            AblationSpec::Remove(Component::Domain(d)) => {
                o.omit_domains.insert(*d);
            }
            AblationSpec::Remove(Component::Arena(a)) => {
                o.omit_arenas.insert(*a);
                if !tag_only {
                    drop_frames = Some(*a);
                }
            }
        }
        (o, drop_frames)
    }
}

impl fmt::Display for AblationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCompareRow {
    pub group: String,
    pub model: String,
    pub rmse5: f64,
    pub mae5: f64,
    pub profile_acc: f64,
    pub cosine: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftDpoRow {
    pub base: String,
    pub variant: String,
    pub profile_acc: f64,
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub block: String,
    pub removal: String,
    pub profile_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockStatsFixture {
    pub mean: f64,
    pub median: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedGain {
    pub model: String,
    pub with: f64,
    pub without: f64,
    pub reported: f64,
}

/// Published table values used as arithmetic ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableFixture {
    pub fixture_version: u32,
    pub model_compare: Vec<ModelCompareRow>,
    pub sft_dpo: Vec<SftDpoRow>,
    pub ablation: Vec<AblationRow>,
    /// Drops quoted in the ablation discussion, keyed by block then removal.
    pub reported_drops: BTreeMap<String, BTreeMap<String, f64>>,
    /// Approximate block mean and median drops quoted in the text.
    pub reported_block_stats: BTreeMap<String, BlockStatsFixture>,
    pub paired_gains: Vec<PairedGain>,
}

const BUNDLED_TABLES: &str = include_str!("../assets/fixtures/tables.json");
pub const TABLES_SHA256: &str = "ee6a46458b5309024913a3b338451cf5050c99fa998f066d508e04e56a0fb73d";

/// Slack for `MAE5 + ProfileAcc = 100` on two-decimal table values.
pub const IDENTITY_SLACK: f64 = 0.015;
/// Slack for quoted drops and paired gains.
pub const DROP_SLACK: f64 = 0.01;
/// Slack for the rounded block averages quoted in prose ("about 8.9").
pub const BLOCK_STAT_SLACK: f64 = 0.05;

impl TableFixture {
    pub fn bundled() -> Self {
        Self::from_json_checked(BUNDLED_TABLES, TABLES_SHA256).expect("bundled fixture is intact")
    }

    pub fn from_json_checked(text: &str, expected_sha256: &str) -> Result<Self, ReportError> {
        let actual = sha256_hex(text.as_bytes());
        if actual != expected_sha256 {
            return Err(ReportError::FixtureChecksum {
                expected: expected_sha256.to_string(),
                actual,
            });
        }
        Ok(serde_json::from_str(text)?)
    }

    pub fn model_compare_rows(&self) -> Vec<TableRow> {
        self.model_compare
            .iter()
            .map(|r| TableRow {
                group: r.group.clone(),
                label: r.model.clone(),
                rmse5: Some(r.rmse5),
                mae5: Some(r.mae5),
                profile_acc: r.profile_acc,
                cosine: Some(r.cosine),
            })
            .collect()
    }

    pub fn sft_dpo_rows(&self) -> Vec<TableRow> {
        self.sft_dpo
            .iter()
            .map(|r| TableRow::acc_only(&r.base, &r.variant, r.profile_acc))
            .collect()
    }

    pub fn ablation_rows(&self) -> Vec<TableRow> {
        self.ablation
            .iter()
            .map(|r| TableRow::acc_only(&r.block, &r.removal, r.profile_acc))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub table: String,
    pub row: String,
    pub detail: String,
}

fn cents(x: f64) -> i64 {
    (x * 100.0).round() as i64
}

/// Checks every identity and derived column the fixture can support and
/// returns all violations found.
pub fn verify_fixtures(f: &TableFixture) -> Vec<Violation> {
    let mut v = Vec::new();
    let mut push = |table: &str, row: &str, detail: String| {
        v.push(Violation {
            table: table.into(),
            row: row.into(),
            detail,
        })
    };

    for r in &f.model_compare {
        let gap = r.mae5 + r.profile_acc - 100.0;
        if gap.abs() > IDENTITY_SLACK {
            push("model_compare", &r.model, format!("MAE5 + ProfileAcc - 100 = {gap:.4}"));
        }
        if r.rmse5 + IDENTITY_SLACK < r.mae5 {
            push("model_compare", &r.model, format!("RMSE5 {} < MAE5 {}", r.rmse5, r.mae5));
        }
        if !(-1.0..=1.0).contains(&r.cosine) {
            push("model_compare", &r.model, format!("cosine {} outside [-1, 1]", r.cosine));
        }
    }

    let mut baselines: BTreeMap<&str, f64> = BTreeMap::new();
    for r in &f.sft_dpo {
        if r.variant.eq_ignore_ascii_case("baseline") {
            baselines.insert(&r.base, r.profile_acc);
        }
    }
    for r in &f.sft_dpo {
        let row = format!("{}/{}", r.base, r.variant);
        let Some(&base) = baselines.get(r.base.as_str()) else {
            push("sft_dpo", &row, "no Baseline row for this base model".into());
            continue;
        };
        let computed = delta_profile_acc(r.profile_acc, base, DeltaConvention::ImprovementVsBaseline);
        match r.delta {
            None if r.variant.eq_ignore_ascii_case("baseline") => {}
            None => push("sft_dpo", &row, "Δ missing".into()),
            Some(d) if cents(d) != cents(computed) => {
                push("sft_dpo", &row, format!("Δ {d} but ProfileAcc gives {computed:.4}"))
            }
            Some(_) => {}
        }
    }

    let full = f
        .ablation
        .iter()
        .find(|r| AblationSpec::parse(&r.removal).ok() == Some(AblationSpec::Full));
    match full {
        None => push("ablation", FULL_LABEL, "Full row missing".into()),
        Some(full) => {
            let mut drops: BTreeMap<Block, Vec<f64>> = BTreeMap::new();
            for r in &f.ablation {
                let spec = match AblationSpec::parse(&r.removal) {
                    Ok(s) => s,
                    Err(e) => {
                        push("ablation", &r.removal, e.to_string());
                        continue;
                    }
                };
                let Some(block) = spec.block() else { continue };
                let drop = delta_profile_acc(r.profile_acc, full.profile_acc, DeltaConvention::DropVsFull);
                drops.entry(block).or_default().push(drop);
                let key = block.label().to_ascii_lowercase();
                match f.reported_drops.get(&key).and_then(|m| {
                    m.iter()
                        .find(|(name, _)| AblationSpec::parse(name).ok() == Some(spec))
                        .map(|(_, d)| *d)
                }) {
                    Some(reported) if (reported - drop).abs() > DROP_SLACK => push(
                        "ablation",
                        &r.removal,
                        format!("drop {drop:.4} but {reported} quoted"),
                    ),
                    _ => {}
                }
            }
            for (key, m) in &f.reported_drops {
                for name in m.keys() {
                    let found = f
                        .ablation
                        .iter()
                        .any(|r| AblationSpec::parse(&r.removal).ok() == AblationSpec::parse(name).ok());
                    if !found {
                        push("ablation", name, format!("quoted {key} drop has no table row"));
                    }
                }
            }
            for (key, stats) in &f.reported_block_stats {
                let block = if key == "is" { Block::Is } else { Block::Msc };
                if let Some(d) = drops.get(&block) {
                    let s = block_stats(d);
                    if (s.mean - stats.mean).abs() > BLOCK_STAT_SLACK
                        || (s.median - stats.median).abs() > BLOCK_STAT_SLACK
                    {
                        push(
                            "ablation",
                            block.label(),
                            format!(
                                "block mean/median {:.4}/{:.4} vs quoted {}/{}",
                                s.mean, s.median, stats.mean, stats.median
                            ),
                        );
                    }
                }
            }
        }
    }

    for g in &f.paired_gains {
        let computed = delta_profile_acc(g.with, g.without, DeltaConvention::ImprovementVsBaseline);
        if (computed - g.reported).abs() > DROP_SLACK {
            push("paired_gains", &g.model, format!("gain {computed:.4} but {} quoted", g.reported));
        }
    }
    v
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockStats {
    pub mean: f64,
    pub median: f64,
    pub n: usize,
}

pub fn block_stats(values: &[f64]) -> BlockStats {
    let n = values.len();
    if n == 0 {
        return BlockStats {
            mean: f64::NAN,
            median: f64::NAN,
            n,
        };
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    };
    BlockStats {
        mean: s.iter().sum::<f64>() / n as f64,
        median,
        n,
    }
}

/// One labeled result row; metrics a table does not show may be absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub group: String,
    pub label: String,
    pub rmse5: Option<f64>,
    pub mae5: Option<f64>,
    pub profile_acc: f64,
    pub cosine: Option<f64>,
}

impl TableRow {
    pub fn acc_only(group: &str, label: &str, profile_acc: f64) -> Self {
        TableRow {
            group: group.into(),
            label: label.into(),
            rmse5: None,
            mae5: None,
            profile_acc,
            cosine: None,
        }
    }

    pub fn from_report(group: &str, label: &str, r: &MetricReport) -> Self {
        TableRow {
            group: group.into(),
            label: label.into(),
            rmse5: Some(r.rmse5),
            mae5: Some(r.mae5),
            profile_acc: r.profile_acc,
            cosine: r.cosine,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableShape {
    ModelCompare,
    SftDpo,
    Ablation,
}

impl TableShape {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "model_compare" => Some(TableShape::ModelCompare),
            "sft_dpo" => Some(TableShape::SftDpo),
            "ablation" => Some(TableShape::Ablation),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmittedTable {
    pub shape: TableShape,
    pub header: Vec<String>,
    pub cells: Vec<Vec<String>>,
    /// Unrounded values, one JSON object per row.
    pub records: Vec<serde_json::Value>,
    pub block_stats: BTreeMap<String, BlockStats>,
}

const DASH: &str = "--";

fn opt2(x: Option<f64>) -> String {
    x.map(fmt2).unwrap_or_else(|| DASH.to_string())
}

impl EmittedTable {
    pub fn to_text(&self) -> String {
        let ncol = self.header.len();
        let mut width = vec![0; ncol];
        for row in std::iter::once(&self.header).chain(&self.cells) {
            for (w, c) in width.iter_mut().zip(row) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |row: &[String]| {
            row.iter()
                .enumerate()
                .map(|(i, c)| {
                    let pad = width[i] - c.chars().count();
                    // labels left, numbers right
                    if i < 2 {
                        format!("{c}{}", " ".repeat(pad))
                    } else {
                        format!("{}{c}", " ".repeat(pad))
                    }
                })
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let mut out = line(&self.header);
        out.push('\n');
        out.push_str(&"-".repeat(width.iter().sum::<usize>() + 2 * (ncol - 1)));
        out.push('\n');
        for row in &self.cells {
            out.push_str(&line(row));
            out.push('\n');
        }
        for (block, s) in &self.block_stats {
            out.push_str(&format!(
                "{block} block: mean drop {}, median drop {} (n={})\n",
                fmt2(s.mean),
                fmt2(s.median),
                s.n
            ));
        }
        out
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&r.to_string());
            out.push('\n');
        }
        if !self.block_stats.is_empty() {
            out.push_str(&json!({ "block_stats": self.block_stats }).to_string());
            out.push('\n');
        }
        out
    }
}

/// Formats rows in one of the three table shapes, with fixed column order
/// and two-decimal display.
pub fn emit_table(rows: &[TableRow], shape: TableShape) -> Result<EmittedTable, ReportError> {
    if rows.is_empty() {
        return Err(ReportError::MissingRow("table has no rows".into()));
    }
    let mut t = EmittedTable {
        shape,
        header: Vec::new(),
        cells: Vec::new(),
        records: Vec::new(),
        block_stats: BTreeMap::new(),
    };
    match shape {
        TableShape::ModelCompare => {
            t.header = ["Group", "Model", "RMSE5", "MAE5", "ProfileAcc", "cos(p,t)"].map(String::from).to_vec();
            for r in rows {
                t.cells.push(vec![
                    r.group.clone(),
                    r.label.clone(),
                    opt2(r.rmse5),
                    opt2(r.mae5),
                    fmt2(r.profile_acc),
                    opt2(r.cosine),
                ]);
                t.records.push(json!({
                    "group": r.group, "model": r.label, "rmse5": r.rmse5, "mae5": r.mae5,
                    "profile_acc": r.profile_acc, "cosine": r.cosine,
                }));
            }
        }
        TableShape::SftDpo => {
            t.header = ["Base Model", "Variant", "ProfileAcc", "Δ"].map(String::from).to_vec();
            let mut groups: Vec<&str> = Vec::new();
            for r in rows {
                if !groups.contains(&r.group.as_str()) {
                    groups.push(&r.group);
                }
            }
            for g in groups {
                let base = rows
                    .iter()
                    .find(|r| r.group == g && r.label.eq_ignore_ascii_case("baseline"))
                    .ok_or_else(|| ReportError::MissingRow(format!("{g}/Baseline")))?;
                for r in rows.iter().filter(|r| r.group == g) {
                    let delta = (!std::ptr::eq(r, base)).then(|| {
                        delta_profile_acc(r.profile_acc, base.profile_acc, DeltaConvention::ImprovementVsBaseline)
                    });
                    t.cells.push(vec![r.group.clone(), r.label.clone(), fmt2(r.profile_acc), opt2(delta)]);
                    t.records.push(json!({
                        "base": r.group, "variant": r.label, "profile_acc": r.profile_acc,
                        "delta": delta, "convention": "improvement_vs_baseline",
                    }));
                }
            }
        }
        TableShape::Ablation => {
            t.header = ["Block", "Removal", "ProfileAcc", "Δ"].map(String::from).to_vec();
            let specs = rows
                .iter()
                .map(|r| AblationSpec::parse(&r.label))
                .collect::<Result<Vec<_>, _>>()?;
            let full = rows
                .iter()
                .zip(&specs)
                .find(|(_, s)| **s == AblationSpec::Full)
                .map(|(r, _)| r.profile_acc)
                .ok_or_else(|| ReportError::MissingRow(FULL_LABEL.into()))?;
            let mut drops: BTreeMap<Block, Vec<f64>> = BTreeMap::new();
            for (r, spec) in rows.iter().zip(&specs) {
                let delta = spec.block().map(|b| {
                    let d = delta_profile_acc(r.profile_acc, full, DeltaConvention::DropVsFull);
                    drops.entry(b).or_default().push(d);
                    d
                });
                let block = spec.block().map(Block::label).unwrap_or("IS+MSC");
                t.cells.push(vec![block.to_string(), spec.label().to_string(), fmt2(r.profile_acc), opt2(delta)]);
                t.records.push(json!({
                    "block": block, "removal": spec.label(), "profile_acc": r.profile_acc,
                    "delta": delta, "convention": "drop_vs_full",
                }));
            }
            t.block_stats = drops
                .into_iter()
                .map(|(b, d)| (b.label().to_string(), block_stats(&d)))
                .collect();
        }
    }
    Ok(t)
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub model: String,
    pub seed: u64,
    pub n_configs: usize,
    pub parallelism: usize,
    pub preset: DecodingPreset,
    pub family: TaskFamily,
    /// Remove only the arena tag, keeping its frames in the pool.
    pub tag_only_arena_removal: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            model: "llama3_2_3B".into(),
            seed: 0,
            n_configs: 1000,
            parallelism: 4,
            preset: DecodingPreset::TRAIT_SCORING,
            family: TaskFamily::SelfDescription,
            tag_only_arena_removal: false,
        }
    }
}

/// Seeds of the three stability subsets.
pub const STABILITY_SEEDS: [u64; 3] = [1_001, 2_002, 3_003];

#[derive(Debug, Clone, Copy)]
pub struct EvalInputs<'a> {
    pub is_set: &'a [IsProfile],
    pub frames: &'a [MscFrame],
    pub grid: &'a [TraitVector],
    pub templates: &'a TemplateSet,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRun {
    pub spec: AblationSpec,
    pub seed: u64,
    pub prompts: Vec<String>,
    pub predictions: Vec<Option<TraitVector>>,
    pub generation_failures: usize,
    pub report: MetricReport,
}

impl EvalRun {
    pub fn prompts_digest(&self) -> String {
        sha256_hex(self.prompts.join("\u{1e}").as_bytes())
    }
}

fn evaluate_with<G: Generator + ?Sized, S: Scorer + ?Sized>(
    spec: AblationSpec,
    inputs: &EvalInputs,
    cfg: &EvalConfig,
    generator: &G,
    scorer: &S,
) -> Result<EvalRun, ReportError> {
    let (base_opts, drop_frames) = spec.prompt_options(cfg.tag_only_arena_removal);
    let pool: Vec<&MscFrame> = inputs
        .frames
        .iter()
        .filter(|f| Some(f.arena) != drop_frames)
        .collect();
    if pool.is_empty() {
        return Err(ReportError::EmptyFramePool(drop_frames.unwrap_or(Arena::Working)));
    }
    if inputs.is_set.is_empty() {
        return Err(ReportError::MissingRow("IS profile set is empty".into()));
    }
    let k = cfg.n_configs.min(inputs.grid.len());
    let configs = subset_configs(inputs.grid, k, cfg.seed)?;
    let mut prompts = Vec::with_capacity(k);
    for (j, t) in configs.iter().enumerate() {
        let (i, m, emphasis) = assignment(j, inputs.is_set.len(), pool.len());
        let opts = PromptOptions {
            emphasis: Some(emphasis),
            ..base_opts.clone()
        };
        let p = build_prompt_with(inputs.templates, &inputs.is_set[i], pool[m], t, cfg.family, &opts)?;
        prompts.push(p.full_text);
    }
    let items: Vec<BatchItem> = prompts
        .iter()
        .map(|p| BatchItem {
            prompt: p.clone(),
            seed: None,
        })
        .collect();
    let records = generate_batch(generator, &items, &cfg.preset, &cfg.model, cfg.parallelism);
    let mut acc = MetricAccumulator::new();
    let mut predictions = Vec::with_capacity(k);
    let mut failures = 0;
    for (j, rec) in records.into_iter().enumerate() {
        let pred = match rec {
            Ok(r) if !r.response_text.trim().is_empty() => {
                scorer.score_text(&format!("eval-{j}"), &r.response_text).ok().map(|o| o.traits)
            }
            Ok(_) => None,
            Err(_) => {
                failures += 1;
                None
            }
        };
        acc.push(pred.as_ref(), &configs[j]);
        predictions.push(pred);
    }
    Ok(EvalRun {
        spec,
        seed: cfg.seed,
        prompts,
        predictions,
        generation_failures: failures,
        report: acc.finish()?,
    })
}

/// The standard evaluation path with nothing removed.
pub fn run_evaluation<G: Generator + ?Sized, S: Scorer + ?Sized>(
    inputs: &EvalInputs,
    cfg: &EvalConfig,
    generator: &G,
    scorer: &S,
) -> Result<EvalRun, ReportError> {
    evaluate_with(AblationSpec::Full, inputs, cfg, generator, scorer)
}

pub fn run_ablation<G: Generator + ?Sized, S: Scorer + ?Sized>(
    spec: AblationSpec,
    inputs: &EvalInputs,
    cfg: &EvalConfig,
    generator: &G,
    scorer: &S,
) -> Result<EvalRun, ReportError> {
    evaluate_with(spec, inputs, cfg, generator, scorer)
}

/// Runs one spec on several independently drawn config subsets.
pub fn run_stability<G: Generator + ?Sized, S: Scorer + ?Sized>(
    spec: AblationSpec,
    inputs: &EvalInputs,
    cfg: &EvalConfig,
    seeds: &[u64],
    generator: &G,
    scorer: &S,
) -> Result<(Vec<EvalRun>, RunSummary), ReportError> {
    let runs = seeds
        .iter()
        .map(|&seed| {
            let c = EvalConfig { seed, ..cfg.clone() };
            evaluate_with(spec, inputs, &c, generator, scorer)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let reports: Vec<MetricReport> = runs.iter().map(|r| r.report.clone()).collect();
    let summary = aggregate_runs(&reports)?;
    Ok((runs, summary))
}

/// Full plus all twelve single removals, as ablation-shaped rows.
pub fn run_ablation_sweep<G: Generator + ?Sized, S: Scorer + ?Sized>(
    inputs: &EvalInputs,
    cfg: &EvalConfig,
    generator: &G,
    scorer: &S,
) -> Result<Vec<(EvalRun, TableRow)>, ReportError> {
    AblationSpec::all()
        .into_iter()
        .map(|spec| {
            let run = evaluate_with(spec, inputs, cfg, generator, scorer)?;
            let group = spec.block().map(Block::label).unwrap_or("IS+MSC");
            let row = TableRow::from_report(group, spec.label(), &run.report);
            Ok((run, row))
        })
        .collect()
}

/// Removal names accepted by [`AblationSpec::parse`], for help text.
pub fn component_names() -> BTreeSet<String> {
    let mut s: BTreeSet<String> = IsDomain::ALL.iter().map(|d| d.key().to_string()).collect();
    s.extend(Arena::ALL.iter().map(|a| a.tag().to_string()));
    s.insert("full".into());
    s
}
