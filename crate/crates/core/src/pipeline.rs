//! End-to-end run: synthesize, score, filter, write the corpus and pairs,
//! then evaluate and write reports. Every output file is a function of the
//! inputs and seeds; nothing time-dependent is written.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::corpus::{
    audit_slice, build_pairs, dedup, score_all, stratified_sample, synthesize, write_jsonl, write_manifest,
    write_pairs, write_shards, CorpusCounts, CorpusError, CorpusManifest, PairConfig, Scorer, SynthesisConfig,
    SynthesisPlan, DEFAULT_DEDUP_THRESHOLD,
};
use crate::generation::Generator;
use crate::prompting::TemplateSet;
use crate::reporting::{
    emit_table, run_ablation_sweep, run_evaluation, EvalConfig, EvalInputs, ReportError, TableRow, TableShape,
};
use crate::schema::{enumerate_grid, subset_configs, IsProfile, MscFrame, SchemaError, TraitVector};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub synthesis: SynthesisConfig,
    /// Size of the config subset drawn from the grid; `None` uses all 7,776.
    pub n_configs: Option<usize>,
    pub config_seed: u64,
    pub max_mae: Option<f64>,
    pub dedup_threshold: f64,
    pub quota_per_stratum: usize,
    pub stratify_seed: u64,
    pub audit_fraction: f64,
    pub audit_seed: u64,
    pub pairs: PairConfig,
    pub shard_size: usize,
    pub eval: EvalConfig,
    pub ablation_sweep: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            synthesis: SynthesisConfig::default(),
            n_configs: None,
            config_seed: 0,
            max_mae: None,
            dedup_threshold: DEFAULT_DEDUP_THRESHOLD,
            quota_per_stratum: 1_000,
            stratify_seed: 0,
            audit_fraction: 0.01,
            audit_seed: 0,
            pairs: PairConfig::default(),
            shard_size: 10_000,
            eval: EvalConfig::default(),
            ablation_sweep: false,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PipelineInputs<'a> {
    pub is_set: &'a [IsProfile],
    pub frames: &'a [MscFrame],
    pub templates: &'a TemplateSet,
}

#[derive(Debug, Clone, Serialize)]
pub struct PipelineSummary {
    pub corpus_dir: PathBuf,
    pub pairs_file: PathBuf,
    pub report_text: PathBuf,
    pub report_jsonl: PathBuf,
    pub manifest: CorpusManifest,
    pub pairs: usize,
}

pub const CORPUS_DIR: &str = "corpus";
pub const PAIRS_FILE: &str = "pairs.jsonl";
pub const AUDIT_FILE: &str = "audit.jsonl";
pub const FLAGGED_FILE: &str = "flagged.jsonl";
pub const FAILURES_FILE: &str = "failures.jsonl";
pub const REPORT_TEXT: &str = "report.txt";
pub const REPORT_JSONL: &str = "report.jsonl";

/// Runs every stage and writes artifacts under `out`.
pub fn run_pipeline<G: Generator + ?Sized, S: Scorer + ?Sized>(
    inputs: &PipelineInputs,
    cfg: &PipelineConfig,
    generator: &G,
    scorer: &S,
    out: &Path,
) -> Result<PipelineSummary, PipelineError> {
    let grid: Vec<TraitVector> = enumerate_grid().collect();
    let configs = match cfg.n_configs {
        Some(k) => subset_configs(&grid, k, cfg.config_seed)?,
        None => grid.clone(),
    };
    let plan = SynthesisPlan {
        configs: configs.len(),
        replicates: cfg.synthesis.replicates,
        families: cfg.synthesis.families.len(),
    };

    let synth = synthesize(inputs.is_set, inputs.frames, &configs, inputs.templates, &cfg.synthesis, generator)?;
    let generated = synth.samples.len();
    let scored = score_all(synth.samples, scorer, cfg.max_mae, cfg.synthesis.parallelism);
    let deduped = dedup(scored.kept, cfg.dedup_threshold);
    let pairs = build_pairs(&deduped.kept, &cfg.pairs);
    let (selected, coverage) = stratified_sample(deduped.kept, cfg.quota_per_stratum, cfg.stratify_seed)?;
    let audit = audit_slice(&selected, cfg.audit_fraction, cfg.audit_seed)?;

    std::fs::create_dir_all(out)?;
    let corpus_dir = out.join(CORPUS_DIR);
    let shards = write_shards(&corpus_dir, &selected, cfg.shard_size)?;
    write_jsonl(&out.join(AUDIT_FILE), &audit)?;
    write_jsonl(&out.join(FLAGGED_FILE), &scored.flagged)?;
    write_jsonl(&out.join(FAILURES_FILE), &synth.failures)?;
    let pairs_file = out.join(PAIRS_FILE);
    write_pairs(&pairs_file, &pairs)?;

    let mut seeds = BTreeMap::new();
    seeds.insert("config_subset".to_string(), cfg.config_seed);
    seeds.insert("synthesis".to_string(), cfg.synthesis.seed);
    seeds.insert("stratify".to_string(), cfg.stratify_seed);
    seeds.insert("audit".to_string(), cfg.audit_seed);
    seeds.insert("evaluation".to_string(), cfg.eval.seed);
    let manifest = CorpusManifest {
        manifest_version: 1,
        model: cfg.synthesis.model.clone(),
        scorer: scorer.version(),
        families: cfg.synthesis.families.clone(),
        replicates: cfg.synthesis.replicates,
        configs: configs.len(),
        seeds,
        template_checksums: inputs.templates.checksums(),
        counts: CorpusCounts {
            planned_per_family: plan.per_family(),
            planned: plan.total(),
            generated,
            generation_failures: synth.failures.len(),
            truncated: synth.truncated,
            scorer_flagged: scored.flagged.len(),
            dedup: deduped.stats,
            stratified: selected.len(),
            audit: audit.len(),
        },
        coverage,
        shards,
    };
    write_manifest(&corpus_dir, &manifest)?;

    let eval_inputs = EvalInputs {
        is_set: inputs.is_set,
        frames: inputs.frames,
        grid: &grid,
        templates: inputs.templates,
    };
    let mut text = String::new();
    let mut jsonl = String::new();
    let base = run_evaluation(&eval_inputs, &cfg.eval, generator, scorer)?;
    let t = emit_table(
        &[TableRow::from_report("evaluation", &cfg.eval.model, &base.report)],
        TableShape::ModelCompare,
    )?;
    text.push_str(&t.to_text());
    jsonl.push_str(&t.to_jsonl());
    if cfg.ablation_sweep {
        let rows: Vec<TableRow> = run_ablation_sweep(&eval_inputs, &cfg.eval, generator, scorer)?
            .into_iter()
            .map(|(_, r)| r)
            .collect();
        let t = emit_table(&rows, TableShape::Ablation)?;
        text.push('\n');
        text.push_str(&t.to_text());
        jsonl.push_str(&t.to_jsonl());
    }
    let report_text = out.join(REPORT_TEXT);
    let report_jsonl = out.join(REPORT_JSONL);
    std::fs::write(&report_text, text)?;
    std::fs::write(&report_jsonl, jsonl)?;

    Ok(PipelineSummary {
        corpus_dir,
        pairs_file,
        report_text,
        report_jsonl,
        manifest,
        pairs: pairs.len(),
    })
}
