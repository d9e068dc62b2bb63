//! Command-line front end.
//!
//! Commands that talk to a model take either `--stub` (an in-process
//! deterministic server) or an endpoint from `--api-base` /
//! `PSYBENCH_API_BASE`.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use psybench::corpus::{
    build_pairs, read_corpus, read_pairs, write_pairs, LexiconScorer, LlmJudgeScorer, PairConfig, Scorer,
    SynthesisConfig,
};
use psybench::generation::{ChatClient, EndpointConfig};
use psybench::losses::{
    dpo_margin, fold_text, folded_alphabet, grad_check, objective_value, random_instance, toy_train_step, DpoConfig,
    DpoExample, Objective, SftConfig, ToyLm,
};
use psybench::pipeline::{run_pipeline, PipelineConfig, PipelineInputs};
use psybench::prompting::TemplateSet;
use psybench::reporting::{
    component_names, emit_table, run_ablation, run_evaluation, run_stability, verify_fixtures, AblationSpec, Block,
    EvalConfig, EvalInputs, TableFixture, TableRow, TableShape, STABILITY_SEEDS,
};
use psybench::scale::parse_prediction;
use psybench::schema::{
    bundled_frames, bundled_is_profiles, enumerate_grid, load_frames, load_is_profiles, IsProfile, MscFrame,
    TaskFamily, TraitVector,
};
use psybench::stub::{StubConfig, StubServer};

#[derive(Parser)]
#[command(name = "psybench", version, about = "Persona corpus synthesis and Big Five evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize, score and filter a corpus, then write shards, pairs and reports.
    Generate(GenerateArgs),
    /// Build preference pairs from a written corpus.
    Pairs(PairsArgs),
    /// Evaluate one removal against the full prompt.
    Ablate(AblateArgs),
    /// Print a results table from the bundled fixtures or a JSONL file of rows.
    Report(ReportArgs),
    /// Run the gradient-check suite for both training objectives.
    Losscheck(LosscheckArgs),
    /// Serve the deterministic stub endpoint until killed.
    Stub(StubArgs),
    /// Parse one model output (from --text or stdin) into percentile traits.
    Parse(ParseArgs),
    /// List bundled template ids and checksums, or refresh a directory manifest.
    Templates(TemplatesArgs),
}

#[derive(Args, Clone)]
struct EndpointArgs {
    /// Use an in-process deterministic stub server.
    #[arg(long)]
    stub: bool,
    /// Endpoint base URL, e.g. http://localhost:8000/v1.
    #[arg(long)]
    api_base: Option<String>,
    /// Requests per second (process-wide).
    #[arg(long)]
    rate_limit: Option<f64>,
    /// Append a JSONL transcript of every request and response.
    #[arg(long)]
    transcript: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// IS profiles JSONL; defaults to the bundled set.
    #[arg(long)]
    is_profiles: Option<PathBuf>,
    /// MSC frames JSONL; defaults to the bundled set.
    #[arg(long)]
    frames: Option<PathBuf>,
    /// Template directory with a manifest.json; defaults to the bundled set.
    #[arg(long)]
    templates: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScorerKind {
    Lexicon,
    Judge,
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    endpoint: EndpointArgs,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value = "llama3_3_70B")]
    model: String,
    /// Grid configs to use; omit for all 7,776.
    #[arg(long)]
    n_configs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    replicates: u8,
    /// Comma-separated task families; defaults to all three.
    #[arg(long, value_delimiter = ',')]
    families: Vec<String>,
    #[arg(long, default_value_t = 4)]
    parallelism: usize,
    #[arg(long, value_enum, default_value_t = ScorerKind::Lexicon)]
    scorer: ScorerKind,
    #[arg(long, default_value = "judge")]
    judge_model: String,
    /// Drop samples whose scored MAE5 against the target exceeds this.
    #[arg(long)]
    max_mae: Option<f64>,
    #[arg(long, default_value_t = 1000)]
    quota: usize,
    #[arg(long, default_value_t = 0.01)]
    audit_fraction: f64,
    /// Configs drawn for the evaluation report.
    #[arg(long, default_value_t = 1000)]
    eval_configs: usize,
    #[arg(long, default_value = "llama3_2_3B")]
    eval_model: String,
    /// Also evaluate every single removal.
    #[arg(long)]
    ablation_sweep: bool,
}

#[derive(Args)]
struct PairsArgs {
    /// Corpus directory containing manifest.json.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5.0)]
    margin_min: f64,
    #[arg(long, default_value_t = 0.5)]
    confidence_min: f64,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    endpoint: EndpointArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Component to remove, e.g. "socctx" or "Romantic"; "full" removes nothing.
    #[arg(long)]
    remove: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1000)]
    n_configs: usize,
    #[arg(long, default_value = "llama3_2_3B")]
    model: String,
    #[arg(long, default_value_t = 4)]
    parallelism: usize,
    /// Remove only the arena tag and keep that arena's frames.
    #[arg(long)]
    tag_only: bool,
    /// Repeat on the three fixed stability subsets instead of --seed.
    #[arg(long)]
    stability: bool,
    /// Print JSONL records instead of the text table.
    #[arg(long)]
    jsonl: bool,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    shape: String,
    /// JSONL file of rows (group, label, profile_acc, ...); defaults to the fixtures.
    #[arg(long)]
    results: Option<PathBuf>,
    #[arg(long)]
    jsonl: bool,
    /// Check fixture arithmetic and exit non-zero on any violation.
    #[arg(long)]
    verify: bool,
}

#[derive(Args)]
struct LosscheckArgs {
    #[arg(long, default_value_t = 100)]
    instances: u64,
    #[arg(long, default_value_t = 6)]
    vocab: usize,
    #[arg(long, default_value_t = 1e-5)]
    epsilon: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Also run toy DPO steps on a pairs file (text folded to a small alphabet).
    #[arg(long)]
    pairs: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    /// Step size for the pairs run; length-normalized likelihoods have small gradients.
    #[arg(long, default_value_t = 5.0)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    max_pairs: usize,
}

#[derive(Args)]
struct StubArgs {
    #[arg(long, default_value = "127.0.0.1:8089")]
    addr: String,
    #[arg(long, default_value_t = 4)]
    workers: usize,
}

#[derive(Args)]
struct ParseArgs {
    #[arg(long)]
    text: Option<String>,
}

#[derive(Args)]
struct TemplatesArgs {
    /// Rewrite manifest.json in this directory from the files it lists.
    #[arg(long)]
    refresh: Option<PathBuf>,
}

/// Keeps the in-process stub alive for as long as the client is used.
struct Endpoint {
    client: ChatClient,
    _stub: Option<StubServer>,
}

impl EndpointArgs {
    fn connect(&self, parallelism: usize) -> Result<Endpoint> {
        let (mut cfg, stub) = if self.stub {
            let stub = StubServer::start_with(StubConfig { workers: parallelism.max(1), ..Default::default() })?;
            (EndpointConfig::new(stub.base_url()), Some(stub))
        } else if let Some(base) = &self.api_base {
            let mut cfg = EndpointConfig::new(base.clone());
            cfg.api_key = std::env::var(psybench::generation::ENV_API_KEY).ok().filter(|k| !k.is_empty());
            (cfg, None)
        } else {
            (EndpointConfig::from_env().context("pass --stub or --api-base")?, None)
        };
        cfg.rate_limit = self.rate_limit;
        cfg.transcript = self.transcript.clone();
        Ok(Endpoint { client: ChatClient::new(cfg)?, _stub: stub })
    }
}

struct Data {
    is_set: Vec<IsProfile>,
    frames: Vec<MscFrame>,
    templates: TemplateSet,
}

impl DataArgs {
    fn load(&self) -> Result<Data> {
        Ok(Data {
            is_set: match &self.is_profiles {
                Some(p) => load_is_profiles(p)?,
                None => bundled_is_profiles(),
            },
            frames: match &self.frames {
                Some(p) => load_frames(p)?,
                None => bundled_frames(),
            },
            templates: match &self.templates {
                Some(p) => TemplateSet::load_dir(p)?,
                None => TemplateSet::bundled(),
            },
        })
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Generate(a) => generate(a),
        Command::Pairs(a) => pairs(a),
        Command::Ablate(a) => ablate(a),
        Command::Report(a) => report(a),
        Command::Losscheck(a) => losscheck(a),
        Command::Stub(a) => {
            let stub = StubServer::start_with(StubConfig {
                workers: a.workers,
                addr: Some(a.addr),
                ..Default::default()
            })?;
            println!("{}", stub.base_url());
            stub.wait();
            Ok(ExitCode::SUCCESS)
        }
        Command::Parse(a) => {
            let text = match a.text {
                Some(t) => t,
                None => {
                    let mut s = String::new();
                    std::io::stdin().read_to_string(&mut s)?;
                    s
                }
            };
            let (tv, diag) = parse_prediction(&text)?;
            let out = serde_json::json!({ "traits": tv, "mapping": diag });
            println!("{}", serde_json::to_string_pretty(&out)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Templates(a) => {
            if let Some(dir) = a.refresh {
                let m = TemplateSet::refresh_manifest(&dir)?;
                println!("{}", serde_json::to_string_pretty(&m)?);
            } else {
                for (id, sum) in TemplateSet::bundled().checksums() {
                    println!("{sum}  {id}");
                }
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn parse_families(names: &[String]) -> Result<Vec<TaskFamily>> {
    if names.is_empty() {
        return Ok(TaskFamily::ALL.to_vec());
    }
    names
        .iter()
        .map(|n| TaskFamily::parse(n).with_context(|| format!("unknown task family {n:?}")))
        .collect()
}

fn generate(a: GenerateArgs) -> Result<ExitCode> {
    let data = a.data.load()?;
    let ep = a.endpoint.connect(a.parallelism)?;
    let cfg = PipelineConfig {
        synthesis: SynthesisConfig {
            model: a.model,
            replicates: a.replicates,
            families: parse_families(&a.families)?,
            seed: a.seed,
            parallelism: a.parallelism,
            ..Default::default()
        },
        n_configs: a.n_configs,
        config_seed: a.seed,
        max_mae: a.max_mae,
        quota_per_stratum: a.quota,
        stratify_seed: a.seed,
        audit_fraction: a.audit_fraction,
        audit_seed: a.seed,
        eval: EvalConfig {
            model: a.eval_model,
            seed: a.seed,
            n_configs: a.eval_configs,
            parallelism: a.parallelism,
            ..Default::default()
        },
        ablation_sweep: a.ablation_sweep,
        ..Default::default()
    };
    let inputs = PipelineInputs { is_set: &data.is_set, frames: &data.frames, templates: &data.templates };
    let judge;
    let scorer: &dyn Scorer = match a.scorer {
        ScorerKind::Lexicon => &LexiconScorer,
        ScorerKind::Judge => {
            judge = LlmJudgeScorer { generator: &ep.client, templates: &data.templates, model: a.judge_model };
            &judge
        }
    };
    let summary = run_pipeline(&inputs, &cfg, &ep.client, scorer, &a.out)?;
    let c = &summary.manifest.counts;
    eprintln!(
        "planned {} generated {} failed {} flagged {} dedup-removed {} stratified {} audit {} pairs {}",
        c.planned,
        c.generated,
        c.generation_failures,
        c.scorer_flagged,
        c.dedup.removed,
        c.stratified,
        c.audit,
        summary.pairs
    );
    print!("{}", std::fs::read_to_string(&summary.report_text)?);
    Ok(ExitCode::SUCCESS)
}

fn pairs(a: PairsArgs) -> Result<ExitCode> {
    let (_, samples) = read_corpus(&a.corpus)?;
    let cfg = PairConfig { margin_min: a.margin_min, confidence_min: a.confidence_min };
    let pairs = build_pairs(&samples, &cfg);
    let digest = write_pairs(&a.out, &pairs)?;
    eprintln!("{} pairs from {} samples, sha256 {digest}", pairs.len(), samples.len());
    Ok(ExitCode::SUCCESS)
}

fn ablate(a: AblateArgs) -> Result<ExitCode> {
    let spec = AblationSpec::parse(&a.remove).map_err(|e| {
        let names: Vec<String> = component_names().into_iter().collect();
        anyhow::anyhow!("{e}; known components: {}", names.join(", "))
    })?;
    let data = a.data.load()?;
    let ep = a.endpoint.connect(a.parallelism)?;
    let grid: Vec<TraitVector> = enumerate_grid().collect();
    let inputs = EvalInputs { is_set: &data.is_set, frames: &data.frames, grid: &grid, templates: &data.templates };
    let cfg = EvalConfig {
        model: a.model,
        seed: a.seed,
        n_configs: a.n_configs,
        parallelism: a.parallelism,
        tag_only_arena_removal: a.tag_only,
        ..Default::default()
    };
    let scorer = LexiconScorer;
    let group = |s: AblationSpec| s.block().map(Block::label).unwrap_or("IS+MSC");

    if a.stability {
        let mut summaries = Vec::new();
        for s in with_full(spec) {
            let (runs, summary) = run_stability(s, &inputs, &cfg, &STABILITY_SEEDS, &ep.client, &scorer)?;
            if a.jsonl {
                for r in &runs {
                    let line = serde_json::json!({
                        "removal": s.label(), "seed": r.seed, "profile_acc": r.report.profile_acc,
                        "mae5": r.report.mae5, "n": r.report.n_scored,
                    });
                    println!("{line}");
                }
            }
            summaries.push((s.label(), summary));
        }
        if !a.jsonl {
            let rows: Vec<(&str, &_)> = summaries.iter().map(|(l, s)| (*l, s)).collect();
            print!("{}", psybench::metrics::render_summaries(&rows));
        }
        return Ok(ExitCode::SUCCESS);
    }

    let full = run_evaluation(&inputs, &cfg, &ep.client, &scorer)?;
    let mut rows = vec![TableRow::from_report(group(AblationSpec::Full), FULL_LABEL_ROW, &full.report)];
    if spec != AblationSpec::Full {
        let run = run_ablation(spec, &inputs, &cfg, &ep.client, &scorer)?;
        rows.push(TableRow::from_report(group(spec), spec.label(), &run.report));
    }
    let t = emit_table(&rows, TableShape::Ablation)?;
    if a.jsonl {
        print!("{}", t.to_jsonl());
    } else {
        print!("{}", t.to_text());
    }
    Ok(ExitCode::SUCCESS)
}

const FULL_LABEL_ROW: &str = psybench::reporting::FULL_LABEL;

/// Full first, then the requested removal if it is a different spec.
fn with_full(spec: AblationSpec) -> Vec<AblationSpec> {
    if spec == AblationSpec::Full {
        vec![spec]
    } else {
        vec![AblationSpec::Full, spec]
    }
}

fn report(a: ReportArgs) -> Result<ExitCode> {
    let shape = TableShape::parse(&a.shape)
        .with_context(|| format!("unknown shape {:?}; use model_compare, sft_dpo or ablation", a.shape))?;
    let fixture = TableFixture::bundled();
    if a.verify {
        let v = verify_fixtures(&fixture);
        for x in &v {
            eprintln!("{}/{}: {}", x.table, x.row, x.detail);
        }
        if !v.is_empty() {
            return Ok(ExitCode::FAILURE);
        }
    }
    let rows = match &a.results {
        Some(p) => read_rows(p)?,
        None => match shape {
            TableShape::ModelCompare => fixture.model_compare_rows(),
            TableShape::SftDpo => fixture.sft_dpo_rows(),
            TableShape::Ablation => fixture.ablation_rows(),
        },
    };
    let t = emit_table(&rows, shape)?;
    if a.jsonl {
        print!("{}", t.to_jsonl());
    } else {
        print!("{}", t.to_text());
    }
    Ok(ExitCode::SUCCESS)
}

fn read_rows(path: &Path) -> Result<Vec<TableRow>> {
    let text = std::fs::read_to_string(path).with_context(|| path.display().to_string())?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

fn losscheck(a: LosscheckArgs) -> Result<ExitCode> {
    let mut worst_sft: f64 = 0.0;
    let mut worst_dpo: f64 = 0.0;
    for seed in 0..a.instances {
        let (model, reference, sft, dpo) = random_instance(seed, a.vocab)?;
        let s = grad_check(&model, &Objective::Sft { batch: &sft, cfg: SftConfig::default() }, a.epsilon)?;
        let d = grad_check(
            &model,
            &Objective::Dpo { batch: &dpo, reference: &reference, cfg: DpoConfig::default() },
            a.epsilon,
        )?;
        worst_sft = worst_sft.max(s.max_rel_error);
        worst_dpo = worst_dpo.max(d.max_rel_error);
    }
    let mut ok = true;
    for (name, worst) in [("sft", worst_sft), ("dpo", worst_dpo)] {
        let pass = worst < a.tolerance;
        ok &= pass;
        println!(
            "{name:<4} {} max_rel_error={worst:.3e} tolerance={:.0e} instances={}",
            if pass { "PASS" } else { "FAIL" },
            a.tolerance,
            a.instances
        );
    }
    if let Some(path) = &a.pairs {
        ok &= toy_dpo_on_pairs(path, &a)?;
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn toy_dpo_on_pairs(path: &Path, a: &LosscheckArgs) -> Result<bool> {
    let pairs = read_pairs(path)?;
    if pairs.is_empty() {
        bail!("{} has no pairs", path.display());
    }
    let reference = ToyLm::uniform(&folded_alphabet())?;
    let batch: Vec<DpoExample> = pairs
        .iter()
        .take(a.max_pairs)
        .map(|p| {
            let prompt = fold_text(&p.prompt);
            Ok(DpoExample {
                chosen: reference.encode(&prompt, &fold_text(&p.chosen))?,
                rejected: reference.encode(&prompt, &fold_text(&p.rejected))?,
            })
        })
        .collect::<Result<_, psybench::losses::LossError>>()?;
    let cfg = DpoConfig::default();
    let obj = Objective::Dpo { batch: &batch, reference: &reference, cfg };
    let mean_margin = |m: &ToyLm| -> Result<f64> {
        let total: f64 = batch.iter().map(|ex| dpo_margin(m, &reference, ex, &cfg)).sum::<Result<f64, _>>()?;
        Ok(total / batch.len() as f64)
    };
    let mut model = reference.clone();
    let start = (objective_value(&model, &obj)?, mean_margin(&model)?);
    for _ in 0..a.steps {
        model = toy_train_step(&model, &obj, a.lr)?.0;
    }
    let end = (objective_value(&model, &obj)?, mean_margin(&model)?);
    let pass = end.0 <= start.0 && end.1 >= start.1;
    println!(
        "toy-dpo {} pairs={} steps={} loss {:.8} -> {:.8} margin {:.3e} -> {:.3e}",
        if pass { "PASS" } else { "FAIL" },
        batch.len(),
        a.steps,
        start.0,
        end.0,
        start.1,
        end.1
    );
    Ok(pass)
}
