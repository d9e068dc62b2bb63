use std::time::Duration;

use psybench::corpus::{read_corpus, read_pairs, LexiconScorer, LlmJudgeScorer, SynthesisConfig};
use psybench::generation::{ChatClient, EndpointConfig, RetryPolicy};
use psybench::pipeline::{run_pipeline, PipelineConfig, PipelineInputs};
use psybench::prompting::TemplateSet;
use psybench::reporting::EvalConfig;
use psybench::schema::{bundled_frames, bundled_is_profiles, TaskFamily};
use psybench::stub::StubServer;

fn client(base: &str) -> ChatClient {
    let mut cfg = EndpointConfig::new(base);
    cfg.retry = RetryPolicy { max_attempts: 2, base_delay: Duration::from_millis(5), max_delay: Duration::from_millis(10) };
    ChatClient::new(cfg).unwrap()
}

fn small_config() -> PipelineConfig {
    PipelineConfig {
        synthesis: SynthesisConfig { seed: 7, parallelism: 4, ..Default::default() },
        n_configs: Some(64),
        config_seed: 3,
        quota_per_stratum: 10,
        audit_fraction: 0.05,
        eval: EvalConfig { n_configs: 40, seed: 5, ..Default::default() },
        ablation_sweep: true,
        ..Default::default()
    }
}

#[test]
fn small_run_writes_consistent_artifacts() {
    let stub = StubServer::start_with(psybench::stub::StubConfig { fail_first: 0, workers: 4, ..Default::default() }).unwrap();
    let c = client(stub.base_url());
    let (is_set, frames, templates) = (bundled_is_profiles(), bundled_frames(), TemplateSet::bundled());
    let inputs = PipelineInputs { is_set: &is_set, frames: &frames, templates: &templates };
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let s = run_pipeline(&inputs, &cfg, &c, &LexiconScorer, dir.path()).unwrap();
    let m = &s.manifest;
    assert_eq!(m.counts.planned, 64 * 5 * 3);
    assert_eq!(m.counts.planned_per_family, 64 * 5);
    assert_eq!(m.counts.generated + m.counts.generation_failures, m.counts.planned);
    assert_eq!(m.counts.dedup.input, m.counts.generated - m.counts.scorer_flagged);
    let (m2, samples) = read_corpus(&s.corpus_dir).unwrap();
    assert_eq!(&m2, m);
    assert_eq!(samples.len(), m.counts.stratified);
    assert!(samples.iter().all(|x| x.scorer_traits.is_some()));
    let pairs = read_pairs(&s.pairs_file).unwrap();
    assert_eq!(pairs.len(), s.pairs);
    assert!(pairs.iter().all(|p| p.margin >= 5.0));
    let report = std::fs::read_to_string(&s.report_text).unwrap();
    eprintln!("{m:#?}\npairs {}\n{report}", pairs.len());
    assert!(report.contains("Full (no removal)"));

    let judge = LlmJudgeScorer { generator: &c, templates: &templates, model: "judge".into() };
    let cfg = PipelineConfig {
        synthesis: SynthesisConfig { families: vec![TaskFamily::RolePlay], ..small_config().synthesis },
        ablation_sweep: false,
        ..small_config()
    };
    let dir2 = tempfile::tempdir().unwrap();
    let s2 = run_pipeline(&inputs, &cfg, &c, &judge, dir2.path()).unwrap();
    assert_eq!(s2.manifest.scorer, "llm-judge:judge");
    assert!(s2.manifest.counts.stratified > 0);
}
