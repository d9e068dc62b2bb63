use std::time::Duration;

use psybench::generation::{
    generate_batch, BatchItem, ChatClient, DecodingPreset, EndpointConfig, GenerationError,
    Generator, RetryPolicy,
};
use psybench::stub::{StubConfig, StubServer, FAIL_MARKER};

fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        max_attempts: 3,
        base_delay: Duration::from_millis(5),
        max_delay: Duration::from_millis(20),
    }
}

fn client(base: &str) -> ChatClient {
    let mut cfg = EndpointConfig::new(base);
    cfg.retry = fast_retry();
    cfg.timeout = Duration::from_secs(5);
    ChatClient::new(cfg).unwrap()
}

const PERSONA: &str = "<O=55><C=45><E=70><A=30><N=10><SCENE=Family>\n[edu] x\n[life] y\n[socctx] z\n[capital] w\n<ARENAS=Working|Family|Friendship|Romance|Leisure|Community|Digital|Public>\n<INSTR>\nDescribe yourself.\n<RESP>";

#[test]
fn greedy_requests_repeat_exactly() {
    let stub = StubServer::start().unwrap();
    let c = client(stub.base_url());
    let p = DecodingPreset::TRAIT_SCORING;
    let a = c.complete(PERSONA, &p, "m", None).unwrap();
    let b = c.complete(PERSONA, &p, "m", None).unwrap();
    assert_eq!(a.response_text, b.response_text);
    assert_eq!(a.request_id, b.request_id);
    assert!(a.matches_prompt(PERSONA));
    assert_eq!(a.seed, Some(0));
    assert_eq!(a.seed_honored, Some(true));
    assert_eq!(a.retry_count, 0);
    assert!(!a.truncated);
}

#[test]
fn sampled_replicates_differ_by_seed() {
    let stub = StubServer::start().unwrap();
    let c = client(stub.base_url());
    let p = DecodingPreset::CORPUS_SYNTHESIS;
    let texts: Vec<String> = (0..5)
        .map(|s| c.complete(PERSONA, &p, "m", Some(s)).unwrap().response_text)
        .collect();
    for i in 0..5 {
        for j in i + 1..5 {
            assert_ne!(texts[i], texts[j]);
        }
    }
}

#[test]
fn unreachable_endpoint_exhausts_retries() {
    // bind then drop to get a port nobody listens on
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let c = client(&format!("http://127.0.0.1:{port}/v1"));
    match c.complete("hello", &DecodingPreset::TRAIT_SCORING, "m", None) {
        Err(GenerationError::Transport { status: None, attempts, .. }) => assert_eq!(attempts, 3),
        other => panic!("expected transport error, got {other:?}"),
    }
}

#[test]
fn server_errors_are_retried_then_succeed() {
    let stub = StubServer::start_with(StubConfig { fail_first: 2, workers: 1, ..Default::default() }).unwrap();
    let c = client(stub.base_url());
    let r = c.complete("hello", &DecodingPreset::TRAIT_SCORING, "m", None).unwrap();
    assert_eq!(r.retry_count, 2);
    assert_eq!(stub.hits(), 3);
}

#[test]
fn persistent_server_error_is_reported_with_status() {
    let stub = StubServer::start().unwrap();
    let c = client(stub.base_url());
    match c.complete(FAIL_MARKER, &DecodingPreset::TRAIT_SCORING, "m", None) {
        Err(GenerationError::Transport { status: Some(500), attempts: 3, .. }) => {}
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn truncated_completion_is_flagged_not_dropped() {
    let stub = StubServer::start().unwrap();
    let c = client(stub.base_url());
    let mut p = DecodingPreset::PERSONA_DESCRIPTION;
    p.max_new_tokens = 4;
    let r = c.complete(PERSONA, &p, "m", None).unwrap();
    assert!(r.truncated);
    assert_eq!(r.finish_reason.as_deref(), Some("length"));
    assert_eq!(r.response_text.split_whitespace().count(), 4);
}

#[test]
fn batch_results_do_not_depend_on_parallelism() {
    let stub = StubServer::start_with(StubConfig { fail_first: 0, workers: 4, ..Default::default() }).unwrap();
    let c = client(stub.base_url());
    let items: Vec<BatchItem> = (0..10)
        .map(|i| BatchItem {
            prompt: if i == 6 {
                format!("{FAIL_MARKER} {i}")
            } else {
                PERSONA.replace("<O=55>", &format!("<O={}>", i * 10))
            },
            seed: None,
        })
        .collect();
    let p = DecodingPreset::TRAIT_SCORING;
    let par = generate_batch(&c, &items, &p, "m", 4);
    let ser = generate_batch(&c, &items, &p, "m", 1);
    assert_eq!(par.len(), 10);
    assert_eq!(par.iter().filter(|r| r.is_ok()).count(), 9);
    assert!(par[6].is_err() && ser[6].is_err());
    for (i, (a, b)) in par.iter().zip(&ser).enumerate() {
        if i == 6 {
            continue;
        }
        let (a, b) = (a.as_ref().unwrap(), b.as_ref().unwrap());
        assert_eq!(a.response_text, b.response_text);
        assert!(a.matches_prompt(&items[i].prompt));
    }
}

#[test]
fn transcript_mirrors_each_exchange() {
    let stub = StubServer::start().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    let mut cfg = EndpointConfig::new(stub.base_url());
    cfg.retry = fast_retry();
    cfg.transcript = Some(path.clone());
    let c = ChatClient::new(cfg).unwrap();
    c.complete("one", &DecodingPreset::TRAIT_SCORING, "m", None).unwrap();
    c.complete("two", &DecodingPreset::CORPUS_SYNTHESIS, "m", Some(3)).unwrap();
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(&path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[1]["request"]["temperature"], 0.85);
    assert_eq!(lines[1]["request"]["top_p"], 0.95);
    assert_eq!(lines[1]["request"]["max_tokens"], 512);
    assert!(lines[0]["response"]["choices"].is_array());
}
