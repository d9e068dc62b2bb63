//! Blocking client for OpenAI-compatible chat-completion endpoints.
//!
//! Decoding presets are fixed per use: corpus synthesis samples with
//! `temperature=0.85, top_p=0.95`, persona descriptions use `0.25`, and trait
//! scoring runs greedy at `0`. Every request caps output at 512 new tokens.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::prompting::{sha256_hex, StructuredPrompt};

pub const ENV_API_BASE: &str = "PSYBENCH_API_BASE";
pub const ENV_API_KEY: &str = "PSYBENCH_API_KEY";

/// Seed sent with greedy requests when the caller gives none.
pub const DEFAULT_GREEDY_SEED: u64 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PresetName {
    CorpusSynthesis,
    PersonaDescription,
    TraitScoring,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodingPreset {
    pub name: PresetName,
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: u32,
}

impl DecodingPreset {
    pub const CORPUS_SYNTHESIS: DecodingPreset = DecodingPreset {
        name: PresetName::CorpusSynthesis,
        temperature: 0.85,
        top_p: 0.95,
        max_new_tokens: 512,
    };
    /// top_p is not pinned for this preset; 1.0 leaves nucleus sampling off.
    pub const PERSONA_DESCRIPTION: DecodingPreset = DecodingPreset {
        name: PresetName::PersonaDescription,
        temperature: 0.25,
        top_p: 1.0,
        max_new_tokens: 512,
    };
    pub const TRAIT_SCORING: DecodingPreset = DecodingPreset {
        name: PresetName::TraitScoring,
        temperature: 0.0,
        top_p: 1.0,
        max_new_tokens: 512,
    };

    pub fn get(name: PresetName) -> DecodingPreset {
        match name {
            PresetName::CorpusSynthesis => Self::CORPUS_SYNTHESIS,
            PresetName::PersonaDescription => Self::PERSONA_DESCRIPTION,
            PresetName::TraitScoring => Self::TRAIT_SCORING,
        }
    }

    pub fn is_greedy(&self) -> bool {
        self.temperature == 0.0
    }

    pub fn validate(&self) -> Result<(), GenerationError> {
        if !(self.temperature >= 0.0) {
            return Err(GenerationError::InvalidPreset("temperature must be >= 0".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(GenerationError::InvalidPreset("top_p must be in (0,1]".into()));
        }
        if self.max_new_tokens == 0 {
            return Err(GenerationError::InvalidPreset("max_new_tokens must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum GenerationError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport {
        status: Option<u16>,
        message: String,
        attempts: u32,
    },
    #[error("invalid preset: {0}")]
    InvalidPreset(String),
    #[error("malformed response: {0}")]
    Protocol(String),
    #[error("endpoint not configured: set {ENV_API_BASE}")]
    NotConfigured,
    #[error("transcript: {0}")]
    Transcript(String),
}

/// Exponential backoff: `base_delay * 2^k` before retry `k+1`, capped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_delay: Duration::from_millis(250),
            max_delay: Duration::from_secs(8),
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, retry: u32) -> Duration {
        self.base_delay
            .saturating_mul(1u32 << retry.min(16))
            .min(self.max_delay)
    }
}

/// Token bucket shared by every client of one endpoint in the process.
#[derive(Debug)]
pub struct TokenBucket {
    rate_per_sec: f64,
    capacity: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    pub fn new(rate_per_sec: f64, capacity: f64) -> Self {
        TokenBucket {
            rate_per_sec,
            capacity,
            state: Mutex::new((capacity, Instant::now())),
        }
    }

    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut s = self.state.lock().unwrap();
                let now = Instant::now();
                let refill = now.duration_since(s.1).as_secs_f64() * self.rate_per_sec;
                s.0 = (s.0 + refill).min(self.capacity);
                s.1 = now;
                if s.0 >= 1.0 {
                    s.0 -= 1.0;
                    return;
                }
                (1.0 - s.0) / self.rate_per_sec
            };
            std::thread::sleep(Duration::from_secs_f64(wait));
        }
    }

    /// The process-wide bucket for `endpoint`, created on first use.
    pub fn for_endpoint(endpoint: &str, rate_per_sec: f64) -> Arc<TokenBucket> {
        static REGISTRY: OnceLock<Mutex<HashMap<String, Arc<TokenBucket>>>> = OnceLock::new();
        let mut reg = REGISTRY.get_or_init(Default::default).lock().unwrap();
        reg.entry(endpoint.to_string())
            .or_insert_with(|| Arc::new(TokenBucket::new(rate_per_sec, rate_per_sec.max(1.0))))
            .clone()
    }
}

#[derive(Debug, Clone)]
pub struct EndpointConfig {
    /// Base URL up to and including the API version, e.g. `http://host/v1`.
    pub base_url: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub retry: RetryPolicy,
    /// Requests per second; `None` disables rate limiting.
    pub rate_limit: Option<f64>,
    pub transcript: Option<PathBuf>,
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>) -> Self {
        EndpointConfig {
            base_url: base_url.into(),
            api_key: None,
            timeout: Duration::from_secs(120),
            retry: RetryPolicy::default(),
            rate_limit: None,
            transcript: None,
        }
    }

    pub fn from_env() -> Result<Self, GenerationError> {
        let base = std::env::var(ENV_API_BASE).map_err(|_| GenerationError::NotConfigured)?;
        let mut cfg = EndpointConfig::new(base);
        cfg.api_key = std::env::var(ENV_API_KEY).ok().filter(|k| !k.is_empty());
        Ok(cfg)
    }

    pub fn completions_url(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub request_id: String,
    pub model: String,
    pub preset: PresetName,
    pub prompt_checksum: String,
    pub response_text: String,
    pub finish_reason: Option<String>,
    /// The completion stopped at `max_new_tokens`; the text is kept.
    pub truncated: bool,
    pub latency_ms: u64,
    pub retry_count: u32,
    pub timestamp_ms: u64,
    pub seed: Option<u64>,
    /// `Some` when the server echoed a seed back; `None` when it gave no signal.
    pub seed_honored: Option<bool>,
    pub system_fingerprint: Option<String>,
}

impl GenerationRecord {
    pub fn matches_prompt(&self, prompt_text: &str) -> bool {
        self.prompt_checksum == sha256_hex(prompt_text.as_bytes())
    }
}

/// Anything that can turn prompt text into a completion.
pub trait Generator: Sync {
    fn complete(
        &self,
        prompt: &str,
        preset: &DecodingPreset,
        model: &str,
        seed: Option<u64>,
    ) -> Result<GenerationRecord, GenerationError>;
}

/// Zero-shot generation for one structured prompt.
pub fn generate<G: Generator + ?Sized>(
    generator: &G,
    prompt: &StructuredPrompt,
    preset: &DecodingPreset,
    model: &str,
) -> Result<GenerationRecord, GenerationError> {
    generator.complete(&prompt.full_text, preset, model, None)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub prompt: String,
    pub seed: Option<u64>,
}

/// Maps `f` over `items` on up to `parallelism` scoped worker threads,
/// returning results in input order.
pub fn par_map<T: Sync, R: Send>(
    items: &[T],
    parallelism: usize,
    f: impl Fn(&T) -> R + Sync,
) -> Vec<R> {
    let workers = parallelism.max(1).min(items.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                let r = f(item);
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every slot is filled"))
        .collect()
}

/// Runs `items` on up to `parallelism` worker threads. Output order always
/// matches input order, and one failure never cancels the rest.
pub fn generate_batch<G: Generator + ?Sized>(
    generator: &G,
    items: &[BatchItem],
    preset: &DecodingPreset,
    model: &str,
    parallelism: usize,
) -> Vec<Result<GenerationRecord, GenerationError>> {
    par_map(items, parallelism, |item| {
        generator.complete(&item.prompt, preset, model, item.seed)
    })
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// HTTP client for one endpoint.
pub struct ChatClient {
    cfg: EndpointConfig,
    agent: ureq::Agent,
    bucket: Option<Arc<TokenBucket>>,
    transcript: Option<Mutex<BufWriter<File>>>,
}

enum Attempt {
    Done(Value),
    Retry(Option<u16>, String),
    Fatal(Option<u16>, String),
}

impl ChatClient {
    pub fn new(cfg: EndpointConfig) -> Result<Self, GenerationError> {
        let agent = ureq::AgentBuilder::new().timeout(cfg.timeout).build();
        let bucket = cfg
            .rate_limit
            .map(|r| TokenBucket::for_endpoint(&cfg.base_url, r));
        let transcript = match &cfg.transcript {
            Some(p) => Some(Mutex::new(BufWriter::new(open_append(p)?))),
            None => None,
        };
        Ok(ChatClient {
            cfg,
            agent,
            bucket,
            transcript,
        })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.cfg
    }

    fn attempt(&self, body: &Value) -> Attempt {
        let mut req = self.agent.post(&self.cfg.completions_url());
        if let Some(key) = &self.cfg.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        match req.send_json(body) {
            Ok(resp) => match resp.into_json::<Value>() {
                Ok(v) => Attempt::Done(v),
                Err(e) => Attempt::Fatal(None, format!("bad JSON body: {e}")),
            },
            Err(ureq::Error::Status(code, resp)) => {
                let text = resp.into_string().unwrap_or_default();
                let msg = format!("HTTP {code}: {}", text.chars().take(200).collect::<String>());
                if code == 429 || code >= 500 {
                    Attempt::Retry(Some(code), msg)
                } else {
                    Attempt::Fatal(Some(code), msg)
                }
            }
            Err(ureq::Error::Transport(t)) => Attempt::Retry(None, t.to_string()),
        }
    }

    fn log(&self, entry: &Value) {
        if let Some(t) = &self.transcript {
            let mut w = t.lock().unwrap();
            let _ = serde_json::to_writer(&mut *w, entry);
            let _ = w.write_all(b"\n");
            let _ = w.flush();
        }
    }
}

fn open_append(p: &Path) -> Result<File, GenerationError> {
    std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(p)
        .map_err(|e| GenerationError::Transcript(e.to_string()))
}

/// Request body in chat-completions form.
pub fn request_body(prompt: &str, preset: &DecodingPreset, model: &str, seed: Option<u64>) -> Value {
    let mut body = json!({
        "model": model,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": preset.temperature,
        "top_p": preset.top_p,
        "max_tokens": preset.max_new_tokens,
    });
    if let Some(s) = seed {
        body["seed"] = json!(s);
    }
    body
}

impl Generator for ChatClient {
    fn complete(
        &self,
        prompt: &str,
        preset: &DecodingPreset,
        model: &str,
        seed: Option<u64>,
    ) -> Result<GenerationRecord, GenerationError> {
        preset.validate()?;
        let seed = seed.or(preset.is_greedy().then_some(DEFAULT_GREEDY_SEED));
        let body = request_body(prompt, preset, model, seed);
        let checksum = sha256_hex(prompt.as_bytes());
        let request_id = sha256_hex(
            format!("{checksum}|{model}|{:?}|{seed:?}", preset.name).as_bytes(),
        )[..16]
            .to_string();
        let started = Instant::now();
        let mut retries = 0;
        loop {
            if let Some(b) = &self.bucket {
                b.acquire();
            }
            let outcome = self.attempt(&body);
            let (status, message) = match outcome {
                Attempt::Done(v) => {
                    let latency_ms = started.elapsed().as_millis() as u64;
                    self.log(&json!({
                        "request_id": request_id, "request": body, "response": v,
                        "latency_ms": latency_ms, "retries": retries,
                    }));
                    let choice = &v["choices"][0];
                    let text = choice["message"]["content"]
                        .as_str()
                        .ok_or_else(|| GenerationError::Protocol("no choices[0].message.content".into()))?
                        .to_string();
                    let finish_reason = choice["finish_reason"].as_str().map(str::to_string);
                    return Ok(GenerationRecord {
                        request_id,
                        model: model.to_string(),
                        preset: preset.name,
                        prompt_checksum: checksum,
                        response_text: text,
                        truncated: finish_reason.as_deref() == Some("length"),
                        finish_reason,
                        latency_ms,
                        retry_count: retries,
                        timestamp_ms: now_ms(),
                        seed,
                        seed_honored: v.get("seed").map(|s| s.as_u64() == seed),
                        system_fingerprint: v["system_fingerprint"].as_str().map(str::to_string),
                    });
                }
                Attempt::Fatal(status, message) => {
                    self.log(&json!({"request_id": request_id, "request": body, "error": message}));
                    return Err(GenerationError::Transport {
                        status,
                        message,
                        attempts: retries + 1,
                    });
                }
                Attempt::Retry(status, message) => (status, message),
            };
            if retries + 1 >= self.cfg.retry.max_attempts {
                self.log(&json!({"request_id": request_id, "request": body, "error": message}));
                return Err(GenerationError::Transport {
                    status,
                    message,
                    attempts: retries + 1,
                });
            }
            std::thread::sleep(self.cfg.retry.delay(retries));
            retries += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_published_settings() {
        let c = DecodingPreset::CORPUS_SYNTHESIS;
        assert_eq!((c.temperature, c.top_p, c.max_new_tokens), (0.85, 0.95, 512));
        let p = DecodingPreset::PERSONA_DESCRIPTION;
        assert_eq!((p.temperature, p.top_p, p.max_new_tokens), (0.25, 1.0, 512));
        let s = DecodingPreset::TRAIT_SCORING;
        assert_eq!((s.temperature, s.max_new_tokens), (0.0, 512));
        assert!(s.is_greedy());
        for n in [PresetName::CorpusSynthesis, PresetName::PersonaDescription, PresetName::TraitScoring] {
            DecodingPreset::get(n).validate().unwrap();
        }
    }

    #[test]
    fn invalid_presets() {
        let mut p = DecodingPreset::CORPUS_SYNTHESIS;
        p.top_p = 0.0;
        assert!(p.validate().is_err());
        p.top_p = 1.0;
        p.temperature = -0.1;
        assert!(p.validate().is_err());
        p.temperature = 0.5;
        p.max_new_tokens = 0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn body_carries_preset() {
        let b = request_body("hi", &DecodingPreset::CORPUS_SYNTHESIS, "m", Some(9));
        assert_eq!(b["temperature"], 0.85);
        assert_eq!(b["top_p"], 0.95);
        assert_eq!(b["max_tokens"], 512);
        assert_eq!(b["seed"], 9);
        assert_eq!(b["messages"][0]["content"], "hi");
        assert!(request_body("hi", &DecodingPreset::CORPUS_SYNTHESIS, "m", None)
            .get("seed")
            .is_none());
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let r = RetryPolicy {
            max_attempts: 5,
            base_delay: Duration::from_millis(100),
            max_delay: Duration::from_millis(350),
        };
        assert_eq!(r.delay(0), Duration::from_millis(100));
        assert_eq!(r.delay(1), Duration::from_millis(200));
        assert_eq!(r.delay(2), Duration::from_millis(350));
    }

    #[test]
    fn token_bucket_paces() {
        let b = TokenBucket::new(50.0, 1.0);
        let t = Instant::now();
        for _ in 0..6 {
            b.acquire();
        }
        // 1 burst token then 5 refills at 20 ms each
        assert!(t.elapsed() >= Duration::from_millis(80));
    }

    struct Echo;
    impl Generator for Echo {
        fn complete(
            &self,
            prompt: &str,
            preset: &DecodingPreset,
            model: &str,
            seed: Option<u64>,
        ) -> Result<GenerationRecord, GenerationError> {
            if prompt.contains("fail") {
                return Err(GenerationError::Transport {
                    status: Some(500),
                    message: "boom".into(),
                    attempts: 1,
                });
            }
            // finish out of order
            std::thread::sleep(Duration::from_millis((prompt.len() % 7) as u64));
            Ok(GenerationRecord {
                request_id: prompt.into(),
                model: model.into(),
                preset: preset.name,
                prompt_checksum: sha256_hex(prompt.as_bytes()),
                response_text: prompt.to_uppercase(),
                finish_reason: None,
                truncated: false,
                latency_ms: 0,
                retry_count: 0,
                timestamp_ms: 0,
                seed,
                seed_honored: None,
                system_fingerprint: None,
            })
        }
    }

    #[test]
    fn batch_preserves_order_and_isolates_failures() {
        let items: Vec<_> = (0..10)
            .map(|i| BatchItem {
                prompt: if i == 3 { "fail".into() } else { format!("p{}{}", i, "x".repeat(i)) },
                seed: None,
            })
            .collect();
        let out = generate_batch(&Echo, &items, &DecodingPreset::TRAIT_SCORING, "m", 4);
        assert_eq!(out.len(), 10);
        assert_eq!(out.iter().filter(|r| r.is_err()).count(), 1);
        assert!(out[3].is_err());
        for (i, r) in out.iter().enumerate() {
            if let Ok(r) = r {
                assert_eq!(r.response_text, items[i].prompt.to_uppercase());
                assert!(r.matches_prompt(&items[i].prompt));
            }
        }
        let serial = generate_batch(&Echo, &items, &DecodingPreset::TRAIT_SCORING, "m", 1);
        let texts = |v: &[Result<GenerationRecord, GenerationError>]| {
            v.iter().map(|r| r.as_ref().ok().map(|r| r.response_text.clone())).collect::<Vec<_>>()
        };
        assert_eq!(texts(&out), texts(&serial));
        assert!(generate_batch(&Echo, &[], &DecodingPreset::TRAIT_SCORING, "m", 3).is_empty());
    }
}
