//! Deterministic local stand-in for a chat-completion endpoint.
//!
//! Replies are a pure function of the request body, so two runs with the same
//! seeds see the same bytes regardless of port, timing or worker count.
//!
//! * Persona prompts (starting with trait tags) get a short first-person text
//!   ending in a self-rating line. The rating is the tagged target plus noise
//!   that grows with temperature and as IS domains or arenas are removed from
//!   the prompt.
//! * Judge prompts (containing a `Text:` block) get a rating line re-read from
//!   that text, plus a confidence.
//! * A prompt containing [`FAIL_MARKER`] always gets HTTP 500.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock};
use std::thread::JoinHandle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use tiny_http::{Header, Response, Server};

use crate::scale::parse_prediction;

pub const FAIL_MARKER: &str = "__stub_fail__";
pub const FINGERPRINT: &str = "psybench-stub-1";

#[derive(Debug, Clone, Default)]
pub struct StubConfig {
    /// Answer the first `fail_first` requests with HTTP 503.
    pub fail_first: usize,
    pub workers: usize,
    /// Listen address; `None` binds an ephemeral port on loopback.
    pub addr: Option<String>,
}

pub struct StubServer {
    server: Arc<Server>,
    base_url: String,
    hits: Arc<AtomicUsize>,
    workers: Vec<JoinHandle<()>>,
}

impl StubServer {
    pub fn start() -> std::io::Result<Self> {
        Self::start_with(StubConfig::default())
    }

    pub fn start_with(cfg: StubConfig) -> std::io::Result<Self> {
        let server = Server::http(cfg.addr.as_deref().unwrap_or("127.0.0.1:0")).map_err(std::io::Error::other)?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| std::io::Error::other("stub bound to a non-IP address"))?;
        let server = Arc::new(server);
        let hits = Arc::new(AtomicUsize::new(0));
        let n = cfg.workers.max(1);
        let workers = (0..n)
            .map(|_| {
                let server = server.clone();
                let hits = hits.clone();
                let fail_first = cfg.fail_first;
                std::thread::spawn(move || {
                    while let Ok(mut req) = server.recv() {
                        let k = hits.fetch_add(1, Ordering::SeqCst);
                        let mut body = String::new();
                        let _ = req.as_reader().read_to_string(&mut body);
                        let (status, payload) = if k < fail_first {
                            (503, json!({"error": "warming up"}))
                        } else {
                            respond(&body)
                        };
                        let resp = Response::from_string(payload.to_string())
                            .with_status_code(status)
                            .with_header(
                                Header::from_bytes("Content-Type", "application/json").unwrap(),
                            );
                        let _ = req.respond(resp);
                    }
                })
            })
            .collect();
        Ok(StubServer {
            server,
            base_url: format!("http://{addr}/v1"),
            hits,
            workers,
        })
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }

    /// Blocks until the worker threads exit.
    pub fn wait(mut self) {
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        for _ in 0..self.workers.len() {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

/// Computes the reply for one request body: `(status, json)`.
pub fn respond(body: &str) -> (u16, Value) {
    let req: Value = match serde_json::from_str(body) {
        Ok(v) => v,
        Err(e) => return (400, json!({"error": format!("bad request: {e}")})),
    };
    let Some(prompt) = req["messages"]
        .as_array()
        .and_then(|m| m.last())
        .and_then(|m| m["content"].as_str())
    else {
        return (400, json!({"error": "no messages"}));
    };
    if prompt.contains(FAIL_MARKER) {
        return (500, json!({"error": "requested failure"}));
    }
    let temperature = req["temperature"].as_f64().unwrap_or(1.0);
    let seed = req["seed"].as_u64();
    let model = req["model"].as_str().unwrap_or("");
    let max_tokens = req["max_tokens"].as_u64().unwrap_or(512) as usize;

    // Greedy decoding ignores the sampler seed.
    let mut h = Sha256::new();
    h.update(model.as_bytes());
    h.update([0]);
    h.update(prompt.as_bytes());
    if temperature > 0.0 {
        h.update(format!("|{seed:?}|{temperature}").as_bytes());
    }
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(key);

    let text = if let Some(t) = persona_targets(prompt) {
        persona_reply(noise_amplitude(prompt) * (1.0 + 4.0 * temperature), t, &mut rng)
    } else if let Some(text) = judge_text(prompt) {
        judge_reply(text)
    } else {
        format!("Acknowledged ({} characters).", prompt.chars().count())
    };

    let words: Vec<&str> = text.split_whitespace().collect();
    let (content, finish) = if words.len() > max_tokens {
        (words[..max_tokens].join(" "), "length")
    } else {
        (text, "stop")
    };
    let mut out = json!({
        "id": format!("stub-{}", hex::encode(&digest[..8])),
        "object": "chat.completion",
        "model": model,
        "system_fingerprint": FINGERPRINT,
        "choices": [{
            "index": 0,
            "message": {"role": "assistant", "content": content},
            "finish_reason": finish,
        }],
    });
    if let Some(s) = seed {
        out["seed"] = json!(s);
    }
    (200, out)
}

fn persona_targets(prompt: &str) -> Option<[f64; 5]> {
    let header = prompt.lines().next()?;
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"<([OCEAN])=([0-9.]+)>").unwrap());
    let mut v = [f64::NAN; 5];
    for c in re.captures_iter(header) {
        let i = "OCEAN".find(&c[1]).unwrap();
        v[i] = c[2].parse().ok()?;
    }
    v.iter().all(|x| x.is_finite()).then_some(v)
}

fn judge_text(prompt: &str) -> Option<&str> {
    prompt.split_once("\nText:\n").map(|(_, t)| t)
}

/// How much of the conditioning survived ablation, as a noise amplitude.
fn noise_amplitude(prompt: &str) -> f64 {
    let domains = prompt
        .lines()
        .filter(|l| {
            ["[edu] ", "[life] ", "[socctx] ", "[capital] "]
                .iter()
                .any(|p| l.starts_with(p))
        })
        .count();
    let arenas = prompt
        .lines()
        .find_map(|l| l.strip_prefix("<ARENAS=")?.strip_suffix('>'))
        .map(|s| s.split('|').count())
        .unwrap_or(0);
    4.0 + 6.0 * (4 - domains.min(4)) as f64 + 2.5 * (8 - arenas.min(8)) as f64
}

const OPENERS: [&str; 10] = [
    "When a situation like this comes up, I tend to settle in before reacting.",
    "My first move in moments like these is usually to look around and read the room.",
    "People who know me would say I handle this sort of thing in my own particular way.",
    "I have been in this position more often than I would like to admit.",
    "Honestly, scenes like this one tell you a lot about how I operate.",
    "I rarely rush into these moments, though I do not hang back either.",
    "There is a rhythm I fall into whenever something like this is on the table.",
    "Most days I approach this kind of thing with a plan sketched on a napkin.",
    "Looking back at similar afternoons, a pattern in how I behave is easy to spot.",
    "I usually notice the mood of everyone involved before I notice the task.",
];

const MIDDLES: [&str; 12] = [
    "I keep a running list in my head and cross items off as the conversation moves.",
    "If someone pushes back, I ask questions until I understand what they actually need.",
    "I like to float one unusual idea, just to see whether anyone bites.",
    "Deadlines focus me, although I sometimes over-prepare for the easy parts.",
    "I would rather listen for a while than fill the silence with small talk.",
    "When tension rises I slow my voice down and try to keep things light.",
    "I check in with the people most affected before committing to anything.",
    "Small setbacks can nag at me for the rest of the evening.",
    "I enjoy the back-and-forth, especially when it gets a little competitive.",
    "My notes tend to be tidy even when my desk is not.",
    "I am happy to take the lead, but I hand it over quickly if someone knows more.",
    "Routine comforts me, yet I get restless if nothing new happens for a week.",
];

const CLOSERS: [&str; 8] = [
    "By the end I usually feel I did right by the people around me.",
    "Afterwards I replay the key moments and file away what I would change.",
    "Once it is over I move on quickly and rarely dwell on it.",
    "I leave with a clear sense of what comes next.",
    "Whatever the outcome, I try to thank everyone who stuck with it.",
    "It is not always graceful, but it is reliably me.",
    "Later that night I tell someone close to me how it went.",
    "Then I get back to the rest of my day.",
];

fn pick<'a>(bank: &[&'a str], rng: &mut ChaCha8Rng) -> &'a str {
    bank[rng.gen_range(0..bank.len())]
}

fn persona_reply(amp: f64, target: [f64; 5], rng: &mut ChaCha8Rng) -> String {
    let scores: Vec<f64> = target
        .iter()
        .map(|t| (t + rng.gen_range(-amp..=amp)).clamp(0.0, 100.0).round())
        .collect();
    let mut middles: Vec<&str> = Vec::new();
    while middles.len() < 3 {
        let m = pick(&MIDDLES, rng);
        if !middles.contains(&m) {
            middles.push(m);
        }
    }
    let body = format!(
        "{} {} {} {} {}",
        pick(&OPENERS, rng),
        middles[0],
        middles[1],
        middles[2],
        pick(&CLOSERS, rng)
    );
    let letters = ['O', 'C', 'E', 'A', 'N'];
    let names = ["Openness", "Conscientiousness", "Extraversion", "Agreeableness", "Neuroticism"];
    let style = rng.gen_range(0..20);
    let line = match style {
        0..=13 => letters
            .iter()
            .zip(&scores)
            .map(|(l, v)| format!("{l}: {v}"))
            .collect::<Vec<_>>()
            .join(", "),
        14..=16 => letters
            .iter()
            .zip(&scores)
            .map(|(l, v)| format!("{l}: {:.2}", v / 100.0))
            .collect::<Vec<_>>()
            .join(", "),
        17..=18 => names
            .iter()
            .zip(&scores)
            .map(|(n, v)| format!("{n} {v}"))
            .collect::<Vec<_>>()
            .join("; "),
        _ => letters[..4]
            .iter()
            .zip(&scores)
            .map(|(l, v)| format!("{l}: {v}"))
            .collect::<Vec<_>>()
            .join(", "),
    };
    format!("{body}\nSelf-rating: {line}")
}

fn judge_reply(text: &str) -> String {
    match parse_prediction(text) {
        Ok((t, diag)) => {
            let conf = if diag.per_trait_notes.is_empty() { 0.9 } else { 0.6 };
            let v = t.as_array();
            format!(
                "O: {}, C: {}, E: {}, A: {}, N: {}, confidence: {conf}",
                v[0], v[1], v[2], v[3], v[4]
            )
        }
        Err(_) => "The text gives too little evidence to rate.".to_string(),
    }
}
