//! Golden parser cases. Expected values were written by hand in
//! `tests/data/parser_golden.json`; the parser is never used to produce them.

use psybench::scale::{apply_scale, extract_raw_traits};
use serde::Deserialize;

#[derive(Deserialize)]
pub struct Case {
    pub id: String,
    text: String,
    values: [Option<f64>; 5],
    percent: [bool; 5],
    mentions: [usize; 5],
    pub kind: String,
    mapped: Option<[f64; 5]>,
}

pub fn cases() -> Vec<Case> {
    let raw = include_str!("../data/parser_golden.json");
    serde_json::from_str(raw).expect("golden file parses")
}

/// Returns one line per disagreement; empty means the case matches.
pub fn check(case: &Case) -> Vec<String> {
    let mut bad = Vec::new();
    let raw = extract_raw_traits(&case.text);
    if raw.values != case.values {
        bad.push(format!("values {:?} != {:?}", raw.values, case.values));
    }
    if raw.percent != case.percent {
        bad.push(format!("percent {:?} != {:?}", raw.percent, case.percent));
    }
    if raw.mentions != case.mentions {
        bad.push(format!("mentions {:?} != {:?}", raw.mentions, case.mentions));
    }
    for (i, span) in raw.spans.iter().enumerate() {
        match (span, case.values[i]) {
            (Some((a, b)), Some(_)) if a < b && *b <= case.text.len() => {}
            (None, None) => {}
            (s, v) => bad.push(format!("span {i} {s:?} for value {v:?}")),
        }
    }
    match apply_scale(&raw) {
        Ok((tv, diag)) => {
            if diag.kind.label() != case.kind {
                bad.push(format!("kind {} != {}", diag.kind.label(), case.kind));
            }
            if Some(*tv.as_array()) != case.mapped {
                bad.push(format!("mapped {:?} != {:?}", tv.as_array(), case.mapped));
            }
        }
        Err(_) => {
            if case.kind != "unparsable" || case.mapped.is_some() {
                bad.push(format!("unparsable, expected {}", case.kind));
            }
        }
    }
    bad
}

