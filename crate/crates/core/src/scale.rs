//! Trait extraction from free text and the unified percentile mapping.
//!
//! Extraction grammar, per mention:
//!
//! ```text
//! alias  := full trait name | single letter O/C/E/A/N (word-bounded)
//! sep    := ":" | "=" | "-" | whitespace        (optional for full names)
//! number := [+-]? digits [. digits] | [+-]? . digits
//! mention:= alias [closing * _ ) ]] sep number ["%"]
//! ```
//!
//! A lowercase single letter needs an explicit `:`, `=` or `-` separator so
//! prose such as "a 5 minute walk" is not read as a trait score.

use std::io::Write;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::schema::{RawPrediction, Trait, TraitVector};

/// Label written for vectors that needed clipping.
pub const CLIPPED_LABEL: &str = "unknown->percentile_clipped";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MappingKind {
    #[serde(rename = "proportion_scaled")]
    ProportionScaled,
    #[serde(rename = "percentile_passthrough")]
    PercentilePassthrough,
    #[serde(rename = "unknown->percentile_clipped")]
    UnknownPercentileClipped,
    #[serde(rename = "unparsable")]
    Unparsable,
}

impl MappingKind {
    pub fn label(self) -> &'static str {
        match self {
            MappingKind::ProportionScaled => "proportion_scaled",
            MappingKind::PercentilePassthrough => "percentile_passthrough",
            MappingKind::UnknownPercentileClipped => CLIPPED_LABEL,
            MappingKind::Unparsable => "unparsable",
        }
    }
}

impl std::fmt::Display for MappingKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingDiagnostic {
    pub kind: MappingKind,
    pub per_trait_notes: Vec<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum ScaleError {
    #[error("unparsable prediction: missing {}", .missing.iter().map(|t| t.letter().to_string()).collect::<Vec<_>>().join(","))]
    Unparsable {
        missing: Vec<Trait>,
        diagnostic: MappingDiagnostic,
    },
}

fn mention_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(concat!(
            r"(?:\b(?P<name>(?i:openness(?:\s+to\s+experience)?|conscientiousness|extraversion|extroversion|agreeableness|neuroticism))",
            r"|\b(?P<upper>[OCEAN])|\b(?P<lower>[ocean]))",
            r#"[*_)\]"']*"#,
            r"(?P<sep>\s*[:=]\s*|\s*-\s*|\s+)?",
            r"(?P<num>[+-]?(?:\d+(?:\.\d+)?|\.\d+))",
            r"(?P<pct>\s*%)?",
        ))
        .unwrap()
    })
}

fn trait_from_alias(alias: &str) -> Option<Trait> {
    let first = alias.chars().next()?.to_ascii_uppercase();
    Trait::ALL.into_iter().find(|t| t.letter() == first)
}

/// Finds the last numeric mention of every trait in `text`.
pub fn extract_raw_traits(text: &str) -> RawPrediction {
    let mut raw = RawPrediction::default();
    // `_` is a word character, so `__O__` would hide the alias from `\b`.
    // Replacing it byte-for-byte keeps spans valid for `text`.
    let scan = text.replace('_', " ");
    for caps in mention_regex().captures_iter(&scan) {
        let sep = caps.name("sep").map(|m| m.as_str().trim());
        let alias = if let Some(m) = caps.name("name") {
            m.as_str()
        } else if let Some(m) = caps.name("upper") {
            // "O2" style glued tokens are identifiers, not mentions.
            if sep.is_none() {
                continue;
            }
            m.as_str()
        } else {
            let m = caps.name("lower").unwrap();
            if !matches!(sep, Some(":") | Some("=") | Some("-")) {
                continue;
            }
            m.as_str()
        };
        let num = caps.name("num").unwrap();
        let Some(t) = trait_from_alias(alias) else {
            continue;
        };
        let Ok(value) = num.as_str().parse::<f64>() else {
            continue;
        };
        let i = t.index();
        let whole = caps.get(0).unwrap();
        raw.values[i] = Some(value);
        raw.spans[i] = Some((whole.start(), whole.end()));
        raw.percent[i] = caps.name("pct").is_some();
        raw.mentions[i] += 1;
    }
    raw
}

fn notes_for(raw: &RawPrediction) -> Vec<String> {
    let mut notes = Vec::new();
    for t in Trait::ALL {
        let n = raw.mentions[t.index()];
        if n > 1 {
            notes.push(format!("{}: {} mentions, last used", t.letter(), n));
        }
    }
    notes
}

/// Applies the unified percentile mapping, first matching branch wins:
/// all in `[0,1]` scales by 100, all in `[0,100]` passes through, anything
/// else is clipped into `[0,100]`.
///
/// A `%` suffix on any component disables the proportion branch. A
/// `%`-suffixed value inside `[0,1]` is ambiguous and takes the clip branch
/// with a note.
pub fn apply_scale(raw: &RawPrediction) -> Result<(TraitVector, MappingDiagnostic), ScaleError> {
    let mut per_trait_notes = notes_for(raw);
    let mut missing = raw.missing();
    for t in &missing {
        per_trait_notes.push(format!("{}: no alias with a number", t.letter()));
    }
    for t in Trait::ALL {
        if raw.values[t.index()].is_some_and(f64::is_nan) {
            per_trait_notes.push(format!("{}: not a number", t.letter()));
            missing.push(t);
        }
    }
    if !missing.is_empty() {
        missing.sort();
        return Err(ScaleError::Unparsable {
            missing,
            diagnostic: MappingDiagnostic {
                kind: MappingKind::Unparsable,
                per_trait_notes,
            },
        });
    }
    let x = raw.values.map(|v| v.unwrap());
    let any_pct = raw.percent.iter().any(|&p| p);
    let ambiguous_pct: Vec<Trait> = Trait::ALL
        .into_iter()
        .filter(|t| raw.percent[t.index()] && (0.0..=1.0).contains(&x[t.index()]))
        .collect();
    let in_unit = x.iter().all(|v| (0.0..=1.0).contains(v));
    let in_pct = x.iter().all(|v| (0.0..=100.0).contains(v));

    let (values, kind) = if !any_pct && in_unit {
        (x.map(|v| 100.0 * v), MappingKind::ProportionScaled)
    } else if in_pct && ambiguous_pct.is_empty() {
        let has_fraction = x.iter().any(|&v| v > 0.0 && v < 1.0);
        let has_large = x.iter().any(|&v| v > 1.0);
        if has_fraction && has_large {
            per_trait_notes.push("mixed-scale suspicion".to_string());
        }
        (x, MappingKind::PercentilePassthrough)
    } else {
        for t in ambiguous_pct {
            per_trait_notes.push(format!(
                "{}: percent-suffixed value {} inside [0,1]",
                t.letter(),
                x[t.index()]
            ));
        }
        for t in Trait::ALL {
            let v = x[t.index()];
            if !(0.0..=100.0).contains(&v) {
                per_trait_notes.push(format!("{}: {} clipped", t.letter(), v));
            }
        }
        (x.map(|v| v.clamp(0.0, 100.0)), MappingKind::UnknownPercentileClipped)
    };
    let tv = crate::schema::validate_trait_vector(values)
        .expect("every branch lands inside [0,100]");
    Ok((
        tv,
        MappingDiagnostic {
            kind,
            per_trait_notes,
        },
    ))
}

/// Extraction followed by mapping; the usual entry point for model output.
pub fn parse_prediction(text: &str) -> Result<(TraitVector, MappingDiagnostic), ScaleError> {
    apply_scale(&extract_raw_traits(text))
}

/// One line of the per-run diagnostics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticEntry {
    pub sample_id: String,
    pub kind: MappingKind,
    pub notes: Vec<String>,
}

/// Append-only JSONL writer for mapping diagnostics.
pub struct DiagnosticsLog<W: Write> {
    out: W,
}

impl<W: Write> DiagnosticsLog<W> {
    pub fn new(out: W) -> Self {
        DiagnosticsLog { out }
    }

    pub fn record(&mut self, sample_id: &str, diag: &MappingDiagnostic) -> std::io::Result<()> {
        let entry = DiagnosticEntry {
            sample_id: sample_id.to_string(),
            kind: diag.kind,
            notes: diag.per_trait_notes.clone(),
        };
        serde_json::to_writer(&mut self.out, &entry)?;
        self.out.write_all(b"\n")
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vals(raw: &RawPrediction) -> [Option<f64>; 5] {
        raw.values
    }

    #[test]
    fn letter_aliases() {
        let raw = extract_raw_traits("O: 0.8, C: 0.6, E: 0.4, A: 0.2, N: 0.1");
        assert_eq!(vals(&raw), [Some(0.8), Some(0.6), Some(0.4), Some(0.2), Some(0.1)]);
    }

    #[test]
    fn full_names() {
        let raw = extract_raw_traits(
            "Openness 64, Conscientiousness 28, Extraversion 91, Agreeableness 12, Neuroticism 55",
        );
        assert_eq!(vals(&raw), [Some(64.0), Some(28.0), Some(91.0), Some(12.0), Some(55.0)]);
    }

    #[test]
    fn prose_has_no_traits() {
        let raw = extract_raw_traits("I enjoy parties.");
        assert_eq!(vals(&raw), [None; 5]);
        let raw = extract_raw_traits("I took a 5 minute walk and ate an apple.");
        assert_eq!(vals(&raw), [None; 5]);
    }

    #[test]
    fn last_mention_wins_and_is_noted() {
        let raw = extract_raw_traits("O: 10 C: 20 E: 30 A: 40 N: 50 ... revised O: 70");
        assert_eq!(raw.values[0], Some(70.0));
        assert_eq!(raw.mentions[0], 2);
        let (_, d) = apply_scale(&raw).unwrap();
        assert!(d.per_trait_notes.iter().any(|n| n.contains("2 mentions")));
    }

    #[test]
    fn scale_branches() {
        let (v, d) = apply_scale(&RawPrediction::from_values([0.5, 0.25, 1.0, 0.0, 0.75])).unwrap();
        assert_eq!(v.as_array(), &[50.0, 25.0, 100.0, 0.0, 75.0]);
        assert_eq!(d.kind, MappingKind::ProportionScaled);

        let (v, d) = apply_scale(&RawPrediction::from_values([64.0, 28.0, 91.0, 12.0, 55.0])).unwrap();
        assert_eq!(v.as_array(), &[64.0, 28.0, 91.0, 12.0, 55.0]);
        assert_eq!(d.kind, MappingKind::PercentilePassthrough);

        let (v, d) = apply_scale(&RawPrediction::from_values([120.0, -5.0, 50.0, 50.0, 50.0])).unwrap();
        assert_eq!(v.as_array(), &[100.0, 0.0, 50.0, 50.0, 50.0]);
        assert_eq!(d.kind, MappingKind::UnknownPercentileClipped);
        assert_eq!(d.kind.label(), "unknown->percentile_clipped");
        assert_eq!(
            serde_json::to_string(&d.kind).unwrap(),
            "\"unknown->percentile_clipped\""
        );

        let (v, d) = apply_scale(&RawPrediction::from_values([1.0; 5])).unwrap();
        assert_eq!(v.as_array(), &[100.0; 5]);
        assert_eq!(d.kind, MappingKind::ProportionScaled);
    }

    #[test]
    fn mixed_scale_passes_through_with_note() {
        let (v, d) = apply_scale(&RawPrediction::from_values([0.5, 60.0, 40.0, 20.0, 10.0])).unwrap();
        assert_eq!(v.as_array(), &[0.5, 60.0, 40.0, 20.0, 10.0]);
        assert_eq!(d.kind, MappingKind::PercentilePassthrough);
        assert!(d.per_trait_notes.contains(&"mixed-scale suspicion".to_string()));
    }

    #[test]
    fn percent_sign_blocks_proportion_branch() {
        let raw = extract_raw_traits("O: 1%, C: 1, E: 1, A: 1, N: 1");
        assert!(raw.percent[0]);
        let (v, d) = apply_scale(&raw).unwrap();
        // ambiguous % value inside [0,1] is clipped, not scaled
        assert_eq!(d.kind, MappingKind::UnknownPercentileClipped);
        assert_eq!(v.as_array(), &[1.0; 5]);

        let raw = extract_raw_traits("O: 50%, C: 0.5, E: 1, A: 0, N: 0.2");
        let (v, d) = apply_scale(&raw).unwrap();
        assert_eq!(d.kind, MappingKind::PercentilePassthrough);
        assert_eq!(v.as_array(), &[50.0, 0.5, 1.0, 0.0, 0.2]);
    }

    #[test]
    fn unparsable_reports_missing() {
        let raw = extract_raw_traits("O: 1, C: 2, E: 3");
        match apply_scale(&raw) {
            Err(ScaleError::Unparsable { missing, diagnostic }) => {
                assert_eq!(missing, vec![Trait::Agreeableness, Trait::Neuroticism]);
                assert_eq!(diagnostic.kind, MappingKind::Unparsable);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn diagnostics_log_is_jsonl() {
        let mut log = DiagnosticsLog::new(Vec::new());
        let (_, d) = apply_scale(&RawPrediction::from_values([120.0, 0.0, 0.0, 0.0, 0.0])).unwrap();
        log.record("s-1", &d).unwrap();
        let out = String::from_utf8(log.into_inner()).unwrap();
        let v: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
        assert_eq!(v["sample_id"], "s-1");
        assert_eq!(v["kind"], "unknown->percentile_clipped");
        assert!(v["notes"].is_array());
    }

    proptest! {
        #[test]
        fn output_always_in_range(x in proptest::array::uniform5(-1e6f64..1e6)) {
            let (v, _) = apply_scale(&RawPrediction::from_values(x)).unwrap();
            prop_assert!(v.as_array().iter().all(|c| (0.0..=100.0).contains(c)));
        }

        #[test]
        fn proportions_scale_exactly(x in proptest::array::uniform5(0.0f64..=1.0)) {
            let (v, d) = apply_scale(&RawPrediction::from_values(x)).unwrap();
            prop_assert_eq!(d.kind, MappingKind::ProportionScaled);
            for k in 0..5 {
                prop_assert_eq!(v.as_array()[k], 100.0 * x[k]);
            }
        }

        // Idempotence holds wherever the output leaves [0,1]^5; inside that
        // cube the proportion branch necessarily fires again.
        #[test]
        fn idempotent_in_percentile_space(x in proptest::array::uniform5(-50f64..150.0)) {
            let (v, _) = apply_scale(&RawPrediction::from_values(x)).unwrap();
            prop_assume!(v.as_array().iter().any(|&c| c > 1.0));
            let (w, d) = apply_scale(&RawPrediction::from_values(*v.as_array())).unwrap();
            prop_assert_eq!(v, w);
            prop_assert_eq!(d.kind, MappingKind::PercentilePassthrough);
        }

        #[test]
        fn extraction_ignores_order_and_case(
            vals in proptest::array::uniform5(0u32..=100),
            perm in Just([0usize, 1, 2, 3, 4]).prop_shuffle(),
            upper in proptest::bool::ANY,
        ) {
            let names = ["Openness", "Conscientiousness", "Extraversion", "Agreeableness", "Neuroticism"];
            let text = perm
                .iter()
                .map(|&i| {
                    let n = if upper { names[i].to_uppercase() } else { names[i].to_lowercase() };
                    format!("{n}: {}", vals[i])
                })
                .collect::<Vec<_>>()
                .join("; ");
            let raw = extract_raw_traits(&text);
            for k in 0..5 {
                prop_assert_eq!(raw.values[k], Some(vals[k] as f64));
            }
        }
    }
}
