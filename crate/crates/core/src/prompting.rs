//! Structured persona prompts with control tags, template assets, and the
//! response-only loss mask.
//!
//! Prompt layout (tag spellings are frozen in [`tags`]):
//!
//! ```text
//! <O=v><C=v><E=v><A=v><N=v><SCENE=Arena>
//! [edu] ...
//! [life] ...
//! [socctx] ...
//! [capital] ...
//! <ARENAS=Working|Family|...|Public>
//! <INSTR>
//! task-family instruction with the rendered frame scenario
//! <RESP>
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::schema::{placeholders, Arena, IsDomain, IsProfile, MscFrame, TaskFamily, Trait, TraitVector};

/// Control tag spellings, version 1.
pub mod tags {
    pub const VERSION: u32 = 1;
    pub const INSTR: &str = "<INSTR>";
    pub const RESP: &str = "<RESP>";
    pub const SCENE_PREFIX: &str = "<SCENE=";
    pub const ARENAS_PREFIX: &str = "<ARENAS=";
    pub const ARENA_SEP: &str = "|";

    pub fn trait_tag(letter: char, value: &str) -> String {
        format!("<{letter}={value}>")
    }

    pub fn scene(arena: &str) -> String {
        format!("{SCENE_PREFIX}{arena}>")
    }

    pub fn domain_label(key: &str) -> String {
        format!("[{key}]")
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("template slot `{0}` has no binding")]
    TemplateUnresolved(String),
    #[error("unknown template id `{0}`")]
    UnknownTemplate(String),
    #[error("input text contains reserved control tag `{0}`")]
    ReservedTag(String),
    #[error("token spans do not tile the text: {0}")]
    SpanMismatch(String),
    #[error("template `{id}` checksum mismatch (manifest {expected}, file {actual})")]
    ChecksumMismatch {
        id: String,
        expected: String,
        actual: String,
    },
    #[error("every arena was removed from the tag list")]
    NoArenas,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Replaces every `{{slot}}` in `template`; fails on the first unbound slot.
pub fn render(template: &str, bindings: &BTreeMap<&str, String>) -> Result<String, PromptError> {
    for slot in placeholders(template) {
        if !bindings.contains_key(slot) {
            return Err(PromptError::TemplateUnresolved(slot.to_string()));
        }
    }
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(start) = rest.find("{{") {
        let Some(end) = rest[start..].find("}}") else {
            break;
        };
        let name = rest[start + 2..start + end].trim();
        out.push_str(&rest[..start]);
        match bindings.get(name) {
            Some(v) => out.push_str(v),
            None => out.push_str(&rest[start..start + end + 2]),
        }
        rest = &rest[start + end + 2..];
    }
    out.push_str(rest);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub file: String,
    pub version: u32,
    pub sha256: String,
    #[serde(default)]
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateManifest {
    pub manifest_version: u32,
    pub templates: Vec<ManifestEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// A verified collection of text templates keyed by id.
#[derive(Debug, Clone)]
pub struct TemplateSet {
    manifest: TemplateManifest,
    texts: BTreeMap<String, String>,
}

macro_rules! bundled {
    ($($path:literal),* $(,)?) => {
        &[$(($path, include_str!(concat!("../assets/templates/", $path)))),*]
    };
}

const BUNDLED: &[(&str, &str)] = bundled!(
    "authoring/is_capital.txt",
    "authoring/is_edu.txt",
    "authoring/is_life.txt",
    "authoring/is_socctx.txt",
    "authoring/msc_family.txt",
    "authoring/msc_friendship.txt",
    "authoring/msc_learning.txt",
    "authoring/msc_public.txt",
    "authoring/msc_romantic.txt",
    "authoring/msc_solitary.txt",
    "authoring/msc_strangers.txt",
    "authoring/msc_working.txt",
    "authoring/preview.txt",
    "authoring/system.txt",
    "family/decision_probe.txt",
    "family/role_play.txt",
    "family/self_description.txt",
    "judge/trait_scoring.txt",
);

impl TemplateSet {
    fn from_parts(
        manifest: TemplateManifest,
        mut lookup: impl FnMut(&str) -> Result<String, PromptError>,
    ) -> Result<Self, PromptError> {
        let mut texts = BTreeMap::new();
        for e in &manifest.templates {
            let text = lookup(&e.file)?;
            let actual = sha256_hex(text.as_bytes());
            if actual != e.sha256 {
                return Err(PromptError::ChecksumMismatch {
                    id: e.id.clone(),
                    expected: e.sha256.clone(),
                    actual,
                });
            }
            texts.insert(e.id.clone(), text);
        }
        Ok(TemplateSet { manifest, texts })
    }

    /// Templates compiled into the binary, checked against the bundled manifest.
    pub fn bundled() -> Self {
        let manifest: TemplateManifest =
            serde_json::from_str(include_str!("../assets/templates/manifest.json"))
                .expect("bundled manifest parses");
        Self::from_parts(manifest, |file| {
            BUNDLED
                .iter()
                .find(|(p, _)| *p == file)
                .map(|(_, t)| t.to_string())
                .ok_or_else(|| PromptError::UnknownTemplate(file.to_string()))
        })
        .expect("bundled templates match their manifest")
    }

    /// Loads `dir/manifest.json` and every file it lists, verifying checksums.
    pub fn load_dir(dir: &Path) -> Result<Self, PromptError> {
        let manifest: TemplateManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        Self::from_parts(manifest, |file| Ok(std::fs::read_to_string(dir.join(file))?))
    }

    /// Recomputes checksums for every file listed in `dir/manifest.json`.
    pub fn refresh_manifest(dir: &Path) -> Result<TemplateManifest, PromptError> {
        let path = dir.join("manifest.json");
        let mut manifest: TemplateManifest =
            serde_json::from_str(&std::fs::read_to_string(&path)?)?;
        for e in &mut manifest.templates {
            let text = std::fs::read(dir.join(&e.file))?;
            let sum = sha256_hex(&text);
            if sum != e.sha256 {
                e.sha256 = sum;
                e.version += 1;
            }
        }
        let mut body = serde_json::to_string_pretty(&manifest)?;
        body.push('\n');
        std::fs::write(path, body)?;
        Ok(manifest)
    }

    pub fn manifest(&self) -> &TemplateManifest {
        &self.manifest
    }

    pub fn get(&self, id: &str) -> Result<&str, PromptError> {
        self.texts
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| PromptError::UnknownTemplate(id.to_string()))
    }

    pub fn render(&self, id: &str, bindings: &BTreeMap<&str, String>) -> Result<String, PromptError> {
        Ok(render(self.get(id)?, bindings)?.trim_end().to_string())
    }

    /// id -> checksum, for corpus manifests.
    pub fn checksums(&self) -> BTreeMap<String, String> {
        self.manifest
            .templates
            .iter()
            .map(|e| (e.id.clone(), e.sha256.clone()))
            .collect()
    }

    pub fn family_id(family: TaskFamily) -> String {
        format!("family/{}", family.key())
    }
}

/// Components left out of a prompt, for single-factor ablations.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PromptOptions {
    pub omit_domains: BTreeSet<IsDomain>,
    pub omit_arenas: BTreeSet<Arena>,
    /// IS domain the instruction should lean on; `None` means the whole profile.
    pub emphasis: Option<IsDomain>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuredPrompt {
    pub header: String,
    pub instruction_section: String,
    /// Character (not byte) index just past `<RESP>`.
    pub response_marker_offset: usize,
    pub full_text: String,
}

impl StructuredPrompt {
    pub fn checksum(&self) -> String {
        sha256_hex(self.full_text.as_bytes())
    }
}

/// Formats a percentile for a control tag: integers without a decimal point,
/// everything else in shortest round-trip form.
pub fn fmt_tag_value(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v}")
    }
}

fn check_reserved(text: &str) -> Result<(), PromptError> {
    let mut reserved = vec![
        tags::INSTR.to_string(),
        tags::RESP.to_string(),
        tags::SCENE_PREFIX.to_string(),
        tags::ARENAS_PREFIX.to_string(),
    ];
    reserved.extend(Trait::ALL.iter().map(|t| format!("<{}=", t.letter())));
    match reserved.into_iter().find(|r| text.contains(r.as_str())) {
        Some(r) => Err(PromptError::ReservedTag(r)),
        None => Ok(()),
    }
}

/// Slot bindings available to frame and family templates.
pub fn bindings<'a>(
    is: &IsProfile,
    frame: &MscFrame,
    t: &TraitVector,
    opts: &PromptOptions,
) -> BTreeMap<&'a str, String> {
    let mut b = BTreeMap::new();
    b.insert("arena", frame.arena.tag().to_string());
    b.insert("arena_title", frame.arena.title().to_string());
    b.insert("roles", frame.roles.clone());
    b.insert("counterpart", frame.counterpart.clone());
    b.insert("norms", frame.norms.join(", "));
    b.insert("stakes", frame.stakes.clone());
    b.insert("subskills", frame.subskills.join(", "));
    b.insert("feedback", frame.feedback.clone());
    for d in IsDomain::ALL {
        if !opts.omit_domains.contains(&d) {
            b.insert(d.key(), is.domain(d).to_string());
        }
    }
    for tr in Trait::ALL {
        let key = match tr {
            Trait::Openness => "o",
            Trait::Conscientiousness => "c",
            Trait::Extraversion => "e",
            Trait::Agreeableness => "a",
            Trait::Neuroticism => "n",
        };
        b.insert(key, fmt_tag_value(t.get(tr)));
    }
    let emphasis = match opts.emphasis {
        Some(d) if !opts.omit_domains.contains(&d) => {
            format!("your {}", d.title().to_lowercase())
        }
        _ => "your background as a whole".to_string(),
    };
    b.insert("emphasis", emphasis);
    b
}

pub fn build_prompt(
    templates: &TemplateSet,
    is: &IsProfile,
    frame: &MscFrame,
    t: &TraitVector,
    family: TaskFamily,
) -> Result<StructuredPrompt, PromptError> {
    build_prompt_with(templates, is, frame, t, family, &PromptOptions::default())
}

/// Builds the prompt, leaving out whatever `opts` removes.
pub fn build_prompt_with(
    templates: &TemplateSet,
    is: &IsProfile,
    frame: &MscFrame,
    t: &TraitVector,
    family: TaskFamily,
    opts: &PromptOptions,
) -> Result<StructuredPrompt, PromptError> {
    let mut b = bindings(is, frame, t, opts);
    for v in b.values() {
        check_reserved(v)?;
    }
    check_reserved(&frame.template)?;
    let scenario = render(&frame.template, &b)?;
    b.insert("scenario", scenario.trim_end().to_string());
    let instruction = templates.render(&TemplateSet::family_id(family), &b)?;
    check_reserved(&instruction)?;

    let mut header = String::new();
    for tr in Trait::ALL {
        header.push_str(&tags::trait_tag(tr.letter(), &fmt_tag_value(t.get(tr))));
    }
    header.push_str(&tags::scene(frame.arena.tag()));

    let arenas: Vec<&str> = Arena::ALL
        .iter()
        .filter(|a| !opts.omit_arenas.contains(a))
        .map(|a| a.tag())
        .collect();
    if arenas.is_empty() {
        return Err(PromptError::NoArenas);
    }

    let mut full = String::new();
    full.push_str(&header);
    full.push('\n');
    for d in IsDomain::ALL {
        if opts.omit_domains.contains(&d) {
            continue;
        }
        full.push_str(&tags::domain_label(d.key()));
        full.push(' ');
        full.push_str(is.domain(d));
        full.push('\n');
    }
    full.push_str(tags::ARENAS_PREFIX);
    full.push_str(&arenas.join(tags::ARENA_SEP));
    full.push_str(">\n");
    full.push_str(tags::INSTR);
    full.push('\n');
    full.push_str(&instruction);
    full.push('\n');
    full.push_str(tags::RESP);

    Ok(StructuredPrompt {
        header,
        instruction_section: instruction,
        response_marker_offset: full.chars().count(),
        full_text: full,
    })
}

/// Marks which tokens contribute to the training loss.
///
/// `spans` are half-open character ranges over `prompt.full_text` followed by
/// `completion`; they must tile that text exactly. A token is trained on only
/// if it starts at or after the end of `<RESP>`, so a token straddling the
/// marker is masked out.
pub fn loss_mask(
    prompt: &StructuredPrompt,
    completion: &str,
    spans: &[(usize, usize)],
) -> Result<Vec<bool>, PromptError> {
    let total = prompt.response_marker_offset + completion.chars().count();
    let mut cursor = 0;
    for (i, &(start, end)) in spans.iter().enumerate() {
        if start != cursor {
            return Err(PromptError::SpanMismatch(format!(
                "span {i} starts at {start}, expected {cursor}"
            )));
        }
        if end <= start {
            return Err(PromptError::SpanMismatch(format!("span {i} is empty")));
        }
        cursor = end;
    }
    if cursor != total {
        return Err(PromptError::SpanMismatch(format!(
            "spans cover {cursor} characters, text has {total}"
        )));
    }
    Ok(spans
        .iter()
        .map(|&(start, _)| start >= prompt.response_marker_offset)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{bundled_frames, bundled_is_profiles, validate_trait_vector, MscFrameRecord};

    fn fixture(arena: Arena) -> (TemplateSet, IsProfile, MscFrame) {
        let frame = bundled_frames().into_iter().find(|f| f.arena == arena).unwrap();
        (TemplateSet::bundled(), bundled_is_profiles().remove(0), frame)
    }

    fn t0() -> TraitVector {
        validate_trait_vector([0.0, 20.0, 40.0, 60.0, 80.0]).unwrap()
    }

    #[test]
    fn deterministic_and_tagged() {
        let (ts, is, frame) = fixture(Arena::Romantic);
        let a = build_prompt(&ts, &is, &frame, &t0(), TaskFamily::RolePlay).unwrap();
        let b = build_prompt(&ts, &is, &frame, &t0(), TaskFamily::RolePlay).unwrap();
        assert_eq!(a, b);
        assert!(a.header.contains("<O=0><C=20><E=40><A=60><N=80>"));
        assert!(a.header.contains("<SCENE=Romantic>"));
        for arena in Arena::ALL {
            assert!(a.full_text.contains(arena.tag()));
        }
        assert_eq!(a.full_text.matches("<INSTR>").count(), 1);
        assert_eq!(a.full_text.matches("<RESP>").count(), 1);
        assert!(a.full_text.find("<INSTR>") < a.full_text.find("<RESP>"));
        for l in ['O', 'C', 'E', 'A', 'N'] {
            assert_eq!(a.full_text.matches(&format!("<{l}=")).count(), 1);
        }
        assert!(a.full_text.ends_with("<RESP>"));
        assert_eq!(a.response_marker_offset, a.full_text.chars().count());
    }

    #[test]
    fn domains_serialize_in_fixed_order() {
        let (ts, is, frame) = fixture(Arena::Working);
        let p = build_prompt(&ts, &is, &frame, &t0(), TaskFamily::SelfDescription).unwrap();
        let pos: Vec<_> = ["[edu]", "[life]", "[socctx]", "[capital]"]
            .iter()
            .map(|k| p.full_text.find(k).unwrap())
            .collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn omission_drops_domain_and_arena() {
        let (ts, is, frame) = fixture(Arena::Working);
        let opts = PromptOptions {
            omit_domains: [IsDomain::Socctx].into(),
            omit_arenas: [Arena::Romantic].into(),
            emphasis: Some(IsDomain::Socctx),
        };
        let p = build_prompt_with(&ts, &is, &frame, &t0(), TaskFamily::DecisionProbe, &opts).unwrap();
        assert!(!p.full_text.contains("[socctx]"));
        assert!(!p.full_text.contains(is.domain(IsDomain::Socctx)));
        assert!(!p.full_text.contains("Romantic"));
        assert!(p.full_text.contains("your background as a whole"));
    }

    #[test]
    fn unresolved_slot_is_reported() {
        let (ts, is, _) = fixture(Arena::Working);
        let rec: MscFrameRecord = serde_json::from_str(
            r#"{"schema_version":1,"arena":"Family","roles":"r","counterpart":"c","stakes":"s","template":"Hi {{mystery}}"}"#,
        )
        .unwrap();
        let frame = MscFrame::new(rec, 0).unwrap();
        match build_prompt(&ts, &is, &frame, &t0(), TaskFamily::RolePlay) {
            Err(PromptError::TemplateUnresolved(s)) => assert_eq!(s, "mystery"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn reserved_tags_rejected() {
        let (ts, _, frame) = fixture(Arena::Working);
        let is = IsProfile::new("school <RESP> trick", "b", "c", "d").unwrap();
        assert!(matches!(
            build_prompt(&ts, &is, &frame, &t0(), TaskFamily::RolePlay),
            Err(PromptError::ReservedTag(_))
        ));
    }

    #[test]
    fn fractional_tag_values() {
        assert_eq!(fmt_tag_value(64.0), "64");
        assert_eq!(fmt_tag_value(62.5), "62.5");
        assert_eq!(fmt_tag_value(0.0), "0");
    }

    fn unit_prompt() -> StructuredPrompt {
        StructuredPrompt {
            header: String::new(),
            instruction_section: String::new(),
            response_marker_offset: 10,
            full_text: "0123456789".into(),
        }
    }

    #[test]
    fn mask_rules() {
        let p = unit_prompt();
        // header-only tokens then completion-only tokens
        let m = loss_mask(&p, "abcd", &[(0, 4), (4, 10), (10, 12), (12, 14)]).unwrap();
        assert_eq!(m, vec![false, false, true, true]);
        // straddling token (8..12) ends after the marker but starts before it
        let m = loss_mask(&p, "abcd", &[(0, 8), (8, 12), (12, 14)]).unwrap();
        assert_eq!(m, vec![false, false, true]);
        // token ending exactly at the marker
        let m = loss_mask(&p, "ab", &[(0, 10), (10, 12)]).unwrap();
        assert_eq!(m, vec![false, true]);
    }

    #[test]
    fn mask_span_errors() {
        let p = unit_prompt();
        assert!(matches!(loss_mask(&p, "ab", &[(0, 5), (6, 12)]), Err(PromptError::SpanMismatch(_))));
        assert!(matches!(loss_mask(&p, "ab", &[(0, 10)]), Err(PromptError::SpanMismatch(_))));
        assert!(matches!(loss_mask(&p, "ab", &[(0, 0), (0, 12)]), Err(PromptError::SpanMismatch(_))));
        assert!(matches!(loss_mask(&p, "ab", &[(1, 12)]), Err(PromptError::SpanMismatch(_))));
    }

    #[test]
    fn mask_counts_completion_tokens_on_real_prompt() {
        let (ts, is, frame) = fixture(Arena::Learning);
        let p = build_prompt(&ts, &is, &frame, &t0(), TaskFamily::RolePlay).unwrap();
        let completion = "I would ask for a meeting.";
        // character-level tokenization never merges across the marker
        let total = p.response_marker_offset + completion.chars().count();
        let spans: Vec<_> = (0..total).map(|i| (i, i + 1)).collect();
        let m = loss_mask(&p, completion, &spans).unwrap();
        assert_eq!(m.iter().filter(|&&x| x).count(), completion.chars().count());
    }

    #[test]
    fn bundled_templates_verify_and_render() {
        let ts = TemplateSet::bundled();
        assert_eq!(ts.manifest().templates.len(), 18);
        let (_, is, frame) = fixture(Arena::Public);
        let mut b = bindings(&is, &frame, &t0(), &PromptOptions::default());
        b.insert("background", "x".into());
        b.insert("text", "y".into());
        b.insert("scenario", "z".into());
        for e in &ts.manifest().templates {
            ts.render(&e.id, &b).unwrap();
        }
    }

    #[test]
    fn load_dir_detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/templates");
        for e in &TemplateSet::bundled().manifest().templates {
            let dst = dir.path().join(&e.file);
            std::fs::create_dir_all(dst.parent().unwrap()).unwrap();
            std::fs::copy(src.join(&e.file), dst).unwrap();
        }
        std::fs::copy(src.join("manifest.json"), dir.path().join("manifest.json")).unwrap();
        TemplateSet::load_dir(dir.path()).unwrap();
        std::fs::write(dir.path().join("judge/trait_scoring.txt"), "changed {{text}}").unwrap();
        assert!(matches!(
            TemplateSet::load_dir(dir.path()),
            Err(PromptError::ChecksumMismatch { .. })
        ));
        let m = TemplateSet::refresh_manifest(dir.path()).unwrap();
        let e = m.templates.iter().find(|e| e.id == "judge/trait_scoring").unwrap();
        assert_eq!(e.version, 2);
        TemplateSet::load_dir(dir.path()).unwrap();
    }
}
