//! Domain records: Big Five trait vectors, Individual Structure profiles,
//! Multi-Scenario Contexting frames, and the synthesized sample type.
//!
//! Every record is immutable after construction. Constructors validate, so a
//! value of one of these types always satisfies its invariants.

use std::fmt;
use std::io::BufRead;
use std::path::Path;
use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Version tag every JSONL record must carry.
pub const SCHEMA_VERSION: u32 = 1;

/// Per-trait discretization used to build the configuration grid.
pub const GRID_LEVELS: [f64; 6] = [0.0, 20.0, 40.0, 60.0, 80.0, 100.0];

/// Number of points in the full grid (6^5).
pub const GRID_LEN: usize = 7_776;

#[derive(Debug, thiserror::Error)]
pub enum SchemaError {
    #[error("trait component(s) out of [0,100]: {}", fmt_offenders(.0))]
    OutOfRange(Vec<(Trait, f64)>),
    #[error("trait component {0} is not finite")]
    NonFinite(Trait),
    #[error("requested {k} configurations but the grid only has {len}")]
    KTooLarge { k: usize, len: usize },
    #[error("IS domain `{0}` is empty")]
    EmptyField(IsDomain),
    #[error("IS domain `{domain}` leaks trait information: {matched:?}")]
    Leakage { domain: IsDomain, matched: String },
    #[error("frame template has no {{{{slot}}}} placeholder")]
    NoPlaceholder,
    #[error("frame field `{0}` is empty")]
    EmptyFrameField(&'static str),
    #[error("unsupported schema_version {found} (expected {SCHEMA_VERSION})")]
    SchemaVersion { found: u32 },
    #[error("record id {given} does not match content hash {computed}")]
    IdMismatch { given: String, computed: String },
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: {source}")]
    Record {
        line: usize,
        #[source]
        source: Box<SchemaError>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn fmt_offenders(v: &[(Trait, f64)]) -> String {
    v.iter()
        .map(|(t, x)| format!("{}={}", t.letter(), x))
        .collect::<Vec<_>>()
        .join(", ")
}

/// One of the five Big Five dimensions, in canonical (O, C, E, A, N) order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Trait {
    Openness,
    Conscientiousness,
    Extraversion,
    Agreeableness,
    Neuroticism,
}

impl Trait {
    pub const ALL: [Trait; 5] = [
        Trait::Openness,
        Trait::Conscientiousness,
        Trait::Extraversion,
        Trait::Agreeableness,
        Trait::Neuroticism,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn letter(self) -> char {
        match self {
            Trait::Openness => 'O',
            Trait::Conscientiousness => 'C',
            Trait::Extraversion => 'E',
            Trait::Agreeableness => 'A',
            Trait::Neuroticism => 'N',
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Trait::Openness => "openness",
            Trait::Conscientiousness => "conscientiousness",
            Trait::Extraversion => "extraversion",
            Trait::Agreeableness => "agreeableness",
            Trait::Neuroticism => "neuroticism",
        }
    }
}

impl fmt::Display for Trait {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

/// A Big Five profile in percentile space, every component in `[0, 100]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TraitVectorRepr", into = "TraitVectorRepr")]
pub struct TraitVector([f64; 5]);

#[derive(Serialize, Deserialize)]
struct TraitVectorRepr {
    o: f64,
    c: f64,
    e: f64,
    a: f64,
    n: f64,
}

impl TryFrom<TraitVectorRepr> for TraitVector {
    type Error = SchemaError;
    fn try_from(r: TraitVectorRepr) -> Result<Self, Self::Error> {
        validate_trait_vector([r.o, r.c, r.e, r.a, r.n])
    }
}

impl From<TraitVector> for TraitVectorRepr {
    fn from(v: TraitVector) -> Self {
        let [o, c, e, a, n] = v.0;
        TraitVectorRepr { o, c, e, a, n }
    }
}

/// Checks five raw components and wraps them as a [`TraitVector`].
///
/// Non-finite values are rejected before range checks. All out-of-range
/// components are reported together.
pub fn validate_trait_vector(v: [f64; 5]) -> Result<TraitVector, SchemaError> {
    for t in Trait::ALL {
        if !v[t.index()].is_finite() {
            return Err(SchemaError::NonFinite(t));
        }
    }
    let offenders: Vec<_> = Trait::ALL
        .iter()
        .filter(|t| !(0.0..=100.0).contains(&v[t.index()]))
        .map(|&t| (t, v[t.index()]))
        .collect();
    if offenders.is_empty() {
        Ok(TraitVector(v))
    } else {
        Err(SchemaError::OutOfRange(offenders))
    }
}

impl TraitVector {
    pub fn new(o: f64, c: f64, e: f64, a: f64, n: f64) -> Result<Self, SchemaError> {
        validate_trait_vector([o, c, e, a, n])
    }

    pub fn as_array(&self) -> &[f64; 5] {
        &self.0
    }

    pub fn get(&self, t: Trait) -> f64 {
        self.0[t.index()]
    }

    pub fn o(&self) -> f64 {
        self.0[0]
    }
    pub fn c(&self) -> f64 {
        self.0[1]
    }
    pub fn e(&self) -> f64 {
        self.0[2]
    }
    pub fn a(&self) -> f64 {
        self.0[3]
    }
    pub fn n(&self) -> f64 {
        self.0[4]
    }
}

/// Raw extracted trait values before scale unification.
///
/// A component is `None` exactly when no alias with a number was found.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RawPrediction {
    pub values: [Option<f64>; 5],
    /// Byte span of the matched mention in the source text, per trait.
    pub spans: [Option<(usize, usize)>; 5],
    /// True when the matched number carried a `%` suffix.
    pub percent: [bool; 5],
    /// Number of alias matches seen per trait (the last one wins).
    pub mentions: [usize; 5],
}

impl RawPrediction {
    pub fn from_values(values: [f64; 5]) -> Self {
        RawPrediction {
            values: values.map(Some),
            ..Default::default()
        }
    }

    pub fn get(&self, t: Trait) -> Option<f64> {
        self.values[t.index()]
    }

    pub fn missing(&self) -> Vec<Trait> {
        Trait::ALL
            .into_iter()
            .filter(|t| self.values[t.index()].is_none())
            .collect()
    }

    pub fn is_complete(&self) -> bool {
        self.values.iter().all(Option::is_some)
    }
}

/// Iterator over the 6^5 trait grid, lexicographic with O outermost.
#[derive(Debug, Clone)]
pub struct Grid {
    next: usize,
}

/// Returns the configuration at position `index` of the grid, or `None`
/// past the end.
pub fn grid_point(index: usize) -> Option<TraitVector> {
    if index >= GRID_LEN {
        return None;
    }
    let mut rem = index;
    let mut v = [0.0; 5];
    for slot in (0..5).rev() {
        v[slot] = GRID_LEVELS[rem % 6];
        rem /= 6;
    }
    Some(TraitVector(v))
}

impl Iterator for Grid {
    type Item = TraitVector;
    fn next(&mut self) -> Option<TraitVector> {
        let p = grid_point(self.next)?;
        self.next += 1;
        Some(p)
    }
    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = GRID_LEN - self.next.min(GRID_LEN);
        (left, Some(left))
    }
}

impl ExactSizeIterator for Grid {}

pub fn enumerate_grid() -> Grid {
    Grid { next: 0 }
}

/// Draws `k` distinct configurations uniformly without replacement.
pub fn subset_configs(
    grid: &[TraitVector],
    k: usize,
    seed: u64,
) -> Result<Vec<TraitVector>, SchemaError> {
    if k > grid.len() {
        return Err(SchemaError::KTooLarge { k, len: grid.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, grid.len(), k)
        .into_iter()
        .map(|i| grid[i])
        .collect())
}

/// The four Individual Structure domains, in serialization order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IsDomain {
    Edu,
    Life,
    Socctx,
    Capital,
}

impl IsDomain {
    pub const ALL: [IsDomain; 4] = [
        IsDomain::Edu,
        IsDomain::Life,
        IsDomain::Socctx,
        IsDomain::Capital,
    ];

    pub fn key(self) -> &'static str {
        match self {
            IsDomain::Edu => "edu",
            IsDomain::Life => "life",
            IsDomain::Socctx => "socctx",
            IsDomain::Capital => "capital",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            IsDomain::Edu => "Educational Trajectory",
            IsDomain::Life => "Life Experience",
            IsDomain::Socctx => "Socioeconomic Context",
            IsDomain::Capital => "Cultural Capital",
        }
    }

    /// Accepts the short key or the full title, case-insensitively.
    pub fn parse(s: &str) -> Option<IsDomain> {
        let s = s.trim();
        IsDomain::ALL
            .into_iter()
            .find(|d| s.eq_ignore_ascii_case(d.key()) || s.eq_ignore_ascii_case(d.title()))
    }
}

impl fmt::Display for IsDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// The eight social arenas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Arena {
    Working,
    Family,
    Friendship,
    Strangers,
    Solitary,
    Romantic,
    Learning,
    Public,
}

impl Arena {
    pub const ALL: [Arena; 8] = [
        Arena::Working,
        Arena::Family,
        Arena::Friendship,
        Arena::Strangers,
        Arena::Solitary,
        Arena::Romantic,
        Arena::Learning,
        Arena::Public,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Arena::Working => "Working",
            Arena::Family => "Family",
            Arena::Friendship => "Friendship",
            Arena::Strangers => "Strangers",
            Arena::Solitary => "Solitary",
            Arena::Romantic => "Romantic",
            Arena::Learning => "Learning",
            Arena::Public => "Public",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Arena::Working => "Working Interactions",
            Arena::Family => "Family Interactions",
            Arena::Friendship => "Friendship & Informal Socialization",
            Arena::Strangers => "Interactions with Strangers",
            Arena::Solitary => "Solitary Reflection & Intrapersonal Discourse",
            Arena::Romantic => "Romantic and Intimate Communication",
            Arena::Learning => "Learning and Intellectual Engagement",
            Arena::Public => "Public Communication & Presentation",
        }
    }

    /// Accepts the tag or the full title (`&` and `and` interchangeable),
    /// case-insensitively.
    pub fn parse(s: &str) -> Option<Arena> {
        let norm = |x: &str| x.trim().to_ascii_lowercase().replace(" and ", " & ");
        let s = norm(s);
        Arena::ALL
            .into_iter()
            .find(|a| s == norm(a.tag()) || s == norm(a.title()))
    }
}

impl fmt::Display for Arena {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

fn leakage_patterns() -> &'static (Regex, Regex) {
    static RE: OnceLock<(Regex, Regex)> = OnceLock::new();
    RE.get_or_init(|| {
        (
            Regex::new(r"(?i)openness|conscientiousness|extraversion|agreeableness|neuroticism")
                .unwrap(),
            Regex::new(r"\b[OCEAN]\s*[:=]?\s*[-+]?\d").unwrap(),
        )
    })
}

/// Returns the first trait-name or trait-score mention found in `text`.
pub fn scan_leakage(text: &str) -> Option<String> {
    let (names, scores) = leakage_patterns();
    names
        .find(text)
        .or_else(|| scores.find(text))
        .map(|m| m.as_str().to_string())
}

/// A four-domain Individual Structure profile.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IsProfile {
    id: String,
    edu: String,
    life: String,
    socctx: String,
    capital: String,
}

#[derive(Deserialize)]
struct IsProfileRecord {
    schema_version: u32,
    #[serde(default)]
    id: Option<String>,
    edu: String,
    life: String,
    socctx: String,
    capital: String,
}

impl IsProfile {
    pub fn new(
        edu: impl Into<String>,
        life: impl Into<String>,
        socctx: impl Into<String>,
        capital: impl Into<String>,
    ) -> Result<Self, SchemaError> {
        let (edu, life, socctx, capital) = (edu.into(), life.into(), socctx.into(), capital.into());
        for (domain, text) in IsDomain::ALL.into_iter().zip([&edu, &life, &socctx, &capital]) {
            if text.trim().is_empty() {
                return Err(SchemaError::EmptyField(domain));
            }
            if let Some(matched) = scan_leakage(text) {
                return Err(SchemaError::Leakage { domain, matched });
            }
        }
        let id = content_id(&[&edu, &life, &socctx, &capital]);
        Ok(IsProfile {
            id,
            edu,
            life,
            socctx,
            capital,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn domain(&self, d: IsDomain) -> &str {
        match d {
            IsDomain::Edu => &self.edu,
            IsDomain::Life => &self.life,
            IsDomain::Socctx => &self.socctx,
            IsDomain::Capital => &self.capital,
        }
    }

    fn from_record(r: IsProfileRecord) -> Result<Self, SchemaError> {
        if r.schema_version != SCHEMA_VERSION {
            return Err(SchemaError::SchemaVersion {
                found: r.schema_version,
            });
        }
        let p = IsProfile::new(r.edu, r.life, r.socctx, r.capital)?;
        match r.id {
            Some(given) if given != p.id => Err(SchemaError::IdMismatch {
                given,
                computed: p.id,
            }),
            _ => Ok(p),
        }
    }
}

fn content_id(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0x1f]);
    }
    hex::encode(&h.finalize()[..8])
}

/// A role-relationship-norm frame belonging to one arena.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MscFrame {
    pub id: String,
    pub arena: Arena,
    pub roles: String,
    pub counterpart: String,
    pub norms: Vec<String>,
    pub stakes: String,
    pub subskills: Vec<String>,
    pub template: String,
    pub feedback: String,
}

#[derive(Debug, Clone, Deserialize)]
pub struct MscFrameRecord {
    pub schema_version: u32,
    pub arena: Arena,
    pub roles: String,
    pub counterpart: String,
    #[serde(default)]
    pub norms: Vec<String>,
    pub stakes: String,
    #[serde(default)]
    pub subskills: Vec<String>,
    pub template: String,
    #[serde(default)]
    pub feedback: String,
}

/// Names of the `{{slot}}` placeholders in `template`, in order of appearance.
pub fn placeholders(template: &str) -> Vec<&str> {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"\{\{\s*([A-Za-z_][A-Za-z0-9_]*)\s*\}\}").unwrap());
    re.captures_iter(template)
        .map(|c| c.get(1).unwrap().as_str())
        .collect()
}

impl MscFrame {
    /// Builds a frame; `index` is its position among frames of the same arena.
    pub fn new(record: MscFrameRecord, index: usize) -> Result<Self, SchemaError> {
        if record.schema_version != SCHEMA_VERSION {
            return Err(SchemaError::SchemaVersion {
                found: record.schema_version,
            });
        }
        for (name, v) in [
            ("roles", &record.roles),
            ("counterpart", &record.counterpart),
            ("stakes", &record.stakes),
        ] {
            if v.trim().is_empty() {
                return Err(SchemaError::EmptyFrameField(name));
            }
        }
        if placeholders(&record.template).is_empty() {
            return Err(SchemaError::NoPlaceholder);
        }
        Ok(MscFrame {
            id: format!("{}-{}", record.arena.tag(), index),
            arena: record.arena,
            roles: record.roles,
            counterpart: record.counterpart,
            norms: record.norms,
            stakes: record.stakes,
            subskills: record.subskills,
            template: record.template,
            feedback: record.feedback,
        })
    }
}

/// The three supervision task families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    SelfDescription,
    RolePlay,
    DecisionProbe,
}

impl TaskFamily {
    pub const ALL: [TaskFamily; 3] = [
        TaskFamily::SelfDescription,
        TaskFamily::RolePlay,
        TaskFamily::DecisionProbe,
    ];

    pub fn key(self) -> &'static str {
        match self {
            TaskFamily::SelfDescription => "self_description",
            TaskFamily::RolePlay => "role_play",
            TaskFamily::DecisionProbe => "decision_probe",
        }
    }

    pub fn parse(s: &str) -> Option<TaskFamily> {
        TaskFamily::ALL.into_iter().find(|f| f.key() == s.trim())
    }
}

/// Upper bound (exclusive) on `replicate_index`.
pub const MAX_REPLICATES: u8 = 5;

/// One synthesized supervision instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonaSample {
    pub id: String,
    pub prompt: String,
    pub completion: String,
    pub target: TraitVector,
    pub task_family: TaskFamily,
    pub is_id: String,
    pub frame_id: String,
    pub arena: Arena,
    /// IS domain the instruction asks the persona to draw on; second axis of
    /// the stratification.
    pub emphasis: IsDomain,
    pub replicate_index: u8,
    #[serde(default)]
    pub scorer_traits: Option<TraitVector>,
    #[serde(default)]
    pub scorer_confidence: Option<f64>,
    #[serde(default)]
    pub diagnostics: Vec<String>,
}

/// Pluggable text encoder for IS profiles, used for indexing and analysis.
/// No default model is shipped.
pub trait ProfileEncoder {
    fn encode(&self, profile: &IsProfile) -> Vec<f32>;
}

fn read_jsonl_lines<R: BufRead, T, F>(reader: R, mut f: F) -> Result<Vec<T>, SchemaError>
where
    F: FnMut(usize, &str) -> Result<T, SchemaError>,
{
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(f(i + 1, &line)?);
    }
    Ok(out)
}

fn wrap(line: usize) -> impl Fn(SchemaError) -> SchemaError {
    move |e| match e {
        SchemaError::Json { .. } | SchemaError::Record { .. } => e,
        other => SchemaError::Record {
            line,
            source: Box::new(other),
        },
    }
}

pub fn read_is_profiles<R: BufRead>(reader: R) -> Result<Vec<IsProfile>, SchemaError> {
    read_jsonl_lines(reader, |line, s| {
        let rec: IsProfileRecord =
            serde_json::from_str(s).map_err(|source| SchemaError::Json { line, source })?;
        IsProfile::from_record(rec).map_err(wrap(line))
    })
}

/// Reads frames; ids are assigned per arena in file order.
pub fn read_frames<R: BufRead>(reader: R) -> Result<Vec<MscFrame>, SchemaError> {
    let mut counts = [0usize; 8];
    read_jsonl_lines(reader, |line, s| {
        let rec: MscFrameRecord =
            serde_json::from_str(s).map_err(|source| SchemaError::Json { line, source })?;
        let slot = rec.arena as usize;
        let frame = MscFrame::new(rec, counts[slot]).map_err(wrap(line))?;
        counts[slot] += 1;
        Ok(frame)
    })
}

pub fn load_is_profiles(path: &Path) -> Result<Vec<IsProfile>, SchemaError> {
    read_is_profiles(std::io::BufReader::new(std::fs::File::open(path)?))
}

pub fn load_frames(path: &Path) -> Result<Vec<MscFrame>, SchemaError> {
    read_frames(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// IS profiles shipped with the crate.
pub fn bundled_is_profiles() -> Vec<IsProfile> {
    read_is_profiles(include_str!("../assets/is_profiles.jsonl").as_bytes())
        .expect("bundled IS profiles are valid")
}

/// MSC frames shipped with the crate, at least one per arena.
pub fn bundled_frames() -> Vec<MscFrame> {
    read_frames(include_str!("../assets/msc_frames.jsonl").as_bytes())
        .expect("bundled MSC frames are valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn validate_accepts_grid_member_and_boundary() {
        let v = validate_trait_vector([0.0, 20.0, 40.0, 60.0, 80.0]).unwrap();
        assert_eq!(v.as_array(), &[0.0, 20.0, 40.0, 60.0, 80.0]);
        assert!(validate_trait_vector([100.0; 5]).is_ok());
    }

    #[test]
    fn validate_names_offending_component() {
        match validate_trait_vector([50.0, 50.0, 50.0, 50.0, 101.0]) {
            Err(SchemaError::OutOfRange(v)) => assert_eq!(v, vec![(Trait::Neuroticism, 101.0)]),
            other => panic!("unexpected {other:?}"),
        }
        match validate_trait_vector([-1.0, 50.0, 200.0, 50.0, 50.0]) {
            Err(SchemaError::OutOfRange(v)) => assert_eq!(v.len(), 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(
            validate_trait_vector([50.0, f64::NAN, 50.0, 50.0, 50.0]),
            Err(SchemaError::NonFinite(Trait::Conscientiousness))
        ));
        assert!(matches!(
            validate_trait_vector([f64::INFINITY, 0.0, 0.0, 0.0, 0.0]),
            Err(SchemaError::NonFinite(Trait::Openness))
        ));
    }

    #[test]
    fn trait_vector_serde_validates() {
        let v = TraitVector::new(1.0, 2.0, 3.0, 4.0, 5.0).unwrap();
        let s = serde_json::to_string(&v).unwrap();
        assert_eq!(s, r#"{"o":1.0,"c":2.0,"e":3.0,"a":4.0,"n":5.0}"#);
        assert_eq!(serde_json::from_str::<TraitVector>(&s).unwrap(), v);
        assert!(serde_json::from_str::<TraitVector>(r#"{"o":1,"c":2,"e":3,"a":4,"n":500}"#).is_err());
    }

    #[test]
    fn grid_shape() {
        let g: Vec<_> = enumerate_grid().collect();
        assert_eq!(g.len(), GRID_LEN);
        assert_eq!(g.len() * MAX_REPLICATES as usize, 38_880);
        assert_eq!(g[0].as_array(), &[0.0; 5]);
        assert_eq!(g[1].as_array(), &[0.0, 0.0, 0.0, 0.0, 20.0]);
        assert_eq!(g[6].as_array(), &[0.0, 0.0, 0.0, 20.0, 0.0]);
        assert_eq!(g[GRID_LEN - 1].as_array(), &[100.0; 5]);
        let uniq: HashSet<_> = g.iter().map(|v| v.as_array().map(|x| x as u8)).collect();
        assert_eq!(uniq.len(), GRID_LEN);
        assert!(g
            .iter()
            .all(|v| v.as_array().iter().all(|x| GRID_LEVELS.contains(x))));
        // lexicographic
        assert!(g.windows(2).all(|w| w[0].as_array() < w[1].as_array()));
        assert_eq!(enumerate_grid().len(), GRID_LEN);
    }

    #[test]
    fn subset_is_distinct_and_deterministic() {
        let g: Vec<_> = enumerate_grid().collect();
        let a = subset_configs(&g, 1000, 7).unwrap();
        let b = subset_configs(&g, 1000, 7).unwrap();
        assert_eq!(a, b);
        let uniq: HashSet<_> = a.iter().map(|v| v.as_array().map(|x| x as u8)).collect();
        assert_eq!(uniq.len(), 1000);
        let full = subset_configs(&g, GRID_LEN, 3).unwrap();
        let fs: HashSet<_> = full.iter().map(|v| v.as_array().map(|x| x as u8)).collect();
        assert_eq!(fs.len(), GRID_LEN);
        assert!(matches!(
            subset_configs(&g, GRID_LEN + 1, 0),
            Err(SchemaError::KTooLarge { .. })
        ));
        assert_ne!(subset_configs(&g, 1000, 8).unwrap(), a);
    }

    #[test]
    fn leakage_scan() {
        assert!(scan_leakage("Grew up near the harbour, first in family at college.").is_none());
        assert_eq!(scan_leakage("known for OPENNESS to ideas").as_deref(), Some("OPENNESS"));
        assert!(scan_leakage("Scored N: 80 on a quiz").is_some());
        assert!(scan_leakage("my profile is O=64").is_some());
        assert!(scan_leakage("a 3 week trip").is_none());
        let err = IsProfile::new("school", "Neuroticism runs high", "x", "y").unwrap_err();
        assert!(matches!(err, SchemaError::Leakage { domain: IsDomain::Life, .. }));
        assert!(matches!(
            IsProfile::new("school", " ", "x", "y"),
            Err(SchemaError::EmptyField(IsDomain::Life))
        ));
    }

    #[test]
    fn is_id_is_content_hash() {
        let a = IsProfile::new("a", "b", "c", "d").unwrap();
        let b = IsProfile::new("a", "b", "c", "d").unwrap();
        let c = IsProfile::new("a", "b", "c", "e").unwrap();
        assert_eq!(a.id(), b.id());
        assert_ne!(a.id(), c.id());
        // field boundaries matter
        let d = IsProfile::new("ab", "", "c", "d");
        assert!(d.is_err());
        assert_eq!(a.id().len(), 16);
    }

    #[test]
    fn jsonl_loading_requires_schema_version() {
        let ok = r#"{"schema_version":1,"edu":"a","life":"b","socctx":"c","capital":"d"}"#;
        assert_eq!(read_is_profiles(ok.as_bytes()).unwrap().len(), 1);
        let missing = r#"{"edu":"a","life":"b","socctx":"c","capital":"d"}"#;
        assert!(matches!(
            read_is_profiles(missing.as_bytes()),
            Err(SchemaError::Json { line: 1, .. })
        ));
        let wrong = r#"{"schema_version":2,"edu":"a","life":"b","socctx":"c","capital":"d"}"#;
        assert!(read_is_profiles(wrong.as_bytes()).is_err());
        let bad_id = r#"{"schema_version":1,"id":"nope","edu":"a","life":"b","socctx":"c","capital":"d"}"#;
        assert!(read_is_profiles(bad_id.as_bytes()).is_err());
    }

    #[test]
    fn frames_need_placeholder_and_get_arena_ids() {
        let src = concat!(
            r#"{"schema_version":1,"arena":"Working","roles":"manager-report","counterpart":"higher power","norms":["deference"],"stakes":"task","subskills":["negotiation"],"template":"As {{roles}}, respond.","feedback":"ok"}"#,
            "\n",
            r#"{"schema_version":1,"arena":"Working","roles":"peer-peer","counterpart":"equal","norms":[],"stakes":"relationship","subskills":[],"template":"{{stakes}}","feedback":""}"#,
            "\n"
        );
        let frames = read_frames(src.as_bytes()).unwrap();
        assert_eq!(frames[0].id, "Working-0");
        assert_eq!(frames[1].id, "Working-1");
        let bad = r#"{"schema_version":1,"arena":"Family","roles":"r","counterpart":"c","stakes":"s","template":"no slots"}"#;
        assert!(read_frames(bad.as_bytes()).is_err());
        let bad_arena = r#"{"schema_version":1,"arena":"Office","roles":"r","counterpart":"c","stakes":"s","template":"{{x}}"}"#;
        assert!(read_frames(bad_arena.as_bytes()).is_err());
    }

    #[test]
    fn name_parsing() {
        assert_eq!(Arena::parse("romantic"), Some(Arena::Romantic));
        assert_eq!(
            Arena::parse("Friendship & Informal Socialization"),
            Some(Arena::Friendship)
        );
        assert_eq!(
            Arena::parse("Solitary Reflection and Intrapersonal Discourse"),
            Some(Arena::Solitary)
        );
        assert_eq!(IsDomain::parse("Socioeconomic Context"), Some(IsDomain::Socctx));
        assert_eq!(IsDomain::parse("EDU"), Some(IsDomain::Edu));
        assert_eq!(IsDomain::parse("hobbies"), None);
    }

    #[test]
    fn bundled_assets_cover_all_arenas() {
        let frames = bundled_frames();
        for a in Arena::ALL {
            assert!(frames.iter().any(|f| f.arena == a), "no frame for {a}");
        }
        assert!(!bundled_is_profiles().is_empty());
    }

    proptest::proptest! {
        #[test]
        fn validate_is_idempotent(v in proptest::array::uniform5(0.0f64..=100.0)) {
            let once = validate_trait_vector(v).unwrap();
            let twice = validate_trait_vector(*once.as_array()).unwrap();
            proptest::prop_assert_eq!(once, twice);
        }
    }
}
