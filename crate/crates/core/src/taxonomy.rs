//! Machine-readable knowledge base of link-layer attack techniques.
//!
//! The knowledge base maps attack objectives (entry points) to techniques,
//! sub-techniques, tools, mitigations, and the indicator-of-compromise
//! classes each technique is expected to leave behind. It is the lookup
//! side of the detection engine: monitors produce findings, and
//! [`rank_candidates`] turns findings back into an ordered list of
//! technique candidates for an investigator.
//!
//! The canonical knowledge base ships with the crate (see
//! [`KnowledgeBase::canonical`]) and can be extended by editing the TOML
//! file without code changes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ioc::IoCFinding;

/// Entry point an attacker uses to reach the quantum link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AttackObjective {
    /// The link medium itself (free-space path, fibre plant).
    Environment,
    /// The transmitter's photon source.
    SourceOfPhotons,
    /// The receiver's single-photon detectors.
    DetectorsOfPhotons,
}

impl AttackObjective {
    pub const ALL: [AttackObjective; 3] = [
        AttackObjective::Environment,
        AttackObjective::SourceOfPhotons,
        AttackObjective::DetectorsOfPhotons,
    ];

    /// Stable wire token, used in knowledge-base files and reports.
    pub fn token(&self) -> &'static str {
        match self {
            AttackObjective::Environment => "environment",
            AttackObjective::SourceOfPhotons => "source-of-photons",
            AttackObjective::DetectorsOfPhotons => "detectors-of-photons",
        }
    }

    pub fn parse(token: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|o| o.token() == token)
    }
}

impl fmt::Display for AttackObjective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl Serialize for AttackObjective {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.token())
    }
}

impl<'de> Deserialize<'de> for AttackObjective {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let token = String::deserialize(d)?;
        AttackObjective::parse(&token)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown objective token `{token}`")))
    }
}

/// Sub-kind of the real-time characterization indicator class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RealTimeKind {
    Afterpulse,
    Deadtime,
    Photocurrent,
    PhotonStatistics,
}

/// Indicator-of-compromise class a monitor can emit and a technique can be
/// linked to. `RealTime` carries exactly four sub-kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum IoCClass {
    Qber,
    RealTime(RealTimeKind),
    ReceivedPower,
}

impl IoCClass {
    pub const ALL: [IoCClass; 6] = [
        IoCClass::Qber,
        IoCClass::RealTime(RealTimeKind::Afterpulse),
        IoCClass::RealTime(RealTimeKind::Deadtime),
        IoCClass::RealTime(RealTimeKind::Photocurrent),
        IoCClass::RealTime(RealTimeKind::PhotonStatistics),
        IoCClass::ReceivedPower,
    ];

    /// Stable wire token, used in knowledge-base files, findings, and reports.
    pub fn token(&self) -> &'static str {
        match self {
            IoCClass::Qber => "qber",
            IoCClass::RealTime(RealTimeKind::Afterpulse) => "real-time-afterpulse",
            IoCClass::RealTime(RealTimeKind::Deadtime) => "real-time-deadtime",
            IoCClass::RealTime(RealTimeKind::Photocurrent) => "real-time-photocurrent",
            IoCClass::RealTime(RealTimeKind::PhotonStatistics) => "real-time-photon-statistics",
            IoCClass::ReceivedPower => "received-power",
        }
    }

    pub fn parse(token: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|c| c.token() == token)
    }
}

impl fmt::Display for IoCClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl Serialize for IoCClass {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.token())
    }
}

impl<'de> Deserialize<'de> for IoCClass {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let token = String::deserialize(d)?;
        IoCClass::parse(&token)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown IoC class token `{token}`")))
    }
}

/// A more specific means of carrying out the parent technique.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubTechnique {
    pub id: String,
    pub name: String,
    #[serde(default)]
    pub description: String,
}

/// One technique entry: what the attack is, where it enters, what tools it
/// uses, what mitigates it, and which indicator classes it leaves behind.
///
/// `ioc_classes` may be empty: a technique the detection engine has no
/// indicator for (a known blind spot) still belongs in the knowledge base.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TechniqueRecord {
    pub id: String,
    pub name: String,
    pub objective: AttackObjective,
    #[serde(default)]
    pub sub_techniques: Vec<SubTechnique>,
    #[serde(default)]
    pub tools: Vec<String>,
    #[serde(default)]
    pub mitigations: Vec<String>,
    #[serde(default)]
    pub ioc_classes: BTreeSet<IoCClass>,
    #[serde(default)]
    pub references: Vec<String>,
}

/// A validation failure inside a knowledge base. Violations are data, not
/// errors: `validate` collects all of them instead of stopping at the first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    /// Id of the offending technique, or `<kb>` for file-level problems.
    pub technique_id: String,
    /// Short machine-readable rule name.
    pub rule: String,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {} ({})", self.technique_id, self.rule, self.detail)
    }
}

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("cannot read knowledge base {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed knowledge base: {0}")]
    Parse(String),
    #[error("knowledge base failed validation: {}", format_violations(.0))]
    Validation(Vec<Violation>),
}

fn format_violations(vs: &[Violation]) -> String {
    vs.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

/// Raw file shape, before token validation. Tokens are kept as strings here
/// so that a malformed file produces a complete violation list rather than
/// one parse error.
#[derive(Debug, Deserialize)]
struct RawKb {
    version: String,
    #[serde(default)]
    techniques: Vec<RawTechnique>,
}

#[derive(Debug, Deserialize)]
struct RawTechnique {
    id: String,
    name: String,
    objective: String,
    #[serde(default)]
    sub_techniques: Vec<SubTechnique>,
    #[serde(default)]
    tools: Vec<String>,
    #[serde(default)]
    mitigations: Vec<String>,
    #[serde(default)]
    ioc_classes: Vec<String>,
    #[serde(default)]
    references: Vec<String>,
}

/// Immutable, validated technique knowledge base with query indices.
///
/// Safe to share across threads; every operation is a pure read.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBase {
    version: String,
    techniques: Vec<TechniqueRecord>,
    by_objective: BTreeMap<AttackObjective, Vec<usize>>,
    by_ioc: BTreeMap<IoCClass, Vec<usize>>,
}

/// Query filter for [`KnowledgeBase::query`]. Empty filter matches everything.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct QueryFilter {
    pub objective: Option<AttackObjective>,
    pub ioc_class: Option<IoCClass>,
}

/// A technique candidate produced by [`rank_candidates`].
#[derive(Debug, Clone, PartialEq)]
pub struct RankedCandidate<'a> {
    pub technique: &'a TechniqueRecord,
    /// Number of distinct finding IoC classes this technique is linked to.
    pub score: usize,
}

const CANONICAL_KB: &str = include_str!("../data/canonical_kb.toml");

impl KnowledgeBase {
    /// Load and validate a knowledge base from a TOML file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, TaxonomyError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| TaxonomyError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    /// Parse and validate a knowledge base from TOML text.
    pub fn from_toml_str(text: &str) -> Result<Self, TaxonomyError> {
        let raw: RawKb = toml::from_str(text).map_err(|e| TaxonomyError::Parse(e.to_string()))?;
        let violations = validate_raw(&raw);
        if !violations.is_empty() {
            return Err(TaxonomyError::Validation(violations));
        }
        let techniques = raw
            .techniques
            .into_iter()
            .map(|t| TechniqueRecord {
                // Tokens were checked by validate_raw, so unwraps cannot fire.
                objective: AttackObjective::parse(&t.objective).unwrap(),
                ioc_classes: t
                    .ioc_classes
                    .iter()
                    .map(|c| IoCClass::parse(c).unwrap())
                    .collect(),
                id: t.id,
                name: t.name,
                sub_techniques: t.sub_techniques,
                tools: t.tools,
                mitigations: t.mitigations,
                references: t.references,
            })
            .collect();
        Ok(Self::from_parts(raw.version, techniques))
    }

    /// The knowledge base bundled with this crate.
    pub fn canonical() -> Self {
        Self::from_toml_str(CANONICAL_KB).expect("bundled knowledge base is valid")
    }

    fn from_parts(version: String, techniques: Vec<TechniqueRecord>) -> Self {
        let mut by_objective: BTreeMap<AttackObjective, Vec<usize>> = BTreeMap::new();
        let mut by_ioc: BTreeMap<IoCClass, Vec<usize>> = BTreeMap::new();
        for (i, t) in techniques.iter().enumerate() {
            by_objective.entry(t.objective).or_default().push(i);
            for class in &t.ioc_classes {
                by_ioc.entry(*class).or_default().push(i);
            }
        }
        Self {
            version,
            techniques,
            by_objective,
            by_ioc,
        }
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn techniques(&self) -> &[TechniqueRecord] {
        &self.techniques
    }

    pub fn technique(&self, id: &str) -> Option<&TechniqueRecord> {
        self.techniques.iter().find(|t| t.id == id)
    }

    /// Re-check every structural invariant. Returns an empty list iff the
    /// knowledge base is valid; each violation names the offending record
    /// and rule.
    pub fn validate(&self) -> Vec<Violation> {
        let mut violations = validate_records(&self.techniques);
        // Index consistency: indices must be rebuildable from the list.
        let rebuilt = Self::from_parts(self.version.clone(), self.techniques.clone());
        if rebuilt.by_objective != self.by_objective || rebuilt.by_ioc != self.by_ioc {
            violations.push(Violation {
                technique_id: "<kb>".into(),
                rule: "stale-index".into(),
                detail: "query indices do not match the technique list".into(),
            });
        }
        violations
    }

    /// Return all techniques matching every supplied filter field, sorted
    /// by id. An empty filter returns every technique.
    pub fn query(&self, filter: QueryFilter) -> Vec<&TechniqueRecord> {
        let mut out: Vec<&TechniqueRecord> = self
            .techniques
            .iter()
            .filter(|t| filter.objective.is_none_or(|o| t.objective == o))
            .filter(|t| filter.ioc_class.is_none_or(|c| t.ioc_classes.contains(&c)))
            .collect();
        out.sort_by(|a, b| a.id.cmp(&b.id));
        out
    }

    /// Serialize back to the TOML file format. `from_toml_str` of the output
    /// reproduces the same knowledge base.
    pub fn to_toml_string(&self) -> String {
        #[derive(Serialize)]
        struct Doc<'a> {
            version: &'a str,
            techniques: &'a [TechniqueRecord],
        }
        toml::to_string_pretty(&Doc {
            version: &self.version,
            techniques: &self.techniques,
        })
        .expect("knowledge base serializes")
    }
}

fn validate_raw(raw: &RawKb) -> Vec<Violation> {
    let mut violations = Vec::new();
    for t in &raw.techniques {
        if AttackObjective::parse(&t.objective).is_none() {
            violations.push(Violation {
                technique_id: t.id.clone(),
                rule: "unknown-objective".into(),
                detail: format!("objective token `{}` is not recognized", t.objective),
            });
        }
        for c in &t.ioc_classes {
            if IoCClass::parse(c).is_none() {
                violations.push(Violation {
                    technique_id: t.id.clone(),
                    rule: "unknown-ioc-class".into(),
                    detail: format!("IoC class token `{c}` is not recognized"),
                });
            }
        }
    }
    violations.extend(validate_shared(raw.techniques.iter().map(|t| {
        (
            t.id.as_str(),
            t.sub_techniques.iter().map(|s| s.id.as_str()),
        )
    })));
    violations
}

fn validate_records(records: &[TechniqueRecord]) -> Vec<Violation> {
    validate_shared(records.iter().map(|t| {
        (
            t.id.as_str(),
            t.sub_techniques.iter().map(|s| s.id.as_str()),
        )
    }))
}

/// Uniqueness rules shared by the raw and typed validators: technique ids
/// unique across the base, sub-technique ids unique within their technique,
/// no empty ids.
fn validate_shared<'a>(
    entries: impl Iterator<Item = (&'a str, impl Iterator<Item = &'a str>)>,
) -> Vec<Violation> {
    let mut violations = Vec::new();
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    for (id, subs) in entries {
        if id.is_empty() {
            violations.push(Violation {
                technique_id: "<kb>".into(),
                rule: "empty-id".into(),
                detail: "technique with empty id".into(),
            });
        }
        *seen.entry(id).or_insert(0) += 1;
        let mut sub_seen: BTreeSet<&str> = BTreeSet::new();
        for sub_id in subs {
            if !sub_seen.insert(sub_id) {
                violations.push(Violation {
                    technique_id: id.to_string(),
                    rule: "duplicate-sub-technique-id".into(),
                    detail: format!("sub-technique id `{sub_id}` appears more than once"),
                });
            }
        }
    }
    for (id, count) in seen {
        if count > 1 {
            violations.push(Violation {
                technique_id: id.to_string(),
                rule: "duplicate-technique-id".into(),
                detail: format!("technique id appears {count} times"),
            });
        }
    }
    violations
}

/// Rank technique candidates against a set of findings.
///
/// The score of a technique is the number of distinct finding IoC classes
/// present in its `ioc_classes` set. Techniques scoring zero are excluded.
/// Ordering is by descending score, ties broken by ascending technique id,
/// which makes the output a pure function of `(kb, findings)`.
pub fn rank_candidates<'a>(
    kb: &'a KnowledgeBase,
    findings: &[IoCFinding],
) -> Vec<RankedCandidate<'a>> {
    let classes: BTreeSet<IoCClass> = findings.iter().map(|f| f.class).collect();
    let mut out: Vec<RankedCandidate<'a>> = kb
        .techniques()
        .iter()
        .map(|t| RankedCandidate {
            score: t.ioc_classes.intersection(&classes).count(),
            technique: t,
        })
        .filter(|c| c.score > 0)
        .collect();
    out.sort_by(|a, b| {
        b.score
            .cmp(&a.score)
            .then_with(|| a.technique.id.cmp(&b.technique.id))
    });
    out
}
