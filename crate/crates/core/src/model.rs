//! Domain types shared across the retrieval engine.
//!
//! Every type here is an immutable value object with a canonical JSON form:
//! field names as written, enums in kebab-case.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Norms at or below this are treated as zero.
pub const MIN_NORM: f64 = 1e-12;

/// A finite real vector in the shared text/image embedding space.
///
/// Values are held at 32-bit precision; arithmetic accumulates in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("embedding must have dim >= 1".into()));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self(values))
    }

    pub fn from_f64(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|&v| v as f32).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f32> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    pub fn dot(&self, other: &Self) -> Result<f64> {
        check_dims(self.dim(), other.dim())?;
        Ok(dot(&self.0, &other.0))
    }

    /// Unit-norm copy of this vector. Zero or near-zero vectors are rejected.
    pub fn normalize(&self) -> Result<Self> {
        let norm = self.norm();
        if !(norm > MIN_NORM) {
            return Err(Error::DegenerateVector { norm });
        }
        Ok(Self(
            self.0
                .iter()
                .map(|&v| (f64::from(v) / norm) as f32)
                .collect(),
        ))
    }

    /// Multiplies every component by `factor`.
    pub fn scaled(&self, factor: f32) -> Result<Self> {
        Self::new(self.0.iter().map(|v| v * factor).collect())
    }
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

pub(crate) fn check_dims(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimMismatch { expected, actual });
    }
    Ok(())
}

/// Cosine similarity of two vectors of equal dimension.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    check_dims(a.dim(), b.dim())?;
    let (na, nb) = (a.norm(), b.norm());
    for norm in [na, nb] {
        if !(norm > MIN_NORM) {
            return Err(Error::DegenerateVector { norm });
        }
    }
    Ok((dot(&a.0, &b.0) / na / nb).clamp(-1.0, 1.0))
}

pub fn normalize(v: &EmbeddingVector) -> Result<EmbeddingVector> {
    v.normalize()
}

#[derive(Serialize, Deserialize)]
struct EmbeddingRepr {
    dim: usize,
    values: Vec<f32>,
}

impl Serialize for EmbeddingVector {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        EmbeddingRepr {
            dim: self.dim(),
            values: self.0.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for EmbeddingVector {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let repr = EmbeddingRepr::deserialize(d)?;
        if repr.dim != repr.values.len() {
            return Err(serde::de::Error::custom(format!(
                "dim {} does not match {} values",
                repr.dim,
                repr.values.len()
            )));
        }
        EmbeddingVector::new(repr.values).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    pub uri: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<BTreeMap<String, String>>,
}

impl ImageRecord {
    pub fn new(id: impl Into<String>, uri: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            uri: uri.into(),
            metadata: None,
        }
    }
}

macro_rules! kebab_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::InvalidInput(format!(
                        "unknown {} `{}` (expected one of: {})",
                        stringify!($name),
                        other,
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                s.serialize_str(self.as_str())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

kebab_enum! {
    /// The benchmark task a query belongs to.
    TaskKind {
        Cir => "cir",
        GenecisFocusAttribute => "genecis-focus-attribute",
        GenecisChangeAttribute => "genecis-change-attribute",
        GenecisFocusObject => "genecis-focus-object",
        GenecisChangeObject => "genecis-change-object",
        DomainConversion => "domain-conversion",
    }
}

kebab_enum! {
    /// How the query embedding is constructed.
    QueryMode {
        Cirevl => "cirevl",
        ImageOnly => "image-only",
        TextOnly => "text-only",
        ImagePlusText => "image-plus-text",
        CaptionTemplate => "caption-template",
    }
}

impl TaskKind {
    /// Whether the reference image is excluded from candidacy unless configured otherwise.
    pub fn default_exclude_reference(self) -> bool {
        !matches!(self, TaskKind::DomainConversion)
    }
}

impl QueryMode {
    pub fn needs_caption(self) -> bool {
        matches!(self, QueryMode::Cirevl | QueryMode::CaptionTemplate)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompositionalQuery {
    pub id: String,
    pub reference_image_id: String,
    pub instruction: String,
    pub task: TaskKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset_ids: Option<Vec<String>>,
    pub positives: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_word: Option<String>,
}

impl CompositionalQuery {
    /// Checks the query's own shape and that every id it names satisfies `known`.
    /// Returns every offending id (or field marker) on failure.
    pub fn validate(&self, known: impl Fn(&str) -> bool) -> std::result::Result<(), Vec<String>> {
        let mut bad = Vec::new();
        if !known(&self.reference_image_id) {
            bad.push(self.reference_image_id.clone());
        }
        for id in self.positives.iter().chain(self.subset_ids.iter().flatten()) {
            if !known(id) && !bad.contains(id) {
                bad.push(id.clone());
            }
        }
        if self.instruction.trim().is_empty() && self.task != TaskKind::DomainConversion {
            bad.push(format!("{}: empty instruction", self.id));
        }
        if self.positives.is_empty() {
            bad.push(format!("{}: no positives", self.id));
        }
        if let Some(subset) = &self.subset_ids {
            for p in &self.positives {
                if !subset.contains(p) {
                    bad.push(format!("{}: positive {} outside subset", self.id, p));
                }
            }
        }
        if self.task == TaskKind::DomainConversion
            && self.domain_word.as_deref().is_none_or(|w| w.trim().is_empty())
        {
            bad.push(format!("{}: missing domain_word", self.id));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(bad)
        }
    }
}

/// Collapses internal line breaks and surrounding whitespace into one line.
pub fn single_line(text: &str) -> String {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CaptionSource {
    Model(String),
    UserOverride,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TargetSource {
    Llm(String),
    Template(String),
    UserOverride,
}

const USER_OVERRIDE: &str = "user-override";

impl fmt::Display for CaptionSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CaptionSource::Model(id) => write!(f, "model:{id}"),
            CaptionSource::UserOverride => f.write_str(USER_OVERRIDE),
        }
    }
}

impl FromStr for CaptionSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            _ if s == USER_OVERRIDE => Ok(CaptionSource::UserOverride),
            Some(("model", id)) if !id.is_empty() => Ok(CaptionSource::Model(id.into())),
            _ => Err(Error::InvalidInput(format!("bad caption source `{s}`"))),
        }
    }
}

impl fmt::Display for TargetSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TargetSource::Llm(id) => write!(f, "llm:{id}"),
            TargetSource::Template(id) => write!(f, "template:{id}"),
            TargetSource::UserOverride => f.write_str(USER_OVERRIDE),
        }
    }
}

impl FromStr for TargetSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            _ if s == USER_OVERRIDE => Ok(TargetSource::UserOverride),
            Some(("llm", id)) if !id.is_empty() => Ok(TargetSource::Llm(id.into())),
            Some(("template", id)) if !id.is_empty() => Ok(TargetSource::Template(id.into())),
            _ => Err(Error::InvalidInput(format!("bad target caption source `{s}`"))),
        }
    }
}

macro_rules! string_serde {
    ($($ty:ty),+) => {$(
        impl Serialize for $ty {
            fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                s.collect_str(self)
            }
        }

        impl<'de> Deserialize<'de> for $ty {
            fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
                String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
            }
        }
    )+};
}

string_serde!(CaptionSource, TargetSource);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image_id: String,
    pub text: String,
    pub source: CaptionSource,
    pub created_at: DateTime<Utc>,
}

impl CaptionRecord {
    pub fn new(
        image_id: impl Into<String>,
        text: &str,
        source: CaptionSource,
        created_at: DateTime<Utc>,
    ) -> Result<Self> {
        let text = single_line(text);
        if text.is_empty() {
            return Err(Error::EmptyModelOutput("caption is empty".into()));
        }
        Ok(Self {
            image_id: image_id.into(),
            text,
            source,
            created_at,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetCaption {
    pub query_id: String,
    pub text: String,
    pub source: TargetSource,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredImage {
    pub image_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub query_id: String,
    pub mode: QueryMode,
    pub ranking: Vec<ScoredImage>,
    #[serde(default)]
    pub excluded_ids: Vec<String>,
}

impl RankedResult {
    pub fn ids(&self) -> Vec<String> {
        self.ranking.iter().map(|s| s.image_id.clone()).collect()
    }

    pub fn top1(&self) -> Option<&str> {
        self.ranking.first().map(|s| s.image_id.as_str())
    }
}

kebab_enum! {
    /// Pipeline stage names, used for timings and failure attribution.
    Stage {
        Validate => "validate",
        Caption => "caption",
        Reason => "reason",
        Embed => "embed",
        Retrieve => "retrieve",
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: Stage,
    pub message: String,
}

/// The full record of one query's trip through the pipeline.
///
/// This is what the intervention workflow inspects and edits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineTrace {
    pub query_id: String,
    pub mode: QueryMode,
    pub task: TaskKind,
    pub instruction: String,
    pub caption: Option<CaptionRecord>,
    pub target_caption: Option<TargetCaption>,
    pub reasoner_raw_reply: Option<String>,
    #[serde(default)]
    pub marker_missing: bool,
    pub ranking: RankedResult,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset_ranking: Option<RankedResult>,
    #[serde(default)]
    pub positives: Vec<String>,
    pub timings: BTreeMap<String, u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<StageFailure>,
}

impl PipelineTrace {
    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }
}
