//! Corpus store: videos, attribute definitions, annotations, golden sets,
//! and per-attribute content vocabularies.
//!
//! The store is single-writer, multi-reader: mutation goes through `&mut self`,
//! reads through `&self`, so the borrow checker enforces the concurrency model.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Signals used by the annotation scheduler to rank candidate videos.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrioritySignals {
    pub is_new: bool,
    pub trending_score: f64,
    pub impact_score: f64,
}

impl Default for PrioritySignals {
    fn default() -> Self {
        Self {
            is_new: false,
            trending_score: 0.0,
            impact_score: 0.0,
        }
    }
}

/// One corpus item: identity, text metadata, a precomputed embedding of the
/// corpus-wide dimension, and scheduling signals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub id: String,
    pub title: String,
    pub description: String,
    pub embedding: Vec<f64>,
    /// Seconds since epoch.
    pub upload_time: i64,
    pub priority_signals: PrioritySignals,
}

impl VideoRecord {
    /// Validates the per-record invariants against the corpus dimension.
    pub fn validate(&self, expected_dim: usize) -> Result<(), RecordViolation> {
        if self.embedding.len() != expected_dim {
            return Err(RecordViolation::DimensionMismatch {
                expected: expected_dim,
                actual: self.embedding.len(),
            });
        }
        if self.embedding.iter().any(|v| !v.is_finite()) {
            return Err(RecordViolation::NonFiniteEmbedding);
        }
        let s = &self.priority_signals;
        if !s.trending_score.is_finite() || s.trending_score < 0.0 {
            return Err(RecordViolation::BadSignal {
                field: "trending_score",
                value: s.trending_score,
            });
        }
        if !s.impact_score.is_finite() || s.impact_score < 0.0 {
            return Err(RecordViolation::BadSignal {
                field: "impact_score",
                value: s.impact_score,
            });
        }
        Ok(())
    }
}

/// A named, versioned content attribute with prompt text and decision guidance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeDefinition {
    pub name: String,
    pub version: u32,
    pub prompt_text: String,
    pub positive_guidance: Vec<String>,
    pub negative_guidance: Vec<String>,
    /// Probability cutoff mapping scores to labels; `score >= threshold` is positive.
    pub decision_threshold: f64,
}

impl AttributeDefinition {
    /// Minimal definition with an empty prompt, for tests and synthetic worlds.
    pub fn basic(name: &str, version: u32, decision_threshold: f64) -> Self {
        Self {
            name: name.to_string(),
            version,
            prompt_text: String::new(),
            positive_guidance: Vec::new(),
            negative_guidance: Vec::new(),
            decision_threshold,
        }
    }

    pub fn validate(&self) -> Result<(), RecordViolation> {
        if self.version < 1 {
            return Err(RecordViolation::BadAttributeVersion {
                version: self.version,
            });
        }
        if !(0.0..=1.0).contains(&self.decision_threshold) {
            return Err(RecordViolation::ThresholdOutOfRange {
                value: self.decision_threshold,
            });
        }
        Ok(())
    }
}

/// Who produced an annotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotationSource {
    Human,
    Teacher,
    Student,
}

impl fmt::Display for AnnotationSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnnotationSource::Human => f.write_str("human"),
            AnnotationSource::Teacher => f.write_str("teacher"),
            AnnotationSource::Student => f.write_str("student"),
        }
    }
}

/// A (video, attribute) verdict with probability score and provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub video_id: String,
    pub attribute_name: String,
    pub attribute_version: u32,
    pub label: bool,
    pub score: f64,
    pub source: AnnotationSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rater_id: Option<String>,
    /// Seconds since epoch.
    pub created_at: i64,
}

/// Storage key for annotations: one slot per (video, attribute version, source, rater).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct AnnotationKey {
    pub video_id: String,
    pub attribute_name: String,
    pub attribute_version: u32,
    pub source: AnnotationSource,
    pub rater_id: Option<String>,
}

impl AnnotationKey {
    pub fn of(a: &Annotation) -> Self {
        Self {
            video_id: a.video_id.clone(),
            attribute_name: a.attribute_name.clone(),
            attribute_version: a.attribute_version,
            source: a.source,
            rater_id: a.rater_id.clone(),
        }
    }
}

/// Source policy for building a vocabulary from stored annotations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocabularyPolicy {
    TeacherOnly,
    StudentOnly,
    /// Teacher annotations override student ones for the same video.
    TeacherPrecedence,
}

impl fmt::Display for VocabularyPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VocabularyPolicy::TeacherOnly => f.write_str("teacher_only"),
            VocabularyPolicy::StudentOnly => f.write_str("student_only"),
            VocabularyPolicy::TeacherPrecedence => f.write_str("teacher_precedence"),
        }
    }
}

/// The set of videos annotated positive for one attribute at one threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeVocabulary {
    pub attribute_name: String,
    pub attribute_version: u32,
    pub member_ids: BTreeSet<String>,
    pub built_from: VocabularyPolicy,
    pub threshold: f64,
}

impl AttributeVocabulary {
    pub fn contains(&self, video_id: &str) -> bool {
        self.member_ids.contains(video_id)
    }

    pub fn len(&self) -> usize {
        self.member_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.member_ids.is_empty()
    }
}

/// One golden-set item: an expert-labeled truth for a video, optionally with
/// the individual rater labels it was merged from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenItem {
    pub item_id: String,
    pub truth: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rater_labels: Option<BTreeMap<String, bool>>,
}

/// A single record-level invariant violation.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum RecordViolation {
    #[error("embedding dimension {actual} does not match corpus dimension {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("embedding contains a non-finite value")]
    NonFiniteEmbedding,
    #[error("{field} must be finite and >= 0, got {value}")]
    BadSignal { field: &'static str, value: f64 },
    #[error("attribute version must be >= 1, got {version}")]
    BadAttributeVersion { version: u32 },
    #[error("decision threshold must be in [0,1], got {value}")]
    ThresholdOutOfRange { value: f64 },
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("duplicate video id '{id}'")]
    DuplicateId { id: String },
    #[error("record '{id}': {violation}")]
    InvalidRecord {
        id: String,
        violation: RecordViolation,
    },
    #[error("attribute ({name}, v{version}) already exists")]
    DuplicateAttribute { name: String, version: u32 },
    #[error("attribute {name} v{version} does not increase on existing v{existing}")]
    NonMonotonicVersion {
        name: String,
        version: u32,
        existing: u32,
    },
    #[error("invalid attribute ({name}, v{version}): {violation}")]
    InvalidAttribute {
        name: String,
        version: u32,
        violation: RecordViolation,
    },
    #[error("vocabulary threshold must be in [0,1], got {value}")]
    VocabularyThreshold { value: f64 },
    #[error("unknown attribute ({name}, v{version})")]
    UnknownAttribute { name: String, version: u32 },
}

/// Why an annotation was rejected by `upsert_annotations`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "reason")]
pub enum AnnotationReject {
    UnknownVideo,
    UnknownAttribute,
    /// Teacher/student label disagrees with `score >= decision_threshold`.
    LabelThresholdMismatch,
    /// Human score must be exactly 0 or 1.
    NonBinaryHumanScore,
    /// rater_id is required iff the source is human.
    RaterIdMismatch,
    ScoreOutOfRange,
}

impl fmt::Display for AnnotationReject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnnotationReject::UnknownVideo => f.write_str("unknown video id"),
            AnnotationReject::UnknownAttribute => f.write_str("unknown attribute version"),
            AnnotationReject::LabelThresholdMismatch => {
                f.write_str("label inconsistent with score vs decision threshold")
            }
            AnnotationReject::NonBinaryHumanScore => f.write_str("human score must be 0 or 1"),
            AnnotationReject::RaterIdMismatch => {
                f.write_str("rater_id required iff source is human")
            }
            AnnotationReject::ScoreOutOfRange => f.write_str("score outside [0,1]"),
        }
    }
}

/// Outcome of an annotation batch write.
#[derive(Debug, Clone, Default)]
pub struct UpsertReport {
    /// Annotations accepted (a repeated identical write counts every time).
    pub written: usize,
    pub rejected: Vec<(Annotation, AnnotationReject)>,
}

/// In-memory store for one corpus and everything annotated on it.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    dim: usize,
    records: BTreeMap<String, VideoRecord>,
    attributes: BTreeMap<String, BTreeMap<u32, AttributeDefinition>>,
    annotations: BTreeMap<AnnotationKey, Annotation>,
}

impl Corpus {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ..Default::default()
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn record(&self, id: &str) -> Option<&VideoRecord> {
        self.records.get(id)
    }

    /// Records in id order.
    pub fn records(&self) -> impl Iterator<Item = &VideoRecord> {
        self.records.values()
    }

    pub fn insert_record(&mut self, record: VideoRecord) -> Result<(), CorpusError> {
        if let Err(violation) = record.validate(self.dim) {
            return Err(CorpusError::InvalidRecord {
                id: record.id.clone(),
                violation,
            });
        }
        if self.records.contains_key(&record.id) {
            return Err(CorpusError::DuplicateId { id: record.id });
        }
        self.records.insert(record.id.clone(), record);
        Ok(())
    }

    pub fn attribute(&self, name: &str, version: u32) -> Option<&AttributeDefinition> {
        self.attributes.get(name).and_then(|m| m.get(&version))
    }

    pub fn latest_attribute(&self, name: &str) -> Option<&AttributeDefinition> {
        self.attributes
            .get(name)
            .and_then(|m| m.values().next_back())
    }

    /// All attribute definitions, ordered by (name, version).
    pub fn attributes(&self) -> impl Iterator<Item = &AttributeDefinition> {
        self.attributes.values().flat_map(|m| m.values())
    }

    /// Registers a new attribute version. Versions per name must strictly
    /// increase, so refinements never silently overwrite older definitions.
    pub fn add_attribute(&mut self, def: AttributeDefinition) -> Result<(), CorpusError> {
        if let Err(violation) = def.validate() {
            return Err(CorpusError::InvalidAttribute {
                name: def.name.clone(),
                version: def.version,
                violation,
            });
        }
        let versions = self.attributes.entry(def.name.clone()).or_default();
        if versions.contains_key(&def.version) {
            return Err(CorpusError::DuplicateAttribute {
                name: def.name,
                version: def.version,
            });
        }
        if let Some((&existing, _)) = versions.iter().next_back() {
            if def.version <= existing {
                return Err(CorpusError::NonMonotonicVersion {
                    name: def.name,
                    version: def.version,
                    existing,
                });
            }
        }
        versions.insert(def.version, def);
        Ok(())
    }

    /// Annotations in key order.
    pub fn annotations(&self) -> impl Iterator<Item = &Annotation> {
        self.annotations.values()
    }

    pub fn annotation_count(&self) -> usize {
        self.annotations.len()
    }

    fn check_annotation(&self, a: &Annotation) -> Option<AnnotationReject> {
        if !self.records.contains_key(&a.video_id) {
            return Some(AnnotationReject::UnknownVideo);
        }
        let Some(def) = self.attribute(&a.attribute_name, a.attribute_version) else {
            return Some(AnnotationReject::UnknownAttribute);
        };
        if !(0.0..=1.0).contains(&a.score) {
            return Some(AnnotationReject::ScoreOutOfRange);
        }
        match a.source {
            AnnotationSource::Human => {
                if a.rater_id.is_none() {
                    return Some(AnnotationReject::RaterIdMismatch);
                }
                if a.score != 0.0 && a.score != 1.0 {
                    return Some(AnnotationReject::NonBinaryHumanScore);
                }
            }
            AnnotationSource::Teacher | AnnotationSource::Student => {
                if a.rater_id.is_some() {
                    return Some(AnnotationReject::RaterIdMismatch);
                }
                if a.label != (a.score >= def.decision_threshold) {
                    return Some(AnnotationReject::LabelThresholdMismatch);
                }
            }
        }
        None
    }

    /// Writes a batch of annotations. Later `created_at` wins per key;
    /// invalid entries are rejected individually and the batch continues.
    pub fn upsert_annotations(&mut self, annotations: Vec<Annotation>) -> UpsertReport {
        let mut report = UpsertReport::default();
        for a in annotations {
            if let Some(reason) = self.check_annotation(&a) {
                report.rejected.push((a, reason));
                continue;
            }
            report.written += 1;
            let key = AnnotationKey::of(&a);
            match self.annotations.get(&key) {
                Some(existing) if existing.created_at > a.created_at => {}
                _ => {
                    self.annotations.insert(key, a);
                }
            }
        }
        report
    }

    /// Best stored score for a video under the policy, if any.
    fn policy_score(
        &self,
        video_id: &str,
        name: &str,
        version: u32,
        policy: VocabularyPolicy,
    ) -> Option<f64> {
        let get = |source: AnnotationSource| {
            self.annotations
                .get(&AnnotationKey {
                    video_id: video_id.to_string(),
                    attribute_name: name.to_string(),
                    attribute_version: version,
                    source,
                    rater_id: None,
                })
                .map(|a| a.score)
        };
        match policy {
            VocabularyPolicy::TeacherOnly => get(AnnotationSource::Teacher),
            VocabularyPolicy::StudentOnly => get(AnnotationSource::Student),
            VocabularyPolicy::TeacherPrecedence => {
                get(AnnotationSource::Teacher).or_else(|| get(AnnotationSource::Student))
            }
        }
    }

    /// Builds the content vocabulary for an attribute: every video whose
    /// policy-selected annotation score reaches the threshold.
    ///
    /// No matching annotations is not an error; the result is an empty
    /// vocabulary and a warning is logged.
    pub fn build_vocabulary(
        &self,
        attribute: &AttributeDefinition,
        threshold: f64,
        policy: VocabularyPolicy,
    ) -> Result<AttributeVocabulary, CorpusError> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(CorpusError::VocabularyThreshold { value: threshold });
        }
        if self
            .attribute(&attribute.name, attribute.version)
            .is_none()
        {
            return Err(CorpusError::UnknownAttribute {
                name: attribute.name.clone(),
                version: attribute.version,
            });
        }
        let mut member_ids = BTreeSet::new();
        let mut seen_any = false;
        for id in self.records.keys() {
            if let Some(score) =
                self.policy_score(id, &attribute.name, attribute.version, policy)
            {
                seen_any = true;
                if score >= threshold {
                    member_ids.insert(id.clone());
                }
            }
        }
        if !seen_any {
            log::warn!(
                "no {policy} annotations for ({}, v{}); vocabulary is empty",
                attribute.name,
                attribute.version
            );
        }
        Ok(AttributeVocabulary {
            attribute_name: attribute.name.clone(),
            attribute_version: attribute.version,
            member_ids,
            built_from: policy,
            threshold,
        })
    }

    /// Embeddings for a list of video ids; unknown ids are skipped.
    pub fn embeddings_for(&self, ids: &[String]) -> Vec<Vec<f64>> {
        ids.iter()
            .filter_map(|id| self.records.get(id).map(|r| r.embedding.clone()))
            .collect()
    }

    /// Map from id to embedding reference, for joins.
    pub fn embedding_map(&self) -> HashMap<&str, &[f64]> {
        self.records
            .iter()
            .map(|(id, r)| (id.as_str(), r.embedding.as_slice()))
            .collect()
    }
}
