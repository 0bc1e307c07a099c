//! Annotation backends and bulk annotation.
//!
//! Two backends implement [`AnnotatorBackend`]: a deterministic synthetic
//! annotator (the stand-in teacher for all desk-scale tests) and a remote
//! HTTP client. Around them: priority-driven scheduling into batches, a
//! parallel bulk runner, and an affine latency model for batch-size tuning.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Annotation, AnnotationSource, AttributeDefinition, Corpus, VideoRecord};
use crate::math::{dot, normalize, sigmoid};

#[derive(Debug, Error)]
pub enum AnnotatorError {
    #[error("synthetic backend has no direction for attribute '{name}'")]
    UnknownAttribute { name: String },
    #[error("embedding dimension {actual} does not match backend dimension {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("attribute direction must be a nonzero vector")]
    ZeroDirection,
    #[error("transport failure: {detail}")]
    Transport { detail: String },
    #[error("server error status {status}")]
    ServerStatus { status: u16 },
    #[error("client error status {status}")]
    ClientStatus { status: u16 },
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("parallelism must be >= 1")]
    BadParallelism,
    #[error("batch must contain between 1 and {max} videos, got {size}")]
    BadBatchSize { size: usize, max: usize },
    #[error("no feasible batch size: latency cap {cap}s is below the 1-item latency {min}s")]
    InfeasibleLatencyCap { cap: f64, min: f64 },
    #[error("latency model invalid: {reason}")]
    BadLatencyModel { reason: String },
    #[error("priority weights must be finite and >= 0")]
    BadPriorityWeights,
}

impl AnnotatorError {
    /// Transport-level failures worth retrying; everything else is permanent
    /// (parse errors get their own single retry).
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            AnnotatorError::Transport { .. } | AnnotatorError::ServerStatus { .. }
        )
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("malformed response body: {detail}")]
    MalformedBody { detail: String },
    #[error("unknown label '{label}', expected \"yes\" or \"no\"")]
    UnknownLabel { label: String },
    #[error("confidence {value} outside [0,1]")]
    ScoreOutOfRange { value: f64 },
}

/// What a backend can take per call and what a call costs (abstract units).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackendCapability {
    pub max_batch: usize,
    pub cost_per_call: f64,
}

/// An annotation backend: consumes one video plus an attribute definition,
/// returns a teacher annotation. Must be callable from concurrent contexts.
pub trait AnnotatorBackend: Send + Sync {
    fn capability(&self) -> BackendCapability;
    fn annotate(
        &self,
        video: &VideoRecord,
        attribute: &AttributeDefinition,
    ) -> Result<Annotation, AnnotatorError>;
}

/// Annotates a single video through any backend.
pub fn annotate_one(
    backend: &dyn AnnotatorBackend,
    video: &VideoRecord,
    attribute: &AttributeDefinition,
) -> Result<Annotation, AnnotatorError> {
    backend.annotate(video, attribute)
}

/// Deterministic synthetic teacher: score = sigmoid(k * <w_a, x>) for a unit
/// direction w_a per attribute. Score depends only on the inner product, so
/// it is invariant under joint rotation of directions and embeddings.
#[derive(Debug, Clone)]
pub struct SyntheticBackend {
    dim: usize,
    sharpness: f64,
    /// Fixed timestamp stamped on every annotation, keeping bulk runs
    /// bit-reproducible.
    clock: i64,
    directions: BTreeMap<String, Vec<f64>>,
}

impl SyntheticBackend {
    pub const DEFAULT_SHARPNESS: f64 = 4.0;

    pub fn new(dim: usize, sharpness: f64, clock: i64) -> Self {
        Self {
            dim,
            sharpness,
            clock,
            directions: BTreeMap::new(),
        }
    }

    /// Registers the unit direction defining an attribute. The input is
    /// normalized here; a zero vector is rejected.
    pub fn add_direction(&mut self, attribute: &str, direction: &[f64]) -> Result<(), AnnotatorError> {
        if direction.len() != self.dim {
            return Err(AnnotatorError::DimensionMismatch {
                expected: self.dim,
                actual: direction.len(),
            });
        }
        if direction.iter().all(|&v| v == 0.0) {
            return Err(AnnotatorError::ZeroDirection);
        }
        self.directions
            .insert(attribute.to_string(), normalize(direction));
        Ok(())
    }

    pub fn direction(&self, attribute: &str) -> Option<&[f64]> {
        self.directions.get(attribute).map(Vec::as_slice)
    }

    pub fn sharpness(&self) -> f64 {
        self.sharpness
    }

    /// The raw scoring rule, exposed so synthetic worlds can plant ground
    /// truth through the same formula the backend annotates with.
    pub fn score(&self, attribute: &str, embedding: &[f64]) -> Result<f64, AnnotatorError> {
        if embedding.len() != self.dim {
            return Err(AnnotatorError::DimensionMismatch {
                expected: self.dim,
                actual: embedding.len(),
            });
        }
        let w = self
            .directions
            .get(attribute)
            .ok_or_else(|| AnnotatorError::UnknownAttribute {
                name: attribute.to_string(),
            })?;
        Ok(sigmoid(self.sharpness * dot(w, embedding)))
    }
}

impl AnnotatorBackend for SyntheticBackend {
    fn capability(&self) -> BackendCapability {
        BackendCapability {
            max_batch: 64,
            cost_per_call: 1.0,
        }
    }

    fn annotate(
        &self,
        video: &VideoRecord,
        attribute: &AttributeDefinition,
    ) -> Result<Annotation, AnnotatorError> {
        let score = self.score(&attribute.name, &video.embedding)?;
        Ok(Annotation {
            video_id: video.id.clone(),
            attribute_name: attribute.name.clone(),
            attribute_version: attribute.version,
            label: score >= attribute.decision_threshold,
            score,
            source: AnnotationSource::Teacher,
            rater_id: None,
            created_at: self.clock,
        })
    }
}

/// Verdict carried by a well-formed remote response.
#[derive(Debug, Clone, PartialEq)]
pub struct RemoteVerdict {
    pub label: bool,
    pub score: f64,
    pub rationale: String,
}

#[derive(Debug, Serialize)]
struct RemoteRequestWire<'a> {
    attribute_prompt: &'a str,
    positive_guidance: &'a [String],
    negative_guidance: &'a [String],
    video: RemoteVideoWire<'a>,
    #[serde(skip_serializing_if = "Option::is_none")]
    frames: Option<&'a [String]>,
}

#[derive(Debug, Serialize)]
struct RemoteVideoWire<'a> {
    id: &'a str,
    title: &'a str,
    description: &'a str,
}

#[derive(Debug, Deserialize)]
struct RemoteResponseWire {
    label: String,
    confidence: f64,
    rationale: String,
}

/// Strict parse of the remote wire response. The label string must be
/// exactly "yes" or "no" and the confidence must lie in [0,1]; each failure
/// mode is a distinct error.
pub fn parse_remote_response(bytes: &[u8]) -> Result<RemoteVerdict, ParseError> {
    let wire: RemoteResponseWire =
        serde_json::from_slice(bytes).map_err(|e| ParseError::MalformedBody {
            detail: e.to_string(),
        })?;
    let label = match wire.label.as_str() {
        "yes" => true,
        "no" => false,
        other => {
            return Err(ParseError::UnknownLabel {
                label: other.to_string(),
            })
        }
    };
    if !(0.0..=1.0).contains(&wire.confidence) || !wire.confidence.is_finite() {
        return Err(ParseError::ScoreOutOfRange {
            value: wire.confidence,
        });
    }
    Ok(RemoteVerdict {
        label,
        score: wire.confidence,
        rationale: wire.rationale,
    })
}

/// Retry schedule: transport failures retry up to `max_attempts` total calls
/// with exponential backoff and jitter; parse failures retry once.
#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub parse_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
    pub jitter: bool,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            parse_retries: 1,
            base_delay: Duration::from_millis(100),
            max_delay: Duration::from_secs(2),
            jitter: true,
        }
    }
}

impl RetryPolicy {
    /// Same attempt counts, zero sleep. For tests.
    pub fn no_backoff() -> Self {
        Self {
            base_delay: Duration::ZERO,
            max_delay: Duration::ZERO,
            jitter: false,
            ..Self::default()
        }
    }

    fn delay_for(&self, transport_attempt: u32) -> Duration {
        let exp = self
            .base_delay
            .saturating_mul(2u32.saturating_pow(transport_attempt.saturating_sub(1)));
        let capped = exp.min(self.max_delay);
        if self.jitter && capped > Duration::ZERO {
            // Uniform in [0.5, 1.5) of the capped delay; timing only, so a
            // nondeterministic source is fine.
            use rand::Rng;
            let factor = rand::thread_rng().gen_range(0.5..1.5);
            capped.mul_f64(factor)
        } else {
            capped
        }
    }
}

/// Runs `f` under the retry policy. The closure receives the 1-based attempt
/// number. Transport errors consume transport attempts; parse errors consume
/// parse retries; any other error returns immediately.
pub fn with_retries<T>(
    policy: &RetryPolicy,
    mut f: impl FnMut(u32) -> Result<T, AnnotatorError>,
) -> Result<T, AnnotatorError> {
    let mut transport_attempts = 0u32;
    let mut parse_attempts = 0u32;
    let mut attempt = 0u32;
    loop {
        attempt += 1;
        match f(attempt) {
            Ok(v) => return Ok(v),
            Err(e) if e.is_retryable() => {
                transport_attempts += 1;
                if transport_attempts >= policy.max_attempts {
                    return Err(e);
                }
                std::thread::sleep(policy.delay_for(transport_attempts));
            }
            Err(e @ AnnotatorError::Parse(_)) => {
                parse_attempts += 1;
                if parse_attempts > policy.parse_retries {
                    return Err(e);
                }
            }
            Err(e) => return Err(e),
        }
    }
}

/// HTTP client for a remote annotator. One request per video; the verbalized
/// confidence in the response becomes the annotation score, and the label is
/// recomputed from the attribute's decision threshold.
pub struct RemoteBackend {
    endpoint: String,
    client: reqwest::blocking::Client,
    retry: RetryPolicy,
    max_batch: usize,
    cost_per_call: f64,
}

impl RemoteBackend {
    pub fn new(endpoint: &str, retry: RetryPolicy) -> Self {
        Self {
            endpoint: endpoint.to_string(),
            client: reqwest::blocking::Client::new(),
            retry,
            max_batch: 16,
            cost_per_call: 10.0,
        }
    }

    fn call_once(
        &self,
        video: &VideoRecord,
        attribute: &AttributeDefinition,
    ) -> Result<RemoteVerdict, AnnotatorError> {
        let body = RemoteRequestWire {
            attribute_prompt: &attribute.prompt_text,
            positive_guidance: &attribute.positive_guidance,
            negative_guidance: &attribute.negative_guidance,
            video: RemoteVideoWire {
                id: &video.id,
                title: &video.title,
                description: &video.description,
            },
            frames: None,
        };
        let response = self
            .client
            .post(&self.endpoint)
            .json(&body)
            .send()
            .map_err(|e| AnnotatorError::Transport {
                detail: e.to_string(),
            })?;
        let status = response.status().as_u16();
        if status >= 500 {
            return Err(AnnotatorError::ServerStatus { status });
        }
        if status >= 400 {
            return Err(AnnotatorError::ClientStatus { status });
        }
        let bytes = response.bytes().map_err(|e| AnnotatorError::Transport {
            detail: e.to_string(),
        })?;
        Ok(parse_remote_response(&bytes)?)
    }
}

impl AnnotatorBackend for RemoteBackend {
    fn capability(&self) -> BackendCapability {
        BackendCapability {
            max_batch: self.max_batch,
            cost_per_call: self.cost_per_call,
        }
    }

    fn annotate(
        &self,
        video: &VideoRecord,
        attribute: &AttributeDefinition,
    ) -> Result<Annotation, AnnotatorError> {
        let verdict = with_retries(&self.retry, |_| self.call_once(video, attribute))?;
        let created_at = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs() as i64)
            .unwrap_or(0);
        Ok(Annotation {
            video_id: video.id.clone(),
            attribute_name: attribute.name.clone(),
            attribute_version: attribute.version,
            label: verdict.score >= attribute.decision_threshold,
            score: verdict.score,
            source: AnnotationSource::Teacher,
            rater_id: None,
            created_at,
        })
    }
}

/// Scheduling weights over the corpus priority signals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorityPolicy {
    pub w_new: f64,
    pub w_trending: f64,
    pub w_impact: f64,
}

impl Default for PriorityPolicy {
    fn default() -> Self {
        Self {
            w_new: 1.0,
            w_trending: 1.0,
            w_impact: 1.0,
        }
    }
}

impl PriorityPolicy {
    pub fn validate(&self) -> Result<(), AnnotatorError> {
        let ok = [self.w_new, self.w_trending, self.w_impact]
            .iter()
            .all(|w| w.is_finite() && *w >= 0.0);
        if ok {
            Ok(())
        } else {
            Err(AnnotatorError::BadPriorityWeights)
        }
    }

    pub fn priority(&self, video: &VideoRecord) -> f64 {
        let s = &video.priority_signals;
        self.w_new * (s.is_new as u8 as f64)
            + self.w_trending * s.trending_score
            + self.w_impact * s.impact_score
    }
}

/// An ordered slice of the annotation workload for one attribute.
#[derive(Debug, Clone)]
pub struct AnnotationRequestBatch {
    pub attribute: AttributeDefinition,
    pub videos: Vec<VideoRecord>,
    pub batch_id: String,
}

/// Selects up to `budget` videos by descending priority and packs them into
/// batches of `batch_size` in order. Ties break toward older upload_time,
/// then lexicographically smaller id, making the schedule a pure function of
/// its inputs.
pub fn schedule(
    corpus: &Corpus,
    attribute: &AttributeDefinition,
    policy: &PriorityPolicy,
    budget: usize,
    batch_size: usize,
) -> Result<Vec<AnnotationRequestBatch>, AnnotatorError> {
    policy.validate()?;
    if batch_size < 1 {
        return Err(AnnotatorError::BadBatchSize {
            size: batch_size,
            max: usize::MAX,
        });
    }
    let mut ranked: Vec<&VideoRecord> = corpus.records().collect();
    ranked.sort_by(|a, b| {
        policy
            .priority(b)
            .total_cmp(&policy.priority(a))
            .then(a.upload_time.cmp(&b.upload_time))
            .then(a.id.cmp(&b.id))
    });
    ranked.truncate(budget);
    let batches = ranked
        .chunks(batch_size)
        .enumerate()
        .map(|(i, chunk)| AnnotationRequestBatch {
            attribute: attribute.clone(),
            videos: chunk.iter().map(|v| (*v).clone()).collect(),
            batch_id: format!("{}-v{}-{:04}", attribute.name, attribute.version, i),
        })
        .collect();
    Ok(batches)
}

/// One item that still failed after retries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub video_id: String,
    pub attribute_name: String,
    pub attribute_version: u32,
    pub error: String,
}

/// Outcome of a bulk run. Simulated figures come from a [`LatencyModel`]
/// (serial batch submission), never from wall-clock measurement, so reports
/// stay reproducible.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub annotated: usize,
    pub failures: Vec<FailureRecord>,
    pub simulated_latency_seconds: Option<f64>,
    pub simulated_throughput: Option<f64>,
}

/// Annotates all batches with up to `parallelism` batches in flight. Output
/// is sorted by (attribute, video id), so the result is identical for any
/// parallelism and completion order. Items that fail after the backend's
/// retries are recorded and the run continues.
pub fn run_bulk(
    backend: &dyn AnnotatorBackend,
    batches: &[AnnotationRequestBatch],
    parallelism: usize,
    latency: Option<&LatencyModel>,
) -> Result<(Vec<Annotation>, RunReport), AnnotatorError> {
    if parallelism < 1 {
        return Err(AnnotatorError::BadParallelism);
    }
    let max_batch = backend.capability().max_batch;
    for batch in batches {
        if batch.videos.is_empty() || batch.videos.len() > max_batch {
            return Err(AnnotatorError::BadBatchSize {
                size: batch.videos.len(),
                max: max_batch,
            });
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| AnnotatorError::Transport {
            detail: format!("thread pool: {e}"),
        })?;
    use rayon::prelude::*;
    let per_batch: Vec<Vec<Result<Annotation, FailureRecord>>> = pool.install(|| {
        batches
            .par_iter()
            .map(|batch| {
                batch
                    .videos
                    .iter()
                    .map(|video| {
                        backend.annotate(video, &batch.attribute).map_err(|e| {
                            FailureRecord {
                                video_id: video.id.clone(),
                                attribute_name: batch.attribute.name.clone(),
                                attribute_version: batch.attribute.version,
                                error: e.to_string(),
                            }
                        })
                    })
                    .collect()
            })
            .collect()
    });
    let mut annotations = Vec::new();
    let mut failures = Vec::new();
    for result in per_batch.into_iter().flatten() {
        match result {
            Ok(a) => annotations.push(a),
            Err(f) => failures.push(f),
        }
    }
    annotations.sort_by(|a, b| {
        (&a.attribute_name, a.attribute_version, &a.video_id)
            .cmp(&(&b.attribute_name, b.attribute_version, &b.video_id))
    });
    failures.sort_by(|a, b| {
        (&a.attribute_name, a.attribute_version, &a.video_id)
            .cmp(&(&b.attribute_name, b.attribute_version, &b.video_id))
    });
    let (simulated_latency_seconds, simulated_throughput) = match latency {
        Some(model) => {
            let total: f64 = batches.iter().map(|b| model.latency(b.videos.len())).sum();
            let items: usize = batches.iter().map(|b| b.videos.len()).sum();
            let throughput = if total > 0.0 && items > 0 {
                Some(items as f64 / total)
            } else {
                None
            };
            (Some(total), throughput)
        }
        None => (None, None),
    };
    let report = RunReport {
        annotated: annotations.len(),
        failures,
        simulated_latency_seconds,
        simulated_throughput,
    };
    Ok((annotations, report))
}

/// Affine batch cost model: latency(n) = a + b*n seconds. Throughput n/(a+bn)
/// is strictly increasing in n, so the largest feasible batch is optimal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub fixed_overhead: f64,
    pub per_item: f64,
    pub max_batch: usize,
}

impl Default for LatencyModel {
    fn default() -> Self {
        Self {
            fixed_overhead: 1.0,
            per_item: 0.25,
            max_batch: 64,
        }
    }
}

/// Absolute slack when testing `latency(n) <= cap`, absorbing float noise in
/// b*n so boundary batch sizes are kept (1 + 0.01*100 must fit a cap of 2).
const LATENCY_TOLERANCE: f64 = 1e-9;

impl LatencyModel {
    pub fn validate(&self) -> Result<(), AnnotatorError> {
        if !(self.fixed_overhead.is_finite() && self.fixed_overhead > 0.0) {
            return Err(AnnotatorError::BadLatencyModel {
                reason: format!("fixed_overhead must be > 0, got {}", self.fixed_overhead),
            });
        }
        if !(self.per_item.is_finite() && self.per_item >= 0.0) {
            return Err(AnnotatorError::BadLatencyModel {
                reason: format!("per_item must be >= 0, got {}", self.per_item),
            });
        }
        if self.max_batch < 1 {
            return Err(AnnotatorError::BadLatencyModel {
                reason: "max_batch must be >= 1".to_string(),
            });
        }
        Ok(())
    }

    pub fn latency(&self, n: usize) -> f64 {
        self.fixed_overhead + self.per_item * n as f64
    }

    pub fn throughput(&self, n: usize) -> f64 {
        n as f64 / self.latency(n)
    }

    pub fn feasible(&self, n: usize, latency_cap: f64) -> bool {
        n >= 1 && n <= self.max_batch && self.latency(n) <= latency_cap + LATENCY_TOLERANCE
    }
}

/// Largest batch size within the latency cap. Solves the affine inequality
/// analytically, then adjusts locally against the public feasibility test so
/// float rounding cannot move the boundary.
pub fn tune_batch_size(model: &LatencyModel, latency_cap: f64) -> Result<usize, AnnotatorError> {
    model.validate()?;
    if !model.feasible(1, latency_cap) {
        return Err(AnnotatorError::InfeasibleLatencyCap {
            cap: latency_cap,
            min: model.latency(1),
        });
    }
    let mut n = if model.per_item == 0.0 {
        model.max_batch
    } else {
        let guess = ((latency_cap - model.fixed_overhead) / model.per_item).floor();
        (guess.max(1.0) as usize).min(model.max_batch)
    };
    while n < model.max_batch && model.feasible(n + 1, latency_cap) {
        n += 1;
    }
    while n > 1 && !model.feasible(n, latency_cap) {
        n -= 1;
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::PrioritySignals;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn video(id: &str, embedding: Vec<f64>) -> VideoRecord {
        VideoRecord {
            id: id.to_string(),
            title: String::new(),
            description: String::new(),
            embedding,
            upload_time: 0,
            priority_signals: PrioritySignals::default(),
        }
    }

    fn backend_2d() -> SyntheticBackend {
        let mut b = SyntheticBackend::new(2, 4.0, 1_000);
        b.add_direction("calming", &[1.0, 0.0]).unwrap();
        b
    }

    #[test]
    fn synthetic_score_at_direction_is_sigmoid_of_sharpness() {
        let backend = backend_2d();
        let attr = AttributeDefinition::basic("calming", 1, 0.5);
        let a = backend.annotate(&video("v", vec![1.0, 0.0]), &attr).unwrap();
        assert!((a.score - sigmoid(4.0)).abs() < 1e-15);
        assert!((a.score - 0.9820).abs() < 1e-4);
        assert!(a.label);
        assert_eq!(a.source, AnnotationSource::Teacher);
        assert_eq!(a.created_at, 1_000);
    }

    #[test]
    fn synthetic_score_orthogonal_is_half_and_positive_at_default_threshold() {
        let backend = backend_2d();
        let attr = AttributeDefinition::basic("calming", 1, 0.5);
        let a = backend.annotate(&video("v", vec![0.0, 1.0]), &attr).unwrap();
        assert_eq!(a.score, 0.5);
        assert!(a.label, "score equal to threshold is positive");
    }

    #[test]
    fn synthetic_rejects_unknown_attribute_and_bad_dimension() {
        let backend = backend_2d();
        let other = AttributeDefinition::basic("authentic", 1, 0.5);
        assert!(matches!(
            backend.annotate(&video("v", vec![1.0, 0.0]), &other),
            Err(AnnotatorError::UnknownAttribute { .. })
        ));
        let attr = AttributeDefinition::basic("calming", 1, 0.5);
        assert!(matches!(
            backend.annotate(&video("v", vec![1.0, 0.0, 0.0]), &attr),
            Err(AnnotatorError::DimensionMismatch { .. })
        ));
        let mut b = SyntheticBackend::new(2, 4.0, 0);
        assert!(matches!(
            b.add_direction("x", &[0.0, 0.0]),
            Err(AnnotatorError::ZeroDirection)
        ));
    }

    #[test]
    fn synthetic_score_is_rotation_invariant() {
        // Apply the same Givens rotations to direction and embedding; the
        // inner product, hence the score, must not move.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 6;
        for _ in 0..20 {
            let w: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut backend = SyntheticBackend::new(d, 4.0, 0);
            backend.add_direction("a", &w).unwrap();
            let before = backend.score("a", &x).unwrap();

            let mut wr = normalize(&w);
            let mut xr = x.clone();
            for _ in 0..5 {
                let i = rng.gen_range(0..d);
                let mut j = rng.gen_range(0..d);
                while j == i {
                    j = rng.gen_range(0..d);
                }
                let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let (s, c) = theta.sin_cos();
                for v in [&mut wr, &mut xr] {
                    let (vi, vj) = (v[i], v[j]);
                    v[i] = c * vi - s * vj;
                    v[j] = s * vi + c * vj;
                }
            }
            let mut rotated = SyntheticBackend::new(d, 4.0, 0);
            rotated.add_direction("a", &wr).unwrap();
            let after = rotated.score("a", &xr).unwrap();
            assert!((before - after).abs() < 1e-9, "{before} vs {after}");
        }
    }

    #[test]
    fn parse_valid_response() {
        let verdict =
            parse_remote_response(br#"{"label":"yes","confidence":0.9,"rationale":"calm scenes"}"#)
                .unwrap();
        assert_eq!(
            verdict,
            RemoteVerdict {
                label: true,
                score: 0.9,
                rationale: "calm scenes".to_string()
            }
        );
    }

    #[test]
    fn parse_errors_are_distinct() {
        assert!(matches!(
            parse_remote_response(b"{not json"),
            Err(ParseError::MalformedBody { .. })
        ));
        assert!(matches!(
            parse_remote_response(br#"{"label":"maybe","confidence":0.5,"rationale":""}"#),
            Err(ParseError::UnknownLabel { label }) if label == "maybe"
        ));
        assert!(matches!(
            parse_remote_response(br#"{"label":"no","confidence":1.3,"rationale":""}"#),
            Err(ParseError::ScoreOutOfRange { value }) if value == 1.3
        ));
        // Missing field is a malformed body, not a silent default.
        assert!(matches!(
            parse_remote_response(br#"{"label":"no","rationale":""}"#),
            Err(ParseError::MalformedBody { .. })
        ));
    }

    #[test]
    fn retry_exhausts_then_returns_transport_error() {
        let policy = RetryPolicy::no_backoff();
        let mut calls = 0;
        let result: Result<(), _> = with_retries(&policy, |_| {
            calls += 1;
            Err(AnnotatorError::ServerStatus { status: 503 })
        });
        assert!(matches!(result, Err(AnnotatorError::ServerStatus { status: 503 })));
        assert_eq!(calls, 3);
    }

    #[test]
    fn retry_recovers_from_transient_failures() {
        let policy = RetryPolicy::no_backoff();
        let mut calls = 0;
        let result = with_retries(&policy, |attempt| {
            calls += 1;
            if attempt < 3 {
                Err(AnnotatorError::Transport {
                    detail: "refused".into(),
                })
            } else {
                Ok(attempt)
            }
        });
        assert_eq!(result.unwrap(), 3);
        assert_eq!(calls, 3);
    }

    #[test]
    fn parse_failures_retry_once_and_permanent_errors_never() {
        let policy = RetryPolicy::no_backoff();
        let mut calls = 0;
        let result: Result<(), _> = with_retries(&policy, |_| {
            calls += 1;
            Err(AnnotatorError::Parse(ParseError::UnknownLabel {
                label: "maybe".into(),
            }))
        });
        assert!(matches!(result, Err(AnnotatorError::Parse(_))));
        assert_eq!(calls, 2);

        calls = 0;
        let result: Result<(), _> = with_retries(&policy, |_| {
            calls += 1;
            Err(AnnotatorError::ClientStatus { status: 400 })
        });
        assert!(matches!(result, Err(AnnotatorError::ClientStatus { status: 400 })));
        assert_eq!(calls, 1);
    }

    fn corpus_with_signals(entries: &[(&str, bool, f64, f64, i64)]) -> Corpus {
        let mut corpus = Corpus::new(1);
        for (id, is_new, trending, impact, upload) in entries {
            corpus
                .insert_record(VideoRecord {
                    id: id.to_string(),
                    title: String::new(),
                    description: String::new(),
                    embedding: vec![0.0],
                    upload_time: *upload,
                    priority_signals: PrioritySignals {
                        is_new: *is_new,
                        trending_score: *trending,
                        impact_score: *impact,
                    },
                })
                .unwrap();
        }
        corpus
    }

    #[test]
    fn schedule_sorts_and_cuts() {
        let corpus = corpus_with_signals(&[
            ("a", false, 3.0, 0.0, 0),
            ("b", false, 1.0, 0.0, 0),
            ("c", false, 2.0, 0.0, 0),
        ]);
        let attr = AttributeDefinition::basic("calming", 1, 0.5);
        let batches = schedule(&corpus, &attr, &PriorityPolicy::default(), 2, 1).unwrap();
        assert_eq!(batches.len(), 2);
        assert_eq!(batches[0].videos[0].id, "a");
        assert_eq!(batches[1].videos[0].id, "c");
        assert_eq!(batches[0].batch_id, "calming-v1-0000");
    }

    #[test]
    fn schedule_breaks_ties_by_upload_time_then_id() {
        let corpus = corpus_with_signals(&[
            ("b", false, 1.0, 0.0, 10),
            ("a", false, 1.0, 0.0, 20),
            ("c", false, 1.0, 0.0, 10),
        ]);
        let attr = AttributeDefinition::basic("calming", 1, 0.5);
        let batches = schedule(&corpus, &attr, &PriorityPolicy::default(), 3, 3).unwrap();
        let ids: Vec<&str> = batches[0].videos.iter().map(|v| v.id.as_str()).collect();
        assert_eq!(ids, vec!["b", "c", "a"]);
    }

    #[test]
    fn schedule_matches_full_sort_oracle_on_random_corpus() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut corpus = Corpus::new(1);
        for i in 0..10_000 {
            corpus
                .insert_record(VideoRecord {
                    id: format!("v{i:05}"),
                    title: String::new(),
                    description: String::new(),
                    embedding: vec![0.0],
                    upload_time: rng.gen_range(0..500),
                    priority_signals: PrioritySignals {
                        is_new: rng.gen_bool(0.2),
                        trending_score: rng.gen_range(0.0..3.0),
                        impact_score: rng.gen_range(0.0..3.0),
                    },
                })
                .unwrap();
        }
        let policy = PriorityPolicy {
            w_new: 2.0,
            w_trending: 0.5,
            w_impact: 1.5,
        };
        let attr = AttributeDefinition::basic("calming", 1, 0.5);
        let budget = 1234;
        let batches = schedule(&corpus, &attr, &policy, budget, 100).unwrap();
        let scheduled: Vec<String> = batches
            .iter()
            .flat_map(|b| b.videos.iter().map(|v| v.id.clone()))
            .collect();

        // Oracle: score every record independently, full sort, take prefix.
        let mut all: Vec<(f64, i64, String)> = corpus
            .records()
            .map(|v| {
                let p = 2.0 * (v.priority_signals.is_new as u8 as f64)
                    + 0.5 * v.priority_signals.trending_score
                    + 1.5 * v.priority_signals.impact_score;
                (p, v.upload_time, v.id.clone())
            })
            .collect();
        all.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        let expected: Vec<String> = all.into_iter().take(budget).map(|t| t.2).collect();
        assert_eq!(scheduled, expected);
        assert!(batches.iter().all(|b| b.videos.len() <= 100 && !b.videos.is_empty()));

        // Pure function: repeated call agrees exactly.
        let again = schedule(&corpus, &attr, &policy, budget, 100).unwrap();
        let scheduled_again: Vec<String> = again
            .iter()
            .flat_map(|b| b.videos.iter().map(|v| v.id.clone()))
            .collect();
        assert_eq!(scheduled, scheduled_again);
    }

    fn batches_of(n: usize, batch_size: usize, dim: usize) -> Vec<AnnotationRequestBatch> {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let attr = AttributeDefinition::basic("calming", 1, 0.5);
        let videos: Vec<VideoRecord> = (0..n)
            .map(|i| {
                video(
                    &format!("v{i:04}"),
                    (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                )
            })
            .collect();
        videos
            .chunks(batch_size)
            .enumerate()
            .map(|(i, chunk)| AnnotationRequestBatch {
                attribute: attr.clone(),
                videos: chunk.to_vec(),
                batch_id: format!("b{i}"),
            })
            .collect()
    }

    #[test]
    fn run_bulk_is_parallelism_invariant() {
        let mut backend = SyntheticBackend::new(4, 4.0, 7);
        backend
            .add_direction("calming", &[0.5, 0.5, 0.5, 0.5])
            .unwrap();
        let batches = batches_of(100, 8, 4);
        let (serial, report1) = run_bulk(&backend, &batches, 1, None).unwrap();
        let (parallel, report8) = run_bulk(&backend, &batches, 8, None).unwrap();
        assert_eq!(serial, parallel);
        assert_eq!(serial.len(), 100);
        assert_eq!(report1.annotated, 100);
        assert_eq!(report8.annotated, 100);
        assert!(report1.failures.is_empty());
    }

    struct FailingBackend;
    impl AnnotatorBackend for FailingBackend {
        fn capability(&self) -> BackendCapability {
            BackendCapability {
                max_batch: 64,
                cost_per_call: 1.0,
            }
        }
        fn annotate(
            &self,
            _video: &VideoRecord,
            _attribute: &AttributeDefinition,
        ) -> Result<Annotation, AnnotatorError> {
            Err(AnnotatorError::ClientStatus { status: 422 })
        }
    }

    #[test]
    fn run_bulk_records_failures_and_completes() {
        let batches = batches_of(100, 10, 4);
        let (annotations, report) = run_bulk(&FailingBackend, &batches, 4, None).unwrap();
        assert!(annotations.is_empty());
        assert_eq!(report.annotated, 0);
        assert_eq!(report.failures.len(), 100);
        assert!(report.failures[0].error.contains("422"));
    }

    #[test]
    fn run_bulk_simulated_throughput_follows_affine_model() {
        let mut backend = SyntheticBackend::new(4, 4.0, 7);
        backend
            .add_direction("calming", &[1.0, 0.0, 0.0, 0.0])
            .unwrap();
        let model = LatencyModel::default();

        let batched = batches_of(96, 8, 4);
        let (_, report) = run_bulk(&backend, &batched, 1, Some(&model)).unwrap();
        let throughput8 = report.simulated_throughput.unwrap();
        assert!((throughput8 - 8.0 / 3.0).abs() < 1e-12);

        let singles = batches_of(96, 1, 4);
        let (_, report) = run_bulk(&backend, &singles, 1, Some(&model)).unwrap();
        let throughput1 = report.simulated_throughput.unwrap();
        assert!((throughput1 - 0.8).abs() < 1e-12);
        assert!(throughput8 / throughput1 > 3.3);
    }

    #[test]
    fn run_bulk_rejects_oversized_batches_and_zero_parallelism() {
        let backend = backend_2d();
        let batches = batches_of(100, 100, 2);
        assert!(matches!(
            run_bulk(&backend, &batches, 1, None),
            Err(AnnotatorError::BadBatchSize { size: 100, max: 64 })
        ));
        let ok = batches_of(4, 2, 2);
        assert!(matches!(
            run_bulk(&backend, &ok, 0, None),
            Err(AnnotatorError::BadParallelism)
        ));
    }

    #[test]
    fn tune_solves_affine_inequality() {
        let model = LatencyModel {
            fixed_overhead: 1.0,
            per_item: 0.01,
            max_batch: 256,
        };
        assert_eq!(tune_batch_size(&model, 2.0).unwrap(), 100);
    }

    #[test]
    fn tune_rejects_infeasible_cap() {
        let model = LatencyModel {
            fixed_overhead: 1.0,
            per_item: 0.5,
            max_batch: 8,
        };
        assert!(matches!(
            tune_batch_size(&model, 1.2),
            Err(AnnotatorError::InfeasibleLatencyCap { .. })
        ));
    }

    #[test]
    fn tune_matches_exhaustive_scan_on_random_models() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..100 {
            let model = LatencyModel {
                fixed_overhead: rng.gen_range(0.01..5.0),
                per_item: if rng.gen_bool(0.1) {
                    0.0
                } else {
                    rng.gen_range(0.001..1.0)
                },
                max_batch: rng.gen_range(1..512),
            };
            let cap = model.latency(1) * rng.gen_range(1.0..10.0);
            let tuned = tune_batch_size(&model, cap).unwrap();
            let best_feasible = (1..=model.max_batch)
                .filter(|&n| model.feasible(n, cap))
                .max()
                .unwrap();
            assert_eq!(tuned, best_feasible);
            // Largest feasible n maximizes throughput among feasible sizes.
            for m in 1..=model.max_batch {
                if model.feasible(m, cap) {
                    assert!(model.throughput(tuned) >= model.throughput(m));
                }
            }
        }
    }

    #[test]
    fn default_model_tuned_throughput_doubles_batch_one() {
        let model = LatencyModel::default();
        let tuned = tune_batch_size(&model, 3.0).unwrap();
        assert_eq!(tuned, 8);
        assert!(model.throughput(tuned) >= 2.0 * model.throughput(1));
    }
}
