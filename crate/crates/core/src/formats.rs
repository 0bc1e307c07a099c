//! File formats: corpus JSONL with a canonical export form, annotation and
//! attribute definition files, golden sets, and the flat binary embedding
//! sidecar for large corpora.
//!
//! Canonical corpus form: one record per line, keys sorted, shortest
//! round-trip number formatting, records ordered by id. `export_corpus` after
//! `ingest_corpus` reproduces a canonical file byte for byte.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    Annotation, AttributeDefinition, Corpus, CorpusError, GoldenItem, PrioritySignals,
    VideoRecord,
};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line_no}: {reason}")]
    Line { line_no: usize, reason: String },
    #[error("line {line_no}: duplicate id '{id}'")]
    DuplicateId { line_no: usize, id: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("sidecar manifest mismatch: {reason}")]
    Sidecar { reason: String },
}

fn io_err(path: &Path, source: std::io::Error) -> FormatError {
    FormatError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Whether a bad line aborts the whole ingest or is skipped and reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IngestMode {
    Strict,
    Lenient,
}

/// One skipped line in a lenient ingest.
#[derive(Debug, Clone)]
pub struct LineReject {
    pub line_no: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct IngestReport {
    pub loaded: usize,
    pub rejects: Vec<LineReject>,
}

/// External corpus record. Field order is the canonical (sorted) key order.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusLine {
    description: String,
    embedding: Vec<f64>,
    id: String,
    impact_score: f64,
    is_new: bool,
    title: String,
    trending_score: f64,
    upload_time: i64,
}

impl From<&VideoRecord> for CorpusLine {
    fn from(r: &VideoRecord) -> Self {
        Self {
            description: r.description.clone(),
            embedding: r.embedding.clone(),
            id: r.id.clone(),
            impact_score: r.priority_signals.impact_score,
            is_new: r.priority_signals.is_new,
            title: r.title.clone(),
            trending_score: r.priority_signals.trending_score,
            upload_time: r.upload_time,
        }
    }
}

impl From<CorpusLine> for VideoRecord {
    fn from(l: CorpusLine) -> Self {
        VideoRecord {
            id: l.id,
            title: l.title,
            description: l.description,
            embedding: l.embedding,
            upload_time: l.upload_time,
            priority_signals: PrioritySignals {
                is_new: l.is_new,
                trending_score: l.trending_score,
                impact_score: l.impact_score,
            },
        }
    }
}

/// Loads a corpus from a JSONL file, validating dimensions and uniqueness.
///
/// A duplicate id rejects the file in either mode. Malformed lines and
/// per-record violations reject only the line in lenient mode.
pub fn ingest_corpus(
    path: &Path,
    expected_dim: usize,
    mode: IngestMode,
) -> Result<(Corpus, IngestReport), FormatError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut corpus = Corpus::new(expected_dim);
    let mut report = IngestReport::default();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Result<CorpusLine, _> = serde_json::from_str(&line);
        let record: VideoRecord = match parsed {
            Ok(l) => l.into(),
            Err(e) => {
                let reason = format!("malformed record: {e}");
                match mode {
                    IngestMode::Strict => return Err(FormatError::Line { line_no, reason }),
                    IngestMode::Lenient => {
                        log::warn!("skipping line {line_no}: {reason}");
                        report.rejects.push(LineReject { line_no, reason });
                        continue;
                    }
                }
            }
        };
        match corpus.insert_record(record) {
            Ok(()) => report.loaded += 1,
            Err(CorpusError::DuplicateId { id }) => {
                return Err(FormatError::DuplicateId { line_no, id });
            }
            Err(e) => {
                let reason = e.to_string();
                match mode {
                    IngestMode::Strict => return Err(FormatError::Line { line_no, reason }),
                    IngestMode::Lenient => {
                        log::warn!("skipping line {line_no}: {reason}");
                        report.rejects.push(LineReject { line_no, reason });
                    }
                }
            }
        }
    }
    Ok((corpus, report))
}

/// Renders the canonical form: records in id order, sorted keys, shortest
/// round-trip numbers, one per line, trailing newline.
pub fn canonical_corpus_string(corpus: &Corpus) -> String {
    let mut out = String::new();
    for record in corpus.records() {
        let line = serde_json::to_string(&CorpusLine::from(record))
            .expect("corpus record serializes");
        out.push_str(&line);
        out.push('\n');
    }
    out
}

pub fn export_corpus(corpus: &Corpus, path: &Path) -> Result<(), FormatError> {
    fs::write(path, canonical_corpus_string(corpus)).map_err(|e| io_err(path, e))
}

/// Generic JSONL reader: one value per non-empty line, errors positioned by
/// line number.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, FormatError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| FormatError::Line {
            line_no: idx + 1,
            reason: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

/// Generic JSONL writer: one value per line, trailing newline.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), FormatError> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).expect("item serializes");
        writeln!(w, "{line}").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_annotations(path: &Path) -> Result<Vec<Annotation>, FormatError> {
    read_jsonl(path)
}

pub fn write_annotations(path: &Path, annotations: &[Annotation]) -> Result<(), FormatError> {
    write_jsonl(path, annotations)
}

/// Reads attribute definitions and returns them sorted by (name, version) so
/// out-of-order files still satisfy the monotone version rule on insert.
pub fn read_attributes(path: &Path) -> Result<Vec<AttributeDefinition>, FormatError> {
    let mut defs: Vec<AttributeDefinition> = read_jsonl(path)?;
    defs.sort_by(|a, b| a.name.cmp(&b.name).then(a.version.cmp(&b.version)));
    Ok(defs)
}

pub fn write_attributes(path: &Path, defs: &[AttributeDefinition]) -> Result<(), FormatError> {
    write_jsonl(path, defs)
}

pub fn read_golden(path: &Path) -> Result<Vec<GoldenItem>, FormatError> {
    read_jsonl(path)
}

pub fn write_golden(path: &Path, items: &[GoldenItem]) -> Result<(), FormatError> {
    write_jsonl(path, items)
}

/// Manifest for the flat binary embedding sidecar.
#[derive(Debug, Serialize, Deserialize)]
pub struct SidecarManifest {
    pub dim: usize,
    pub count: usize,
    pub ids: Vec<String>,
}

/// Writes embeddings as row-major little-endian f32, one row per record in
/// id order, with a JSON manifest naming the rows.
pub fn write_embedding_sidecar(
    corpus: &Corpus,
    bin_path: &Path,
    manifest_path: &Path,
) -> Result<(), FormatError> {
    let mut ids = Vec::with_capacity(corpus.len());
    let file = fs::File::create(bin_path).map_err(|e| io_err(bin_path, e))?;
    let mut w = BufWriter::new(file);
    for record in corpus.records() {
        ids.push(record.id.clone());
        for &v in &record.embedding {
            w.write_all(&(v as f32).to_le_bytes())
                .map_err(|e| io_err(bin_path, e))?;
        }
    }
    w.flush().map_err(|e| io_err(bin_path, e))?;
    let manifest = SidecarManifest {
        dim: corpus.dim(),
        count: ids.len(),
        ids,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(manifest_path, json).map_err(|e| io_err(manifest_path, e))
}

/// Reads a sidecar back as (id, embedding) rows in manifest order.
pub fn read_embedding_sidecar(
    bin_path: &Path,
    manifest_path: &Path,
) -> Result<Vec<(String, Vec<f64>)>, FormatError> {
    let manifest_text = fs::read_to_string(manifest_path).map_err(|e| io_err(manifest_path, e))?;
    let manifest: SidecarManifest =
        serde_json::from_str(&manifest_text).map_err(|e| FormatError::Sidecar {
            reason: format!("bad manifest: {e}"),
        })?;
    if manifest.ids.len() != manifest.count {
        return Err(FormatError::Sidecar {
            reason: format!(
                "manifest count {} does not match {} ids",
                manifest.count,
                manifest.ids.len()
            ),
        });
    }
    let mut bytes = Vec::new();
    fs::File::open(bin_path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| io_err(bin_path, e))?;
    let expected = manifest.count * manifest.dim * 4;
    if bytes.len() != expected {
        return Err(FormatError::Sidecar {
            reason: format!(
                "binary length {} does not match count {} x dim {} x 4",
                bytes.len(),
                manifest.count,
                manifest.dim
            ),
        });
    }
    let mut rows = Vec::with_capacity(manifest.count);
    let mut offset = 0;
    for id in manifest.ids {
        let mut row = Vec::with_capacity(manifest.dim);
        for _ in 0..manifest.dim {
            let v = f32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap());
            row.push(v as f64);
            offset += 4;
        }
        rows.push((id, row));
    }
    Ok(rows)
}
