//! Content attribute annotation pipeline.
//!
//! The library covers the offline path from corpus to experiment readout:
//! a corpus store with attribute annotations ([`corpus`], [`formats`]),
//! golden-set evaluation and inter-rater reliability ([`evaluation`]),
//! pluggable annotation backends with priority scheduling and batch-size
//! tuning ([`annotator`]), teacher-to-student distillation ([`distillation`]),
//! attribute-restricted personalized retrieval ([`index`], [`retrieval`]),
//! and an offline A/B replay simulator ([`replay`]).

pub mod annotator;
pub mod corpus;
pub mod distillation;
pub mod evaluation;
pub mod formats;
pub mod index;
pub mod math;
pub mod replay;
pub mod retrieval;

pub use corpus::{
    Annotation, AnnotationSource, AttributeDefinition, AttributeVocabulary, Corpus, CorpusError,
    GoldenItem, PrioritySignals, VideoRecord, VocabularyPolicy,
};
pub use evaluation::{ConfusionMatrix, EvalError, EvaluationReport, RaterAgreementReport};
