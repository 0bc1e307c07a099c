//! Personalized restricted retrieval: a decayed-average user encoder,
//! per-attribute intent gating from history affinity, and quota-based
//! blending of vocabulary-restricted search with the main candidate pool.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::AttributeVocabulary;
use crate::index::{IndexError, VectorIndex};
use crate::math::normalize;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("gamma must be in (0,1), got {value}")]
    BadGamma { value: f64 },
    #[error("tau for '{attribute}' must be in [0,1], got {value}")]
    BadTau { attribute: String, value: f64 },
    #[error("k must be >= 1")]
    BadK,
    #[error("history embedding dimension {actual} does not match {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error(transparent)]
    Index(#[from] IndexError),
}

fn check_gamma(gamma: f64) -> Result<(), RetrievalError> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(RetrievalError::BadGamma { value: gamma });
    }
    Ok(())
}

/// Decayed mean of watch-history embeddings, newest weighted heaviest:
/// v = normalize(sum_i gamma^(n-i) x_i) with the history oldest-first.
/// Returns the vector and a cold-start flag; the flag is set when the
/// history is empty or the weighted sum cancels to zero.
pub fn encode_user(history: &[Vec<f64>], gamma: f64) -> Result<(Vec<f64>, bool), RetrievalError> {
    check_gamma(gamma)?;
    let Some(first) = history.first() else {
        return Ok((Vec::new(), true));
    };
    let d = first.len();
    let mut sum = vec![0.0; d];
    let n = history.len();
    for (i, x) in history.iter().enumerate() {
        if x.len() != d {
            return Err(RetrievalError::DimensionMismatch {
                expected: d,
                actual: x.len(),
            });
        }
        let w = gamma.powi((n - 1 - i) as i32);
        for (s, &xi) in sum.iter_mut().zip(x) {
            *s += w * xi;
        }
    }
    let v = normalize(&sum);
    let cold = v.iter().all(|&c| c == 0.0);
    Ok((v, cold))
}

/// Decayed fraction of the history inside the vocabulary:
/// sum_i gamma^(n-i) [id_i in vocab] / sum_i gamma^(n-i). Empty history is 0.
pub fn affinity(
    history_ids: &[String],
    vocabulary: &AttributeVocabulary,
    gamma: f64,
) -> Result<f64, RetrievalError> {
    check_gamma(gamma)?;
    if history_ids.is_empty() {
        return Ok(0.0);
    }
    let n = history_ids.len();
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, id) in history_ids.iter().enumerate() {
        let w = gamma.powi((n - 1 - i) as i32);
        den += w;
        if vocabulary.contains(id) {
            num += w;
        }
    }
    Ok(num / den)
}

/// A user's derived retrieval state. The history is oldest-first
/// (video_id, watched_at) pairs; the vector and affinities are computed,
/// not stored inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: String,
    pub history: Vec<(String, i64)>,
    pub user_vector: Vec<f64>,
    pub cold_start: bool,
    /// attribute name -> affinity in [0,1]
    pub affinities: BTreeMap<String, f64>,
}

/// Builds a profile against an index: history ids missing from the index
/// contribute nothing to the vector (they still count as non-members for
/// affinities, which work on ids alone).
pub fn build_profile(
    user_id: &str,
    history: &[(String, i64)],
    index: &VectorIndex,
    vocabularies: &[AttributeVocabulary],
    gamma: f64,
) -> Result<UserProfile, RetrievalError> {
    check_gamma(gamma)?;
    let embeddings: Vec<Vec<f64>> = history
        .iter()
        .filter_map(|(id, _)| index.entry(id).map(|e| e.embedding.clone()))
        .collect();
    let (user_vector, cold_start) = encode_user(&embeddings, gamma)?;
    let ids: Vec<String> = history.iter().map(|(id, _)| id.clone()).collect();
    let mut affinities = BTreeMap::new();
    for vocab in vocabularies {
        affinities.insert(
            vocab.attribute_name.clone(),
            affinity(&ids, vocab, gamma)?,
        );
    }
    Ok(UserProfile {
        user_id: user_id.to_string(),
        history: history.to_vec(),
        user_vector,
        cold_start,
        affinities,
    })
}

/// Intent gating: which attributes trigger restricted retrieval, and with
/// what quota. `quota: None` means ceil(k/4) at retrieve time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatingRule {
    pub default_tau: f64,
    pub tau_overrides: BTreeMap<String, f64>,
    pub gamma: f64,
    pub quota: Option<usize>,
}

impl Default for GatingRule {
    fn default() -> Self {
        Self {
            default_tau: 0.3,
            tau_overrides: BTreeMap::new(),
            gamma: 0.9,
            quota: None,
        }
    }
}

impl GatingRule {
    pub fn tau_for(&self, attribute: &str) -> f64 {
        *self.tau_overrides.get(attribute).unwrap_or(&self.default_tau)
    }

    pub fn quota_for(&self, k: usize) -> usize {
        self.quota.unwrap_or(k.div_ceil(4))
    }

    pub fn validate(&self) -> Result<(), RetrievalError> {
        check_gamma(self.gamma)?;
        if !(0.0..=1.0).contains(&self.default_tau) {
            return Err(RetrievalError::BadTau {
                attribute: "*".to_string(),
                value: self.default_tau,
            });
        }
        for (name, &tau) in &self.tau_overrides {
            if !(0.0..=1.0).contains(&tau) {
                return Err(RetrievalError::BadTau {
                    attribute: name.clone(),
                    value: tau,
                });
            }
        }
        Ok(())
    }
}

/// Where a slate item came from: the main unrestricted pool or a specific
/// attribute's restricted search.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Main,
    Attribute(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlateItem {
    pub video_id: String,
    pub score: f64,
    pub provenance: Provenance,
}

/// Final candidate slate: at most k items, no duplicate ids, ordered by
/// score descending then id. For cold-start users the scores are impact
/// scores, not similarities, and the flag says so.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slate {
    pub items: Vec<SlateItem>,
    pub cold_start: bool,
    pub triggered: Vec<String>,
}

fn search(
    index: &VectorIndex,
    query: &[f64],
    k: usize,
    restriction: Option<&std::collections::BTreeSet<String>>,
    probes: Option<usize>,
) -> Result<Vec<(String, f64)>, IndexError> {
    if index.is_clustered() {
        let c = index.n_clusters().unwrap();
        index.knn_clustered(query, k, probes.unwrap_or(c).min(c), restriction)
    } else {
        index.knn_exact(query, k, restriction)
    }
}

/// Blends per-attribute restricted searches into the unrestricted pool.
///
/// Every attribute whose affinity clears its tau contributes up to quota
/// candidates from its vocabulary; the remainder of the slate comes from
/// unrestricted search. Duplicates keep the restricted-provenance copy
/// (first triggered attribute in name order when two vocabularies share an
/// item). The final order is by similarity, ties by id. Cold-start users get
/// the impact-score popularity fallback, flagged on the slate.
pub fn restricted_retrieve(
    user: &UserProfile,
    vocabularies: &[AttributeVocabulary],
    gating: &GatingRule,
    index: &VectorIndex,
    k: usize,
    probes: Option<usize>,
) -> Result<Slate, RetrievalError> {
    if k < 1 {
        return Err(RetrievalError::BadK);
    }
    gating.validate()?;
    if user.cold_start {
        let items = index
            .top_by_impact(k)
            .into_iter()
            .map(|(video_id, score)| SlateItem {
                video_id,
                score,
                provenance: Provenance::Main,
            })
            .collect();
        return Ok(Slate {
            items,
            cold_start: true,
            triggered: Vec::new(),
        });
    }

    let mut sorted_vocabs: Vec<&AttributeVocabulary> = vocabularies.iter().collect();
    sorted_vocabs.sort_by(|a, b| a.attribute_name.cmp(&b.attribute_name));
    let quota = gating.quota_for(k);
    let mut triggered = Vec::new();
    let mut picked: BTreeMap<String, SlateItem> = BTreeMap::new();
    for vocab in sorted_vocabs {
        let name = &vocab.attribute_name;
        let affinity = user.affinities.get(name).copied().unwrap_or(0.0);
        if affinity < gating.tau_for(name) {
            continue;
        }
        triggered.push(name.clone());
        if quota == 0 {
            continue;
        }
        let hits = search(index, &user.user_vector, quota, Some(&vocab.member_ids), probes)?;
        for (video_id, score) in hits {
            picked.entry(video_id.clone()).or_insert(SlateItem {
                video_id,
                score,
                provenance: Provenance::Attribute(name.clone()),
            });
        }
    }

    // Over-fetch so the fill survives overlap with restricted picks.
    let fill = search(index, &user.user_vector, k + picked.len(), None, probes)?;
    let mut items: Vec<SlateItem> = picked.into_values().collect();
    let have: std::collections::BTreeSet<String> =
        items.iter().map(|i| i.video_id.clone()).collect();
    let mut remaining = k.saturating_sub(items.len());
    for (video_id, score) in fill {
        if remaining == 0 {
            break;
        }
        if have.contains(&video_id) {
            continue;
        }
        items.push(SlateItem {
            video_id,
            score,
            provenance: Provenance::Main,
        });
        remaining -= 1;
    }
    items.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.video_id.cmp(&b.video_id))
    });
    items.truncate(k);
    Ok(Slate {
        items,
        cold_start: false,
        triggered,
    })
}
