//! Vector index for candidate retrieval: exact scan or a clustered
//! inverted-file approximation with a k-means coarse quantizer.
//!
//! Embeddings are unit-normalized at build time and similarity is the inner
//! product, so scores are cosines. All tie-breaks are total (score, then id),
//! which makes every query deterministic.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::math::{dot, normalize};

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("cannot index an empty corpus")]
    EmptyCorpus,
    #[error("query dimension {actual} does not match index dimension {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("cluster count {clusters} invalid for {n} entries (need 1 <= C <= n distinct points)")]
    BadClusterCount { clusters: usize, n: usize },
    #[error("probes {probes} outside 1..={clusters}")]
    BadProbes { probes: usize, clusters: usize },
    #[error("index is not clustered")]
    NotClustered,
    #[error("k must be >= 1")]
    BadK,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad index file: {reason}")]
    BadIndexFile { reason: String },
}

/// One indexed video: id, unit-normalized embedding, and the popularity
/// signal kept for cold-start fallback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub embedding: Vec<f64>,
    pub impact_score: f64,
}

/// Coarse quantizer state. Posting lists hold entry positions and partition
/// the corpus: every position appears in exactly one list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterData {
    pub centroids: Vec<Vec<f64>>,
    pub posting_lists: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorIndex {
    dim: usize,
    /// Sorted by id ascending.
    entries: Vec<IndexEntry>,
    clusters: Option<ClusterData>,
    #[serde(skip)]
    id_to_pos: HashMap<String, u32>,
}

/// When a restriction set is at most this multiple of k, score its members
/// directly instead of walking the index.
const BRUTE_FORCE_FACTOR: usize = 4;

fn sort_hits(hits: &mut Vec<(String, f64)>, k: usize) {
    hits.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    hits.truncate(k);
}

impl VectorIndex {
    fn from_corpus(corpus: &Corpus) -> Result<(usize, Vec<IndexEntry>), IndexError> {
        let entries: Vec<IndexEntry> = corpus
            .records()
            .map(|r| IndexEntry {
                id: r.id.clone(),
                embedding: normalize(&r.embedding),
                impact_score: r.priority_signals.impact_score,
            })
            .collect();
        if entries.is_empty() {
            return Err(IndexError::EmptyCorpus);
        }
        Ok((corpus.dim(), entries))
    }

    fn finish(dim: usize, entries: Vec<IndexEntry>, clusters: Option<ClusterData>) -> Self {
        let id_to_pos = entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.id.clone(), i as u32))
            .collect();
        Self {
            dim,
            entries,
            clusters,
            id_to_pos,
        }
    }

    /// Flat index over the corpus; queries scan every entry.
    pub fn build_exact(corpus: &Corpus) -> Result<Self, IndexError> {
        let (dim, entries) = Self::from_corpus(corpus)?;
        Ok(Self::finish(dim, entries, None))
    }

    /// Clustered index: k-means over the normalized embeddings, then one
    /// posting list per centroid.
    pub fn build_clustered(corpus: &Corpus, n_clusters: usize, seed: u64) -> Result<Self, IndexError> {
        let (dim, entries) = Self::from_corpus(corpus)?;
        let points: Vec<&[f64]> = entries.iter().map(|e| e.embedding.as_slice()).collect();
        let (centroids, assignments) = kmeans(&points, n_clusters, seed)?;
        let mut posting_lists = vec![Vec::new(); n_clusters];
        for (pos, &c) in assignments.iter().enumerate() {
            posting_lists[c].push(pos as u32);
        }
        Ok(Self::finish(
            dim,
            entries,
            Some(ClusterData {
                centroids,
                posting_lists,
            }),
        ))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_clustered(&self) -> bool {
        self.clusters.is_some()
    }

    pub fn n_clusters(&self) -> Option<usize> {
        self.clusters.as_ref().map(|c| c.centroids.len())
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn entry(&self, id: &str) -> Option<&IndexEntry> {
        self.id_to_pos.get(id).map(|&p| &self.entries[p as usize])
    }

    fn check_query(&self, query: &[f64], k: usize) -> Result<(), IndexError> {
        if k < 1 {
            return Err(IndexError::BadK);
        }
        if query.len() != self.dim {
            return Err(IndexError::DimensionMismatch {
                expected: self.dim,
                actual: query.len(),
            });
        }
        Ok(())
    }

    /// Scores restriction members one by one; ids absent from the index are
    /// ignored.
    fn restricted_brute(&self, query: &[f64], k: usize, restriction: &BTreeSet<String>) -> Vec<(String, f64)> {
        let mut hits: Vec<(String, f64)> = restriction
            .iter()
            .filter_map(|id| {
                self.id_to_pos.get(id).map(|&p| {
                    let e = &self.entries[p as usize];
                    (e.id.clone(), dot(query, &e.embedding))
                })
            })
            .collect();
        sort_hits(&mut hits, k);
        hits
    }

    fn membership_bitset(&self, restriction: &BTreeSet<String>) -> Vec<bool> {
        let mut bits = vec![false; self.entries.len()];
        for id in restriction {
            if let Some(&p) = self.id_to_pos.get(id) {
                bits[p as usize] = true;
            }
        }
        bits
    }

    /// Top-k by inner product over the whole index (or the restriction set).
    /// Ties break by id ascending; fewer than k come back when the candidate
    /// pool is smaller.
    pub fn knn_exact(
        &self,
        query: &[f64],
        k: usize,
        restriction: Option<&BTreeSet<String>>,
    ) -> Result<Vec<(String, f64)>, IndexError> {
        self.check_query(query, k)?;
        match restriction {
            Some(r) if r.len() <= BRUTE_FORCE_FACTOR * k => Ok(self.restricted_brute(query, k, r)),
            Some(r) => {
                let bits = self.membership_bitset(r);
                let mut hits: Vec<(String, f64)> = self
                    .entries
                    .iter()
                    .zip(&bits)
                    .filter(|(_, &b)| b)
                    .map(|(e, _)| (e.id.clone(), dot(query, &e.embedding)))
                    .collect();
                sort_hits(&mut hits, k);
                Ok(hits)
            }
            None => {
                let mut hits: Vec<(String, f64)> = self
                    .entries
                    .iter()
                    .map(|e| (e.id.clone(), dot(query, &e.embedding)))
                    .collect();
                sort_hits(&mut hits, k);
                Ok(hits)
            }
        }
    }

    /// Scans only the `probes` clusters whose centroids are most similar to
    /// the query. With probes = C the scan covers every entry, so the result
    /// equals [`knn_exact`] element-wise. Small restrictions short-circuit to
    /// direct scoring, which is already exact.
    pub fn knn_clustered(
        &self,
        query: &[f64],
        k: usize,
        probes: usize,
        restriction: Option<&BTreeSet<String>>,
    ) -> Result<Vec<(String, f64)>, IndexError> {
        self.check_query(query, k)?;
        let clusters = self.clusters.as_ref().ok_or(IndexError::NotClustered)?;
        let c = clusters.centroids.len();
        if probes < 1 || probes > c {
            return Err(IndexError::BadProbes {
                probes,
                clusters: c,
            });
        }
        if let Some(r) = restriction {
            if r.len() <= BRUTE_FORCE_FACTOR * k {
                return Ok(self.restricted_brute(query, k, r));
            }
        }
        // Entries are unit vectors, so max inner product is min Euclidean
        // distance; ranking probe clusters by distance to the normalized
        // query accounts for centroid norms, which raw dot ranking does not.
        let unit_query = normalize(query);
        let mut ranked: Vec<(usize, f64)> = clusters
            .centroids
            .iter()
            .enumerate()
            .map(|(i, c)| (i, squared_distance(&unit_query, c)))
            .collect();
        ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
        let bits = restriction.map(|r| self.membership_bitset(r));
        let mut hits: Vec<(String, f64)> = Vec::new();
        for &(ci, _) in ranked.iter().take(probes) {
            for &pos in &clusters.posting_lists[ci] {
                if let Some(b) = &bits {
                    if !b[pos as usize] {
                        continue;
                    }
                }
                let e = &self.entries[pos as usize];
                hits.push((e.id.clone(), dot(query, &e.embedding)));
            }
        }
        sort_hits(&mut hits, k);
        Ok(hits)
    }

    /// Most popular entries by impact score, ties by id. The cold-start
    /// fallback pool.
    pub fn top_by_impact(&self, k: usize) -> Vec<(String, f64)> {
        let mut hits: Vec<(String, f64)> = self
            .entries
            .iter()
            .map(|e| (e.id.clone(), e.impact_score))
            .collect();
        sort_hits(&mut hits, k);
        hits
    }

    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        let file = IndexFile {
            format_version: INDEX_FORMAT_VERSION,
            index: self.clone(),
        };
        let json = serde_json::to_string(&file).expect("index serializes");
        std::fs::write(path, json).map_err(|e| IndexError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        let text = std::fs::read_to_string(path).map_err(|e| IndexError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let file: IndexFile = serde_json::from_str(&text).map_err(|e| IndexError::BadIndexFile {
            reason: e.to_string(),
        })?;
        if file.format_version != INDEX_FORMAT_VERSION {
            return Err(IndexError::BadIndexFile {
                reason: format!("unsupported format version {}", file.format_version),
            });
        }
        let raw = file.index;
        let bad = |reason: &str| {
            Err(IndexError::BadIndexFile {
                reason: reason.to_string(),
            })
        };
        if raw.entries.is_empty() {
            return bad("no entries");
        }
        for e in &raw.entries {
            if e.embedding.len() != raw.dim {
                return bad("entry dimension mismatch");
            }
        }
        if !raw.entries.windows(2).all(|w| w[0].id < w[1].id) {
            return bad("entries not sorted by unique id");
        }
        if let Some(c) = &raw.clusters {
            if c.centroids.len() != c.posting_lists.len() {
                return bad("centroid/posting list count mismatch");
            }
            if c.centroids.iter().any(|cd| cd.len() != raw.dim) {
                return bad("centroid dimension mismatch");
            }
            let mut seen = vec![false; raw.entries.len()];
            for list in &c.posting_lists {
                for &pos in list {
                    match seen.get_mut(pos as usize) {
                        Some(s) if !*s => *s = true,
                        _ => return bad("posting lists do not partition the entries"),
                    }
                }
            }
            if !seen.iter().all(|&s| s) {
                return bad("posting lists do not partition the entries");
            }
        }
        Ok(Self::finish(raw.dim, raw.entries, raw.clusters))
    }
}

#[derive(Serialize, Deserialize)]
struct IndexFile {
    format_version: u32,
    index: VectorIndex,
}

const INDEX_FORMAT_VERSION: u32 = 1;

/// Lloyd's algorithm with seeded distinct-point initialization. Stops after
/// 25 iterations or when no centroid moves more than 1e-6. Clusters that go
/// empty are reseeded from the point currently farthest from its centroid.
fn kmeans(points: &[&[f64]], k: usize, seed: u64) -> Result<(Vec<Vec<f64>>, Vec<usize>), IndexError> {
    let n = points.len();
    if k < 1 || k > n {
        return Err(IndexError::BadClusterCount { clusters: k, n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    for &i in &order {
        if centroids.len() == k {
            break;
        }
        if !centroids.iter().any(|c| c.as_slice() == points[i]) {
            centroids.push(points[i].to_vec());
        }
    }
    if centroids.len() < k {
        return Err(IndexError::BadClusterCount { clusters: k, n });
    }

    let mut assignments = vec![0usize; n];
    for _ in 0..25 {
        assign_nearest(points, &centroids, &mut assignments);
        let mut sums = vec![vec![0.0; points[0].len()]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, &x) in sums[a].iter_mut().zip(*p) {
                *s += x;
            }
        }
        let mut new_centroids = centroids.clone();
        for c in 0..k {
            if counts[c] > 0 {
                for (nc, s) in new_centroids[c].iter_mut().zip(&sums[c]) {
                    *nc = s / counts[c] as f64;
                }
            }
        }
        reseed_empty_clusters(points, &mut new_centroids, &mut assignments, &counts);
        let movement = centroids
            .iter()
            .zip(&new_centroids)
            .map(|(a, b)| {
                a.iter()
                    .zip(b)
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max);
        centroids = new_centroids;
        if movement < 1e-6 {
            break;
        }
    }
    assign_nearest(points, &centroids, &mut assignments);
    Ok((centroids, assignments))
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn assign_nearest(points: &[&[f64]], centroids: &[Vec<f64>], assignments: &mut [usize]) {
    for (p, a) in points.iter().zip(assignments.iter_mut()) {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (c, centroid) in centroids.iter().enumerate() {
            let d = squared_distance(p, centroid);
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        *a = best;
    }
}

/// Moves each empty cluster's centroid onto the point farthest from its
/// current centroid, claiming that point. Distinct points are claimed for
/// distinct empty clusters.
fn reseed_empty_clusters(
    points: &[&[f64]],
    centroids: &mut [Vec<f64>],
    assignments: &mut [usize],
    counts: &[usize],
) {
    let mut counts = counts.to_vec();
    for c in 0..centroids.len() {
        if counts[c] > 0 {
            continue;
        }
        let mut farthest = None;
        let mut far_d = -1.0;
        for (i, p) in points.iter().enumerate() {
            // Only steal from clusters that can spare a point.
            if counts[assignments[i]] <= 1 {
                continue;
            }
            let d = squared_distance(p, &centroids[assignments[i]]);
            if d > far_d {
                far_d = d;
                farthest = Some(i);
            }
        }
        if let Some(i) = farthest {
            counts[assignments[i]] -= 1;
            centroids[c] = points[i].to_vec();
            assignments[i] = c;
            counts[c] = 1;
        }
    }
}
