//! Greedy seed-based clustering of key vectors within a chunk.
//!
//! A single forward pass: the first unassigned record becomes a seed and
//! absorbs every later unassigned record whose key cosine similarity with the
//! seed is strictly greater than the threshold. Absorbed records are never
//! reconsidered, so members are similar to their seed but not necessarily to
//! each other.

use rayon::prelude::*;

use crate::cache::KvCache;
use crate::chunker::ChunkedCache;
use crate::error::{Error, Result};

/// Similarity threshold in `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Threshold(f64);

impl Threshold {
    pub fn new(tau: f64) -> Result<Self> {
        if (-1.0..=1.0).contains(&tau) {
            Ok(Self(tau))
        } else {
            Err(Error::InvalidThreshold(tau))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Threshold {
    type Error = Error;

    fn try_from(tau: f64) -> Result<Self> {
        Self::new(tau)
    }
}

fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

fn cosine_from_parts(dot: f64, norm_a: f64, norm_b: f64) -> Option<f64> {
    if norm_a == 0.0 || norm_b == 0.0 {
        None
    } else {
        Some((dot / (norm_a * norm_b)).clamp(-1.0, 1.0))
    }
}

/// Cosine similarity, or `None` when either vector has zero norm.
///
/// # Panics
/// If the vectors differ in length.
pub fn cosine_sim_checked(a: &[f32], b: &[f32]) -> Option<f64> {
    assert_eq!(a.len(), b.len(), "cosine_sim: length mismatch");
    cosine_from_parts(dot(a, b), l2_norm(a), l2_norm(b))
}

/// Cosine similarity clamped to `[-1, 1]`; zero-norm input yields `0.0`.
///
/// Clustering does not use this value for zero-norm keys: such keys are
/// never absorbed into a cluster.
pub fn cosine_sim(a: &[f32], b: &[f32]) -> f64 {
    cosine_sim_checked(a, b).unwrap_or(0.0)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cluster {
    pub seed: usize,
    /// Ascending record indices, seed first.
    pub members: Vec<usize>,
}

impl Cluster {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Disjoint clusters covering one chunk, ordered by seed.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClusterPartition {
    pub clusters: Vec<Cluster>,
}

/// Work counters for one clustering pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GscStats {
    pub similarity_evals: u64,
    /// Similarity evaluations that involved a zero-norm key.
    pub degenerate_evals: u64,
}

impl std::ops::AddAssign for GscStats {
    fn add_assign(&mut self, rhs: Self) {
        self.similarity_evals += rhs.similarity_evals;
        self.degenerate_evals += rhs.degenerate_evals;
    }
}

fn check_indices(cache: &KvCache, chunk: &[usize]) -> Result<()> {
    for (k, &i) in chunk.iter().enumerate() {
        if i >= cache.len() {
            return Err(Error::InvalidIndexSet(format!(
                "index {i} out of bounds for cache of {} records",
                cache.len()
            )));
        }
        if k > 0 && chunk[k - 1] >= i {
            return Err(Error::InvalidIndexSet(format!(
                "indices must be strictly ascending, found {} before {i}",
                chunk[k - 1]
            )));
        }
        if cache.records[i].key.len() != cache.dim {
            return Err(Error::InvalidIndexSet(format!(
                "record {i} has key length {} but dim is {}",
                cache.records[i].key.len(),
                cache.dim
            )));
        }
    }
    Ok(())
}

/// Clusters the records at `chunk` (ascending indices into `cache`).
///
/// Delimiter flags are not inspected: the semantic chunker never places
/// delimiters in a chunk, and fixed-size chunking deliberately treats them as
/// ordinary tokens.
pub fn cluster_chunk(cache: &KvCache, chunk: &[usize], tau: Threshold) -> Result<ClusterPartition> {
    cluster_chunk_instrumented(cache, chunk, tau).map(|(p, _)| p)
}

/// [`cluster_chunk`] that also returns its work counters.
pub fn cluster_chunk_instrumented(
    cache: &KvCache,
    chunk: &[usize],
    tau: Threshold,
) -> Result<(ClusterPartition, GscStats)> {
    check_indices(cache, chunk)?;
    let tau = tau.value();
    let keys: Vec<&[f32]> = chunk.iter().map(|&i| cache.records[i].key.as_slice()).collect();
    let norms: Vec<f64> = keys.iter().map(|k| l2_norm(k)).collect();

    let mut stats = GscStats::default();
    let mut assigned = vec![false; chunk.len()];
    let mut clusters = Vec::new();
    for s in 0..chunk.len() {
        if assigned[s] {
            continue;
        }
        assigned[s] = true;
        let mut members = vec![chunk[s]];
        for j in s + 1..chunk.len() {
            if assigned[j] {
                continue;
            }
            stats.similarity_evals += 1;
            // A zero-norm key is never absorbed and never absorbs, whatever tau is.
            let absorb = match cosine_from_parts(dot(keys[s], keys[j]), norms[s], norms[j]) {
                Some(sim) => sim > tau,
                None => {
                    stats.degenerate_evals += 1;
                    false
                }
            };
            if absorb {
                assigned[j] = true;
                members.push(chunk[j]);
            }
        }
        clusters.push(Cluster {
            seed: chunk[s],
            members,
        });
    }
    Ok((ClusterPartition { clusters }, stats))
}

/// Clusters every chunk segment independently, in segment order.
pub fn cluster_all(chunked: &ChunkedCache<'_>, tau: Threshold) -> Result<Vec<ClusterPartition>> {
    Ok(cluster_all_instrumented(chunked, tau)?
        .into_iter()
        .map(|(p, _)| p)
        .collect())
}

/// [`cluster_all`] with per-chunk work counters.
pub fn cluster_all_instrumented(
    chunked: &ChunkedCache<'_>,
    tau: Threshold,
) -> Result<Vec<(ClusterPartition, GscStats)>> {
    let chunks: Vec<Vec<usize>> = chunked.chunks().map(|r| r.collect()).collect();
    chunks
        .par_iter()
        .map(|indices| cluster_chunk_instrumented(chunked.source, indices, tau))
        .collect()
}
