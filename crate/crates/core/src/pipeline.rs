//! One-call compression plus attention for host decode loops.

use crate::attention::{proportional_attention, AttentionOutput, QueryBatch};
use crate::cache::KvCache;
use crate::chunker::Chunking;
use crate::error::Result;
use crate::gsc::Threshold;
use crate::merger::compress;

/// Compresses `cache` with semantic chunking at `tau` and attends `queries`
/// over the result. The cache is recompressed on every call.
pub fn compress_and_attend(cache: &KvCache, tau: Threshold, queries: &QueryBatch) -> Result<AttentionOutput> {
    let compressed = compress(cache, tau, Chunking::Semantic)?;
    proportional_attention(queries, &compressed)
}
