//! Semantic KV-cache compression.
//!
//! The engine splits a head's cache at delimiter tokens, clusters each chunk
//! with a single greedy pass over key cosine similarity, mean-pools every
//! cluster into one entry, and attends over the result with the log of each
//! entry's cluster size added to its logit.
//!
//! ```
//! use semanticache::{compress, Chunking, KvCache, Threshold, TokenRecord};
//!
//! let records = vec![
//!     TokenRecord::new(vec![1.0, 0.0], vec![1.0, 1.0], 0, false),
//!     TokenRecord::new(vec![0.99, 0.1], vec![3.0, -1.0], 1, false),
//!     TokenRecord::new(vec![0.0, 1.0], vec![0.5, 0.5], 2, true),
//! ];
//! let cache = KvCache::new(2, records).unwrap();
//! let out = compress(&cache, Threshold::new(0.9).unwrap(), Chunking::Semantic).unwrap();
//! assert_eq!(out.weights(), &[2, 1]);
//! ```

pub mod attention;
pub mod bench;
pub mod cache;
pub mod chunker;
pub mod error;
pub mod format;
pub mod gsc;
pub mod merger;
pub mod oracle;
pub mod pipeline;
pub mod synthetic;
pub mod verify;

pub use attention::{
    proportional_attention, proportional_attention_with_probe, standard_attention,
    standard_attention_with_probe, AttentionOutput, Matrix, QueryBatch,
};
pub use cache::{validate_cache, DelimiterSpec, KvCache, MultiHeadCache, TokenRecord, ValidationReport, Violation};
pub use chunker::{chunk, chunk_fixed, ChunkedCache, Chunking, Segment};
pub use error::{Error, Result};
pub use gsc::{
    cluster_all, cluster_all_instrumented, cluster_chunk, cluster_chunk_instrumented, cosine_sim,
    cosine_sim_checked, Cluster, ClusterPartition, GscStats, Threshold,
};
pub use merger::{
    compress, compress_multi_head, merge_cluster, tau_for_budget, CompressedCache, CompressedEntry, EntryKind,
    EntryRef,
};
pub use pipeline::compress_and_attend;

/// Threshold grid used for sweeps and budget searches.
pub const DEFAULT_TAU_GRID: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];
