//! Threshold sweeps and decode-attention timing.

use std::hint::black_box;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::attention::{proportional_attention, standard_attention, Matrix, QueryBatch};
use crate::cache::MultiHeadCache;
use crate::chunker::Chunking;
use crate::error::{Error, Result};
use crate::gsc::Threshold;
use crate::merger::{compress_multi_head, CompressedCache};
use crate::synthetic::random_queries;

/// One CSV row of a threshold sweep. Times are seconds per decode step
/// (one query against every head).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub tau: f64,
    pub retained_fraction: f64,
    pub removed_fraction_pct: f64,
    pub attention_time_full: f64,
    pub attention_time_compressed: f64,
    pub speedup: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchConfig {
    pub queries: usize,
    pub repeats: usize,
    pub chunking: Chunking,
    pub query_seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            queries: 16,
            repeats: 5,
            chunking: Chunking::Semantic,
            query_seed: 0x5eed,
        }
    }
}

/// Worker threads available to the parallel compression path.
pub fn compression_workers() -> usize {
    rayon::current_num_threads()
}

/// Mean retained fraction over heads, and the matching removed percentage.
pub fn retention(heads: &[CompressedCache]) -> (f64, f64) {
    let retained = heads.iter().map(CompressedCache::retained_fraction).sum::<f64>() / heads.len() as f64;
    (retained, 100.0 * (1.0 - retained))
}

fn median(mut xs: Vec<Duration>) -> Duration {
    xs.sort();
    let mid = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[mid]
    } else {
        (xs[mid - 1] + xs[mid]) / 2
    }
}

/// Median over `repeats` of the mean per-step latency of `step`, after one
/// warm-up pass. Each pass runs `step` once per query index.
pub fn time_decode_steps(queries: usize, repeats: usize, mut step: impl FnMut(usize)) -> Duration {
    let mut pass = || {
        let start = Instant::now();
        for q in 0..queries {
            step(q);
        }
        start.elapsed() / queries as u32
    };
    pass();
    median((0..repeats).map(|_| pass()).collect())
}

/// Sweeps `grid`, compressing every head and timing single-query decode
/// attention over the full and the compressed caches.
pub fn run_bench(mh: &MultiHeadCache, grid: &[f64], config: &BenchConfig) -> Result<Vec<BenchRow>> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    if config.queries == 0 || config.repeats == 0 {
        return Err(Error::InvalidSpec("queries and repeats must be at least 1".into()));
    }
    if mh.is_empty() {
        return Err(Error::EmptyCache);
    }
    let full: Vec<(Matrix, Matrix)> = mh
        .heads()
        .iter()
        .map(|h| (h.key_matrix(), h.value_matrix()))
        .collect();
    let queries = random_queries(mh.dim(), config.queries, config.query_seed)
        .into_iter()
        .map(QueryBatch::single)
        .collect::<Result<Vec<_>>>()?;

    let full_time = time_decode_steps(config.queries, config.repeats, |q| {
        for (k, v) in &full {
            black_box(standard_attention(&queries[q], k, v).expect("shapes checked"));
        }
    });

    grid.iter()
        .map(|&t| {
            let compressed = compress_multi_head(mh, Threshold::new(t)?, config.chunking)?;
            let (retained, removed) = retention(&compressed);
            let compressed_time = time_decode_steps(config.queries, config.repeats, |q| {
                for c in &compressed {
                    black_box(proportional_attention(&queries[q], c).expect("shapes checked"));
                }
            });
            let (full_s, comp_s) = (full_time.as_secs_f64(), compressed_time.as_secs_f64());
            Ok(BenchRow {
                tau: t,
                retained_fraction: retained,
                removed_fraction_pct: removed,
                attention_time_full: full_s,
                attention_time_compressed: comp_s,
                speedup: if comp_s > 0.0 { full_s / comp_s } else { f64::INFINITY },
            })
        })
        .collect()
}
