//! Property checks behind the `verify` command.

use std::fmt;

use crate::cache::{validate_cache, KvCache, MultiHeadCache};
use crate::chunker::Chunking;
use crate::gsc::{cluster_all_instrumented, cosine_sim_checked, Threshold};
use crate::merger::{compress, CompressedCache, EntryKind};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PropertyFailure {
    pub property: &'static str,
    pub detail: String,
}

impl fmt::Display for PropertyFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.property, self.detail)
    }
}

impl std::error::Error for PropertyFailure {}

type Check = Result<(), PropertyFailure>;

fn failure(property: &'static str, detail: impl Into<String>) -> PropertyFailure {
    PropertyFailure {
        property,
        detail: detail.into(),
    }
}

fn fail(property: &'static str, detail: impl Into<String>) -> Check {
    Err(failure(property, detail))
}

fn same_bits(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn check_partitions(head: usize, cache: &KvCache, tau: Threshold, chunking: Chunking) -> Check {
    let chunked = chunking
        .apply(cache)
        .map_err(|e| failure("chunking", format!("head {head}: {e}")))?;
    let parts = cluster_all_instrumented(&chunked, tau)
        .map_err(|e| failure("clustering", format!("head {head}: {e}")))?;
    for (range, (partition, stats)) in chunked.chunks().zip(&parts) {
        let l = range.len();
        let mut owner = vec![false; l];
        for cluster in &partition.clusters {
            if cluster.members.first() != Some(&cluster.seed) {
                return fail("partition", format!("head {head}: cluster seed {} is not its first member", cluster.seed));
            }
            if !cluster.members.windows(2).all(|w| w[0] < w[1]) {
                return fail("partition", format!("head {head}: cluster {} members not ascending", cluster.seed));
            }
            if (range.start..cluster.seed).any(|i| !owner[i - range.start]) {
                return fail("first-unassigned", format!("head {head}: seed {} skips an unassigned record", cluster.seed));
            }
            for &m in &cluster.members {
                if !range.contains(&m) || std::mem::replace(&mut owner[m - range.start], true) {
                    return fail("partition", format!("head {head}: record {m} is outside its chunk or assigned twice"));
                }
            }
            let seed_key = &cache.records[cluster.seed].key;
            for &m in &cluster.members[1..] {
                match cosine_sim_checked(seed_key, &cache.records[m].key) {
                    Some(s) if s > tau.value() => {}
                    other => {
                        return fail(
                            "seed-similarity",
                            format!("head {head}: member {m} of seed {} has similarity {other:?}", cluster.seed),
                        )
                    }
                }
            }
        }
        if let Some(i) = owner.iter().position(|&o| !o) {
            return fail("partition", format!("head {head}: record {} is unassigned", range.start + i));
        }
        let bound = (l * l.saturating_sub(1) / 2) as u64;
        if stats.similarity_evals > bound {
            return fail(
                "work-bound",
                format!("head {head}: {} similarity evaluations for a chunk of {l}", stats.similarity_evals),
            );
        }
    }
    Ok(())
}

/// Checks a compressed head against the cache it was produced from.
pub fn check_compressed_head(head: usize, source: &KvCache, out: &CompressedCache, chunking: Chunking) -> Check {
    if out.original_len() != source.len() || out.dim() != source.dim {
        return fail("shape", format!("head {head}: compressed shape does not match source"));
    }
    let total: u64 = out.weights().iter().map(|&w| u64::from(w)).sum();
    if total != source.len() as u64 {
        return fail("weight-conservation", format!("head {head}: weights sum to {total}, expected {}", source.len()));
    }
    if !out.positions().windows(2).all(|w| w[0] < w[1]) {
        return fail("order", format!("head {head}: entry positions are not strictly ascending"));
    }
    let find = |p: u32| source.records.binary_search_by_key(&p, |r| r.position).ok();
    let mut delimiters = 0;
    for (i, e) in out.entries().enumerate() {
        let Some(src) = find(e.position) else {
            return fail("order", format!("head {head}: entry {i} has unknown position {}", e.position));
        };
        let record = &source.records[src];
        if e.kind == EntryKind::Delimiter {
            delimiters += 1;
            if !record.is_delimiter || !same_bits(e.key, &record.key) || !same_bits(e.value, &record.value) {
                return fail("delimiter-transparency", format!("head {head}: delimiter entry {i} differs from record {src}"));
            }
        }
        if e.weight == 1 && (!same_bits(e.key, &record.key) || !same_bits(e.value, &record.value)) {
            return fail("singleton-fidelity", format!("head {head}: weight-1 entry {i} differs from record {src}"));
        }
    }
    let expected_delimiters = match chunking {
        Chunking::Semantic => source.records.iter().filter(|r| r.is_delimiter).count(),
        Chunking::Fixed(_) => 0,
    };
    if delimiters != expected_delimiters {
        return fail(
            "delimiter-transparency",
            format!("head {head}: {delimiters} delimiter entries, source has {expected_delimiters}"),
        );
    }
    Ok(())
}

/// Validates every head, checks clustering properties at `tau`, then
/// compresses and checks the output.
pub fn verify_cache(mh: &MultiHeadCache, tau: Threshold, chunking: Chunking) -> Check {
    for (h, head) in mh.heads().iter().enumerate() {
        let report = validate_cache(head);
        if !report.is_empty() {
            return fail("validate", format!("head {h}: {report}"));
        }
        check_partitions(h, head, tau, chunking)?;
        let out = compress(head, tau, chunking)
            .map_err(|e| failure("compress", format!("head {h}: {e}")))?;
        check_compressed_head(h, head, &out, chunking)?;
    }
    Ok(())
}

/// [`verify_cache`], then checks `compressed` against the source and against
/// a fresh compression at the same settings.
pub fn verify_pair(
    mh: &MultiHeadCache,
    compressed: &[CompressedCache],
    tau: Threshold,
    chunking: Chunking,
) -> Check {
    verify_cache(mh, tau, chunking)?;
    if compressed.len() != mh.heads().len() {
        return fail(
            "shape",
            format!("{} compressed heads for {} source heads", compressed.len(), mh.heads().len()),
        );
    }
    for (h, (head, out)) in mh.heads().iter().zip(compressed).enumerate() {
        check_compressed_head(h, head, out, chunking)?;
        let fresh = compress(head, tau, chunking)
            .map_err(|e| failure("compress", format!("head {h}: {e}")))?;
        if &fresh != out {
            return fail("recompress", format!("head {h}: stored compression differs from a fresh run at tau={}", tau.value()));
        }
    }
    Ok(())
}
