//! Mean-pool merging of clusters into semantic cores and assembly of the
//! compressed cache.

use rayon::prelude::*;

use crate::attention::Matrix;
use crate::cache::{KvCache, MultiHeadCache};
use crate::chunker::{Chunking, Segment};
use crate::error::{Error, Result};
use crate::gsc::{cluster_all, Cluster, Threshold};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryKind {
    Core,
    Delimiter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedEntry {
    pub key: Vec<f32>,
    pub value: Vec<f32>,
    /// Number of original tokens represented by this entry.
    pub weight: u32,
    /// Seed position for cores, own position for delimiters.
    pub position: u32,
    pub kind: EntryKind,
}

/// Borrowed view of one entry of a [`CompressedCache`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntryRef<'a> {
    pub key: &'a [f32],
    pub value: &'a [f32],
    pub weight: u32,
    pub position: u32,
    pub kind: EntryKind,
}

impl EntryRef<'_> {
    pub fn to_owned(&self) -> CompressedEntry {
        CompressedEntry {
            key: self.key.to_vec(),
            value: self.value.to_vec(),
            weight: self.weight,
            position: self.position,
            kind: self.kind,
        }
    }
}

/// Semantic cores and preserved delimiters of one head, in position order.
///
/// Stored column-wise so attention can stream the key and value rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedCache {
    dim: usize,
    original_len: usize,
    keys: Matrix,
    values: Matrix,
    weights: Vec<u32>,
    positions: Vec<u32>,
    kinds: Vec<EntryKind>,
}

impl CompressedCache {
    pub fn from_entries(dim: usize, original_len: usize, entries: Vec<CompressedEntry>) -> Result<Self> {
        let mut keys = Vec::with_capacity(entries.len() * dim);
        let mut values = Vec::with_capacity(entries.len() * dim);
        let mut weights = Vec::with_capacity(entries.len());
        let mut positions = Vec::with_capacity(entries.len());
        let mut kinds = Vec::with_capacity(entries.len());
        for (i, e) in entries.into_iter().enumerate() {
            if e.key.len() != dim || e.value.len() != dim {
                return Err(Error::InvalidCompressed(format!(
                    "entry {i}: key/value lengths {}/{} differ from dim {dim}",
                    e.key.len(),
                    e.value.len()
                )));
            }
            keys.extend_from_slice(&e.key);
            values.extend_from_slice(&e.value);
            weights.push(e.weight);
            positions.push(e.position);
            kinds.push(e.kind);
        }
        Self::from_columns(dim, original_len, keys, values, weights, positions, kinds)
    }

    /// Builds a cache from column data (row-major `m x dim` keys and values),
    /// checking every invariant.
    pub fn from_columns(
        dim: usize,
        original_len: usize,
        keys: Vec<f32>,
        values: Vec<f32>,
        weights: Vec<u32>,
        positions: Vec<u32>,
        kinds: Vec<EntryKind>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidCompressed("dim must be positive".into()));
        }
        let m = weights.len();
        if positions.len() != m || kinds.len() != m {
            return Err(Error::InvalidCompressed(
                "column lengths disagree".into(),
            ));
        }
        let keys = Matrix::new(m, dim, keys)?;
        let values = Matrix::new(m, dim, values)?;
        let cache = Self {
            dim,
            original_len,
            keys,
            values,
            weights,
            positions,
            kinds,
        };
        cache.check_invariants()?;
        Ok(cache)
    }

    fn check_invariants(&self) -> Result<()> {
        let mut total: u64 = 0;
        for i in 0..self.len() {
            let (w, kind) = (self.weights[i], self.kinds[i]);
            if w == 0 {
                return Err(Error::InvalidWeight { index: i, weight: w });
            }
            if kind == EntryKind::Delimiter && w != 1 {
                return Err(Error::InvalidCompressed(format!(
                    "delimiter entry {i} has weight {w}"
                )));
            }
            if i > 0 && self.positions[i - 1] >= self.positions[i] {
                return Err(Error::InvalidCompressed(format!(
                    "entry {i}: position {} does not follow {}",
                    self.positions[i],
                    self.positions[i - 1]
                )));
            }
            total += u64::from(w);
        }
        if total != self.original_len as u64 {
            return Err(Error::InvalidCompressed(format!(
                "weights sum to {total}, original length is {}",
                self.original_len
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn original_len(&self) -> usize {
        self.original_len
    }

    /// Number of entries.
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn keys(&self) -> &Matrix {
        &self.keys
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn weights(&self) -> &[u32] {
        &self.weights
    }

    pub fn positions(&self) -> &[u32] {
        &self.positions
    }

    pub fn kinds(&self) -> &[EntryKind] {
        &self.kinds
    }

    pub fn entry(&self, i: usize) -> EntryRef<'_> {
        EntryRef {
            key: self.keys.row(i),
            value: self.values.row(i),
            weight: self.weights[i],
            position: self.positions[i],
            kind: self.kinds[i],
        }
    }

    pub fn entries(&self) -> impl ExactSizeIterator<Item = EntryRef<'_>> + '_ {
        (0..self.len()).map(|i| self.entry(i))
    }

    /// Entries divided by original length; `1.0` for an empty original.
    pub fn retained_fraction(&self) -> f64 {
        if self.original_len == 0 {
            1.0
        } else {
            self.len() as f64 / self.original_len as f64
        }
    }
}

fn mean_of<'a>(rows: impl Iterator<Item = &'a [f32]>, dim: usize, count: usize) -> Vec<f32> {
    let mut acc: Vec<f64> = Vec::with_capacity(dim);
    for (k, row) in rows.enumerate() {
        if k == 0 {
            // Seeding from the first row keeps singletons bit-exact (including -0.0).
            acc.extend(row.iter().map(|&x| f64::from(x)));
        } else {
            for (a, &x) in acc.iter_mut().zip(row) {
                *a += f64::from(x);
            }
        }
    }
    if count > 1 {
        let n = count as f64;
        acc.iter().map(|&a| (a / n) as f32).collect()
    } else {
        acc.iter().map(|&a| a as f32).collect()
    }
}

/// Mean-pools the cluster's keys and values into one core entry.
pub fn merge_cluster(cache: &KvCache, cluster: &Cluster) -> Result<CompressedEntry> {
    if cluster.members.is_empty() {
        return Err(Error::EmptyCluster);
    }
    if let Some(&bad) = cluster.members.iter().find(|&&i| i >= cache.len()) {
        return Err(Error::InvalidIndexSet(format!(
            "cluster member {bad} out of bounds for cache of {} records",
            cache.len()
        )));
    }
    let seed = cluster.members[0];
    let records = || cluster.members.iter().map(|&i| &cache.records[i]);
    let count = cluster.members.len();
    Ok(CompressedEntry {
        key: mean_of(records().map(|r| r.key.as_slice()), cache.dim, count),
        value: mean_of(records().map(|r| r.value.as_slice()), cache.dim, count),
        weight: u32::try_from(count).map_err(|_| {
            Error::InvalidIndexSet(format!("cluster of {count} members exceeds u32 weight"))
        })?,
        position: cache.records[seed].position,
        kind: EntryKind::Core,
    })
}

/// Chunk, cluster and merge one head.
pub fn compress(cache: &KvCache, tau: Threshold, chunking: Chunking) -> Result<CompressedCache> {
    let chunked = chunking.apply(cache)?;
    let partitions = cluster_all(&chunked, tau)?;
    let mut partitions = partitions.into_iter();
    let mut entries = Vec::with_capacity(cache.len());
    for segment in &chunked.segments {
        match segment {
            Segment::Delimiter(i) => {
                let r = &cache.records[*i];
                entries.push(CompressedEntry {
                    key: r.key.clone(),
                    value: r.value.clone(),
                    weight: 1,
                    position: r.position,
                    kind: EntryKind::Delimiter,
                });
            }
            Segment::Chunk(_) => {
                let partition = partitions
                    .next()
                    .expect("one partition per chunk segment");
                for cluster in &partition.clusters {
                    entries.push(merge_cluster(cache, cluster)?);
                }
            }
        }
    }
    CompressedCache::from_entries(cache.dim, cache.len(), entries)
}

/// Compresses each head independently; output lengths may differ per head.
pub fn compress_multi_head(
    mh: &MultiHeadCache,
    tau: Threshold,
    chunking: Chunking,
) -> Result<Vec<CompressedCache>> {
    mh.heads()
        .par_iter()
        .map(|head| compress(head, tau, chunking))
        .collect()
}

/// Picks the grid threshold whose retained fraction is closest to `target`.
///
/// Ties go to the larger threshold. Returns the threshold and the fraction it
/// achieves.
pub fn tau_for_budget(cache: &KvCache, target: f64, grid: &[f64]) -> Result<(Threshold, f64)> {
    if cache.is_empty() {
        return Err(Error::EmptyCache);
    }
    if !(target > 0.0 && target <= 1.0) {
        return Err(Error::InvalidTarget(target));
    }
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let mut best: Option<(Threshold, f64)> = None;
    for &t in grid {
        let tau = Threshold::new(t)?;
        let achieved = compress(cache, tau, Chunking::Semantic)?.retained_fraction();
        let better = match best {
            None => true,
            Some((best_tau, best_frac)) => {
                let (gap, best_gap) = ((achieved - target).abs(), (best_frac - target).abs());
                gap < best_gap || (gap == best_gap && tau.value() > best_tau.value())
            }
        };
        if better {
            best = Some((tau, achieved));
        }
    }
    Ok(best.expect("grid is non-empty"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::TokenRecord;
    use proptest::prelude::*;

    fn tau(t: f64) -> Threshold {
        Threshold::new(t).unwrap()
    }

    fn cache(keys: &[Vec<f32>], values: &[Vec<f32>], flags: &[bool]) -> KvCache {
        let records = keys
            .iter()
            .zip(values)
            .zip(flags)
            .enumerate()
            .map(|(i, ((k, v), &f))| TokenRecord::new(k.clone(), v.clone(), i as u32 * 2, f))
            .collect();
        KvCache::new(keys[0].len(), records).unwrap()
    }

    fn cluster(members: &[usize]) -> Cluster {
        Cluster {
            seed: members[0],
            members: members.to_vec(),
        }
    }

    #[test]
    fn singleton_is_identity() {
        let c = cache(&[vec![-0.0, 1.5]], &[vec![3.25, -7.0]], &[false]);
        let e = merge_cluster(&c, &cluster(&[0])).unwrap();
        assert_eq!(e.weight, 1);
        assert_eq!(e.key[0].to_bits(), (-0.0f32).to_bits());
        assert_eq!(e.key, c.records[0].key);
        assert_eq!(e.value, c.records[0].value);
    }

    #[test]
    fn pairwise_and_triple_means() {
        let c = cache(
            &[vec![1.0, 0.0], vec![0.0, 1.0]],
            &[vec![2.0, 0.0], vec![0.0, 2.0]],
            &[false, false],
        );
        let e = merge_cluster(&c, &cluster(&[0, 1])).unwrap();
        assert_eq!(e.key, vec![0.5, 0.5]);
        assert_eq!(e.value, vec![1.0, 1.0]);
        assert_eq!((e.weight, e.position, e.kind), (2, 0, EntryKind::Core));

        let c = cache(
            &[vec![3.0, 0.0], vec![0.0, 3.0], vec![3.0, 3.0]],
            &vec![vec![0.0; 2]; 3],
            &[false; 3],
        );
        let e = merge_cluster(&c, &cluster(&[0, 1, 2])).unwrap();
        assert_eq!(e.key, vec![2.0, 2.0]);
        assert_eq!(e.weight, 3);
    }

    #[test]
    fn empty_cluster_is_an_error() {
        let c = cache(&[vec![1.0]], &[vec![1.0]], &[false]);
        let empty = Cluster {
            seed: 0,
            members: vec![],
        };
        assert!(matches!(merge_cluster(&c, &empty), Err(Error::EmptyCluster)));
    }

    #[test]
    fn all_delimiters_pass_through() {
        let keys = vec![vec![1.0, 2.0], vec![1.0, 2.0], vec![3.0, 4.0]];
        let c = cache(&keys, &keys, &[true; 3]);
        let out = compress(&c, tau(0.0), Chunking::Semantic).unwrap();
        assert_eq!(out.len(), 3);
        for (e, r) in out.entries().zip(&c.records) {
            assert_eq!(e.kind, EntryKind::Delimiter);
            assert_eq!(e.weight, 1);
            assert_eq!(e.key, r.key.as_slice());
        }
    }

    #[test]
    fn three_key_chunk_with_trailing_delimiter() {
        let keys = vec![
            vec![1.0, 0.0],
            vec![0.995, 0.0999],
            vec![0.0, 1.0],
            vec![0.4, 0.4],
        ];
        let values = vec![vec![1.0, 1.0], vec![3.0, -1.0], vec![0.5, 0.5], vec![9.0, 9.0]];
        let c = cache(&keys, &values, &[false, false, false, true]);
        let out = compress(&c, tau(0.9), Chunking::Semantic).unwrap();
        assert_eq!(out.len(), 3);
        assert_eq!(out.weights(), &[2, 1, 1]);
        assert_eq!(out.kinds(), &[EntryKind::Core, EntryKind::Core, EntryKind::Delimiter]);
        assert_eq!(out.positions(), &[0, 4, 6]);
        // f32 mean of (1, 0.995f32) and (0, 0.0999f32), accumulated in f64.
        assert_eq!(out.entry(0).key, &[0.9975f32, 0.04995]);
        assert_eq!(out.entry(0).value, &[2.0f32, 0.0]);
        assert_eq!(out.entry(1).key, keys[2].as_slice());
        assert_eq!(out.entry(2).value, values[3].as_slice());
    }

    #[test]
    fn tau_one_keeps_everything() {
        let keys = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.5, 0.5]];
        let c = cache(&keys, &keys, &[false; 3]);
        let out = compress(&c, tau(1.0), Chunking::Semantic).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.weights().iter().all(|&w| w == 1));
    }

    #[test]
    fn budget_search() {
        let keys = vec![vec![1.0, 0.1], vec![0.9, 0.2], vec![0.2, 1.0], vec![0.1, 0.9]];
        let c = cache(&keys, &keys, &[false; 4]);
        assert_eq!(tau_for_budget(&c, 1.0, &[0.5, 1.0]).unwrap(), (tau(1.0), 1.0));
        let (t, f) = tau_for_budget(&c, 0.5, &[0.5, 0.9, 0.999]).unwrap();
        assert_eq!(f, 0.5);
        // 0.5 and 0.9 both give two clusters; the larger threshold wins the tie.
        assert_eq!(t, tau(0.9));

        let single = cache(&[vec![1.0, 2.0]], &[vec![0.0, 0.0]], &[false]);
        for t in [0.5, 0.7, 0.9] {
            assert_eq!(tau_for_budget(&single, 0.2, &[t]).unwrap().1, 1.0);
        }
        assert!(matches!(tau_for_budget(&c, 0.5, &[]), Err(Error::EmptyGrid)));
        assert!(matches!(tau_for_budget(&c, 0.0, &[0.5]), Err(Error::InvalidTarget(_))));
        let empty = KvCache::new(2, vec![]).unwrap();
        assert!(matches!(tau_for_budget(&empty, 0.5, &[0.5]), Err(Error::EmptyCache)));
    }

    #[test]
    fn invariant_checks_on_construction() {
        let e = |pos, w, kind| CompressedEntry {
            key: vec![0.0],
            value: vec![0.0],
            weight: w,
            position: pos,
            kind,
        };
        assert!(CompressedCache::from_entries(1, 3, vec![e(0, 2, EntryKind::Core), e(1, 1, EntryKind::Delimiter)]).is_ok());
        assert!(CompressedCache::from_entries(1, 4, vec![e(0, 2, EntryKind::Core), e(1, 1, EntryKind::Delimiter)]).is_err());
        assert!(CompressedCache::from_entries(1, 3, vec![e(0, 1, EntryKind::Core), e(1, 2, EntryKind::Delimiter)]).is_err());
        assert!(CompressedCache::from_entries(1, 2, vec![e(1, 1, EntryKind::Core), e(1, 1, EntryKind::Core)]).is_err());
        assert!(CompressedCache::from_entries(1, 1, vec![e(0, 0, EntryKind::Core), e(1, 1, EntryKind::Core)]).is_err());
    }

    fn arb_cache() -> impl Strategy<Value = KvCache> {
        (1usize..6, 0usize..60).prop_flat_map(|(d, n)| {
            proptest::collection::vec(
                (
                    proptest::collection::vec(-4i8..=4, d),
                    proptest::collection::vec(-10.0f32..10.0, d),
                    proptest::bool::weighted(0.2),
                ),
                n,
            )
            .prop_map(move |rows| {
                let records = rows
                    .into_iter()
                    .enumerate()
                    .map(|(i, (k, v, f))| {
                        TokenRecord::new(k.into_iter().map(f32::from).collect(), v, i as u32 * 3 + 1, f)
                    })
                    .collect();
                KvCache::new(d, records).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn compression_invariants(
            c in arb_cache(),
            t in prop_oneof![Just(0.0), Just(0.5), Just(0.8), Just(1.0)],
            fixed in proptest::option::of(1usize..9),
        ) {
            let chunking = fixed.map_or(Chunking::Semantic, Chunking::Fixed);
            let out = compress(&c, tau(t), chunking).unwrap();
            prop_assert!(out.len() <= c.len());
            prop_assert_eq!(out.weights().iter().map(|&w| w as usize).sum::<usize>(), c.len());
            prop_assert!(out.positions().windows(2).all(|w| w[0] < w[1]));

            let by_pos = |p: u32| c.records.iter().find(|r| r.position == p).unwrap();
            for e in out.entries() {
                let r = by_pos(e.position);
                if e.weight == 1 {
                    prop_assert_eq!(e.key, r.key.as_slice());
                    prop_assert_eq!(e.value, r.value.as_slice());
                }
                if e.kind == EntryKind::Delimiter {
                    prop_assert!(r.is_delimiter);
                }
            }
            if chunking == Chunking::Semantic {
                let delims = out.kinds().iter().filter(|&&k| k == EntryKind::Delimiter).count();
                prop_assert_eq!(delims, c.records.iter().filter(|r| r.is_delimiter).count());
            } else {
                prop_assert!(out.kinds().iter().all(|&k| k == EntryKind::Core));
            }
        }
    }
}
