//! Cache data model shared by every stage.
//!
//! A [`KvCache`] holds the key/value states of one attention head in token
//! order. Its fields are public so that producers can build (and the loader
//! can reject) malformed caches; [`validate_cache`] reports every broken
//! invariant and the compression stages refuse caches that do not pass it.

use std::collections::{BTreeSet, HashSet};
use std::fmt;

use crate::attention::Matrix;
use crate::error::{Error, Result};

/// One cached token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRecord {
    pub key: Vec<f32>,
    pub value: Vec<f32>,
    /// Index in the uncompressed sequence.
    pub position: u32,
    pub is_delimiter: bool,
}

impl TokenRecord {
    pub fn new(key: Vec<f32>, value: Vec<f32>, position: u32, is_delimiter: bool) -> Self {
        Self {
            key,
            value,
            position,
            is_delimiter,
        }
    }
}

/// Ordered key/value states of a single attention head.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    pub dim: usize,
    pub records: Vec<TokenRecord>,
}

impl KvCache {
    /// Builds a cache and checks it with [`validate_cache`].
    pub fn new(dim: usize, records: Vec<TokenRecord>) -> Result<Self> {
        let cache = Self { dim, records };
        cache.ensure_valid()?;
        Ok(cache)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let report = validate_cache(self);
        if report.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidCache(report))
        }
    }

    pub fn delimiter_flags(&self) -> Vec<bool> {
        self.records.iter().map(|r| r.is_delimiter).collect()
    }

    /// Row-major `n x d` matrix of the key vectors.
    pub fn key_matrix(&self) -> Matrix {
        Matrix::from_rows_iter(self.dim, self.records.iter().map(|r| r.key.as_slice()))
    }

    /// Row-major `n x d` matrix of the value vectors.
    pub fn value_matrix(&self) -> Matrix {
        Matrix::from_rows_iter(self.dim, self.records.iter().map(|r| r.value.as_slice()))
    }
}

/// How delimiter identity reaches the engine.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DelimiterSpec {
    /// Trust the per-record `is_delimiter` flag written by the producer.
    FlagDriven,
    /// Derive the flag from a token id per record.
    TokenIdSet(BTreeSet<u32>),
}

impl DelimiterSpec {
    pub fn token_id_set(ids: impl IntoIterator<Item = u32>) -> Result<Self> {
        let ids: BTreeSet<u32> = ids.into_iter().collect();
        if ids.is_empty() {
            return Err(Error::InvalidSpec(
                "delimiter token-id set must not be empty".into(),
            ));
        }
        Ok(Self::TokenIdSet(ids))
    }

    /// Returns `cache` with delimiter flags set according to this spec.
    ///
    /// `token_ids` is only consulted in token-id-set mode, where it must hold
    /// one id per record.
    pub fn apply(&self, mut cache: KvCache, token_ids: &[u32]) -> Result<KvCache> {
        match self {
            Self::FlagDriven => Ok(cache),
            Self::TokenIdSet(ids) => {
                if token_ids.len() != cache.len() {
                    return Err(Error::DimensionMismatch {
                        expected: cache.len(),
                        found: token_ids.len(),
                    });
                }
                for (record, id) in cache.records.iter_mut().zip(token_ids) {
                    record.is_delimiter = ids.contains(id);
                }
                Ok(cache)
            }
        }
    }
}

/// One attention layer's worth of per-head caches.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadCache {
    heads: Vec<KvCache>,
}

impl MultiHeadCache {
    pub fn new(heads: Vec<KvCache>) -> Result<Self> {
        let first = heads
            .first()
            .ok_or_else(|| Error::InvalidMultiHead("at least one head is required".into()))?;
        for (h, head) in heads.iter().enumerate() {
            head.ensure_valid()?;
            if head.dim != first.dim {
                return Err(Error::InvalidMultiHead(format!(
                    "head {h} has dim {}, head 0 has dim {}",
                    head.dim, first.dim
                )));
            }
            if head.len() != first.len() {
                return Err(Error::InvalidMultiHead(format!(
                    "head {h} has {} records, head 0 has {}",
                    head.len(),
                    first.len()
                )));
            }
            if let Some(i) = head
                .records
                .iter()
                .zip(&first.records)
                .position(|(a, b)| a.is_delimiter != b.is_delimiter)
            {
                return Err(Error::InvalidMultiHead(format!(
                    "delimiter flag of record {i} differs between head 0 and head {h}"
                )));
            }
        }
        Ok(Self { heads })
    }

    pub fn heads(&self) -> &[KvCache] {
        &self.heads
    }

    pub fn into_heads(self) -> Vec<KvCache> {
        self.heads
    }

    pub fn dim(&self) -> usize {
        self.heads[0].dim
    }

    /// Uncompressed sequence length shared by all heads.
    pub fn len(&self) -> usize {
        self.heads[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    ZeroDim,
    KeyLength {
        index: usize,
        expected: usize,
        found: usize,
    },
    ValueLength {
        index: usize,
        expected: usize,
        found: usize,
    },
    DuplicatePosition {
        index: usize,
        position: u32,
    },
    PositionOutOfOrder {
        index: usize,
        position: u32,
        previous: u32,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ZeroDim => write!(f, "cache dim must be positive"),
            Self::KeyLength {
                index,
                expected,
                found,
            } => write!(f, "record {index}: key length {found} != dim {expected}"),
            Self::ValueLength {
                index,
                expected,
                found,
            } => write!(f, "record {index}: value length {found} != dim {expected}"),
            Self::DuplicatePosition { index, position } => {
                write!(f, "record {index}: duplicate position {position}")
            }
            Self::PositionOutOfOrder {
                index,
                position,
                previous,
            } => write!(
                f,
                "record {index}: position {position} follows {previous} (not ascending)"
            ),
        }
    }
}

/// Every invariant violation found in a cache, in record order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "no violations");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                write!(f, "; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Checks the [`KvCache`] invariants: positive dim, key and value lengths
/// equal to dim, positions unique and strictly increasing.
pub fn validate_cache(cache: &KvCache) -> ValidationReport {
    let mut violations = Vec::new();
    if cache.dim == 0 {
        violations.push(Violation::ZeroDim);
    }
    let mut seen = HashSet::with_capacity(cache.records.len());
    let mut previous: Option<u32> = None;
    for (index, record) in cache.records.iter().enumerate() {
        if record.key.len() != cache.dim {
            violations.push(Violation::KeyLength {
                index,
                expected: cache.dim,
                found: record.key.len(),
            });
        }
        if record.value.len() != cache.dim {
            violations.push(Violation::ValueLength {
                index,
                expected: cache.dim,
                found: record.value.len(),
            });
        }
        let position = record.position;
        if !seen.insert(position) {
            violations.push(Violation::DuplicatePosition { index, position });
        } else if let Some(prev) = previous.filter(|&p| position < p) {
            violations.push(Violation::PositionOutOfOrder {
                index,
                position,
                previous: prev,
            });
        }
        previous = Some(position);
    }
    ValidationReport { violations }
}
