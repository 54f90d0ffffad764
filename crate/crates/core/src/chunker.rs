//! Delimiter-aligned chunking.
//!
//! Maximal runs of non-delimiter records become chunks; each delimiter record
//! becomes its own segment and is carried through compression untouched.
//! Empty runs (leading, trailing or between adjacent delimiters) produce no
//! segment.

use std::ops::Range;

use crate::cache::KvCache;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    /// Contiguous run of record indices.
    Chunk(Range<usize>),
    Delimiter(usize),
}

impl Segment {
    pub fn indices(&self) -> Range<usize> {
        match self {
            Self::Chunk(range) => range.clone(),
            Self::Delimiter(i) => *i..*i + 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ChunkedCache<'a> {
    pub source: &'a KvCache,
    pub segments: Vec<Segment>,
}

impl ChunkedCache<'_> {
    /// Chunk segments in order, skipping delimiters.
    pub fn chunks(&self) -> impl Iterator<Item = Range<usize>> + '_ {
        self.segments.iter().filter_map(|s| match s {
            Segment::Chunk(r) => Some(r.clone()),
            Segment::Delimiter(_) => None,
        })
    }

    /// Concatenation of all segment indices in segment order.
    pub fn flatten(&self) -> Vec<usize> {
        self.segments.iter().flat_map(Segment::indices).collect()
    }
}

/// How a cache is split before clustering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Chunking {
    #[default]
    Semantic,
    /// Fixed-size blocks that ignore delimiter flags.
    Fixed(usize),
}

impl Chunking {
    pub fn apply<'a>(&self, cache: &'a KvCache) -> Result<ChunkedCache<'a>> {
        match *self {
            Self::Semantic => chunk(cache),
            Self::Fixed(block) => chunk_fixed(cache, block),
        }
    }
}

impl std::str::FromStr for Chunking {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        if s == "semantic" {
            return Ok(Self::Semantic);
        }
        let block = s
            .strip_prefix("fixed:")
            .ok_or_else(|| format!("expected `semantic` or `fixed:<block>`, got `{s}`"))?;
        let block: usize = block
            .parse()
            .map_err(|e| format!("invalid block size `{block}`: {e}"))?;
        if block == 0 {
            return Err("block size must be at least 1".into());
        }
        Ok(Self::Fixed(block))
    }
}

impl std::fmt::Display for Chunking {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Semantic => write!(f, "semantic"),
            Self::Fixed(block) => write!(f, "fixed:{block}"),
        }
    }
}

/// Splits `cache` into maximal non-delimiter chunks and single delimiters.
pub fn chunk(cache: &KvCache) -> Result<ChunkedCache<'_>> {
    cache.ensure_valid()?;
    let mut segments = Vec::new();
    let mut start = 0;
    for (i, record) in cache.records.iter().enumerate() {
        if record.is_delimiter {
            if start < i {
                segments.push(Segment::Chunk(start..i));
            }
            segments.push(Segment::Delimiter(i));
            start = i + 1;
        }
    }
    if start < cache.len() {
        segments.push(Segment::Chunk(start..cache.len()));
    }
    Ok(ChunkedCache {
        source: cache,
        segments,
    })
}

/// Splits `cache` into consecutive blocks of `block` records.
pub fn chunk_fixed(cache: &KvCache, block: usize) -> Result<ChunkedCache<'_>> {
    if block == 0 {
        return Err(Error::InvalidBlockSize(block));
    }
    cache.ensure_valid()?;
    let n = cache.len();
    let segments = (0..n)
        .step_by(block)
        .map(|start| Segment::Chunk(start..(start + block).min(n)))
        .collect();
    Ok(ChunkedCache {
        source: cache,
        segments,
    })
}
