//! Interchange formats.
//!
//! Binary layout, all integers and floats little-endian:
//!
//! ```text
//! header   "SCKV" | version u16 = 1 | flags u16 | head_count u32 | n u32 | d u32
//!          [compressed only] original_len u32
//! cache    per head: keys n*d f32 | values n*d f32 | positions n u32 | delimiter n u8
//! compr.   per head: entry_count u32 | keys m*d f32 | values m*d f32
//!                    | positions m u32 | weights m u32 | kinds m u8 (0 core, 1 delimiter)
//! trailer  CRC-32 (IEEE) of every preceding byte
//! ```
//!
//! Flags bit 0 marks a compressed dump; every other bit is reserved and must
//! be zero. In a compressed dump `n` repeats `original_len`.
//!
//! The loaders accept exactly what the savers emit, so `save(load(bytes))`
//! reproduces `bytes`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{KvCache, MultiHeadCache, TokenRecord};
use crate::merger::{CompressedCache, EntryKind};

pub const MAGIC: [u8; 4] = *b"SCKV";
pub const VERSION: u16 = 1;
pub const FLAG_COMPRESSED: u16 = 1;

const HEADER_LEN: usize = 4 + 2 + 2 + 4 + 4 + 4;
const CRC_LEN: usize = 4;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:02x?}, expected \"SCKV\"")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}, expected {VERSION}")]
    VersionMismatch(u16),
    #[error("unsupported flags {found:#06x} (expected {expected:#06x})")]
    UnsupportedFlags { found: u16, expected: u16 },
    #[error("CRC mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("truncated file: need {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{found} bytes present, header describes {expected}")]
    TrailingBytes { expected: usize, found: usize },
    #[error("invariant violation: {0}")]
    Invariant(String),
    #[error("json error")]
    Json(#[from] serde_json::Error),
}

impl FormatError {
    /// Stable numeric code, used as the CLI exit status.
    pub fn code(&self) -> i32 {
        match self {
            Self::Io(_) => 3,
            Self::BadMagic(_) => 4,
            Self::VersionMismatch(_) => 5,
            Self::UnsupportedFlags { .. } => 6,
            Self::CrcMismatch { .. } => 7,
            Self::Truncated { .. } | Self::TrailingBytes { .. } => 8,
            Self::Invariant(_) => 9,
            Self::Json(_) => 10,
        }
    }
}

pub type Result<T> = std::result::Result<T, FormatError>;

fn invariant(msg: impl Into<String>) -> FormatError {
    FormatError::Invariant(msg.into())
}

fn to_u32(x: usize, what: &str) -> Result<u32> {
    u32::try_from(x).map_err(|_| invariant(format!("{what} {x} does not fit in u32")))
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn header(flags: u16, heads: usize, n: usize, d: usize) -> Result<Self> {
        let mut w = Self { buf: Vec::new() };
        w.buf.extend_from_slice(&MAGIC);
        w.buf.extend_from_slice(&VERSION.to_le_bytes());
        w.buf.extend_from_slice(&flags.to_le_bytes());
        w.u32(to_u32(heads, "head count")?);
        w.u32(to_u32(n, "record count")?);
        w.u32(to_u32(d, "dim")?);
        Ok(w)
    }

    fn u32(&mut self, x: u32) {
        self.buf.extend_from_slice(&x.to_le_bytes());
    }

    fn f32s<'a>(&mut self, xs: impl IntoIterator<Item = &'a f32>) {
        for x in xs {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> &'a [u8] {
        // Sizes are validated against the header before any body read.
        let s = &self.bytes[self.at..self.at + len];
        self.at += len;
        s
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take(4).try_into().unwrap())
    }

    fn u32s(&mut self, count: usize) -> Vec<u32> {
        self.take(count * 4)
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    }

    fn f32s(&mut self, count: usize) -> Vec<f32> {
        self.take(count * 4)
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    }
}

struct Header {
    flags: u16,
    heads: usize,
    n: usize,
    d: usize,
}

fn read_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < HEADER_LEN + CRC_LEN {
        return Err(FormatError::Truncated {
            expected: HEADER_LEN + CRC_LEN,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(FormatError::BadMagic(magic));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(FormatError::VersionMismatch(version));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    Ok(Header {
        flags: u16::from_le_bytes([bytes[6], bytes[7]]),
        heads: word(8),
        n: word(12),
        d: word(16),
    })
}

fn check_length(bytes: &[u8], expected: Option<usize>) -> Result<()> {
    let expected = expected.ok_or_else(|| invariant("header sizes overflow"))?;
    match bytes.len() {
        found if found < expected => Err(FormatError::Truncated { expected, found }),
        found if found > expected => Err(FormatError::TrailingBytes { expected, found }),
        _ => Ok(()),
    }
}

fn check_crc(bytes: &[u8]) -> Result<()> {
    let (body, tail) = bytes.split_at(bytes.len() - CRC_LEN);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(FormatError::CrcMismatch { stored, computed });
    }
    Ok(())
}

fn check_flags(found: u16, expected: u16) -> Result<()> {
    if found != expected {
        return Err(FormatError::UnsupportedFlags { found, expected });
    }
    Ok(())
}

pub fn encode_cache(mh: &MultiHeadCache) -> Result<Vec<u8>> {
    let mut w = Writer::header(0, mh.heads().len(), mh.len(), mh.dim())?;
    for head in mh.heads() {
        w.f32s(head.records.iter().flat_map(|r| &r.key));
        w.f32s(head.records.iter().flat_map(|r| &r.value));
        for r in &head.records {
            w.u32(r.position);
        }
        w.buf.extend(head.records.iter().map(|r| u8::from(r.is_delimiter)));
    }
    Ok(w.finish())
}

pub fn decode_cache(bytes: &[u8]) -> Result<MultiHeadCache> {
    let h = read_header(bytes)?;
    let head_len = h
        .n
        .checked_mul(h.d)
        .and_then(|nd| nd.checked_mul(8))
        .and_then(|kv| kv.checked_add(h.n * 5));
    check_length(
        bytes,
        head_len
            .and_then(|l| l.checked_mul(h.heads))
            .and_then(|l| l.checked_add(HEADER_LEN + CRC_LEN)),
    )?;
    check_crc(bytes)?;
    check_flags(h.flags, 0)?;

    let mut r = Reader {
        bytes,
        at: HEADER_LEN,
    };
    let mut heads = Vec::with_capacity(h.heads);
    for head in 0..h.heads {
        let keys = r.f32s(h.n * h.d);
        let values = r.f32s(h.n * h.d);
        let positions = r.u32s(h.n);
        let flags = r.take(h.n);
        if let Some(i) = flags.iter().position(|&f| f > 1) {
            return Err(invariant(format!(
                "head {head}: delimiter flag of record {i} is {}",
                flags[i]
            )));
        }
        let records = (0..h.n)
            .map(|i| {
                TokenRecord::new(
                    keys[i * h.d..(i + 1) * h.d].to_vec(),
                    values[i * h.d..(i + 1) * h.d].to_vec(),
                    positions[i],
                    flags[i] == 1,
                )
            })
            .collect();
        let cache = KvCache::new(h.d, records).map_err(|e| invariant(format!("head {head}: {e}")))?;
        heads.push(cache);
    }
    MultiHeadCache::new(heads).map_err(|e| invariant(e.to_string()))
}

pub fn encode_compressed(heads: &[CompressedCache]) -> Result<Vec<u8>> {
    let first = heads
        .first()
        .ok_or_else(|| invariant("at least one head is required"))?;
    let (d, original_len) = (first.dim(), first.original_len());
    if let Some(bad) = heads
        .iter()
        .find(|c| c.dim() != d || c.original_len() != original_len)
    {
        return Err(invariant(format!(
            "heads disagree on dim/original length: {}/{} vs {d}/{original_len}",
            bad.dim(),
            bad.original_len()
        )));
    }
    let mut w = Writer::header(FLAG_COMPRESSED, heads.len(), original_len, d)?;
    w.u32(to_u32(original_len, "original length")?);
    for c in heads {
        w.u32(to_u32(c.len(), "entry count")?);
        w.f32s(c.keys().as_slice());
        w.f32s(c.values().as_slice());
        for &p in c.positions() {
            w.u32(p);
        }
        for &s in c.weights() {
            w.u32(s);
        }
        w.buf.extend(c.kinds().iter().map(|k| match k {
            EntryKind::Core => 0u8,
            EntryKind::Delimiter => 1u8,
        }));
    }
    Ok(w.finish())
}

pub fn decode_compressed(bytes: &[u8]) -> Result<Vec<CompressedCache>> {
    let h = read_header(bytes)?;
    if bytes.len() < HEADER_LEN + 4 + CRC_LEN {
        return Err(FormatError::Truncated {
            expected: HEADER_LEN + 4 + CRC_LEN,
            found: bytes.len(),
        });
    }
    // Entry counts live in the body, so the checksum has to vouch for them
    // before they are used to size anything. A truncated compressed dump
    // therefore surfaces as a CRC mismatch.
    check_crc(bytes)?;
    let mut at = HEADER_LEN + 4;
    for _ in 0..h.heads {
        if bytes.len() < at + 4 + CRC_LEN {
            return Err(FormatError::Truncated {
                expected: at + 4 + CRC_LEN,
                found: bytes.len(),
            });
        }
        let m = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        let head_len = m
            .checked_mul(h.d)
            .and_then(|md| md.checked_mul(8))
            .and_then(|kv| kv.checked_add(m * 9 + 4));
        at = head_len
            .and_then(|l| l.checked_add(at))
            .ok_or_else(|| invariant("entry sizes overflow"))?;
    }
    check_length(bytes, at.checked_add(CRC_LEN))?;
    check_flags(h.flags, FLAG_COMPRESSED)?;

    let mut r = Reader {
        bytes,
        at: HEADER_LEN,
    };
    let original_len = r.u32() as usize;
    if original_len != h.n {
        return Err(invariant(format!(
            "header n {} differs from original length {original_len}",
            h.n
        )));
    }
    if h.heads == 0 {
        return Err(invariant("at least one head is required"));
    }
    let mut heads = Vec::with_capacity(h.heads);
    for head in 0..h.heads {
        let m = r.u32() as usize;
        let keys = r.f32s(m * h.d);
        let values = r.f32s(m * h.d);
        let positions = r.u32s(m);
        let weights = r.u32s(m);
        let kinds = r
            .take(m)
            .iter()
            .enumerate()
            .map(|(i, &k)| match k {
                0 => Ok(EntryKind::Core),
                1 => Ok(EntryKind::Delimiter),
                other => Err(invariant(format!("head {head}: entry {i} has kind {other}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let cache = CompressedCache::from_columns(h.d, original_len, keys, values, weights, positions, kinds)
            .map_err(|e| invariant(format!("head {head}: {e}")))?;
        heads.push(cache);
    }
    Ok(heads)
}

/// Human-readable mirror of the binary cache dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsonCache {
    pub version: u16,
    pub dim: usize,
    pub heads: Vec<JsonHead>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JsonHead {
    pub keys: Vec<Vec<f32>>,
    pub values: Vec<Vec<f32>>,
    pub positions: Vec<u32>,
    pub delimiters: Vec<bool>,
}

impl JsonCache {
    pub fn from_cache(mh: &MultiHeadCache) -> Result<Self> {
        let all_finite = mh
            .heads()
            .iter()
            .flat_map(|h| &h.records)
            .all(|r| r.key.iter().chain(&r.value).all(|x| x.is_finite()));
        if !all_finite {
            return Err(invariant("JSON caches cannot hold non-finite values"));
        }
        Ok(Self {
            version: VERSION,
            dim: mh.dim(),
            heads: mh
                .heads()
                .iter()
                .map(|h| JsonHead {
                    keys: h.records.iter().map(|r| r.key.clone()).collect(),
                    values: h.records.iter().map(|r| r.value.clone()).collect(),
                    positions: h.records.iter().map(|r| r.position).collect(),
                    delimiters: h.records.iter().map(|r| r.is_delimiter).collect(),
                })
                .collect(),
        })
    }

    pub fn into_cache(self) -> Result<MultiHeadCache> {
        if self.version != VERSION {
            return Err(FormatError::VersionMismatch(self.version));
        }
        let dim = self.dim;
        let heads = self
            .heads
            .into_iter()
            .enumerate()
            .map(|(h, head)| {
                let n = head.keys.len();
                if head.values.len() != n || head.positions.len() != n || head.delimiters.len() != n {
                    return Err(invariant(format!("head {h}: column lengths disagree")));
                }
                let records = head
                    .keys
                    .into_iter()
                    .zip(head.values)
                    .zip(head.positions)
                    .zip(head.delimiters)
                    .map(|(((k, v), p), f)| TokenRecord::new(k, v, p, f))
                    .collect();
                KvCache::new(dim, records).map_err(|e| invariant(format!("head {h}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        MultiHeadCache::new(heads).map_err(|e| invariant(e.to_string()))
    }
}

pub fn encode_json(mh: &MultiHeadCache) -> Result<String> {
    Ok(serde_json::to_string_pretty(&JsonCache::from_cache(mh)?)?)
}

pub fn decode_json(text: &str) -> Result<MultiHeadCache> {
    serde_json::from_str::<JsonCache>(text)?.into_cache()
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

/// Loads a cache dump; `.json` files use the JSON mirror, anything else the
/// binary format.
pub fn load_cache(path: impl AsRef<Path>) -> Result<MultiHeadCache> {
    let path = path.as_ref();
    if is_json(path) {
        decode_json(&fs::read_to_string(path)?)
    } else {
        decode_cache(&fs::read(path)?)
    }
}

pub fn save_cache(mh: &MultiHeadCache, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if is_json(path) {
        fs::write(path, encode_json(mh)?)?;
    } else {
        fs::write(path, encode_cache(mh)?)?;
    }
    Ok(())
}

pub fn load_compressed(path: impl AsRef<Path>) -> Result<Vec<CompressedCache>> {
    decode_compressed(&fs::read(path)?)
}

pub fn save_compressed(heads: &[CompressedCache], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_compressed(heads)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chunker::Chunking;
    use crate::gsc::Threshold;
    use crate::merger::compress_multi_head;
    use proptest::prelude::*;

    fn small_cache() -> MultiHeadCache {
        let records = (0..3)
            .map(|i| {
                TokenRecord::new(
                    vec![i as f32, 0.5, -1.25, 1e-3],
                    vec![2.0, -(i as f32), 0.1, 7.5],
                    i * 2,
                    i == 1,
                )
            })
            .collect();
        MultiHeadCache::new(vec![KvCache::new(4, records).unwrap()]).unwrap()
    }

    #[test]
    fn binary_round_trip() {
        let mh = small_cache();
        let bytes = encode_cache(&mh).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 3 * 4 * 8 + 3 * 5 + CRC_LEN);
        assert_eq!(decode_cache(&bytes).unwrap(), mh);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.sckv");
        save_cache(&mh, &path).unwrap();
        assert_eq!(load_cache(&path).unwrap(), mh);
    }

    #[test]
    fn corrupted_payload_fails_crc() {
        let mut bytes = encode_cache(&small_cache()).unwrap();
        bytes[HEADER_LEN + 5] ^= 0x40;
        assert!(matches!(decode_cache(&bytes), Err(FormatError::CrcMismatch { .. })));
    }

    #[test]
    fn header_errors_are_distinct() {
        let good = encode_cache(&small_cache()).unwrap();

        let mut b = good.clone();
        b[0] = b'X';
        assert!(matches!(decode_cache(&b), Err(FormatError::BadMagic(_))));

        let mut b = good.clone();
        b[4] = 2;
        assert!(matches!(decode_cache(&b), Err(FormatError::VersionMismatch(2))));

        let b = &good[..good.len() - 1];
        assert!(matches!(decode_cache(b), Err(FormatError::Truncated { .. })));

        let mut b = good.clone();
        b.push(0);
        assert!(matches!(decode_cache(&b), Err(FormatError::TrailingBytes { .. })));

        // A compressed dump is not a cache dump.
        let mut b = good.clone();
        b[6] = 1;
        let crc = crc32fast::hash(&b[..b.len() - 4]);
        let at = b.len() - 4;
        b[at..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(decode_cache(&b), Err(FormatError::UnsupportedFlags { .. })));

        assert!(matches!(decode_cache(b"SC"), Err(FormatError::Truncated { .. })));
    }

    #[test]
    fn bad_flag_byte_is_an_invariant_violation() {
        let mut b = encode_cache(&small_cache()).unwrap();
        let at = b.len() - CRC_LEN - 1;
        b[at] = 2;
        let crc = crc32fast::hash(&b[..b.len() - 4]);
        let at = b.len() - 4;
        b[at..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(decode_cache(&b), Err(FormatError::Invariant(_))));
    }

    #[test]
    fn compressed_round_trip_and_weight_check() {
        let mh = small_cache();
        let compressed = compress_multi_head(&mh, Threshold::new(0.0).unwrap(), Chunking::Semantic).unwrap();
        let bytes = encode_compressed(&compressed).unwrap();
        let back = decode_compressed(&bytes).unwrap();
        assert_eq!(back, compressed);
        assert_eq!(encode_compressed(&back).unwrap(), bytes);

        // Bump one weight and re-seal: the loader must refuse it.
        let weights_at = HEADER_LEN + 4 + 4 + 2 * compressed[0].len() * 4 * 4 + compressed[0].len() * 4;
        let mut b = bytes.clone();
        b[weights_at] += 1;
        let crc = crc32fast::hash(&b[..b.len() - 4]);
        let at = b.len() - 4;
        b[at..].copy_from_slice(&crc.to_le_bytes());
        let err = decode_compressed(&b).unwrap_err();
        assert!(matches!(err, FormatError::Invariant(ref m) if m.contains("weights sum")), "{err}");
    }

    #[test]
    fn json_round_trip() {
        let mh = small_cache();
        let text = encode_json(&mh).unwrap();
        let back = decode_json(&text).unwrap();
        assert_eq!(back, mh);
        assert_eq!(encode_cache(&back).unwrap(), encode_cache(&mh).unwrap());

        let mut bad = mh.clone().into_heads();
        bad[0].records[0].key[0] = f32::NAN;
        let bad = MultiHeadCache::new(bad).unwrap();
        assert!(encode_json(&bad).is_err());
    }

    proptest! {
        #[test]
        fn json_floats_round_trip(xs in proptest::collection::vec(any::<f32>().prop_filter("finite", |x| x.is_finite()), 1..16)) {
            let d = xs.len();
            let records = vec![TokenRecord::new(xs.clone(), xs.iter().rev().copied().collect(), 0, false)];
            let mh = MultiHeadCache::new(vec![KvCache::new(d, records).unwrap()]).unwrap();
            let back = decode_json(&encode_json(&mh).unwrap()).unwrap();
            prop_assert_eq!(encode_cache(&back).unwrap(), encode_cache(&mh).unwrap());
        }
    }
}
