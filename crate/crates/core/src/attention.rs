//! Scaled dot-product attention over full and compressed caches.
//!
//! Proportional attention adds `ln s_j` to each pre-softmax logit, where
//! `s_j` is the number of original tokens merged into entry `j`. Both kernels
//! share one code path; with every weight equal to one the log offsets are
//! exactly zero and the two agree bit for bit.
//!
//! Accumulation is in `f64` with a fixed left-to-right reduction order, so
//! repeated calls are bitwise reproducible.

use crate::error::{Error, Result};
use crate::merger::CompressedCache;

/// Dense row-major `f32` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                found: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::DimensionMismatch {
                expected: cols,
                found: bad.len(),
            });
        }
        Ok(Self::from_rows_iter(cols, rows.iter().map(Vec::as_slice)))
    }

    pub(crate) fn from_rows_iter<'a>(cols: usize, rows: impl Iterator<Item = &'a [f32]>) -> Self {
        let mut data = Vec::new();
        let mut n = 0;
        for row in rows {
            debug_assert_eq!(row.len(), cols);
            data.extend_from_slice(row);
            n += 1;
        }
        Self {
            rows: n,
            cols,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }
}

/// One or more query vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryBatch(Matrix);

impl QueryBatch {
    pub fn new(queries: Matrix) -> Result<Self> {
        if queries.rows() == 0 {
            return Err(Error::InvalidIndexSet("query batch must hold at least one query".into()));
        }
        Ok(Self(queries))
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    pub fn single(query: Vec<f32>) -> Result<Self> {
        let d = query.len();
        Self::new(Matrix::new(1, d, query)?)
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.0.row(i)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    dim: usize,
    rows: Vec<f64>,
    probe: Option<Vec<f64>>,
}

impl AttentionOutput {
    pub fn len(&self) -> usize {
        self.rows.len() / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.rows
    }

    /// Attention distribution of query `i` over the cache entries, when
    /// computed with one of the `*_with_probe` functions.
    pub fn probe_row(&self, i: usize) -> Option<&[f64]> {
        let probe = self.probe.as_ref()?;
        let m = probe.len() / self.len();
        Some(&probe[i * m..(i + 1) * m])
    }
}

fn check_shapes(queries: &QueryBatch, keys: &Matrix, values: &Matrix) -> Result<()> {
    if keys.rows() == 0 {
        return Err(Error::EmptyCache);
    }
    let d = keys.cols();
    for found in [queries.dim(), values.cols()] {
        if found != d {
            return Err(Error::DimensionMismatch { expected: d, found });
        }
    }
    if values.rows() != keys.rows() {
        return Err(Error::DimensionMismatch {
            expected: keys.rows(),
            found: values.rows(),
        });
    }
    Ok(())
}

fn attend(
    queries: &QueryBatch,
    keys: &Matrix,
    values: &Matrix,
    log_weights: Option<&[f64]>,
    with_probe: bool,
) -> AttentionOutput {
    let m = keys.rows();
    let d = keys.cols();
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0f64; queries.len() * d];
    let mut probe = with_probe.then(|| Vec::with_capacity(queries.len() * m));
    let mut scores = vec![0.0f64; m];

    for (qi, out_row) in out.chunks_exact_mut(d).enumerate() {
        let q = queries.row(qi);
        let mut max = f64::NEG_INFINITY;
        for (j, score) in scores.iter_mut().enumerate() {
            let k = keys.row(j);
            let dot: f64 = q.iter().zip(k).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
            let mut logit = dot * scale;
            if let Some(lw) = log_weights {
                logit += lw[j];
            }
            *score = logit;
            max = max.max(logit);
        }
        let mut total = 0.0;
        for score in scores.iter_mut() {
            *score = (*score - max).exp();
            total += *score;
        }
        for (j, &p) in scores.iter().enumerate() {
            for (o, &v) in out_row.iter_mut().zip(values.row(j)) {
                *o += p * f64::from(v);
            }
        }
        let inv = 1.0 / total;
        for o in out_row.iter_mut() {
            *o *= inv;
        }
        if let Some(probe) = probe.as_mut() {
            probe.extend(scores.iter().map(|&p| p * inv));
        }
    }
    AttentionOutput {
        dim: d,
        rows: out,
        probe,
    }
}

/// `softmax(Q Kᵀ / √d) V` for every query row.
pub fn standard_attention(queries: &QueryBatch, keys: &Matrix, values: &Matrix) -> Result<AttentionOutput> {
    check_shapes(queries, keys, values)?;
    Ok(attend(queries, keys, values, None, false))
}

/// [`standard_attention`] that also records the attention distribution.
pub fn standard_attention_with_probe(
    queries: &QueryBatch,
    keys: &Matrix,
    values: &Matrix,
) -> Result<AttentionOutput> {
    check_shapes(queries, keys, values)?;
    Ok(attend(queries, keys, values, None, true))
}

fn log_weights(cache: &CompressedCache) -> Result<Vec<f64>> {
    cache
        .weights()
        .iter()
        .enumerate()
        .map(|(index, &weight)| {
            if weight == 0 {
                Err(Error::InvalidWeight { index, weight })
            } else {
                Ok(f64::from(weight).ln())
            }
        })
        .collect()
}

/// `softmax(Q K_cᵀ / √d + ln s) V_c` over a compressed cache.
pub fn proportional_attention(queries: &QueryBatch, cache: &CompressedCache) -> Result<AttentionOutput> {
    check_shapes(queries, cache.keys(), cache.values())?;
    let lw = log_weights(cache)?;
    Ok(attend(queries, cache.keys(), cache.values(), Some(&lw), false))
}

/// [`proportional_attention`] that also records the attention distribution.
pub fn proportional_attention_with_probe(
    queries: &QueryBatch,
    cache: &CompressedCache,
) -> Result<AttentionOutput> {
    check_shapes(queries, cache.keys(), cache.values())?;
    let lw = log_weights(cache)?;
    Ok(attend(queries, cache.keys(), cache.values(), Some(&lw), true))
}
