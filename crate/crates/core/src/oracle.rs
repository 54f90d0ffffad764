//! Slow reference implementations used by the test suites.
//!
//! Nothing here calls into the `gsc`, `merger` or `attention` modules; each
//! function is a direct, loop-by-loop rewrite of the defining formula so that
//! agreement with the fast path is meaningful. Keep it that way.

use crate::error::{Error, Result};

/// Neumaier-compensated sum.
fn compensated_sum(terms: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut carry = 0.0f64;
    for t in terms {
        let s = sum + t;
        if sum.abs() >= t.abs() {
            carry += (sum - s) + t;
        } else {
            carry += (t - s) + sum;
        }
        sum = s;
    }
    sum + carry
}

/// Greedy seed-based clustering over `keys`, returning member index lists
/// (indices into `keys`) ordered by seed.
pub fn ref_gsc(keys: &[Vec<f32>], tau: f64) -> Vec<Vec<usize>> {
    let sim = |a: &[f32], b: &[f32]| -> Option<f64> {
        let mut ab = 0.0f64;
        let mut aa = 0.0f64;
        let mut bb = 0.0f64;
        for (&x, &y) in a.iter().zip(b) {
            ab += x as f64 * y as f64;
        }
        for &x in a {
            aa += x as f64 * x as f64;
        }
        for &x in b {
            bb += x as f64 * x as f64;
        }
        let denom = aa.sqrt() * bb.sqrt();
        if aa == 0.0 || bb == 0.0 {
            return None;
        }
        let s = ab / denom;
        Some(s.clamp(-1.0, 1.0))
    };

    let l = keys.len();
    let mut assigned = vec![false; l];
    let mut partition = Vec::new();
    for i in 0..l {
        if assigned[i] {
            continue;
        }
        let mut cluster = vec![i];
        assigned[i] = true;
        let seed = &keys[i];
        for j in i + 1..l {
            if !assigned[j] {
                if let Some(s) = sim(seed, &keys[j]) {
                    if s > tau {
                        cluster.push(j);
                        assigned[j] = true;
                    }
                }
            }
        }
        partition.push(cluster);
    }
    partition
}

/// `softmax(Q Kᵀ/√d + ln s) V`, one output row per query, with compensated
/// `f64` accumulation.
pub fn ref_attention(
    queries: &[Vec<f32>],
    keys: &[Vec<f32>],
    values: &[Vec<f32>],
    weights: &[u32],
) -> Result<Vec<Vec<f64>>> {
    let m = keys.len();
    if m == 0 {
        return Err(Error::EmptyCache);
    }
    if values.len() != m || weights.len() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            found: values.len().min(weights.len()),
        });
    }
    let d = keys[0].len();
    if let Some(bad) = queries
        .iter()
        .chain(keys)
        .chain(values)
        .find(|r| r.len() != d)
    {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: bad.len(),
        });
    }
    if let Some(index) = weights.iter().position(|&w| w == 0) {
        return Err(Error::InvalidWeight { index, weight: 0 });
    }

    let mut out = Vec::with_capacity(queries.len());
    for q in queries {
        let mut logits = vec![0.0f64; m];
        for j in 0..m {
            let dot = compensated_sum((0..d).map(|c| q[c] as f64 * keys[j][c] as f64));
            logits[j] = dot / (d as f64).sqrt() + (weights[j] as f64).ln();
        }
        let mut max = logits[0];
        for &x in &logits[1..] {
            if x > max {
                max = x;
            }
        }
        let e: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
        let z = compensated_sum(e.iter().copied());
        let mut row = vec![0.0f64; d];
        for (c, slot) in row.iter_mut().enumerate() {
            *slot = compensated_sum((0..m).map(|j| e[j] * values[j][c] as f64)) / z;
        }
        out.push(row);
    }
    Ok(out)
}

/// `(Σ s_j e^{logit_j} V_j) / (Σ s_j e^{logit_j})`, multiplying scores by the
/// weights after exponentiation instead of offsetting the logits.
pub fn weighted_softmax_oracle(logits: &[f64], weights: &[u32], values: &[Vec<f32>]) -> Result<Vec<f64>> {
    let m = logits.len();
    if weights.len() != m || values.len() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            found: if weights.len() != m { weights.len() } else { values.len() },
        });
    }
    if m == 0 {
        return Err(Error::EmptyCache);
    }
    let d = values[0].len();
    let scores: Vec<f64> = (0..m).map(|j| weights[j] as f64 * logits[j].exp()).collect();
    let z = compensated_sum(scores.iter().copied());
    Ok((0..d)
        .map(|c| compensated_sum((0..m).map(|j| scores[j] * values[j][c] as f64)) / z)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ref_gsc_basics() {
        assert_eq!(ref_gsc(&vec![vec![0.5, 0.5]; 4], 0.9), vec![vec![0, 1, 2, 3]]);
        let ortho = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]];
        assert_eq!(ref_gsc(&ortho, 0.5), vec![vec![0], vec![1], vec![2]]);
        let ex = vec![vec![1.0, 0.0], vec![0.995, 0.0999], vec![0.0, 1.0]];
        assert_eq!(ref_gsc(&ex, 0.9), vec![vec![0, 1], vec![2]]);
        assert!(ref_gsc(&[], 0.5).is_empty());
    }

    #[test]
    fn ref_attention_basics() {
        let v = vec![vec![2.0, -1.0]];
        let out = ref_attention(&[vec![4.0, 4.0]], &[vec![1.0, 1.0]], &v, &[9]).unwrap();
        assert_eq!(out[0], vec![2.0, -1.0]);

        let i2 = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let out = ref_attention(&[vec![1.0, 0.0]], &i2, &i2, &[1, 1]).unwrap();
        assert!((out[0][0] - 0.669_761_549_326_656_9).abs() < 1e-15);
        let out = ref_attention(&[vec![1.0, 0.0]], &i2, &i2, &[2, 1]).unwrap();
        assert!((out[0][0] - 0.802_224_185_359_571_8).abs() < 1e-15);
        assert!(ref_attention(&[vec![1.0]], &i2, &i2, &[1, 1]).is_err());
        assert!(ref_attention(&[vec![1.0, 0.0]], &i2, &i2, &[1, 0]).is_err());
    }

    #[test]
    fn weighted_softmax_examples() {
        let i2 = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let l = std::f64::consts::FRAC_1_SQRT_2;
        let out = weighted_softmax_oracle(&[l, 0.0], &[2, 1], &i2).unwrap();
        assert!((out[0] - 0.802_224_185_359_571_8).abs() < 1e-15);
        assert!((out[1] - 0.197_775_814_640_428_2).abs() < 1e-15);

        let out = weighted_softmax_oracle(&[l, 0.0], &[1, 1], &i2).unwrap();
        assert!((out[0] - 0.669_761_549_326_656_9).abs() < 1e-15);

        let out = weighted_softmax_oracle(&[-3.0], &[5], &[vec![7.0, 8.0]]).unwrap();
        assert_eq!(out, vec![7.0, 8.0]);
        assert!(weighted_softmax_oracle(&[0.0], &[1, 1], &i2).is_err());
    }
}
