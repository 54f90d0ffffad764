//! Seeded synthetic caches with planted key clusters.
//!
//! Keys of non-delimiter tokens are `center[p % cluster_count] + sigma * g`
//! with `g` standard normal and unit-norm centers; values and delimiter
//! states are standard normal. Every `delimiter_period`-th token is a
//! delimiter. Output depends only on the spec.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cache::{KvCache, MultiHeadCache, TokenRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n: usize,
    pub d: usize,
    pub heads: usize,
    pub cluster_count: usize,
    pub noise_sigma: f64,
    pub delimiter_period: usize,
    pub rng_seed: u64,
}

impl SyntheticSpec {
    /// Reference workload for threshold sweeps: 1024 tokens, head dim 128,
    /// two heads, 32 planted clusters, sigma 0.05, a delimiter every 128
    /// tokens.
    pub fn standard(rng_seed: u64) -> Self {
        Self {
            n: 1024,
            d: 128,
            heads: 2,
            cluster_count: 32,
            noise_sigma: 0.05,
            delimiter_period: 128,
            rng_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::InvalidSpec(m.into()));
        if self.n == 0 || self.d == 0 || self.heads == 0 || self.cluster_count == 0 {
            return err("n, d, heads and cluster_count must be at least 1");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return err("noise_sigma must be finite and non-negative");
        }
        if self.delimiter_period < 2 {
            return err("delimiter_period must be at least 2");
        }
        if u32::try_from(self.n).is_err() {
            return err("n must fit in u32");
        }
        Ok(())
    }

    pub fn is_delimiter(&self, position: usize) -> bool {
        (position + 1).is_multiple_of(self.delimiter_period)
    }

    pub fn delimiter_count(&self) -> usize {
        self.n / self.delimiter_period
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn unit_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v = normal_vec(rng, d);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

pub fn generate(spec: &SyntheticSpec) -> Result<MultiHeadCache> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let heads = (0..spec.heads)
        .map(|_| {
            let centers: Vec<Vec<f64>> = (0..spec.cluster_count)
                .map(|_| unit_vec(&mut rng, spec.d))
                .collect();
            let records = (0..spec.n)
                .map(|p| {
                    let delimiter = spec.is_delimiter(p);
                    let key = if delimiter {
                        normal_vec(&mut rng, spec.d)
                    } else {
                        let center = &centers[p % spec.cluster_count];
                        normal_vec(&mut rng, spec.d)
                            .into_iter()
                            .zip(center)
                            .map(|(g, c)| c + spec.noise_sigma * g)
                            .collect()
                    };
                    let value = normal_vec(&mut rng, spec.d);
                    TokenRecord::new(to_f32(&key), to_f32(&value), p as u32, delimiter)
                })
                .collect();
            KvCache::new(spec.d, records)
        })
        .collect::<Result<Vec<_>>>()?;
    MultiHeadCache::new(heads)
}

/// `count` standard-normal query vectors of length `d`.
pub fn random_queries(d: usize, count: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| to_f32(&normal_vec(&mut rng, d))).collect()
}
