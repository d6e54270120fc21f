//! Reproducible random streams and Monte Carlo reductions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// `(seed, index)` pair naming an independent ChaCha stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub seed: u64,
    pub index: u64,
}

impl RngStream {
    pub fn new(seed: u64, index: u64) -> Self {
        RngStream { seed, index }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.index);
        rng
    }
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl Estimate {
    /// `|mean - target| <= k * se`.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.se
    }
}

/// Neumaier-compensated sum.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0_f64;
    let mut comp = 0.0_f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Mean and standard error; shifting by the first sample keeps constant
/// samples exact (mean equal to the sample, SE exactly zero).
pub fn summarize(samples: &[f64]) -> Estimate {
    let n = samples.len();
    if n == 0 {
        return Estimate { mean: f64::NAN, se: f64::NAN, n };
    }
    let shift = samples[0];
    let dmean = compensated_sum(samples.iter().map(|s| s - shift)) / n as f64;
    let mean = shift + dmean;
    let se = if n > 1 {
        let ss = compensated_sum(samples.iter().map(|s| {
            let d = s - shift - dmean;
            d * d
        }));
        (ss / (n as f64 - 1.0) / n as f64).sqrt()
    } else {
        0.0
    };
    Estimate { mean, se, n }
}

/// Evaluates `per_path` on streams `(seed, 0..n_paths)` in parallel and
/// returns the samples in stream order.
pub fn collect_paths<T, F>(n_paths: usize, seed: u64, per_path: F) -> Vec<T>
where
    T: Send,
    F: Fn(RngStream) -> T + Sync + Send,
{
    (0..n_paths as u64)
        .into_par_iter()
        .map(|i| per_path(RngStream::new(seed, i)))
        .collect()
}

/// `3 * sqrt(se_a^2 + se_b^2)` style combined error for independent estimates.
pub fn combined_se(a: &Estimate, b: &Estimate) -> f64 {
    a.se.hypot(b.se)
}
