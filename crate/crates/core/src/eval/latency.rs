//! Repeated-timing harness: every item is timed `repeats` times, all samples pooled.

use std::time::{Duration, Instant};

use serde::Serialize;

use crate::error::{Error, Result};

/// Time since an arbitrary origin.
pub trait Clock {
    fn now(&mut self) -> Duration;
}

#[derive(Debug, Clone, Copy)]
pub struct WallClock {
    origin: Instant,
}

impl Default for WallClock {
    fn default() -> Self {
        Self { origin: Instant::now() }
    }
}

impl Clock for WallClock {
    fn now(&mut self) -> Duration {
        self.origin.elapsed()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LatencyStats {
    pub min: f64,
    pub mean: f64,
    /// Sample standard deviation (`n - 1`); 0 when only one sample exists.
    pub std: f64,
    pub max: f64,
    pub samples: usize,
    /// Set when `samples == 1`, where the std is undefined and reported as 0.
    pub single_sample: bool,
}

impl LatencyStats {
    pub fn from_samples(samples: &[f64]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Input("no latency samples".into()));
        }
        let n = samples.len();
        let min = samples.iter().copied().fold(f64::INFINITY, f64::min);
        let max = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // shift by the minimum so identical samples give mean == min exactly
        let mean = min + samples.iter().map(|s| s - min).sum::<f64>() / n as f64;
        let std = if n > 1 {
            (samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Ok(Self {
            min,
            mean: mean.clamp(min, max),
            std,
            max,
            samples: n,
            single_sample: n == 1,
        })
    }
}

/// Time `op` over every item `repeats` times, after one untimed warm-up call.
pub fn latency_bench<T, C: Clock>(
    items: &[T],
    repeats: usize,
    clock: &mut C,
    mut op: impl FnMut(&T) -> Result<()>,
) -> Result<LatencyStats> {
    if repeats == 0 {
        return Err(Error::Config("repeats must be >= 1".into()));
    }
    let first = items
        .first()
        .ok_or_else(|| Error::Input("latency benchmark needs at least one item".into()))?;
    op(first)?;
    let mut samples = Vec::with_capacity(items.len() * repeats);
    for item in items {
        for _ in 0..repeats {
            let start = clock.now();
            op(item)?;
            samples.push((clock.now() - start).as_secs_f64());
        }
    }
    LatencyStats::from_samples(&samples)
}
