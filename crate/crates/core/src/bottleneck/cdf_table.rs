//! Integer cumulative-frequency tables frozen from the learned density.
//!
//! Every channel gets a contiguous symbol range around its median and a
//! 16-bit frequency table in which every symbol has nonzero mass and the
//! total is exactly `1 << 16`.

use crate::bottleneck::entropy_model::{ChannelCdf, FactorizedEntropyModel, TAIL_MASS};
use crate::bottleneck::quantize::{round_half_away, QuantizedLatent};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::LatentTensor;

pub const PRECISION_BITS: u32 = 16;
pub const TOTAL_FREQUENCY: u32 = 1 << PRECISION_BITS;
/// Widest symbol range a channel may occupy.
pub const MAX_SYMBOLS: usize = 1 << 14;
const SEARCH_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelTable {
    /// Quantization offset (the channel median); symbol `s` stands for `s + offset`.
    pub offset: f64,
    pub min_symbol: i32,
    /// `cum[i]` = sum of frequencies of symbols `min_symbol .. min_symbol + i`;
    /// `cum[0] = 0`, last entry = [`TOTAL_FREQUENCY`].
    pub cum: Vec<u32>,
}

impl ChannelTable {
    pub fn from_frequencies(offset: f64, min_symbol: i32, freqs: &[u32]) -> Result<Self> {
        if freqs.is_empty() || freqs.contains(&0) {
            return Err(Error::Freeze("every symbol needs a nonzero frequency".into()));
        }
        let mut cum = Vec::with_capacity(freqs.len() + 1);
        cum.push(0u32);
        let mut total = 0u64;
        for &f in freqs {
            total += f as u64;
            if total > TOTAL_FREQUENCY as u64 {
                return Err(Error::Freeze("frequencies exceed 2^16".into()));
            }
            cum.push(total as u32);
        }
        if total != TOTAL_FREQUENCY as u64 {
            return Err(Error::Freeze(format!("frequencies sum to {total}, expected 65536")));
        }
        Ok(Self {
            offset,
            min_symbol,
            cum,
        })
    }

    pub fn num_symbols(&self) -> usize {
        self.cum.len() - 1
    }

    pub fn max_symbol(&self) -> i32 {
        self.min_symbol + self.num_symbols() as i32 - 1
    }

    pub fn contains(&self, symbol: i32) -> bool {
        symbol >= self.min_symbol && symbol <= self.max_symbol()
    }

    /// `(cumulative, frequency)` of a symbol, if representable.
    pub fn interval(&self, symbol: i32) -> Option<(u32, u32)> {
        if !self.contains(symbol) {
            return None;
        }
        let i = (symbol - self.min_symbol) as usize;
        Some((self.cum[i], self.cum[i + 1] - self.cum[i]))
    }

    pub fn frequencies(&self) -> Vec<u32> {
        self.cum.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn probability(&self, symbol: i32) -> Option<f64> {
        self.interval(symbol)
            .map(|(_, f)| f as f64 / TOTAL_FREQUENCY as f64)
    }
}

/// Deployment form of the entropy model: one [`ChannelTable`] per latent channel.
#[derive(Debug, Clone, PartialEq)]
pub struct CdfTable {
    pub channels: Vec<ChannelTable>,
}

impl CdfTable {
    pub fn offsets(&self) -> Vec<f64> {
        self.channels.iter().map(|c| c.offset).collect()
    }

    /// Ideal code length `sum -log2(freq / 2^16)` of a symbol tensor.
    pub fn ideal_bits(&self, q: &QuantizedLatent) -> Result<f64> {
        let mut bits = 0.0;
        for (i, &s) in q.symbols.iter().enumerate() {
            let ch = q.channel_of(i);
            let table = self
                .channels
                .get(ch)
                .ok_or_else(|| Error::Config(format!("no table for channel {ch}")))?;
            let p = table
                .probability(s)
                .ok_or_else(|| Error::Encode(format!("symbol {s} outside channel {ch} range")))?;
            bits -= p.log2();
        }
        Ok(bits)
    }

    /// Serialize as `(offsets, min symbols, lengths, concatenated frequencies)`.
    pub fn to_arrays(&self) -> (Vec<f64>, Vec<i32>, Vec<u32>, Vec<u32>) {
        let offsets = self.offsets();
        let mins = self.channels.iter().map(|c| c.min_symbol).collect();
        let lengths = self.channels.iter().map(|c| c.num_symbols() as u32).collect();
        let freqs = self.channels.iter().flat_map(|c| c.frequencies()).collect();
        (offsets, mins, lengths, freqs)
    }

    pub fn from_arrays(offsets: &[f64], mins: &[i32], lengths: &[u32], freqs: &[u32]) -> Result<Self> {
        if offsets.len() != mins.len() || mins.len() != lengths.len() {
            return Err(Error::Format("cdf table arrays disagree on channel count".into()));
        }
        let total: usize = lengths.iter().map(|&l| l as usize).sum();
        if total != freqs.len() {
            return Err(Error::Format("cdf table frequency array has wrong length".into()));
        }
        let mut start = 0;
        let mut channels = Vec::with_capacity(offsets.len());
        for ((&offset, &min), &len) in offsets.iter().zip(mins).zip(lengths) {
            let end = start + len as usize;
            channels.push(
                ChannelTable::from_frequencies(offset, min, &freqs[start..end])
                    .map_err(|e| Error::Format(format!("invalid cdf table: {e}")))?,
            );
            start = end;
        }
        Ok(Self { channels })
    }
}

/// Per-channel observed extent of latents, used to widen table ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl LatentStats {
    pub fn new(channels: usize) -> Self {
        Self {
            min: vec![f64::INFINITY; channels],
            max: vec![f64::NEG_INFINITY; channels],
        }
    }

    pub fn observe<S: Scalar>(&mut self, latent: &LatentTensor<S>) {
        for ch in 0..latent.channels().min(self.min.len()) {
            for &v in latent.channel(ch) {
                let v = v.as_f64();
                if v.is_finite() {
                    self.min[ch] = self.min[ch].min(v);
                    self.max[ch] = self.max[ch].max(v);
                }
            }
        }
    }
}

/// Find `v` with `logits(v) = target` by bracketing and bisection.
fn solve_logit(model: &FactorizedEntropyModel<f64>, channel: usize, target: f64) -> Option<f64> {
    let f = |v: f64| model.logits(channel, v) - target;
    let (mut lo, mut hi) = (-1.0, 1.0);
    while f(lo) > 0.0 {
        lo *= 2.0;
        if lo < -SEARCH_LIMIT {
            return None;
        }
    }
    while f(hi) < 0.0 {
        hi *= 2.0;
        if hi > SEARCH_LIMIT {
            return None;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

/// Spread `probs` over `2^16` with every entry at least 1.
///
/// Each symbol gets one count plus its share of the remaining budget;
/// leftover counts go to the largest fractional remainders (lowest index
/// first on ties), so the result is deterministic.
pub fn quantize_frequencies(probs: &[f64]) -> Result<Vec<u32>> {
    let n = probs.len();
    if n == 0 || n > TOTAL_FREQUENCY as usize {
        return Err(Error::Freeze(format!("cannot quantize {n} symbols to 16 bits")));
    }
    let total: f64 = probs.iter().map(|p| p.max(0.0)).sum();
    if !total.is_finite() || total <= 0.0 {
        return Err(Error::Freeze("probabilities carry no mass".into()));
    }
    let budget = (TOTAL_FREQUENCY as usize - n) as f64;
    let shares: Vec<f64> = probs.iter().map(|p| p.max(0.0) / total * budget).collect();
    let mut freqs: Vec<u32> = shares.iter().map(|s| 1 + s.floor() as u32).collect();
    let assigned: u64 = freqs.iter().map(|&f| f as u64).sum();
    let mut leftover = TOTAL_FREQUENCY as u64 - assigned;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let fa = shares[a] - shares[a].floor();
        let fb = shares[b] - shares[b].floor();
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut idx = 0;
    while leftover > 0 {
        freqs[order[idx % n]] += 1;
        leftover -= 1;
        idx += 1;
    }
    Ok(freqs)
}

/// Freeze the learned density into integer tables.
///
/// Per channel: offset = median; range = the `[tail/2, 1 - tail/2]`
/// quantiles widened to cover every observed latent; tail mass outside the
/// range is folded into the two end symbols.
pub fn freeze_cdf(model: &FactorizedEntropyModel<f64>, stats: &LatentStats) -> Result<CdfTable> {
    let channels = model.channels();
    if stats.min.len() != channels {
        return Err(Error::Config(format!(
            "latent statistics cover {} channels, model has {channels}",
            stats.min.len()
        )));
    }
    let tail_logit = ((TAIL_MASS / 2.0) / (1.0 - TAIL_MASS / 2.0)).ln();
    let mut tables = Vec::with_capacity(channels);
    for ch in 0..channels {
        let degenerate = || Error::Freeze(format!("channel {ch}: mass lies outside the representable range"));
        let median = solve_logit(model, ch, 0.0).ok_or_else(degenerate)?;
        let q_lo = solve_logit(model, ch, tail_logit).ok_or_else(degenerate)?;
        let q_hi = solve_logit(model, ch, -tail_logit).ok_or_else(degenerate)?;
        let mut lo = (q_lo - median).floor();
        let mut hi = (q_hi - median).ceil();
        if stats.min[ch].is_finite() {
            lo = lo.min(round_half_away(stats.min[ch] - median));
            hi = hi.max(round_half_away(stats.max[ch] - median));
        }
        let span = hi - lo + 1.0;
        if !(span >= 1.0 && span <= MAX_SYMBOLS as f64) {
            return Err(Error::Freeze(format!(
                "channel {ch}: symbol range [{lo}, {hi}] exceeds {MAX_SYMBOLS} symbols"
            )));
        }
        let (lo, hi) = (lo as i32, hi as i32);
        let mut probs: Vec<f64> = (lo..=hi).map(|s| model.bin_mass(ch, s as f64 + median)).collect();
        let last = probs.len() - 1;
        probs[0] += model.cdf(ch, lo as f64 + median - 0.5);
        probs[last] += 1.0 - model.cdf(ch, hi as f64 + median + 0.5);
        let freqs = quantize_frequencies(&probs)?;
        tables.push(ChannelTable::from_frequencies(median, lo, &freqs)?);
    }
    Ok(CdfTable { channels: tables })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::ParamSet;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(channels: usize) -> FactorizedEntropyModel<f64> {
        let mut params = ParamSet::new();
        crate::bottleneck::entropy_model::init_params(&mut params, channels, &mut ChaCha8Rng::seed_from_u64(2));
        FactorizedEntropyModel::from_params(&params).unwrap()
    }

    #[test]
    fn frequency_quantization_invariants() {
        let freqs = quantize_frequencies(&[0.5, 0.25, 1e-12, 0.25]).unwrap();
        assert_eq!(freqs.iter().sum::<u32>(), TOTAL_FREQUENCY);
        assert!(freqs.iter().all(|&f| f >= 1));
        assert_eq!(freqs[2], 1);
        let uniform = quantize_frequencies(&[1.0; 256]).unwrap();
        assert!(uniform.iter().all(|&f| f == 256));
        assert!(quantize_frequencies(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn frozen_tables_are_normalized_and_cover_observations() {
        let m = model(3);
        let mut stats = LatentStats::new(3);
        stats.min[1] = -200.0;
        stats.max[1] = 150.0;
        let table = freeze_cdf(&m, &stats).unwrap();
        for (ch, t) in table.channels.iter().enumerate() {
            assert_eq!(*t.cum.last().unwrap(), TOTAL_FREQUENCY);
            assert!(t.cum.windows(2).all(|w| w[1] > w[0]));
            assert!(t.contains(-1) && t.contains(0) && t.contains(1), "channel {ch}");
        }
        let wide = &table.channels[1];
        assert!(wide.min_symbol as f64 <= (-200.0 - wide.offset).round());
        assert!(wide.max_symbol() as f64 >= (150.0 - wide.offset).round());
        // deterministic
        assert_eq!(table, freeze_cdf(&m, &stats).unwrap());
    }

    #[test]
    fn oversized_range_is_a_freeze_error() {
        let m = model(1);
        let mut stats = LatentStats::new(1);
        stats.min[0] = -1e5;
        stats.max[0] = 1e5;
        assert!(matches!(freeze_cdf(&m, &stats), Err(Error::Freeze(_))));
    }

    #[test]
    fn array_round_trip() {
        let table = freeze_cdf(&model(2), &LatentStats::new(2)).unwrap();
        let (o, m, l, f) = table.to_arrays();
        assert_eq!(CdfTable::from_arrays(&o, &m, &l, &f).unwrap(), table);
        assert!(CdfTable::from_arrays(&o, &m, &l, &f[1..]).is_err());
    }
}
