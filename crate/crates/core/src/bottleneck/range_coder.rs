//! Byte-oriented range coder with 16-bit frequencies.
//!
//! State: a 64-bit `low` register (32 value bits plus carry) and a 32-bit
//! `range`, renormalized one byte at a time whenever `range < 2^24`.
//! Carries are resolved with a pending byte and a count of pending `0xFF`
//! bytes. Bytes are emitted most significant first. The always-zero leading
//! byte of the classic construction is not written, so a stream of `n`
//! renormalizations is exactly `n + 4` bytes long.

use crate::bottleneck::cdf_table::{CdfTable, PRECISION_BITS, TOTAL_FREQUENCY};
use crate::bottleneck::quantize::QuantizedLatent;
use crate::error::{Error, Result};

const TOP: u32 = 1 << 24;

#[derive(Debug)]
pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    pending: u64,
    skip_first: bool,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            cache: 0,
            pending: 1,
            skip_first: true,
            out: Vec::new(),
        }
    }

    fn emit(&mut self, byte: u8) {
        if self.skip_first {
            debug_assert_eq!(byte, 0);
            self.skip_first = false;
        } else {
            self.out.push(byte);
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                self.emit(byte.wrapping_add(carry));
                byte = 0xFF;
                self.pending -= 1;
                if self.pending == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.pending += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    /// Narrow the interval to `[cum, cum + freq)` out of `2^16`.
    pub fn encode(&mut self, cum: u32, freq: u32) {
        debug_assert!(freq > 0 && cum + freq <= TOTAL_FREQUENCY);
        let r = self.range >> PRECISION_BITS;
        self.low += r as u64 * cum as u64;
        self.range = r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

#[derive(Debug)]
pub struct RangeDecoder<'a> {
    code: u32,
    range: u32,
    data: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self> {
        if data.len() < 4 {
            return Err(Error::Decode(format!("payload of {} bytes is truncated", data.len())));
        }
        let code = u32::from_be_bytes(data[..4].try_into().unwrap());
        Ok(Self {
            code,
            range: u32::MAX,
            data,
            pos: 4,
        })
    }

    fn next_byte(&mut self) -> Result<u8> {
        let byte = *self
            .data
            .get(self.pos)
            .ok_or_else(|| Error::Decode("payload ended before all symbols were decoded".into()))?;
        self.pos += 1;
        Ok(byte)
    }

    /// Decode one symbol index against cumulative frequencies `cum` (`cum[0] = 0`,
    /// last = `2^16`).
    pub fn decode(&mut self, cum: &[u32]) -> Result<usize> {
        let r = self.range >> PRECISION_BITS;
        let target = self.code / r;
        if target >= TOTAL_FREQUENCY {
            return Err(Error::Decode("corrupt payload: code value outside the interval".into()));
        }
        // first index whose upper bound exceeds target
        let idx = cum[1..].partition_point(|&c| c <= target);
        let (lo, hi) = (cum[idx], cum[idx + 1]);
        self.code -= r * lo;
        self.range = r * (hi - lo);
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte()? as u32;
            self.range <<= 8;
        }
        Ok(idx)
    }

    pub fn bytes_consumed(&self) -> usize {
        self.pos
    }
}

/// Entropy-code a quantized latent, channel-major, each element with its channel's table.
pub fn rc_encode(symbols: &QuantizedLatent, table: &CdfTable) -> Result<Vec<u8>> {
    if symbols.is_empty() {
        return Ok(Vec::new());
    }
    if symbols.shape[0] != table.channels.len() {
        return Err(Error::Encode(format!(
            "latent has {} channels, table has {}",
            symbols.shape[0],
            table.channels.len()
        )));
    }
    let mut enc = RangeEncoder::new();
    for (i, &s) in symbols.symbols.iter().enumerate() {
        let ch = symbols.channel_of(i);
        let t = &table.channels[ch];
        let (cum, freq) = t.interval(s).ok_or_else(|| {
            Error::Encode(format!(
                "symbol {s} in channel {ch} is outside the table range [{}, {}]",
                t.min_symbol,
                t.max_symbol()
            ))
        })?;
        enc.encode(cum, freq);
    }
    Ok(enc.finish())
}

/// Decode `shape.product()` symbols produced by [`rc_encode`].
pub fn rc_decode(payload: &[u8], table: &CdfTable, shape: [usize; 3]) -> Result<QuantizedLatent> {
    let count: usize = shape.iter().product();
    if count == 0 {
        return QuantizedLatent::new(shape, Vec::new());
    }
    if shape[0] != table.channels.len() {
        return Err(Error::Decode(format!(
            "latent has {} channels, table has {}",
            shape[0],
            table.channels.len()
        )));
    }
    let plane = shape[1] * shape[2];
    let mut dec = RangeDecoder::new(payload)?;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let t = &table.channels[i / plane];
        let idx = dec.decode(&t.cum)?;
        out.push(t.min_symbol + idx as i32);
    }
    QuantizedLatent::new(shape, out)
}
