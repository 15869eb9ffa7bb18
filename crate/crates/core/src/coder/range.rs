//! Byte-oriented range coder with a 64-bit range and carry propagation through
//! a cached byte plus a run of pending 0xFF bytes. The wide range keeps the
//! truncation loss of `range >> precision` below 2^-40 per symbol.

use crate::error::{Error, Result};

const TOP: u64 = 1 << 56;
/// Bytes the decoder primes its code register with.
const CODE_BYTES: usize = 8;

#[derive(Debug)]
pub struct RangeEncoder {
    low: u128,
    range: u64,
    cache: u8,
    pending: u64,
    first: bool,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u64::MAX,
            cache: 0,
            pending: 1,
            first: true,
            out: Vec::new(),
        }
    }

    /// Narrow the interval to `[start, start + width)` out of `2^precision`.
    pub fn encode(&mut self, start: u32, width: u32, precision: u32) {
        debug_assert!(width > 0 && (start as u64 + width as u64) <= 1 << precision);
        let r = self.range >> precision;
        self.low += r as u128 * start as u128;
        self.range = r * width as u64;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    fn emit(&mut self, byte: u8) {
        // The very first byte is the initial cache; the interval never
        // reaches 2^64 so it is always zero and is not stored.
        if self.first {
            debug_assert_eq!(byte, 0);
            self.first = false;
        } else {
            self.out.push(byte);
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u64) < 0xFF00_0000_0000_0000 || (self.low >> 64) != 0 {
            let carry = (self.low >> 64) as u8;
            let mut byte = self.cache;
            loop {
                self.emit(byte.wrapping_add(carry));
                byte = 0xFF;
                self.pending -= 1;
                if self.pending == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 56) & 0xFF) as u8;
        }
        self.pending += 1;
        self.low = (self.low & 0x00FF_FFFF_FFFF_FFFF) << 8;
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..=CODE_BYTES {
            self.shift_low();
        }
        self.out
    }
}

#[derive(Debug)]
pub struct RangeDecoder<'a> {
    code: u64,
    range: u64,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Result<Self> {
        let mut dec = RangeDecoder {
            code: 0,
            range: u64::MAX,
            bytes,
            pos: 0,
        };
        for _ in 0..CODE_BYTES {
            dec.code = (dec.code << 8) | dec.next_byte()? as u64;
        }
        Ok(dec)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = self
            .bytes
            .get(self.pos)
            .copied()
            .ok_or_else(|| Error::Decode("payload ended early".into()))?;
        self.pos += 1;
        Ok(b)
    }

    /// Position within `2^precision` of the current symbol; follow with
    /// [`RangeDecoder::consume`].
    pub fn peek(&self, precision: u32) -> Result<u32> {
        let r = self.range >> precision;
        let value = self.code / r;
        if value >> precision != 0 {
            return Err(Error::Decode("code value outside the modelled interval".into()));
        }
        Ok(value as u32)
    }

    pub fn consume(&mut self, start: u32, width: u32, precision: u32) -> Result<()> {
        let r = self.range >> precision;
        self.code -= r * start as u64;
        self.range = r * width as u64;
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte()? as u64;
            self.range <<= 8;
        }
        Ok(())
    }

    pub fn bytes_consumed(&self) -> usize {
        self.pos
    }

    pub fn is_exhausted(&self) -> bool {
        self.pos == self.bytes.len()
    }
}
