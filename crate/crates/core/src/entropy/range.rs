//! Byte-oriented range coder with a 64-bit state.
//!
//! The coder keeps a 56-bit window (`range` in `[2^48, 2^56)`) and carries
//! into already-buffered bytes through the `cache`/`cache_size` scheme of
//! LZMA. Frequencies are 16-bit. The leading byte the encoder would always
//! emit as zero is dropped, and the final flush writes only the bytes needed
//! to single out the interval; the decoder pads with zeros.
//!
//! The decoder consumes exactly `len + 6` bytes of the zero-padded stream.
//! Reading a seventh pad byte means the stream was cut short.

use crate::error::BitstreamError;

pub const PROB_BITS: u32 = 16;
pub const PROB_TOTAL: u32 = 1 << PROB_BITS;

const WINDOW_BITS: u32 = 56;
const TOP: u64 = 1 << 48;
const LOW_MASK: u64 = TOP - 1;
const PAD_BYTES: usize = 6;

pub struct RangeEncoder {
    low: u64,
    range: u64,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
    first: bool,
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
            range: (1 << WINDOW_BITS) - 1,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
            first: true,
        }
    }

    /// Code the interval `[start, start + size)` out of [`PROB_TOTAL`].
    pub fn encode(&mut self, start: u32, size: u32) {
        debug_assert!(size > 0 && start + size <= PROB_TOTAL);
        let r = self.range >> PROB_BITS;
        self.low += r * start as u64;
        self.range = r * size as u64;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    /// One equiprobable bit.
    pub fn encode_bit(&mut self, bit: bool) {
        let half = PROB_TOTAL / 2;
        self.encode(if bit { half } else { 0 }, half);
    }

    fn emit(&mut self, byte: u8) {
        if self.first {
            // always zero: the interval never carries past the initial window
            debug_assert_eq!(byte, 0);
            self.first = false;
        } else {
            self.out.push(byte);
        }
    }

    fn shift_low(&mut self) {
        if self.low < (0xFF << 48) || self.low >= (1 << WINDOW_BITS) {
            let carry = (self.low >> WINDOW_BITS) as u8;
            let mut pending = self.cache;
            loop {
                self.emit(pending.wrapping_add(carry));
                pending = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 48) & 0xFF) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & LOW_MASK) << 8;
    }

    pub fn finish(mut self) -> Vec<u8> {
        // the smallest multiple of 2^48 inside [low, low + range)
        self.low = (self.low + LOW_MASK) & !LOW_MASK;
        self.shift_low();
        self.shift_low();
        self.out
    }
}

pub struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    pad: usize,
    code: u64,
    range: u64,
    r: u64,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        let mut dec = Self {
            data,
            pos: 0,
            pad: 0,
            code: 0,
            range: (1 << WINDOW_BITS) - 1,
            r: 0,
        };
        for _ in 0..7 {
            dec.code = (dec.code << 8) | dec.next_byte() as u64;
        }
        dec
    }

    fn next_byte(&mut self) -> u8 {
        match self.data.get(self.pos) {
            Some(&b) => {
                self.pos += 1;
                b
            }
            None => {
                self.pad += 1;
                0
            }
        }
    }

    /// Scaled position of the next symbol, in `[0, PROB_TOTAL)`.
    pub fn target(&mut self) -> u32 {
        self.r = self.range >> PROB_BITS;
        ((self.code / self.r).min(PROB_TOTAL as u64 - 1)) as u32
    }

    /// Remove the interval chosen after [`RangeDecoder::target`].
    pub fn consume(&mut self, start: u32, size: u32) -> Result<(), BitstreamError> {
        let base = self.r * start as u64;
        if self.code < base {
            return Err(BitstreamError::Corrupt("range decoder desynchronised"));
        }
        self.code -= base;
        self.range = self.r * size as u64;
        if self.code >= self.range {
            return Err(BitstreamError::Corrupt("range decoder desynchronised"));
        }
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | self.next_byte() as u64;
            if self.pad > PAD_BYTES {
                return Err(BitstreamError::Truncated);
            }
        }
        Ok(())
    }

    pub fn decode_bit(&mut self) -> Result<bool, BitstreamError> {
        let half = PROB_TOTAL / 2;
        let bit = self.target() >= half;
        self.consume(if bit { half } else { 0 }, half)?;
        Ok(bit)
    }

    /// Check that the stream was consumed exactly.
    pub fn finish(self) -> Result<(), BitstreamError> {
        match self.pad {
            PAD_BYTES => Ok(()),
            p if p > PAD_BYTES => Err(BitstreamError::Truncated),
            _ => Err(BitstreamError::Corrupt("unused bytes at end of stream")),
        }
    }
}
