//! 32-bit range coder with carry propagation and 16-bit probabilities.
//!
//! Integer-only, so the byte output is identical on every platform. The
//! encoder emits bytes most significant first; the leading byte of the
//! classic LZMA layout (always zero) is omitted.

use crate::entropy::cdf::{CdfTable, PRECISION_BITS};
use crate::error::{Error, Result};

const TOP: u32 = 1 << 24;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CodedStream {
    pub bytes: Vec<u8>,
    pub symbol_count: usize,
}

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
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
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            skip_first: true,
            out: Vec::new(),
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut temp = self.cache;
            loop {
                if self.skip_first {
                    self.skip_first = false;
                } else {
                    self.out.push(temp.wrapping_add(carry));
                }
                temp = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    fn normalize(&mut self) {
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    /// Codes the interval `[cum, cum + freq)` of a `2^16` total.
    pub fn encode(&mut self, cum: u32, freq: u32) {
        debug_assert!(freq > 0 && cum + freq <= 1 << PRECISION_BITS);
        let r = self.range >> PRECISION_BITS;
        self.low += r as u64 * cum as u64;
        self.range = r * freq;
        self.normalize();
    }

    /// Codes `value < 2^bits` uniformly, `bits <= 16`.
    pub fn encode_bits(&mut self, value: u32, bits: u32) {
        debug_assert!(bits <= 16 && value < (1 << bits));
        let r = self.range >> bits;
        self.low += r as u64 * value as u64;
        self.range = r;
        self.normalize();
    }

    /// Codes `value` with `table`, escaping values outside its window.
    pub fn encode_symbol(&mut self, value: i32, table: &CdfTable) -> Result<()> {
        match table.index_of(value) {
            Some(i) => self.encode(table.cum(i), table.freq(i)),
            None => {
                let (esc_idx, esc) = table
                    .escape_index()
                    .zip(table.escape())
                    .ok_or_else(|| Error::OutOfRange(format!("symbol {value} outside table without escape")))?;
                if value < esc.base || value > esc.max_value() {
                    return Err(Error::OutOfRange(format!(
                        "symbol {value} outside coder alphabet [{}, {}]",
                        esc.base,
                        esc.max_value()
                    )));
                }
                self.encode(table.cum(esc_idx), table.freq(esc_idx));
                self.encode_bits((value - esc.base) as u32, esc.bits);
            }
        }
        Ok(())
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    code: u32,
    range: u32,
    overrun: bool,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        let mut d = RangeDecoder {
            data,
            pos: 0,
            code: 0,
            range: u32::MAX,
            overrun: false,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte() as u32;
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        match self.data.get(self.pos) {
            Some(&b) => {
                self.pos += 1;
                b
            }
            None => {
                self.overrun = true;
                0
            }
        }
    }

    fn normalize(&mut self) {
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte() as u32;
            self.range <<= 8;
        }
    }

    fn target(&self, r: u32, limit: u32) -> u32 {
        (self.code / r).min(limit - 1)
    }

    pub fn decode_symbol(&mut self, table: &CdfTable) -> Result<i32> {
        let r = self.range >> PRECISION_BITS;
        let target = self.target(r, 1 << PRECISION_BITS);
        let idx = table.find(target);
        let (cum, freq) = (table.cum(idx), table.freq(idx));
        self.code = self.code.wrapping_sub(r * cum);
        self.range = r * freq;
        self.normalize();
        if Some(idx) == table.escape_index() {
            let esc = table.escape().expect("escape index implies escape");
            let r = self.range >> esc.bits;
            let raw = self.target(r, 1 << esc.bits);
            self.code = self.code.wrapping_sub(r * raw);
            self.range = r;
            self.normalize();
            let value = esc.base + raw as i32;
            if value > esc.max_value() {
                return Err(Error::Bitstream("escaped value out of range".into()));
            }
            return Ok(value);
        }
        Ok(table.value_of(idx))
    }

    /// Checks that the stream was consumed exactly. The encoder flushes all
    /// of `low`, so a well-formed stream leaves `code` at zero; anything else
    /// means the final bytes were altered.
    pub fn finish(self) -> Result<()> {
        if self.overrun {
            return Err(Error::Truncated);
        }
        if self.pos != self.data.len() {
            return Err(Error::Bitstream(format!(
                "{} trailing bytes after the last symbol",
                self.data.len() - self.pos
            )));
        }
        if self.code != 0 {
            return Err(Error::Bitstream("range coder flush does not match the decoded symbols".into()));
        }
        Ok(())
    }
}

/// Encodes `symbols[i]` with `tables[i]`.
pub fn rc_encode(symbols: &[i32], tables: &[&CdfTable]) -> Result<CodedStream> {
    if symbols.len() != tables.len() {
        return Err(Error::Shape(format!(
            "{} symbols but {} cdf tables",
            symbols.len(),
            tables.len()
        )));
    }
    let mut enc = RangeEncoder::new();
    for (&s, t) in symbols.iter().zip(tables) {
        enc.encode_symbol(s, t)?;
    }
    Ok(CodedStream {
        bytes: enc.finish(),
        symbol_count: symbols.len(),
    })
}

/// Decodes exactly `stream.symbol_count` symbols, one per table.
pub fn rc_decode(stream: &CodedStream, tables: &[&CdfTable]) -> Result<Vec<i32>> {
    if stream.symbol_count != tables.len() {
        return Err(Error::Shape(format!(
            "{} symbols but {} cdf tables",
            stream.symbol_count,
            tables.len()
        )));
    }
    let mut dec = RangeDecoder::new(&stream.bytes);
    let out = tables
        .iter()
        .map(|t| dec.decode_symbol(t))
        .collect::<Result<Vec<_>>>()?;
    dec.finish()?;
    Ok(out)
}

/// Ideal code length `Σ -log2 q(s_i)` under the quantized tables, escapes
/// included.
pub fn ideal_bits(symbols: &[i32], tables: &[&CdfTable]) -> f64 {
    symbols
        .iter()
        .zip(tables)
        .map(|(&s, t)| match t.index_of(s) {
            Some(i) => -(t.freq(i) as f64 / 65536.0).log2(),
            None => {
                let e = t.escape_index().expect("escaped symbol needs escape");
                -(t.freq(e) as f64 / 65536.0).log2() + t.escape().unwrap().bits as f64
            }
        })
        .sum()
}
