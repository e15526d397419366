//! Quantized CDF tables bridging entropy parameters and the range coder.
//!
//! A table covers a contiguous window of integer symbols starting at
//! `offset`, optionally followed by an escape entry. Frequencies sum to
//! exactly `2^16` and each entry has frequency at least 1. Values outside
//! the window are coded as the escape entry plus a fixed-width raw value.

use crate::entropy::discretized_gaussian_pmf;
use crate::error::{Error, Result};

pub const PRECISION_BITS: u32 = 16;
pub const TOTAL_FREQ: u32 = 1 << PRECISION_BITS;

/// Half-width of the Gaussian window, in standard deviations.
pub const GAUSSIAN_TAIL_SIGMAS: f64 = 5.0;

/// Raw follow-up for escaped values: `value - base` is sent in `bits` bits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Escape {
    pub base: i32,
    pub bits: u32,
    /// Largest escapable value; raw codes above `max - base` are invalid.
    pub max: i32,
}

impl Escape {
    /// Escape covering the whole alphabet `[-l_max, l_max]`.
    pub fn for_alphabet(l_max: i32) -> Self {
        let span = (2 * l_max + 1) as u32;
        Escape {
            base: -l_max,
            bits: 32 - (span - 1).leading_zeros(),
            max: l_max,
        }
    }

    pub fn max_value(&self) -> i32 {
        self.max
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTable {
    offset: i32,
    /// Cumulative frequencies, `cdf[0] = 0`, `cdf[last] = 2^16`.
    cdf: Vec<u32>,
    escape: Option<Escape>,
}

impl CdfTable {
    /// Builds a table from explicit frequencies (window symbols first, then the
    /// escape entry if `escape` is set).
    pub fn from_frequencies(offset: i32, freqs: &[u32], escape: Option<Escape>) -> Result<Self> {
        let min_entries = if escape.is_some() { 2 } else { 1 };
        if freqs.len() < min_entries {
            return Err(Error::Config("cdf table needs at least one symbol".into()));
        }
        if freqs.iter().any(|&f| f == 0) {
            return Err(Error::Config("every symbol needs nonzero frequency".into()));
        }
        let mut cdf = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0u64;
        cdf.push(0);
        for &f in freqs {
            acc += f as u64;
            if acc > TOTAL_FREQ as u64 {
                break;
            }
            cdf.push(acc as u32);
        }
        if acc != TOTAL_FREQ as u64 {
            return Err(Error::Config(format!("frequencies sum to {acc}, expected {TOTAL_FREQ}")));
        }
        Ok(CdfTable { offset, cdf, escape })
    }

    /// Quantizes a pmf over the window `offset..offset+pmf.len()`. With an
    /// escape, the escape entry receives the mass missing from `pmf`.
    pub fn from_pmf(offset: i32, pmf: &[f64], escape: Option<Escape>) -> Result<Self> {
        let mut probs: Vec<f64> = pmf.iter().map(|&p| if p.is_finite() { p.max(0.0) } else { 0.0 }).collect();
        if escape.is_some() {
            let covered: f64 = probs.iter().sum();
            probs.push((1.0 - covered).max(0.0));
        }
        let entries = probs.len();
        if entries as u64 > TOTAL_FREQ as u64 {
            return Err(Error::Config("too many symbols for 16-bit precision".into()));
        }
        let sum: f64 = probs.iter().sum();
        let spare = (TOTAL_FREQ as usize - entries) as f64;
        let mut freqs: Vec<i64> = probs
            .iter()
            .map(|&p| {
                let share = if sum > 0.0 { p / sum } else { 1.0 / entries as f64 };
                1 + (share * spare).floor() as i64
            })
            .collect();
        let deficit = TOTAL_FREQ as i64 - freqs.iter().sum::<i64>();
        let mut largest = 0;
        for (i, &f) in freqs.iter().enumerate() {
            if f > freqs[largest] {
                largest = i;
            }
        }
        freqs[largest] += deficit;
        if freqs[largest] < 1 {
            return Err(Error::Config("degenerate pmf".into()));
        }
        let freqs: Vec<u32> = freqs.into_iter().map(|f| f as u32).collect();
        Self::from_frequencies(offset, &freqs, escape)
    }

    /// Discretized Gaussian over a window of `±(5σ + 1)` around the rounded
    /// mean, clipped to `[-l_max, l_max]`, with an escape for the rest.
    pub fn gaussian(mu: f64, sigma: f64, l_max: i32) -> Result<Self> {
        if !(sigma > 0.0) || !mu.is_finite() {
            return Err(Error::OutOfRange(format!("invalid gaussian ({mu}, {sigma})")));
        }
        let center = mu.round().clamp(-(l_max as f64), l_max as f64) as i64;
        let half = (GAUSSIAN_TAIL_SIGMAS * sigma).ceil().min(2.0 * l_max as f64) as i64 + 1;
        let lo = (center - half).max(-(l_max as i64)) as i32;
        let hi = (center + half).min(l_max as i64) as i32;
        let pmf: Vec<f64> = (lo..=hi)
            .map(|k| discretized_gaussian_pmf(k as f64, mu, sigma))
            .collect();
        Self::from_pmf(lo, &pmf, Some(Escape::for_alphabet(l_max)))
    }

    pub fn offset(&self) -> i32 {
        self.offset
    }

    pub fn escape(&self) -> Option<Escape> {
        self.escape
    }

    /// Number of entries including the escape entry.
    pub fn entries(&self) -> usize {
        self.cdf.len() - 1
    }

    /// Number of directly coded window symbols.
    pub fn window_len(&self) -> usize {
        self.entries() - usize::from(self.escape.is_some())
    }

    pub fn escape_index(&self) -> Option<usize> {
        self.escape.map(|_| self.window_len())
    }

    pub fn cdf(&self) -> &[u32] {
        &self.cdf
    }

    pub fn cum(&self, index: usize) -> u32 {
        self.cdf[index]
    }

    pub fn freq(&self, index: usize) -> u32 {
        self.cdf[index + 1] - self.cdf[index]
    }

    /// Window index of `value`, or `None` if it must be escaped.
    pub fn index_of(&self, value: i32) -> Option<usize> {
        let rel = value as i64 - self.offset as i64;
        (0..self.window_len() as i64)
            .contains(&rel)
            .then_some(rel as usize)
    }

    pub fn value_of(&self, index: usize) -> i32 {
        self.offset + index as i32
    }

    /// Entry whose cumulative interval contains `target < 2^16`.
    pub fn find(&self, target: u32) -> usize {
        self.cdf.partition_point(|&c| c <= target) - 1
    }

    /// Quantized probabilities of each entry.
    pub fn probabilities(&self) -> Vec<f64> {
        (0..self.entries())
            .map(|i| self.freq(i) as f64 / TOTAL_FREQ as f64)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn true_entry_masses(table: &CdfTable, mu: f64, sigma: f64) -> Vec<f64> {
        let mut p: Vec<f64> = (0..table.window_len())
            .map(|i| discretized_gaussian_pmf(table.value_of(i) as f64, mu, sigma))
            .collect();
        let covered: f64 = p.iter().sum();
        p.push((1.0 - covered).max(0.0));
        p
    }

    #[test]
    fn construction_invariants() {
        for &(mu, sigma) in &[(0.0, 0.11), (3.3, 0.5), (-60.2, 4.0), (200.0, 1.0), (0.4, 40.0)] {
            let t = CdfTable::gaussian(mu, sigma, 64).unwrap();
            assert_eq!(t.cdf()[0], 0);
            assert_eq!(*t.cdf().last().unwrap(), 65536);
            assert!(t.cdf().windows(2).all(|w| w[0] < w[1]));
            assert!(t.probabilities().iter().all(|&p| p >= 1.0 / 65536.0));
            assert!(t.offset() >= -64 && t.offset() + t.window_len() as i32 - 1 <= 64);
        }
    }

    #[test]
    fn kl_to_true_gaussian_is_small() {
        let mut worst: f64 = 0.0;
        for i in 0..=100 {
            let sigma = 0.2 * (40.0f64).powf(i as f64 / 100.0);
            for &mu in &[0.0, 0.25, 0.5, -3.7] {
                let t = CdfTable::gaussian(mu, sigma, 64).unwrap();
                let p = true_entry_masses(&t, mu, sigma);
                let q = t.probabilities();
                let kl: f64 = p
                    .iter()
                    .zip(&q)
                    .filter(|(pi, _)| **pi > 0.0)
                    .map(|(pi, qi)| pi * (pi / qi).log2())
                    .sum();
                worst = worst.max(kl);
            }
        }
        assert!(worst < 1e-3, "worst KL {worst}");
    }

    #[test]
    fn find_inverts_cum() {
        let t = CdfTable::gaussian(1.2, 2.0, 64).unwrap();
        for i in 0..t.entries() {
            assert_eq!(t.find(t.cum(i)), i);
            assert_eq!(t.find(t.cum(i) + t.freq(i) - 1), i);
        }
    }

    #[test]
    fn frequencies_validated() {
        assert!(CdfTable::from_frequencies(0, &[65535, 1], None).is_ok());
        assert!(CdfTable::from_frequencies(0, &[65535, 0, 1], None).is_err());
        assert!(CdfTable::from_frequencies(0, &[100, 100], None).is_err());
    }

    #[test]
    fn escape_width() {
        let e = Escape::for_alphabet(64);
        assert_eq!(e.bits, 8);
        assert_eq!(e.max_value(), 64);
        assert!((e.max_value() - e.base) < (1 << e.bits));
        assert_eq!(Escape::for_alphabet(1).bits, 2);
    }
}
