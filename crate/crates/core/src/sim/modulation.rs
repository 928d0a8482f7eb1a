//! Gray-mapped square constellations with unit average energy.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modulation {
    Qpsk,
    #[serde(rename = "16qam")]
    Qam16,
}

impl Modulation {
    pub fn bits_per_symbol(self) -> usize {
        2 * self.bits_per_axis()
    }

    fn bits_per_axis(self) -> usize {
        match self {
            Modulation::Qpsk => 1,
            Modulation::Qam16 => 2,
        }
    }

    fn levels(self) -> usize {
        1 << self.bits_per_axis()
    }

    /// Amplitude scale giving unit average symbol energy.
    fn scale(self) -> f64 {
        let m = self.levels() as f64;
        // Mean of (2k − m + 1)² over k is (m² − 1)/3; two axes.
        (1.0 / (2.0 * (m * m - 1.0) / 3.0)).sqrt()
    }

    pub fn name(self) -> &'static str {
        match self {
            Modulation::Qpsk => "qpsk",
            Modulation::Qam16 => "16qam",
        }
    }

    pub fn constellation(self) -> Vec<Complex64> {
        let k = self.bits_per_symbol();
        (0..1usize << k)
            .map(|v| {
                let bits: Vec<u8> = (0..k).map(|i| ((v >> (k - 1 - i)) & 1) as u8).collect();
                modulate(&bits, self).expect("whole symbol")[0]
            })
            .collect()
    }
}

fn gray_to_level(bits: &[u8]) -> usize {
    let mut b = 0;
    let mut acc = 0;
    for &g in bits {
        b ^= g as usize;
        acc = (acc << 1) | b;
    }
    acc
}

fn level_to_gray(level: usize, n: usize, out: &mut Vec<u8>) {
    let g = level ^ (level >> 1);
    out.extend((0..n).rev().map(|i| ((g >> i) & 1) as u8));
}

/// Bits are consumed I-axis first, most significant first.
pub fn modulate(bits: &[u8], scheme: Modulation) -> Result<Vec<Complex64>> {
    let k = scheme.bits_per_symbol();
    if bits.len() % k != 0 {
        return Err(Error::Shape(format!(
            "{} bits is not a multiple of {k} bits per symbol",
            bits.len()
        )));
    }
    let n = scheme.bits_per_axis();
    let m = scheme.levels() as f64;
    let s = scheme.scale();
    let amp = |lvl: usize| s * (2.0 * lvl as f64 - m + 1.0);
    Ok(bits
        .chunks_exact(k)
        .map(|c| Complex64::new(amp(gray_to_level(&c[..n])), amp(gray_to_level(&c[n..]))))
        .collect())
}

/// Minimum-distance detection, done per axis.
pub fn demodulate(symbols: &[Complex64], scheme: Modulation) -> Vec<u8> {
    let n = scheme.bits_per_axis();
    let m = scheme.levels();
    let s = scheme.scale();
    let slice = |x: f64| {
        let l = ((x / s + m as f64 - 1.0) / 2.0).round();
        if l.is_nan() {
            0
        } else {
            l.clamp(0.0, (m - 1) as f64) as usize
        }
    };
    let mut out = Vec::with_capacity(symbols.len() * 2 * n);
    for y in symbols {
        level_to_gray(slice(y.re), n, &mut out);
        level_to_gray(slice(y.im), n, &mut out);
    }
    out
}
