//! Fixed-step uniform quantization of model deltas.
//!
//! With step `s` and `b` bits the representable values are
//! `{-2^(b-1) s, ..., -s, 0, s, ..., (2^(b-1) - 1) s}`. The deterministic rule
//! rounds down to the grid; the stochastic rule rounds up with probability
//! equal to the fractional position inside the cell, which makes it unbiased.
//!
//! Wire layout of a [`QuantizedVector`]: the step `s` as a 32-bit
//! little-endian IEEE float, then `d` codes of `b` bits each in two's
//! complement, packed MSB-first into a contiguous bit stream. The final byte
//! is zero padded; padding is not counted in [`QuantizedVector::bit_len`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::StreamKey;
use crate::vector::ParamVector;

#[derive(Debug, Error, PartialEq)]
pub enum QuantizeError {
    #[error("quantizer overflow at coordinate {coordinate:?}: value {value} outside [{lo}, {hi}]")]
    Overflow {
        coordinate: Option<usize>,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("invalid quantizer: {0}")]
    InvalidSpec(String),
    #[error("malformed payload: {0}")]
    Payload(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rounding {
    Deterministic,
    Stochastic,
}

/// Step size, bit width and rounding rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizerSpec {
    pub step: f64,
    pub bits: u32,
    pub rule: Rounding,
    #[serde(default)]
    pub seed: u64,
}

impl QuantizerSpec {
    pub fn new(step: f64, bits: u32, rule: Rounding, seed: u64) -> Result<Self, QuantizeError> {
        let spec = QuantizerSpec { step, bits, rule, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn deterministic(step: f64, bits: u32) -> Result<Self, QuantizeError> {
        Self::new(step, bits, Rounding::Deterministic, 0)
    }

    pub fn stochastic(step: f64, bits: u32, seed: u64) -> Result<Self, QuantizeError> {
        Self::new(step, bits, Rounding::Stochastic, seed)
    }

    pub fn validate(&self) -> Result<(), QuantizeError> {
        if !(self.step.is_finite() && self.step > 0.0) {
            return Err(QuantizeError::InvalidSpec(format!("step must be positive and finite, got {}", self.step)));
        }
        if !(1..=32).contains(&self.bits) {
            return Err(QuantizeError::InvalidSpec(format!("bit width must be in 1..=32, got {}", self.bits)));
        }
        Ok(())
    }

    pub fn min_code(&self) -> i64 {
        -(1i64 << (self.bits - 1))
    }

    pub fn max_code(&self) -> i64 {
        (1i64 << (self.bits - 1)) - 1
    }

    /// Closed representable interval `[lo, hi]`.
    pub fn range(&self) -> (f64, f64) {
        (self.min_code() as f64 * self.step, self.max_code() as f64 * self.step)
    }

    fn check_range(&self, a: f64, coordinate: Option<usize>) -> Result<(), QuantizeError> {
        let (lo, hi) = self.range();
        if lo <= a && a <= hi {
            Ok(())
        } else {
            Err(QuantizeError::Overflow { coordinate, value: a, lo, hi })
        }
    }

    /// Cell index `k` with `k s <= a < (k + 1) s`, evaluated with the same
    /// floating-point product used to decode.
    fn cell(&self, a: f64) -> i64 {
        let s = self.step;
        let mut k = (a / s).floor() as i64;
        while (k as f64) * s > a {
            k -= 1;
        }
        while ((k + 1) as f64) * s <= a {
            k += 1;
        }
        k
    }

    /// Quantizes one scalar. `uniform` is a draw in `[0, 1)` and is ignored
    /// by the deterministic rule.
    pub fn quantize_scalar(&self, a: f64, uniform: f64) -> Result<i64, QuantizeError> {
        self.code_at(a, uniform, None)
    }

    fn code_at(&self, a: f64, uniform: f64, coordinate: Option<usize>) -> Result<i64, QuantizeError> {
        self.check_range(a, coordinate)?;
        let k = self.cell(a);
        Ok(match self.rule {
            Rounding::Deterministic => k,
            Rounding::Stochastic => {
                let frac = ((a - (k as f64) * self.step) / self.step).clamp(0.0, 1.0);
                if uniform < frac && k < self.max_code() {
                    k + 1
                } else {
                    k
                }
            }
        })
    }

    /// Coordinate-wise quantization; coordinate `i` consumes position `i` of
    /// the stream `key`.
    pub fn quantize_with_key(&self, x: &[f64], key: StreamKey) -> Result<QuantizedVector, QuantizeError> {
        let codes = x
            .iter()
            .enumerate()
            .map(|(i, &a)| {
                let u = match self.rule {
                    Rounding::Deterministic => 0.0,
                    Rounding::Stochastic => key.uniform(i as u64),
                };
                self.code_at(a, u, Some(i))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(QuantizedVector { step: self.step, bits: self.bits, codes })
    }

    /// Quantizes the message `client` sends in `round`.
    pub fn quantize_vector(&self, x: &[f64], round: u64, client: usize) -> Result<QuantizedVector, QuantizeError> {
        self.quantize_with_key(x, StreamKey::quantize(self.seed, round, client))
    }
}

/// Integer codes plus the step needed to decode them.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedVector {
    pub step: f64,
    pub bits: u32,
    pub codes: Vec<i64>,
}

impl QuantizedVector {
    pub fn dim(&self) -> usize {
        self.codes.len()
    }

    pub fn dequantize(&self) -> ParamVector {
        self.codes.iter().map(|&c| c as f64 * self.step).collect::<Vec<_>>().into()
    }

    /// Exact payload size in bits: 32 for the step plus `d * b` for codes.
    pub fn bit_len(&self) -> u64 {
        32 + self.codes.len() as u64 * self.bits as u64
    }

    pub fn byte_len(&self) -> usize {
        self.bit_len().div_ceil(8) as usize
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        out.extend_from_slice(&(self.step as f32).to_le_bytes());
        let mask: u64 = (1u64 << self.bits) - 1;
        let mut acc: u64 = 0;
        let mut filled = 0u32;
        for &c in &self.codes {
            acc = (acc << self.bits) | (c as u64 & mask);
            filled += self.bits;
            while filled >= 8 {
                filled -= 8;
                out.push((acc >> filled) as u8);
            }
            acc &= (1u64 << filled) - 1;
        }
        if filled > 0 {
            out.push((acc << (8 - filled)) as u8);
        }
        out
    }

    /// Decodes a payload produced by [`to_bytes`](Self::to_bytes). The step
    /// comes back at 32-bit precision.
    pub fn from_bytes(bytes: &[u8], d: usize, bits: u32) -> Result<Self, QuantizeError> {
        if !(1..=32).contains(&bits) {
            return Err(QuantizeError::InvalidSpec(format!("bit width must be in 1..=32, got {bits}")));
        }
        let expected = (32 + d as u64 * bits as u64).div_ceil(8) as usize;
        if bytes.len() != expected {
            return Err(QuantizeError::Payload(format!("expected {expected} bytes, got {}", bytes.len())));
        }
        let step = f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as f64;
        let mut codes = Vec::with_capacity(d);
        let mut acc: u64 = 0;
        let mut filled = 0u32;
        let mut iter = bytes[4..].iter();
        let sign_bit = 1u64 << (bits - 1);
        for _ in 0..d {
            while filled < bits {
                let byte = *iter.next().ok_or_else(|| QuantizeError::Payload("truncated payload".into()))?;
                acc = (acc << 8) | byte as u64;
                filled += 8;
            }
            filled -= bits;
            let raw = (acc >> filled) & ((1u64 << bits) - 1);
            acc &= (1u64 << filled) - 1;
            let code = if raw & sign_bit != 0 { raw as i64 - (1i64 << bits) } else { raw as i64 };
            codes.push(code);
        }
        Ok(QuantizedVector { step, bits, codes })
    }
}

/// Bits one client sends per gossip round to `degree` neighbours.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PayloadBits {
    pub quantized: u64,
    pub unquantized: u64,
}

/// `(32 + d b) * degree` quantized vs `32 d * degree` at full precision.
pub fn payload_bits(d: u64, bits: u32, degree: u64) -> PayloadBits {
    PayloadBits {
        quantized: (32 + d * bits as u64) * degree,
        unquantized: 32 * d * degree,
    }
}
