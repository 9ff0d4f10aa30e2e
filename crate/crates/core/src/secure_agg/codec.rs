//! Fixed-point encoding of real weights into field elements.

use serde::{Deserialize, Serialize};

use super::field::{Fp, MODULUS};
use super::SecureAggError;

/// Maps reals in `[-clamp, clamp]` to `round(x * 2^scale_bits)` in the field,
/// negative values wrapping to the top half.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedPointCodec {
    pub scale_bits: u32,
    pub clamp: f64,
    /// Saturate out-of-range values instead of rejecting them.
    pub clamping: bool,
}

impl Default for FixedPointCodec {
    fn default() -> Self {
        FixedPointCodec {
            scale_bits: 16,
            clamp: 64.0,
            clamping: true,
        }
    }
}

impl FixedPointCodec {
    pub fn scale(&self) -> f64 {
        (1u64 << self.scale_bits) as f64
    }

    /// Largest number of in-range values whose sum cannot wrap: the bound
    /// `n * scale * clamp < p / 2`.
    pub fn max_summands(&self) -> u64 {
        let per_value = (self.clamp * self.scale()).ceil() as u64;
        (MODULUS / 2 - 1) / per_value.max(1)
    }

    pub fn encode(&self, x: f64) -> Result<Fp, SecureAggError> {
        if !x.is_finite() {
            return Err(SecureAggError::OutOfRange(x));
        }
        let x = if x.abs() > self.clamp {
            if !self.clamping {
                return Err(SecureAggError::OutOfRange(x));
            }
            x.clamp(-self.clamp, self.clamp)
        } else {
            x
        };
        Ok(Fp::from_i64((x * self.scale()).round() as i64))
    }

    pub fn encode_vec(&self, xs: &[f64]) -> Result<Vec<Fp>, SecureAggError> {
        xs.iter().map(|&x| self.encode(x)).collect()
    }

    /// Signed integer representative: values above `p/2` are negative.
    pub fn to_signed(v: Fp) -> i64 {
        let raw = v.value();
        if raw > MODULUS / 2 {
            -((MODULUS - raw) as i64)
        } else {
            raw as i64
        }
    }

    pub fn decode(&self, v: Fp) -> f64 {
        Self::to_signed(v) as f64 / self.scale()
    }

    pub fn decode_vec(&self, vs: &[Fp]) -> Vec<f64> {
        vs.iter().map(|&v| self.decode(v)).collect()
    }

    /// Rounds a real onto the codec grid.
    pub fn quantize(&self, x: f64) -> Result<f64, SecureAggError> {
        self.encode(x).map(|v| self.decode(v))
    }
}
