//! Reduced-precision emulation.
//!
//! Values stay `f64` in memory but are snapped onto the binary16 or binary32
//! grid with round-to-nearest-even. Binary16 overflow saturates at ±65504
//! instead of producing infinities. Transport payloads carry the real 16-bit
//! codes so byte accounting is exact.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{GradVector, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    Full64,
    Full32,
    Half16,
}

impl Precision {
    pub fn bytes_per_value(&self) -> usize {
        match self {
            Precision::Full64 => 8,
            Precision::Full32 => 4,
            Precision::Half16 => 2,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Precision::Full64 => "full64",
            Precision::Full32 => "full32",
            Precision::Half16 => "half16",
        }
    }
}

pub const HALF_MAX: f64 = 65504.0;
const HALF_MAX_BITS: u16 = 0x7bff;
/// Smallest positive normal binary16 value, 2^-14.
const HALF_MIN_NORMAL: f64 = 6.103515625e-5;

/// Encodes a finite `f64` as binary16 bits, rounding to nearest even and
/// saturating at ±65504.
pub fn f64_to_half_bits(x: f64) -> u16 {
    debug_assert!(x.is_finite());
    let sign: u16 = if x.is_sign_negative() { 0x8000 } else { 0 };
    let a = x.abs();
    if a == 0.0 {
        return sign;
    }
    if a < HALF_MIN_NORMAL {
        // subnormal grid: multiples of 2^-24
        let q = (a * 16_777_216.0).round_ties_even() as u16;
        return sign | q;
    }
    let exp = ((a.to_bits() >> 52) & 0x7ff) as i32 - 1023;
    // scale so the 11 significant bits land on integers; powers of two are exact
    let mut q = (a * 2f64.powi(10 - exp)).round_ties_even() as u32;
    let mut e = exp;
    if q == 2048 {
        q = 1024;
        e += 1;
    }
    if e > 15 {
        return sign | HALF_MAX_BITS;
    }
    sign | (((e + 15) as u16) << 10) | (q - 1024) as u16
}

/// Decodes binary16 bits. Infinity and NaN codes are decoded faithfully but
/// never produced by [`f64_to_half_bits`].
pub fn half_bits_to_f64(bits: u16) -> f64 {
    let sign = if bits & 0x8000 != 0 { -1.0 } else { 1.0 };
    let exp = ((bits >> 10) & 0x1f) as i32;
    let frac = (bits & 0x3ff) as f64;
    let mag = match exp {
        0 => frac * 2f64.powi(-24),
        31 if frac == 0.0 => f64::INFINITY,
        31 => f64::NAN,
        _ => (1.0 + frac / 1024.0) * 2f64.powi(exp - 15),
    };
    sign * mag
}

#[inline]
fn round_value(x: f64, precision: Precision) -> f64 {
    match precision {
        Precision::Full64 => x,
        Precision::Full32 => x as f32 as f64,
        Precision::Half16 => half_bits_to_f64(f64_to_half_bits(x)),
    }
}

/// Snaps every value onto the grid of `precision`.
pub fn quantize_roundtrip(values: &[f64], precision: Precision) -> Result<Vec<f64>> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("quantization input".into()));
    }
    Ok(values.iter().map(|&v| round_value(v, precision)).collect())
}

pub fn payload_bytes(param_count: usize, precision: Precision) -> usize {
    param_count * precision.bytes_per_value()
}

pub(crate) fn quantize_params(params: &ParamVector, precision: Precision) -> Result<ParamVector> {
    Ok(params.with_values(quantize_roundtrip(params.values(), precision)?))
}

/// SGD step on the `precision` grid: the gradient is rounded before use and
/// the updated parameters are rounded after. `Full64` is exactly
/// [`crate::model::sgd_step`].
pub fn quantized_sgd_step(params: &ParamVector, grad: &GradVector, lr: f64, precision: Precision) -> Result<ParamVector> {
    let g = GradVector::new(quantize_roundtrip(grad.values(), precision)?);
    let stepped = crate::model::sgd_step(params, &g, lr)?;
    let rounded = quantize_roundtrip(stepped.values(), precision)?;
    if rounded.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("parameters after quantized step".into()));
    }
    Ok(stepped.with_values(rounded))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Payload {
    Half(Vec<u16>),
    Single(Vec<f32>),
    Double(Vec<f64>),
}

/// An encoded update delta as it would travel to the server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedVector {
    payload: Payload,
}

impl QuantizedVector {
    pub fn encode(values: &[f64], precision: Precision) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("update delta".into()));
        }
        let payload = match precision {
            Precision::Half16 => Payload::Half(values.iter().map(|&v| f64_to_half_bits(v)).collect()),
            Precision::Full32 => Payload::Single(values.iter().map(|&v| v as f32).collect()),
            Precision::Full64 => Payload::Double(values.to_vec()),
        };
        let encoded = Self { payload };
        if encoded.decode().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("update delta overflows {}", precision.as_str())));
        }
        Ok(encoded)
    }

    pub fn decode(&self) -> Vec<f64> {
        match &self.payload {
            Payload::Half(codes) => codes.iter().map(|&c| half_bits_to_f64(c)).collect(),
            Payload::Single(v) => v.iter().map(|&x| x as f64).collect(),
            Payload::Double(v) => v.clone(),
        }
    }

    pub fn precision(&self) -> Precision {
        match self.payload {
            Payload::Half(_) => Precision::Half16,
            Payload::Single(_) => Precision::Full32,
            Payload::Double(_) => Precision::Full64,
        }
    }

    pub fn len(&self) -> usize {
        match &self.payload {
            Payload::Half(v) => v.len(),
            Payload::Single(v) => v.len(),
            Payload::Double(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn payload(&self) -> &Payload {
        &self.payload
    }

    pub fn byte_len(&self) -> usize {
        payload_bytes(self.len(), self.precision())
    }
}
