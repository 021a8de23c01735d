//! Scalar types the tensor core is generic over.
//!
//! Training and inference run in `f32`; gradient checking runs the same code
//! in `f64` so the finite-difference oracle is trustworthy.

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign};

use num_traits::Float;

/// On-disk dtype tag used by the binary tensor format.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn to_u8(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_u8(v: u8) -> Option<Dtype> {
        match v {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Scalar element of a [`Tensor`](super::Tensor): `f32` or `f64`.
pub trait Element:
    Float
    + AddAssign
    + MulAssign
    + Default
    + Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Fast exponential. In `f32` this is a polynomial approximation
    /// (|relative error| < 3e-7) so softmax does not bottleneck on libm;
    /// in `f64` it is the standard library `exp`.
    fn exp_fast(self) -> Self;

    /// `tanh` built on [`Element::exp_fast`] in `f32`, std `tanh` in `f64`.
    fn tanh_fast(self) -> Self;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

/// exp(x) for f32 via 2^n * 2^f with a degree-6 polynomial for 2^f.
#[inline]
fn exp_f32(x: f32) -> f32 {
    // Outside this range the result saturates to 0 / inf in f32 anyway.
    if x > 88.7 {
        return f32::INFINITY;
    }
    if x < -87.3 {
        return 0.0;
    }
    let t = x * std::f32::consts::LOG2_E;
    let n = t.round();
    // Cody-Waite range reduction: f = x - n*ln2 in two exact-ish parts.
    const LN2_HI: f32 = 0.693_359_375;
    const LN2_LO: f32 = -2.121_944_4e-4;
    let f = (x - n * LN2_HI) - n * LN2_LO; // |f| <= 0.347
    // Degree-6 Taylor for e^f; error < 1e-8 on this interval.
    let p = 1.0
        + f * (1.0
            + f * (0.5
                + f * (1.0 / 6.0 + f * (1.0 / 24.0 + f * (1.0 / 120.0 + f * (1.0 / 720.0))))));
    let bits = (((n as i32) + 127) << 23) as u32;
    p * f32::from_bits(bits)
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    #[inline]
    fn exp_fast(self) -> Self {
        exp_f32(self)
    }

    #[inline]
    fn tanh_fast(self) -> Self {
        // tanh(x) = 1 - 2 / (e^{2x} + 1); saturate early to dodge inf/inf.
        if self > 9.0 {
            return 1.0;
        }
        if self < -9.0 {
            return -1.0;
        }
        1.0 - 2.0 / (exp_f32(2.0 * self) + 1.0)
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Element for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    #[inline]
    fn exp_fast(self) -> Self {
        self.exp()
    }

    #[inline]
    fn tanh_fast(self) -> Self {
        self.tanh()
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes([
            bytes[0], bytes[1], bytes[2], bytes[3], bytes[4], bytes[5], bytes[6], bytes[7],
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_exp_matches_std() {
        let mut worst = 0.0f64;
        let mut x = -30.0f32;
        while x < 30.0 {
            let got = x.exp_fast() as f64;
            let want = (x as f64).exp();
            let rel = ((got - want) / want).abs();
            if rel > worst {
                worst = rel;
            }
            x += 0.0137;
        }
        assert!(worst < 3e-7, "worst relative error {worst}");
    }

    #[test]
    fn fast_exp_saturates() {
        assert_eq!(1000.0f32.exp_fast(), f32::INFINITY);
        assert_eq!((-1000.0f32).exp_fast(), 0.0);
        assert_eq!(0.0f32.exp_fast(), 1.0);
    }

    #[test]
    fn fast_tanh_matches_std() {
        let mut x = -12.0f32;
        while x < 12.0 {
            let got = x.tanh_fast();
            let want = x.tanh();
            assert!((got - want).abs() < 1e-6, "x={x} got={got} want={want}");
            x += 0.017;
        }
    }
}
