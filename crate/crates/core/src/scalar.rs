//! Scalar abstraction: model math is generic over `Real` so the same
//! forward/backward code runs in f32 (training) and f64 (verification,
//! finite-difference harnesses).

use num_traits::Float;

pub trait Real:
    Float + num_traits::FromPrimitive + std::iter::Sum + std::fmt::Debug + Default + Send + Sync + 'static
{
    fn from_f64_c(x: f64) -> Self;
    fn to_f64_c(self) -> f64;
    /// Little-endian byte encoding, used for content hashing and checkpoints.
    fn write_le(self, out: &mut Vec<u8>);
}

impl Real for f32 {
    fn from_f64_c(x: f64) -> Self {
        x as f32
    }
    fn to_f64_c(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

impl Real for f64 {
    fn from_f64_c(x: f64) -> Self {
        x
    }
    fn to_f64_c(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

/// Shorthand for pulling an f64 literal into the generic scalar type.
pub fn r<T: Real>(x: f64) -> T {
    T::from_f64_c(x)
}

/// Numerically stable log(1 + e^x).
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
