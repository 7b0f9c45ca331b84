//! Scalar abstraction shared by the exact (rational) and floating-point paths.
//!
//! Everything that only needs field arithmetic (model-chain recursion, moment
//! sums, trace sandwiches, candidate tables) is written against [`Scalar`].
//! Code that needs square roots or transcendental functions asks for
//! [`RealScalar`] instead, which is only implemented for `f32` and `f64`.

use std::fmt::Debug;

use num_bigint::BigInt;
use num_rational::{BigRational, Ratio};
use num_traits::{Float, FromPrimitive, NumAssign, Signed, ToPrimitive};

pub trait Scalar: NumAssign + Signed + Clone + Debug + PartialOrd + Send + Sync + 'static {
    fn from_usize(n: usize) -> Self;

    /// Lossy conversion used for reporting and tolerance checks.
    fn to_f64(&self) -> f64;

    /// Conversion from a float input. Exact types take the exact binary value.
    fn from_f64(x: f64) -> Option<Self>;

    fn is_finite(&self) -> bool {
        true
    }

    /// Whether a matrix entry counts as a stored zero.
    fn is_negligible(&self) -> bool {
        self.is_zero()
    }
}

macro_rules! float_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            fn from_usize(n: usize) -> Self {
                n as $t
            }
            fn to_f64(&self) -> f64 {
                *self as f64
            }
            fn from_f64(x: f64) -> Option<Self> {
                Some(x as $t)
            }
            fn is_finite(&self) -> bool {
                Float::is_finite(*self)
            }
            fn is_negligible(&self) -> bool {
                (*self as f64).abs() < 1e-15
            }
        }
    };
}

float_scalar!(f32);
float_scalar!(f64);

impl Scalar for BigRational {
    fn from_usize(n: usize) -> Self {
        Ratio::from_integer(BigInt::from(n))
    }
    fn to_f64(&self) -> f64 {
        ToPrimitive::to_f64(self).unwrap_or(f64::NAN)
    }
    fn from_f64(x: f64) -> Option<Self> {
        <BigRational as FromPrimitive>::from_f64(x)
    }
}

impl Scalar for Ratio<i64> {
    fn from_usize(n: usize) -> Self {
        Ratio::from_integer(n as i64)
    }
    fn to_f64(&self) -> f64 {
        ToPrimitive::to_f64(self).unwrap_or(f64::NAN)
    }
    fn from_f64(x: f64) -> Option<Self> {
        Ratio::<i64>::approximate_float(x)
    }
}

/// Floating-point scalars: everything that needs `sqrt`, `exp`, `cos`.
pub trait RealScalar: Scalar + Float {}

impl RealScalar for f32 {}
impl RealScalar for f64 {}

/// `p / q` as a scalar.
pub fn ratio<T: Scalar>(p: i64, q: i64) -> T {
    let num = if p < 0 { -T::from_usize(p.unsigned_abs() as usize) } else { T::from_usize(p as usize) };
    let den = if q < 0 { -T::from_usize(q.unsigned_abs() as usize) } else { T::from_usize(q as usize) };
    num / den
}

pub fn factorial<T: Scalar>(n: usize) -> T {
    (1..=n).fold(T::one(), |acc, k| acc * T::from_usize(k))
}

pub fn binomial<T: Scalar>(n: usize, k: usize) -> T {
    T::from_usize(crate::hilbert::binomial(n, k))
}

/// `x^n` for non-negative `n` without requiring `Pow`.
pub fn powi<T: Scalar>(x: &T, n: usize) -> T {
    (0..n).fold(T::one(), |acc, _| acc * x.clone())
}

/// `(-1)^n`.
pub fn sign_power<T: Scalar>(n: usize) -> T {
    if n % 2 == 0 {
        T::one()
    } else {
        -T::one()
    }
}
