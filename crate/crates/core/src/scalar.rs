//! Numeric abstractions shared by every module.
//!
//! The outcome function (actions, prices, taxes) only needs field
//! operations, so it is generic over [`Field`] and runs unchanged on exact
//! rationals. Anything that touches utilities, gradients or iterative
//! solvers needs [`Scalar`] (`f32` / `f64`).

use std::cmp::Ordering;
use std::fmt::{Debug, Display};
use std::ops::Neg;

use num_rational::Ratio;
use num_traits::{Float, FromPrimitive, Num, NumCast, ToPrimitive};
use serde::{Serialize, Serializer};

/// Ordered field arithmetic: enough for the mechanism's outcome function.
pub trait Field: Copy + Debug + PartialOrd + Num + Neg<Output = Self> + Send + Sync + 'static {
    fn is_finite_value(&self) -> bool;

    fn abs_val(self) -> Self {
        if self < Self::zero() {
            -self
        } else {
            self
        }
    }

    /// `n` as a field element.
    fn from_count(n: usize) -> Self {
        (0..n).fold(Self::zero(), |acc, _| acc + Self::one())
    }
}

impl Field for f32 {
    fn is_finite_value(&self) -> bool {
        self.is_finite()
    }
    fn from_count(n: usize) -> Self {
        n as f32
    }
}

impl Field for f64 {
    fn is_finite_value(&self) -> bool {
        self.is_finite()
    }
    fn from_count(n: usize) -> Self {
        n as f64
    }
}

macro_rules! rational_field {
    ($($int:ty),*) => {$(
        impl Field for Ratio<$int> {
            fn is_finite_value(&self) -> bool {
                true
            }
        }
    )*};
}

rational_field!(i32, i64, i128);

/// Floating point: `f32` or `f64`.
pub trait Scalar: Field + Float + FromPrimitive + ToPrimitive + NumCast + Display + Default {}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Converts an `f64` literal into the working scalar.
#[inline]
pub fn lit<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("f64 literal representable in scalar type")
}

/// Real number extended with a negative-infinity sentinel.
///
/// Only comparison is defined; there is deliberately no arithmetic on
/// this type.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ExtReal<T> {
    NegInfinity,
    Finite(T),
}

impl<T: Copy> ExtReal<T> {
    pub fn finite(self) -> Option<T> {
        match self {
            ExtReal::Finite(v) => Some(v),
            ExtReal::NegInfinity => None,
        }
    }

    pub fn is_finite(&self) -> bool {
        matches!(self, ExtReal::Finite(_))
    }

    pub fn map<U>(self, f: impl FnOnce(T) -> U) -> ExtReal<U> {
        match self {
            ExtReal::Finite(v) => ExtReal::Finite(f(v)),
            ExtReal::NegInfinity => ExtReal::NegInfinity,
        }
    }
}

impl<T: Scalar> ExtReal<T> {
    /// Lifts a float, mapping `-inf` to the sentinel.
    pub fn from_float(v: T) -> Self {
        if v == T::neg_infinity() {
            ExtReal::NegInfinity
        } else {
            ExtReal::Finite(v)
        }
    }

    /// Improvement of `self` over `baseline` as a plain float.
    ///
    /// Leaving the sentinel is an infinite gain; landing on it is an
    /// infinite loss; two sentinels compare equal.
    pub fn gain_over(self, baseline: Self) -> T {
        match (self, baseline) {
            (ExtReal::Finite(a), ExtReal::Finite(b)) => a - b,
            (ExtReal::Finite(_), ExtReal::NegInfinity) => T::infinity(),
            (ExtReal::NegInfinity, ExtReal::Finite(_)) => T::neg_infinity(),
            (ExtReal::NegInfinity, ExtReal::NegInfinity) => T::zero(),
        }
    }
}

impl<T: PartialOrd> PartialOrd for ExtReal<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match (self, other) {
            (ExtReal::NegInfinity, ExtReal::NegInfinity) => Some(Ordering::Equal),
            (ExtReal::NegInfinity, ExtReal::Finite(_)) => Some(Ordering::Less),
            (ExtReal::Finite(_), ExtReal::NegInfinity) => Some(Ordering::Greater),
            (ExtReal::Finite(a), ExtReal::Finite(b)) => a.partial_cmp(b),
        }
    }
}

/// Serialized as a number, or `null` for the sentinel.
impl<T: Serialize> Serialize for ExtReal<T> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            ExtReal::Finite(v) => v.serialize(s),
            ExtReal::NegInfinity => s.serialize_none(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sentinel_orders_below_everything() {
        let lo = ExtReal::<f64>::NegInfinity;
        assert!(lo < ExtReal::Finite(-1e300));
        assert!(ExtReal::Finite(0.0) > lo);
        assert_eq!(lo.partial_cmp(&lo), Some(Ordering::Equal));
        assert!(ExtReal::Finite(1.0) < ExtReal::Finite(2.0));
    }

    #[test]
    fn gains() {
        let f = ExtReal::Finite(2.0_f64);
        assert_eq!(f.gain_over(ExtReal::Finite(0.5)), 1.5);
        assert_eq!(f.gain_over(ExtReal::NegInfinity), f64::INFINITY);
        assert_eq!(ExtReal::NegInfinity.gain_over(f), f64::NEG_INFINITY);
        assert_eq!(ExtReal::<f64>::NegInfinity.gain_over(ExtReal::NegInfinity), 0.0);
    }

    #[test]
    fn serializes_sentinel_as_null() {
        let v = vec![ExtReal::Finite(1.5_f64), ExtReal::NegInfinity];
        assert_eq!(serde_json::to_string(&v).unwrap(), "[1.5,null]");
    }

    #[test]
    fn field_abs_on_rationals() {
        let r = num_rational::Ratio::new(-3_i128, 4);
        assert_eq!(r.abs_val(), num_rational::Ratio::new(3, 4));
    }
}
