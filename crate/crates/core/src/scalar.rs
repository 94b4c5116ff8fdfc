//! Scalar type for durations and timestamps in milliseconds.
//!
//! Latency models, traces and statistics are generic over the time scalar
//! so that schedules can be computed in `f64` for everyday runs or exactly
//! in `Ratio<i64>` when a closed-form schedule must be matched without
//! rounding.

use std::fmt::{Debug, Display};

use num_traits::{FromPrimitive, Num, ToPrimitive};

/// Milliseconds, as any totally usable numeric type.
pub trait Millis:
    Num + Copy + PartialOrd + FromPrimitive + ToPrimitive + Debug + Display + Send + Sync + 'static
{
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in time scalar")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Non-negative and, for floats, finite.
    fn is_valid_duration(self) -> bool {
        self >= Self::zero() && self.as_f64().is_finite()
    }

    fn max_of(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }

    fn min_of(self, other: Self) -> Self {
        if other < self {
            other
        } else {
            self
        }
    }
}

impl<T> Millis for T where
    T: Num
        + Copy
        + PartialOrd
        + FromPrimitive
        + ToPrimitive
        + Debug
        + Display
        + Send
        + Sync
        + 'static
{
}
