//! Floating-point scalar abstraction.
//!
//! Every probability/logit kernel in the crate is generic over [`Scalar`] so
//! the same code drives `f32` and `f64` tables. Configuration values stay
//! plain `f64` (they come from JSON/CLI); [`Scalar::from_config`] converts at
//! the boundary.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating-point number backing logits, probabilities and gradients.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Debug
    + Display
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    /// Converts a configuration value (always carried as `f64`).
    fn from_config(value: f64) -> Self {
        Self::from_f64(value).expect("finite config value representable in scalar type")
    }

    /// Widens to `f64` for reporting and accumulation.
    fn to_report(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
