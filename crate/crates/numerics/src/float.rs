use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{AsPrimitive, FromPrimitive, NumAssign};

/// Scalar types the tape can run in: `f32` for training, `f64` for gradient checks.
pub trait Float:
    num_traits::Float
    + NumAssign
    + FromPrimitive
    + AsPrimitive<f64>
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + 'static
{
    /// Appends the little-endian encoding of `self`.
    fn write_le(self, out: &mut Vec<u8>);

    #[inline]
    fn c(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 converts to any Float")
    }
}

impl Float for f32 {
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

impl Float for f64 {
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}
