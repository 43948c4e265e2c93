//! Scalar abstraction: every numeric kernel in this crate is generic over the
//! run-wide precision (f32 for training, f64 for verification suites).

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};
use std::fmt::{Debug, Display};

/// Real scalar type usable in tensors, on the wire, and in the solver.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + Copy + Send + Sync + Debug + Display + 'static
{
    /// Bytes per scalar in the wire encoding (4 or 8).
    const WIRE_WIDTH: usize;
    /// Set in the frame version byte's high bit: false = 32-bit, true = 64-bit.
    const WIDE: bool;

    fn write_le(self, out: &mut Vec<u8>);
    /// Reads one scalar from the start of `bytes`; caller guarantees length.
    fn read_le(bytes: &[u8]) -> Self;

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to scalar")
    }
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {
    const WIRE_WIDTH: usize = 4;
    const WIDE: bool = false;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Scalar for f64 {
    const WIRE_WIDTH: usize = 8;
    const WIDE: bool = true;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_le_bytes() {
        let mut buf = Vec::new();
        1.5f32.write_le(&mut buf);
        (-2.25f64).write_le(&mut buf);
        assert_eq!(buf.len(), 12);
        assert_eq!(f32::read_le(&buf[..4]), 1.5);
        assert_eq!(f64::read_le(&buf[4..]), -2.25);
    }
}
