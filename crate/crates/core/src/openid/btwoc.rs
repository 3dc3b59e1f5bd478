//! Minimal big-endian two's-complement encoding of non-negative integers.

use num_bigint::BigUint;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BtwocError {
    #[error("empty btwoc encoding")]
    Empty,
    #[error("btwoc encoding has its sign bit set")]
    Negative,
}

/// Shortest big-endian form whose first byte has a clear top bit.
pub fn btwoc_encode(n: &BigUint) -> Vec<u8> {
    let mut bytes = n.to_bytes_be();
    if bytes[0] & 0x80 != 0 {
        bytes.insert(0, 0);
    }
    bytes
}

pub fn btwoc_decode(bytes: &[u8]) -> Result<BigUint, BtwocError> {
    match bytes.first() {
        None => Err(BtwocError::Empty),
        Some(b) if b & 0x80 != 0 => Err(BtwocError::Negative),
        Some(_) => Ok(BigUint::from_bytes_be(bytes)),
    }
}
