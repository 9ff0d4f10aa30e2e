//! Byte layout of model blobs: a little-endian `u32` dimension header
//! followed by `dim` little-endian `u64` canonical field elements.

use super::field::Fp;
use super::SecureAggError;

pub fn encode_blob(values: &[Fp]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 8 * values.len());
    out.extend_from_slice(&(values.len() as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.value().to_le_bytes());
    }
    out
}

pub fn decode_blob(bytes: &[u8]) -> Result<Vec<Fp>, SecureAggError> {
    let malformed = |why: &str| SecureAggError::MalformedBlob(why.to_string());
    let header: [u8; 4] = bytes
        .get(..4)
        .ok_or_else(|| malformed("missing header"))?
        .try_into()
        .expect("4 bytes");
    let dim = u32::from_le_bytes(header) as usize;
    let body = &bytes[4..];
    if body.len() != dim * 8 {
        return Err(malformed("length does not match dimension header"));
    }
    body.chunks_exact(8)
        .map(|c| {
            let raw = u64::from_le_bytes(c.try_into().expect("8 bytes"));
            Fp::from_canonical(raw).ok_or_else(|| malformed("non-canonical field element"))
        })
        .collect()
}
