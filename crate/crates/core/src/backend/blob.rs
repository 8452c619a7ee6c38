// SPDX-License-Identifier: MIT OR Apache-2.0

//! Versioned binary container: 8-byte magic, u32 version, u32 metadata
//! length, JSON metadata, u64 value count, little-endian f64 values.

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub fn write_blob<M: Serialize>(magic: &[u8; 8], version: u32, meta: &M, values: &[f64]) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(meta)?;
    let mut out = Vec::with_capacity(24 + meta.len() + values.len() * 8);
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Returns `(version, metadata, values)`; rejects versions above `max_version`.
pub fn read_blob<M: DeserializeOwned>(
    bytes: &[u8],
    magic: &[u8; 8],
    max_version: u32,
) -> Result<(u32, M, Vec<f64>)> {
    let take = |at: usize, n: usize| -> Result<&[u8]> {
        bytes
            .get(at..at + n)
            .ok_or_else(|| Error::Blob("truncated".into()))
    };
    if take(0, 8)? != magic {
        return Err(Error::Blob(format!(
            "bad magic, expected {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = u32::from_le_bytes(take(8, 4)?.try_into().unwrap());
    if version == 0 || version > max_version {
        return Err(Error::Blob(format!("unsupported version {version}")));
    }
    let meta_len = u32::from_le_bytes(take(12, 4)?.try_into().unwrap()) as usize;
    let meta: M = serde_json::from_slice(take(16, meta_len)?)?;
    let at = 16 + meta_len;
    let count = u64::from_le_bytes(take(at, 8)?.try_into().unwrap()) as usize;
    let body = take(at + 8, count.checked_mul(8).ok_or_else(|| Error::Blob("size overflow".into()))?)?;
    if bytes.len() != at + 8 + count * 8 {
        return Err(Error::Blob("trailing bytes".into()));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((version, meta, values))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_rejections() {
        let vals = vec![1.5, -0.0, f64::MIN_POSITIVE, 3.25];
        let bytes = write_blob(b"TESTBLOB", 1, &"meta", &vals).unwrap();
        let (v, m, back): (u32, String, Vec<f64>) = read_blob(&bytes, b"TESTBLOB", 1).unwrap();
        assert_eq!((v, m.as_str()), (1, "meta"));
        assert_eq!(
            back.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            vals.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        assert!(read_blob::<String>(&bytes, b"OTHERBLB", 1).is_err());
        assert!(read_blob::<String>(&bytes[..bytes.len() - 1], b"TESTBLOB", 1).is_err());
        let v2 = write_blob(b"TESTBLOB", 2, &"meta", &vals).unwrap();
        assert!(read_blob::<String>(&v2, b"TESTBLOB", 1).is_err());
    }
}
