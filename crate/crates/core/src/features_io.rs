//! Binary feature files.
//!
//! Layout, all little-endian:
//!
//! | offset | size | field                      |
//! |--------|------|----------------------------|
//! | 0      | 4    | magic `b"HSWB"`            |
//! | 4      | 4    | format version `u32` = 1   |
//! | 8      | 8    | count `u64`                |
//! | 16     | 4    | dim `u32`                  |
//! | 20     | 4    | reserved `u32` = 0         |
//! | 24     | …    | `count·dim` `f64`, row-major |
//! | …      | …    | `count` `u32` labels       |

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::AllocationType;
use crate::embedding::ClassLabel;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: [u8; 4] = *b"HSWB";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;

/// Encodes rows and labels into an HSWB block.
pub fn encode_block<S: Scalar, R: AsRef<[S]>>(rows: &[R], labels: &[ClassLabel]) -> Result<Vec<u8>> {
    if rows.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} rows but {} labels",
            rows.len(),
            labels.len()
        )));
    }
    let dim = rows.first().map_or(0, |r| r.as_ref().len());
    if let Some(r) = rows.iter().find(|r| r.as_ref().len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: r.as_ref().len(),
        });
    }
    let dim32 = u32::try_from(dim).map_err(|_| Error::ShapeMismatch("dimension exceeds u32".into()))?;
    let mut buf = Vec::with_capacity(HEADER_LEN + rows.len() * (dim * 8 + 4));
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(rows.len() as u64).to_le_bytes());
    buf.extend_from_slice(&dim32.to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes());
    for r in rows {
        for x in r.as_ref() {
            buf.extend_from_slice(&x.to_f64_lossy().to_le_bytes());
        }
    }
    for l in labels {
        buf.extend_from_slice(&l.0.to_le_bytes());
    }
    Ok(buf)
}

/// Decodes one HSWB block from the front of `bytes`, returning the rows,
/// labels and the number of bytes consumed.
pub fn decode_block<S: Scalar>(bytes: &[u8]) -> Result<(Vec<Vec<S>>, Vec<ClassLabel>, usize)> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::TruncatedFile(format!(
            "header needs {HEADER_LEN} bytes, file has {}",
            bytes.len()
        )));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(Error::VersionUnsupported(version));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let dim = u32_at(16) as usize;
    let count = usize::try_from(count).map_err(|_| Error::TruncatedFile("count overflows".into()))?;
    let payload = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(count.checked_mul(4)?))
        .ok_or_else(|| Error::TruncatedFile("size overflows".into()))?;
    let total = HEADER_LEN + payload;
    if bytes.len() < total {
        return Err(Error::TruncatedFile(format!(
            "expected {total} bytes, found {}",
            bytes.len()
        )));
    }
    let mut off = HEADER_LEN;
    let mut rows = Vec::with_capacity(count);
    for _ in 0..count {
        let row = (0..dim)
            .map(|j| {
                let o = off + j * 8;
                S::lit(f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap()))
            })
            .collect();
        off += dim * 8;
        rows.push(row);
    }
    let labels = (0..count).map(|i| ClassLabel(u32_at(off + i * 4))).collect();
    Ok((rows, labels, total))
}

/// Writes `features` and `labels` to `path`. Any row type works, so raw
/// (unnormalized) inputs can be stored in the same format.
pub fn write_features<S: Scalar, R: AsRef<[S]>>(
    path: impl AsRef<Path>,
    features: &[R],
    labels: &[ClassLabel],
) -> Result<()> {
    let buf = encode_block(features, labels)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    f.flush()?;
    Ok(())
}

/// Reads a feature file written by [`write_features`].
pub fn read_features<S: Scalar>(path: impl AsRef<Path>) -> Result<(Vec<Vec<S>>, Vec<ClassLabel>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let (rows, labels, _) = decode_block(&bytes)?;
    Ok((rows, labels))
}

/// JSON manifest written next to generated datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub allocation: AllocationType,
    pub counts: DatasetCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetCounts {
    pub old_train: usize,
    pub new_train: usize,
    pub queries: usize,
    pub gallery: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn byte_layout() {
        let rows = vec![vec![1.0f64, 2.0, 3.0], vec![4.0, 5.0, 6.0]];
        let labels = vec![ClassLabel(7), ClassLabel(9)];
        let buf = encode_block(&rows, &labels).unwrap();
        assert_eq!(buf.len(), 24 + 2 * 3 * 8 + 2 * 4);
        assert_eq!(&buf[..4], b"HSWB");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..16], &2u64.to_le_bytes());
        assert_eq!(&buf[16..20], &3u32.to_le_bytes());
        assert_eq!(&buf[20..24], &[0, 0, 0, 0]);
        assert_eq!(&buf[24..32], &1.0f64.to_le_bytes());
        assert_eq!(&buf[72..76], &7u32.to_le_bytes());
    }

    #[test]
    fn empty_file_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.hswb");
        write_features::<f64, Vec<f64>>(&path, &[], &[]).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), 24);
        let (rows, labels) = read_features::<f64>(&path).unwrap();
        assert!(rows.is_empty() && labels.is_empty());
    }

    #[test]
    fn file_size_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.hswb");
        let rows = vec![vec![0.1f64, -0.2, 1e-300], vec![f64::MAX, 0.0, -0.0]];
        let labels = vec![ClassLabel(0), ClassLabel(u32::MAX)];
        write_features(&path, &rows, &labels).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), 24 + 48 + 8);
        let (r, l) = read_features::<f64>(&path).unwrap();
        assert_eq!(r, rows);
        assert_eq!(l, labels);
    }

    #[test]
    fn decode_errors() {
        let good = encode_block(&[vec![1.0f64, 2.0]], &[ClassLabel(0)]).unwrap();
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode_block::<f64>(&bad), Err(Error::BadMagic)));
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(decode_block::<f64>(&bad), Err(Error::VersionUnsupported(2))));
        assert!(matches!(
            decode_block::<f64>(&good[..good.len() - 1]),
            Err(Error::TruncatedFile(_))
        ));
        assert!(matches!(decode_block::<f64>(&good[..10]), Err(Error::TruncatedFile(_))));
        assert!(matches!(
            read_features::<f64>("/nonexistent/path.hswb"),
            Err(Error::Io(_))
        ));
    }

    #[test]
    fn mismatched_inputs_rejected() {
        assert!(encode_block(&[vec![1.0f64]], &[]).is_err());
        assert!(matches!(
            encode_block(&[vec![1.0f64], vec![1.0, 2.0]], &[ClassLabel(0), ClassLabel(1)]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(
            rows in prop::collection::vec(prop::collection::vec(any::<f64>().prop_filter("finite", |x| x.is_finite()), 3), 0..6),
        ) {
            let labels: Vec<ClassLabel> = (0..rows.len() as u32).map(ClassLabel).collect();
            let buf = encode_block(&rows, &labels).unwrap();
            let (r, l, used) = decode_block::<f64>(&buf).unwrap();
            prop_assert_eq!(used, buf.len());
            prop_assert_eq!(r, rows);
            prop_assert_eq!(l, labels);
        }
    }
}
