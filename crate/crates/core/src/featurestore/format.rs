//! Binary feature and label files.
//!
//! Both layouts are little-endian with a 20-byte header:
//!
//! ```text
//! offset  size  FeatureFile            LabelFile
//! 0       4     magic "AFTF"           magic "AFTL"
//! 4       4     version (u32) = 1      version (u32) = 1
//! 8       8     n_rows (u64)           n_rows (u64)
//! 16      4     n_cols (u32)           n_classes (u32)
//! 20      ...   n_rows·n_cols f32      n_rows u32 class indices
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const FEATURE_MAGIC: &[u8; 4] = b"AFTF";
pub const LABEL_MAGIC: &[u8; 4] = b"AFTL";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 20;

/// Class indices plus the number of classes they range over.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labels {
    pub classes: Vec<usize>,
    pub n_classes: usize,
}

impl Labels {
    pub fn new(classes: Vec<usize>, n_classes: usize) -> Result<Self> {
        if let Some((i, &c)) = classes.iter().enumerate().find(|(_, &c)| c >= n_classes) {
            return Err(Error::Input(format!(
                "label {c} at row {i} is out of range for {n_classes} classes"
            )));
        }
        Ok(Self { classes, n_classes })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.classes[i]).collect()
    }
}

fn header(magic: &[u8; 4], n_rows: u64, n_cols: u32) -> [u8; HEADER_LEN] {
    let mut h = [0u8; HEADER_LEN];
    h[0..4].copy_from_slice(magic);
    h[4..8].copy_from_slice(&FORMAT_VERSION.to_le_bytes());
    h[8..16].copy_from_slice(&n_rows.to_le_bytes());
    h[16..20].copy_from_slice(&n_cols.to_le_bytes());
    h
}

pub fn encode_features(m: &Matrix) -> Result<Vec<u8>> {
    let n_cols = u32::try_from(m.cols())
        .map_err(|_| Error::Usage(format!("{} columns exceed the u32 header field", m.cols())))?;
    let mut bytes = Vec::with_capacity(HEADER_LEN + 4 * m.len());
    bytes.extend_from_slice(&header(FEATURE_MAGIC, m.rows() as u64, n_cols));
    for (k, &v) in m.data().iter().enumerate() {
        let narrowed = v as f32;
        if !narrowed.is_finite() {
            return Err(Error::Input(format!(
                "feature value {v} at row {}, col {} is not representable as a finite f32",
                k / m.cols().max(1),
                k % m.cols().max(1)
            )));
        }
        bytes.extend_from_slice(&narrowed.to_le_bytes());
    }
    Ok(bytes)
}

pub fn encode_labels(labels: &Labels) -> Result<Vec<u8>> {
    let n_classes = u32::try_from(labels.n_classes)
        .map_err(|_| Error::Usage("class count exceeds u32".into()))?;
    let mut bytes = Vec::with_capacity(HEADER_LEN + 4 * labels.len());
    bytes.extend_from_slice(&header(LABEL_MAGIC, labels.len() as u64, n_classes));
    for &c in &labels.classes {
        bytes.extend_from_slice(&(c as u32).to_le_bytes());
    }
    Ok(bytes)
}

struct Header {
    n_rows: u64,
    width: u32,
}

fn parse_header(path: &Path, bytes: &[u8], magic: &[u8; 4]) -> Result<Header> {
    let fail = |offset: u64, msg: String| Error::Format {
        path: path.to_path_buf(),
        offset,
        msg,
    };
    if bytes.len() < HEADER_LEN {
        return Err(fail(
            bytes.len() as u64,
            format!("truncated header ({} of {HEADER_LEN} bytes)", bytes.len()),
        ));
    }
    if &bytes[0..4] != magic {
        return Err(fail(
            0,
            format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[0..4]),
                String::from_utf8_lossy(magic)
            ),
        ));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(fail(4, format!("unsupported version {version}")));
    }
    Ok(Header {
        n_rows: u64::from_le_bytes(bytes[8..16].try_into().unwrap()),
        width: u32::from_le_bytes(bytes[16..20].try_into().unwrap()),
    })
}

fn check_payload_len(path: &Path, bytes: &[u8], values: u64) -> Result<usize> {
    let expected = values
        .checked_mul(4)
        .and_then(|p| p.checked_add(HEADER_LEN as u64))
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            offset: 8,
            msg: "header dimensions overflow".into(),
        })?;
    let actual = bytes.len() as u64;
    if actual < expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: actual,
            msg: format!("truncated payload: file has {actual} bytes, header implies {expected}"),
        });
    }
    if actual > expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: expected,
            msg: format!("{} trailing bytes after payload", actual - expected),
        });
    }
    Ok(values as usize)
}

pub fn decode_features(path: &Path, bytes: &[u8]) -> Result<Matrix> {
    let h = parse_header(path, bytes, FEATURE_MAGIC)?;
    let count = check_payload_len(path, bytes, h.n_rows.saturating_mul(h.width as u64))?;
    let mut data = Vec::with_capacity(count);
    for (k, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: (HEADER_LEN + 4 * k) as u64,
                msg: format!("non-finite value {v}"),
            });
        }
        data.push(v as f64);
    }
    Matrix::from_vec(h.n_rows as usize, h.width as usize, data)
}

pub fn decode_labels(path: &Path, bytes: &[u8]) -> Result<Labels> {
    let h = parse_header(path, bytes, LABEL_MAGIC)?;
    let count = check_payload_len(path, bytes, h.n_rows)?;
    let mut classes = Vec::with_capacity(count);
    for (k, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
        let c = u32::from_le_bytes(chunk.try_into().unwrap());
        if c >= h.width {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: (HEADER_LEN + 4 * k) as u64,
                msg: format!("class index {c} >= n_classes {}", h.width),
            });
        }
        classes.push(c as usize);
    }
    Ok(Labels {
        classes,
        n_classes: h.width as usize,
    })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_features(m: &Matrix, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_features(m)?)
}

pub fn read_features(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(path, &bytes)
}

pub fn write_labels(labels: &Labels, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_labels(labels)?)
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Labels> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_labels(path, &bytes)
}

/// Hex SHA-256 of a file's bytes.
pub fn file_checksum(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn single_value_round_trip() {
        let m = Matrix::from_rows(&[[42.0]]);
        let bytes = encode_features(&m).unwrap();
        assert_eq!(bytes.len(), 24);
        assert_eq!(decode_features(p(), &bytes).unwrap(), m);
    }

    #[test]
    fn empty_matrix_is_header_only() {
        let m = Matrix::zeros(0, 5);
        let bytes = encode_features(&m).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN);
        let back = decode_features(p(), &bytes).unwrap();
        assert_eq!(back.shape(), (0, 5));
    }

    #[test]
    fn random_payload_is_bit_identical() {
        let mut rng = Rng::new(1);
        let m = rng.normal_matrix(100, 64);
        let bytes = encode_features(&m).unwrap();
        assert_eq!(bytes.len(), 20 + 4 * 100 * 64);
        let back = decode_features(p(), &bytes).unwrap();
        assert_eq!(encode_features(&back).unwrap(), bytes);
        for (a, b) in m.data().iter().zip(back.data()) {
            assert_eq!((*a as f32).to_bits(), (*b as f32).to_bits());
        }
    }

    #[test]
    fn header_fields_are_little_endian() {
        let bytes = encode_features(&Matrix::zeros(3, 2)).unwrap();
        assert_eq!(&bytes[0..4], b"AFTF");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..16], &[3, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&bytes[16..20], &[2, 0, 0, 0]);
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let mut bytes = encode_features(&Matrix::zeros(1, 1)).unwrap();
        bytes[0] = b'X';
        match decode_features(p(), &bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }
        assert!(decode_labels(p(), &encode_features(&Matrix::zeros(1, 1)).unwrap()).is_err());
    }

    #[test]
    fn truncated_payload_reports_file_length() {
        let bytes = encode_features(&Matrix::zeros(2, 2)).unwrap();
        match decode_features(p(), &bytes[..30]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 30),
            other => panic!("{other:?}"),
        }
        match decode_features(p(), &bytes[..10]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 10),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn non_finite_payload_reports_value_offset() {
        let mut bytes = encode_features(&Matrix::zeros(2, 2)).unwrap();
        bytes[28..32].copy_from_slice(&f32::NAN.to_le_bytes());
        match decode_features(p(), &bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 28),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn writer_rejects_non_finite() {
        let mut m = Matrix::zeros(1, 2);
        m[(0, 1)] = f64::INFINITY;
        assert!(encode_features(&m).is_err());
        m[(0, 1)] = 1e300;
        assert!(encode_features(&m).is_err());
    }

    #[test]
    fn unsupported_version() {
        let mut bytes = encode_features(&Matrix::zeros(1, 1)).unwrap();
        bytes[4] = 9;
        match decode_features(p(), &bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn labels_round_trip_and_range_check() {
        let labels = Labels::new(vec![0, 2, 1, 2], 3).unwrap();
        let bytes = encode_labels(&labels).unwrap();
        assert_eq!(bytes.len(), 20 + 16);
        assert_eq!(decode_labels(p(), &bytes).unwrap(), labels);

        let mut bad = bytes.clone();
        bad[24..28].copy_from_slice(&3u32.to_le_bytes());
        match decode_labels(p(), &bad) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 24),
            other => panic!("{other:?}"),
        }
        assert!(Labels::new(vec![5], 3).is_err());
    }
}
