//! EMB1 embedding file codec.
//!
//! ```text
//! offset  size  field
//! 0       8     magic  b"CLETEMB\0"
//! 8       4     version (u32 LE) = 1
//! 12      1     dtype (u8) = 0, 32-bit IEEE float
//! 13      4     dim (u32 LE)
//! 17      8     count (u64 LE)
//! 25      ...   count records: u64 id, u32 label_id, dim × f32
//! ```

use std::path::Path;

use super::EmbeddingSet;
use crate::error::{Error, Result};
use crate::fsutil;

pub const MAGIC: [u8; 8] = *b"CLETEMB\0";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;
pub const HEADER_LEN: usize = 25;

fn record_len(dim: usize) -> usize {
    8 + 4 + 4 * dim
}

/// Serializes a set into EMB1 bytes. Output depends only on the set contents.
pub fn encode(set: &EmbeddingSet) -> Result<Vec<u8>> {
    let dim = u32::try_from(set.dim())
        .map_err(|_| Error::HeaderOverflow(format!("dim {} exceeds u32", set.dim())))?;
    let count = u64::try_from(set.len())
        .map_err(|_| Error::HeaderOverflow(format!("count {} exceeds u64", set.len())))?;

    let mut buf = Vec::with_capacity(HEADER_LEN + set.len() * record_len(set.dim()));
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(DTYPE_F32);
    buf.extend_from_slice(&dim.to_le_bytes());
    buf.extend_from_slice(&count.to_le_bytes());
    for i in 0..set.len() {
        buf.extend_from_slice(&set.ids()[i].to_le_bytes());
        buf.extend_from_slice(&set.labels()[i].to_le_bytes());
        for x in set.vector(i) {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(buf)
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes(b.try_into().expect("4 bytes"))
}

fn le_u64(b: &[u8]) -> u64 {
    u64::from_le_bytes(b.try_into().expect("8 bytes"))
}

/// Parses EMB1 bytes. With `renormalize`, every vector is scaled to unit
/// length and zero vectors are rejected; otherwise vectors are kept verbatim.
pub fn decode(bytes: &[u8], renormalize: bool) -> Result<EmbeddingSet> {
    let prefix = &bytes[..bytes.len().min(MAGIC.len())];
    if prefix != &MAGIC[..prefix.len()] || prefix.is_empty() {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(&MAGIC).into_owned(),
            found: String::from_utf8_lossy(prefix).into_owned(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    let version = le_u32(&bytes[8..12]);
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let dtype = bytes[12];
    if dtype != DTYPE_F32 {
        return Err(Error::UnsupportedDtype(dtype));
    }
    let dim = le_u32(&bytes[13..17]) as usize;
    if dim == 0 {
        return Err(Error::InvalidArgument("EMB1 dim must be positive".into()));
    }
    let count = le_u64(&bytes[17..25]);

    let payload = (bytes.len() - HEADER_LEN) as u64;
    let expected = count.saturating_mul(record_len(dim) as u64);
    if payload < expected {
        return Err(Error::Truncated {
            expected: expected.saturating_add(HEADER_LEN as u64),
            actual: bytes.len() as u64,
        });
    }
    if payload > expected {
        return Err(Error::TrailingBytes(payload - expected));
    }

    let count = count as usize;
    let mut ids = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    let mut vectors = Vec::with_capacity(count * dim);
    let rec = record_len(dim);
    for r in 0..count {
        let base = HEADER_LEN + r * rec;
        ids.push(le_u64(&bytes[base..base + 8]));
        labels.push(le_u32(&bytes[base + 8..base + 12]));
        let floats = &bytes[base + 12..base + rec];
        vectors.extend(
            floats
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))),
        );
    }

    let mut set = EmbeddingSet::new(dim, ids, labels, vectors)?;
    if renormalize {
        set.normalize()?;
    }
    Ok(set)
}

pub fn write_embedding_set(set: &EmbeddingSet, path: &Path) -> Result<()> {
    let bytes = encode(set)?;
    fsutil::write_atomic(path, &bytes)
}

pub fn read_embedding_set(path: &Path, renormalize: bool) -> Result<EmbeddingSet> {
    let bytes = fsutil::read_file(path)?;
    decode(&bytes, renormalize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_set() -> EmbeddingSet {
        EmbeddingSet::new(
            2,
            vec![7, 3],
            vec![1, 0],
            vec![0.6, 0.8, 1.0, 0.0],
        )
        .unwrap()
    }

    #[test]
    fn empty_set_is_header_only() {
        let set = EmbeddingSet::new(4, vec![], vec![], vec![]).unwrap();
        let bytes = encode(&set).unwrap();
        assert_eq!(bytes.len(), 25);
        assert_eq!(&bytes[..8], b"CLETEMB\0");
        let back = decode(&bytes, true).unwrap();
        assert_eq!(back.dim(), 4);
        assert!(back.is_empty());
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&sample_set()).unwrap();
        assert_eq!(le_u32(&bytes[8..12]), 1);
        assert_eq!(bytes[12], 0);
        assert_eq!(le_u32(&bytes[13..17]), 2);
        assert_eq!(le_u64(&bytes[17..25]), 2);
        assert_eq!(le_u64(&bytes[25..33]), 7);
        assert_eq!(le_u32(&bytes[33..37]), 1);
        assert_eq!(f32::from_le_bytes(bytes[37..41].try_into().unwrap()), 0.6);
        assert_eq!(bytes.len(), 25 + 2 * (12 + 8));
    }

    #[test]
    fn bad_magic() {
        assert!(matches!(decode(b"XEMB", true), Err(Error::BadMagic { .. })));
        let mut bytes = encode(&sample_set()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes, true), Err(Error::BadMagic { .. })));
        assert!(matches!(decode(b"", true), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn unsupported_version_and_dtype() {
        let mut bytes = encode(&sample_set()).unwrap();
        bytes[8] = 2;
        assert!(matches!(decode(&bytes, true), Err(Error::UnsupportedVersion(2))));
        let mut bytes = encode(&sample_set()).unwrap();
        bytes[12] = 1;
        assert!(matches!(decode(&bytes, true), Err(Error::UnsupportedDtype(1))));
    }

    #[test]
    fn truncated_payload() {
        let bytes = encode(&sample_set()).unwrap();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(decode(cut, true), Err(Error::Truncated { .. })));
        assert!(matches!(decode(&bytes[..20], true), Err(Error::Truncated { .. })));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode(&long, true), Err(Error::TrailingBytes(1))));
    }

    #[test]
    fn renormalizes_three_four_five() {
        let set = EmbeddingSet::new(2, vec![1], vec![0], vec![3.0, 4.0]).unwrap();
        let bytes = encode(&set).unwrap();
        let back = decode(&bytes, true).unwrap();
        assert_eq!(back.vector(0), &[0.6, 0.8]);
        let raw = decode(&bytes, false).unwrap();
        assert_eq!(raw.vector(0), &[3.0, 4.0]);
    }

    #[test]
    fn zero_vector_rejected_when_renormalizing() {
        let set = EmbeddingSet::new(2, vec![9], vec![0], vec![0.0, 0.0]).unwrap();
        let bytes = encode(&set).unwrap();
        assert!(matches!(decode(&bytes, true), Err(Error::ZeroNorm(9))));
        assert!(decode(&bytes, false).is_ok());
    }

    #[test]
    fn duplicate_ids_rejected_on_read() {
        // Hand-assemble a file with a repeated id.
        let mut bytes = encode(&sample_set()).unwrap();
        bytes[45..53].copy_from_slice(&7u64.to_le_bytes());
        assert!(matches!(decode(&bytes, true), Err(Error::DuplicateId(7))));
    }

    #[test]
    fn file_round_trip_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.emb");
        let b = dir.path().join("b.emb");
        write_embedding_set(&sample_set(), &a).unwrap();
        write_embedding_set(&sample_set(), &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(read_embedding_set(&a, true).unwrap(), sample_set());
    }

    #[test]
    fn unwritable_path() {
        let err = write_embedding_set(&sample_set(), Path::new("/no/such/dir/x.emb"));
        assert!(matches!(err, Err(Error::Io { .. })));
    }

    proptest! {
        #[test]
        fn round_trip_unit_vectors_bitwise(
            dim in 1usize..12,
            raw in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 12), 0..8),
        ) {
            let mut ids = Vec::new();
            let mut labels = Vec::new();
            let mut vectors = Vec::new();
            for (i, row) in raw.iter().enumerate() {
                let mut v: Vec<f64> = row[..dim].to_vec();
                v[0] += 2.0; // keep away from zero
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                vectors.extend(v.iter().map(|x| (x / n) as f32));
                ids.push(i as u64 * 31 + 5);
                labels.push(i as u32 % 3);
            }
            let set = EmbeddingSet::new(dim, ids, labels, vectors).unwrap();
            let back = decode(&encode(&set).unwrap(), true).unwrap();
            prop_assert_eq!(back, set);
        }
    }
}
