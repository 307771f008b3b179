//! Binary geodesic cache: `GKPD` magic, `u32` version, `u32` N, then N·N
//! little-endian `f32` distances in row-major order.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::{GeodesicMatrix, GeodesyError};
use crate::io::write_atomic;

pub const CACHE_MAGIC: [u8; 4] = *b"GKPD";
pub const CACHE_VERSION: u32 = 1;
const HEADER_LEN: usize = 12;

/// Encodes the matrix; distances are narrowed to `f32`.
pub fn encode(matrix: &GeodesicMatrix) -> Vec<u8> {
    let n = matrix.n();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * n * n);
    out.extend_from_slice(&CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    for &v in matrix.as_array().iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<GeodesicMatrix, GeodesyError> {
    let size_err = |expected: usize| GeodesyError::SizeMismatch {
        path: path.to_path_buf(),
        expected: expected as u64,
        found: bytes.len() as u64,
    };
    if bytes.len() < 4 {
        return Err(size_err(HEADER_LEN));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != CACHE_MAGIC {
        return Err(GeodesyError::BadMagic {
            path: path.to_path_buf(),
            found: magic,
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(size_err(HEADER_LEN));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CACHE_VERSION {
        return Err(GeodesyError::UnsupportedVersion {
            path: path.to_path_buf(),
            version,
        });
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let expected = HEADER_LEN + 4 * n * n;
    if bytes.len() != expected {
        return Err(size_err(expected));
    }
    let values: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(GeodesicMatrix::from_array(
        Array2::from_shape_vec((n, n), values).expect("length checked"),
    ))
}

pub fn cache_write(matrix: &GeodesicMatrix, path: &Path) -> Result<(), GeodesyError> {
    write_atomic(path, &encode(matrix)).map_err(|e| match e {
        crate::io::FormatError::Io { path, source } => GeodesyError::Io { path, source },
        other => unreachable!("write_atomic only fails with I/O errors: {other}"),
    })
}

pub fn cache_read(path: &Path) -> Result<GeodesicMatrix, GeodesyError> {
    let bytes = fs::read(path).map_err(|source| GeodesyError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(n: usize) -> GeodesicMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        // f32-representable values so the first round trip is already exact
        GeodesicMatrix::from_array(Array2::from_shape_fn((n, n), |_| rng.random::<f32>() as f64))
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.gkpd");
        let m = random_matrix(32);
        cache_write(&m, &path).unwrap();
        let back = cache_read(&path).unwrap();
        for (a, b) in m.as_array().iter().zip(back.as_array().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(encode(&back), fs::read(&path).unwrap());
    }

    #[test]
    fn f64_input_is_narrowed_once() {
        let m = GeodesicMatrix::from_array(Array2::from_elem((3, 3), 0.1f64));
        let once = decode(&encode(&m), Path::new("x")).unwrap();
        assert_eq!(once.get(0, 0), 0.1f32 as f64);
        assert_eq!(encode(&once), encode(&m));
    }

    #[test]
    fn truncated_file_is_size_mismatch() {
        let bytes = encode(&random_matrix(8));
        let err = decode(&bytes[..bytes.len() - 1], Path::new("x")).unwrap_err();
        assert!(matches!(err, GeodesyError::SizeMismatch { .. }));
        let err = decode(&bytes[..6], Path::new("x")).unwrap_err();
        assert!(matches!(err, GeodesyError::SizeMismatch { .. }));
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let mut bytes = encode(&random_matrix(4));
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes, Path::new("x")), Err(GeodesyError::BadMagic { .. })));
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&random_matrix(5));
        assert_eq!(&bytes[..4], b"GKPD");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 5);
        assert_eq!(bytes.len(), 12 + 4 * 25);
    }
}
