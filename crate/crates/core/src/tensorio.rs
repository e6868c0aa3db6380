//! `FMAT` tensor files and seeded synthetic data.
//!
//! File layout (all integers little-endian):
//!
//! | offset | size | field                                  |
//! |--------|------|----------------------------------------|
//! | 0      | 4    | magic `b"FMAT"`                         |
//! | 4      | 4    | version, `u32` = 1                      |
//! | 8      | 4    | dtype, `u32`: 0 = float32, 1 = float64 |
//! | 12     | 8    | rows, `u64`                             |
//! | 20     | 8    | cols, `u64`                             |
//! | 28     | ...  | `rows * cols` row-major values          |

use std::fs;
use std::io::Write;
use std::path::Path;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::FeatureMatrix;
use crate::Real;

pub const MAGIC: &[u8; 4] = b"FMAT";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    /// The dtype matching the build's [`Real`].
    pub fn native() -> Self {
        if crate::DOUBLE_PRECISION {
            Dtype::F64
        } else {
            Dtype::F32
        }
    }
}

pub fn encode_tensor(x: &FeatureMatrix) -> Vec<u8> {
    let dtype = Dtype::native();
    let mut buf = Vec::with_capacity(HEADER_LEN + x.as_slice().len() * dtype.size());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(dtype as u32).to_le_bytes());
    buf.extend_from_slice(&(x.rows() as u64).to_le_bytes());
    buf.extend_from_slice(&(x.cols() as u64).to_le_bytes());
    for v in x.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn write_tensor(path: impl AsRef<Path>, x: &FeatureMatrix) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_tensor(x))?;
    Ok(())
}

/// Reads an `FMAT` file. Files of either dtype are accepted and converted to
/// the build's [`Real`].
pub fn read_tensor(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    decode_tensor(&bytes).map_err(|reason| Error::Format {
        path: path.to_path_buf(),
        reason,
    })
}

pub fn decode_tensor(bytes: &[u8]) -> std::result::Result<FeatureMatrix, String> {
    if bytes.len() < HEADER_LEN {
        return Err(format!("{} bytes is shorter than the header", bytes.len()));
    }
    if &bytes[0..4] != MAGIC {
        return Err("bad magic".into());
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let dtype = match u32_at(8) {
        0 => Dtype::F32,
        1 => Dtype::F64,
        other => return Err(format!("unknown dtype {other}")),
    };
    let (rows, cols) = (u64_at(12), u64_at(20));
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(dtype.size() as u64))
        .ok_or("payload size overflows")?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() as u64 != expected {
        return Err(format!("payload is {} bytes, header implies {expected}", payload.len()));
    }
    let values: Vec<Real> = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as Real)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as Real)
            .collect(),
    };
    FeatureMatrix::new(rows as usize, cols as usize, values).map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Distribution {
    StdNormal,
    Uniform01,
}

/// Deterministic matrix from `seed`.
///
/// The stream is ChaCha8 seeded with `seed_from_u64(seed)`. Uniforms take the
/// top 53 bits of each `u64` as `[0, 1)`. Normals use the Box-Muller cosine
/// branch on two uniforms per value: `sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`.
/// Everything is computed in f64 and rounded to [`Real`] last.
pub fn gen_random(rows: usize, cols: usize, seed: u64, dist: Distribution) -> FeatureMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut unit = move || (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    let data: Vec<Real> = (0..rows * cols)
        .map(|_| match dist {
            Distribution::Uniform01 => unit() as Real,
            Distribution::StdNormal => {
                let (u1, u2) = (unit(), unit());
                ((-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()) as Real
            }
        })
        .collect();
    FeatureMatrix::from_vec_unchecked(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.fmat");
        let x = gen_random(5, 7, 3, Distribution::StdNormal);
        write_tensor(&path, &x).unwrap();
        let y = read_tensor(&path).unwrap();
        assert_eq!(x.rows(), y.rows());
        for (a, b) in x.as_slice().iter().zip(y.as_slice()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn file_size_matches_header_arithmetic() {
        let x = FeatureMatrix::zeros(2, 3);
        let expected = if crate::DOUBLE_PRECISION { 76 } else { 52 };
        assert_eq!(encode_tensor(&x).len(), expected);
    }

    #[test]
    fn truncated_or_corrupt_files_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.fmat");
        let bytes = encode_tensor(&gen_random(3, 3, 1, Distribution::Uniform01));
        fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(read_tensor(&path), Err(Error::Format { .. })));

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_tensor(&bad).unwrap_err().contains("magic"));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(decode_tensor(&bad).unwrap_err().contains("version"));
        let mut bad = bytes;
        bad[8] = 7;
        assert!(decode_tensor(&bad).unwrap_err().contains("dtype"));
        assert!(decode_tensor(b"FMA").is_err());
    }

    #[test]
    fn reads_float32_files() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&1u64.to_le_bytes());
        bytes.extend_from_slice(&2u64.to_le_bytes());
        bytes.extend_from_slice(&1.5f32.to_le_bytes());
        bytes.extend_from_slice(&(-2.0f32).to_le_bytes());
        let x = decode_tensor(&bytes).unwrap();
        assert_eq!(x.as_slice(), &[1.5, -2.0]);
    }

    #[test]
    fn generator_is_deterministic_and_seed_sensitive() {
        let a = gen_random(4, 4, 42, Distribution::StdNormal);
        assert_eq!(a, gen_random(4, 4, 42, Distribution::StdNormal));
        assert_ne!(a, gen_random(4, 4, 43, Distribution::StdNormal));
        let u = gen_random(100, 10, 7, Distribution::Uniform01);
        assert!(u.as_slice().iter().all(|&x| (0.0..1.0).contains(&x)));
    }

    #[test]
    fn normal_moments() {
        let x = gen_random(100_000, 1, 2024, Distribution::StdNormal);
        let n = x.as_slice().len() as f64;
        let mean = x.as_slice().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = x.as_slice().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }
}
