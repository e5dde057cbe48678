//! Portable on-disk tensor format.
//!
//! Layout: magic bytes `PTNSR1` (6 bytes), little-endian `u32` rank,
//! `rank` little-endian `u32` dims, then the row-major `f32` payload.
//! Round-trips are bit-exact, which is what makes the format usable for
//! cross-language fixtures and checkpoint weights alike.

use ndarray::{Array2, Array3, ArrayD, IxDyn};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 6] = b"PTNSR1";

/// Ranks accepted by the raw container (checkpoints store rank-1 biases and
/// rank-4 conv kernels; imagery uses rank 2 and 3).
const MAX_RANK: usize = 4;

#[derive(Debug, Error)]
pub enum TensorIoError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
}

/// A rank-2 or rank-3 tensor as read from or written to disk.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    D2(Array2<f32>),
    D3(Array3<f32>),
}

impl TensorData {
    pub fn rank(&self) -> usize {
        match self {
            TensorData::D2(_) => 2,
            TensorData::D3(_) => 3,
        }
    }

    pub fn into_d2(self) -> Option<Array2<f32>> {
        match self {
            TensorData::D2(a) => Some(a),
            _ => None,
        }
    }

    pub fn into_d3(self) -> Option<Array3<f32>> {
        match self {
            TensorData::D3(a) => Some(a),
            _ => None,
        }
    }
}

/// Write a rank-2 or rank-3 array.
pub fn write_tensor(path: &Path, array: &TensorData) -> Result<(), TensorIoError> {
    match array {
        TensorData::D2(a) => {
            let dyn_view = a.view().into_dyn();
            write_raw(path, &dyn_view.to_owned())
        }
        TensorData::D3(a) => {
            let dyn_view = a.view().into_dyn();
            write_raw(path, &dyn_view.to_owned())
        }
    }
}

/// Read a rank-2 or rank-3 array. Files of any other rank are a format error.
pub fn read_tensor(path: &Path) -> Result<TensorData, TensorIoError> {
    let raw = read_raw(path)?;
    match raw.ndim() {
        2 => {
            let a = raw
                .into_dimensionality::<ndarray::Ix2>()
                .expect("rank checked");
            Ok(TensorData::D2(a))
        }
        3 => {
            let a = raw
                .into_dimensionality::<ndarray::Ix3>()
                .expect("rank checked");
            Ok(TensorData::D3(a))
        }
        r => Err(TensorIoError::Format(format!(
            "expected rank 2 or 3, file has rank {r}"
        ))),
    }
}

pub fn write_tensor2(path: &Path, array: &Array2<f32>) -> Result<(), TensorIoError> {
    write_raw(path, &array.view().into_dyn().to_owned())
}

pub fn write_tensor3(path: &Path, array: &Array3<f32>) -> Result<(), TensorIoError> {
    write_raw(path, &array.view().into_dyn().to_owned())
}

/// Write an array of any supported rank (1..=4). Used by checkpoints; the
/// public [`write_tensor`] wrapper restricts ranks to 2..=3 for imagery.
pub fn write_raw(path: &Path, array: &ArrayD<f32>) -> Result<(), TensorIoError> {
    let rank = array.ndim();
    if rank == 0 || rank > MAX_RANK {
        return Err(TensorIoError::Format(format!(
            "unsupported rank {rank} (supported: 1..={MAX_RANK})"
        )));
    }
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&(rank as u32).to_le_bytes())?;
    for &d in array.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    // Row-major payload; go through a contiguous view so the byte order is
    // well-defined regardless of the array's memory layout.
    let contiguous = array.as_standard_layout();
    for &v in contiguous.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Read an array of any supported rank (1..=4).
pub fn read_raw(path: &Path) -> Result<ArrayD<f32>, TensorIoError> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TensorIoError::Format(format!(
            "bad magic bytes {:?}",
            magic
        )));
    }

    let rank = read_u32(&mut r)? as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(TensorIoError::Format(format!("bad rank {rank}")));
    }

    let mut dims = Vec::with_capacity(rank);
    let mut len: usize = 1;
    for _ in 0..rank {
        let d = read_u32(&mut r)? as usize;
        if d == 0 {
            return Err(TensorIoError::Format("zero dimension".into()));
        }
        len = len
            .checked_mul(d)
            .ok_or_else(|| TensorIoError::Format("dims overflow".into()))?;
        dims.push(d);
    }

    let mut payload = vec![0f32; len];
    let mut buf = [0u8; 4];
    for v in payload.iter_mut() {
        // A short payload is an I/O error (truncated file), not a format error.
        r.read_exact(&mut buf)?;
        *v = f32::from_le_bytes(buf);
    }

    ArrayD::from_shape_vec(IxDyn(&dims), payload)
        .map_err(|e| TensorIoError::Format(format!("shape error: {e}")))
}

fn read_u32(r: &mut impl Read) -> Result<u32, TensorIoError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn roundtrip_identity_2x2() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ptnsr");
        let a = arr2(&[[0.0f32, 1.0], [2.0, 3.0]]);
        write_tensor(&path, &TensorData::D2(a.clone())).unwrap();
        let b = read_tensor(&path).unwrap().into_d2().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ptnsr");
        std::fs::write(&path, b"NOTPTNSR-and-some-garbage").unwrap();
        match read_tensor(&path) {
            Err(TensorIoError::Format(_)) => {}
            other => panic!("expected format error, got {:?}", other),
        }
    }

    #[test]
    fn truncated_payload_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ptnsr");
        let a = arr2(&[[0.0f32, 1.0], [2.0, 3.0]]);
        write_tensor(&path, &TensorData::D2(a)).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        match read_tensor(&path) {
            Err(TensorIoError::Io(_)) => {}
            other => panic!("expected i/o error, got {:?}", other),
        }
    }

    #[test]
    fn roundtrip_seeded_320x320_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.ptnsr");
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let a = Array2::from_shape_fn((320, 320), |_| rng.gen_range(-100.0f32..100.0));
        write_tensor(&path, &TensorData::D2(a.clone())).unwrap();
        let b = read_tensor(&path).unwrap().into_d2().unwrap();
        let max_abs = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert_eq!(max_abs, 0.0);
    }

    #[test]
    fn rank4_file_rejected_by_tensor_reader() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.ptnsr");
        let w = ArrayD::from_elem(IxDyn(&[2, 2, 3, 3]), 1.0f32);
        write_raw(&path, &w).unwrap();
        assert!(matches!(
            read_tensor(&path),
            Err(TensorIoError::Format(_))
        ));
        // ...but the raw reader accepts it bit-exactly.
        assert_eq!(read_raw(&path).unwrap(), w);
    }
}
