//! Dense f32 tensors and the `C2GT` binary container.
//!
//! Layout (all integers little-endian):
//!
//! | bytes | content                      |
//! |-------|------------------------------|
//! | 4     | magic `C2GT`                 |
//! | 4     | version, u32 = 1             |
//! | 1     | dtype, u8 = 1 (f32)          |
//! | 1     | ndim, u8                     |
//! | 8·n   | each dimension as u64        |
//! | 4·k   | row-major f32 payload        |

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"C2GT";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 1;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("format error: {0}")]
    Format(String),
    #[error("corrupt tensor: {0}")]
    Corrupt(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("invalid tensor: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        if shape.is_empty() || shape.len() > u8::MAX as usize {
            return Err(TensorError::Invalid(format!(
                "tensor needs between 1 and 255 dimensions, got {}",
                shape.len()
            )));
        }
        if shape.contains(&0) {
            return Err(TensorError::Invalid(format!("zero-sized dimension in {shape:?}")));
        }
        let expected =
            element_count(&shape).ok_or_else(|| TensorError::Invalid(format!("shape {shape:?} overflows")))?;
        if expected != data.len() {
            return Err(TensorError::Invalid(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self, TensorError> {
        let n = element_count(&shape).unwrap_or(0);
        Self::new(shape, vec![0.0; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Serialized size in bytes.
    pub fn encoded_len(&self) -> usize {
        header_len(self.shape.len()) + 4 * self.data.len()
    }
}

fn element_count(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

pub fn header_len(ndim: usize) -> usize {
    4 + 4 + 1 + 1 + 8 * ndim
}

/// Writes `t` and returns the number of bytes emitted.
pub fn write_tensor<W: Write>(t: &Tensor, sink: &mut W) -> Result<usize, TensorError> {
    let mut header = Vec::with_capacity(header_len(t.shape.len()));
    header.extend_from_slice(MAGIC);
    header.extend_from_slice(&VERSION.to_le_bytes());
    header.push(DTYPE_F32);
    header.push(t.shape.len() as u8);
    for &d in &t.shape {
        header.extend_from_slice(&(d as u64).to_le_bytes());
    }
    sink.write_all(&header)?;
    let mut payload = Vec::with_capacity(4 * t.data.len());
    for v in &t.data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    sink.write_all(&payload)?;
    Ok(header.len() + payload.len())
}

pub fn read_tensor<R: Read>(source: &mut R) -> Result<Tensor, TensorError> {
    let mut fixed = [0u8; 10];
    read_exact_or(source, &mut fixed, "header")?;
    if &fixed[0..4] != MAGIC {
        return Err(TensorError::Format(format!(
            "bad magic {:?}",
            String::from_utf8_lossy(&fixed[0..4])
        )));
    }
    let version = u32::from_le_bytes([fixed[4], fixed[5], fixed[6], fixed[7]]);
    if version != VERSION {
        return Err(TensorError::Unsupported(format!("version {version}")));
    }
    if fixed[8] != DTYPE_F32 {
        return Err(TensorError::Unsupported(format!("dtype code {}", fixed[8])));
    }
    let ndim = fixed[9] as usize;
    if ndim == 0 {
        return Err(TensorError::Format("zero-dimensional tensor".into()));
    }
    let mut dims = vec![0u8; 8 * ndim];
    read_exact_or(source, &mut dims, "shape")?;
    let shape: Vec<usize> = dims
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    if shape.contains(&0) {
        return Err(TensorError::Format(format!("zero-sized dimension in {shape:?}")));
    }
    let count = element_count(&shape)
        .filter(|n| n.checked_mul(4).is_some())
        .ok_or_else(|| TensorError::Format(format!("shape {shape:?} overflows")))?;

    let mut payload = Vec::new();
    source.read_to_end(&mut payload)?;
    if payload.len() != 4 * count {
        return Err(TensorError::Corrupt(format!(
            "shape {shape:?} needs {} payload bytes, found {}",
            4 * count,
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data)
}

fn read_exact_or<R: Read>(source: &mut R, buf: &mut [u8], what: &str) -> Result<(), TensorError> {
    source.read_exact(buf).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            TensorError::Corrupt(format!("truncated {what}"))
        } else {
            TensorError::Io(e)
        }
    })
}

pub fn save_tensor(t: &Tensor, path: &Path) -> Result<usize, TensorError> {
    let mut w = BufWriter::new(File::create(path)?);
    let n = write_tensor(t, &mut w)?;
    w.flush()?;
    Ok(n)
}

pub fn load_tensor(path: &Path) -> Result<Tensor, TensorError> {
    let mut r = BufReader::new(File::open(path)?);
    read_tensor(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn encode(t: &Tensor) -> Vec<u8> {
        let mut buf = Vec::new();
        let n = write_tensor(t, &mut buf).unwrap();
        assert_eq!(n, buf.len());
        buf
    }

    #[test]
    fn smallest_tensor_is_22_bytes() {
        let t = Tensor::new(vec![1], vec![0.0]).unwrap();
        let bytes = encode(&t);
        assert_eq!(bytes.len(), 22);
        assert_eq!(&bytes[0..4], b"C2GT");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(bytes[8], 1);
        assert_eq!(bytes[9], 1);
        assert_eq!(&bytes[10..18], &[1, 0, 0, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn two_by_three_round_trip() {
        let t = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.25, 1e-7, f32::MAX]).unwrap();
        let bytes = encode(&t);
        // 10 fixed bytes + 2 dims * 8 + 6 floats * 4
        assert_eq!(bytes.len(), 50);
        assert_eq!(read_tensor(&mut bytes.as_slice()).unwrap(), t);
    }

    #[test]
    fn feature_map_size() {
        let t = Tensor::zeros(vec![64, 64, 384]).unwrap();
        assert_eq!(header_len(3), 34);
        // 4 magic + 4 version + 1 dtype + 1 ndim + 3·8 dims, then the payload
        assert_eq!(t.encoded_len(), 34 + 64 * 64 * 384 * 4);
        assert_eq!(encode(&t).len(), t.encoded_len());
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = encode(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        bytes[0..4].copy_from_slice(b"XXXX");
        assert!(matches!(
            read_tensor(&mut bytes.as_slice()),
            Err(TensorError::Format(_))
        ));
    }

    #[test]
    fn truncated_payload_rejected() {
        let bytes = encode(&Tensor::zeros(vec![10]).unwrap());
        let cut = &bytes[..bytes.len() - 4];
        assert!(matches!(read_tensor(&mut &cut[..]), Err(TensorError::Corrupt(_))));
        let cut = &bytes[..12];
        assert!(matches!(read_tensor(&mut &cut[..]), Err(TensorError::Corrupt(_))));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = encode(&Tensor::zeros(vec![3]).unwrap());
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        assert!(matches!(
            read_tensor(&mut bytes.as_slice()),
            Err(TensorError::Corrupt(_))
        ));
    }

    #[test]
    fn unsupported_dtype_rejected() {
        let mut bytes = encode(&Tensor::zeros(vec![3]).unwrap());
        bytes[8] = 2;
        assert!(matches!(
            read_tensor(&mut bytes.as_slice()),
            Err(TensorError::Unsupported(_))
        ));
    }

    #[test]
    fn shape_data_mismatch() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
    }

    proptest! {
        #[test]
        fn write_read_identity(shape in prop::collection::vec(1usize..5, 1..4), seed in any::<u32>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n).map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32 * 7919) & 0x7f7f_ffff)).collect();
            let t = Tensor::new(shape, data).unwrap();
            let bytes = encode(&t);
            let back = read_tensor(&mut bytes.as_slice()).unwrap();
            prop_assert_eq!(&back, &t);
            prop_assert_eq!(encode(&back), bytes);
        }
    }
}
