//! Little-endian tensor wire format.
//!
//! Header: rank (u32), dims (u32 each), dtype tag (u32; 0 = f32, 1 = i8),
//! then the raw payload. Reused by feature files and the checkpoint
//! container.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const DTYPE_F32: u32 = 0;
pub const DTYPE_I8: u32 = 1;

/// One tensor read back from a stream.
#[derive(Debug, Clone, PartialEq)]
pub enum SerializedTensor {
    F32 { shape: Vec<usize>, data: Vec<f32> },
    I8 { shape: Vec<usize>, data: Vec<i8> },
}

impl SerializedTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            SerializedTensor::F32 { shape, .. } | SerializedTensor::I8 { shape, .. } => shape,
        }
    }

    pub fn into_tensor(self) -> Result<Tensor> {
        match self {
            SerializedTensor::F32 { shape, data } => Tensor::from_vec(shape, data),
            SerializedTensor::I8 { .. } => Err(Error::Input(
                "expected f32 tensor, found i8 payload".to_string(),
            )),
        }
    }
}

fn write_header(w: &mut impl Write, shape: &[usize], dtype: u32) -> Result<()> {
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    w.write_all(&dtype.to_le_bytes())?;
    Ok(())
}

pub fn write_tensor_f32(w: &mut impl Write, shape: &[usize], data: &[f32]) -> Result<()> {
    debug_assert_eq!(shape.iter().product::<usize>(), data.len());
    write_header(w, shape, DTYPE_F32)?;
    for &v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_tensor_i8(w: &mut impl Write, shape: &[usize], data: &[i8]) -> Result<()> {
    debug_assert_eq!(shape.iter().product::<usize>(), data.len());
    write_header(w, shape, DTYPE_I8)?;
    let bytes: Vec<u8> = data.iter().map(|&v| v as u8).collect();
    w.write_all(&bytes)?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn read_tensor(r: &mut impl Read) -> Result<SerializedTensor> {
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(Error::Input(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r)? as usize);
    }
    let numel: usize = shape.iter().product();
    match read_u32(r)? {
        DTYPE_F32 => {
            let mut bytes = vec![0u8; numel * 4];
            r.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            Ok(SerializedTensor::F32 { shape, data })
        }
        DTYPE_I8 => {
            let mut bytes = vec![0u8; numel];
            r.read_exact(&mut bytes)?;
            let data = bytes.iter().map(|&b| b as i8).collect();
            Ok(SerializedTensor::I8 { shape, data })
        }
        tag => Err(Error::Input(format!("unknown dtype tag {tag}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_round_trip() {
        let mut buf = Vec::new();
        write_tensor_f32(&mut buf, &[2, 3], &[1.0, -2.5, 0.0, 3.25, f32::MIN_POSITIVE, 9.0]).unwrap();
        let back = read_tensor(&mut buf.as_slice()).unwrap();
        match back {
            SerializedTensor::F32 { shape, data } => {
                assert_eq!(shape, vec![2, 3]);
                assert_eq!(data[1], -2.5);
                assert_eq!(data[4], f32::MIN_POSITIVE);
            }
            _ => panic!("wrong dtype"),
        }
    }

    #[test]
    fn i8_round_trip() {
        let mut buf = Vec::new();
        write_tensor_i8(&mut buf, &[4], &[-127, 0, 1, 127]).unwrap();
        match read_tensor(&mut buf.as_slice()).unwrap() {
            SerializedTensor::I8 { shape, data } => {
                assert_eq!(shape, vec![4]);
                assert_eq!(data, vec![-127, 0, 1, 127]);
            }
            _ => panic!("wrong dtype"),
        }
    }

    #[test]
    fn truncated_stream_errors() {
        let mut buf = Vec::new();
        write_tensor_f32(&mut buf, &[2, 2], &[1.0; 4]).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_tensor(&mut buf.as_slice()).is_err());
    }
}
