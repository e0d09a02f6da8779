//! AT1 binary tensor records.
//!
//! Record layout, all integers little-endian:
//!
//! ```text
//! magic   4 bytes  41 54 31 00  ("AT1\0")
//! dtype   u8       1 = f32, 2 = u8
//! ndim    u8
//! pad     2 bytes  zero
//! dims    ndim x u64
//! payload row-major scalars (f32 LE or raw u8)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const AT1_MAGIC: [u8; 4] = *b"AT1\0";

const DTYPE_F32: u8 = 1;
const DTYPE_U8: u8 = 2;
const MAX_NDIM: u8 = 8;

/// Payload of one AT1 record.
#[derive(Debug, Clone, PartialEq)]
pub enum At1Data {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

/// One decoded AT1 tensor record.
#[derive(Debug, Clone, PartialEq)]
pub struct At1Tensor {
    pub shape: Vec<usize>,
    pub data: At1Data,
}

impl At1Tensor {
    pub fn from_tensor(t: &Tensor<f32>) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: At1Data::F32(t.data().to_vec()),
        }
    }

    pub fn from_u8(shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} implies {} bytes, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data: At1Data::U8(data),
        })
    }

    pub fn into_tensor(self) -> Result<Tensor<f32>> {
        match self.data {
            At1Data::F32(v) => Tensor::new(self.shape, v),
            At1Data::U8(_) => Err(Error::UnsupportedFormat(
                "expected f32 tensor record, found u8".into(),
            )),
        }
    }

    pub fn into_u8(self) -> Result<(Vec<usize>, Vec<u8>)> {
        match self.data {
            At1Data::U8(v) => Ok((self.shape, v)),
            At1Data::F32(_) => Err(Error::UnsupportedFormat(
                "expected u8 tensor record, found f32".into(),
            )),
        }
    }
}

pub fn write_at1<W: Write>(w: &mut W, t: &At1Tensor) -> Result<()> {
    let n: usize = t.shape.iter().product();
    let (dtype, len) = match &t.data {
        At1Data::F32(v) => (DTYPE_F32, v.len()),
        At1Data::U8(v) => (DTYPE_U8, v.len()),
    };
    if n != len {
        return Err(Error::ShapeMismatch(format!(
            "record shape {:?} does not match payload length {}",
            t.shape, len
        )));
    }
    if t.shape.len() > MAX_NDIM as usize {
        return Err(Error::UnsupportedFormat(format!(
            "ndim {} exceeds limit {}",
            t.shape.len(),
            MAX_NDIM
        )));
    }
    w.write_all(&AT1_MAGIC)?;
    w.write_all(&[dtype, t.shape.len() as u8, 0, 0])?;
    for &d in &t.shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    match &t.data {
        At1Data::F32(v) => {
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        At1Data::U8(v) => w.write_all(v)?,
    }
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated(format!("while reading {what}"))
        } else {
            Error::Io(e)
        }
    })
}

pub fn read_at1<R: Read>(r: &mut R) -> Result<At1Tensor> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "AT1 magic")?;
    if magic != AT1_MAGIC {
        return Err(Error::BadMagic {
            expected: AT1_MAGIC,
            found: magic,
        });
    }
    let mut head = [0u8; 4];
    read_exact(r, &mut head, "AT1 header")?;
    let (dtype, ndim) = (head[0], head[1]);
    if ndim > MAX_NDIM {
        return Err(Error::UnsupportedFormat(format!(
            "ndim {ndim} exceeds limit {MAX_NDIM}"
        )));
    }
    let mut shape = Vec::with_capacity(ndim as usize);
    for _ in 0..ndim {
        let mut d = [0u8; 8];
        read_exact(r, &mut d, "AT1 dims")?;
        shape.push(u64::from_le_bytes(d) as usize);
    }
    let n: usize = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(
        || Error::UnsupportedFormat(format!("dimension overflow in shape {shape:?}")),
    )?;
    match dtype {
        DTYPE_F32 => {
            let mut buf = vec![0u8; n.checked_mul(4).ok_or_else(|| {
                Error::UnsupportedFormat("payload size overflow".into())
            })?];
            read_exact(r, &mut buf, "AT1 f32 payload")?;
            let data = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Ok(At1Tensor {
                shape,
                data: At1Data::F32(data),
            })
        }
        DTYPE_U8 => {
            let mut buf = vec![0u8; n];
            read_exact(r, &mut buf, "AT1 u8 payload")?;
            Ok(At1Tensor {
                shape,
                data: At1Data::U8(buf),
            })
        }
        other => Err(Error::UnsupportedFormat(format!("unknown dtype {other}"))),
    }
}

pub fn write_at1_file(path: &Path, t: &At1Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_at1(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn read_at1_file(path: &Path) -> Result<At1Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    read_at1(&mut r)
}
