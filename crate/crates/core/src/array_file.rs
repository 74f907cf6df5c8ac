//! Self-describing binary array files.
//!
//! Used for the detector/flow adapter handoff (`<clip>/<frame_idx>.det`,
//! `<clip>/<frame_idx>.flow`) and as the building block of event archives.
//!
//! Layout, all integers little-endian:
//!
//! | offset | size     | field                                  |
//! |--------|----------|----------------------------------------|
//! | 0      | 4        | magic `VCCA`                           |
//! | 4      | 1        | version (`1`)                          |
//! | 5      | 1        | dtype: `1` = u8, `2` = f32, `3` = f64  |
//! | 6      | 1        | ndim                                   |
//! | 7      | 1        | reserved (`0`)                         |
//! | 8      | 4 * ndim | dimensions as u32                      |
//! | ...    | ...      | row-major element data                 |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};

use crate::error::{Result, VccError};

pub const MAGIC: &[u8; 4] = b"VCCA";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    U8 = 1,
    F32 = 2,
    F64 = 3,
}

impl DType {
    fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::U8),
            2 => Some(DType::F32),
            3 => Some(DType::F64),
            _ => None,
        }
    }
}

/// An array read back from disk, tagged with its stored element type.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyArray {
    U8(ArrayD<u8>),
    F32(ArrayD<f32>),
    F64(ArrayD<f64>),
}

impl AnyArray {
    pub fn dtype(&self) -> DType {
        match self {
            AnyArray::U8(_) => DType::U8,
            AnyArray::F32(_) => DType::F32,
            AnyArray::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyArray::U8(a) => a.shape(),
            AnyArray::F32(a) => a.shape(),
            AnyArray::F64(a) => a.shape(),
        }
    }

    /// Converts any stored dtype to f32.
    pub fn into_f32(self) -> ArrayD<f32> {
        match self {
            AnyArray::U8(a) => a.mapv(f32::from),
            AnyArray::F32(a) => a,
            AnyArray::F64(a) => a.mapv(|v| v as f32),
        }
    }
}

fn write_header<W: Write>(w: &mut W, dtype: DType, shape: &[usize]) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_u8(VERSION)?;
    w.write_u8(dtype as u8)?;
    w.write_u8(shape.len() as u8)?;
    w.write_u8(0)?;
    for &d in shape {
        w.write_u32::<LittleEndian>(d as u32)?;
    }
    Ok(())
}

pub fn write_u8<W: Write>(w: &mut W, a: &ArrayD<u8>) -> std::io::Result<()> {
    write_header(w, DType::U8, a.shape())?;
    for &v in a.iter() {
        w.write_u8(v)?;
    }
    Ok(())
}

pub fn write_f32<W: Write>(w: &mut W, a: &ArrayD<f32>) -> std::io::Result<()> {
    write_header(w, DType::F32, a.shape())?;
    for &v in a.iter() {
        w.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

pub fn write_f64<W: Write>(w: &mut W, a: &ArrayD<f64>) -> std::io::Result<()> {
    write_header(w, DType::F64, a.shape())?;
    for &v in a.iter() {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

/// Reads one array record from a stream. The reason string of a format
/// failure is returned as `Err(String)` so callers can attach a path.
pub fn read_any<R: Read>(r: &mut R) -> std::result::Result<AnyArray, String> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| e.to_string())?;
    if &magic != MAGIC {
        return Err(format!("bad magic {magic:?}"));
    }
    let version = r.read_u8().map_err(|e| e.to_string())?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let code = r.read_u8().map_err(|e| e.to_string())?;
    let dtype = DType::from_code(code).ok_or_else(|| format!("unknown dtype code {code}"))?;
    let ndim = r.read_u8().map_err(|e| e.to_string())? as usize;
    r.read_u8().map_err(|e| e.to_string())?;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.read_u32::<LittleEndian>().map_err(|e| e.to_string())? as usize);
    }
    let n: usize = shape.iter().product();
    let err = |e: std::io::Error| format!("truncated data: {e}");
    Ok(match dtype {
        DType::U8 => {
            let mut buf = vec![0u8; n];
            r.read_exact(&mut buf).map_err(err)?;
            AnyArray::U8(ArrayD::from_shape_vec(IxDyn(&shape), buf).map_err(|e| e.to_string())?)
        }
        DType::F32 => {
            let mut buf = vec![0f32; n];
            r.read_f32_into::<LittleEndian>(&mut buf).map_err(err)?;
            AnyArray::F32(ArrayD::from_shape_vec(IxDyn(&shape), buf).map_err(|e| e.to_string())?)
        }
        DType::F64 => {
            let mut buf = vec![0f64; n];
            r.read_f64_into::<LittleEndian>(&mut buf).map_err(err)?;
            AnyArray::F64(ArrayD::from_shape_vec(IxDyn(&shape), buf).map_err(|e| e.to_string())?)
        }
    })
}

pub fn save(path: &Path, array: &AnyArray) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| VccError::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| VccError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res = match array {
        AnyArray::U8(a) => write_u8(&mut w, a),
        AnyArray::F32(a) => write_f32(&mut w, a),
        AnyArray::F64(a) => write_f64(&mut w, a),
    };
    res.and_then(|_| w.flush()).map_err(|e| VccError::io(path, e))
}

pub fn load(path: &Path) -> Result<AnyArray> {
    let file = File::open(path).map_err(|e| VccError::io(path, e))?;
    read_any(&mut BufReader::new(file)).map_err(|reason| VccError::format(path, reason))
}
