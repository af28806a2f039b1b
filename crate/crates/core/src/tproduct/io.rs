use std::io::{Read, Write};

use super::Tensor3;
use crate::error::{FuseError, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"FUS3";
pub const TENSOR_VERSION: u32 = 1;

/// Refuse absurd headers before allocating.
const MAX_ELEMENTS: u64 = 1 << 32;

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

impl Tensor3 {
    /// Writes the `FUS3` binary form: magic, u32 version, u64 rows/cols/tubes,
    /// then every value as little-endian f64 in storage order.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        w.write_all(&TENSOR_VERSION.to_le_bytes())?;
        for dim in [self.rows(), self.cols(), self.tubes()] {
            w.write_all(&(dim as u64).to_le_bytes())?;
        }
        for v in self.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Tensor3> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != TENSOR_MAGIC {
            return Err(FuseError::format("tensor", format!("bad magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != TENSOR_VERSION {
            return Err(FuseError::format(
                "tensor",
                format!("unsupported version {version}"),
            ));
        }
        let rows = read_u64(r)?;
        let cols = read_u64(r)?;
        let tubes = read_u64(r)?;
        let count = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(tubes))
            .filter(|&n| n <= MAX_ELEMENTS)
            .ok_or_else(|| {
                FuseError::format("tensor", format!("implausible shape {rows}x{cols}x{tubes}"))
            })?;
        let mut data = Vec::with_capacity(count as usize);
        for _ in 0..count {
            data.push(read_f64(r)?);
        }
        Tensor3::new(rows as usize, cols as usize, tubes as usize, data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 8 * self.data().len());
        self.write_to(&mut out)
            .expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Tensor3> {
        let mut cursor = bytes;
        let t = Tensor3::read_from(&mut cursor)?;
        if !cursor.is_empty() {
            return Err(FuseError::format(
                "tensor",
                format!("{} trailing bytes", cursor.len()),
            ));
        }
        Ok(t)
    }
}
