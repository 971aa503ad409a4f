//! Little-endian primitives shared by the binary file formats.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub(crate) fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub(crate) fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub(crate) fn write_string(w: &mut impl Write, s: &str) -> Result<()> {
    let bytes = s.as_bytes();
    write_u32(w, bytes.len() as u32)?;
    w.write_all(bytes)?;
    Ok(())
}

pub(crate) fn read_string(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > 1 << 20 {
        return Err(Error::Checkpoint(format!("unreasonable string length {len}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint("invalid utf-8 in file".into()))
}

/// Byte width of the scalar type, doubling as the on-disk dtype tag.
pub(crate) fn dtype_of<S: Scalar>() -> u32 {
    std::mem::size_of::<S>() as u32
}

/// Write scalars at their native precision (f32 as 4 bytes, f64 as 8).
pub(crate) fn write_scalars<'a, S: Scalar>(
    w: &mut impl Write,
    values: impl Iterator<Item = &'a S>,
) -> Result<()> {
    let wide = dtype_of::<S>() == 8;
    for v in values {
        let real = v.to_real();
        if wide {
            w.write_all(&real.to_le_bytes())?;
        } else {
            w.write_all(&(real as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Read `count` scalars previously written with [`write_scalars`] at the same
/// dtype. Mixing precisions across save/load is refused by the callers.
pub(crate) fn read_scalars<S: Scalar>(r: &mut impl Read, count: usize) -> Result<Vec<S>> {
    let wide = dtype_of::<S>() == 8;
    let mut out = Vec::with_capacity(count);
    if wide {
        let mut buf = [0u8; 8];
        for _ in 0..count {
            r.read_exact(&mut buf)?;
            out.push(S::from_real(f64::from_le_bytes(buf)));
        }
    } else {
        let mut buf = [0u8; 4];
        for _ in 0..count {
            r.read_exact(&mut buf)?;
            out.push(S::from_real(f32::from_le_bytes(buf) as f64));
        }
    }
    Ok(out)
}
