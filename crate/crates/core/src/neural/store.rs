//! Flat named-tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"NTSR"
//! version u32 = 1
//! count   u32
//! count × { name_len u32, name utf-8, rank u32, dims u64 × rank, values f64 × Π dims }
//! ```
//!
//! Values are stored as raw IEEE-754 bits so a round trip is bit-exact.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::numeric::Tensor;

const MAGIC: &[u8; 4] = b"NTSR";
const VERSION: u32 = 1;

pub fn write_named_tensors<W: Write, S: AsRef<str>>(w: &mut W, tensors: &[(S, &Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let name = name.as_ref().as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for d in t.shape() {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        for v in t.values() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(format!("named-tensor file: {}", msg.into()))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_named_tensors<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(format_err("bad magic"));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let count = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| format_err("name is not utf-8"))?;
        let rank = read_u32(r)? as usize;
        let dims = (0..rank)
            .map(|_| read_u64(r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            values.push(f64::from_bits(read_u64(r)?));
        }
        out.push((name, Tensor::new(dims, values)?));
    }
    Ok(out)
}
