//! Weight checkpoint file.
//!
//! Layout (little-endian): magic `TRAJATTN`, format version `u32`, a
//! length-prefixed UTF-8 metadata block, parameter count `u32`, then per
//! parameter: name length `u32`, name bytes, rank `u32`, dims `u64` each,
//! and the fp64 values in row-major order.

use std::io::{Read, Write};

use super::{ParamStore, Tensor};
use crate::binio::{BinReader, BinWriter, FormatError};

pub const MAGIC: &str = "TRAJATTN";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(out: W, metadata: &str, params: &ParamStore) -> Result<(), FormatError> {
    let mut w = BinWriter::new(out);
    w.bytes(MAGIC.as_bytes())?;
    w.u32(VERSION)?;
    w.str(metadata)?;
    w.u32(params.len() as u32)?;
    for (name, t) in params.iter() {
        w.str(name)?;
        w.u32(t.rank() as u32)?;
        for &d in t.shape() {
            w.u64(d as u64)?;
        }
        w.f64s(t.data())?;
    }
    w.finish()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(input: R) -> Result<(String, ParamStore), FormatError> {
    let mut r = BinReader::new(input, "checkpoint");
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let metadata = r.str()?;
    let count = r.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name = r.str()?;
        let rank = r.u32()? as usize;
        if rank == 0 || rank > 8 {
            return Err(r.malformed(format!("parameter `{name}` has rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let numel = match numel {
            Some(n) if n > 0 && n < (1 << 28) => n,
            _ => return Err(r.malformed(format!("parameter `{name}` has shape {shape:?}"))),
        };
        let data = r.f64s(numel)?;
        let tensor = Tensor::new(shape, data).map_err(|e| r.malformed(e.to_string()))?;
        params.insert(name, tensor);
    }
    r.expect_end()?;
    Ok((metadata, params))
}
