//! Binary tensor dump: magic `TNSR`, `u32` rank, `u32` dims, then the
//! little-endian payload at the element width of `F`.

use std::io::{Read, Write};

use super::{Real, Tensor};
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"TNSR";

pub fn write_tensor<F: Real, W: Write>(out: &mut W, t: &Tensor<F>) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + 4 * t.rank() + F::BYTES * t.numel());
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<F: Real, R: Read>(input: &mut R) -> Result<Tensor<F>> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::Format(format!("bad tensor magic {magic:?}")));
    }
    let rank = read_u32(input)? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::Format(format!("implausible tensor rank {rank}")));
    }
    let shape = (0..rank)
        .map(|_| read_u32(input).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    let mut payload = vec![0u8; n * F::BYTES];
    input.read_exact(&mut payload)?;
    let data = payload.chunks_exact(F::BYTES).map(F::read_le).collect();
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub(crate) fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
