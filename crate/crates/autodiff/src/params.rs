//! Named parameter storage and the `SCNN1` weight file.
//!
//! File layout: the five magic bytes `SCNN1`, then one record per parameter
//! until end of file. A record is `u32` name length, UTF-8 name, `u32` rank,
//! `rank` × `u64` dims, then the values as little-endian `f64`.

use std::io::{Read, Write};

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::kernels::ConvSpec;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"SCNN1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn tensor(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn tensor_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Add a convolution's weight (Glorot-uniform) and zero bias.
    /// Returns `(weight_id, bias_id)`.
    pub fn push_conv(&mut self, name: &str, spec: &ConvSpec, rng: &mut impl Rng) -> (usize, usize) {
        let bound = (6.0 / (spec.fan_in() + spec.fan_out()) as f64).sqrt();
        let shape = spec.weight_shape();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        let w = self.push(format!("{name}.weight"), Tensor::from_vec(&shape, data).expect("sized"));
        let b = self.push(format!("{name}.bias"), Tensor::zeros(&spec.bias_shape()));
        (w, b)
    }

    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        out.write_all(MAGIC)?;
        for (name, t) in self.names.iter().zip(&self.tensors) {
            out.write_all(&(name.len() as u32).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            out.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                out.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.len() * 8);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            out.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(mut input: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(TensorError::Format("missing SCNN1 magic".into()));
        }
        let mut cur = Cursor {
            bytes: &bytes,
            pos: MAGIC.len(),
        };
        let mut set = ParamSet::new();
        while cur.pos < bytes.len() {
            let name_len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| TensorError::Format("parameter name is not UTF-8".into()))?;
            let rank = cur.u32()? as usize;
            let shape = (0..rank).map(|_| cur.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = cur.take(n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            set.push(name, Tensor::from_vec(&shape, data)?);
        }
        Ok(set)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| TensorError::Format(format!("truncated record at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
