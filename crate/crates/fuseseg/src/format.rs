//! Binary tensor (`FTNS`) and checkpoint (`FCKP`) formats.
//!
//! Both are little-endian. A tensor file is
//!
//! ```text
//! "FTNS" | u32 version = 1 | u32 rank | rank × u64 dims | u8 dtype | values
//! ```
//!
//! with dtype 1 = f64 and 2 = f32 and values in row-major order. A checkpoint
//! is
//!
//! ```text
//! "FCKP" | u32 version = 1 | 8-byte spec hash | u64 scalar parameter count |
//! u32 tensor count | tensor count × (u32 name length | UTF-8 name | FTNS blob)
//! ```

use std::fs;
use std::path::Path;

use fuseseg_core::model::{Model, ModelSpec, Parameters};
use fuseseg_core::Tensor;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"FTNS";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F64 = 1,
    F32 = 2,
}

impl Dtype {
    fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(Dtype::F64),
            2 => Ok(Dtype::F32),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
        }
    }
}

pub fn encode_tensor(t: &Tensor, dtype: Dtype, out: &mut Vec<u8>) {
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.push(dtype as u8);
    out.reserve(t.len() * dtype.width());
    match dtype {
        Dtype::F64 => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        Dtype::F32 => t
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
    }
}

/// Sequential little-endian reader over a byte slice.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated while reading {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let m = self.take(4, "magic")?;
        if m != expected {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(m),
                String::from_utf8_lossy(expected)
            )));
        }
        let v = self.u32("version")?;
        if v != VERSION {
            return Err(Error::Format(format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn read_tensor(r: &mut Reader<'_>) -> Result<Tensor> {
    r.magic(TENSOR_MAGIC)?;
    let rank = r.u32("rank")? as usize;
    if rank > 16 {
        return Err(Error::Format(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(usize::try_from(r.u64("dims")?).map_err(|_| Error::Format("dimension overflows usize".into()))?);
    }
    let dtype = Dtype::from_code(r.u8("dtype")?)?;
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("dims {shape:?} overflow")))?;
    let bytes = count
        .checked_mul(dtype.width())
        .ok_or_else(|| Error::Format(format!("dims {shape:?} overflow")))?;
    let payload = r.take(bytes, "payload")?;
    let data = match dtype {
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
    };
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

/// Decodes exactly one tensor; trailing bytes are an error.
pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(bytes);
    let t = read_tensor(&mut r)?;
    if !r.done() {
        return Err(Error::Format(format!(
            "{} trailing bytes after tensor payload",
            bytes.len() - r.pos
        )));
    }
    Ok(t)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut buf = Vec::new();
    encode_tensor(t, Dtype::F64, &mut buf);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// First eight bytes of SHA-256 over the spec's canonical form.
pub fn spec_hash(spec: &ModelSpec) -> [u8; 8] {
    let digest = Sha256::digest(spec.canonical().as_bytes());
    digest[..8].try_into().expect("8 bytes")
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Named tensors tagged with the spec they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub spec_hash: [u8; 8],
    pub param_count: u64,
    pub tensors: Vec<(String, Tensor)>,
}

impl Container {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.spec_hash);
        out.extend_from_slice(&self.param_count.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            encode_tensor(t, Dtype::F64, &mut out);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        let spec_hash = r.take(8, "spec hash")?.try_into().expect("8 bytes");
        let param_count = r.u64("parameter count")?;
        let n = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_owned();
            tensors.push((name, read_tensor(&mut r)?));
        }
        if !r.done() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(Container {
            spec_hash,
            param_count,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Fails unless the container was written for `spec`.
    pub fn check_spec(&self, spec: &ModelSpec) -> Result<()> {
        let expected = spec_hash(spec);
        if expected != self.spec_hash {
            return Err(Error::SpecMismatch {
                expected: format!("{} {}", hex(&expected), spec.canonical()),
                found: hex(&self.spec_hash),
            });
        }
        Ok(())
    }
}

pub fn model_container(model: &Model) -> Container {
    Container {
        spec_hash: spec_hash(model.spec()),
        param_count: model.count_params(),
        tensors: model
            .params()
            .iter()
            .map(|(n, t)| (n.to_owned(), t.clone()))
            .collect(),
    }
}

pub fn model_from_container(spec: &ModelSpec, c: Container) -> Result<Model> {
    c.check_spec(spec)?;
    let mut params = Parameters::new();
    for (name, t) in c.tensors {
        params.push(name, t);
    }
    if params.scalar_count() != c.param_count {
        return Err(Error::Format(format!(
            "header declares {} parameters, tensors hold {}",
            c.param_count,
            params.scalar_count()
        )));
    }
    Ok(Model::from_parameters(spec, params)?)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    model_container(model).write(path)
}

pub fn load_checkpoint(spec: &ModelSpec, path: &Path) -> Result<Model> {
    model_from_container(spec, Container::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new([2, 1], vec![1.5, -2.0]).unwrap();
        let mut buf = Vec::new();
        encode_tensor(&t, Dtype::F64, &mut buf);
        let mut expected = b"FTNS".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&2u64.to_le_bytes());
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.push(1);
        expected.extend_from_slice(&1.5f64.to_le_bytes());
        expected.extend_from_slice(&(-2.0f64).to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn f32_payload_decodes_to_f64() {
        let t = Tensor::new([3], vec![0.5, 1.25, -3.0]).unwrap();
        let mut buf = Vec::new();
        encode_tensor(&t, Dtype::F32, &mut buf);
        assert_eq!(buf.len(), 4 + 4 + 4 + 8 + 1 + 12);
        assert_eq!(decode_tensor(&buf).unwrap(), t);
    }

    #[test]
    fn corrupted_inputs_are_format_errors() {
        let t = Tensor::new([2, 2], vec![1.0; 4]).unwrap();
        let mut buf = Vec::new();
        encode_tensor(&t, Dtype::F64, &mut buf);

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(decode_tensor(&bad), Err(Error::Format(_))));

        // dims tampered upward: payload too short
        let mut bad = buf.clone();
        bad[12] = 3;
        assert!(matches!(decode_tensor(&bad), Err(Error::Format(_))));

        // dims tampered downward: trailing bytes
        let mut bad = buf.clone();
        bad[12] = 1;
        assert!(matches!(decode_tensor(&bad), Err(Error::Format(_))));

        let mut bad = buf.clone();
        bad[28] = 9;
        assert!(matches!(decode_tensor(&bad), Err(Error::Format(_))));

        assert!(matches!(decode_tensor(&buf[..buf.len() - 1]), Err(Error::Format(_))));
    }
}
