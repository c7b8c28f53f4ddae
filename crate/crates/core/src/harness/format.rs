//! Binary tensor files (`DTNS`) and named-tensor checkpoints (`DACK`).
//!
//! All integers and payloads are little-endian. A checkpoint ends with the
//! CRC-32 of every byte before it.

use std::path::Path;

use num_complex::{Complex32, Complex64};

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"DTNS";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DACK";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    Real32 = 0,
    Real64 = 1,
    Complex64 = 2,
    Complex128 = 3,
}

impl DType {
    fn from_code(code: u8, offset: usize) -> Result<Self> {
        Ok(match code {
            0 => Self::Real32,
            1 => Self::Real64,
            2 => Self::Complex64,
            3 => Self::Complex128,
            c => return Err(Error::format("tensor", offset, format!("unknown dtype code {c}"))),
        })
    }

    pub fn size(self) -> usize {
        match self {
            Self::Real32 => 4,
            Self::Real64 | Self::Complex64 => 8,
            Self::Complex128 => 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    Real32(Vec<f32>),
    Real64(Vec<f64>),
    Complex64(Vec<Complex32>),
    Complex128(Vec<Complex64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            Self::Real32(_) => DType::Real32,
            Self::Real64(_) => DType::Real64,
            Self::Complex64(_) => DType::Complex64,
            Self::Complex128(_) => DType::Complex128,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Real32(v) => v.len(),
            Self::Real64(v) => v.len(),
            Self::Complex64(v) => v.len(),
            Self::Complex128(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A tensor as stored on disk: row-major data plus its dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl StoredTensor {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::shape("StoredTensor", &dims, &[data.len()]));
        }
        if dims.len() > u8::MAX as usize {
            return Err(Error::data("tensor", "rank above 255"));
        }
        Ok(Self { dims, data })
    }

    pub fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(TENSOR_MAGIC);
        out.push(VERSION);
        out.push(self.data.dtype() as u8);
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            TensorData::Real32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::Real64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::Complex64(v) => v.iter().for_each(|x| {
                out.extend_from_slice(&x.re.to_le_bytes());
                out.extend_from_slice(&x.im.to_le_bytes());
            }),
            TensorData::Complex128(v) => v.iter().for_each(|x| {
                out.extend_from_slice(&x.re.to_le_bytes());
                out.extend_from_slice(&x.im.to_le_bytes());
            }),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode(&mut out);
        out
    }

    /// Decodes one tensor and returns it with the number of bytes consumed.
    pub fn decode(buf: &[u8], base: usize) -> Result<(Self, usize)> {
        let mut r = Reader { buf, pos: 0, base, kind: "tensor" };
        r.magic(TENSOR_MAGIC)?;
        r.version()?;
        let at = r.offset();
        let dtype = DType::from_code(r.u8()?, at)?;
        let rank = r.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let at = r.offset();
            let d = usize::try_from(r.u64()?).map_err(|_| Error::format("tensor", at, "dimension overflows usize"))?;
            dims.push(d);
        }
        let at = r.offset();
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(dtype.size()))
            .ok_or_else(|| Error::format("tensor", at, "payload size overflows"))?;
        let payload = r.take(n)?;
        let data = match dtype {
            DType::Real32 => TensorData::Real32(payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::Real64 => TensorData::Real64(payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::Complex64 => TensorData::Complex64(
                payload
                    .chunks_exact(8)
                    .map(|c| Complex32::new(f32::from_le_bytes(c[..4].try_into().unwrap()), f32::from_le_bytes(c[4..].try_into().unwrap())))
                    .collect(),
            ),
            DType::Complex128 => TensorData::Complex128(
                payload
                    .chunks_exact(16)
                    .map(|c| Complex64::new(f64::from_le_bytes(c[..8].try_into().unwrap()), f64::from_le_bytes(c[8..].try_into().unwrap())))
                    .collect(),
            ),
        };
        Ok((Self { dims, data }, r.pos))
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let (t, used) = Self::decode(buf, 0)?;
        if used != buf.len() {
            return Err(Error::format("tensor", used, format!("{} trailing bytes", buf.len() - used)));
        }
        Ok(t)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    base: usize,
    kind: &'static str,
}

impl<'a> Reader<'a> {
    fn offset(&self) -> usize {
        self.base + self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let left = self.buf.len() - self.pos;
        if n > left {
            return Err(Error::format(
                self.kind,
                self.offset(),
                format!("truncated: expected {n} more bytes, found {left}"),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let at = self.offset();
        let got = self.take(4)?;
        if got != want {
            return Err(Error::format(self.kind, at, format!("bad magic {got:?}")));
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        let at = self.offset();
        match self.u8()? {
            VERSION => Ok(()),
            v => Err(Error::format(self.kind, at, format!("unsupported version {v}"))),
        }
    }
}

pub fn save_tensor(path: impl AsRef<Path>, t: &StoredTensor) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, t.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<StoredTensor> {
    let path = path.as_ref();
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    StoredTensor::from_bytes(&buf)
}

/// Ordered named tensors with unique names.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: Vec<(String, StoredTensor)>,
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, t: StoredTensor) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::data("checkpoint", format!("duplicate tensor `{name}`")));
        }
        self.tensors.push((name, t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.data.len()).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            t.encode(&mut out);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 4 {
            return Err(Error::format("checkpoint", 0, format!("truncated: {} bytes", buf.len())));
        }
        let body = &buf[..buf.len() - 4];
        let stored = u32::from_le_bytes(buf[buf.len() - 4..].try_into().unwrap());
        let crc = crc32fast::hash(body);
        if crc != stored {
            return Err(Error::format(
                "checkpoint",
                body.len(),
                format!("CRC mismatch: stored {stored:08x}, computed {crc:08x}"),
            ));
        }
        let mut r = Reader { buf: body, pos: 0, base: 0, kind: "checkpoint" };
        r.magic(CHECKPOINT_MAGIC)?;
        r.version()?;
        let count = r.u32()?;
        let mut ck = Checkpoint::default();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let at = r.offset();
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::format("checkpoint", at, "tensor name is not UTF-8"))?
                .to_string();
            let at = r.offset();
            let (t, used) = StoredTensor::decode(&body[r.pos..], at)?;
            r.pos += used;
            ck.push(name, t).map_err(|_| Error::format("checkpoint", at, "duplicate tensor name"))?;
        }
        if r.pos != body.len() {
            return Err(Error::format("checkpoint", r.pos, "trailing bytes before CRC"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}
