//! Binary container of named arrays.
//!
//! ```text
//! "CMDT" | version u16 | count u32 | count x entry
//! entry: name_len u16 | name | dtype u8 | rank u8 | rank x dim u64 | payload
//! ```
//!
//! All integers and payloads are little-endian. Dtype tags: f32 = 0,
//! f64 = 1, i64 = 2.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{ParamTree, Tensor};
use crate::scalar::{DType, Scalar};

pub const MAGIC: &[u8; 4] = b"CMDT";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I64(Vec<i64>),
}

impl ArrayData {
    pub fn dtype(&self) -> DType {
        match self {
            ArrayData::F32(_) => DType::F32,
            ArrayData::F64(_) => DType::F64,
            ArrayData::I64(_) => DType::I64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::I64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn new(name: impl Into<String>, dims: Vec<u64>, data: ArrayData) -> Result<Self> {
        let name = name.into();
        let count: u64 = dims.iter().product();
        if count != data.len() as u64 {
            return Err(Error::Shape(format!("array `{name}`: dims {dims:?} but {} values", data.len())));
        }
        if name.len() > u16::MAX as usize || dims.len() > u8::MAX as usize {
            return Err(Error::Shape(format!("array `{name}` name or rank too long")));
        }
        Ok(Self { name, dims, data })
    }

    pub fn from_tensor<S: Scalar>(name: impl Into<String>, t: &Tensor<S>) -> Self {
        let dims = vec![t.rows() as u64, t.cols() as u64];
        let data = match S::DTYPE {
            DType::F32 => ArrayData::F32(t.data().iter().map(|v| v.as_f64() as f32).collect()),
            _ => ArrayData::F64(t.data().iter().map(|v| v.as_f64()).collect()),
        };
        Self { name: name.into(), dims, data }
    }

    pub fn ints(name: impl Into<String>, values: Vec<i64>) -> Self {
        Self { name: name.into(), dims: vec![values.len() as u64], data: ArrayData::I64(values) }
    }

    /// Rank-2 float array as a tensor (rank 1 becomes a single row).
    pub fn to_tensor<S: Scalar>(&self) -> Result<Tensor<S>> {
        let (r, c) = match self.dims.as_slice() {
            [n] => (1, *n as usize),
            [r, c] => (*r as usize, *c as usize),
            d => return Err(Error::Shape(format!("array `{}` has rank {}", self.name, d.len()))),
        };
        let values: Vec<S> = match &self.data {
            ArrayData::F32(v) => v.iter().map(|&x| S::lit(x as f64)).collect(),
            ArrayData::F64(v) => v.iter().map(|&x| S::lit(x)).collect(),
            ArrayData::I64(_) => return Err(Error::Shape(format!("array `{}` is integer", self.name))),
        };
        Tensor::from_vec(r, c, values)
    }
}

pub fn encode(arrays: &[NamedArray]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(arrays.len()).map_err(|_| Error::Shape("too many arrays".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for a in arrays {
        let count: u64 = a.dims.iter().product();
        if count != a.data.len() as u64 {
            return Err(Error::Shape(format!("array `{}`: dims {:?} but {} values", a.name, a.dims, a.data.len())));
        }
        out.extend_from_slice(&(a.name.len() as u16).to_le_bytes());
        out.extend_from_slice(a.name.as_bytes());
        out.push(a.data.dtype().tag());
        out.push(a.dims.len() as u8);
        for d in &a.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &a.data {
            ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let left = self.buf.len() - self.pos;
        if n > left {
            return Err(Error::Parse {
                offset: self.pos,
                msg: format!("truncated {what}: expected {n} bytes, found {left}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(buf: &[u8]) -> Result<Vec<NamedArray>> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Parse { offset: 0, msg: format!("bad magic {magic:?}, expected \"CMDT\"") });
    }
    let at = r.pos;
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::Parse { offset: at, msg: format!("unsupported version {version}") });
    }
    let count = r.u32("entry count")?;
    let mut out = Vec::with_capacity(count.min(1 << 16) as usize);
    for i in 0..count {
        let len = r.u16("name length")? as usize;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Parse { offset: at, msg: format!("entry {i} name is not UTF-8") })?
            .to_string();
        let at = r.pos;
        let tag = r.u8("dtype")?;
        let dtype = DType::from_tag(tag)
            .ok_or_else(|| Error::Parse { offset: at, msg: format!("unknown dtype tag {tag} in `{name}`") })?;
        let rank = r.u8("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64("dims")?);
        }
        let at = r.pos;
        let bytes = dims
            .iter()
            .try_fold(dtype.size() as u64, |acc, &d| acc.checked_mul(d))
            .and_then(|b| usize::try_from(b).ok())
            .ok_or_else(|| Error::Parse { offset: at, msg: format!("payload of `{name}` overflows") })?;
        let payload = r.take(bytes, &format!("payload of `{name}`"))?;
        let data = match dtype {
            DType::F32 => ArrayData::F32(payload.chunks_exact(4).map(f32::from_le_chunk).collect()),
            DType::F64 => ArrayData::F64(payload.chunks_exact(8).map(f64::from_le_chunk).collect()),
            DType::I64 => ArrayData::I64(
                payload.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().expect("8 bytes"))).collect(),
            ),
        };
        out.push(NamedArray { name, dims, data });
    }
    if r.pos != buf.len() {
        return Err(Error::Parse { offset: r.pos, msg: format!("{} trailing bytes", buf.len() - r.pos) });
    }
    Ok(out)
}

pub fn write_file(path: &Path, arrays: &[NamedArray]) -> Result<()> {
    std::fs::write(path, encode(arrays)?)?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<NamedArray>> {
    decode(&std::fs::read(path)?)
}

/// Name of the array holding the config hash in checkpoints.
pub const CONFIG_HASH: &str = "meta.config_hash";

/// Parameter tree plus a config fingerprint.
pub fn save_params<S: Scalar>(path: &Path, params: &ParamTree<S>, config_hash: u64) -> Result<()> {
    let mut arrays: Vec<NamedArray> = params.iter().map(|(k, t)| NamedArray::from_tensor(k.clone(), t)).collect();
    arrays.push(NamedArray::ints(CONFIG_HASH, vec![config_hash as i64]));
    write_file(path, &arrays)
}

/// Loads a checkpoint, refusing it if its config hash differs from `expected`.
pub fn load_params<S: Scalar>(path: &Path, expected: u64) -> Result<ParamTree<S>> {
    let arrays = read_file(path)?;
    let mut tree = ParamTree::new();
    let mut hash = None;
    for a in arrays {
        if a.name == CONFIG_HASH {
            if let ArrayData::I64(v) = &a.data {
                hash = v.first().map(|&h| h as u64);
            }
            continue;
        }
        let t = a.to_tensor()?;
        tree.insert(a.name, t);
    }
    match hash {
        Some(h) if h == expected => Ok(tree),
        Some(h) => Err(Error::Config(format!(
            "checkpoint {} was written with config hash {h:016x}, current config is {expected:016x}",
            path.display()
        ))),
        None => Err(Error::Config(format!("checkpoint {} has no config hash", path.display()))),
    }
}
