//! Named-array container files.
//!
//! Every binary artifact (utterance features, GMM-HMM models, network
//! checkpoints) uses the same little-endian layout:
//!
//! ```text
//! magic      4 bytes   "AVNA"
//! version    u32       1
//! meta_len   u32       length of the metadata blob
//! meta       bytes     UTF-8 JSON object of string key/value pairs
//! count      u32       number of arrays
//! table      count x { name_len u16, name UTF-8, dtype u8, ndim u8, dims ndim x u64 }
//! payload    arrays in table order, each `prod(dims)` elements, no padding
//! ```
//!
//! dtype codes: 1 = f32, 2 = f64, 3 = i64.

use std::collections::BTreeMap;
use std::path::Path;

use avsr_autograd::Tensor;

use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"AVNA";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I64(Vec<i64>),
}

impl ArrayData {
    fn code(&self) -> u8 {
        match self {
            ArrayData::F32(_) => 1,
            ArrayData::F64(_) => 2,
            ArrayData::I64(_) => 3,
        }
    }

    fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::I64(v) => v.len(),
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            ArrayData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            ArrayData::F64(v) => v.clone(),
            ArrayData::I64(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl NamedArray {
    pub fn f32_from(name: impl Into<String>, t: &Tensor) -> Self {
        Self {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: ArrayData::F32(t.data().iter().map(|&x| x as f32).collect()),
        }
    }

    pub fn f64_from(name: impl Into<String>, t: &Tensor) -> Self {
        Self {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: ArrayData::F64(t.data().to_vec()),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::new(&self.shape, self.data.to_f64())?)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub meta: BTreeMap<String, String>,
    pub arrays: Vec<NamedArray>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, a: NamedArray) {
        self.arrays.push(a);
    }

    pub fn with_meta(mut self, key: &str, value: impl Into<String>) -> Self {
        self.meta.insert(key.to_string(), value.into());
        self
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        self.get(name)
            .ok_or_else(|| Error::format("container", format!("missing array `{name}`")))?
            .to_tensor()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            let expected: usize = a.shape.iter().product();
            if expected != a.data.len() {
                return Err(Error::format(
                    &a.name,
                    format!("shape {:?} does not match {} elements", a.shape, a.data.len()),
                ));
            }
            let name = a.name.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(a.data.code());
            out.push(a.shape.len() as u8);
            for &d in &a.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for a in &self.arrays {
            match &a.data {
                ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(r.err("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err(&format!("unsupported version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta: BTreeMap<String, String> = serde_json::from_slice(r.take(meta_len)?)?;
        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| r.err("array name is not UTF-8"))?;
            let dtype = r.take(1)?[0];
            let ndim = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            table.push((name, dtype, shape));
        }
        let mut arrays = Vec::with_capacity(count);
        for (name, dtype, shape) in table {
            let n: usize = shape.iter().product();
            let data = match dtype {
                1 => ArrayData::F32(
                    r.take(n * 4)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                2 => ArrayData::F64(
                    r.take(n * 8)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                3 => ArrayData::I64(
                    r.take(n * 8)?
                        .chunks_exact(8)
                        .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                other => return Err(r.err(&format!("unknown dtype code {other}"))),
            };
            arrays.push(NamedArray { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes"));
        }
        Ok(Self { meta, arrays })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format { msg, .. } => Error::format(path, msg),
            other => other,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.err("truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn err(&self, msg: &str) -> Error {
        Error::format("container", format!("{msg} at byte {}", self.pos))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_stable() {
        let mut c = Container::new().with_meta("k", "v");
        c.push(NamedArray {
            name: "a".into(),
            shape: vec![2],
            data: ArrayData::F32(vec![1.0, 2.0]),
        });
        let b = c.to_bytes().unwrap();
        assert_eq!(&b[..4], b"AVNA");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        let meta_len = u32::from_le_bytes(b[8..12].try_into().unwrap()) as usize;
        assert_eq!(&b[12..12 + meta_len], br#"{"k":"v"}"#);
        let p = 12 + meta_len;
        assert_eq!(u32::from_le_bytes(b[p..p + 4].try_into().unwrap()), 1);
        assert_eq!(&b[p + 4..p + 6], &[1, 0]);
        assert_eq!(b[p + 6], b'a');
        assert_eq!(b[p + 7], 1, "dtype f32");
        assert_eq!(b[p + 8], 1, "ndim");
        assert_eq!(u64::from_le_bytes(b[p + 9..p + 17].try_into().unwrap()), 2);
        assert_eq!(&b[p + 17..p + 21], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), p + 25);
    }

    #[test]
    fn rejects_corruption() {
        let c = Container::new();
        let mut b = c.to_bytes().unwrap();
        assert!(Container::from_bytes(&b[..5]).is_err());
        b[0] = b'X';
        assert!(Container::from_bytes(&b).is_err());
    }

    proptest! {
        #[test]
        fn bytes_round_trip(
            vals in proptest::collection::vec(-1e6f64..1e6, 0..40),
            ints in proptest::collection::vec(any::<i64>(), 0..10),
            key in "[a-z]{1,8}",
        ) {
            let mut c = Container::new().with_meta(&key, "x");
            c.push(NamedArray { name: "f64".into(), shape: vec![vals.len()], data: ArrayData::F64(vals.clone()) });
            c.push(NamedArray {
                name: "f32".into(),
                shape: vec![1, vals.len()],
                data: ArrayData::F32(vals.iter().map(|&v| v as f32).collect()),
            });
            c.push(NamedArray { name: "i".into(), shape: vec![ints.len()], data: ArrayData::I64(ints) });
            let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
