//! Binary tensor container shared by count tensors, normalized series,
//! embeddings and model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes   b"MOBICLR\0"
//! version  u32       FORMAT_VERSION
//! hlen     u64       byte length of the JSON header
//! header   hlen      UTF-8 JSON: {"kind", "meta", "tensors": [{"name","dtype","shape"}]}
//! payload            tensors in header order, row-major, u32 or f64 LE
//! ```
//!
//! `meta` is free-form JSON owned by the writer (region ids, time origin,
//! configs, seeds). Object keys are sorted so identical content always
//! serializes to identical bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MOBICLR\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    U32(Vec<u32>),
    F64(Vec<f64>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::U32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    fn dtype(&self) -> DType {
        match self {
            TensorData::U32(_) => DType::U32,
            TensorData::F64(_) => DType::F64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum DType {
    U32,
    F64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn f64(name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> Self {
        Tensor {
            name: name.into(),
            shape: shape.to_vec(),
            data: TensorData::F64(data),
        }
    }

    pub fn u32(name: impl Into<String>, shape: &[usize], data: Vec<u32>) -> Self {
        Tensor {
            name: name.into(),
            shape: shape.to_vec(),
            data: TensorData::U32(data),
        }
    }

    pub fn as_f64(&self) -> Option<&[f64]> {
        match &self.data {
            TensorData::F64(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_u32(&self) -> Option<&[u32]> {
        match &self.data {
            TensorData::U32(v) => Some(v),
            _ => None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorHeader>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<Tensor>,
}

impl Container {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Container {
            kind: kind.into(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, tensor: Tensor) {
        self.tensors.push(tensor);
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        for t in &self.tensors {
            let expected: usize = t.shape.iter().product();
            if expected != t.data.len() {
                return Err(Error::shape(
                    format!("{} elements for `{}`", expected, t.name),
                    t.data.len(),
                ));
            }
        }
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| TensorHeader {
                    name: t.name.clone(),
                    dtype: t.data.dtype(),
                    shape: t.shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let io = |e| Error::io("<container>", e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&json).map_err(io)?;
        for t in &self.tensors {
            match &t.data {
                TensorData::U32(v) => {
                    for x in v {
                        w.write_all(&x.to_le_bytes()).map_err(io)?;
                    }
                }
                TensorData::F64(v) => {
                    for x in v {
                        w.write_all(&x.to_le_bytes()).map_err(io)?;
                    }
                }
            }
        }
        w.flush().map_err(io)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let bad = |m: &str| Error::Container {
            path: "<stream>".into(),
            message: m.to_string(),
        };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(|_| bad("truncated version"))?;
        let version = u32::from_le_bytes(b4);
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported format version {version}")));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(|_| bad("truncated header length"))?;
        let hlen = u64::from_le_bytes(b8) as usize;
        let mut json = vec![0u8; hlen];
        r.read_exact(&mut json).map_err(|_| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&json)?;

        let mut tensors = Vec::with_capacity(header.tensors.len());
        for th in header.tensors {
            let n: usize = th.shape.iter().product();
            let data = match th.dtype {
                DType::U32 => {
                    let mut buf = vec![0u8; n * 4];
                    r.read_exact(&mut buf).map_err(|_| bad("truncated payload"))?;
                    TensorData::U32(
                        buf.chunks_exact(4)
                            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )
                }
                DType::F64 => {
                    let mut buf = vec![0u8; n * 8];
                    r.read_exact(&mut buf).map_err(|_| bad("truncated payload"))?;
                    TensorData::F64(
                        buf.chunks_exact(8)
                            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )
                }
            };
            tensors.push(Tensor {
                name: th.name,
                shape: th.shape,
                data,
            });
        }
        Ok(Container {
            kind: header.kind,
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(f)).map_err(|e| relabel(e, path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(f)).map_err(|e| relabel(e, path))
    }

    /// Loads and checks the `kind` tag.
    pub fn load_kind(path: impl AsRef<Path>, kind: &str) -> Result<Self> {
        let path = path.as_ref();
        let c = Self::load(path)?;
        if c.kind != kind {
            return Err(Error::Container {
                path: path.into(),
                message: format!("expected a `{kind}` container, found `{}`", c.kind),
            });
        }
        Ok(c)
    }

    pub(crate) fn require(&self, name: &str) -> Result<&Tensor> {
        self.tensor(name).ok_or_else(|| Error::Container {
            path: "<container>".into(),
            message: format!("missing tensor `{name}`"),
        })
    }
}

fn relabel(e: Error, path: &Path) -> Error {
    match e {
        Error::Container { message, .. } => Error::Container {
            path: path.into(),
            message,
        },
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn roundtrip(counts in proptest::collection::vec(any::<u32>(), 0..40),
                     reals in proptest::collection::vec(-1e12f64..1e12, 0..40)) {
            let mut c = Container::new("test", serde_json::json!({"ids": ["a", "b"], "t0": 5}));
            c.push(Tensor::u32("counts", &[counts.len()], counts));
            c.push(Tensor::f64("reals", &[reals.len()], reals));
            let mut bytes = Vec::new();
            c.write_to(&mut bytes).unwrap();
            let back = Container::read_from(bytes.as_slice()).unwrap();
            prop_assert_eq!(back, c);
        }
    }

    #[test]
    fn rejects_shape_data_mismatch() {
        let mut c = Container::new("x", serde_json::Value::Null);
        c.push(Tensor::f64("w", &[2, 2], vec![0.0; 3]));
        assert!(matches!(c.write_to(Vec::new()), Err(Error::Shape { .. })));
    }

    #[test]
    fn rejects_garbage() {
        assert!(Container::read_from(&b"NOTMAGIC...."[..]).is_err());
        let mut bytes = Vec::new();
        Container::new("x", serde_json::Value::Null)
            .write_to(&mut bytes)
            .unwrap();
        bytes[8] = 99;
        assert!(Container::read_from(bytes.as_slice()).is_err());
    }
}
