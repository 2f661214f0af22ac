//! Binary model checkpoints.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic        8 bytes  "OGRDCKPT"
//! version      u32      currently 1
//! header_len   u32
//! header       header_len bytes of UTF-8 JSON: {spec, normalizer, means, variables}
//! n_tensors    u32
//! per tensor:
//!   name_len   u32
//!   name       name_len bytes of UTF-8
//!   group      u8       0 = main, 1 = filter-linear
//!   ndim       u32
//!   dims       ndim × u64
//!   data       prod(dims) × f64
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::missingness::Normalizer;
use crate::models::{Model, ModelSpec};
use crate::params::{ParamGroup, ParamSet};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"OGRDCKPT";
pub const VERSION: u32 = 1;

/// A trained model plus everything needed to preprocess new data for it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub normalizer: Normalizer,
    pub variables: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    normalizer: Normalizer,
    means: Vec<f64>,
    variables: Vec<String>,
}

fn put_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("length {v} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_bytes<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(Error::Checkpoint("unexpected end of file".into()));
    }
    Ok(buf)
}

impl Checkpoint {
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header {
            spec: self.model.spec.clone(),
            normalizer: self.normalizer.clone(),
            means: self.model.means.clone(),
            variables: self.variables.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        put_u32(&mut w, json.len())?;
        w.write_all(&json)?;
        put_u32(&mut w, self.model.params.len())?;
        for e in self.model.params.entries() {
            put_u32(&mut w, e.name.len())?;
            w.write_all(e.name.as_bytes())?;
            w.write_all(&[e.group.code()])?;
            put_u32(&mut w, e.tensor.shape().len())?;
            for &d in e.tensor.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in e.tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads and checks a checkpoint: every tensor the spec implies must be
    /// present with its expected shape and group.
    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let magic = get_bytes(&mut r, MAGIC.len())?;
        if magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = get_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let len = get_u32(&mut r)? as usize;
        let header: Header = serde_json::from_slice(&get_bytes(&mut r, len)?)?;
        let mut model = Model::new(header.spec, header.means, 0)?;
        let n = get_u32(&mut r)? as usize;
        let mut params = ParamSet::new();
        for _ in 0..n {
            let len = get_u32(&mut r)? as usize;
            let name = String::from_utf8(get_bytes(&mut r, len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let code = get_bytes(&mut r, 1)?[0];
            let group =
                ParamGroup::from_code(code).ok_or_else(|| Error::Checkpoint(format!("unknown group code {code}")))?;
            let ndim = get_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let count: usize = shape.iter().product();
            let raw = get_bytes(&mut r, count * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.insert(name, group, Tensor::new(shape, data)?);
        }
        let expected = model.params.entries();
        if expected.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (want, got) in expected.iter().zip(params.entries()) {
            if want.name != got.name || want.group != got.group || want.tensor.shape() != got.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` {:?} does not match expected `{}` {:?}",
                    got.name,
                    got.tensor.shape(),
                    want.name,
                    want.tensor.shape()
                )));
            }
        }
        model.params = params;
        if header.normalizer.means.len() != model.spec.input_dim || header.variables.len() != model.spec.input_dim {
            return Err(Error::Checkpoint(
                "normalizer or vocabulary size differs from the model".into(),
            ));
        }
        Ok(Self {
            model,
            normalizer: header.normalizer,
            variables: header.variables,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }
}
