//! Self-describing checkpoint container.
//!
//! Layout: the 8-byte magic `MMOECKPT`, a little-endian `u32` version, a
//! little-endian `u64` header length, a JSON header holding the model config,
//! element type and a `(name, shape, offset)` table, then the raw
//! little-endian parameter data. Offsets are in bytes from the start of the
//! data section.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::param::Parameters;
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 8] = b"MMOECKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub config: ModelConfig,
    pub dtype: DType,
    /// Optional training step the weights belong to.
    #[serde(default)]
    pub step: Option<usize>,
    pub tensors: Vec<TensorEntry>,
}

pub fn to_bytes<T: Element>(model: &ModelParams<T>, step: Option<usize>) -> Result<Vec<u8>> {
    let mut data = Vec::new();
    let mut tensors = Vec::new();
    for (name, p) in model.named_params() {
        tensors.push(TensorEntry { name, shape: p.shape().to_vec(), offset: data.len() });
        for &v in p.value.data() {
            v.write_le(&mut data);
        }
    }
    let header = serde_json::to_vec(&Header { config: model.config.clone(), dtype: T::DTYPE, step, tensors })?;
    let mut out = Vec::with_capacity(20 + header.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&data);
    Ok(out)
}

pub fn read_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < len {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..len])?;
    Ok((header, &body[len..]))
}

pub fn from_bytes<T: Element>(bytes: &[u8]) -> Result<(ModelParams<T>, Header)> {
    let (header, data) = read_header(bytes)?;
    if header.dtype != T::DTYPE {
        return Err(Error::Checkpoint(format!("stored element type {:?} does not match requested {:?}", header.dtype, T::DTYPE)));
    }
    let mut model = ModelParams::<T>::new(header.config.clone(), 0)?;
    let size = T::DTYPE.size_of();
    let mut seen = 0;
    let mut failure = None;
    model.visit_mut("", &mut |name, p| {
        if failure.is_some() {
            return;
        }
        let Some(entry) = header.tensors.iter().find(|e| e.name == name) else {
            failure = Some(format!("missing tensor {name}"));
            return;
        };
        if entry.shape != p.shape() {
            failure = Some(format!("{name}: stored shape {:?}, model expects {:?}", entry.shape, p.shape()));
            return;
        }
        let n = p.numel();
        let end = entry.offset + n * size;
        if end > data.len() {
            failure = Some(format!("{name}: data runs past the end of the file"));
            return;
        }
        let values: Vec<T> = data[entry.offset..end].chunks_exact(size).map(T::read_le).collect();
        p.value = Tensor::from_parts(entry.shape.clone(), values);
        seen += 1;
    });
    if let Some(msg) = failure {
        return Err(Error::Checkpoint(msg));
    }
    if seen != header.tensors.len() {
        return Err(Error::Checkpoint(format!("{} stored tensors, model uses {seen}", header.tensors.len())));
    }
    Ok((model, header))
}

pub fn save<T: Element>(model: &ModelParams<T>, step: Option<usize>, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, to_bytes(model, step)?)?;
    Ok(())
}

pub fn load<T: Element>(path: &Path) -> Result<(ModelParams<T>, Header)> {
    from_bytes(&fs::read(path)?)
}
