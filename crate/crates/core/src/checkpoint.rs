//! Named-array container used for model and training checkpoints.
//!
//! Layout: `"ARCK"`, a `u32` version, a `u64` header length, a JSON header
//! and then the raw little-endian arrays. The header carries the model
//! config, the model hash, free-form metadata and one entry per array
//! (`name`, `dtype`, `shape`, `offset`, `nbytes`) with offsets relative to
//! the start of the data section.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bottleneck::CdfTable;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamArray, ParamSet, ParameterStore};
use crate::scalar::Scalar;

pub const MAGIC: [u8; 4] = *b"ARCK";
pub const VERSION: u32 = 1;
const PARAM_PREFIX: &str = "param/";

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I32(Vec<i32>),
    U32(Vec<u32>),
    U64(Vec<u64>),
}

impl ArrayData {
    pub fn dtype(&self) -> &'static str {
        match self {
            ArrayData::F32(_) => "f32",
            ArrayData::F64(_) => "f64",
            ArrayData::I32(_) => "i32",
            ArrayData::U32(_) => "u32",
            ArrayData::U64(_) => "u64",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
            ArrayData::I32(v) => v.len(),
            ArrayData::U32(v) => v.len(),
            ArrayData::U64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn element_bytes(dtype: &str) -> Option<usize> {
        match dtype {
            "f32" | "i32" | "u32" => Some(4),
            "f64" | "u64" => Some(8),
            _ => None,
        }
    }

    fn write(&self, out: &mut Vec<u8>) {
        match self {
            ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            ArrayData::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn read(dtype: &str, bytes: &[u8]) -> Result<Self> {
        macro_rules! decode {
            ($t:ty, $n:expr, $variant:ident) => {
                ArrayData::$variant(
                    bytes
                        .chunks_exact($n)
                        .map(|c| <$t>::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            };
        }
        Ok(match dtype {
            "f32" => decode!(f32, 4, F32),
            "f64" => decode!(f64, 8, F64),
            "i32" => decode!(i32, 4, I32),
            "u32" => decode!(u32, 4, U32),
            "u64" => decode!(u64, 8, U64),
            other => return Err(Error::Format(format!("unknown dtype `{other}`"))),
        })
    }

    /// Floating data as `S`, converting between f32 and f64 if needed.
    pub fn to_float<S: Scalar>(&self) -> Result<Vec<S>> {
        match self {
            ArrayData::F32(v) => Ok(v.iter().map(|&x| S::lit(x as f64)).collect()),
            ArrayData::F64(v) => Ok(v.iter().map(|&x| S::lit(x)).collect()),
            other => Err(Error::Format(format!("expected float array, found {}", other.dtype()))),
        }
    }

    pub fn from_float<S: Scalar>(values: &[S]) -> Self {
        if S::DTYPE == "f32" {
            ArrayData::F32(values.iter().map(|v| v.as_f64() as f32).collect())
        } else {
            ArrayData::F64(values.iter().map(|v| v.as_f64()).collect())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    model_hash: String,
    #[serde(default)]
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
}

/// In-memory form of a container file.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub config: ModelConfig,
    pub model_hash: u64,
    pub meta: serde_json::Value,
    pub arrays: Vec<NamedArray>,
}

impl Container {
    pub fn new(config: ModelConfig, model_hash: u64) -> Self {
        Self {
            config,
            model_hash,
            meta: serde_json::Value::Null,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: ArrayData) {
        self.arrays.push(NamedArray {
            name: name.into(),
            shape: shape.to_vec(),
            data,
        });
    }

    pub fn get(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Format(format!("container has no array `{name}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut data = Vec::new();
        let mut entries = Vec::with_capacity(self.arrays.len());
        for a in &self.arrays {
            let offset = data.len() as u64;
            a.data.write(&mut data);
            entries.push(ArrayEntry {
                name: a.name.clone(),
                dtype: a.data.dtype().to_string(),
                shape: a.shape.clone(),
                offset,
                nbytes: data.len() as u64 - offset,
            });
        }
        let header = Header {
            config: self.config,
            model_hash: format!("{:016x}", self.model_hash),
            meta: self.meta.clone(),
            arrays: entries,
        };
        let json = serde_json::to_vec(&header).expect("container header always serializes");
        let mut out = Vec::with_capacity(16 + json.len() + data.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || bytes[..4] != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let data_start = 16u64
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len() as u64)
            .ok_or_else(|| Error::Format("checkpoint header is truncated".into()))? as usize;
        let header: Header = serde_json::from_slice(&bytes[16..data_start])
            .map_err(|e| Error::Format(format!("checkpoint header is corrupt: {e}")))?;
        let data = &bytes[data_start..];
        let model_hash = u64::from_str_radix(&header.model_hash, 16)
            .map_err(|_| Error::Format(format!("bad model hash `{}`", header.model_hash)))?;
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for e in header.arrays {
            let elem = ArrayData::element_bytes(&e.dtype)
                .ok_or_else(|| Error::Format(format!("array `{}` has unknown dtype `{}`", e.name, e.dtype)))?;
            let count = e.shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            if count.and_then(|c| c.checked_mul(elem)) != Some(e.nbytes as usize) {
                return Err(Error::Format(format!("array `{}` size disagrees with its shape", e.name)));
            }
            let end = e
                .offset
                .checked_add(e.nbytes)
                .filter(|&end| end <= data.len() as u64)
                .ok_or_else(|| Error::Format(format!("array `{}` extends past the end of the file", e.name)))?;
            arrays.push(NamedArray {
                data: ArrayData::read(&e.dtype, &data[e.offset as usize..end as usize])?,
                name: e.name,
                shape: e.shape,
            });
        }
        Ok(Self {
            config: header.config,
            model_hash,
            meta: header.meta,
            arrays,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// 64-bit content hash of a model: config, every parameter (as f64) and the
/// frozen tables. Independent of the storage precision.
pub fn model_hash<S: Scalar>(store: &ParameterStore<S>, cdf: &CdfTable) -> u64 {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&store.config).expect("config serializes"));
    for (name, array) in store.params.iter() {
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        for &d in &array.shape {
            h.update((d as u64).to_le_bytes());
        }
        for &v in &array.data {
            h.update(v.as_f64().to_le_bytes());
        }
    }
    let (offsets, mins, lengths, freqs) = cdf.to_arrays();
    offsets.iter().for_each(|v| h.update(v.to_le_bytes()));
    mins.iter().for_each(|v| h.update(v.to_le_bytes()));
    lengths.iter().for_each(|v| h.update(v.to_le_bytes()));
    freqs.iter().for_each(|v| h.update(v.to_le_bytes()));
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

pub fn push_params<S: Scalar>(c: &mut Container, prefix: &str, params: &ParamSet<S>) {
    for (name, array) in params.iter() {
        c.push(format!("{prefix}{name}"), &array.shape, ArrayData::from_float(&array.data));
    }
}

pub fn take_params<S: Scalar>(c: &Container, prefix: &str) -> Result<ParamSet<S>> {
    let mut params = ParamSet::new();
    for a in c.arrays.iter().filter(|a| a.name.starts_with(prefix)) {
        params.insert(&a.name[prefix.len()..], ParamArray::from_vec(&a.shape, a.data.to_float()?)?);
    }
    Ok(params)
}

pub fn push_model<S: Scalar>(c: &mut Container, store: &ParameterStore<S>, cdf: &CdfTable) {
    push_params(c, PARAM_PREFIX, &store.params);
    let (offsets, mins, lengths, freqs) = cdf.to_arrays();
    let n = offsets.len();
    c.push("cdf.offsets", &[n], ArrayData::F64(offsets));
    c.push("cdf.min_symbols", &[n], ArrayData::I32(mins));
    c.push("cdf.lengths", &[n], ArrayData::U32(lengths));
    let total = freqs.len();
    c.push("cdf.frequencies", &[total], ArrayData::U32(freqs));
}

/// Read parameters and tables back; checks layout against the stored config
/// and the stored hash against the stored content (before any precision change).
pub fn take_model<S: Scalar>(c: &Container) -> Result<(ParameterStore<S>, CdfTable)> {
    let store = ParameterStore::<f64> {
        config: c.config,
        params: take_params(c, PARAM_PREFIX)?,
    };
    store
        .validate()
        .map_err(|e| Error::Format(format!("checkpoint parameters are inconsistent: {e}")))?;
    let cdf = match (
        &c.get("cdf.offsets")?.data,
        &c.get("cdf.min_symbols")?.data,
        &c.get("cdf.lengths")?.data,
        &c.get("cdf.frequencies")?.data,
    ) {
        (ArrayData::F64(o), ArrayData::I32(m), ArrayData::U32(l), ArrayData::U32(f)) => CdfTable::from_arrays(o, m, l, f)?,
        _ => return Err(Error::Format("cdf arrays have unexpected dtypes".into())),
    };
    if cdf.channels.len() != store.config.width_n {
        return Err(Error::Format("cdf table channel count disagrees with the model width".into()));
    }
    let found = model_hash(&store, &cdf);
    if found != c.model_hash {
        return Err(Error::Format(format!(
            "checkpoint content hash {found:016x} does not match its header {:016x}",
            c.model_hash
        )));
    }
    Ok((store.cast(), cdf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_round_trip() {
        let mut c = Container::new(ModelConfig::new(4, 1).with_input_size(64), 0xdead_beef);
        c.meta = serde_json::json!({"epoch": 3});
        c.push("a", &[2, 2], ArrayData::F32(vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE]));
        c.push("b", &[3], ArrayData::F64(vec![0.1, 0.2, 0.3]));
        c.push("c", &[2], ArrayData::I32(vec![-7, 9]));
        c.push("d", &[0], ArrayData::U32(vec![]));
        c.push("e", &[1], ArrayData::U64(vec![u64::MAX]));
        let bytes = c.to_bytes();
        assert_eq!(Container::from_bytes(&bytes).unwrap(), c);
    }

    #[test]
    fn corruption_is_rejected() {
        let mut c = Container::new(ModelConfig::new(4, 1).with_input_size(64), 1);
        c.push("a", &[4], ArrayData::F64(vec![1.0; 4]));
        let bytes = c.to_bytes();
        assert!(matches!(Container::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        assert!(matches!(Container::from_bytes(&bytes[..20]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Container::from_bytes(&bad), Err(Error::Format(_))));
        assert!(matches!(Container::from_bytes(&[]), Err(Error::Format(_))));
    }

    #[test]
    fn float_arrays_convert_between_precisions() {
        let d = ArrayData::from_float(&[0.5f32, 1.5]);
        assert_eq!(d.dtype(), "f32");
        assert_eq!(d.to_float::<f64>().unwrap(), vec![0.5, 1.5]);
        assert!(ArrayData::I32(vec![1]).to_float::<f64>().is_err());
    }
}
