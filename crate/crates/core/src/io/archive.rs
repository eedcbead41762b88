// Tensor archive in the safetensors layout:
//
//   [u64 LE header length N][N bytes JSON header][raw little-endian tensor bytes]
//
// The header maps tensor names to {"dtype", "shape", "data_offsets"} with
// offsets relative to the start of the data section, plus an optional
// "__metadata__" string map. Writers here are deterministic: tensors are laid
// out in name order, JSON keys are sorted and the header is space-padded to a
// multiple of 8 bytes.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{ErrorKind, Write};
use std::path::Path;
use std::str::FromStr;

use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::linalg::{Matrix, WeightMatrix};
use crate::transfer::flatten_conv;

/// Header length limit; anything larger is treated as corruption.
const MAX_HEADER: u64 = 100 * 1024 * 1024;
const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F16,
    BF16,
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F16 | DType::BF16 => 2,
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F16 => "F16",
            DType::BF16 => "BF16",
            DType::F32 => "F32",
            DType::F64 => "F64",
        }
    }

    fn encode(self, values: &[f64], out: &mut Vec<u8>) {
        match self {
            DType::F16 => values
                .iter()
                .for_each(|&x| out.extend_from_slice(&half::f16::from_f64(x).to_le_bytes())),
            DType::BF16 => values
                .iter()
                .for_each(|&x| out.extend_from_slice(&half::bf16::from_f64(x).to_le_bytes())),
            DType::F32 => values
                .iter()
                .for_each(|&x| out.extend_from_slice(&(x as f32).to_le_bytes())),
            DType::F64 => values.iter().for_each(|&x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn decode(self, bytes: &[u8]) -> Vec<f64> {
        match self {
            DType::F16 => bytes
                .chunks_exact(2)
                .map(|b| half::f16::from_le_bytes([b[0], b[1]]).to_f64())
                .collect(),
            DType::BF16 => bytes
                .chunks_exact(2)
                .map(|b| half::bf16::from_le_bytes([b[0], b[1]]).to_f64())
                .collect(),
            DType::F32 => bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect(),
            DType::F64 => bytes
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "F16" => Ok(DType::F16),
            "BF16" => Ok(DType::BF16),
            "F32" => Ok(DType::F32),
            "F64" => Ok(DType::F64),
            _ => Err(Error::format(format!("unsupported dtype `{s}`"))),
        }
    }
}

/// A tensor decoded to `f64`, remembering its on-disk dtype.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Row-major values.
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(dtype: DType, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dtype, shape, data })
    }

    pub fn from_matrix(m: &Matrix, dtype: DType) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            data.extend(m.row(i).iter().copied());
        }
        Self {
            dtype,
            shape: vec![m.nrows(), m.ncols()],
            data,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// 2-D tensors as-is, 4-D conv kernels flattened to `out × in·kh·kw`.
    pub fn to_matrix(&self) -> Result<WeightMatrix> {
        match self.shape.len() {
            2 => WeightMatrix::from_row_major(self.shape[0], self.shape[1], &self.data),
            4 => flatten_conv(&self.shape, &self.data),
            _ => Err(Error::shape(format!(
                "expected a 2-D or 4-D tensor, got shape {:?}",
                self.shape
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data_offsets: (usize, usize),
}

/// A validated archive. Tensors are decoded on request.
#[derive(Debug, Clone)]
pub struct TensorArchive {
    entries: BTreeMap<String, TensorInfo>,
    metadata: BTreeMap<String, String>,
    data: Vec<u8>,
}

fn truncated(what: &str) -> Error {
    Error::Io(std::io::Error::new(ErrorKind::UnexpectedEof, format!("truncated archive: {what}")))
}

fn parse_entry(name: &str, v: &Value) -> Result<TensorInfo> {
    let obj = v
        .as_object()
        .ok_or_else(|| Error::format(format!("entry `{name}` is not an object")))?;
    let dtype = obj
        .get("dtype")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::format(format!("entry `{name}` has no dtype")))?
        .parse::<DType>()?;
    let shape = obj
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::format(format!("entry `{name}` has no shape")))?
        .iter()
        .map(|d| {
            d.as_u64()
                .and_then(|d| usize::try_from(d).ok())
                .ok_or_else(|| Error::format(format!("entry `{name}` has a bad dimension {d}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let offsets = obj
        .get("data_offsets")
        .and_then(Value::as_array)
        .filter(|a| a.len() == 2)
        .ok_or_else(|| Error::format(format!("entry `{name}` needs two data_offsets")))?;
    let off = |i: usize| {
        offsets[i]
            .as_u64()
            .and_then(|x| usize::try_from(x).ok())
            .ok_or_else(|| Error::format(format!("entry `{name}` has a bad offset")))
    };
    let (begin, end) = (off(0)?, off(1)?);
    if end < begin {
        return Err(Error::format(format!("entry `{name}` has end < begin")));
    }
    let bytes = shape
        .iter()
        .try_fold(dtype.size(), |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format(format!("entry `{name}` size overflows")))?;
    if bytes != end - begin {
        return Err(Error::format(format!(
            "entry `{name}` declares {} bytes but {dtype} x {shape:?} needs {bytes}",
            end - begin
        )));
    }
    Ok(TensorInfo {
        dtype,
        shape,
        data_offsets: (begin, end),
    })
}

impl TensorArchive {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(std::fs::read(path)?)
    }

    pub fn from_bytes(mut bytes: Vec<u8>) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(truncated("missing header length"));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        if header_len > MAX_HEADER {
            return Err(Error::format(format!("header length {header_len} is implausible")));
        }
        let header_end = 8 + header_len as usize;
        if bytes.len() < header_end {
            return Err(truncated("header cut short"));
        }
        let header = std::str::from_utf8(&bytes[8..header_end])
            .map_err(|_| Error::format("header is not UTF-8"))?;
        let root: Value =
            serde_json::from_str(header).map_err(|e| Error::format(format!("header JSON: {e}")))?;
        let root = root
            .as_object()
            .ok_or_else(|| Error::format("header is not a JSON object"))?;

        let mut entries = BTreeMap::new();
        let mut metadata = BTreeMap::new();
        for (name, v) in root {
            if name == METADATA_KEY {
                let map = v
                    .as_object()
                    .ok_or_else(|| Error::format("__metadata__ is not an object"))?;
                for (k, v) in map {
                    let s = v
                        .as_str()
                        .ok_or_else(|| Error::format(format!("metadata `{k}` is not a string")))?;
                    metadata.insert(k.clone(), s.to_string());
                }
            } else {
                entries.insert(name.clone(), parse_entry(name, v)?);
            }
        }

        let data_len = bytes.len() - header_end;
        let mut ranges: Vec<(usize, usize, &str)> = entries
            .iter()
            .map(|(n, i)| (i.data_offsets.0, i.data_offsets.1, n.as_str()))
            .collect();
        ranges.sort_unstable();
        let mut cursor = 0;
        for (begin, end, name) in ranges {
            if end > data_len {
                return Err(Error::format(format!(
                    "tensor `{name}` ends at byte {end}, past the {data_len}-byte data section"
                )));
            }
            if begin != cursor {
                return Err(Error::format(format!(
                    "tensor `{name}` starts at {begin}, expected {cursor} (overlap or gap)"
                )));
            }
            cursor = end;
        }
        if cursor != data_len {
            return Err(Error::format(format!(
                "{} trailing bytes after the last tensor",
                data_len - cursor
            )));
        }
        let data = bytes.split_off(header_end);
        Ok(Self {
            entries,
            metadata,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Tensor names in sorted order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn info(&self, name: &str) -> Option<&TensorInfo> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let info = self
            .entries
            .get(name)
            .ok_or_else(|| Error::MissingKey(name.to_string()))?;
        let (b, e) = info.data_offsets;
        Ok(Tensor {
            dtype: info.dtype,
            shape: info.shape.clone(),
            data: info.dtype.decode(&self.data[b..e]),
        })
    }

    pub fn tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        self.names()
            .map(|n| Ok((n.to_string(), self.tensor(n)?)))
            .collect()
    }
}

/// Serializes tensors (each in its own dtype) and metadata to archive bytes.
pub fn serialize_archive(
    tensors: &BTreeMap<String, Tensor>,
    metadata: &BTreeMap<String, String>,
) -> Result<Vec<u8>> {
    let mut header = Map::new();
    let mut data = Vec::new();
    for (name, t) in tensors {
        if name == METADATA_KEY {
            return Err(Error::format("tensor name `__metadata__` is reserved"));
        }
        let numel: usize = t.shape.iter().product();
        if numel != t.data.len() {
            return Err(Error::shape(format!(
                "tensor `{name}` shape {:?} does not match {} values",
                t.shape,
                t.data.len()
            )));
        }
        let begin = data.len();
        t.dtype.encode(&t.data, &mut data);
        header.insert(
            name.clone(),
            json!({
                "dtype": t.dtype.as_str(),
                "shape": t.shape,
                "data_offsets": [begin, data.len()],
            }),
        );
    }
    if !metadata.is_empty() {
        let meta: Map<String, Value> = metadata
            .iter()
            .map(|(k, v)| (k.clone(), Value::String(v.clone())))
            .collect();
        header.insert(METADATA_KEY.to_string(), Value::Object(meta));
    }
    let mut header = serde_json::to_vec(&Value::Object(header))
        .map_err(|e| Error::format(format!("header JSON: {e}")))?;
    while header.len() % 8 != 0 {
        header.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + header.len() + data.len());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&data);
    Ok(out)
}

/// Writes via a temporary file in the destination directory and renames it
/// into place, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn write_archive(
    path: impl AsRef<Path>,
    tensors: &BTreeMap<String, Tensor>,
    metadata: &BTreeMap<String, String>,
) -> Result<()> {
    write_atomic(path.as_ref(), &serialize_archive(tensors, metadata)?)
}
