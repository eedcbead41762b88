use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::archive::TensorArchive;
use crate::linalg::WeightMatrix;

const WEIGHT_SUFFIX: &str = ".weight";

/// A weight-bearing module of a checkpoint: every 2-D or 4-D tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModuleInfo {
    /// Tensor name without the trailing `.weight`.
    pub path: String,
    pub tensor: String,
    /// Shape of the (flattened) weight matrix.
    pub shape: (usize, usize),
    pub conv_kernel: Option<[usize; 4]>,
}

/// A loaded checkpoint plus the SHA-256 of its bytes.
#[derive(Debug, Clone)]
pub struct Model {
    path: PathBuf,
    hash: String,
    archive: TensorArchive,
}

pub fn content_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl Model {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)?;
        let hash = content_hash(&bytes);
        Ok(Self {
            path: path.to_path_buf(),
            hash,
            archive: TensorArchive::from_bytes(bytes)?,
        })
    }

    /// Wraps an in-memory archive; `hash` must identify its content.
    pub fn from_archive(archive: TensorArchive, hash: String) -> Self {
        Self {
            path: PathBuf::new(),
            hash,
            archive,
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn archive(&self) -> &TensorArchive {
        &self.archive
    }

    /// Modules in tensor-name order.
    pub fn modules(&self) -> Vec<ModuleInfo> {
        self.archive
            .names()
            .filter_map(|name| {
                let shape = &self.archive.info(name)?.shape;
                let (mat, conv) = match *shape.as_slice() {
                    [m, n] => ((m, n), None),
                    [o, i, kh, kw] => ((o, i * kh * kw), Some([o, i, kh, kw])),
                    _ => return None,
                };
                if mat.0 == 0 || mat.1 == 0 {
                    return None;
                }
                Some(ModuleInfo {
                    path: name.strip_suffix(WEIGHT_SUFFIX).unwrap_or(name).to_string(),
                    tensor: name.to_string(),
                    shape: mat,
                    conv_kernel: conv,
                })
            })
            .collect()
    }

    fn tensor_name(&self, module: &str) -> Option<String> {
        let with_suffix = format!("{module}{WEIGHT_SUFFIX}");
        if self.archive.contains(&with_suffix) {
            Some(with_suffix)
        } else if self.archive.contains(module) {
            Some(module.to_string())
        } else {
            None
        }
    }

    pub fn has_module(&self, module: &str) -> bool {
        self.tensor_name(module).is_some()
    }

    /// The module's weight as a matrix (conv kernels flattened).
    pub fn weight(&self, module: &str) -> Result<WeightMatrix> {
        let name = self
            .tensor_name(module)
            .ok_or_else(|| Error::MissingKey(module.to_string()))?;
        self.archive.tensor(&name)?.to_matrix()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::archive::{serialize_archive, DType, Tensor};
    use std::collections::BTreeMap;

    fn model() -> Model {
        let tensors = BTreeMap::from([
            ("blk.attn.weight".to_string(), Tensor::new(DType::F32, vec![2, 3], vec![1.; 6]).unwrap()),
            ("blk.attn.bias".to_string(), Tensor::new(DType::F32, vec![2], vec![0.; 2]).unwrap()),
            ("blk.conv.weight".to_string(), Tensor::new(DType::F32, vec![4, 2, 3, 3], vec![0.5; 72]).unwrap()),
        ]);
        let bytes = serialize_archive(&tensors, &BTreeMap::new()).unwrap();
        let hash = content_hash(&bytes);
        Model::from_archive(TensorArchive::from_bytes(bytes).unwrap(), hash)
    }

    #[test]
    fn lists_matrix_and_conv_modules() {
        let m = model();
        let mods = m.modules();
        assert_eq!(mods.len(), 2);
        assert_eq!(mods[0].path, "blk.attn");
        assert_eq!(mods[1].shape, (4, 18));
        assert_eq!(mods[1].conv_kernel, Some([4, 2, 3, 3]));
        assert_eq!(m.weight("blk.conv").unwrap().shape(), (4, 18));
    }

    #[test]
    fn missing_module() {
        assert!(matches!(model().weight("blk.mlp"), Err(Error::MissingKey(_))));
    }

    #[test]
    fn hash_is_sha256_hex() {
        assert_eq!(
            content_hash(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
