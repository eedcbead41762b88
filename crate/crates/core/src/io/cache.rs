//! Spectral cache: SVD bases per (model content hash, module, rank
//! tolerance), kept in memory and optionally persisted as `f64` archives.
//!
//! On-disk layout: `<root>/<model hash>/tol-<tolerance bits>/<module>.safetensors`
//! holding `u` (m×m), `v` (n×n), `sigma` and the split rank in metadata.
//! Files are written by rename, so concurrent readers see either nothing or
//! a complete entry.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use log::{debug, warn};

use crate::error::{Error, Result};
use crate::io::archive::{write_archive, DType, Tensor, TensorArchive};
use crate::io::model::Model;
use crate::linalg::{Matrix, SpectralBases};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct CacheKey {
    model_hash: String,
    module: String,
    tol_bits: u64,
}

#[derive(Debug, Default)]
pub struct SpectralCache {
    root: Option<PathBuf>,
    memo: Mutex<HashMap<CacheKey, Arc<SpectralBases>>>,
    computed: AtomicUsize,
    loaded: AtomicUsize,
}

impl SpectralCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn persistent(root: impl Into<PathBuf>) -> Self {
        Self {
            root: Some(root.into()),
            ..Self::default()
        }
    }

    /// Number of SVDs actually computed by this instance.
    pub fn computations(&self) -> usize {
        self.computed.load(Ordering::Relaxed)
    }

    /// Number of entries read back from disk.
    pub fn disk_loads(&self) -> usize {
        self.loaded.load(Ordering::Relaxed)
    }

    fn file_for(&self, key: &CacheKey) -> Option<PathBuf> {
        let module: String = key
            .module
            .chars()
            .map(|c| if matches!(c, '/' | '\\' | ':') { '_' } else { c })
            .collect();
        self.root.as_ref().map(|r| {
            r.join(&key.model_hash)
                .join(format!("tol-{:016x}", key.tol_bits))
                .join(format!("{module}.safetensors"))
        })
    }

    pub fn get_or_compute(&self, model: &Model, module: &str, rel_tol: f64) -> Result<Arc<SpectralBases>> {
        let key = CacheKey {
            model_hash: model.hash().to_string(),
            module: module.to_string(),
            tol_bits: rel_tol.to_bits(),
        };
        if let Some(hit) = self.memo.lock().unwrap().get(&key) {
            return Ok(Arc::clone(hit));
        }
        let file = self.file_for(&key);
        let bases = match file.as_deref().map(read_entry) {
            Some(Ok(Some(b))) => {
                self.loaded.fetch_add(1, Ordering::Relaxed);
                b
            }
            other => {
                if let Some(Err(e)) = other {
                    warn!("ignoring unreadable spectral cache entry for `{module}`: {e}");
                }
                let w = model.weight(module)?;
                let b = SpectralBases::compute(&w, rel_tol)?;
                self.computed.fetch_add(1, Ordering::Relaxed);
                if let Some(path) = &file {
                    if let Err(e) = write_entry(path, &b, rel_tol) {
                        warn!("could not persist spectral cache entry {}: {e}", path.display());
                    }
                }
                b
            }
        };
        let bases = Arc::new(bases);
        let mut memo = self.memo.lock().unwrap();
        Ok(Arc::clone(memo.entry(key).or_insert(bases)))
    }
}

fn read_entry(path: &Path) -> Result<Option<SpectralBases>> {
    if !path.exists() {
        return Ok(None);
    }
    let a = TensorArchive::load(path)?;
    let matrix = |name: &str| -> Result<Matrix> {
        let t = a.tensor(name)?;
        match t.shape.as_slice() {
            &[r, c] => Ok(Matrix::from_row_slice(r, c, &t.data)),
            _ => Err(Error::format(format!("cache tensor `{name}` is not 2-D"))),
        }
    };
    let rank: usize = a
        .metadata()
        .get("rank")
        .and_then(|r| r.parse().ok())
        .ok_or_else(|| Error::format("cache entry has no rank"))?;
    let sigma = a.tensor("sigma")?.data;
    debug!("spectral cache hit {}", path.display());
    SpectralBases::from_svd_at_rank(&matrix("u")?, &matrix("v")?, &sigma, rank).map(Some)
}

fn write_entry(path: &Path, b: &SpectralBases, rel_tol: f64) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tensors = BTreeMap::from([
        ("u".to_string(), Tensor::from_matrix(&b.u_full(), DType::F64)),
        ("v".to_string(), Tensor::from_matrix(&b.v_full(), DType::F64)),
        (
            "sigma".to_string(),
            Tensor::new(DType::F64, vec![b.singular_values().len()], b.singular_values().to_vec())?,
        ),
    ]);
    let meta = BTreeMap::from([
        ("rank".to_string(), b.rank().to_string()),
        ("rel_tol".to_string(), format!("{rel_tol:e}")),
    ]);
    write_archive(path, &tensors, &meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::archive::serialize_archive;
    use crate::io::model::content_hash;
    use crate::linalg::{projector, DEFAULT_RANK_TOL};

    fn model() -> Model {
        let data: Vec<f64> = (0..20).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let tensors = BTreeMap::from([(
            "l.weight".to_string(),
            Tensor::new(DType::F64, vec![5, 4], data).unwrap(),
        )]);
        let bytes = serialize_archive(&tensors, &BTreeMap::new()).unwrap();
        let hash = content_hash(&bytes);
        Model::from_archive(TensorArchive::from_bytes(bytes).unwrap(), hash)
    }

    #[test]
    fn second_call_is_a_hit() {
        let cache = SpectralCache::in_memory();
        let m = model();
        let a = cache.get_or_compute(&m, "l", DEFAULT_RANK_TOL).unwrap();
        let b = cache.get_or_compute(&m, "l", DEFAULT_RANK_TOL).unwrap();
        assert_eq!(cache.computations(), 1);
        assert_eq!(*a, *b);
    }

    #[test]
    fn tolerance_is_part_of_the_key() {
        let cache = SpectralCache::in_memory();
        let m = model();
        cache.get_or_compute(&m, "l", 1e-8).unwrap();
        cache.get_or_compute(&m, "l", 1e-6).unwrap();
        assert_eq!(cache.computations(), 2);
    }

    #[test]
    fn missing_module_is_key_error() {
        let cache = SpectralCache::in_memory();
        assert!(matches!(
            cache.get_or_compute(&model(), "nope", DEFAULT_RANK_TOL),
            Err(Error::MissingKey(_))
        ));
    }

    #[test]
    fn disk_reload_reproduces_projectors() {
        let dir = tempfile::tempdir().unwrap();
        let m = model();
        let first = SpectralCache::persistent(dir.path());
        let a = first.get_or_compute(&m, "l", DEFAULT_RANK_TOL).unwrap();
        let second = SpectralCache::persistent(dir.path());
        let b = second.get_or_compute(&m, "l", DEFAULT_RANK_TOL).unwrap();
        assert_eq!(second.computations(), 0);
        assert_eq!(second.disk_loads(), 1);
        // recompute from scratch and compare projectors
        let fresh = SpectralBases::compute(&m.weight("l").unwrap(), DEFAULT_RANK_TOL).unwrap();
        for (x, y) in [(b.u_par(), fresh.u_par()), (b.v_perp(), fresh.v_perp()), (b.u_perp(), a.u_perp())] {
            let d = projector(x) - projector(y);
            assert!(d.iter().all(|v| v.abs() < 1e-12));
        }
    }
}
