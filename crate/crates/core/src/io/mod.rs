//! Checkpoint and adapter files, plus the persisted spectral cache.

pub mod adapter;
pub mod archive;
pub mod cache;
pub mod model;

pub use adapter::{save_adapter, AdapterModule, AdapterSet, ConvLayout};
pub use archive::{serialize_archive, write_archive, DType, Tensor, TensorArchive, TensorInfo};
pub use cache::SpectralCache;
pub use model::{content_hash, Model, ModuleInfo};

/// Loads and validates an archive from disk.
pub fn load_archive(path: impl AsRef<std::path::Path>) -> crate::Result<TensorArchive> {
    TensorArchive::load(path)
}
