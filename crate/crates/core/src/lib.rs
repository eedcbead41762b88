//! Training-free transfer of low-rank adapters between model checkpoints.
//!
//! An adapter delta `ΔW` trained against a source weight `W_s` is split into
//! the block living in `W_s`'s column/row space and the block living in its
//! left/right nullspaces. Each block is then projected into the matching
//! space of the target weight `W_t` and the result is re-compressed to
//! adapter rank. Source and target modules are paired by the overlap of
//! their singular subspaces.
//!
//! ```
//! use lorashift_core::{decompose_adapter, transfer_adapter, SpectralBases, TransferMode, WeightMatrix, Matrix};
//!
//! let w = WeightMatrix::new(Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0])).unwrap();
//! let bases = SpectralBases::compute(&w, 1e-8).unwrap();
//! let delta = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
//! let parts = decompose_adapter(&delta, &bases).unwrap();
//! let out = transfer_adapter(&parts, &bases, TransferMode::Full).unwrap();
//! assert!((out.dense - parts.kept()).norm() < 1e-12);
//! ```

pub mod decompose;
pub mod diagnostics;
pub mod error;
pub mod io;
pub mod linalg;
pub mod pipeline;
pub mod similarity;
pub mod synth;
pub mod transfer;

pub use decompose::{decompose_adapter, ComponentNorms, DecomposedDelta};
pub use diagnostics::{build_report, emit, ModuleRecord, NormCorrelations, TransferReport};
pub use error::{Error, Result};
pub use io::{AdapterModule, AdapterSet, DType, Model, SpectralCache, Tensor, TensorArchive};
pub use linalg::{
    numerical_rank, project_onto, split_bases, svd_full, truncated_svd, LowRankFactors, Matrix, Side, Space,
    SpectralBases, WeightMatrix, DEFAULT_RANK_TOL,
};
pub use similarity::{
    module_similarity, pair_modules, select_pairs, subspace_similarity, Combine, Matching, ModulePairing,
    SimilarityScore, DEFAULT_THRESHOLD,
};
pub use synth::{generate_adapter, generate_model_pair, SynthSpec};
pub use transfer::{
    copy_transfer, recompress, transfer_adapter, transfer_factorwise, transfer_mismatched, TransferMode,
    TransferredDelta,
};
