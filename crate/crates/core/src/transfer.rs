//! Moves a decomposed source delta into a target weight's range and
//! nullspace, plus the copy baselines, the factorwise variant for factored
//! adapters, cross-dimension transport and conv-kernel flattening.

use std::fmt;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::decompose::DecomposedDelta;
use crate::error::{Error, Result};
use crate::linalg::{project_onto, truncated_svd, LowRankFactors, Matrix, Side, Space, SpectralBases, WeightMatrix};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    /// Range block to target range, null block to target nullspace.
    #[default]
    Full,
    /// Drops the nullspace term.
    SubspaceOnly,
    /// Drops the range term.
    NullspaceOnly,
    /// Source delta verbatim.
    Copy,
    /// Source delta sandwiched by the target's range and nullspace projectors,
    /// with no source-side alignment.
    CopyProjected,
    /// Projects the up and down factors separately; keeps adapter rank.
    Factorwise,
}

impl TransferMode {
    pub const ALL: [TransferMode; 6] = [
        TransferMode::Full,
        TransferMode::SubspaceOnly,
        TransferMode::NullspaceOnly,
        TransferMode::Copy,
        TransferMode::CopyProjected,
        TransferMode::Factorwise,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TransferMode::Full => "full",
            TransferMode::SubspaceOnly => "subspace_only",
            TransferMode::NullspaceOnly => "nullspace_only",
            TransferMode::Copy => "copy",
            TransferMode::CopyProjected => "copy_projected",
            TransferMode::Factorwise => "factorwise",
        }
    }

    fn keeps(self) -> Result<(bool, bool)> {
        match self {
            TransferMode::Full => Ok((true, true)),
            TransferMode::SubspaceOnly => Ok((true, false)),
            TransferMode::NullspaceOnly => Ok((false, true)),
            other => Err(Error::InvalidMode(other)),
        }
    }
}

impl fmt::Display for TransferMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TransferMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TransferMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown transfer mode `{s}`")))
    }
}

#[derive(Debug, Clone)]
pub struct TransferredDelta {
    pub dense: Matrix,
    pub par_component: Matrix,
    pub perp_component: Matrix,
    pub mode: TransferMode,
    pub source_module: String,
    pub target_module: String,
}

impl TransferredDelta {
    fn new(par_component: Matrix, perp_component: Matrix, mode: TransferMode) -> Self {
        Self {
            dense: &par_component + &perp_component,
            par_component,
            perp_component,
            mode,
            source_module: String::new(),
            target_module: String::new(),
        }
    }

    pub fn labeled(mut self, source: impl Into<String>, target: impl Into<String>) -> Self {
        self.source_module = source.into();
        self.target_module = target.into();
        self
    }

    pub fn shape(&self) -> (usize, usize) {
        self.dense.shape()
    }
}

/// `P_{Ut∥} ΔW_∥ P_{Vt∥} + P_{Ut⊥} ΔW_⊥ P_{Vt⊥}`, or one of the two terms.
pub fn transfer_adapter(
    decomposed: &DecomposedDelta,
    target: &SpectralBases,
    mode: TransferMode,
) -> Result<TransferredDelta> {
    let (keep_par, keep_perp) = mode.keeps()?;
    target.check_shape(&decomposed.par)?;
    let (m, n) = decomposed.shape();
    let par = if keep_par {
        target.sandwich(&decomposed.par, Space::Range)?
    } else {
        Matrix::zeros(m, n)
    };
    let perp = if keep_perp {
        target.sandwich(&decomposed.perp, Space::Null)?
    } else {
        Matrix::zeros(m, n)
    };
    Ok(TransferredDelta::new(par, perp, mode))
}

/// Copy baselines. Both modes report the target-basis range and null blocks
/// of the delta as components; only `copy_projected` drops the cross blocks
/// from the output.
pub fn copy_transfer(delta: &Matrix, mode: TransferMode, target: &SpectralBases) -> Result<TransferredDelta> {
    target.check_shape(delta)?;
    let par = target.sandwich(delta, Space::Range)?;
    let perp = target.sandwich(delta, Space::Null)?;
    match mode {
        TransferMode::Copy => {
            let mut out = TransferredDelta::new(par, perp, mode);
            out.dense = delta.clone();
            Ok(out)
        }
        TransferMode::CopyProjected => Ok(TransferredDelta::new(par, perp, mode)),
        other => Err(Error::InvalidMode(other)),
    }
}

/// Projects the factors of `ΔW = up · down` separately:
/// `up' = P_{Ut∥}P_{Us∥} up + P_{Ut⊥}P_{Us⊥} up` and the mirror image for `down`.
pub fn transfer_factorwise(
    up: &Matrix,
    down: &Matrix,
    source: &SpectralBases,
    target: &SpectralBases,
) -> Result<(Matrix, Matrix)> {
    let (m, n) = source.source_shape();
    if target.source_shape() != (m, n) {
        return Err(Error::shape(format!(
            "factorwise transfer needs equal shapes, got {:?} -> {:?}",
            source.source_shape(),
            target.source_shape()
        )));
    }
    if up.nrows() != m || down.ncols() != n || up.ncols() != down.nrows() {
        return Err(Error::shape(format!(
            "factors {}x{} and {}x{} do not form a {m}x{n} adapter",
            up.nrows(),
            up.ncols(),
            down.nrows(),
            down.ncols()
        )));
    }
    let route_up = |space: Space| -> Result<Matrix> {
        let s = project_onto(source.left_basis(space), up, Side::Left)?;
        project_onto(target.left_basis(space), &s, Side::Left)
    };
    let route_down = |space: Space| -> Result<Matrix> {
        let s = project_onto(source.right_basis(space), down, Side::Right)?;
        project_onto(target.right_basis(space), &s, Side::Right)
    };
    let up_t = route_up(Space::Range)? + route_up(Space::Null)?;
    let down_t = route_down(Space::Range)? + route_down(Space::Null)?;
    Ok((up_t, down_t))
}

fn warn_on_ties(bases: &SpectralBases, leading: usize, which: &str) {
    let s = bases.singular_values();
    if s.is_empty() || leading < 2 {
        return;
    }
    for w in s[..leading.min(s.len())].windows(2) {
        if w[0] - w[1] < 1e-6 * s[0] {
            warn!("{which} singular values tie near {:e}; leading-direction alignment is not unique", w[0]);
            return;
        }
    }
}

/// Transport between weights of different shapes by matching leading
/// singular directions: the source delta's coefficients in the first `d`
/// source basis vectors are re-expanded in the first `d` target basis vectors.
pub fn transfer_mismatched(
    decomposed: &DecomposedDelta,
    source: &SpectralBases,
    target: &SpectralBases,
    mode: TransferMode,
) -> Result<TransferredDelta> {
    let (keep_par, keep_perp) = mode.keeps()?;
    source.check_shape(&decomposed.par)?;
    let (m, n) = source.source_shape();
    let (mt, nt) = target.source_shape();
    let (rs, rt) = (source.rank(), target.rank());
    let dc = rs.min(rt);
    if dc == 0 {
        return Err(Error::DegenerateSubspace(format!(
            "no common range directions (source rank {rs}, target rank {rt})"
        )));
    }
    warn_on_ties(source, dc + 1, "source");
    warn_on_ties(target, dc + 1, "target");

    // U_t[:, :dl] (U_s[:, :dl]ᵀ X V_s[:, :dr]) V_t[:, :dr]ᵀ
    let transport = |x: &Matrix, space: Space, dl: usize, dr: usize| -> Matrix {
        let us = source.left_basis(space).columns(0, dl);
        let vs = source.right_basis(space).columns(0, dr);
        let ut = target.left_basis(space).columns(0, dl);
        let vt = target.right_basis(space).columns(0, dr);
        let coeff = us.tr_mul(x) * vs;
        ut * coeff * vt.transpose()
    };

    let par = if keep_par {
        transport(&decomposed.par, Space::Range, dc, dc)
    } else {
        Matrix::zeros(mt, nt)
    };
    let perp = if keep_perp {
        let dl = (m - rs).min(mt - rt);
        let dr = (n - rs).min(nt - rt);
        transport(&decomposed.perp, Space::Null, dl, dr)
    } else {
        Matrix::zeros(mt, nt)
    };
    Ok(TransferredDelta::new(par, perp, mode))
}

/// Reshapes a conv kernel `(out, in, kh, kw)` into an `out × in·kh·kw`
/// matrix, flattening the trailing axes in row-major order.
pub fn flatten_conv(shape: &[usize], data: &[f64]) -> Result<WeightMatrix> {
    let [out, inp, kh, kw] = *shape else {
        return Err(Error::shape(format!("conv kernel must be 4-D, got shape {shape:?}")));
    };
    WeightMatrix::from_row_major(out, inp * kh * kw, data)
}

/// Inverse of [`flatten_conv`]; returns row-major kernel data.
pub fn unflatten_conv(w: &Matrix, shape: [usize; 4]) -> Result<Vec<f64>> {
    let [out, inp, kh, kw] = shape;
    if w.shape() != (out, inp * kh * kw) {
        return Err(Error::shape(format!(
            "{}x{} matrix does not unflatten to {shape:?}",
            w.nrows(),
            w.ncols()
        )));
    }
    let mut data = Vec::with_capacity(w.len());
    for i in 0..out {
        data.extend(w.row(i).iter().copied());
    }
    Ok(data)
}

/// Truncated SVD of the dense transferred delta back to adapter factors.
pub fn recompress(transferred: &TransferredDelta, rank: usize) -> Result<LowRankFactors> {
    truncated_svd(&WeightMatrix::new(transferred.dense.clone())?, rank)
}
