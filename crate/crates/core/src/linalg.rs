//! Dense matrix primitives: full SVD, numerical rank, range/nullspace bases
//! and truncated SVD. Everything here runs in `f64`.

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::linalg::svd::{svd, svd_scratch, ComputeSvdVectors, SvdParams};
use faer::{Mat, Par, Spec};
use log::warn;
use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Column-major dense matrix used for all transfer math.
pub type Matrix = DMatrix<f64>;

/// Default relative tolerance for [`numerical_rank`].
pub const DEFAULT_RANK_TOL: f64 = 1e-8;

/// Relative singular-value gap below which the rank cutoff is reported as ambiguous.
const CUTOFF_GAP_WARN: f64 = 1e-6;

/// A validated dense weight matrix: non-empty, every entry finite.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix(Matrix);

impl WeightMatrix {
    pub fn new(matrix: Matrix) -> Result<Self> {
        let (rows, cols) = matrix.shape();
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidMatrix(format!(
                "matrix must have positive dimensions, got {rows}x{cols}"
            )));
        }
        if let Some(pos) = matrix.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidMatrix(format!(
                "non-finite entry at column-major index {pos}"
            )));
        }
        Ok(Self(matrix))
    }

    /// Builds a matrix from row-major data, the layout used on disk.
    pub fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Self::new(Matrix::from_row_slice(rows, cols, data))
    }

    pub fn to_row_major(&self) -> Vec<f64> {
        let (rows, cols) = self.shape();
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            out.extend(self.0.row(i).iter().copied());
        }
        out
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

impl AsRef<Matrix> for WeightMatrix {
    fn as_ref(&self) -> &Matrix {
        &self.0
    }
}

/// Full singular value decomposition `M = U diag(sigma) Vᵀ` with square `U` and `V`.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Matrix,
    pub singular_values: Vec<f64>,
    pub v: Matrix,
}

fn to_faer(m: &Matrix) -> Mat<f64> {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

fn from_faer(m: faer::MatRef<'_, f64>) -> Matrix {
    Matrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Runs the decomposition sequentially so results never depend on thread count.
fn decompose_svd(m: &Matrix, vectors: ComputeSvdVectors) -> Result<Svd> {
    let (rows, cols) = m.shape();
    let k = rows.min(cols);
    let (ucols, vcols) = match vectors {
        ComputeSvdVectors::Full => (rows, cols),
        _ => (k, k),
    };
    let a = to_faer(m);
    let mut params: Spec<SvdParams, f64> = Default::default();
    // faer's divide-and-conquer bidiagonal solver loses accuracy on exactly
    // rank-deficient inputs (singular values shifted by ~1e-4), so always
    // take the iterative QR path
    params.recursion_threshold = usize::MAX;
    let mut u = Mat::<f64>::zeros(rows, ucols);
    let mut v = Mat::<f64>::zeros(cols, vcols);
    let mut s = faer::diag::Diag::<f64>::zeros(k);
    let mut buf = MemBuffer::new(svd_scratch::<f64>(
        rows,
        cols,
        vectors,
        vectors,
        Par::Seq,
        params,
    ));
    svd(
        a.as_ref(),
        s.as_mut(),
        Some(u.as_mut()),
        Some(v.as_mut()),
        Par::Seq,
        MemStack::new(&mut buf),
        params,
    )
    .map_err(|e| Error::NumericalFailure(format!("SVD of {rows}x{cols} matrix: {e:?}")))?;

    let singular_values: Vec<f64> = (0..k).map(|i| s[i].max(0.0)).collect();
    if singular_values.iter().any(|x| !x.is_finite()) {
        return Err(Error::NumericalFailure(
            "SVD produced non-finite singular values".into(),
        ));
    }
    Ok(Svd {
        u: from_faer(u.as_ref()),
        singular_values,
        v: from_faer(v.as_ref()),
    })
}

/// Full SVD with orthogonal `U` (m×m) and `V` (n×n).
pub fn svd_full(m: &WeightMatrix) -> Result<Svd> {
    decompose_svd(m.as_matrix(), ComputeSvdVectors::Full)
}

/// Counts singular values above `rel_tol * max(m, n) * sigma[0]`.
pub fn numerical_rank(sigma: &[f64], shape: (usize, usize), rel_tol: f64) -> usize {
    let Some(&top) = sigma.first() else {
        return 0;
    };
    if top <= 0.0 {
        return 0;
    }
    let cutoff = rel_tol * shape.0.max(shape.1) as f64 * top;
    sigma.iter().take_while(|&&s| s > cutoff).count()
}

/// Cached SVD-derived bases of one weight matrix.
///
/// `u_par`/`v_par` span the column/row space, `u_perp`/`v_perp` the left and
/// right nullspaces. Only the projectors built from these bases are stable
/// across SVD runs; the bases themselves are unique only up to rotations
/// within degenerate singular values.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralBases {
    u_par: Matrix,
    u_perp: Matrix,
    v_par: Matrix,
    v_perp: Matrix,
    singular_values: Vec<f64>,
    rank: usize,
    source_shape: (usize, usize),
}

/// Which side of a matrix a projector acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

/// Range (column/row space) or nullspace half of a [`SpectralBases`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Space {
    Range,
    Null,
}

impl SpectralBases {
    /// SVD followed by [`split_bases`].
    pub fn compute(w: &WeightMatrix, rel_tol: f64) -> Result<Self> {
        let svd = svd_full(w)?;
        Ok(split_bases(&svd.u, &svd.v, &svd.singular_values, rel_tol))
    }

    /// Splits at an explicit rank. Used when reloading persisted bases.
    pub fn from_svd_at_rank(u: &Matrix, v: &Matrix, sigma: &[f64], rank: usize) -> Result<Self> {
        let (m, n) = (u.nrows(), v.nrows());
        if u.ncols() != m || v.ncols() != n {
            return Err(Error::shape(format!(
                "singular vector matrices must be square, got U {}x{} and V {}x{}",
                u.nrows(),
                u.ncols(),
                v.nrows(),
                v.ncols()
            )));
        }
        if sigma.len() != m.min(n) || rank > sigma.len() {
            return Err(Error::shape(format!(
                "{} singular values / rank {rank} inconsistent with a {m}x{n} matrix",
                sigma.len()
            )));
        }
        Ok(Self {
            u_par: u.columns(0, rank).into_owned(),
            u_perp: u.columns(rank, m - rank).into_owned(),
            v_par: v.columns(0, rank).into_owned(),
            v_perp: v.columns(rank, n - rank).into_owned(),
            singular_values: sigma.to_vec(),
            rank,
            source_shape: (m, n),
        })
    }

    pub fn u_par(&self) -> &Matrix {
        &self.u_par
    }

    pub fn u_perp(&self) -> &Matrix {
        &self.u_perp
    }

    pub fn v_par(&self) -> &Matrix {
        &self.v_par
    }

    pub fn v_perp(&self) -> &Matrix {
        &self.v_perp
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn source_shape(&self) -> (usize, usize) {
        self.source_shape
    }

    /// Reassembles the full orthogonal `U = [U_par | U_perp]`.
    pub fn u_full(&self) -> Matrix {
        hstack(&self.u_par, &self.u_perp)
    }

    /// Reassembles the full orthogonal `V = [V_par | V_perp]`.
    pub fn v_full(&self) -> Matrix {
        hstack(&self.v_par, &self.v_perp)
    }

    pub fn left_basis(&self, space: Space) -> &Matrix {
        match space {
            Space::Range => &self.u_par,
            Space::Null => &self.u_perp,
        }
    }

    pub fn right_basis(&self, space: Space) -> &Matrix {
        match space {
            Space::Range => &self.v_par,
            Space::Null => &self.v_perp,
        }
    }

    /// `P_U(space) · m · P_V(space)`, computed through the factored bases.
    pub fn sandwich(&self, m: &Matrix, space: Space) -> Result<Matrix> {
        self.check_shape(m)?;
        let left = project_onto(self.left_basis(space), m, Side::Left)?;
        project_onto(self.right_basis(space), &left, Side::Right)
    }

    pub(crate) fn check_shape(&self, m: &Matrix) -> Result<()> {
        if m.shape() != self.source_shape {
            return Err(Error::shape(format!(
                "matrix is {}x{} but bases describe a {}x{} weight",
                m.nrows(),
                m.ncols(),
                self.source_shape.0,
                self.source_shape.1
            )));
        }
        Ok(())
    }
}

fn hstack(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.columns_mut(0, a.ncols()).copy_from(a);
    out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    out
}

/// Partitions full singular vectors into range and nullspace bases at the
/// numerical rank.
pub fn split_bases(u: &Matrix, v: &Matrix, sigma: &[f64], rel_tol: f64) -> SpectralBases {
    let shape = (u.nrows(), v.nrows());
    let rank = numerical_rank(sigma, shape, rel_tol);
    if rank > 0 && rank < sigma.len() {
        let gap = sigma[rank - 1] - sigma[rank];
        if gap < CUTOFF_GAP_WARN * sigma[0] {
            warn!(
                "rank cutoff at {rank} for {}x{} weight falls inside a near-degenerate cluster (gap {gap:e}, sigma_max {:e})",
                shape.0, shape.1, sigma[0]
            );
        }
    }
    SpectralBases::from_svd_at_rank(u, v, sigma, rank)
        .expect("split_bases requires square singular vector matrices from svd_full")
}

/// Applies the orthogonal projector `B Bᵀ` to `m` from the given side.
pub fn project_onto(basis: &Matrix, m: &Matrix, side: Side) -> Result<Matrix> {
    let ambient = match side {
        Side::Left => m.nrows(),
        Side::Right => m.ncols(),
    };
    if basis.nrows() != ambient {
        return Err(Error::shape(format!(
            "basis lives in R^{} but matrix {}x{} needs R^{ambient} on the {side:?} side",
            basis.nrows(),
            m.nrows(),
            m.ncols()
        )));
    }
    if basis.ncols() == 0 {
        return Ok(Matrix::zeros(m.nrows(), m.ncols()));
    }
    Ok(match side {
        Side::Left => basis * basis.tr_mul(m),
        Side::Right => (m * basis) * basis.transpose(),
    })
}

/// Rank-k factors of a matrix, singular values split evenly between them.
#[derive(Debug, Clone)]
pub struct LowRankFactors {
    /// m×k
    pub up: Matrix,
    /// k×n
    pub down: Matrix,
    /// Frobenius norm of what the factors leave out.
    pub residual_fro: f64,
}

impl LowRankFactors {
    pub fn rank(&self) -> usize {
        self.up.ncols()
    }

    pub fn product(&self) -> Matrix {
        &self.up * &self.down
    }
}

/// Best rank-`k` Frobenius approximation, `up = U_k √Σ_k`, `down = √Σ_k V_kᵀ`.
pub fn truncated_svd(m: &WeightMatrix, k: usize) -> Result<LowRankFactors> {
    let (rows, cols) = m.shape();
    let limit = rows.min(cols);
    if k > limit {
        return Err(Error::Rank { requested: k, limit });
    }
    if k == 0 {
        return Ok(LowRankFactors {
            up: Matrix::zeros(rows, 0),
            down: Matrix::zeros(0, cols),
            residual_fro: m.as_matrix().norm(),
        });
    }
    let svd = decompose_svd(m.as_matrix(), ComputeSvdVectors::Thin)?;
    let mut up = svd.u.columns(0, k).into_owned();
    let mut down = svd.v.columns(0, k).transpose();
    for (i, s) in svd.singular_values[..k].iter().enumerate() {
        let root = s.sqrt();
        up.column_mut(i).scale_mut(root);
        down.row_mut(i).scale_mut(root);
    }
    // sum smallest-first
    let residual_fro = svd.singular_values[k..]
        .iter()
        .rev()
        .fold(0.0, |acc, s| acc + s * s)
        .sqrt();
    Ok(LowRankFactors {
        up,
        down,
        residual_fro,
    })
}

/// Dense projector `B Bᵀ`. Only for checks; transfer code never materializes it.
pub fn projector(basis: &Matrix) -> Matrix {
    basis * basis.transpose()
}
