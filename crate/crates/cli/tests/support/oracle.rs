//! Slow reference transfer: explicit projector matrices built with a
//! different factorization than the library uses, multiplied out densely.

use lorashift_core::{Error, Matrix, Result, TransferMode, DEFAULT_RANK_TOL};

/// Largest side the oracle accepts.
pub const ORACLE_MAX_DIM: usize = 256;

/// Orthonormal basis of the first `rank` pivoted columns' span.
fn range_basis(a: &Matrix, rank: usize) -> Matrix {
    if rank == 0 {
        return Matrix::zeros(a.nrows(), 0);
    }
    a.clone().col_piv_qr().q().columns(0, rank).into_owned()
}

/// Range and nullspace projectors `(P_U∥, P_U⊥, P_V∥, P_V⊥)` of `w`. The
/// rank comes from singular values; the bases from column-pivoted QR of
/// `w` and `wᵀ`.
pub fn dense_projectors(w: &Matrix) -> (Matrix, Matrix, Matrix, Matrix) {
    let (m, n) = w.shape();
    let sigma = w.clone().svd(false, false).singular_values;
    let smax = sigma.max();
    let cutoff = DEFAULT_RANK_TOL * m.max(n) as f64 * smax;
    let rank = sigma.iter().filter(|s| **s > cutoff).count();
    let u = range_basis(w, rank);
    let v = range_basis(&w.transpose(), rank);
    let pu = &u * u.transpose();
    let pv = &v * v.transpose();
    (
        pu.clone(),
        Matrix::identity(m, m) - pu,
        pv.clone(),
        Matrix::identity(n, n) - pv,
    )
}

pub fn dense_oracle_transfer(delta: &Matrix, w_s: &Matrix, w_t: &Matrix, mode: TransferMode) -> Result<Matrix> {
    let (m, n) = delta.shape();
    if m.max(n) > ORACLE_MAX_DIM {
        return Err(Error::Size(format!("{m}x{n} exceeds {ORACLE_MAX_DIM}")));
    }
    if w_s.shape() != (m, n) || w_t.shape() != (m, n) {
        return Err(Error::Shape("oracle needs equal shapes".into()));
    }
    let (su, sun, sv, svn) = dense_projectors(w_s);
    let (tu, tun, tv, tvn) = dense_projectors(w_t);
    let par = &tu * (&su * delta * &sv) * &tv;
    let perp = &tun * (&sun * delta * &svn) * &tvn;
    Ok(match mode {
        TransferMode::Full => par + perp,
        TransferMode::SubspaceOnly => par,
        TransferMode::NullspaceOnly => perp,
        TransferMode::Copy => delta.clone(),
        TransferMode::CopyProjected => &tu * delta * &tv + &tun * delta * &tvn,
        TransferMode::Factorwise => return Err(Error::InvalidMode(mode)),
    })
}
