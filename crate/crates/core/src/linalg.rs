//! Dense matrix primitives shared by every estimator in the crate.
//!
//! Matrices are [`nalgebra::DMatrix<f64>`]. Operations that only identify a
//! subspace (QR, orthonormal completion) return bases under one sign
//! convention: the first entry of each column whose magnitude exceeds
//! [`SIGN_EPS`] is positive.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Default relative threshold below which an eigenvalue counts as zero in [`det0`].
pub const DET0_REL_TOL: f64 = 1e-10;
/// Symmetry tolerance, relative to `max(1, max |entry|)`.
pub const SYM_TOL: f64 = 1e-10;
/// Tolerance on `‖BᵀB − I‖∞` for a basis to count as semi-orthonormal.
pub const ORTHO_TOL: f64 = 1e-10;
/// Entries at or below this magnitude are skipped when fixing column signs.
pub const SIGN_EPS: f64 = 1e-12;

pub fn check_finite(m: &Mat, what: &'static str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

fn max_abs(m: &Mat) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

/// `max |m_ij − m_ji|`; `None` if `m` is not square.
pub fn asymmetry(m: &Mat) -> Option<f64> {
    if !m.is_square() {
        return None;
    }
    let n = m.nrows();
    let mut worst = 0.0f64;
    for j in 0..n {
        for i in (j + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    Some(worst)
}

/// `(m + mᵀ)/2` without any tolerance check.
pub fn symmetrize(m: &Mat) -> Mat {
    (m + m.transpose()) * 0.5
}

/// Symmetrizes `m` after checking it is symmetric to [`SYM_TOL`].
pub fn symmetrize_checked(m: &Mat) -> Result<Mat> {
    let asym = asymmetry(m).ok_or_else(|| {
        Error::ShapeMismatch(format!("expected square matrix, got {}x{}", m.nrows(), m.ncols()))
    })?;
    if asym > SYM_TOL * max_abs(m).max(1.0) {
        return Err(Error::NotSymmetric(asym));
    }
    Ok(symmetrize(m))
}

/// Eigendecomposition of a symmetric matrix with eigenvalues sorted descending.
#[derive(Debug, Clone)]
pub struct SymEig {
    pub values: Vector,
    pub vectors: Mat,
}

impl SymEig {
    pub fn new(m: &Mat) -> Result<Self> {
        let s = symmetrize_checked(m)?;
        Ok(Self::of_symmetric(s))
    }

    /// Caller guarantees `s` is exactly symmetric.
    pub(crate) fn of_symmetric(s: Mat) -> Self {
        let n = s.nrows();
        if n == 0 {
            return SymEig { values: Vector::zeros(0), vectors: Mat::zeros(0, 0) };
        }
        let eig = s.symmetric_eigen();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let values = Vector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
        let mut vectors = Mat::zeros(n, n);
        for (dst, &src) in order.iter().enumerate() {
            vectors.set_column(dst, &eig.eigenvectors.column(src));
        }
        SymEig { values, vectors }
    }

    pub fn reconstruct(&self) -> Mat {
        &self.vectors * Mat::from_diagonal(&self.values) * self.vectors.transpose()
    }
}

/// Column-stacking vectorization.
pub fn vec(m: &Mat) -> Vector {
    // nalgebra stores column-major, so the storage order is already vec order.
    Vector::from_column_slice(m.as_slice())
}

pub fn unvec(v: &Vector, rows: usize, cols: usize) -> Result<Mat> {
    if v.len() != rows * cols {
        return Err(Error::ShapeMismatch(format!(
            "vector of length {} cannot fill {rows}x{cols}",
            v.len()
        )));
    }
    Ok(Mat::from_column_slice(rows, cols, v.as_slice()))
}

/// Stacks the on-and-below-diagonal entries of a symmetric matrix, column by column.
pub fn vech(m: &Mat) -> Result<Vector> {
    let s = symmetrize_checked(m)?;
    Ok(vech_unchecked(&s))
}

pub(crate) fn vech_unchecked(m: &Mat) -> Vector {
    let r = m.nrows();
    let mut out = Vec::with_capacity(r * (r + 1) / 2);
    for j in 0..r {
        for i in j..r {
            out.push(m[(i, j)]);
        }
    }
    Vector::from_vec(out)
}

/// Inverse of [`vech`]: rebuilds the symmetric `r × r` matrix.
pub fn unvech(v: &Vector, r: usize) -> Result<Mat> {
    if v.len() != r * (r + 1) / 2 {
        return Err(Error::ShapeMismatch(format!(
            "vech of a {r}x{r} matrix has length {}, got {}",
            r * (r + 1) / 2,
            v.len()
        )));
    }
    let mut m = Mat::zeros(r, r);
    let mut k = 0;
    for j in 0..r {
        for i in j..r {
            m[(i, j)] = v[k];
            m[(j, i)] = v[k];
            k += 1;
        }
    }
    Ok(m)
}

#[inline]
fn vech_index(r: usize, i: usize, j: usize) -> usize {
    // (i, j) with i >= j, lower triangle stacked by column.
    let (i, j) = if i >= j { (i, j) } else { (j, i) };
    j * r - j * (j + 1) / 2 + i
}

/// Expansion (duplication) matrix `E_r`: `vec(A) = E_r vech(A)` for symmetric `A`.
pub fn expansion_matrix(r: usize) -> Mat {
    let h = r * (r + 1) / 2;
    let mut e = Mat::zeros(r * r, h);
    for j in 0..r {
        for i in 0..r {
            e[(j * r + i, vech_index(r, i, j))] = 1.0;
        }
    }
    e
}

/// Contraction matrix `C_r = (E_rᵀE_r)⁻¹E_rᵀ`: `vech(A) = C_r vec(A)` for
/// symmetric `A`, and `C_r vec(X) = vech((X + Xᵀ)/2)` for any square `X`.
pub fn contraction_matrix(r: usize) -> Mat {
    let h = r * (r + 1) / 2;
    let mut c = Mat::zeros(h, r * r);
    for j in 0..r {
        for i in 0..r {
            let w = if i == j { 1.0 } else { 0.5 };
            c[(vech_index(r, i, j), j * r + i)] = w;
        }
    }
    c
}

/// Product of the eigenvalues above `rel_tol · λ_max`; 1 for an empty product.
pub fn det0(m: &Mat, rel_tol: f64) -> Result<f64> {
    let eig = SymEig::new(m)?;
    Ok(nonzero_eigenvalues(&eig.values, rel_tol).fold(1.0, |acc, l| acc * l))
}

/// `log det0(m)`, summed in log space.
pub fn log_det0(m: &Mat, rel_tol: f64) -> Result<f64> {
    let eig = SymEig::new(m)?;
    Ok(nonzero_eigenvalues(&eig.values, rel_tol).map(libm::log).sum())
}

/// `log det0` of a matrix the caller has already made exactly symmetric.
pub(crate) fn log_det0_sym(m: Mat, rel_tol: f64) -> f64 {
    let eig = SymEig::of_symmetric(m);
    nonzero_eigenvalues(&eig.values, rel_tol).map(libm::log).sum()
}

fn nonzero_eigenvalues(values: &Vector, rel_tol: f64) -> impl Iterator<Item = f64> + '_ {
    let top = values.iter().copied().fold(0.0f64, f64::max);
    let cut = rel_tol * top;
    values.iter().copied().filter(move |&l| top > 0.0 && l > cut)
}

/// Moore–Penrose inverse through the SVD.
pub fn pinv(m: &Mat) -> Mat {
    let (rows, cols) = m.shape();
    if rows == 0 || cols == 0 {
        return Mat::zeros(cols, rows);
    }
    let svd = m.clone().svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let smax = svd.singular_values.iter().copied().fold(0.0f64, f64::max);
    let tol = (rows.max(cols) as f64) * f64::EPSILON * smax;
    let mut out = Mat::zeros(cols, rows);
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > tol {
            let vk = v_t.row(k).transpose();
            let uk = u.column(k);
            out += (vk * uk.transpose()) / s;
        }
    }
    out
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub fn spd_inverse(m: &Mat) -> Option<Mat> {
    if m.nrows() == 0 {
        return Some(Mat::zeros(0, 0));
    }
    m.clone().cholesky().map(|c| symmetrize(&c.inverse()))
}

/// Projection onto `span(basis)`: `B(BᵀB)⁻¹Bᵀ`.
pub fn proj(basis: &Mat) -> Result<Mat> {
    let r = basis.nrows();
    if basis.ncols() == 0 {
        return Ok(Mat::zeros(r, r));
    }
    let gram = basis.transpose() * basis;
    let scale = gram.diagonal().iter().copied().fold(0.0f64, f64::max);
    let chol = gram.clone().cholesky().ok_or(Error::RankDeficient)?;
    let l = chol.l();
    let min_pivot = l.diagonal().iter().copied().fold(f64::INFINITY, f64::min);
    if min_pivot * min_pivot <= 1e-14 * scale {
        return Err(Error::RankDeficient);
    }
    let coef = chol.solve(&basis.transpose());
    Ok(symmetrize(&(basis * coef)))
}

/// `I − proj(basis)`.
pub fn proj_complement(basis: &Mat) -> Result<Mat> {
    let p = proj(basis)?;
    Ok(Mat::identity(basis.nrows(), basis.nrows()) - p)
}

/// `‖BᵀB − I‖∞`.
pub fn orthonormality_defect(b: &Mat) -> f64 {
    let g = b.transpose() * b - Mat::identity(b.ncols(), b.ncols());
    max_abs(&g)
}

pub fn check_semi_orthonormal(b: &Mat) -> Result<()> {
    let d = orthonormality_defect(b);
    if d > ORTHO_TOL || !d.is_finite() {
        return Err(Error::NotOrthonormal(d));
    }
    Ok(())
}

/// Flips columns so the first entry above [`SIGN_EPS`] in magnitude is positive.
pub fn normalize_column_signs(m: &mut Mat) {
    for mut col in m.column_iter_mut() {
        if let Some(&lead) = col.iter().find(|v| v.abs() > SIGN_EPS) {
            if lead < 0.0 {
                col.neg_mut();
            }
        }
    }
}

/// Orthonormal basis of `span(m)` via Householder QR, with the crate's sign convention.
pub fn qr_orthonormalize(m: &Mat) -> Result<Mat> {
    let (rows, cols) = m.shape();
    if cols == 0 {
        return Ok(Mat::zeros(rows, 0));
    }
    if cols > rows {
        return Err(Error::RankDeficient);
    }
    let qr = m.clone().qr();
    let r = qr.r();
    let diag_max = r.diagonal().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if diag_max == 0.0 || r.diagonal().iter().any(|v| v.abs() <= 1e-12 * diag_max) {
        return Err(Error::RankDeficient);
    }
    let mut q = qr.q();
    normalize_column_signs(&mut q);
    Ok(q)
}

/// Completes a semi-orthonormal `Γ` (r × u) with `Γ0` (r × (r − u)) so that
/// `(Γ, Γ0)` is orthogonal.
///
/// Gram–Schmidt over the standard basis, always taking the candidate with the
/// largest residual next, so the output is a deterministic function of `Γ`.
pub fn orth_complete(gamma: &Mat) -> Result<Mat> {
    check_semi_orthonormal(gamma)?;
    let (r, u) = gamma.shape();
    let mut basis: Vec<Vector> = gamma.column_iter().map(|c| c.into_owned()).collect();
    let mut out = Mat::zeros(r, r - u);
    let mut used = alloc::vec![false; r];
    for k in 0..(r - u) {
        let mut best: Option<(usize, Vector, f64)> = None;
        for (j, taken) in used.iter().enumerate() {
            if *taken {
                continue;
            }
            let mut v = Vector::zeros(r);
            v[j] = 1.0;
            // two passes of modified Gram–Schmidt
            for _ in 0..2 {
                for b in &basis {
                    let c = b.dot(&v);
                    v.axpy(-c, b, 1.0);
                }
            }
            let nrm = v.norm();
            if best.as_ref().map_or(true, |(_, _, bn)| nrm > *bn) {
                best = Some((j, v, nrm));
            }
        }
        let (j, v, nrm) = best.ok_or(Error::RankDeficient)?;
        if nrm < 1e-8 {
            return Err(Error::RankDeficient);
        }
        used[j] = true;
        let v = v / nrm;
        out.set_column(k, &v);
        basis.push(v);
    }
    normalize_column_signs(&mut out);
    Ok(out)
}

/// Hotelling's vector correlation `q² = det(BᵀAAᵀB)` for semi-orthonormal
/// `A`, `B` of equal shape, clamped to `[0, 1]`.
pub fn q2_corr(a: &Mat, b: &Mat) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "q2 needs equal shapes, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    check_semi_orthonormal(a)?;
    check_semi_orthonormal(b)?;
    if a.ncols() == 0 {
        return Ok(1.0);
    }
    let c = b.transpose() * a;
    let m = &c * c.transpose();
    Ok(m.determinant().clamp(0.0, 1.0))
}

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &Mat, b: &Mat) -> Mat {
    a.kronecker(b)
}
