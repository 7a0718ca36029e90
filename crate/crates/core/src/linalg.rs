//! Small dense linear-algebra helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative threshold below which a penalty eigenvalue counts as zero.
pub const NULL_EIGEN_REL_TOL: f64 = 1e-10;

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted ascending.
pub fn sorted_symmetric_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(symmetrized(m));
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

pub fn symmetrized(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Number of eigenvalues of a PSD matrix that are zero relative to the largest.
pub fn null_space_dim(m: &DMatrix<f64>) -> usize {
    if m.nrows() == 0 {
        return 0;
    }
    let (values, _) = sorted_symmetric_eigen(m);
    let max = values.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    if max == 0.0 {
        return m.nrows();
    }
    values
        .iter()
        .filter(|&&v| v <= NULL_EIGEN_REL_TOL * max)
        .count()
}

/// Orthonormal basis of the (near-)null space of a symmetric PSD matrix.
pub fn null_space_basis(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let (values, vectors) = sorted_symmetric_eigen(m);
    let max = values.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let dim = if max == 0.0 {
        n
    } else {
        values
            .iter()
            .filter(|&&v| v <= NULL_EIGEN_REL_TOL * max)
            .count()
    };
    vectors.columns(0, dim).into_owned()
}

/// Householder-based basis `Z` (p × (p−1)) of the orthogonal complement of `c`,
/// so that `cᵀ Z = 0` and `Zᵀ Z = I`.
pub fn orthogonal_complement(c: &DVector<f64>) -> DMatrix<f64> {
    let p = c.len();
    let norm = c.norm();
    if norm == 0.0 {
        return DMatrix::identity(p, p).columns(1, p - 1).into_owned();
    }
    let mut v = c.clone();
    let sign = if c[0] >= 0.0 { 1.0 } else { -1.0 };
    v[0] += sign * norm;
    let vv = v.dot(&v);
    let q = DMatrix::identity(p, p) - (&v * v.transpose()) * (2.0 / vv);
    q.columns(1, p - 1).into_owned()
}

/// Row-wise Kronecker product: row i of the result is `a[i,:] ⊗ b[i,:]`.
pub fn row_kronecker(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.nrows() != b.nrows() {
        return Err(Error::LengthMismatch {
            expected: a.nrows(),
            actual: b.nrows(),
        });
    }
    let (ka, kb) = (a.ncols(), b.ncols());
    let mut out = DMatrix::zeros(a.nrows(), ka * kb);
    for i in 0..a.nrows() {
        for j in 0..ka {
            let aij = a[(i, j)];
            if aij == 0.0 {
                continue;
            }
            for l in 0..kb {
                out[(i, j * kb + l)] = aij * b[(i, l)];
            }
        }
    }
    Ok(out)
}

/// Pivoted Cholesky factor `F` (p × r) of a symmetric PSD matrix, `m = F Fᵀ`.
///
/// Stops once the largest remaining diagonal element falls below
/// `tol · max(diag)`. Fails if the remaining Schur complement has a clearly
/// negative diagonal, i.e. the matrix is not PSD.
pub fn pivoted_cholesky(m: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    let p = m.nrows();
    if p == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let mut a = symmetrized(m);
    let scale = (0..p).fold(0.0f64, |s, i| s.max(a[(i, i)].abs()));
    if scale == 0.0 {
        return Ok(DMatrix::zeros(p, 0));
    }
    let mut perm: Vec<usize> = (0..p).collect();
    let mut l = DMatrix::<f64>::zeros(p, p);
    let mut rank = 0;
    for k in 0..p {
        let (piv, dmax) = (k..p)
            .map(|i| (i, a[(perm[i], perm[i])]))
            .max_by(|x, y| x.1.total_cmp(&y.1))
            .expect("non-empty range");
        if dmax <= tol * scale {
            let dmin = (k..p).map(|i| a[(perm[i], perm[i])]).fold(f64::INFINITY, f64::min);
            if dmin < -1e-8 * scale {
                return Err(Error::Numerical(format!(
                    "matrix is not positive semi-definite (pivot {dmin:e})"
                )));
            }
            break;
        }
        perm.swap(k, piv);
        let pk = perm[k];
        let root = dmax.sqrt();
        l[(pk, k)] = root;
        for &pi in perm.iter().skip(k + 1) {
            l[(pi, k)] = a[(pi, pk)] / root;
        }
        for i in (k + 1)..p {
            let pi = perm[i];
            let lik = l[(pi, k)];
            if lik == 0.0 {
                continue;
            }
            for &pj in perm.iter().skip(k + 1) {
                a[(pi, pj)] -= lik * l[(pj, k)];
            }
        }
        rank += 1;
    }
    Ok(l.columns(0, rank).into_owned())
}

/// Symmetric PSD factor with one ridge retry (`+1e-10·trace/p` on the diagonal).
pub fn psd_factor(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    match pivoted_cholesky(m, 1e-13) {
        Ok(f) => Ok(f),
        Err(_) => {
            let p = m.nrows() as f64;
            let ridge = 1e-10 * m.trace().abs() / p;
            let mut r = m.clone();
            for i in 0..m.nrows() {
                r[(i, i)] += ridge;
            }
            pivoted_cholesky(&r, 1e-13)
        }
    }
}

/// Numerical rank of a matrix after scaling its columns to unit norm.
pub fn column_scaled_rank(x: &DMatrix<f64>, rel_tol: f64) -> usize {
    if x.ncols() == 0 {
        return 0;
    }
    let mut scaled = x.clone();
    for mut col in scaled.column_iter_mut() {
        let n = col.norm();
        if n > 0.0 {
            col /= n;
        }
    }
    let sv = scaled.singular_values();
    let max = sv.iter().fold(0.0f64, |a, &v| a.max(v));
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&v| v > rel_tol * max).count()
}

/// Rank-`r` pseudo-inverse of a symmetric matrix built from its `r` largest eigenpairs.
pub fn truncated_pinv(m: &DMatrix<f64>, r: usize) -> DMatrix<f64> {
    let n = m.nrows();
    let (values, vectors) = sorted_symmetric_eigen(m);
    let mut out = DMatrix::zeros(n, n);
    for idx in (n.saturating_sub(r))..n {
        let v = values[idx];
        if v <= 0.0 {
            continue;
        }
        let u = vectors.column(idx);
        out += (u * u.transpose()) / v;
    }
    out
}

/// Invert a symmetric positive-definite matrix via Cholesky.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    nalgebra::Cholesky::new(symmetrized(m))
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Numerical("matrix is not positive definite".into()))
}

/// Quadratic-form diagonal: `diag(X M Xᵀ)`.
pub fn quad_diag(x: &DMatrix<f64>, m: &DMatrix<f64>) -> DVector<f64> {
    let xm = x * m;
    DVector::from_iterator(
        x.nrows(),
        (0..x.nrows()).map(|i| xm.row(i).dot(&x.row(i))),
    )
}
