//! Small dense decompositions: one-sided Jacobi SVD and symmetric Jacobi
//! eigendecomposition. Jacobi is slow but accurate at the sizes used here;
//! any convergent method may substitute as long as the contracts hold.

use super::matrix::Matrix;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 120;

/// Singular value decomposition `m = U . diag(S) . Vt`.
///
/// U is rows x min_dim with orthonormal columns (zero columns for zero
/// singular values), S is non-negative and non-increasing, Vt is
/// min_dim x cols with orthonormal rows.
pub fn svd(m: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    if !m.is_finite() {
        return Err(Error::Numerical("svd: non-finite input".into()));
    }
    if m.rows() >= m.cols() {
        svd_tall(m)
    } else {
        // svd(mᵀ) = V S Uᵀ
        let (u, s, vt) = svd_tall(&m.transpose())?;
        Ok((vt.transpose(), s, u.transpose()))
    }
}

/// One-sided Jacobi on a matrix with rows >= cols.
fn svd_tall(a: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let (rows, cols) = a.shape();
    let mut w = a.clone();
    let mut v = Matrix::identity(cols);
    let scale = a.frobenius_norm();
    let tol = 1e-15;

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut changed = false;
        for p in 0..cols.saturating_sub(1) {
            for q in p + 1..cols {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for i in 0..rows {
                    let wp = w.get(i, p);
                    let wq = w.get(i, q);
                    alpha += wp * wp;
                    beta += wq * wq;
                    gamma += wp * wq;
                }
                let denom = (alpha * beta).sqrt();
                if denom <= f64::MIN_POSITIVE || gamma.abs() <= tol * denom {
                    continue;
                }
                changed = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let wp = w.get(i, p);
                    let wq = w.get(i, q);
                    w.set(i, p, c * wp - s * wq);
                    w.set(i, q, s * wp + c * wq);
                }
                for i in 0..cols {
                    let vp = v.get(i, p);
                    let vq = v.get(i, q);
                    v.set(i, p, c * vp - s * vq);
                    v.set(i, q, s * vp + c * vq);
                }
            }
        }
        if !changed {
            converged = true;
            break;
        }
    }
    if !converged && scale > 0.0 {
        return Err(Error::Numerical(format!(
            "svd: one-sided Jacobi did not converge in {MAX_SWEEPS} sweeps"
        )));
    }

    let mut order: Vec<usize> = (0..cols).collect();
    let norms: Vec<f64> = (0..cols)
        .map(|j| (0..rows).map(|i| w.get(i, j).powi(2)).sum::<f64>().sqrt())
        .collect();
    order.sort_by(|&x, &y| norms[y].partial_cmp(&norms[x]).unwrap());

    let mut u = Matrix::zeros(rows, cols);
    let mut s = vec![0.0; cols];
    let mut vt = Matrix::zeros(cols, cols);
    for (dst, &src) in order.iter().enumerate() {
        let sigma = norms[src];
        s[dst] = sigma;
        if sigma > 0.0 {
            for i in 0..rows {
                u.set(i, dst, w.get(i, src) / sigma);
            }
        }
        for i in 0..cols {
            vt.set(dst, i, v.get(i, src));
        }
    }
    Ok((u, s, vt))
}

/// Eigendecomposition of a symmetric matrix: `m = Q . diag(vals) . Qᵀ`.
/// Eigenvalues are sorted non-increasing; Q's columns are the eigenvectors.
pub fn sym_eig(m: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let n = m.rows();
    if m.cols() != n {
        return Err(Error::Dimension(format!("sym_eig: {}x{} not square", m.rows(), m.cols())));
    }
    check_symmetric(m)?;
    let mut a = m.clone();
    let mut q = Matrix::identity(n);
    let scale = m.frobenius_norm().max(f64::MIN_POSITIVE);

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += a.get(i, j).powi(2);
            }
        }
        if off.sqrt() <= 1e-14 * scale {
            converged = true;
            break;
        }
        for p in 0..n.saturating_sub(1) {
            for qi in p + 1..n {
                let apq = a.get(p, qi);
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a.get(qi, qi) - a.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                // rows/columns p and q of a
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, qi);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, qi, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(qi, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(qi, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let qkp = q.get(k, p);
                    let qkq = q.get(k, qi);
                    q.set(k, p, c * qkp - s * qkq);
                    q.set(k, qi, s * qkp + c * qkq);
                }
            }
        }
    }
    if !converged {
        return Err(Error::Numerical(format!(
            "sym_eig: Jacobi did not converge in {MAX_SWEEPS} sweeps"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    let diag: Vec<f64> = (0..n).map(|i| a.get(i, i)).collect();
    order.sort_by(|&x, &y| diag[y].partial_cmp(&diag[x]).unwrap());
    let vals: Vec<f64> = order.iter().map(|&i| diag[i]).collect();
    let mut vecs = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for i in 0..n {
            vecs.set(i, dst, q.get(i, src));
        }
    }
    Ok((vals, vecs))
}

fn check_symmetric(m: &Matrix) -> Result<()> {
    let scale = m.frobenius_norm().max(1.0);
    for i in 0..m.rows() {
        for j in i + 1..m.cols() {
            if (m.get(i, j) - m.get(j, i)).abs() > 1e-8 * scale {
                return Err(Error::Contract(format!(
                    "symmetric input required, asymmetry at ({i},{j})"
                )));
            }
        }
    }
    Ok(())
}

/// `(m + eps I)^(-1/2)` for symmetric positive semi-definite `m`.
pub fn sym_inv_sqrt(m: &Matrix, eps: f64) -> Result<Matrix> {
    let (vals, q) = sym_eig(m)?;
    inv_sqrt_from_eig(&vals, &q, eps)
}

/// Same map given a precomputed eigendecomposition, so one factorization
/// serves a whole ridge grid. The shift applies to the eigenvalues, making
/// this bit-identical to `sym_inv_sqrt` on the original matrix.
pub fn inv_sqrt_from_eig(vals: &[f64], q: &Matrix, eps: f64) -> Result<Matrix> {
    let n = q.rows();
    let mut scaled = Matrix::zeros(n, n);
    for j in 0..n {
        let lam = vals[j] + eps;
        if lam <= 0.0 {
            return Err(Error::Numerical(format!(
                "sym_inv_sqrt: eigenvalue {} + eps {} not positive",
                vals[j], eps
            )));
        }
        let inv = 1.0 / lam.sqrt();
        for i in 0..n {
            scaled.set(i, j, q.get(i, j) * inv);
        }
    }
    scaled.matmul_nt(q)
}
