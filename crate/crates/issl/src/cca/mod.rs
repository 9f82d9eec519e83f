//! Regularized canonical correlation analysis and the projection-weighted
//! summary score, plus the layer-probing protocol in `protocol`.
//!
//! Fitting whitens both views with ridge-regularized inverse square roots
//! and reads the canonical correlations off the singular values of the
//! whitened cross-covariance. Directions are recovered through the
//! whitening maps, so canonical variates are decorrelated on the training
//! data when eps = 0.

pub mod protocol;

use crate::error::{Error, Result};
use crate::numcore::{inv_sqrt_from_eig, svd, sym_eig, Matrix};

#[derive(Debug, Clone)]
pub struct CcaModel {
    /// d_x x m canonical directions for the representation view.
    pub directions_x: Matrix,
    /// d_y x m canonical directions for the label view.
    pub directions_y: Matrix,
    /// m canonical correlations, non-increasing, each in [0,1].
    pub correlations: Vec<f64>,
    pub eps_x: f64,
    pub eps_y: f64,
    pub mean_x: Vec<f64>,
    pub mean_y: Vec<f64>,
}

/// Sample means and covariances shared by every (eps_x, eps_y) fit of the
/// same data. Covariances use the n-1 denominator; CCA is scale-invariant
/// so the choice only has to be consistent.
#[derive(Debug, Clone)]
pub struct CovStats {
    pub sxx: Matrix,
    pub syy: Matrix,
    pub sxy: Matrix,
    pub mean_x: Vec<f64>,
    pub mean_y: Vec<f64>,
    pub n: usize,
}

fn center_columns(m: &Matrix) -> (Matrix, Vec<f64>) {
    let means = m.col_means().row(0).to_vec();
    let mut c = m.clone();
    for i in 0..c.rows() {
        let row = c.row_mut(i);
        for (j, v) in row.iter_mut().enumerate() {
            *v -= means[j];
        }
    }
    (c, means)
}

pub fn cov_stats(x: &Matrix, y: &Matrix) -> Result<CovStats> {
    let n = x.rows();
    if y.rows() != n {
        return Err(Error::Dimension(format!("{} x rows vs {} y rows", n, y.rows())));
    }
    if n < 2 {
        return Err(Error::InsufficientPoints(format!("cca needs n >= 2, got {n}")));
    }
    let (xc, mean_x) = center_columns(x);
    let (yc, mean_y) = center_columns(y);
    let denom = 1.0 / (n as f64 - 1.0);
    let sxx = xc.matmul_tn(&xc)?.scale(denom);
    let syy = yc.matmul_tn(&yc)?.scale(denom);
    let sxy = xc.matmul_tn(&yc)?.scale(denom);
    if !sxx.is_finite() || !syy.is_finite() || !sxy.is_finite() {
        return Err(Error::Numerical("non-finite covariance".into()));
    }
    Ok(CovStats { sxx, syy, sxy, mean_x, mean_y, n })
}

/// Covariance stats with both views' eigendecompositions factored once, so
/// a ridge grid pays for eig(Sxx) and eig(Syy) a single time. Fits from
/// here are bit-identical to `cca_fit_from_stats`.
pub struct PreparedStats<'a> {
    stats: &'a CovStats,
    eig_x: (Vec<f64>, Matrix),
    eig_y: (Vec<f64>, Matrix),
}

pub fn prepare_stats(stats: &CovStats) -> Result<PreparedStats<'_>> {
    Ok(PreparedStats {
        stats,
        eig_x: sym_eig(&stats.sxx)?,
        eig_y: sym_eig(&stats.syy)?,
    })
}

pub fn cca_fit_prepared(p: &PreparedStats, eps_x: f64, eps_y: f64) -> Result<CcaModel> {
    if eps_x < 0.0 || eps_y < 0.0 {
        return Err(Error::Config(format!("eps must be >= 0, got {eps_x}, {eps_y}")));
    }
    let stats = p.stats;
    let wx = inv_sqrt_from_eig(&p.eig_x.0, &p.eig_x.1, eps_x)?;
    let wy = inv_sqrt_from_eig(&p.eig_y.0, &p.eig_y.1, eps_y)?;
    let t = wx.matmul(&stats.sxy)?.matmul(&wy)?;
    let (u, s, vt) = svd(&t)?;
    let m = stats.sxx.rows().min(stats.syy.rows());
    let correlations: Vec<f64> = s.iter().take(m).map(|&v| v.clamp(0.0, 1.0)).collect();
    let mut ux = Matrix::zeros(u.rows(), m);
    for i in 0..u.rows() {
        for j in 0..m {
            ux.set(i, j, u.get(i, j));
        }
    }
    let v = vt.transpose();
    let mut vy = Matrix::zeros(v.rows(), m);
    for i in 0..v.rows() {
        for j in 0..m {
            vy.set(i, j, v.get(i, j));
        }
    }
    Ok(CcaModel {
        directions_x: wx.matmul(&ux)?,
        directions_y: wy.matmul(&vy)?,
        correlations,
        eps_x,
        eps_y,
        mean_x: stats.mean_x.clone(),
        mean_y: stats.mean_y.clone(),
    })
}

pub fn cca_fit_from_stats(stats: &CovStats, eps_x: f64, eps_y: f64) -> Result<CcaModel> {
    cca_fit_prepared(&prepare_stats(stats)?, eps_x, eps_y)
}

/// Fit CCA between X (n x d_x) and Y (n x d_y). Columns are mean-centered
/// internally; the number of canonical pairs is min(d_x, d_y).
pub fn cca_fit(x: &Matrix, y: &Matrix, eps_x: f64, eps_y: f64) -> Result<CcaModel> {
    let stats = cov_stats(x, y)?;
    cca_fit_from_stats(&stats, eps_x, eps_y)
}

/// PWCCA weights: alpha_i proportional to sum_j |<h_i, x_j>| where h_i is
/// the i-th canonical variate of the given X, normalized to unit length,
/// and x_j ranges over the columns of centered X. Degenerate variates
/// (zero norm) get zero raw weight; an all-zero total falls back to
/// uniform weights.
fn pwcca_weights(xc: &Matrix, directions_x: &Matrix) -> Result<Vec<f64>> {
    let mut h = xc.matmul(directions_x)?;
    let m = h.cols();
    for j in 0..m {
        let norm: f64 = (0..h.rows()).map(|i| h.get(i, j).powi(2)).sum::<f64>().sqrt();
        if norm > 0.0 {
            for i in 0..h.rows() {
                h.set(i, j, h.get(i, j) / norm);
            }
        }
    }
    let w = h.matmul_tn(xc)?;
    let mut alpha: Vec<f64> = (0..m).map(|i| w.row(i).iter().map(|v| v.abs()).sum()).collect();
    let total: f64 = alpha.iter().sum();
    if total > 0.0 {
        for a in alpha.iter_mut() {
            *a /= total;
        }
    } else {
        log::warn!("pwcca weights degenerate (zero projections), using uniform");
        alpha = vec![1.0 / m as f64; m];
    }
    Ok(alpha)
}

/// Projection-weighted score on the data the weights are computed from:
/// sum of alpha_i * rho_i with the model's training correlations.
pub fn pwcca_score(model: &CcaModel, x: &Matrix) -> Result<f64> {
    if x.cols() != model.directions_x.rows() {
        return Err(Error::Dimension(format!(
            "x has {} cols, model expects {}",
            x.cols(),
            model.directions_x.rows()
        )));
    }
    let (xc, _) = center_columns(x);
    let alpha = pwcca_weights(&xc, &model.directions_x)?;
    let score: f64 = alpha.iter().zip(&model.correlations).map(|(a, r)| a * r).sum();
    Ok(score.clamp(0.0, 1.0))
}

/// Score a held-out split: project with the training directions, recompute
/// each canonical pair's Pearson correlation on the split (centered on the
/// split's own means, clipped to [0,1]), and weight by PWCCA weights from
/// the split's X. Used for both dev selection and test reporting.
pub fn held_out_score(model: &CcaModel, x: &Matrix, y: &Matrix) -> Result<f64> {
    if x.rows() != y.rows() {
        return Err(Error::Dimension(format!("{} x rows vs {} y rows", x.rows(), y.rows())));
    }
    if x.rows() < 2 {
        return Err(Error::InsufficientPoints(format!(
            "held-out split needs n >= 2, got {}",
            x.rows()
        )));
    }
    let (xc, _) = center_columns(x);
    let (yc, _) = center_columns(y);
    let u = xc.matmul(&model.directions_x)?;
    let v = yc.matmul(&model.directions_y)?;
    let m = model.correlations.len();
    let n = u.rows();
    let mut rho = vec![0.0f64; m];
    for j in 0..m {
        let mut suv = 0.0;
        let mut suu = 0.0;
        let mut svv = 0.0;
        let mu: f64 = (0..n).map(|i| u.get(i, j)).sum::<f64>() / n as f64;
        let mv: f64 = (0..n).map(|i| v.get(i, j)).sum::<f64>() / n as f64;
        for i in 0..n {
            let a = u.get(i, j) - mu;
            let b = v.get(i, j) - mv;
            suv += a * b;
            suu += a * a;
            svv += b * b;
        }
        if suu > 0.0 && svv > 0.0 {
            rho[j] = (suv / (suu.sqrt() * svv.sqrt())).clamp(0.0, 1.0);
        }
    }
    let alpha = pwcca_weights(&xc, &model.directions_x)?;
    let score: f64 = alpha.iter().zip(&rho).map(|(a, r)| a * r).sum();
    Ok(score.clamp(0.0, 1.0))
}
