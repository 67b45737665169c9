//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{FlowError, Result};

/// Condition number above which a matrix is treated as singular.
pub const CONDITION_LIMIT: f64 = 1e8;

/// Check that a matrix is square and symmetric to within a small absolute slack.
pub fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(FlowError::Dimension {
            expected: m.nrows(),
            actual: m.ncols(),
        });
    }
    let scale = 1.0_f64.max(m.amax());
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-10 * scale {
                return Err(FlowError::Construction(format!(
                    "matrix is not symmetric at ({i},{j})"
                )));
            }
        }
    }
    Ok(())
}

/// Cholesky factorization of a user-supplied covariance. No regularization:
/// a matrix that is not SPD is a construction error.
pub fn spd_cholesky_strict(cov: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    check_symmetric(cov)?;
    Cholesky::new(cov.clone())
        .ok_or_else(|| FlowError::Construction("covariance is not positive-definite".into()))
}

/// Cholesky factorization of an estimated covariance, with the jitter policy
/// for near-singular sample covariances: add `1e-10 * trace/d * I`, and on
/// failure retry once with `1e-8 * trace/d * I`.
pub fn spd_cholesky_jittered(cov: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    check_symmetric(cov)?;
    let d = cov.nrows();
    let scale = (cov.trace() / d as f64).abs().max(f64::MIN_POSITIVE);
    for jitter in [1e-10 * scale, 1e-8 * scale] {
        let mut regularized = cov.clone();
        for i in 0..d {
            regularized[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(regularized) {
            return Ok(chol);
        }
    }
    Err(FlowError::SingularCovariance(
        "sample covariance not positive-definite after jitter".into(),
    ))
}

/// Ratio of extreme singular values.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Log-determinant of an SPD matrix from its Cholesky factor.
pub fn log_det_from_cholesky(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// Smallest eigenvalue of the symmetrized matrix; used for PSD checks.
pub fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    eig.eigenvalues.min()
}

/// Sample mean and unbiased (n−1 divisor) sample covariance. The covariance
/// is accumulated from outer products, so it is exactly symmetric.
pub fn sample_moments(points: &[DVector<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if points.len() < 2 {
        return Err(FlowError::EmptyEnsemble(format!(
            "sample moments need at least 2 points, got {}",
            points.len()
        )));
    }
    let n = points.len();
    let d = points[0].len();
    let mut mean = DVector::zeros(d);
    for p in points {
        if p.len() != d {
            return Err(FlowError::Dimension {
                expected: d,
                actual: p.len(),
            });
        }
        mean += p;
    }
    mean.unscale_mut(n as f64);
    let mut cov = DMatrix::zeros(d, d);
    for p in points {
        let diff = p - &mean;
        cov += &diff * diff.transpose();
    }
    cov.unscale_mut((n - 1) as f64);
    Ok((mean, cov))
}

pub fn all_finite_vec(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

pub fn all_finite_mat(m: &DMatrix<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}
