//! Divergences, two-sample discrepancies, and the trajectory record type
//! shared by the flow runners.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::bbvi::GaussianVariationalParams;
use crate::error::{FlowError, Result};
use crate::kernels;
use crate::linalg;
use crate::svgd::ParticleEnsemble;

/// State captured at a recorded step: either a particle cloud or the
/// parameters of the variational Gaussian.
// Params is bigger than Particles because it caches factorizations, but a
// trajectory holds few records, so boxing would only add indirection.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone)]
pub enum FlowState {
    Particles(ParticleEnsemble),
    Params(GaussianVariationalParams),
}

/// One recorded step of a flow.
#[derive(Debug, Clone)]
pub struct RecordedStep {
    pub step: usize,
    pub time: f64,
    pub state: FlowState,
    pub diagnostics: BTreeMap<String, f64>,
}

/// The sequence of recorded steps produced by a flow runner.
#[derive(Debug, Clone, Default)]
pub struct FlowTrajectory {
    steps: Vec<RecordedStep>,
}

impl FlowTrajectory {
    pub(crate) fn new() -> Self {
        Self { steps: Vec::new() }
    }

    /// Append a recorded step; indices must strictly increase.
    pub fn push(&mut self, step: RecordedStep) -> Result<()> {
        if let Some(last) = self.steps.last() {
            if step.step <= last.step {
                return Err(FlowError::Construction(format!(
                    "recorded step indices must increase: {} after {}",
                    step.step, last.step
                )));
            }
        }
        self.steps.push(step);
        Ok(())
    }

    pub fn recorded_steps(&self) -> &[RecordedStep] {
        &self.steps
    }

    pub fn last(&self) -> Option<&RecordedStep> {
        self.steps.last()
    }

    /// Check that every recorded time equals `step · step_size` up to
    /// accumulated rounding.
    pub fn validate_times(&self, step_size: f64) -> Result<()> {
        for rec in &self.steps {
            let expected = rec.step as f64 * step_size;
            let tol = 1e-9 * (1.0 + expected.abs());
            if (rec.time - expected).abs() > tol {
                return Err(FlowError::Numerical {
                    what: format!(
                        "recorded time {} inconsistent with step {} at step size {}",
                        rec.time, rec.step, step_size
                    ),
                    step: Some(rec.step),
                });
            }
        }
        Ok(())
    }
}

/// Closed-form `KL(q ‖ p)` between the variational Gaussian `q` and a
/// Gaussian `p` given by mean and covariance.
pub fn gaussian_kl(
    q: &GaussianVariationalParams,
    p_mean: &DVector<f64>,
    p_cov: &DMatrix<f64>,
) -> Result<f64> {
    let d = q.dim();
    if p_mean.len() != d {
        return Err(FlowError::Dimension {
            expected: d,
            actual: p_mean.len(),
        });
    }
    if p_cov.nrows() != d || p_cov.ncols() != d {
        return Err(FlowError::Dimension {
            expected: d,
            actual: p_cov.nrows(),
        });
    }
    let chol = linalg::spd_cholesky_strict(p_cov)?;
    let log_det_p = linalg::log_det_from_cholesky(&chol);
    let log_det_q = 2.0 * q.log_abs_det_a();
    let sigma_q = q.sigma();
    let trace_term = chol.solve(&sigma_q).trace();
    let delta = q.mu() - p_mean;
    let maha = delta.dot(&chol.solve(&delta));
    Ok(0.5 * (trace_term + maha - d as f64 + log_det_p - log_det_q))
}

/// Differential entropy of the variational Gaussian.
pub fn gaussian_entropy(q: &GaussianVariationalParams) -> f64 {
    let d = q.dim() as f64;
    0.5 * d * (1.0 + (2.0 * std::f64::consts::PI).ln()) + q.log_abs_det_a()
}

/// Cross-entropy `−E_q[log N(x; p_mean, p_cov)]` in closed form.
pub fn gaussian_cross_entropy(
    q: &GaussianVariationalParams,
    p_mean: &DVector<f64>,
    p_cov: &DMatrix<f64>,
) -> Result<f64> {
    let d = q.dim();
    if p_mean.len() != d || p_cov.nrows() != d || p_cov.ncols() != d {
        return Err(FlowError::Dimension {
            expected: d,
            actual: p_mean.len(),
        });
    }
    let chol = linalg::spd_cholesky_strict(p_cov)?;
    let log_det_p = linalg::log_det_from_cholesky(&chol);
    let sigma_q = q.sigma();
    let trace_term = chol.solve(&sigma_q).trace();
    let delta = q.mu() - p_mean;
    let maha = delta.dot(&chol.solve(&delta));
    Ok(0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det_p + trace_term + maha))
}

/// Closed-form evidence lower bound against a target whose log density is
/// `log_scale + log N(x; p_mean, p_cov)`. Computed as entropy minus
/// cross-entropy, a route independent of [`gaussian_kl`].
pub fn gaussian_elbo(
    q: &GaussianVariationalParams,
    p_mean: &DVector<f64>,
    p_cov: &DMatrix<f64>,
    log_scale: f64,
) -> Result<f64> {
    Ok(log_scale + gaussian_entropy(q) - gaussian_cross_entropy(q, p_mean, p_cov)?)
}

fn check_sample_set(name: &str, points: &[DVector<f64>], dim: usize) -> Result<()> {
    if points.len() < 2 {
        return Err(FlowError::EmptyEnsemble(format!(
            "{name} needs at least two samples, got {}",
            points.len()
        )));
    }
    for p in points {
        if p.len() != dim {
            return Err(FlowError::Dimension {
                expected: dim,
                actual: p.len(),
            });
        }
    }
    Ok(())
}

/// Sum a set of pairwise values after sorting them, so that the result
/// depends only on the multiset of values. This makes the discrepancies
/// below exactly symmetric and exactly zero on identical point sets.
fn sorted_sum(mut values: Vec<f64>) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum()
}

fn mean_pairwise<F>(x: &[DVector<f64>], y: &[DVector<f64>], f: F) -> f64
where
    F: Fn(&DVector<f64>, &DVector<f64>) -> f64,
{
    let mut values = Vec::with_capacity(x.len() * y.len());
    for xi in x {
        for yj in y {
            values.push(f(xi, yj));
        }
    }
    sorted_sum(values) / (x.len() as f64 * y.len() as f64)
}

/// Energy distance between two sample sets:
/// `2·mean‖xᵢ−yⱼ‖ − mean‖xᵢ−xᵢ'‖ − mean‖yⱼ−yⱼ'‖`,
/// with each mean taken over all ordered pairs. Nonnegative, exactly
/// symmetric, and exactly zero when the two point sets coincide.
pub fn energy_distance(x: &[DVector<f64>], y: &[DVector<f64>]) -> Result<f64> {
    let dim = x.first().map_or(0, |p| p.len());
    check_sample_set("X", x, dim)?;
    check_sample_set("Y", y, dim)?;
    let dist = |a: &DVector<f64>, b: &DVector<f64>| (a - b).norm();
    let cross = mean_pairwise(x, y, dist);
    let within_x = mean_pairwise(x, x, dist);
    let within_y = mean_pairwise(y, y, dist);
    Ok(2.0 * cross - (within_x + within_y))
}

/// Squared maximum mean discrepancy under the RBF kernel with rate `gamma`,
/// as a V-statistic. A bandwidth-dependent companion to [`energy_distance`].
pub fn rbf_mmd(x: &[DVector<f64>], y: &[DVector<f64>], gamma: f64) -> Result<f64> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(FlowError::Construction(format!(
            "bandwidth rate must be positive and finite, got {gamma}"
        )));
    }
    let dim = x.first().map_or(0, |p| p.len());
    check_sample_set("X", x, dim)?;
    check_sample_set("Y", y, dim)?;
    let k = |a: &DVector<f64>, b: &DVector<f64>| (-gamma * (a - b).norm_squared()).exp();
    let cross = mean_pairwise(x, y, k);
    let within_x = mean_pairwise(x, x, k);
    let within_y = mean_pairwise(y, y, k);
    Ok((within_x + within_y) - 2.0 * cross)
}

/// [`rbf_mmd`] with the rate chosen by the median heuristic on the pooled
/// samples.
pub fn rbf_mmd_median(x: &[DVector<f64>], y: &[DVector<f64>]) -> Result<f64> {
    let pooled: Vec<DVector<f64>> = x.iter().chain(y.iter()).cloned().collect();
    let gamma = kernels::median_heuristic_bandwidth(&pooled)?;
    rbf_mmd(x, y, gamma)
}

/// Sample mean and unbiased sample covariance.
pub fn moment_summary(x: &[DVector<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    linalg::sample_moments(x)
}
