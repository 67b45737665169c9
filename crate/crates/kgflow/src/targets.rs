//! Target distributions with analytic log-densities and scores.
//!
//! A [`TargetDensity`] carries an unnormalized log-density, its gradient (the
//! score), and optionally the log-evidence `log ∫ exp(log_density) dx`. The
//! evidence is stored separately rather than folded into the density so that
//! unnormalized posteriors cannot silently masquerade as normalized ones:
//! `log_normalizer` is `None` whenever it is not known analytically, and the
//! normalized density is `exp(log_density - log_normalizer)` when it is.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{FlowError, Result};
use crate::linalg;

type DensityFn = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;
type ScoreFn = Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>;

/// An unnormalized target density with analytic score.
#[derive(Clone)]
pub struct TargetDensity {
    dim: usize,
    log_density: DensityFn,
    score: ScoreFn,
    log_normalizer: Option<f64>,
    moments: Option<(DVector<f64>, DMatrix<f64>)>,
}

impl std::fmt::Debug for TargetDensity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TargetDensity")
            .field("dim", &self.dim)
            .field("log_normalizer", &self.log_normalizer)
            .finish_non_exhaustive()
    }
}

impl TargetDensity {
    /// Build a target from raw parts. `log_normalizer`, when given, must be
    /// the log of `∫ exp(log_density(x)) dx`.
    pub fn new<L, S>(dim: usize, log_density: L, score: S, log_normalizer: Option<f64>) -> Result<Self>
    where
        L: Fn(&DVector<f64>) -> f64 + Send + Sync + 'static,
        S: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
    {
        if dim == 0 {
            return Err(FlowError::Construction("dimension must be positive".into()));
        }
        Ok(Self {
            dim,
            log_density: Arc::new(log_density),
            score: Arc::new(score),
            log_normalizer,
            moments: None,
        })
    }

    /// Attach exact mean and covariance, when known analytically.
    pub fn with_moments(mut self, mean: DVector<f64>, covariance: DMatrix<f64>) -> Self {
        self.moments = Some((mean, covariance));
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Unnormalized log-density at `x`.
    pub fn log_density_unnormalized(&self, x: &DVector<f64>) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        (self.log_density)(x)
    }

    /// Gradient of the unnormalized log-density at `x`.
    pub fn score(&self, x: &DVector<f64>) -> DVector<f64> {
        debug_assert_eq!(x.len(), self.dim);
        (self.score)(x)
    }

    /// Log-evidence `log ∫ exp(log_density) dx`, when known.
    pub fn log_normalizer(&self) -> Option<f64> {
        self.log_normalizer
    }

    /// Normalized log-density; errors when the evidence is unknown.
    pub fn log_density_normalized(&self, x: &DVector<f64>) -> Result<f64> {
        let z = self.log_normalizer.ok_or_else(|| {
            FlowError::Construction("density has no known normalizer".into())
        })?;
        Ok(self.log_density_unnormalized(x) - z)
    }

    /// Exact mean and covariance, when the family provides them.
    pub fn moments(&self) -> Option<(&DVector<f64>, &DMatrix<f64>)> {
        self.moments.as_ref().map(|(m, c)| (m, c))
    }
}

/// Log of the multivariate normal constant `(2π)^{-d/2} |Σ|^{-1/2}`.
pub fn gaussian_log_norm_constant(covariance: &DMatrix<f64>) -> Result<f64> {
    let d = covariance.nrows();
    let chol = linalg::spd_cholesky_strict(covariance)?;
    Ok(-0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln()
        - 0.5 * linalg::log_det_from_cholesky(&chol))
}

/// Exact multivariate normal target. The stored log-density is fully
/// normalized (constant included), so the log-evidence is zero.
pub fn make_gaussian(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<TargetDensity> {
    let d = mean.len();
    if covariance.nrows() != d || covariance.ncols() != d {
        return Err(FlowError::Dimension {
            expected: d,
            actual: covariance.nrows().max(covariance.ncols()),
        });
    }
    let chol = linalg::spd_cholesky_strict(&covariance)?;
    let log_const = -0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln()
        - 0.5 * linalg::log_det_from_cholesky(&chol);

    let mean_for_density = mean.clone();
    let chol_for_density = chol.clone();
    let log_density = move |x: &DVector<f64>| {
        let diff = x - &mean_for_density;
        let solved = chol_for_density.solve(&diff);
        log_const - 0.5 * diff.dot(&solved)
    };

    let mean_for_score = mean.clone();
    let score = move |x: &DVector<f64>| {
        let diff = x - &mean_for_score;
        -chol.solve(&diff)
    };

    Ok(TargetDensity::new(d, log_density, score, Some(0.0))?
        .with_moments(mean, covariance))
}

/// Parameters of a finite Gaussian mixture.
#[derive(Debug, Clone)]
pub struct GaussianMixtureSpec {
    pub weights: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
}

impl GaussianMixtureSpec {
    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 {
            return Err(FlowError::Construction("mixture has no components".into()));
        }
        if self.means.len() != k || self.covariances.len() != k {
            return Err(FlowError::Construction(
                "mixture weights, means, covariances must have equal length".into(),
            ));
        }
        if self.weights.iter().any(|w| *w <= 0.0) {
            return Err(FlowError::Construction(
                "mixture weights must be strictly positive".into(),
            ));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(FlowError::Construction(format!(
                "mixture weights sum to {total}, expected 1"
            )));
        }
        let d = self.means[0].len();
        for mean in &self.means {
            if mean.len() != d {
                return Err(FlowError::Dimension {
                    expected: d,
                    actual: mean.len(),
                });
            }
        }
        for cov in &self.covariances {
            if cov.nrows() != d || cov.ncols() != d {
                return Err(FlowError::Dimension {
                    expected: d,
                    actual: cov.nrows().max(cov.ncols()),
                });
            }
            linalg::spd_cholesky_strict(cov)?;
        }
        Ok(())
    }
}

/// Normalized Gaussian mixture target. The score uses log-sum-exp-stabilized
/// responsibilities so it stays accurate deep in the tails.
pub fn make_mixture(spec: &GaussianMixtureSpec) -> Result<TargetDensity> {
    spec.validate()?;
    let d = spec.means[0].len();
    let k = spec.weights.len();

    // Per-component (log weight + log constant, cholesky, mean).
    let mut log_prefix = Vec::with_capacity(k);
    let mut factors = Vec::with_capacity(k);
    for i in 0..k {
        let chol = linalg::spd_cholesky_strict(&spec.covariances[i])?;
        let log_const = -0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln()
            - 0.5 * linalg::log_det_from_cholesky(&chol);
        log_prefix.push(spec.weights[i].ln() + log_const);
        factors.push(chol);
    }
    let means = spec.means.clone();

    let component_logs = {
        let log_prefix = log_prefix.clone();
        let factors = factors.clone();
        let means = means.clone();
        move |x: &DVector<f64>| -> Vec<f64> {
            (0..k)
                .map(|i| {
                    let diff = x - &means[i];
                    log_prefix[i] - 0.5 * diff.dot(&factors[i].solve(&diff))
                })
                .collect()
        }
    };

    let logs_for_density = component_logs.clone();
    let log_density = move |x: &DVector<f64>| log_sum_exp(&logs_for_density(x));

    let score = move |x: &DVector<f64>| {
        let logs = component_logs(x);
        let lse = log_sum_exp(&logs);
        let mut acc = DVector::zeros(d);
        for i in 0..k {
            let responsibility = (logs[i] - lse).exp();
            let diff = x - &means[i];
            acc -= factors[i].solve(&diff) * responsibility;
        }
        acc
    };

    // Exact mixture moments.
    let mut mean = DVector::zeros(d);
    for i in 0..k {
        mean += &spec.means[i] * spec.weights[i];
    }
    let mut cov = DMatrix::zeros(d, d);
    for i in 0..k {
        let centered = &spec.means[i] - &mean;
        cov += (&spec.covariances[i] + centered.clone() * centered.transpose()) * spec.weights[i];
    }

    Ok(TargetDensity::new(d, log_density, score, Some(0.0))?.with_moments(mean, cov))
}

fn log_sum_exp(logs: &[f64]) -> f64 {
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

/// Unnormalized posterior: prior log-density plus a log-likelihood. The
/// evidence is unknown in general, so `log_normalizer` is absent.
pub fn posterior_from_prior_likelihood<L, S>(
    prior: &TargetDensity,
    log_likelihood: L,
    score_likelihood: S,
) -> Result<TargetDensity>
where
    L: Fn(&DVector<f64>) -> f64 + Send + Sync + 'static,
    S: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static,
{
    let d = prior.dim();
    let prior_density = prior.log_density.clone();
    let prior_score = prior.score.clone();
    TargetDensity::new(
        d,
        move |x| prior_density(x) + log_likelihood(x),
        move |x| {
            let s = score_likelihood(x);
            debug_assert_eq!(s.len(), d, "likelihood score dimension mismatch");
            prior_score(x) + s
        },
        None,
    )
}

/// Central finite-difference score, the validation oracle for analytic
/// scores. Step per coordinate is `1e-5 * max(1, |x_i|)`.
pub fn finite_difference_score(target: &TargetDensity, x: &DVector<f64>) -> DVector<f64> {
    let mut grad = DVector::zeros(x.len());
    for i in 0..x.len() {
        let h = 1e-5 * 1.0_f64.max(x[i].abs());
        let mut hi = x.clone();
        hi[i] += h;
        let mut lo = x.clone();
        lo[i] -= h;
        grad[i] = (target.log_density_unnormalized(&hi) - target.log_density_unnormalized(&lo))
            / (2.0 * h);
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::{self, GridSpec};
    use crate::rng;
    use approx::assert_relative_eq;

    fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        let denom = a.norm().max(b.norm()).max(1e-12);
        (a - b).norm() / denom
    }

    #[test]
    fn standard_gaussian_score_at_mode_and_offset() {
        let target = make_gaussian(DVector::zeros(1), DMatrix::identity(1, 1)).unwrap();
        assert_eq!(target.score(&DVector::from_element(1, 0.0))[0], 0.0);
        assert_relative_eq!(
            target.score(&DVector::from_element(1, 2.0))[0],
            -2.0,
            max_relative = 1e-12
        );
    }

    #[test]
    fn gaussian_norm_constant_matches_direct_evaluation() {
        // d = 2, Σ = diag(2, 2): -(d/2) log 2π - ½ log det Σ = -log 2π - log 2.
        let cov = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 2.0]));
        let expected = -(2.0 * std::f64::consts::PI).ln() - 2.0_f64.ln();
        assert_relative_eq!(
            gaussian_log_norm_constant(&cov).unwrap(),
            expected,
            max_relative = 1e-12
        );
        // The stored density is fully normalized, so the evidence is zero.
        let target = make_gaussian(DVector::from_vec(vec![1.0, 1.0]), cov).unwrap();
        assert_eq!(target.log_normalizer(), Some(0.0));
    }

    #[test]
    fn gaussian_rejects_non_spd_and_mismatched_dims() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            make_gaussian(DVector::zeros(2), bad),
            Err(FlowError::Construction(_))
        ));
        assert!(matches!(
            make_gaussian(DVector::zeros(3), DMatrix::identity(2, 2)),
            Err(FlowError::Dimension { .. })
        ));
    }

    #[test]
    fn single_component_mixture_equals_gaussian() {
        let mean = DVector::from_vec(vec![0.7, -0.2]);
        let cov = DMatrix::from_row_slice(2, 2, &[1.5, 0.4, 0.4, 0.9]);
        let gaussian = make_gaussian(mean.clone(), cov.clone()).unwrap();
        let mixture = make_mixture(&GaussianMixtureSpec {
            weights: vec![1.0],
            means: vec![mean],
            covariances: vec![cov],
        })
        .unwrap();
        let mut rng = rng::stream_rng(11, 0);
        for x in rng::standard_normal_vectors(&mut rng, 10, 2) {
            let dl = (gaussian.log_density_unnormalized(&x) - mixture.log_density_unnormalized(&x))
                .abs();
            assert!(dl < 1e-12, "log-density differs by {dl}");
            assert!((gaussian.score(&x) - mixture.score(&x)).norm() < 1e-12);
        }
    }

    #[test]
    fn symmetric_mixture_score_vanishes_at_center() {
        let spec = GaussianMixtureSpec {
            weights: vec![0.5, 0.5],
            means: vec![DVector::from_element(1, -2.0), DVector::from_element(1, 2.0)],
            covariances: vec![DMatrix::identity(1, 1), DMatrix::identity(1, 1)],
        };
        let target = make_mixture(&spec).unwrap();
        assert!(target.score(&DVector::zeros(1))[0].abs() < 1e-14);
    }

    #[test]
    fn mixture_score_matches_finite_differences() {
        let spec = GaussianMixtureSpec {
            weights: vec![0.5, 0.5],
            means: vec![DVector::from_element(1, -2.0), DVector::from_element(1, 2.0)],
            covariances: vec![DMatrix::identity(1, 1), DMatrix::identity(1, 1)],
        };
        let target = make_mixture(&spec).unwrap();
        let x = DVector::from_element(1, 2.0);
        let analytic = target.score(&x);
        let numeric = finite_difference_score(&target, &x);
        assert!(rel_err(&analytic, &numeric) < 1e-5);
    }

    #[test]
    fn empty_mixture_rejected() {
        let spec = GaussianMixtureSpec {
            weights: vec![],
            means: vec![],
            covariances: vec![],
        };
        assert!(matches!(
            make_mixture(&spec),
            Err(FlowError::Construction(_))
        ));
    }

    #[test]
    fn posterior_with_centered_gaussian_likelihood() {
        // Prior N(0,1), likelihood N(z=0 | x, 1): log density -x² + const,
        // score -2x.
        let prior = make_gaussian(DVector::zeros(1), DMatrix::identity(1, 1)).unwrap();
        let posterior = posterior_from_prior_likelihood(
            &prior,
            |x: &DVector<f64>| -0.5 * x[0] * x[0],
            |x: &DVector<f64>| DVector::from_element(1, -x[0]),
        )
        .unwrap();
        assert!(posterior.log_normalizer().is_none());
        let at = |v: f64| posterior.log_density_unnormalized(&DVector::from_element(1, v));
        // -x² up to an additive constant.
        assert_relative_eq!(at(1.5) - at(0.0), -1.5 * 1.5, max_relative = 1e-12);
        assert_relative_eq!(
            posterior.score(&DVector::from_element(1, 1.5))[0],
            -3.0,
            max_relative = 1e-12
        );
    }

    #[test]
    fn conjugate_posterior_matches_closed_form() {
        // Prior N(0,1), likelihood N(z=1 | x, 1): posterior N(1/2, 1/2),
        // evidence N(1; 0, 2).
        let prior = make_gaussian(DVector::zeros(1), DMatrix::identity(1, 1)).unwrap();
        let posterior = posterior_from_prior_likelihood(
            &prior,
            |x: &DVector<f64>| {
                let r = 1.0 - x[0];
                -0.5 * r * r - 0.5 * (2.0 * std::f64::consts::PI).ln()
            },
            |x: &DVector<f64>| DVector::from_element(1, 1.0 - x[0]),
        )
        .unwrap();

        // Quadrature for the evidence.
        let grid = GridSpec::new(vec![-10.0], vec![10.0], 4096).unwrap();
        let z = quadrature::integrate(&grid, |x| posterior.log_density_unnormalized(x).exp());
        let expected_log_z = -0.5 * (4.0 * std::f64::consts::PI).ln() - 0.25;
        assert_relative_eq!(z.ln(), expected_log_z, max_relative = 1e-8);

        // Normalized posterior equals N(1/2, 1/2).
        let exact = make_gaussian(
            DVector::from_element(1, 0.5),
            DMatrix::from_element(1, 1, 0.5),
        )
        .unwrap();
        for v in [-1.0, 0.0, 0.5, 1.3] {
            let x = DVector::from_element(1, v);
            let lhs = posterior.log_density_unnormalized(&x) - z.ln();
            let rhs = exact.log_density_unnormalized(&x);
            assert_relative_eq!(lhs, rhs, epsilon = 1e-8);
        }
    }

    #[test]
    fn zero_likelihood_posterior_equals_prior() {
        let prior = make_gaussian(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        let posterior = posterior_from_prior_likelihood(
            &prior,
            |_: &DVector<f64>| 0.0,
            |_: &DVector<f64>| DVector::zeros(2),
        )
        .unwrap();
        let mut rng = rng::stream_rng(5, 0);
        for x in rng::standard_normal_vectors(&mut rng, 10, 2) {
            assert_eq!(
                prior.log_density_unnormalized(&x),
                posterior.log_density_unnormalized(&x)
            );
            assert_eq!(prior.score(&x), posterior.score(&x));
        }
    }

    #[test]
    fn scores_match_finite_differences_at_random_points() {
        let mixture = make_mixture(&GaussianMixtureSpec {
            weights: vec![0.3, 0.7],
            means: vec![
                DVector::from_vec(vec![-1.0, 0.5]),
                DVector::from_vec(vec![2.0, -0.5]),
            ],
            covariances: vec![
                DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.8]),
                DMatrix::from_row_slice(2, 2, &[0.6, -0.1, -0.1, 1.2]),
            ],
        })
        .unwrap();
        let gaussian = make_gaussian(
            DVector::from_vec(vec![0.4, -1.1]),
            DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
        )
        .unwrap();
        let mut rng = rng::stream_rng(23, 0);
        for target in [&mixture, &gaussian] {
            for x in rng::standard_normal_vectors(&mut rng, 20, 2) {
                let x = x * 2.0;
                let analytic = target.score(&x);
                let numeric = finite_difference_score(target, &x);
                assert!(
                    rel_err(&analytic, &numeric) < 1e-5,
                    "score mismatch at {x:?}"
                );
            }
        }
    }

    #[test]
    fn normalized_densities_integrate_to_one() {
        // 1D Gaussian.
        let g1 = make_gaussian(DVector::from_element(1, 0.3), DMatrix::from_element(1, 1, 1.7))
            .unwrap();
        let sd = 1.7_f64.sqrt();
        let grid = GridSpec::new(vec![0.3 - 8.0 * sd], vec![0.3 + 8.0 * sd], 2048).unwrap();
        let z = quadrature::integrate(&grid, |x| {
            (g1.log_density_unnormalized(x) - g1.log_normalizer().unwrap()).exp()
        });
        assert!((z - 1.0).abs() < 1e-3);

        // 2D mixture.
        let mix = make_mixture(&GaussianMixtureSpec {
            weights: vec![0.5, 0.5],
            means: vec![
                DVector::from_vec(vec![-2.0, 0.0]),
                DVector::from_vec(vec![2.0, 0.0]),
            ],
            covariances: vec![DMatrix::identity(2, 2), DMatrix::identity(2, 2)],
        })
        .unwrap();
        let grid2 = GridSpec::new(vec![-10.0, -8.0], vec![10.0, 8.0], 512).unwrap();
        let z2 = quadrature::integrate(&grid2, |x| {
            (mix.log_density_unnormalized(x) - mix.log_normalizer().unwrap()).exp()
        });
        assert!((z2 - 1.0).abs() < 1e-3);
    }
}
