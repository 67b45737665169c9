//! Black-box variational inference over the reparameterized Gaussian family
//! `x = μ + Aε`, `ε ∼ N(0, I)`, `Σ = AAᵀ`.
//!
//! The gradient implemented here is the sticking-the-landing form, whose
//! per-sample integrand `score_p − score_q` vanishes pointwise at the
//! optimum. The same per-sample quantities drive two views of the sample
//! dynamics: the chain-rule transport of the parameter gradient, and the
//! kernel-operator form with the family's tangent kernel. These agree not
//! just in expectation but identically for every finite batch.

use nalgebra::linalg::LU;
use nalgebra::{DMatrix, DVector, Dyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{FlowError, Result};
use crate::kernels::{self, KernelContext};
use crate::linalg;
use crate::targets::TargetDensity;

/// Parameters `(μ, A)` of the variational Gaussian, with `Σ = AAᵀ`.
///
/// `A` is a general invertible matrix, not a Cholesky factor; a flow may
/// carry it away from triangularity, which is fine since only `AAᵀ` enters
/// the density. Factorizations of `A` and `Aᵀ` are prepared once so that
/// densities, scores, and inversions all route through the same solves.
#[derive(Clone)]
pub struct GaussianVariationalParams {
    mu: DVector<f64>,
    a: DMatrix<f64>,
    sigma: DMatrix<f64>,
    lu: LU<f64, Dyn, Dyn>,
    lu_t: LU<f64, Dyn, Dyn>,
    log_abs_det_a: f64,
    condition: f64,
}

impl std::fmt::Debug for GaussianVariationalParams {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GaussianVariationalParams")
            .field("mu", &self.mu)
            .field("a", &self.a)
            .field("condition", &self.condition)
            .finish()
    }
}

impl GaussianVariationalParams {
    pub fn new(mu: DVector<f64>, a: DMatrix<f64>) -> Result<Self> {
        let d = mu.len();
        if d == 0 {
            return Err(FlowError::Construction("dimension must be positive".into()));
        }
        if a.nrows() != d || a.ncols() != d {
            return Err(FlowError::Dimension {
                expected: d,
                actual: a.nrows().max(a.ncols()),
            });
        }
        if !linalg::all_finite_vec(&mu) || !linalg::all_finite_mat(&a) {
            return Err(FlowError::Numerical {
                what: "variational parameters contain non-finite entries".into(),
                step: None,
            });
        }
        let condition = linalg::condition_number(&a);
        if condition >= linalg::CONDITION_LIMIT {
            return Err(FlowError::SingularCovariance(format!(
                "factor A condition number {condition:.3e} exceeds limit {:.0e}",
                linalg::CONDITION_LIMIT
            )));
        }
        let lu = LU::new(a.clone());
        let lu_t = LU::new(a.transpose());
        let log_abs_det_a = lu.determinant().abs().ln();
        let s = &a * a.transpose();
        let sigma = (&s + s.transpose()) * 0.5;
        Ok(Self {
            mu,
            a,
            sigma,
            lu,
            lu_t,
            log_abs_det_a,
            condition,
        })
    }

    /// Parameters matching given moments, with `A` the (jittered) Cholesky
    /// factor of the covariance. Used to wrap fitted moments.
    pub fn from_mean_cov(mean: DVector<f64>, cov: &DMatrix<f64>) -> Result<Self> {
        let chol = linalg::spd_cholesky_jittered(cov)?;
        Self::new(mean, chol.l())
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn a_matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    /// `Σ = AAᵀ`, exactly symmetric by construction.
    pub fn sigma(&self) -> DMatrix<f64> {
        self.sigma.clone()
    }

    pub fn condition_number(&self) -> f64 {
        self.condition
    }

    pub fn log_abs_det_a(&self) -> f64 {
        self.log_abs_det_a
    }

    pub(crate) fn a_factor_lu(&self) -> &LU<f64, Dyn, Dyn> {
        &self.lu
    }

    pub(crate) fn a_transpose_lu(&self) -> &LU<f64, Dyn, Dyn> {
        &self.lu_t
    }

    /// `f_φ(ε) = μ + Aε`.
    pub fn pushforward(&self, eps: &DVector<f64>) -> DVector<f64> {
        &self.mu + &self.a * eps
    }

    /// `f⁻¹(x) = A⁻¹(x − μ)`.
    pub fn inverse_pushforward(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.lu.solve(&(x - &self.mu)).ok_or_else(|| {
            FlowError::SingularCovariance("factor A is numerically singular".into())
        })
    }

    /// Exact log-density of `N(μ, AAᵀ)` at `x`.
    pub fn log_q(&self, x: &DVector<f64>) -> Result<f64> {
        let u = self.inverse_pushforward(x)?;
        let d = self.dim() as f64;
        Ok(-0.5 * d * (2.0 * std::f64::consts::PI).ln() - self.log_abs_det_a
            - 0.5 * u.norm_squared())
    }

    /// `∇ log q(x) = −Σ⁻¹(x − μ)`, solved through `A` and `Aᵀ` rather than
    /// a factorization of `Σ`.
    pub fn score_q(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let u = self.inverse_pushforward(x)?;
        let w = self.lu_t.solve(&u).ok_or_else(|| {
            FlowError::SingularCovariance("factor A is numerically singular".into())
        })?;
        Ok(-w)
    }

    /// The same distribution as a [`TargetDensity`]. Density and score are
    /// evaluated through this parameter object's own factorizations, so
    /// `to_target().score(x)` is bit-identical to [`Self::score_q`].
    pub fn to_target(&self) -> TargetDensity {
        let for_density = self.clone();
        let for_score = self.clone();
        TargetDensity::new(
            self.dim(),
            move |x| {
                for_density
                    .log_q(x)
                    .expect("A was validated invertible at construction")
            },
            move |x| {
                for_score
                    .score_q(x)
                    .expect("A was validated invertible at construction")
            },
            Some(0.0),
        )
        .expect("dimension validated at construction")
        .with_moments(self.mu.clone(), self.sigma.clone())
    }
}

/// A batch of standard-normal base samples, regenerable from its seed.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseSampleBatch {
    draws: Vec<DVector<f64>>,
    seed: u64,
}

impl BaseSampleBatch {
    /// Draw `n` standard-normal d-vectors from a generator keyed by `seed`.
    pub fn generate(seed: u64, n: usize, dim: usize) -> Result<Self> {
        if n == 0 {
            return Err(FlowError::EmptyEnsemble("batch size must be positive".into()));
        }
        if dim == 0 {
            return Err(FlowError::Construction("dimension must be positive".into()));
        }
        let mut rng: ChaCha8Rng = rand::SeedableRng::seed_from_u64(seed);
        let draws = (0..n)
            .map(|_| DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Ok(Self { draws, seed })
    }

    /// Wrap explicit draws (hand-built batches for exact checks). The seed
    /// field is only meaningful for generated batches.
    pub fn from_draws(draws: Vec<DVector<f64>>) -> Result<Self> {
        if draws.is_empty() {
            return Err(FlowError::EmptyEnsemble("batch has no draws".into()));
        }
        let dim = draws[0].len();
        if dim == 0 || draws.iter().any(|e| e.len() != dim) {
            return Err(FlowError::Construction(
                "batch draws must share one positive dimension".into(),
            ));
        }
        Ok(Self { draws, seed: 0 })
    }

    pub fn draws(&self) -> &[DVector<f64>] {
        &self.draws
    }

    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.draws[0].len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// Whether a parameter flow redraws its base samples each step or holds one
/// batch fixed (common random numbers).
#[derive(Debug, Clone)]
pub enum BatchMode {
    Fresh,
    Fixed(BaseSampleBatch),
}

/// Gradient of a batch objective over `(μ, A)`.
#[derive(Debug, Clone)]
pub struct ParamGradient {
    pub grad_mu: DVector<f64>,
    pub grad_a: DMatrix<f64>,
}

impl ParamGradient {
    /// Euclidean norm over all parameter entries.
    pub fn norm(&self) -> f64 {
        (self.grad_mu.norm_squared() + self.grad_a.norm_squared()).sqrt()
    }
}

fn check_batch_dims(params: &GaussianVariationalParams, target: &TargetDensity, batch: &BaseSampleBatch) -> Result<()> {
    if target.dim() != params.dim() {
        return Err(FlowError::Dimension {
            expected: params.dim(),
            actual: target.dim(),
        });
    }
    if batch.dim() != params.dim() {
        return Err(FlowError::Dimension {
            expected: params.dim(),
            actual: batch.dim(),
        });
    }
    Ok(())
}

/// Monte Carlo evidence lower bound against the (possibly unnormalized)
/// target density: `(1/n) Σⱼ [log p̃(yⱼ) − log q(yⱼ)]` with `yⱼ = μ + Aεⱼ`.
/// A known normalizer is deliberately not added; the KL identity accounts
/// for it on the test side.
pub fn elbo_estimate(
    params: &GaussianVariationalParams,
    target: &TargetDensity,
    batch: &BaseSampleBatch,
) -> Result<f64> {
    check_batch_dims(params, target, batch)?;
    let mut acc = 0.0;
    for eps in batch.draws() {
        let y = params.pushforward(eps);
        acc += target.log_density_unnormalized(&y) - params.log_q(&y)?;
    }
    Ok(acc / batch.len() as f64)
}

/// Sticking-the-landing gradient of the ELBO: with
/// `g(y) = ∇log p(y) − ∇log q(y)`, the μ-gradient is the batch mean of
/// `g(yⱼ)` and the A-gradient the batch mean of `g(yⱼ)εⱼᵀ`. At `q = p` the
/// integrand vanishes pointwise, so the gradient is exactly zero for every
/// batch.
pub fn stl_gradient(
    params: &GaussianVariationalParams,
    target: &TargetDensity,
    batch: &BaseSampleBatch,
) -> Result<ParamGradient> {
    check_batch_dims(params, target, batch)?;
    let d = params.dim();
    let mut grad_mu = DVector::zeros(d);
    let mut grad_a = DMatrix::zeros(d, d);
    for eps in batch.draws() {
        let y = params.pushforward(eps);
        let g = target.score(&y) - params.score_q(&y)?;
        grad_a += &g * eps.transpose();
        grad_mu += g;
    }
    grad_mu.unscale_mut(batch.len() as f64);
    grad_a.unscale_mut(batch.len() as f64);
    if !linalg::all_finite_vec(&grad_mu) || !linalg::all_finite_mat(&grad_a) {
        return Err(FlowError::Numerical {
            what: "sticking-the-landing gradient is non-finite".into(),
            step: None,
        });
    }
    Ok(ParamGradient { grad_mu, grad_a })
}

/// Displace parameters by `step_size` along a gradient. Shared by the BBVI
/// step and the unified parameter-flow runner so the two stay bitwise equal.
pub(crate) fn apply_param_step(
    params: &GaussianVariationalParams,
    grad: &ParamGradient,
    step_size: f64,
) -> Result<GaussianVariationalParams> {
    if !(step_size > 0.0 && step_size.is_finite()) {
        return Err(FlowError::Construction(format!(
            "step size must be positive and finite, got {step_size}"
        )));
    }
    GaussianVariationalParams::new(
        params.mu() + &grad.grad_mu * step_size,
        params.a_matrix() + &grad.grad_a * step_size,
    )
}

/// One ascent step `φ ← φ + h·∇L(φ)` under the sticking-the-landing
/// gradient on the given batch.
pub fn bbvi_param_step(
    params: &GaussianVariationalParams,
    target: &TargetDensity,
    batch: &BaseSampleBatch,
    step_size: f64,
) -> Result<GaussianVariationalParams> {
    let grad = stl_gradient(params, target, batch)?;
    apply_param_step(params, &grad, step_size)
}

/// Velocity of the sample `f_φ(ε)` induced by the parameter gradient, via
/// the chain rule: for the Gaussian family, `grad_μ + grad_A·ε`.
pub fn bbvi_particle_velocity_chainrule(
    params: &GaussianVariationalParams,
    target: &TargetDensity,
    batch: &BaseSampleBatch,
    eps: &DVector<f64>,
) -> Result<DVector<f64>> {
    let grad = stl_gradient(params, target, batch)?;
    Ok(&grad.grad_mu + &grad.grad_a * eps)
}

/// The same velocity through the kernel operator: `(1/n) Σⱼ k_φ(x, yⱼ)·g(yⱼ)`
/// with the family's tangent kernel and the parameter-sourced context.
pub fn bbvi_particle_velocity_kernel(
    params: &GaussianVariationalParams,
    target: &TargetDensity,
    batch: &BaseSampleBatch,
    x: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_batch_dims(params, target, batch)?;
    let kernel = kernels::gaussian_ntk_kernel(params)?;
    let ctx = KernelContext::from_parameters(params);
    let samples: Vec<DVector<f64>> = batch.draws().iter().map(|e| params.pushforward(e)).collect();
    kernels::apply_kernel_operator(
        &kernel,
        Some(&ctx),
        &samples,
        |y| Ok(target.score(y) - params.score_q(y)?),
        x,
    )
}

/// Run BBVI as a parameter flow. This is the kernel-gradient-flow driver
/// specialized to the KL objective; see the flows module.
pub fn run_bbvi(
    initial: &GaussianVariationalParams,
    target: &TargetDensity,
    config: &crate::svgd::FlowConfig,
    batch_mode: &BatchMode,
) -> Result<crate::metrics::FlowTrajectory> {
    crate::flows::run_param_flow(initial, target, config, crate::flows::FlowObjective::Kl, batch_mode)
}
