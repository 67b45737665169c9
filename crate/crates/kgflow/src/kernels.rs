//! Scalar and matrix-valued kernels, the neural-tangent-kernel construction,
//! the pullback kernel, and the Monte Carlo kernel operator.
//!
//! Scalar kernels are represented uniformly as scalar·identity so that one
//! code path serves both the classic particle update and the
//! distribution-dependent matrix-valued dynamics.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Dyn};
use nalgebra::linalg::LU;

use crate::bbvi::GaussianVariationalParams;
use crate::error::{FlowError, Result};
use crate::linalg;

/// Where a [`KernelContext`]'s mean and covariance estimates came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContextSource {
    FromParameters,
    FromParticles,
}

/// Distribution estimate that a kernel may depend on.
///
/// Holds a whitening factor alongside the raw moments: when built from
/// variational parameters the factor is the exact `A` with `Σ = AAᵀ`, and
/// when built from particles it is the Cholesky factor of the (jittered)
/// sample covariance. Inner products through the whitener realize
/// `(x−μ)ᵀΣ⁻¹(y−μ)` without ever forming `Σ⁻¹`.
#[derive(Clone)]
pub struct KernelContext {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    source: ContextSource,
    whitener: Whitener,
}

#[derive(Clone)]
enum Whitener {
    /// LU factorizations of `A` and `Aᵀ` from a parameterized family.
    Factor {
        lu: LU<f64, Dyn, Dyn>,
        lu_t: LU<f64, Dyn, Dyn>,
    },
    /// Cholesky factor `L` (and its transpose) of an estimated covariance.
    Lower { l: DMatrix<f64>, l_t: DMatrix<f64> },
}

impl std::fmt::Debug for KernelContext {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KernelContext")
            .field("dim", &self.mean.len())
            .field("source", &self.source)
            .finish_non_exhaustive()
    }
}

impl KernelContext {
    /// Context carrying the exact mean and covariance of a variational
    /// Gaussian, whitened through its `A` factor.
    pub fn from_parameters(params: &GaussianVariationalParams) -> Self {
        Self {
            mean: params.mu().clone(),
            covariance: params.sigma(),
            source: ContextSource::FromParameters,
            whitener: Whitener::Factor {
                lu: params.a_factor_lu().clone(),
                lu_t: params.a_transpose_lu().clone(),
            },
        }
    }

    /// Context estimated from particles: sample mean and unbiased sample
    /// covariance, regularized by the jitter policy before factorization.
    pub fn from_particles(positions: &[DVector<f64>]) -> Result<Self> {
        let (mean, covariance) = linalg::sample_moments(positions)?;
        let chol = linalg::spd_cholesky_jittered(&covariance)?;
        let l = chol.l();
        let l_t = l.transpose();
        Ok(Self {
            mean,
            covariance,
            source: ContextSource::FromParticles,
            whitener: Whitener::Lower { l, l_t },
        })
    }

    pub fn mean_estimate(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance_estimate(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn source(&self) -> ContextSource {
        self.source
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Solve `W u = v` where `W Wᵀ = Σ`; then `u₁·u₂ = v₁ᵀ Σ⁻¹ v₂`.
    fn whiten(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        match &self.whitener {
            Whitener::Factor { lu, .. } => lu.solve(v).ok_or_else(|| {
                FlowError::SingularCovariance("context factor is singular".into())
            }),
            Whitener::Lower { l, .. } => l.solve_lower_triangular(v).ok_or_else(|| {
                FlowError::SingularCovariance("context Cholesky factor is singular".into())
            }),
        }
    }

    /// Score of the Gaussian `N(mean_estimate, covariance_estimate)` at `x`,
    /// i.e. `−Σ⁻¹(x−μ)` through the stored factorization.
    pub fn gaussian_score(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let diff = x - &self.mean;
        let u = self.whiten(&diff)?;
        let w = match &self.whitener {
            Whitener::Factor { lu_t, .. } => lu_t.solve(&u).ok_or_else(|| {
                FlowError::SingularCovariance("context factor is singular".into())
            })?,
            Whitener::Lower { l_t, .. } => u.solve_upper_triangular_unchecked(l_t)?,
        };
        Ok(-w)
    }
}

// nalgebra's triangular solves are methods on the coefficient matrix; this
// little extension keeps the call above readable.
trait SolveUpper {
    fn solve_upper_triangular_unchecked(&self, upper: &DMatrix<f64>) -> Result<DVector<f64>>;
}

impl SolveUpper for DVector<f64> {
    fn solve_upper_triangular_unchecked(&self, upper: &DMatrix<f64>) -> Result<DVector<f64>> {
        upper.solve_upper_triangular(self).ok_or_else(|| {
            FlowError::SingularCovariance("context Cholesky factor is singular".into())
        })
    }
}

/// A (possibly distribution-dependent) matrix-valued kernel.
#[derive(Clone)]
pub struct MatrixKernel {
    kind: KernelKind,
}

type TangentGramFn = Arc<dyn Fn(&DVector<f64>, &DVector<f64>) -> Result<DMatrix<f64>> + Send + Sync>;
type InverseMapFn = Arc<dyn Fn(&DVector<f64>) -> Result<DVector<f64>> + Send + Sync>;

#[derive(Clone)]
enum KernelKind {
    /// `exp(−γ‖x−y‖²)·I`.
    Rbf { gamma: f64 },
    /// Constant identity, `k(x,y) = I`.
    ConstantIdentity,
    /// `(1 + (x−μ)ᵀΣ⁻¹(y−μ))·I` with `μ, Σ` from the context.
    GaussianNtk,
    /// `Θ(f⁻¹(x), f⁻¹(y))` for a user-supplied tangent kernel and inverse.
    Pullback {
        theta: TangentGramFn,
        inverse: InverseMapFn,
    },
}

impl std::fmt::Debug for MatrixKernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "MatrixKernel({})", self.name())
    }
}

impl MatrixKernel {
    pub fn name(&self) -> &'static str {
        match &self.kind {
            KernelKind::Rbf { .. } => "rbf",
            KernelKind::ConstantIdentity => "identity",
            KernelKind::GaussianNtk => "gaussian-ntk",
            KernelKind::Pullback { .. } => "pullback",
        }
    }

    /// Whether evaluation needs a [`KernelContext`].
    pub fn requires_context(&self) -> bool {
        matches!(self.kind, KernelKind::GaussianNtk)
    }

    fn context_for<'a>(&self, ctx: Option<&'a KernelContext>) -> Result<Option<&'a KernelContext>> {
        if self.requires_context() && ctx.is_none() {
            return Err(FlowError::ContextRequired(format!(
                "kernel '{}' depends on a distribution estimate",
                self.name()
            )));
        }
        Ok(ctx)
    }

    /// Scalar factor for scalar·identity kernels; `None` for genuinely
    /// matrix-valued ones.
    fn scalar_eval(
        &self,
        x: &DVector<f64>,
        y: &DVector<f64>,
        ctx: Option<&KernelContext>,
    ) -> Result<Option<f64>> {
        match &self.kind {
            KernelKind::Rbf { gamma } => {
                let d2 = (x - y).norm_squared();
                Ok(Some((-gamma * d2).exp()))
            }
            KernelKind::ConstantIdentity => Ok(Some(1.0)),
            KernelKind::GaussianNtk => {
                let ctx = self.context_for(ctx)?.expect("checked above");
                let u = ctx.whiten(&(x - &ctx.mean))?;
                let v = ctx.whiten(&(y - &ctx.mean))?;
                Ok(Some(1.0 + u.dot(&v)))
            }
            KernelKind::Pullback { .. } => Ok(None),
        }
    }

    /// Full d×d kernel matrix `k(x, y)`.
    pub fn eval(
        &self,
        x: &DVector<f64>,
        y: &DVector<f64>,
        ctx: Option<&KernelContext>,
    ) -> Result<DMatrix<f64>> {
        if x.len() != y.len() {
            return Err(FlowError::Dimension {
                expected: x.len(),
                actual: y.len(),
            });
        }
        match &self.kind {
            KernelKind::Pullback { theta, inverse } => {
                let ex = inverse(x)?;
                let ey = inverse(y)?;
                theta(&ex, &ey)
            }
            _ => {
                let s = self
                    .scalar_eval(x, y, ctx)?
                    .expect("non-pullback kernels are scalar");
                Ok(DMatrix::identity(x.len(), x.len()) * s)
            }
        }
    }

    /// `k(x, y) · v` without materializing the matrix when the kernel is
    /// scalar·identity.
    pub fn apply(
        &self,
        x: &DVector<f64>,
        y: &DVector<f64>,
        ctx: Option<&KernelContext>,
        v: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        match self.scalar_eval(x, y, ctx)? {
            Some(s) => Ok(v * s),
            None => Ok(self.eval(x, y, ctx)? * v),
        }
    }

    /// Analytic `∇_y k(x, y)` reduced to the scalar part's gradient; only
    /// available for kernels with a closed-form y-gradient.
    pub fn grad_y(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
        match &self.kind {
            KernelKind::Rbf { gamma } => Ok(rbf_gradient_scaled(*gamma, x, y)),
            KernelKind::ConstantIdentity => Ok(DVector::zeros(x.len())),
            _ => Err(FlowError::UnsupportedKernel(format!(
                "kernel '{}' has no analytic y-gradient; use the mean-field form",
                self.name()
            ))),
        }
    }
}

/// The fixed unit-bandwidth kernel `exp(−‖x−y‖²)·I`.
pub fn rbf_kernel() -> MatrixKernel {
    MatrixKernel {
        kind: KernelKind::Rbf { gamma: 1.0 },
    }
}

/// `exp(−γ‖x−y‖²)·I` for an explicit bandwidth parameter γ > 0.
pub fn rbf_kernel_with_bandwidth(gamma: f64) -> Result<MatrixKernel> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(FlowError::Construction(format!(
            "rbf bandwidth parameter must be positive and finite, got {gamma}"
        )));
    }
    Ok(MatrixKernel {
        kind: KernelKind::Rbf { gamma },
    })
}

/// Constant identity kernel; the operator then reduces to a plain average.
pub fn identity_kernel() -> MatrixKernel {
    MatrixKernel {
        kind: KernelKind::ConstantIdentity,
    }
}

/// The tangent kernel of the Gaussian family pushed to sample space:
/// `k(x,y) = (1 + (x−μ)ᵀΣ⁻¹(y−μ))·I`, with μ and Σ read from the evaluation
/// context. The parameters are checked for invertibility here; a context
/// must still be supplied at evaluation time.
pub fn gaussian_ntk_kernel(params: &GaussianVariationalParams) -> Result<MatrixKernel> {
    if params.condition_number() >= linalg::CONDITION_LIMIT {
        return Err(FlowError::SingularCovariance(format!(
            "factor A condition number {:.3e} exceeds limit",
            params.condition_number()
        )));
    }
    Ok(MatrixKernel {
        kind: KernelKind::GaussianNtk,
    })
}

/// Tangent Gram matrix `Θ(ε, w) = J(ε)ᵀ J(w)` from per-point Jacobians of a
/// reparameterization map (p parameters × d outputs).
pub fn ntk_gram<J>(jacobian_at: J, eps: &DVector<f64>, w: &DVector<f64>) -> Result<DMatrix<f64>>
where
    J: Fn(&DVector<f64>) -> DMatrix<f64>,
{
    let je = jacobian_at(eps);
    let jw = jacobian_at(w);
    if je.shape() != jw.shape() {
        return Err(FlowError::Dimension {
            expected: je.nrows(),
            actual: jw.nrows(),
        });
    }
    Ok(je.transpose() * jw)
}

/// Kernel `Θ(f⁻¹(x), f⁻¹(y))` given a tangent kernel and the inverse of the
/// reparameterization map.
pub fn pullback_kernel<T, M>(theta: T, inverse_map: M) -> MatrixKernel
where
    T: Fn(&DVector<f64>, &DVector<f64>) -> Result<DMatrix<f64>> + Send + Sync + 'static,
    M: Fn(&DVector<f64>) -> Result<DVector<f64>> + Send + Sync + 'static,
{
    MatrixKernel {
        kind: KernelKind::Pullback {
            theta: Arc::new(theta),
            inverse: Arc::new(inverse_map),
        },
    }
}

/// Central-difference Jacobian of `φ ↦ f(φ, ε)` (p parameters × d outputs),
/// with per-parameter step `1e-6·max(1, |φᵢ|)`.
pub fn finite_difference_jacobian<F>(
    f: F,
    params: &DVector<f64>,
    base_point: &DVector<f64>,
) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>, &DVector<f64>) -> DVector<f64>,
{
    let p = params.len();
    let d = f(params, base_point).len();
    let mut jac = DMatrix::zeros(p, d);
    for i in 0..p {
        let h = 1e-6 * 1.0_f64.max(params[i].abs());
        let mut hi = params.clone();
        hi[i] += h;
        let mut lo = params.clone();
        lo[i] -= h;
        let row = (f(&hi, base_point) - f(&lo, base_point)) / (2.0 * h);
        if !linalg::all_finite_vec(&row) {
            return Err(FlowError::Numerical {
                what: format!("finite-difference Jacobian row {i}"),
                step: None,
            });
        }
        jac.row_mut(i).copy_from(&row.transpose());
    }
    Ok(jac)
}

/// Monte Carlo kernel operator: `(1/n) Σⱼ k(x, yⱼ) · field(yⱼ)`.
pub fn apply_kernel_operator<F>(
    kernel: &MatrixKernel,
    ctx: Option<&KernelContext>,
    samples: &[DVector<f64>],
    field: F,
    x: &DVector<f64>,
) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let field_values: Vec<DVector<f64>> = samples.iter().map(field).collect::<Result<_>>()?;
    kernel_transport(kernel, ctx, samples, &field_values, x)
}

/// Operator application with the field precomputed at the samples.
pub(crate) fn kernel_transport(
    kernel: &MatrixKernel,
    ctx: Option<&KernelContext>,
    samples: &[DVector<f64>],
    field_values: &[DVector<f64>],
    x: &DVector<f64>,
) -> Result<DVector<f64>> {
    if samples.is_empty() {
        return Err(FlowError::EmptyEnsemble(
            "kernel operator needs at least one sample".into(),
        ));
    }
    if samples.len() != field_values.len() {
        return Err(FlowError::Dimension {
            expected: samples.len(),
            actual: field_values.len(),
        });
    }
    let mut acc = DVector::zeros(x.len());
    for (y, v) in samples.iter().zip(field_values) {
        acc += kernel.apply(x, y, ctx, v)?;
    }
    Ok(acc.unscale(samples.len() as f64))
}

/// Operator application at many query points at once. For the
/// distribution-dependent Gaussian tangent kernel the whitening solves are
/// hoisted out of the pair loop; the arithmetic per pair is unchanged, so
/// results are bit-identical to repeated [`kernel_transport`] calls.
pub(crate) fn transport_all(
    kernel: &MatrixKernel,
    ctx: Option<&KernelContext>,
    queries: &[DVector<f64>],
    samples: &[DVector<f64>],
    field_values: &[DVector<f64>],
) -> Result<Vec<DVector<f64>>> {
    if samples.is_empty() {
        return Err(FlowError::EmptyEnsemble(
            "kernel operator needs at least one sample".into(),
        ));
    }
    if let KernelKind::GaussianNtk = kernel.kind {
        let ctx = kernel.context_for(ctx)?.expect("checked above");
        let whitened: Vec<DVector<f64>> = samples
            .iter()
            .map(|y| ctx.whiten(&(y - &ctx.mean)))
            .collect::<Result<_>>()?;
        let n = samples.len() as f64;
        let mut out = Vec::with_capacity(queries.len());
        for x in queries {
            let u = ctx.whiten(&(x - &ctx.mean))?;
            let mut acc = DVector::zeros(x.len());
            for (wj, vj) in whitened.iter().zip(field_values) {
                let kappa = 1.0 + u.dot(wj);
                acc.axpy(kappa, vj, 1.0);
            }
            out.push(acc.unscale(n));
        }
        return Ok(out);
    }
    queries
        .iter()
        .map(|x| kernel_transport(kernel, ctx, samples, field_values, x))
        .collect()
}

/// `∇_y exp(−‖x−y‖²) = 2(x−y)·exp(−‖x−y‖²)`.
pub fn rbf_gradient(x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
    rbf_gradient_scaled(1.0, x, y)
}

fn rbf_gradient_scaled(gamma: f64, x: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
    let diff = x - y;
    let k = (-gamma * diff.norm_squared()).exp();
    diff * (2.0 * gamma * k)
}

/// The n·d × n·d block Gram matrix of a kernel over a point set.
pub fn block_gram(
    kernel: &MatrixKernel,
    ctx: Option<&KernelContext>,
    points: &[DVector<f64>],
) -> Result<DMatrix<f64>> {
    if points.is_empty() {
        return Err(FlowError::EmptyEnsemble(
            "gram matrix needs at least one point".into(),
        ));
    }
    let d = points[0].len();
    let n = points.len();
    let mut gram = DMatrix::zeros(n * d, n * d);
    for i in 0..n {
        for j in 0..n {
            let block = kernel.eval(&points[i], &points[j], ctx)?;
            gram.view_mut((i * d, j * d), (d, d)).copy_from(&block);
        }
    }
    Ok(gram)
}

/// Bandwidth parameter γ = 1 / median(‖xᵢ−xⱼ‖²) over distinct pairs, for use
/// with [`rbf_kernel_with_bandwidth`].
pub fn median_heuristic_bandwidth(points: &[DVector<f64>]) -> Result<f64> {
    if points.len() < 2 {
        return Err(FlowError::EmptyEnsemble(
            "median heuristic needs at least 2 points".into(),
        ));
    }
    let mut sq_dists = Vec::with_capacity(points.len() * (points.len() - 1) / 2);
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            sq_dists.push((&points[i] - &points[j]).norm_squared());
        }
    }
    sq_dists.sort_by(|a, b| a.partial_cmp(b).expect("squared distances are not NaN"));
    let m = sq_dists.len();
    let median = if m % 2 == 1 {
        sq_dists[m / 2]
    } else {
        0.5 * (sq_dists[m / 2 - 1] + sq_dists[m / 2])
    };
    if median <= 0.0 {
        return Err(FlowError::Construction(
            "median pairwise distance is zero; all points coincide".into(),
        ));
    }
    Ok(1.0 / median)
}
