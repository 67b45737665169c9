//! Stein variational gradient descent: particle dynamics, the mean-field
//! form of the update, and the explicit flow integrator shared by the
//! particle-based runners.

use nalgebra::DVector;

use crate::bbvi::{BaseSampleBatch, GaussianVariationalParams};
use crate::error::{FlowError, Result};
use crate::kernels::{self, KernelContext, MatrixKernel};
use crate::linalg;
use crate::metrics::{self, FlowState, FlowTrajectory, RecordedStep};
use crate::rng;
use crate::targets::TargetDensity;

/// A finite particle set carrying its flow clock.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    positions: Vec<DVector<f64>>,
    time: f64,
    step_index: usize,
}

impl ParticleEnsemble {
    /// Wrap particle positions at time zero.
    pub fn new(positions: Vec<DVector<f64>>) -> Result<Self> {
        Self::with_state(positions, 0.0, 0)
    }

    fn with_state(positions: Vec<DVector<f64>>, time: f64, step_index: usize) -> Result<Self> {
        if positions.is_empty() {
            return Err(FlowError::EmptyEnsemble(
                "ensemble needs at least one particle".into(),
            ));
        }
        let d = positions[0].len();
        if d == 0 {
            return Err(FlowError::Construction("dimension must be positive".into()));
        }
        for p in &positions {
            if p.len() != d {
                return Err(FlowError::Dimension {
                    expected: d,
                    actual: p.len(),
                });
            }
            if !linalg::all_finite_vec(p) {
                return Err(FlowError::Numerical {
                    what: "particle position is non-finite".into(),
                    step: Some(step_index),
                });
            }
        }
        Ok(Self {
            positions,
            time,
            step_index,
        })
    }

    /// `n` particles drawn from the standard normal.
    pub fn from_standard_normal(n: usize, dim: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(FlowError::EmptyEnsemble(
                "ensemble needs at least one particle".into(),
            ));
        }
        if dim == 0 {
            return Err(FlowError::Construction("dimension must be positive".into()));
        }
        let mut rng = rng::stream_rng(seed, 0);
        Self::new(rng::standard_normal_vectors(&mut rng, n, dim))
    }

    /// Particles obtained by pushing a base-sample batch through the
    /// variational map `ε ↦ μ + Aε`.
    pub fn from_pushforward(
        params: &GaussianVariationalParams,
        batch: &BaseSampleBatch,
    ) -> Result<Self> {
        if batch.dim() != params.dim() {
            return Err(FlowError::Dimension {
                expected: params.dim(),
                actual: batch.dim(),
            });
        }
        Self::new(batch.draws().iter().map(|e| params.pushforward(e)).collect())
    }

    pub fn positions(&self) -> &[DVector<f64>] {
        &self.positions
    }

    pub fn num_particles(&self) -> usize {
        self.positions.len()
    }

    pub fn dim(&self) -> usize {
        self.positions[0].len()
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }
}

/// Time integrator for the particle and parameter flows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Integrator {
    #[default]
    Euler,
    RungeKutta4,
}

/// Discretization settings shared by all flow drivers. For parameter flows
/// `num_particles` is the base-sample batch size.
#[derive(Debug, Clone)]
pub struct FlowConfig {
    pub step_size: f64,
    pub num_steps: usize,
    pub num_particles: usize,
    pub seed: u64,
    pub record_every: usize,
    pub integrator: Integrator,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            step_size: 0.05,
            num_steps: 2000,
            num_particles: 200,
            seed: 0,
            record_every: 100,
            integrator: Integrator::Euler,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(FlowError::Construction(format!(
                "step_size must be positive and finite, got {}",
                self.step_size
            )));
        }
        if self.num_particles == 0 {
            return Err(FlowError::Construction(
                "num_particles must be positive".into(),
            ));
        }
        if self.record_every == 0 {
            return Err(FlowError::Construction(
                "record_every must be positive".into(),
            ));
        }
        if self.num_steps > 0 && self.record_every > self.num_steps {
            return Err(FlowError::Construction(format!(
                "record_every ({}) exceeds num_steps ({})",
                self.record_every, self.num_steps
            )));
        }
        Ok(())
    }

    fn records(&self, step: usize) -> bool {
        step == 0 || step == self.num_steps || step.is_multiple_of(self.record_every)
    }
}

/// Where the per-step kernel context comes from during a particle flow.
#[derive(Debug, Clone)]
pub enum ContextPolicy<'a> {
    /// Re-estimate mean and covariance from the current particles each step.
    FromParticles,
    /// Use the fixed moments of externally supplied parameters.
    FromParameters(&'a GaussianVariationalParams),
}

/// Which form of the update drives the flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VelocityForm {
    /// Score transport plus the kernel-gradient repulsion term. Requires a
    /// kernel with an analytic y-gradient.
    Standard,
    /// Kernel transport of `score_p − score_q` with `q` the Gaussian fitted
    /// from the kernel context.
    MeanFieldGaussianFit,
}

/// The particle update rule: row i is
/// `(1/n) Σⱼ [k(xᵢ,xⱼ)·∇log p(xⱼ) + ∇_y k(xᵢ,y)|_{y=xⱼ}]`.
pub fn svgd_velocity(
    ensemble: &ParticleEnsemble,
    target: &TargetDensity,
    kernel: &MatrixKernel,
    ctx: Option<&KernelContext>,
) -> Result<Vec<DVector<f64>>> {
    if target.dim() != ensemble.dim() {
        return Err(FlowError::Dimension {
            expected: ensemble.dim(),
            actual: target.dim(),
        });
    }
    let positions = ensemble.positions();
    let n = positions.len() as f64;
    let scores: Vec<DVector<f64>> = positions.iter().map(|x| target.score(x)).collect();
    let mut velocities = Vec::with_capacity(positions.len());
    for xi in positions {
        let mut acc = DVector::zeros(ensemble.dim());
        for (xj, score_j) in positions.iter().zip(&scores) {
            acc += kernel.apply(xi, xj, ctx, score_j)?;
            acc += kernel.grad_y(xi, xj)?;
        }
        velocities.push(acc.unscale(n));
    }
    Ok(velocities)
}

/// The mean-field form: row i is
/// `(1/n) Σⱼ k(xᵢ,xⱼ)·(∇log p(xⱼ) − ∇log q(xⱼ))`, which supports
/// matrix-valued, distribution-dependent kernels.
pub fn svgd_meanfield_velocity<F>(
    ensemble: &ParticleEnsemble,
    target: &TargetDensity,
    kernel: &MatrixKernel,
    ctx: Option<&KernelContext>,
    log_q_score: F,
) -> Result<Vec<DVector<f64>>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    if target.dim() != ensemble.dim() {
        return Err(FlowError::Dimension {
            expected: ensemble.dim(),
            actual: target.dim(),
        });
    }
    let positions = ensemble.positions();
    let field: Vec<DVector<f64>> = positions
        .iter()
        .map(|x| Ok(target.score(x) - log_q_score(x)?))
        .collect::<Result<_>>()?;
    kernels::transport_all(kernel, ctx, positions, positions, &field)
}

/// Explicit Euler step: positions advance by `step_size · velocity`.
pub fn euler_step(
    ensemble: &ParticleEnsemble,
    velocity: &[DVector<f64>],
    step_size: f64,
) -> Result<ParticleEnsemble> {
    if velocity.len() != ensemble.num_particles() {
        return Err(FlowError::Dimension {
            expected: ensemble.num_particles(),
            actual: velocity.len(),
        });
    }
    let next = ensemble.step_index() + 1;
    let positions: Vec<DVector<f64>> = ensemble
        .positions()
        .iter()
        .zip(velocity)
        .map(|(x, v)| x + v * step_size)
        .collect();
    ParticleEnsemble::with_state(positions, ensemble.time() + step_size, next)
        .map_err(|e| e.at_step(next))
}

/// Classic fourth-order Runge–Kutta step with the velocity field re-evaluated
/// at the intermediate states.
pub fn rk4_step<V>(
    ensemble: &ParticleEnsemble,
    mut velocity_fn: V,
    step_size: f64,
) -> Result<ParticleEnsemble>
where
    V: FnMut(&ParticleEnsemble) -> Result<Vec<DVector<f64>>>,
{
    let shift = |base: &ParticleEnsemble, v: &[DVector<f64>], h: f64| -> Result<ParticleEnsemble> {
        ParticleEnsemble::with_state(
            base.positions()
                .iter()
                .zip(v)
                .map(|(x, vi)| x + vi * h)
                .collect(),
            base.time() + h,
            base.step_index(),
        )
    };
    let h = step_size;
    let k1 = velocity_fn(ensemble)?;
    let k2 = velocity_fn(&shift(ensemble, &k1, 0.5 * h)?)?;
    let k3 = velocity_fn(&shift(ensemble, &k2, 0.5 * h)?)?;
    let k4 = velocity_fn(&shift(ensemble, &k3, h)?)?;
    let next = ensemble.step_index() + 1;
    let positions: Vec<DVector<f64>> = ensemble
        .positions()
        .iter()
        .enumerate()
        .map(|(i, x)| x + (&k1[i] + &k2[i] * 2.0 + &k3[i] * 2.0 + &k4[i]) * (h / 6.0))
        .collect();
    ParticleEnsemble::with_state(positions, ensemble.time() + h, next).map_err(|e| e.at_step(next))
}

fn context_for_step(
    kernel: &MatrixKernel,
    form: VelocityForm,
    policy: &ContextPolicy<'_>,
    ensemble: &ParticleEnsemble,
) -> Result<Option<KernelContext>> {
    let needed = kernel.requires_context() || form == VelocityForm::MeanFieldGaussianFit;
    if !needed {
        return Ok(None);
    }
    match policy {
        ContextPolicy::FromParticles => {
            Ok(Some(KernelContext::from_particles(ensemble.positions())?))
        }
        ContextPolicy::FromParameters(params) => Ok(Some(KernelContext::from_parameters(params))),
    }
}

fn velocity_for(
    ensemble: &ParticleEnsemble,
    target: &TargetDensity,
    kernel: &MatrixKernel,
    form: VelocityForm,
    policy: &ContextPolicy<'_>,
) -> Result<Vec<DVector<f64>>> {
    let ctx = context_for_step(kernel, form, policy, ensemble)?;
    match form {
        VelocityForm::Standard => svgd_velocity(ensemble, target, kernel, ctx.as_ref()),
        VelocityForm::MeanFieldGaussianFit => {
            let ctx = ctx.expect("mean-field form always builds a context");
            svgd_meanfield_velocity(ensemble, target, kernel, Some(&ctx), |x| {
                ctx.gaussian_score(x)
            })
        }
    }
}

fn particle_diagnostics(
    ensemble: &ParticleEnsemble,
    target: &TargetDensity,
) -> std::collections::BTreeMap<String, f64> {
    let mut diag = std::collections::BTreeMap::new();
    if ensemble.num_particles() >= 2 {
        if let (Some((p_mean, p_cov)), Ok((mean, cov))) = (
            target.moments(),
            linalg::sample_moments(ensemble.positions()),
        ) {
            if let Ok(fit) = GaussianVariationalParams::from_mean_cov(mean, &cov) {
                if let Ok(kl) = metrics::gaussian_kl(&fit, p_mean, p_cov) {
                    diag.insert("kl_fit".to_string(), kl);
                }
            }
        }
    }
    diag
}

/// Iterate the particle flow, recording the initial state, every
/// `record_every`-th step, and the final step.
pub fn run_svgd(
    initial: &ParticleEnsemble,
    target: &TargetDensity,
    kernel: &MatrixKernel,
    config: &FlowConfig,
    policy: &ContextPolicy<'_>,
    form: VelocityForm,
) -> Result<FlowTrajectory> {
    config.validate()?;
    if initial.num_particles() != config.num_particles {
        return Err(FlowError::Construction(format!(
            "config expects {} particles, ensemble has {}",
            config.num_particles,
            initial.num_particles()
        )));
    }
    if target.dim() != initial.dim() {
        return Err(FlowError::Dimension {
            expected: initial.dim(),
            actual: target.dim(),
        });
    }

    let mut trajectory = FlowTrajectory::new();
    let mut ensemble = initial.clone();
    trajectory.push(RecordedStep {
        step: 0,
        time: ensemble.time(),
        state: FlowState::Particles(ensemble.clone()),
        diagnostics: particle_diagnostics(&ensemble, target),
    })?;

    for step in 1..=config.num_steps {
        ensemble = match config.integrator {
            Integrator::Euler => {
                let velocity = velocity_for(&ensemble, target, kernel, form, policy)
                    .map_err(|e| e.at_step(step))?;
                euler_step(&ensemble, &velocity, config.step_size)?
            }
            Integrator::RungeKutta4 => rk4_step(
                &ensemble,
                |e| velocity_for(e, target, kernel, form, policy),
                config.step_size,
            )
            .map_err(|e| e.at_step(step))?,
        };
        if config.records(step) {
            trajectory.push(RecordedStep {
                step,
                time: ensemble.time(),
                state: FlowState::Particles(ensemble.clone()),
                diagnostics: particle_diagnostics(&ensemble, target),
            })?;
        }
    }
    Ok(trajectory)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{gaussian_ntk_kernel, identity_kernel, rbf_kernel};
    use crate::targets::{make_gaussian, make_mixture, GaussianMixtureSpec};
    use nalgebra::DMatrix;

    fn standard_normal_target(d: usize) -> TargetDensity {
        make_gaussian(DVector::zeros(d), DMatrix::identity(d, d)).unwrap()
    }

    #[test]
    fn single_particle_velocity_reduces_to_score() {
        let target = standard_normal_target(1);
        let at_zero = ParticleEnsemble::new(vec![DVector::zeros(1)]).unwrap();
        let v = svgd_velocity(&at_zero, &target, &rbf_kernel(), None).unwrap();
        assert!(v[0].amax() == 0.0);

        let at_x = ParticleEnsemble::new(vec![DVector::from_element(1, 1.7)]).unwrap();
        let v = svgd_velocity(&at_x, &target, &rbf_kernel(), None).unwrap();
        // Self-gradient vanishes, k(x,x) = 1, so the velocity is the score.
        assert!((v[0][0] - (-1.7)).abs() < 1e-14);
    }

    #[test]
    fn ensemble_velocity_is_centered_at_equilibrium() {
        // Particles already distributed as the target: velocities are pure
        // Monte Carlo residuals, so their ensemble mean is small compared
        // with the O(n^{-1/2}) spread of a single velocity.
        let target = standard_normal_target(2);
        let ensemble = ParticleEnsemble::from_standard_normal(10_000, 2, 12).unwrap();
        let v = svgd_velocity(&ensemble, &target, &rbf_kernel(), None).unwrap();
        let n = v.len() as f64;
        let mean = v.iter().fold(DVector::zeros(2), |acc, vi| acc + vi) / n;
        assert!(mean.norm() < 0.01, "mean velocity norm {}", mean.norm());
    }

    #[test]
    fn matrix_kernel_without_gradient_is_rejected_by_standard_form() {
        let params = GaussianVariationalParams::new(DVector::zeros(2), DMatrix::identity(2, 2))
            .unwrap();
        let kernel = gaussian_ntk_kernel(&params).unwrap();
        let ctx = KernelContext::from_parameters(&params);
        let ensemble = ParticleEnsemble::from_standard_normal(4, 2, 1).unwrap();
        let target = standard_normal_target(2);
        assert!(matches!(
            svgd_velocity(&ensemble, &target, &kernel, Some(&ctx)),
            Err(FlowError::UnsupportedKernel(_))
        ));
    }

    #[test]
    fn meanfield_velocity_vanishes_when_q_equals_p() {
        let target = standard_normal_target(2);
        let ensemble = ParticleEnsemble::from_standard_normal(50, 2, 3).unwrap();
        let v = svgd_meanfield_velocity(&ensemble, &target, &rbf_kernel(), None, |x| {
            Ok(target.score(x))
        })
        .unwrap();
        assert!(v.iter().all(|vi| vi.amax() == 0.0));
    }

    #[test]
    fn meanfield_identity_kernel_reduces_to_field() {
        let target = standard_normal_target(1);
        let x = DVector::from_element(1, 0.9);
        let ensemble = ParticleEnsemble::new(vec![x.clone()]).unwrap();
        let q = GaussianVariationalParams::new(
            DVector::from_element(1, -0.5),
            DMatrix::identity(1, 1),
        )
        .unwrap();
        let v = svgd_meanfield_velocity(&ensemble, &target, &identity_kernel(), None, |y| {
            q.score_q(y)
        })
        .unwrap();
        let expected = target.score(&x) - q.score_q(&x).unwrap();
        assert_eq!(v[0], expected);
    }

    #[test]
    fn standard_and_meanfield_forms_agree_statistically() {
        // Stein's identity equates the two forms in expectation under q.
        // Here q = p = N(0, I), where the mean-field velocities are exactly
        // zero, so the standard-form velocities must be pure Monte Carlo
        // noise of order n^{-1/2}.
        let target = standard_normal_target(2);
        let n = 100_000;
        let ensemble = ParticleEnsemble::from_standard_normal(n, 2, 8).unwrap();
        let kernel = rbf_kernel();

        let sub: Vec<DVector<f64>> = ensemble.positions()[..20].to_vec();
        let scores: Vec<DVector<f64>> = ensemble.positions().iter().map(|x| target.score(x)).collect();
        for xi in &sub {
            // Standard-form velocity of a query particle against the big
            // ensemble, together with the per-sample spread for a standard
            // error estimate.
            let mut acc = DVector::zeros(2);
            let mut sq = DVector::zeros(2);
            for (xj, sj) in ensemble.positions().iter().zip(&scores) {
                let term = kernel.apply(xi, xj, None, sj).unwrap() + kernels::rbf_gradient(xi, xj);
                acc += &term;
                sq += term.component_mul(&term);
            }
            let mean = acc / n as f64;
            for k in 0..2 {
                let var = sq[k] / n as f64 - mean[k] * mean[k];
                let se = (var / n as f64).sqrt();
                assert!(
                    mean[k].abs() < 3.0 * se.max(1e-6),
                    "residual {} vs se {se}",
                    mean[k]
                );
            }
        }
    }

    #[test]
    fn euler_step_basics() {
        let ensemble = ParticleEnsemble::from_standard_normal(5, 2, 4).unwrap();
        let zero = vec![DVector::zeros(2); 5];
        let stepped = euler_step(&ensemble, &zero, 0.1).unwrap();
        assert_eq!(stepped.positions(), ensemble.positions());
        assert_eq!(stepped.step_index(), 1);
        assert!((stepped.time() - 0.1).abs() < 1e-15);

        let v = vec![DVector::from_vec(vec![1.0, -2.0]); 5];
        let moved = euler_step(&ensemble, &v, 0.05).unwrap();
        for (before, after) in ensemble.positions().iter().zip(moved.positions()) {
            assert_eq!(after, &(before + &v[0] * 0.05));
        }

        let bad = vec![DVector::from_element(2, f64::INFINITY); 5];
        let err = euler_step(&ensemble, &bad, 0.1).unwrap_err();
        assert_eq!(err.step(), Some(1));
    }

    #[test]
    fn half_steps_richardson_consistency() {
        // Two half-steps differ from one full step by O(h²) on a smooth flow.
        let target = standard_normal_target(1);
        let kernel = rbf_kernel();
        let start = ParticleEnsemble::new(vec![
            DVector::from_element(1, 1.0),
            DVector::from_element(1, -0.5),
        ])
        .unwrap();
        let one_step = |e: &ParticleEnsemble, h: f64| -> ParticleEnsemble {
            let v = svgd_velocity(e, &target, &kernel, None).unwrap();
            euler_step(e, &v, h).unwrap()
        };
        let gap = |h: f64| -> f64 {
            let full = one_step(&start, h);
            let half = one_step(&one_step(&start, h / 2.0), h / 2.0);
            full.positions()
                .iter()
                .zip(half.positions())
                .map(|(a, b)| (a - b).norm())
                .fold(0.0, f64::max)
        };
        let g1 = gap(0.1);
        let g2 = gap(0.05);
        // Quartering is exact only asymptotically; allow slack around 4x.
        let ratio = g1 / g2;
        assert!(
            (2.5..6.0).contains(&ratio),
            "O(h²) ratio expected near 4, got {ratio}"
        );
    }

    #[test]
    fn zero_step_run_records_only_initial_state() {
        let target = standard_normal_target(2);
        let initial = ParticleEnsemble::from_standard_normal(8, 2, 5).unwrap();
        let config = FlowConfig {
            num_steps: 0,
            num_particles: 8,
            ..FlowConfig::default()
        };
        let traj = run_svgd(
            &initial,
            &target,
            &rbf_kernel(),
            &config,
            &ContextPolicy::FromParticles,
            VelocityForm::Standard,
        )
        .unwrap();
        assert_eq!(traj.recorded_steps().len(), 1);
        match &traj.recorded_steps()[0].state {
            FlowState::Particles(e) => assert_eq!(e.positions(), initial.positions()),
            FlowState::Params(_) => panic!("expected particle state"),
        }
    }

    #[test]
    fn svgd_converges_to_standard_normal() {
        let target = standard_normal_target(1);
        // Start deliberately offset.
        let initial = ParticleEnsemble::new(
            ParticleEnsemble::from_standard_normal(200, 1, 6)
                .unwrap()
                .positions()
                .iter()
                .map(|x| x + DVector::from_element(1, 2.0))
                .collect(),
        )
        .unwrap();
        let config = FlowConfig {
            num_particles: 200,
            ..FlowConfig::default()
        };
        let traj = run_svgd(
            &initial,
            &target,
            &rbf_kernel(),
            &config,
            &ContextPolicy::FromParticles,
            VelocityForm::Standard,
        )
        .unwrap();
        let last = traj.recorded_steps().last().unwrap();
        let FlowState::Particles(e) = &last.state else {
            panic!("expected particles");
        };
        let (mean, cov) = linalg::sample_moments(e.positions()).unwrap();
        assert!(mean[0].abs() < 0.1, "final mean {}", mean[0]);
        assert!((cov[(0, 0)] - 1.0).abs() < 0.15, "final var {}", cov[(0, 0)]);

        // Fitted KL is non-increasing after the transient.
        let kls: Vec<f64> = traj
            .recorded_steps()
            .iter()
            .filter(|r| r.step >= 10)
            .filter_map(|r| r.diagnostics.get("kl_fit").copied())
            .collect();
        assert!(kls.len() >= 2);
        for w in kls.windows(2) {
            assert!(w[1] <= w[0] + 1e-3, "kl_fit increased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn bimodal_target_keeps_both_modes_populated() {
        let target = make_mixture(&GaussianMixtureSpec {
            weights: vec![0.5, 0.5],
            means: vec![
                DVector::from_vec(vec![-2.0, 0.0]),
                DVector::from_vec(vec![2.0, 0.0]),
            ],
            covariances: vec![DMatrix::identity(2, 2), DMatrix::identity(2, 2)],
        })
        .unwrap();
        let initial = ParticleEnsemble::from_standard_normal(200, 2, 7).unwrap();
        let config = FlowConfig {
            num_steps: 1000,
            num_particles: 200,
            ..FlowConfig::default()
        };
        let traj = run_svgd(
            &initial,
            &target,
            &rbf_kernel(),
            &config,
            &ContextPolicy::FromParticles,
            VelocityForm::Standard,
        )
        .unwrap();
        let FlowState::Particles(e) = &traj.recorded_steps().last().unwrap().state else {
            panic!("expected particles");
        };
        let left = e.positions().iter().filter(|x| x[0] < 0.0).count();
        let right = e.num_particles() - left;
        let frac = left.min(right) as f64 / e.num_particles() as f64;
        assert!(frac >= 0.2, "smaller mode holds only {frac:.2} of particles");
    }

    #[test]
    fn trajectories_are_deterministic() {
        let target = standard_normal_target(2);
        let config = FlowConfig {
            num_steps: 50,
            num_particles: 30,
            record_every: 10,
            ..FlowConfig::default()
        };
        let run = || {
            let initial = ParticleEnsemble::from_standard_normal(30, 2, 9).unwrap();
            run_svgd(
                &initial,
                &target,
                &rbf_kernel(),
                &config,
                &ContextPolicy::FromParticles,
                VelocityForm::Standard,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.recorded_steps().len(), b.recorded_steps().len());
        for (ra, rb) in a.recorded_steps().iter().zip(b.recorded_steps()) {
            let (FlowState::Particles(ea), FlowState::Particles(eb)) = (&ra.state, &rb.state)
            else {
                panic!("expected particles");
            };
            assert_eq!(ea.positions(), eb.positions());
        }
    }

    #[test]
    fn meanfield_ntk_flow_runs_with_particle_context() {
        // The configuration used by the equivalence harness: tangent kernel
        // with moments re-fitted from particles each step.
        let target = standard_normal_target(2);
        let params = GaussianVariationalParams::new(
            DVector::from_vec(vec![1.0, -1.0]),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let batch = BaseSampleBatch::generate(21, 64, 2).unwrap();
        let initial = ParticleEnsemble::from_pushforward(&params, &batch).unwrap();
        let kernel = gaussian_ntk_kernel(&params).unwrap();
        let config = FlowConfig {
            num_steps: 200,
            num_particles: 64,
            record_every: 50,
            step_size: 0.05,
            ..FlowConfig::default()
        };
        let traj = run_svgd(
            &initial,
            &target,
            &kernel,
            &config,
            &ContextPolicy::FromParticles,
            VelocityForm::MeanFieldGaussianFit,
        )
        .unwrap();
        let FlowState::Particles(e) = &traj.recorded_steps().last().unwrap().state else {
            panic!("expected particles");
        };
        let (mean, _) = linalg::sample_moments(e.positions()).unwrap();
        assert!(mean.norm() < 0.5, "mean should contract toward 0, got {mean}");
    }

    #[test]
    fn rk4_solves_the_single_particle_flow_to_high_order() {
        // One particle under the RBF kernel follows dx/dt = −x exactly, so
        // the step can be compared against the closed-form solution.
        let target = standard_normal_target(1);
        let kernel = rbf_kernel();
        let initial = ParticleEnsemble::new(vec![DVector::from_element(1, 2.0)]).unwrap();
        let vf = |e: &ParticleEnsemble| svgd_velocity(e, &target, &kernel, None);
        let h = 0.01_f64;
        let exact = 2.0 * (-h).exp();
        let rk = rk4_step(&initial, vf, h).unwrap();
        let v = vf(&initial).unwrap();
        let eu = euler_step(&initial, &v, h).unwrap();
        let rk_err = (rk.positions()[0][0] - exact).abs();
        let eu_err = (eu.positions()[0][0] - exact).abs();
        assert!(rk_err < 1e-10, "rk4 error {rk_err}");
        assert!(rk_err < eu_err, "rk4 ({rk_err}) should beat euler ({eu_err})");
    }
}
