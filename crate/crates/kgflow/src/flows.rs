//! Unified kernel-gradient-flow runner over functional derivatives, plus the
//! toy minimax GAN flow driven by the Jensen–Shannon first variation.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::DVector;

use crate::bbvi::{
    apply_param_step, stl_gradient, BaseSampleBatch, BatchMode, GaussianVariationalParams,
    ParamGradient,
};
use crate::error::{FlowError, Result};
use crate::kernels::{self, KernelContext, MatrixKernel};
use crate::metrics::{FlowState, FlowTrajectory, RecordedStep};
use crate::quadrature::GridSpec;
use crate::rng;
use crate::svgd::{FlowConfig, Integrator, ParticleEnsemble};
use crate::targets::TargetDensity;

type EvaluateFn = Arc<dyn Fn(&DVector<f64>, &TargetDensity) -> Result<f64> + Send + Sync>;
type GradientFn = Arc<dyn Fn(&DVector<f64>, &TargetDensity) -> Result<DVector<f64>> + Send + Sync>;

/// First variation Ψ_q of a divergence functional, evaluated against the
/// current approximating density `q`.
#[derive(Clone)]
pub struct FunctionalDerivative {
    evaluate: EvaluateFn,
    gradient: GradientFn,
}

impl FunctionalDerivative {
    pub fn evaluate(&self, x: &DVector<f64>, q_density: &TargetDensity) -> Result<f64> {
        (self.evaluate)(x, q_density)
    }

    pub fn gradient(&self, x: &DVector<f64>, q_density: &TargetDensity) -> Result<DVector<f64>> {
        (self.gradient)(x, q_density)
    }
}

impl std::fmt::Debug for FunctionalDerivative {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FunctionalDerivative").finish_non_exhaustive()
    }
}

fn log_density_any(t: &TargetDensity, x: &DVector<f64>) -> f64 {
    match t.log_density_normalized(x) {
        Ok(v) => v,
        Err(_) => t.log_density_unnormalized(x),
    }
}

/// Ψ for `KL(q ‖ p)`: evaluate is `log q − log p`, gradient is
/// `score_q − score_p`. Normalizing constants are used when known; they only
/// shift the evaluation by a constant and never affect the gradient.
pub fn kl_functional_derivative(target: &TargetDensity) -> FunctionalDerivative {
    let p_eval = target.clone();
    let p_grad = target.clone();
    FunctionalDerivative {
        evaluate: Arc::new(move |x, q| Ok(log_density_any(q, x) - log_density_any(&p_eval, x))),
        gradient: Arc::new(move |x, q| Ok(q.score(x) - p_grad.score(x))),
    }
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn require_normalized(t: &TargetDensity, who: &str) -> Result<()> {
    if t.log_normalizer().is_none() {
        return Err(FlowError::Construction(format!(
            "{who} must carry a normalized density for the Jensen–Shannon derivative"
        )));
    }
    Ok(())
}

/// Ψ for the Jensen–Shannon divergence against fixed data density `p_data`:
/// evaluate is `½·log(q/m)` with `m = ½(p_data + q)`, the optimal
/// discriminator up to an additive constant; gradient is
/// `½·σ(log p − log q)·(score_q − score_p)`.
pub fn js_functional_derivative(p_data: &TargetDensity) -> Result<FunctionalDerivative> {
    require_normalized(p_data, "p_data")?;
    let p_eval = p_data.clone();
    let p_grad = p_data.clone();
    let ln_half = 0.5f64.ln();
    Ok(FunctionalDerivative {
        evaluate: Arc::new(move |x, q| {
            require_normalized(q, "q")?;
            let lp = p_eval.log_density_normalized(x)?;
            let lq = q.log_density_normalized(x)?;
            let lm = ln_half + log_add_exp(lp, lq);
            Ok(0.5 * (lq - lm))
        }),
        gradient: Arc::new(move |x, q| {
            require_normalized(q, "q")?;
            let lp = p_grad.log_density_normalized(x)?;
            let lq = q.log_density_normalized(x)?;
            let w = sigmoid(lp - lq);
            Ok((q.score(x) - p_grad.score(x)) * (0.5 * w))
        }),
    })
}

/// Particle velocities of the kernel gradient flow of a divergence with
/// first variation `psi`: row i is `−(1/n) Σⱼ k(xᵢ,xⱼ)·∇Ψ(xⱼ)`.
pub fn gan_flow_velocity(
    particles: &ParticleEnsemble,
    psi: &FunctionalDerivative,
    kernel: &MatrixKernel,
    ctx: Option<&KernelContext>,
    q_density: &TargetDensity,
) -> Result<Vec<DVector<f64>>> {
    if q_density.dim() != particles.dim() {
        return Err(FlowError::Dimension {
            expected: particles.dim(),
            actual: q_density.dim(),
        });
    }
    let positions = particles.positions();
    let field: Vec<DVector<f64>> = positions
        .iter()
        .map(|y| Ok(-psi.gradient(y, q_density)?))
        .collect::<Result<_>>()?;
    kernels::transport_all(kernel, ctx, positions, positions, &field)
}

/// Which divergence the parameter-space flow descends.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowObjective {
    /// `KL(q ‖ target)`; the flow is ELBO ascent.
    Kl,
    /// Jensen–Shannon divergence to the data density.
    Js,
}

fn batch_for_step(
    mode: &BatchMode,
    config: &FlowConfig,
    dim: usize,
    step: usize,
) -> Result<BaseSampleBatch> {
    match mode {
        BatchMode::Fresh => BaseSampleBatch::generate(
            rng::derive_seed(config.seed, step as u64),
            config.num_particles,
            dim,
        ),
        BatchMode::Fixed(batch) => {
            if batch.len() != config.num_particles {
                return Err(FlowError::Construction(format!(
                    "fixed batch has {} samples, config expects {}",
                    batch.len(),
                    config.num_particles
                )));
            }
            Ok(batch.clone())
        }
    }
}

fn js_param_gradient(
    params: &GaussianVariationalParams,
    psi: &FunctionalDerivative,
    batch: &BaseSampleBatch,
) -> Result<ParamGradient> {
    let d = params.dim();
    let q = params.to_target();
    let mut grad_mu = DVector::zeros(d);
    let mut grad_a = nalgebra::DMatrix::zeros(d, d);
    for eps in batch.draws() {
        if eps.len() != d {
            return Err(FlowError::Dimension {
                expected: d,
                actual: eps.len(),
            });
        }
        let y = params.pushforward(eps);
        let g = -psi.gradient(&y, &q)?;
        grad_a += &g * eps.transpose();
        grad_mu += g;
    }
    let n = batch.len() as f64;
    grad_mu.unscale_mut(n);
    grad_a.unscale_mut(n);
    if !crate::linalg::all_finite_vec(&grad_mu) || !crate::linalg::all_finite_mat(&grad_a) {
        return Err(FlowError::Numerical {
            what: "non-finite Jensen–Shannon parameter gradient".into(),
            step: None,
        });
    }
    Ok(ParamGradient { grad_mu, grad_a })
}

/// Jensen–Shannon divergence between two normalized densities with known
/// moments, by midpoint quadrature on a tensor grid spanning ±8 combined
/// standard deviations. Supports `d ≤ 2`.
pub fn js_divergence(p: &TargetDensity, q: &TargetDensity, nodes_per_axis: usize) -> Result<f64> {
    require_normalized(p, "p")?;
    require_normalized(q, "q")?;
    let d = p.dim();
    if q.dim() != d {
        return Err(FlowError::Dimension {
            expected: d,
            actual: q.dim(),
        });
    }
    let (p_mean, p_cov) = p.moments().ok_or_else(|| {
        FlowError::Construction("p must carry moments for the quadrature box".into())
    })?;
    let (q_mean, q_cov) = q.moments().ok_or_else(|| {
        FlowError::Construction("q must carry moments for the quadrature box".into())
    })?;
    let mut lo = Vec::with_capacity(d);
    let mut hi = Vec::with_capacity(d);
    for k in 0..d {
        let spread = p_cov[(k, k)].sqrt().max(q_cov[(k, k)].sqrt());
        lo.push(p_mean[k].min(q_mean[k]) - 8.0 * spread);
        hi.push(p_mean[k].max(q_mean[k]) + 8.0 * spread);
    }
    let ln_half = 0.5f64.ln();
    let grid = GridSpec::new(lo, hi, nodes_per_axis)?;
    Ok(grid.integrate(|x| {
        let lp = p.log_density_normalized(x).expect("checked normalized");
        let lq = q.log_density_normalized(x).expect("checked normalized");
        let lm = ln_half + log_add_exp(lp, lq);
        0.5 * (lp.exp() * (lp - lm) + lq.exp() * (lq - lm))
    }))
}

fn param_gradient_for(
    params: &GaussianVariationalParams,
    target: &TargetDensity,
    objective: FlowObjective,
    psi_js: Option<&FunctionalDerivative>,
    batch: &BaseSampleBatch,
) -> Result<ParamGradient> {
    match objective {
        FlowObjective::Kl => stl_gradient(params, target, batch),
        FlowObjective::Js => {
            let psi = psi_js.expect("js objective always constructs psi");
            js_param_gradient(params, psi, batch)
        }
    }
}

fn param_diagnostics(
    params: &GaussianVariationalParams,
    target: &TargetDensity,
    objective: FlowObjective,
    psi_js: Option<&FunctionalDerivative>,
    batch: &BaseSampleBatch,
) -> Result<BTreeMap<String, f64>> {
    let mut diag = BTreeMap::new();
    let grad = param_gradient_for(params, target, objective, psi_js, batch)?;
    diag.insert("grad_norm".to_string(), grad.norm());
    match objective {
        FlowObjective::Kl => {
            diag.insert(
                "elbo".to_string(),
                crate::bbvi::elbo_estimate(params, target, batch)?,
            );
        }
        FlowObjective::Js => {
            if target.dim() <= 2 {
                diag.insert(
                    "js_divergence".to_string(),
                    js_divergence(target, &params.to_target(), 2048)?,
                );
            }
        }
    }
    Ok(diag)
}

/// Evolve the variational parameters along the kernel gradient flow of the
/// chosen objective, recording the initial state, every `record_every`-th
/// step, and the final step.
pub fn run_param_flow(
    initial: &GaussianVariationalParams,
    target: &TargetDensity,
    config: &FlowConfig,
    objective: FlowObjective,
    batch_mode: &BatchMode,
) -> Result<FlowTrajectory> {
    config.validate()?;
    let d = initial.dim();
    if target.dim() != d {
        return Err(FlowError::Dimension {
            expected: d,
            actual: target.dim(),
        });
    }
    let psi_js = match objective {
        FlowObjective::Kl => None,
        FlowObjective::Js => Some(js_functional_derivative(target)?),
    };

    let mut trajectory = FlowTrajectory::new();
    let mut params = initial.clone();
    let init_batch = batch_for_step(batch_mode, config, d, 0)?;
    trajectory.push(RecordedStep {
        step: 0,
        time: 0.0,
        state: FlowState::Params(params.clone()),
        diagnostics: param_diagnostics(&params, target, objective, psi_js.as_ref(), &init_batch)?,
    })?;

    let h = config.step_size;
    let mut time = 0.0;
    for step in 1..=config.num_steps {
        let batch = batch_for_step(batch_mode, config, d, step)?;
        params = match config.integrator {
            Integrator::Euler => {
                let grad = param_gradient_for(&params, target, objective, psi_js.as_ref(), &batch)
                    .map_err(|e| e.at_step(step))?;
                apply_param_step(&params, &grad, h).map_err(|e| e.at_step(step))?
            }
            Integrator::RungeKutta4 => {
                rk4_param_step(&params, target, objective, psi_js.as_ref(), &batch, h)
                    .map_err(|e| e.at_step(step))?
            }
        };
        time += h;
        if step == config.num_steps || step % config.record_every == 0 {
            trajectory.push(RecordedStep {
                step,
                time,
                state: FlowState::Params(params.clone()),
                diagnostics: param_diagnostics(
                    &params,
                    target,
                    objective,
                    psi_js.as_ref(),
                    &batch,
                )?,
            })?;
        }
    }
    Ok(trajectory)
}

fn rk4_param_step(
    params: &GaussianVariationalParams,
    target: &TargetDensity,
    objective: FlowObjective,
    psi_js: Option<&FunctionalDerivative>,
    batch: &BaseSampleBatch,
    h: f64,
) -> Result<GaussianVariationalParams> {
    let grad_at = |p: &GaussianVariationalParams| -> Result<ParamGradient> {
        param_gradient_for(p, target, objective, psi_js, batch)
    };
    let k1 = grad_at(params)?;
    let k2 = grad_at(&apply_param_step(params, &k1, 0.5 * h)?)?;
    let k3 = grad_at(&apply_param_step(params, &k2, 0.5 * h)?)?;
    let k4 = grad_at(&apply_param_step(params, &k3, h)?)?;
    let combined = ParamGradient {
        grad_mu: (&k1.grad_mu + &k2.grad_mu * 2.0 + &k3.grad_mu * 2.0 + &k4.grad_mu) / 6.0,
        grad_a: (&k1.grad_a + &k2.grad_a * 2.0 + &k3.grad_a * 2.0 + &k4.grad_a) / 6.0,
    };
    apply_param_step(params, &combined, h)
}

/// The toy minimax GAN: descend the Jensen–Shannon divergence to `p_data`
/// over the Gaussian generator family, with the optimal discriminator
/// recomputed from the analytic densities at every step. Fresh base-sample
/// batches are drawn per step from `config.seed`.
pub fn run_gan_flow(
    initial: &GaussianVariationalParams,
    p_data: &TargetDensity,
    config: &FlowConfig,
) -> Result<FlowTrajectory> {
    if p_data.dim() > 2 {
        return Err(FlowError::UnsupportedDimension {
            dim: p_data.dim(),
            what: "Jensen–Shannon quadrature".into(),
        });
    }
    run_param_flow(initial, p_data, config, FlowObjective::Js, &BatchMode::Fresh)
}
