//! TOML experiment configuration: parsing, defaults, validation, and
//! construction of the library objects a run needs.

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use kgflow::bbvi::GaussianVariationalParams;
use kgflow::kernels::{self, MatrixKernel};
use kgflow::linalg;
use kgflow::svgd::{FlowConfig, Integrator};
use kgflow::targets::{
    make_gaussian, make_mixture, posterior_from_prior_likelihood, GaussianMixtureSpec,
    TargetDensity,
};

use crate::CliError;

/// Raw document as written by the user. Unknown keys are rejected by serde;
/// semantic validation happens in [`parse_config`].
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub mode: String,
    pub seed: Option<u64>,
    pub output: Option<String>,
    pub emit_plot: Option<bool>,
    pub target: RawTarget,
    pub kernel: Option<RawKernel>,
    pub flow: Option<RawFlow>,
    pub init: Option<RawInit>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawTarget {
    pub family: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub covariance: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub means: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub covariances: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prior_mean: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prior_covariance: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub observations: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise_covariance: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawKernel {
    pub kind: Option<String>,
    pub bandwidth_heuristic: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawFlow {
    pub step_size: Option<f64>,
    pub num_steps: Option<usize>,
    pub num_particles: Option<usize>,
    pub record_every: Option<usize>,
    pub integrator: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawInit {
    pub mu: Option<Vec<f64>>,
    pub a: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Svgd,
    Bbvi,
    Compare,
    Ganflow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelChoice {
    Rbf,
    GaussianNtk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BandwidthHeuristic {
    None,
    Median,
}

/// The effective configuration after defaults and overrides, echoed into
/// the summary document.
#[derive(Debug, Clone, Serialize)]
pub struct ConfigEcho {
    pub mode: Mode,
    pub seed: u64,
    pub output: String,
    pub emit_plot: bool,
    pub target: RawTarget,
    pub kernel: KernelEcho,
    pub flow: FlowEcho,
    pub init: InitEcho,
}

#[derive(Debug, Clone, Serialize)]
pub struct KernelEcho {
    pub kind: KernelChoice,
    pub bandwidth_heuristic: BandwidthHeuristic,
}

#[derive(Debug, Clone, Serialize)]
pub struct FlowEcho {
    pub step_size: f64,
    pub num_steps: usize,
    pub num_particles: usize,
    pub record_every: usize,
    pub integrator: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct InitEcho {
    pub mu: Vec<f64>,
    pub a: Vec<Vec<f64>>,
}

/// A fully validated experiment.
#[derive(Debug)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub seed: u64,
    pub output: PathBuf,
    pub emit_plot: bool,
    pub target: TargetDensity,
    pub kernel_choice: KernelChoice,
    pub bandwidth: BandwidthHeuristic,
    pub flow: FlowConfig,
    pub init: GaussianVariationalParams,
    pub echo: ConfigEcho,
}

impl ExperimentConfig {
    pub fn dim(&self) -> usize {
        self.target.dim()
    }

    /// The kernel a particle run uses, resolved against the initial state.
    pub fn build_kernel(&self, initial_positions: &[DVector<f64>]) -> Result<MatrixKernel, CliError> {
        match self.kernel_choice {
            KernelChoice::Rbf => match self.bandwidth {
                BandwidthHeuristic::None => Ok(kernels::rbf_kernel()),
                BandwidthHeuristic::Median => {
                    let gamma = kernels::median_heuristic_bandwidth(initial_positions)
                        .map_err(CliError::from_setup)?;
                    kernels::rbf_kernel_with_bandwidth(gamma).map_err(CliError::from_setup)
                }
            },
            KernelChoice::GaussianNtk => {
                kernels::gaussian_ntk_kernel(&self.init).map_err(CliError::from_setup)
            }
        }
    }
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn to_vector(name: &str, v: &[f64]) -> Result<DVector<f64>, CliError> {
    if v.is_empty() {
        return Err(bad(format!("{name} must not be empty")));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(bad(format!("{name} contains a non-finite entry")));
    }
    Ok(DVector::from_column_slice(v))
}

fn to_matrix(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>, CliError> {
    if rows.is_empty() {
        return Err(bad(format!("{name} must not be empty")));
    }
    let cols = rows[0].len();
    if cols == 0 {
        return Err(bad(format!("{name} has an empty row")));
    }
    for (i, row) in rows.iter().enumerate() {
        if row.len() != cols {
            return Err(bad(format!(
                "{name} is ragged: row {i} has {} entries, expected {cols}",
                row.len()
            )));
        }
        if row.iter().any(|x| !x.is_finite()) {
            return Err(bad(format!("{name} contains a non-finite entry")));
        }
    }
    Ok(DMatrix::from_row_iterator(
        rows.len(),
        cols,
        rows.iter().flatten().copied(),
    ))
}

fn require<T: Clone>(opt: &Option<T>, key: &str, family: &str) -> Result<T, CliError> {
    opt.clone()
        .ok_or_else(|| bad(format!("target.{key} is required for family \"{family}\"")))
}

fn forbid_stray_fields(raw: &RawTarget, allowed: &[&str]) -> Result<(), CliError> {
    let present: Vec<(&str, bool)> = vec![
        ("mean", raw.mean.is_some()),
        ("covariance", raw.covariance.is_some()),
        ("weights", raw.weights.is_some()),
        ("means", raw.means.is_some()),
        ("covariances", raw.covariances.is_some()),
        ("prior_mean", raw.prior_mean.is_some()),
        ("prior_covariance", raw.prior_covariance.is_some()),
        ("observations", raw.observations.is_some()),
        ("noise_covariance", raw.noise_covariance.is_some()),
    ];
    for (key, set) in present {
        if set && !allowed.contains(&key) {
            return Err(bad(format!(
                "target.{key} does not apply to family \"{}\"",
                raw.family
            )));
        }
    }
    Ok(())
}

fn build_target(raw: &RawTarget) -> Result<TargetDensity, CliError> {
    match raw.family.as_str() {
        "gaussian" => {
            forbid_stray_fields(raw, &["mean", "covariance"])?;
            let mean = to_vector("target.mean", &require(&raw.mean, "mean", "gaussian")?)?;
            let cov = to_matrix(
                "target.covariance",
                &require(&raw.covariance, "covariance", "gaussian")?,
            )?;
            make_gaussian(mean, cov).map_err(CliError::from_setup)
        }
        "mixture" => {
            forbid_stray_fields(raw, &["weights", "means", "covariances"])?;
            let weights = require(&raw.weights, "weights", "mixture")?;
            let means = require(&raw.means, "means", "mixture")?
                .iter()
                .map(|m| to_vector("target.means", m))
                .collect::<Result<Vec<_>, _>>()?;
            let covariances = require(&raw.covariances, "covariances", "mixture")?
                .iter()
                .map(|c| to_matrix("target.covariances", c))
                .collect::<Result<Vec<_>, _>>()?;
            make_mixture(&GaussianMixtureSpec {
                weights,
                means,
                covariances,
            })
            .map_err(CliError::from_setup)
        }
        "gaussian-posterior" => {
            forbid_stray_fields(
                raw,
                &["prior_mean", "prior_covariance", "observations", "noise_covariance"],
            )?;
            let prior_mean = to_vector(
                "target.prior_mean",
                &require(&raw.prior_mean, "prior_mean", "gaussian-posterior")?,
            )?;
            let prior_cov = to_matrix(
                "target.prior_covariance",
                &require(&raw.prior_covariance, "prior_covariance", "gaussian-posterior")?,
            )?;
            let observations = require(&raw.observations, "observations", "gaussian-posterior")?
                .iter()
                .map(|y| to_vector("target.observations", y))
                .collect::<Result<Vec<_>, _>>()?;
            let noise_cov = to_matrix(
                "target.noise_covariance",
                &require(&raw.noise_covariance, "noise_covariance", "gaussian-posterior")?,
            )?;
            build_gaussian_posterior(prior_mean, prior_cov, observations, noise_cov)
        }
        other => Err(bad(format!(
            "unknown target.family \"{other}\": expected \"gaussian\", \"mixture\", or \"gaussian-posterior\""
        ))),
    }
}

/// Gaussian prior plus Gaussian observations with known noise covariance.
/// The posterior density is left unnormalized; its exact conjugate moments
/// are attached for diagnostics.
fn build_gaussian_posterior(
    prior_mean: DVector<f64>,
    prior_cov: DMatrix<f64>,
    observations: Vec<DVector<f64>>,
    noise_cov: DMatrix<f64>,
) -> Result<TargetDensity, CliError> {
    let d = prior_mean.len();
    if observations.is_empty() {
        return Err(bad("target.observations must contain at least one vector"));
    }
    for y in &observations {
        if y.len() != d {
            return Err(bad(format!(
                "target.observations entries must have dimension {d}, got {}",
                y.len()
            )));
        }
    }
    if noise_cov.nrows() != d || noise_cov.ncols() != d {
        return Err(bad(format!(
            "target.noise_covariance must be {d}x{d}, got {}x{}",
            noise_cov.nrows(),
            noise_cov.ncols()
        )));
    }
    let prior = make_gaussian(prior_mean.clone(), prior_cov.clone()).map_err(CliError::from_setup)?;
    let noise_chol = linalg::spd_cholesky_strict(&noise_cov).map_err(|_| {
        bad("target.noise_covariance must be symmetric positive definite")
    })?;
    let prior_chol = linalg::spd_cholesky_strict(&prior_cov)
        .map_err(|_| bad("target.prior_covariance must be symmetric positive definite"))?;

    let obs_ll = observations.clone();
    let chol_ll = noise_chol.clone();
    let log_likelihood = move |x: &DVector<f64>| -> f64 {
        obs_ll
            .iter()
            .map(|y| {
                let r = y - x;
                -0.5 * r.dot(&chol_ll.solve(&r))
            })
            .sum()
    };
    let obs_score = observations.clone();
    let chol_score = noise_chol.clone();
    let score_likelihood = move |x: &DVector<f64>| -> DVector<f64> {
        let mut acc = DVector::zeros(x.len());
        for y in &obs_score {
            acc += chol_score.solve(&(y - x));
        }
        acc
    };
    let posterior = posterior_from_prior_likelihood(&prior, log_likelihood, score_likelihood)
        .map_err(CliError::from_setup)?;

    // Conjugate posterior moments: precision sums, then one more solve.
    let m = observations.len() as f64;
    let prior_prec = prior_chol.inverse();
    let noise_prec = noise_chol.inverse();
    let post_prec = &prior_prec + &noise_prec * m;
    let post_chol = linalg::spd_cholesky_strict(&post_prec)
        .map_err(|_| bad("posterior precision is not positive definite"))?;
    let post_cov = post_chol.inverse();
    let obs_sum = observations
        .iter()
        .fold(DVector::zeros(d), |acc, y| acc + y);
    let post_mean = post_chol.solve(&(&prior_prec * &prior_mean + &noise_prec * obs_sum));
    Ok(posterior.with_moments(post_mean, post_cov))
}

fn parse_mode(s: &str) -> Result<Mode, CliError> {
    match s {
        "svgd" => Ok(Mode::Svgd),
        "bbvi" => Ok(Mode::Bbvi),
        "compare" => Ok(Mode::Compare),
        "ganflow" => Ok(Mode::Ganflow),
        other => Err(bad(format!(
            "unknown mode \"{other}\": expected \"svgd\", \"bbvi\", \"compare\", or \"ganflow\""
        ))),
    }
}

fn parse_kernel(raw: &Option<RawKernel>) -> Result<(KernelChoice, BandwidthHeuristic), CliError> {
    let (kind, heuristic) = match raw {
        None => (None, None),
        Some(k) => (k.kind.clone(), k.bandwidth_heuristic.clone()),
    };
    let choice = match kind.as_deref() {
        None | Some("rbf") => KernelChoice::Rbf,
        Some("gaussian-ntk") => KernelChoice::GaussianNtk,
        Some(other) => {
            return Err(bad(format!(
                "unknown kernel.kind \"{other}\": expected \"rbf\" or \"gaussian-ntk\""
            )))
        }
    };
    let bandwidth = match heuristic.as_deref() {
        None | Some("none") => BandwidthHeuristic::None,
        Some("median") => BandwidthHeuristic::Median,
        Some(other) => {
            return Err(bad(format!(
                "unknown kernel.bandwidth_heuristic \"{other}\": expected \"none\" or \"median\""
            )))
        }
    };
    if bandwidth == BandwidthHeuristic::Median && choice != KernelChoice::Rbf {
        return Err(bad(
            "kernel.bandwidth_heuristic = \"median\" applies only to kernel.kind = \"rbf\"",
        ));
    }
    Ok((choice, bandwidth))
}

fn parse_flow(raw: &Option<RawFlow>) -> Result<(FlowConfig, String), CliError> {
    let defaults = FlowConfig::default();
    let (step_size, num_steps, num_particles, record_every, integrator_name) = match raw {
        None => (None, None, None, None, None),
        Some(f) => (
            f.step_size,
            f.num_steps,
            f.num_particles,
            f.record_every,
            f.integrator.clone(),
        ),
    };
    let integrator = match integrator_name.as_deref() {
        None | Some("euler") => Integrator::Euler,
        Some("rk4") => Integrator::RungeKutta4,
        Some(other) => {
            return Err(bad(format!(
                "unknown flow.integrator \"{other}\": expected \"euler\" or \"rk4\""
            )))
        }
    };
    let config = FlowConfig {
        step_size: step_size.unwrap_or(defaults.step_size),
        num_steps: num_steps.unwrap_or(defaults.num_steps),
        num_particles: num_particles.unwrap_or(defaults.num_particles),
        seed: 0, // overwritten by the top-level seed below
        record_every: record_every.unwrap_or(defaults.record_every),
        integrator,
    };
    config
        .validate()
        .map_err(|e| bad(format!("flow config invalid: {e}")))?;
    let name = match integrator {
        Integrator::Euler => "euler".to_string(),
        Integrator::RungeKutta4 => "rk4".to_string(),
    };
    Ok((config, name))
}

fn parse_init(
    raw: &Option<RawInit>,
    dim: usize,
) -> Result<GaussianVariationalParams, CliError> {
    let (mu_raw, a_raw) = match raw {
        None => (None, None),
        Some(i) => (i.mu.clone(), i.a.clone()),
    };
    let mu = match mu_raw {
        Some(v) => {
            let mu = to_vector("init.mu", &v)?;
            if mu.len() != dim {
                return Err(bad(format!(
                    "init.mu has dimension {}, target has dimension {dim}",
                    mu.len()
                )));
            }
            mu
        }
        None => DVector::zeros(dim),
    };
    let a = match a_raw {
        Some(rows) => {
            let a = to_matrix("init.a", &rows)?;
            if a.nrows() != dim || a.ncols() != dim {
                return Err(bad(format!(
                    "init.a must be {dim}x{dim}, got {}x{}",
                    a.nrows(),
                    a.ncols()
                )));
            }
            a
        }
        None => DMatrix::identity(dim, dim),
    };
    GaussianVariationalParams::new(mu, a)
        .map_err(|e| bad(format!("init parameters invalid: {e}")))
}

/// Command-line overrides applied on top of the document.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub output: Option<PathBuf>,
    pub seed: Option<u64>,
    pub plot: bool,
}

/// Parse and validate a config document, filling defaults.
pub fn parse_config(text: &str, overrides: &Overrides) -> Result<ExperimentConfig, CliError> {
    let raw: RawConfig =
        toml::from_str(text).map_err(|e| bad(format!("config parse error: {e}")))?;

    let mode = parse_mode(&raw.mode)?;
    let seed = overrides.seed.or(raw.seed).unwrap_or(0);
    let output = overrides
        .output
        .clone()
        .or_else(|| raw.output.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    let emit_plot = overrides.plot || raw.emit_plot.unwrap_or(false);

    let target = build_target(&raw.target)?;
    let dim = target.dim();
    if dim > 9 {
        return Err(bad(format!(
            "target dimension {dim} exceeds the supported maximum of 9"
        )));
    }
    let (kernel_choice, bandwidth) = parse_kernel(&raw.kernel)?;
    let (mut flow, integrator_name) = parse_flow(&raw.flow)?;
    flow.seed = seed;
    let init = parse_init(&raw.init, dim)?;

    if mode == Mode::Ganflow && dim > 2 {
        return Err(bad(format!(
            "mode \"ganflow\" needs target dimension <= 2 for the divergence quadrature, got {dim}"
        )));
    }
    if mode == Mode::Ganflow && target.log_normalizer().is_none() {
        return Err(bad(
            "mode \"ganflow\" needs a normalized target density (family \"gaussian\" or \"mixture\")",
        ));
    }
    if emit_plot && dim > 2 {
        return Err(bad(format!(
            "plots are only supported for dimension <= 2, got {dim}"
        )));
    }

    let echo = ConfigEcho {
        mode,
        seed,
        output: output.display().to_string(),
        emit_plot,
        target: raw.target.clone(),
        kernel: KernelEcho {
            kind: kernel_choice,
            bandwidth_heuristic: bandwidth,
        },
        flow: FlowEcho {
            step_size: flow.step_size,
            num_steps: flow.num_steps,
            num_particles: flow.num_particles,
            record_every: flow.record_every,
            integrator: integrator_name,
        },
        init: InitEcho {
            mu: init.mu().iter().copied().collect(),
            a: (0..dim)
                .map(|i| (0..dim).map(|j| init.a_matrix()[(i, j)]).collect())
                .collect(),
        },
    };

    Ok(ExperimentConfig {
        mode,
        seed,
        output,
        emit_plot,
        target,
        kernel_choice,
        bandwidth,
        flow,
        init,
        echo,
    })
}
