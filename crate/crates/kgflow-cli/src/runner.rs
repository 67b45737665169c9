//! Experiment orchestration: builds library objects from a validated config,
//! runs the requested flow, and writes every output file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;

use kgflow::bbvi::{run_bbvi, BaseSampleBatch, BatchMode, GaussianVariationalParams};
use kgflow::flows::run_gan_flow;
use kgflow::kernels;
use kgflow::metrics::{self, FlowState, FlowTrajectory};
use kgflow::rng::derive_seed;
use kgflow::svgd::{run_svgd, ContextPolicy, ParticleEnsemble, VelocityForm};

use crate::config::{parse_config, ExperimentConfig, KernelChoice, Mode, Overrides};
use crate::emit::{self, CompareRecord, MomentsEcho, RecordSummary, Summary};
use crate::plot::{self, PlotPanel};
use crate::CliError;

// Seed streams reserved for the harness. Flow runners derive their per-step
// batch seeds from streams 0..=num_steps, so these start far above any
// realistic step count.
const INIT_STREAM: u64 = 1 << 32;
const CRN_STREAM: u64 = (1 << 32) + 1;
const BASELINE_STREAM: u64 = (1 << 32) + 2;
const PLOT_STREAM: u64 = (1 << 32) + 3;

/// Energy-distance computations are quadratic in the sample count; the
/// harness truncates both sets to this many points.
const ENERGY_DISTANCE_CAP: usize = 2000;

#[derive(Debug)]
pub struct RunOutput {
    pub output_dir: PathBuf,
    pub files: Vec<String>,
}

/// Load a config file, apply overrides, and run the experiment.
pub fn run(config_path: &Path, overrides: &Overrides) -> Result<RunOutput, CliError> {
    let text = std::fs::read_to_string(config_path).map_err(|source| CliError::Io {
        action: "read",
        path: config_path.to_path_buf(),
        source,
    })?;
    let config = parse_config(&text, overrides)?;
    run_experiment(&config)
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutput, CliError> {
    let start = Instant::now();
    match config.mode {
        Mode::Svgd => run_svgd_mode(config, start),
        Mode::Bbvi | Mode::Ganflow => run_param_mode(config, start),
        Mode::Compare => run_compare(config, start),
    }
}

fn run_svgd_mode(config: &ExperimentConfig, start: Instant) -> Result<RunOutput, CliError> {
    let batch = BaseSampleBatch::generate(
        derive_seed(config.seed, INIT_STREAM),
        config.flow.num_particles,
        config.dim(),
    )
    .map_err(CliError::from_setup)?;
    let initial =
        ParticleEnsemble::from_pushforward(&config.init, &batch).map_err(CliError::from_setup)?;
    let kernel = config.build_kernel(initial.positions())?;
    // The context-dependent kernel has no closed-form position gradient, so
    // it runs in the mean-field form; the plain RBF kernel gets the standard
    // two-term update.
    let form = match config.kernel_choice {
        KernelChoice::Rbf => VelocityForm::Standard,
        KernelChoice::GaussianNtk => VelocityForm::MeanFieldGaussianFit,
    };
    let trajectory = match run_svgd(
        &initial,
        &config.target,
        &kernel,
        &config.flow,
        &ContextPolicy::FromParticles,
        form,
    ) {
        Ok(t) => t,
        Err(e) => return abort(config, start, Vec::new(), Vec::new(), e),
    };

    let mut files = Vec::new();
    emit::emit_trajectory(&trajectory, &config.output.join("particles.csv"))?;
    files.push("particles.csv".to_string());
    if config.emit_plot {
        let panels = particle_panels(&trajectory)?;
        plot::emit_plot(&config.target, &panels, &config.output.join("plot.svg"))?;
        files.push("plot.svg".to_string());
    }
    finish(config, start, files, plain_records(&trajectory))
}

fn run_param_mode(config: &ExperimentConfig, start: Instant) -> Result<RunOutput, CliError> {
    let result = match config.mode {
        Mode::Bbvi => run_bbvi(&config.init, &config.target, &config.flow, &BatchMode::Fresh),
        Mode::Ganflow => run_gan_flow(&config.init, &config.target, &config.flow),
        _ => unreachable!("dispatched by run_experiment"),
    };
    let trajectory = match result {
        Ok(t) => t,
        Err(e) => return abort(config, start, Vec::new(), Vec::new(), e),
    };

    let mut files = Vec::new();
    emit::emit_trajectory(&trajectory, &config.output.join("params.csv"))?;
    files.push("params.csv".to_string());
    if config.emit_plot {
        let panels = param_panels(config, &trajectory)?;
        plot::emit_plot(&config.target, &panels, &config.output.join("plot.svg"))?;
        files.push("plot.svg".to_string());
    }
    finish(config, start, files, plain_records(&trajectory))
}

fn run_compare(config: &ExperimentConfig, start: Instant) -> Result<RunOutput, CliError> {
    let n = config.flow.num_particles;
    let d = config.dim();
    // Common random numbers: the same base draws define both the SVGD
    // initialization and the BBVI pushforward samples at every recorded time,
    // so at step 0 the two point sets coincide bit for bit.
    let crn = BaseSampleBatch::generate(derive_seed(config.seed, CRN_STREAM), n, d)
        .map_err(CliError::from_setup)?;

    let bbvi_traj = match run_bbvi(&config.init, &config.target, &config.flow, &BatchMode::Fresh) {
        Ok(t) => t,
        Err(e) => return abort(config, start, Vec::new(), Vec::new(), e),
    };
    let mut files = Vec::new();
    emit::emit_trajectory(&bbvi_traj, &config.output.join("bbvi_params.csv"))?;
    files.push("bbvi_params.csv".to_string());

    let initial =
        ParticleEnsemble::from_pushforward(&config.init, &crn).map_err(CliError::from_setup)?;
    let kernel = kernels::gaussian_ntk_kernel(&config.init).map_err(CliError::from_setup)?;
    let svgd_traj = match run_svgd(
        &initial,
        &config.target,
        &kernel,
        &config.flow,
        &ContextPolicy::FromParticles,
        VelocityForm::MeanFieldGaussianFit,
    ) {
        Ok(t) => t,
        Err(e) => return abort(config, start, files, plain_records(&bbvi_traj), e),
    };
    emit::emit_trajectory(&svgd_traj, &config.output.join("svgd_particles.csv"))?;
    files.push("svgd_particles.csv".to_string());

    let records = compare_records(config, &bbvi_traj, &svgd_traj, &crn)?;
    if config.emit_plot {
        let panels = compare_panels(&bbvi_traj, &svgd_traj, &crn)?;
        plot::emit_plot(&config.target, &panels, &config.output.join("overlay.svg"))?;
        files.push("overlay.svg".to_string());
    }
    finish(config, start, files, records)
}

fn params_at(record: &metrics::RecordedStep) -> Result<&GaussianVariationalParams, CliError> {
    match &record.state {
        FlowState::Params(p) => Ok(p),
        FlowState::Particles(_) => Err(CliError::Config(
            "expected a parameter state in the trajectory".into(),
        )),
    }
}

fn particles_at(record: &metrics::RecordedStep) -> Result<&ParticleEnsemble, CliError> {
    match &record.state {
        FlowState::Particles(e) => Ok(e),
        FlowState::Params(_) => Err(CliError::Config(
            "expected a particle state in the trajectory".into(),
        )),
    }
}

fn pushforward_all(params: &GaussianVariationalParams, batch: &BaseSampleBatch) -> Vec<DVector<f64>> {
    batch.draws().iter().map(|e| params.pushforward(e)).collect()
}

fn moments_echo(points: &[DVector<f64>]) -> Result<MomentsEcho, CliError> {
    let (mean, cov) = metrics::moment_summary(points).map_err(CliError::from_setup)?;
    let d = mean.len();
    Ok(MomentsEcho {
        mean: mean.iter().copied().collect(),
        covariance: (0..d)
            .map(|i| (0..d).map(|j| cov[(i, j)]).collect())
            .collect(),
    })
}

fn compare_records(
    config: &ExperimentConfig,
    bbvi_traj: &FlowTrajectory,
    svgd_traj: &FlowTrajectory,
    crn: &BaseSampleBatch,
) -> Result<Vec<RecordSummary>, CliError> {
    let bbvi_steps = bbvi_traj.recorded_steps();
    let svgd_steps = svgd_traj.recorded_steps();
    if bbvi_steps.len() != svgd_steps.len() {
        return Err(CliError::Config(format!(
            "record mismatch: {} parameter records vs {} particle records",
            bbvi_steps.len(),
            svgd_steps.len()
        )));
    }
    let d = config.dim();
    let cap = crn.len().min(ENERGY_DISTANCE_CAP);
    let baseline_root = derive_seed(config.seed, BASELINE_STREAM);
    let mut records = Vec::with_capacity(bbvi_steps.len());
    for (k, (b, s)) in bbvi_steps.iter().zip(svgd_steps).enumerate() {
        if b.step != s.step {
            return Err(CliError::Config(format!(
                "record mismatch at index {k}: step {} vs {}",
                b.step, s.step
            )));
        }
        let params = params_at(b)?;
        let ensemble = particles_at(s)?;
        let bbvi_samples = pushforward_all(params, crn);
        let svgd_positions = ensemble.positions();
        let energy_distance = metrics::energy_distance(
            &bbvi_samples[..cap.min(bbvi_samples.len())],
            &svgd_positions[..cap.min(svgd_positions.len())],
        )
        .map_err(CliError::from_setup)?;

        // Sampling-noise baseline: energy distance between two fresh sample
        // sets drawn from the same parametric state.
        let fresh = |stream: u64| -> Result<Vec<DVector<f64>>, CliError> {
            let batch = BaseSampleBatch::generate(derive_seed(baseline_root, stream), cap, d)
                .map_err(CliError::from_setup)?;
            Ok(pushforward_all(params, &batch))
        };
        let set_a = fresh(2 * k as u64)?;
        let set_b = fresh(2 * k as u64 + 1)?;
        let baseline_energy_distance =
            metrics::energy_distance(&set_a, &set_b).map_err(CliError::from_setup)?;

        let mut diagnostics = BTreeMap::new();
        for (key, v) in &b.diagnostics {
            diagnostics.insert(format!("bbvi_{key}"), *v);
        }
        for (key, v) in &s.diagnostics {
            diagnostics.insert(format!("svgd_{key}"), *v);
        }
        records.push(RecordSummary {
            step: b.step,
            time: b.time,
            diagnostics,
            compare: Some(CompareRecord {
                energy_distance,
                baseline_energy_distance,
                bbvi_moments: moments_echo(&bbvi_samples)?,
                svgd_moments: moments_echo(svgd_positions)?,
            }),
        });
    }
    Ok(records)
}

fn panel_title(step: usize, time: f64) -> String {
    format!("step {step} (t = {time:.3})")
}

fn particle_panels(trajectory: &FlowTrajectory) -> Result<Vec<PlotPanel>, CliError> {
    trajectory
        .recorded_steps()
        .iter()
        .map(|record| {
            let ensemble = particles_at(record)?;
            Ok(PlotPanel {
                title: panel_title(record.step, record.time),
                param_samples: Vec::new(),
                particles: ensemble.positions().to_vec(),
            })
        })
        .collect()
}

fn param_panels(
    config: &ExperimentConfig,
    trajectory: &FlowTrajectory,
) -> Result<Vec<PlotPanel>, CliError> {
    let n = config.flow.num_particles.clamp(2, 400);
    let batch = BaseSampleBatch::generate(derive_seed(config.seed, PLOT_STREAM), n, config.dim())
        .map_err(CliError::from_setup)?;
    trajectory
        .recorded_steps()
        .iter()
        .map(|record| {
            let params = params_at(record)?;
            Ok(PlotPanel {
                title: panel_title(record.step, record.time),
                param_samples: pushforward_all(params, &batch),
                particles: Vec::new(),
            })
        })
        .collect()
}

fn compare_panels(
    bbvi_traj: &FlowTrajectory,
    svgd_traj: &FlowTrajectory,
    crn: &BaseSampleBatch,
) -> Result<Vec<PlotPanel>, CliError> {
    bbvi_traj
        .recorded_steps()
        .iter()
        .zip(svgd_traj.recorded_steps())
        .map(|(b, s)| {
            let params = params_at(b)?;
            let ensemble = particles_at(s)?;
            Ok(PlotPanel {
                title: panel_title(b.step, b.time),
                param_samples: pushforward_all(params, crn),
                particles: ensemble.positions().to_vec(),
            })
        })
        .collect()
}

fn plain_records(trajectory: &FlowTrajectory) -> Vec<RecordSummary> {
    trajectory
        .recorded_steps()
        .iter()
        .map(|record| RecordSummary {
            step: record.step,
            time: record.time,
            diagnostics: record.diagnostics.clone(),
            compare: None,
        })
        .collect()
}

fn finish(
    config: &ExperimentConfig,
    start: Instant,
    mut files: Vec<String>,
    records: Vec<RecordSummary>,
) -> Result<RunOutput, CliError> {
    files.push("summary.json".to_string());
    let summary = Summary {
        library_version: kgflow::version().to_string(),
        config: config.echo.clone(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        records,
        outputs: files.clone(),
        error: None,
    };
    emit::emit_summary(&summary, &config.output.join("summary.json"))?;
    Ok(RunOutput {
        output_dir: config.output.clone(),
        files,
    })
}

/// Flush a summary documenting the failure, then surface the error.
fn abort(
    config: &ExperimentConfig,
    start: Instant,
    mut files: Vec<String>,
    records: Vec<RecordSummary>,
    err: kgflow::FlowError,
) -> Result<RunOutput, CliError> {
    let cli = CliError::from_flow(err);
    files.push("summary.json".to_string());
    let summary = Summary {
        library_version: kgflow::version().to_string(),
        config: config.echo.clone(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        records,
        outputs: files,
        error: Some(cli.to_string()),
    };
    // Best effort: the flow error is the one worth reporting.
    let _ = emit::emit_summary(&summary, &config.output.join("summary.json"));
    Err(cli)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn compare_config(num_steps: usize, out: &Path) -> ExperimentConfig {
        let text = format!(
            r#"
mode = "compare"
seed = 3
output = "{}"

[target]
family = "gaussian"
mean = [0.5, -0.25]
covariance = [[1.0, 0.2], [0.2, 0.5]]

[flow]
num_steps = {num_steps}
num_particles = 60
record_every = 10
"#,
            out.display()
        );
        parse_config(&text, &Overrides::default()).unwrap()
    }

    #[test]
    fn compare_with_zero_steps_has_exactly_zero_energy_distance() {
        let dir = tempfile::tempdir().unwrap();
        let config = compare_config(0, dir.path());
        let out = run_experiment(&config).unwrap();
        assert!(out.files.contains(&"bbvi_params.csv".to_string()));
        let text = std::fs::read_to_string(dir.path().join("summary.json")).unwrap();
        let summary: serde_json::Value = serde_json::from_str(&text).unwrap();
        let records = summary["records"].as_array().unwrap();
        assert_eq!(records.len(), 1);
        let ed = records[0]["compare"]["energy_distance"].as_f64().unwrap();
        assert_eq!(ed, 0.0, "identical initial point sets must have ED exactly 0");
    }

    #[test]
    fn compare_trajectories_share_recorded_steps() {
        let dir = tempfile::tempdir().unwrap();
        let config = compare_config(30, dir.path());
        run_experiment(&config).unwrap();
        let bbvi =
            emit::parse_trajectory_csv(&std::fs::read_to_string(dir.path().join("bbvi_params.csv")).unwrap())
                .unwrap();
        let svgd = emit::parse_trajectory_csv(
            &std::fs::read_to_string(dir.path().join("svgd_particles.csv")).unwrap(),
        )
        .unwrap();
        let bbvi_steps: Vec<usize> = bbvi.rows.iter().map(|r| r.step).collect();
        let mut svgd_steps: Vec<usize> = svgd.rows.iter().map(|r| r.step).collect();
        svgd_steps.dedup();
        assert_eq!(bbvi_steps, vec![0, 10, 20, 30]);
        assert_eq!(svgd_steps, bbvi_steps);
    }

    #[test]
    fn gaussian_compare_endpoints_match_posterior_moments() {
        let dir = tempfile::tempdir().unwrap();
        let text = format!(
            r#"
mode = "compare"
seed = 1
output = "{}"

[target]
family = "gaussian"
mean = [1.0, -0.5]
covariance = [[0.8, 0.1], [0.1, 0.6]]

[flow]
step_size = 0.05
num_steps = 400
num_particles = 400
record_every = 100
"#,
            dir.path().display()
        );
        let config = parse_config(&text, &Overrides::default()).unwrap();
        run_experiment(&config).unwrap();
        let summary: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("summary.json")).unwrap(),
        )
        .unwrap();
        let last = summary["records"].as_array().unwrap().last().unwrap().clone();
        let want_mean = [1.0, -0.5];
        let want_cov = [[0.8, 0.1], [0.1, 0.6]];
        for side in ["bbvi_moments", "svgd_moments"] {
            let mean = last["compare"][side]["mean"].as_array().unwrap();
            for (m, w) in mean.iter().zip(want_mean) {
                assert!(
                    (m.as_f64().unwrap() - w).abs() < 0.05,
                    "{side} mean off: {m} vs {w}"
                );
            }
            let cov = last["compare"][side]["covariance"].as_array().unwrap();
            for (i, row) in cov.iter().enumerate() {
                for (j, c) in row.as_array().unwrap().iter().enumerate() {
                    assert!(
                        (c.as_f64().unwrap() - want_cov[i][j]).abs() < 0.1,
                        "{side} cov ({i},{j}) off: {c} vs {}",
                        want_cov[i][j]
                    );
                }
            }
        }
    }

    #[test]
    fn svgd_mode_writes_particles_and_summary() {
        let dir = tempfile::tempdir().unwrap();
        let text = format!(
            r#"
mode = "svgd"
seed = 2
output = "{}"
emit_plot = true

[target]
family = "gaussian"
mean = [0.0]
covariance = [[1.0]]

[kernel]
kind = "rbf"
bandwidth_heuristic = "median"

[flow]
num_steps = 50
num_particles = 40
record_every = 25
"#,
            dir.path().display()
        );
        let config = parse_config(&text, &Overrides::default()).unwrap();
        let out = run_experiment(&config).unwrap();
        assert_eq!(
            out.files,
            vec!["particles.csv", "plot.svg", "summary.json"]
        );
        let csv = std::fs::read_to_string(dir.path().join("particles.csv")).unwrap();
        assert!(csv.starts_with("step,time,particle_id,dim_0\n"));
        let parsed = emit::parse_trajectory_csv(&csv).unwrap();
        assert_eq!(parsed.rows.len(), 3 * 40);
    }

    #[test]
    fn bbvi_mode_reports_elbo_diagnostics() {
        let dir = tempfile::tempdir().unwrap();
        let text = format!(
            r#"
mode = "bbvi"
seed = 4
output = "{}"

[target]
family = "gaussian-posterior"
prior_mean = [0.0]
prior_covariance = [[1.0]]
observations = [[1.0]]
noise_covariance = [[1.0]]

[flow]
num_steps = 20
num_particles = 50
record_every = 10
"#,
            dir.path().display()
        );
        let config = parse_config(&text, &Overrides::default()).unwrap();
        run_experiment(&config).unwrap();
        let summary: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("summary.json")).unwrap(),
        )
        .unwrap();
        let records = summary["records"].as_array().unwrap();
        assert_eq!(records.len(), 3);
        for r in records {
            assert!(r["diagnostics"]["elbo"].is_f64());
            assert!(r["diagnostics"]["grad_norm"].is_f64());
        }
        assert_eq!(summary["library_version"], kgflow::version());
    }

    #[test]
    fn ganflow_mode_runs_and_reports_js() {
        let dir = tempfile::tempdir().unwrap();
        let text = format!(
            r#"
mode = "ganflow"
seed = 5
output = "{}"

[target]
family = "gaussian"
mean = [0.4]
covariance = [[1.0]]

[flow]
num_steps = 40
num_particles = 60
record_every = 20
"#,
            dir.path().display()
        );
        let config = parse_config(&text, &Overrides::default()).unwrap();
        run_experiment(&config).unwrap();
        let summary: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("summary.json")).unwrap(),
        )
        .unwrap();
        let records = summary["records"].as_array().unwrap();
        let first = records[0]["diagnostics"]["js_divergence"].as_f64().unwrap();
        let last = records.last().unwrap()["diagnostics"]["js_divergence"]
            .as_f64()
            .unwrap();
        assert!(first > 0.0);
        assert!(last < first, "divergence should shrink: {last} vs {first}");
    }
}
