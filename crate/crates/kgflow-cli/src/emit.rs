//! CSV and JSON emission. Floats are serialized with `Display`, which
//! produces the shortest decimal that parses back to the same bits.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use kgflow::metrics::{FlowState, FlowTrajectory};

use crate::config::ConfigEcho;
use crate::CliError;

pub fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|source| CliError::Io {
                action: "create directory",
                path: parent.to_path_buf(),
                source,
            })?;
        }
    }
    fs::write(path, contents).map_err(|source| CliError::Io {
        action: "write",
        path: path.to_path_buf(),
        source,
    })
}

/// Render a trajectory as CSV. Ensembles get one row per particle per
/// recorded step under the header `step,time,particle_id,dim_0,...`;
/// parameter states get one row per recorded step under
/// `step,time,mu_0,...,a_00,...` with the factor in row-major order.
pub fn trajectory_csv(trajectory: &FlowTrajectory) -> Result<String, CliError> {
    let steps = trajectory.recorded_steps();
    let first = steps
        .first()
        .ok_or_else(|| CliError::Config("trajectory has no recorded steps".into()))?;
    match &first.state {
        FlowState::Particles(_) => particle_csv(trajectory),
        FlowState::Params(_) => param_csv(trajectory),
    }
}

pub fn emit_trajectory(trajectory: &FlowTrajectory, path: &Path) -> Result<(), CliError> {
    write_file(path, &trajectory_csv(trajectory)?)
}

fn particle_csv(trajectory: &FlowTrajectory) -> Result<String, CliError> {
    let steps = trajectory.recorded_steps();
    let dim = match &steps[0].state {
        FlowState::Particles(e) => e.dim(),
        FlowState::Params(_) => unreachable!("dispatched on first state"),
    };
    let mut out = String::from("step,time,particle_id");
    for j in 0..dim {
        write!(out, ",dim_{j}").unwrap();
    }
    out.push('\n');
    for record in steps {
        let ensemble = match &record.state {
            FlowState::Particles(e) => e,
            FlowState::Params(_) => {
                return Err(CliError::Config(
                    "trajectory mixes particle and parameter states".into(),
                ))
            }
        };
        for (id, x) in ensemble.positions().iter().enumerate() {
            write!(out, "{},{},{id}", record.step, record.time).unwrap();
            for v in x.iter() {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
    }
    Ok(out)
}

fn param_csv(trajectory: &FlowTrajectory) -> Result<String, CliError> {
    let steps = trajectory.recorded_steps();
    let dim = match &steps[0].state {
        FlowState::Params(p) => p.dim(),
        FlowState::Particles(_) => unreachable!("dispatched on first state"),
    };
    let mut out = String::from("step,time");
    for j in 0..dim {
        write!(out, ",mu_{j}").unwrap();
    }
    for i in 0..dim {
        for j in 0..dim {
            write!(out, ",a_{i}{j}").unwrap();
        }
    }
    out.push('\n');
    for record in steps {
        let params = match &record.state {
            FlowState::Params(p) => p,
            FlowState::Particles(_) => {
                return Err(CliError::Config(
                    "trajectory mixes particle and parameter states".into(),
                ))
            }
        };
        write!(out, "{},{}", record.step, record.time).unwrap();
        for v in params.mu().iter() {
            write!(out, ",{v}").unwrap();
        }
        let a = params.a_matrix();
        for i in 0..dim {
            for j in 0..dim {
                write!(out, ",{}", a[(i, j)]).unwrap();
            }
        }
        out.push('\n');
    }
    Ok(out)
}

/// A row read back from a trajectory CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedRow {
    pub step: usize,
    pub time: f64,
    /// Present only in ensemble files.
    pub particle_id: Option<usize>,
    /// All remaining numeric columns in file order.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedTrajectory {
    pub header: Vec<String>,
    pub rows: Vec<ParsedRow>,
}

/// Parse a file produced by [`trajectory_csv`].
pub fn parse_trajectory_csv(text: &str) -> Result<ParsedTrajectory, CliError> {
    let mut lines = text.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| CliError::Config("trajectory file is empty".into()))?;
    let header: Vec<String> = header_line.split(',').map(str::to_owned).collect();
    if header.len() < 3 || header[0] != "step" || header[1] != "time" {
        return Err(CliError::Config(format!(
            "unrecognized trajectory header: {header_line}"
        )));
    }
    let has_particle_id = header[2] == "particle_id";
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != header.len() {
            return Err(CliError::Config(format!(
                "line {}: expected {} fields, got {}",
                lineno + 2,
                header.len(),
                fields.len()
            )));
        }
        let parse_usize = |s: &str, what: &str| {
            s.parse::<usize>().map_err(|_| {
                CliError::Config(format!("line {}: bad {what} value {s:?}", lineno + 2))
            })
        };
        let parse_f64 = |s: &str| {
            s.parse::<f64>().map_err(|_| {
                CliError::Config(format!("line {}: bad float {s:?}", lineno + 2))
            })
        };
        let step = parse_usize(fields[0], "step")?;
        let time = parse_f64(fields[1])?;
        let (particle_id, rest) = if has_particle_id {
            (Some(parse_usize(fields[2], "particle_id")?), &fields[3..])
        } else {
            (None, &fields[2..])
        };
        let values = rest.iter().copied().map(parse_f64).collect::<Result<_, _>>()?;
        rows.push(ParsedRow {
            step,
            time,
            particle_id,
            values,
        });
    }
    Ok(ParsedTrajectory { header, rows })
}

#[derive(Debug, Clone, Serialize)]
pub struct MomentsEcho {
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareRecord {
    pub energy_distance: f64,
    pub baseline_energy_distance: f64,
    pub bbvi_moments: MomentsEcho,
    pub svgd_moments: MomentsEcho,
}

#[derive(Debug, Clone, Serialize)]
pub struct RecordSummary {
    pub step: usize,
    pub time: f64,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub diagnostics: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub compare: Option<CompareRecord>,
}

/// The per-run summary document.
#[derive(Debug, Serialize)]
pub struct Summary {
    pub library_version: String,
    pub config: ConfigEcho,
    pub wall_clock_seconds: f64,
    pub records: Vec<RecordSummary>,
    pub outputs: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn emit_summary(summary: &Summary, path: &Path) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(summary)
        .map_err(|e| CliError::Config(format!("summary serialization failed: {e}")))?;
    text.push('\n');
    write_file(path, &text)
}
