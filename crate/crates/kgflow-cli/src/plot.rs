//! SVG overlay plots: recorded sample sets over target-density contours.
//!
//! One panel per recorded time. Parametric-flow samples are drawn as filled
//! circles, particles as crosses. For one-dimensional targets the contour
//! plot degenerates to a density curve with rug marks.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DVector;

use kgflow::targets::TargetDensity;
use kgflow::FlowError;

use crate::emit::write_file;
use crate::CliError;

const CELL_W: f64 = 250.0;
const CELL_H: f64 = 250.0;
const PLOT: f64 = 210.0;
const PAD: f64 = 20.0;
const HEADER: f64 = 34.0;
const GRID_NODES: usize = 81;
const CURVE_NODES: usize = 256;
const MAX_POINTS_PER_SERIES: usize = 400;
const LEVELS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

/// Point sets to draw in one panel.
#[derive(Debug, Clone, Default)]
pub struct PlotPanel {
    pub title: String,
    pub param_samples: Vec<DVector<f64>>,
    pub particles: Vec<DVector<f64>>,
}

pub fn emit_plot(
    target: &TargetDensity,
    panels: &[PlotPanel],
    path: &Path,
) -> Result<(), CliError> {
    let svg = render_plot(target, panels)?;
    write_file(path, &svg)
}

/// Render the full SVG document.
pub fn render_plot(target: &TargetDensity, panels: &[PlotPanel]) -> Result<String, CliError> {
    let dim = target.dim();
    if dim == 0 || dim > 2 {
        return Err(CliError::from_setup(FlowError::UnsupportedDimension {
            dim,
            what: "plotting".into(),
        }));
    }
    let contours_only = [PlotPanel {
        title: "target density".into(),
        ..PlotPanel::default()
    }];
    let panels: &[PlotPanel] = if panels.is_empty() {
        &contours_only
    } else {
        panels
    };

    let bounds = world_bounds(target, panels);
    let cols = panels.len().clamp(1, 4);
    let rows = panels.len().div_ceil(cols);
    let width = cols as f64 * CELL_W + 2.0 * PAD;
    let height = rows as f64 * CELL_H + HEADER + PAD;

    let mut svg = String::new();
    svg.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" \
         viewBox=\"0 0 {width:.0} {height:.0}\" font-family=\"sans-serif\">"
    )
    .unwrap();
    writeln!(
        svg,
        "<text x=\"{PAD}\" y=\"22\" font-size=\"13\">circles = parametric flow samples, \
         crosses = particles</text>"
    )
    .unwrap();

    svg.push_str("<defs>\n");
    svg.push_str(
        "<g id=\"mk-param\"><circle r=\"2\" fill=\"steelblue\" fill-opacity=\"0.65\"/></g>\n",
    );
    svg.push_str(
        "<g id=\"mk-part\"><path d=\"M-2.2 -2.2 L2.2 2.2 M-2.2 2.2 L2.2 -2.2\" \
         stroke=\"crimson\" stroke-width=\"1.1\" fill=\"none\"/></g>\n",
    );
    writeln!(svg, "<g id=\"contours\">{}</g>", contour_group(target, &bounds)).unwrap();
    svg.push_str("</defs>\n");

    for (idx, panel) in panels.iter().enumerate() {
        let ox = PAD + (idx % cols) as f64 * CELL_W;
        let oy = HEADER + (idx / cols) as f64 * CELL_H;
        writeln!(svg, "<g class=\"panel\" transform=\"translate({ox:.1},{oy:.1})\">").unwrap();
        writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"14\" font-size=\"11\" text-anchor=\"middle\">{}</text>",
            CELL_W / 2.0,
            escape_xml(&panel.title)
        )
        .unwrap();
        writeln!(
            svg,
            "<rect x=\"{PAD}\" y=\"{PAD}\" width=\"{PLOT}\" height=\"{PLOT}\" \
             fill=\"white\" stroke=\"#444\" stroke-width=\"1\"/>"
        )
        .unwrap();
        svg.push_str("<use href=\"#contours\"/>\n");
        draw_series(&mut svg, &panel.param_samples, &bounds, "mk-param");
        draw_series(&mut svg, &panel.particles, &bounds, "mk-part");
        svg.push_str("</g>\n");
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Axis-aligned world box shared by every panel.
#[derive(Debug, Clone)]
struct Bounds {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Bounds {
    /// Map a world point to pixel coordinates inside the panel plot box.
    /// For one-dimensional data the second world coordinate is a density
    /// value in `[0, hi[1]]`.
    fn to_px(&self, wx: f64, wy: f64) -> (f64, f64) {
        let tx = (wx - self.lo[0]) / (self.hi[0] - self.lo[0]);
        let ty = (wy - self.lo[1]) / (self.hi[1] - self.lo[1]);
        (PAD + tx * PLOT, PAD + (1.0 - ty) * PLOT)
    }
}

fn world_bounds(target: &TargetDensity, panels: &[PlotPanel]) -> Bounds {
    let dim = target.dim();
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    if let Some((mean, cov)) = target.moments() {
        for j in 0..dim {
            let sd = cov[(j, j)].max(0.0).sqrt();
            lo[j] = lo[j].min(mean[j] - 3.5 * sd);
            hi[j] = hi[j].max(mean[j] + 3.5 * sd);
        }
    }
    for panel in panels {
        for x in panel.param_samples.iter().chain(panel.particles.iter()) {
            for j in 0..dim {
                lo[j] = lo[j].min(x[j]);
                hi[j] = hi[j].max(x[j]);
            }
        }
    }
    for j in 0..dim {
        if !(lo[j].is_finite() && hi[j].is_finite()) {
            lo[j] = -3.0;
            hi[j] = 3.0;
        }
        if hi[j] - lo[j] < 1e-9 {
            lo[j] -= 1.0;
            hi[j] += 1.0;
        }
        let pad = 0.05 * (hi[j] - lo[j]);
        lo[j] -= pad;
        hi[j] += pad;
    }
    if dim == 1 {
        // Second axis holds the density curve; its scale is fixed after the
        // density maximum is known.
        let max = max_density_1d(target, lo[0], hi[0]);
        lo.push(0.0);
        hi.push(1.1 * max);
    }
    Bounds { lo, hi }
}

fn density(target: &TargetDensity, x: &DVector<f64>) -> f64 {
    let log_p = match target.log_density_normalized(x) {
        Ok(v) => v,
        Err(_) => target.log_density_unnormalized(x),
    };
    let p = log_p.exp();
    if p.is_finite() {
        p
    } else {
        0.0
    }
}

fn max_density_1d(target: &TargetDensity, lo: f64, hi: f64) -> f64 {
    let mut max = f64::MIN_POSITIVE;
    for i in 0..CURVE_NODES {
        let x = lo + (hi - lo) * i as f64 / (CURVE_NODES - 1) as f64;
        max = max.max(density(target, &DVector::from_element(1, x)));
    }
    max
}

fn contour_group(target: &TargetDensity, bounds: &Bounds) -> String {
    match target.dim() {
        1 => density_curve_1d(target, bounds),
        2 => contour_paths_2d(target, bounds),
        _ => unreachable!("dimension checked by render_plot"),
    }
}

fn density_curve_1d(target: &TargetDensity, bounds: &Bounds) -> String {
    let mut points = String::new();
    for i in 0..CURVE_NODES {
        let x = bounds.lo[0]
            + (bounds.hi[0] - bounds.lo[0]) * i as f64 / (CURVE_NODES - 1) as f64;
        let p = density(target, &DVector::from_element(1, x));
        let (px, py) = bounds.to_px(x, p);
        if i > 0 {
            points.push(' ');
        }
        write!(points, "{px:.2},{py:.2}").unwrap();
    }
    format!(
        "<polyline points=\"{points}\" fill=\"none\" stroke=\"#777\" stroke-width=\"1\"/>"
    )
}

fn contour_paths_2d(target: &TargetDensity, bounds: &Bounds) -> String {
    let n = GRID_NODES;
    let xs: Vec<f64> = (0..n)
        .map(|i| bounds.lo[0] + (bounds.hi[0] - bounds.lo[0]) * i as f64 / (n - 1) as f64)
        .collect();
    let ys: Vec<f64> = (0..n)
        .map(|j| bounds.lo[1] + (bounds.hi[1] - bounds.lo[1]) * j as f64 / (n - 1) as f64)
        .collect();
    let mut values = vec![vec![0.0f64; n]; n];
    let mut max = f64::MIN_POSITIVE;
    for (i, &x) in xs.iter().enumerate() {
        for (j, &y) in ys.iter().enumerate() {
            let p = density(target, &DVector::from_column_slice(&[x, y]));
            values[i][j] = p;
            max = max.max(p);
        }
    }
    let mut out = String::new();
    for level_frac in LEVELS {
        let level = level_frac * max;
        let segments = marching_squares(&values, &xs, &ys, level);
        if segments.is_empty() {
            continue;
        }
        let mut d = String::new();
        for [(x1, y1), (x2, y2)] in segments {
            let (px1, py1) = bounds.to_px(x1, y1);
            let (px2, py2) = bounds.to_px(x2, y2);
            write!(d, "M{px1:.2} {py1:.2}L{px2:.2} {py2:.2}").unwrap();
        }
        write!(
            out,
            "<path d=\"{d}\" fill=\"none\" stroke=\"#777\" stroke-width=\"0.8\"/>"
        )
        .unwrap();
    }
    out
}

/// Line segments of the level set `values = level` on the node grid,
/// in world coordinates. Saddle cells get an arbitrary but fixed pairing.
fn marching_squares(
    values: &[Vec<f64>],
    xs: &[f64],
    ys: &[f64],
    level: f64,
) -> Vec<[(f64, f64); 2]> {
    #[derive(Clone, Copy)]
    enum Edge {
        Bottom,
        Right,
        Top,
        Left,
    }
    let mut segments = Vec::new();
    for i in 0..xs.len() - 1 {
        for j in 0..ys.len() - 1 {
            let v00 = values[i][j];
            let v10 = values[i + 1][j];
            let v11 = values[i + 1][j + 1];
            let v01 = values[i][j + 1];
            let mut idx = 0usize;
            if v00 > level {
                idx |= 1;
            }
            if v10 > level {
                idx |= 2;
            }
            if v11 > level {
                idx |= 4;
            }
            if v01 > level {
                idx |= 8;
            }
            if idx >= 8 {
                idx = 15 - idx;
            }
            let cross = |edge: Edge| -> (f64, f64) {
                let (va, vb, pa, pb) = match edge {
                    Edge::Bottom => (v00, v10, (xs[i], ys[j]), (xs[i + 1], ys[j])),
                    Edge::Right => (v10, v11, (xs[i + 1], ys[j]), (xs[i + 1], ys[j + 1])),
                    Edge::Top => (v01, v11, (xs[i], ys[j + 1]), (xs[i + 1], ys[j + 1])),
                    Edge::Left => (v00, v01, (xs[i], ys[j]), (xs[i], ys[j + 1])),
                };
                let t = ((level - va) / (vb - va)).clamp(0.0, 1.0);
                (pa.0 + t * (pb.0 - pa.0), pa.1 + t * (pb.1 - pa.1))
            };
            let pairs: &[[Edge; 2]] = match idx {
                0 => &[],
                1 => &[[Edge::Left, Edge::Bottom]],
                2 => &[[Edge::Bottom, Edge::Right]],
                3 => &[[Edge::Left, Edge::Right]],
                4 => &[[Edge::Right, Edge::Top]],
                5 => &[[Edge::Left, Edge::Bottom], [Edge::Right, Edge::Top]],
                6 => &[[Edge::Bottom, Edge::Top]],
                7 => &[[Edge::Left, Edge::Top]],
                _ => unreachable!("index folded into 0..=7"),
            };
            for [a, b] in pairs {
                segments.push([cross(*a), cross(*b)]);
            }
        }
    }
    segments
}

fn draw_series(svg: &mut String, points: &[DVector<f64>], bounds: &Bounds, marker: &str) {
    if points.is_empty() {
        return;
    }
    let stride = points.len().div_ceil(MAX_POINTS_PER_SERIES).max(1);
    // Rug offsets used when the data is one-dimensional: park the markers in
    // two thin strips just above the bottom axis.
    let rug = if marker == "mk-param" { 0.03 } else { 0.06 };
    for x in points.iter().step_by(stride) {
        let (px, py) = if x.len() == 1 {
            bounds.to_px(x[0], rug * bounds.hi[1])
        } else {
            bounds.to_px(x[0], x[1])
        };
        if !(px.is_finite() && py.is_finite()) {
            continue;
        }
        writeln!(svg, "<use href=\"#{marker}\" x=\"{px:.2}\" y=\"{py:.2}\"/>").unwrap();
    }
}

fn escape_xml(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use kgflow::targets::{make_gaussian, make_mixture, GaussianMixtureSpec};
    use nalgebra::DMatrix;

    fn gaussian_2d() -> TargetDensity {
        make_gaussian(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap()
    }

    /// Check tag nesting and bracket balance without an XML dependency.
    pub(crate) fn assert_well_formed_xml(text: &str) {
        let mut stack: Vec<String> = Vec::new();
        let mut rest = text;
        while let Some(open) = rest.find('<') {
            let tail = &rest[open + 1..];
            let close = tail.find('>').expect("unclosed angle bracket");
            let tag = &tail[..close];
            rest = &tail[close + 1..];
            if tag.starts_with('?') || tag.starts_with('!') {
                continue;
            }
            if let Some(name) = tag.strip_prefix('/') {
                let top = stack.pop().unwrap_or_else(|| {
                    panic!("closing </{name}> with empty stack")
                });
                assert_eq!(top, name.trim(), "mismatched closing tag");
            } else if !tag.ends_with('/') {
                let name: String = tag
                    .chars()
                    .take_while(|c| !c.is_whitespace())
                    .collect();
                stack.push(name);
            }
            assert!(
                !tag.contains('<'),
                "nested angle bracket inside a tag: {tag}"
            );
        }
        assert!(stack.is_empty(), "unclosed tags: {stack:?}");
        assert!(!rest.contains('>'), "stray closing bracket");
    }

    #[test]
    fn empty_trajectory_gives_single_contour_panel() {
        let svg = render_plot(&gaussian_2d(), &[]).unwrap();
        assert_eq!(svg.matches("class=\"panel\"").count(), 1);
        assert!(svg.contains("#contours"));
        assert!(!svg.contains("mk-param\" x"));
        assert_well_formed_xml(&svg);
    }

    #[test]
    fn panel_count_matches_input() {
        let panels: Vec<PlotPanel> = (0..5)
            .map(|k| PlotPanel {
                title: format!("step {k}"),
                param_samples: vec![DVector::from_column_slice(&[0.1 * k as f64, 0.0])],
                particles: vec![DVector::from_column_slice(&[-0.1 * k as f64, 0.2])],
            })
            .collect();
        let svg = render_plot(&gaussian_2d(), &panels).unwrap();
        assert_eq!(svg.matches("class=\"panel\"").count(), 5);
        assert_well_formed_xml(&svg);
    }

    #[test]
    fn one_dimensional_targets_get_a_density_curve() {
        let target = make_gaussian(DVector::zeros(1), DMatrix::identity(1, 1)).unwrap();
        let panels = vec![PlotPanel {
            title: "initial".into(),
            param_samples: vec![DVector::from_element(1, 0.4)],
            particles: vec![DVector::from_element(1, -0.4)],
        }];
        let svg = render_plot(&target, &panels).unwrap();
        assert!(svg.contains("<polyline"));
        assert_well_formed_xml(&svg);
    }

    #[test]
    fn bimodal_contours_appear_for_both_modes() {
        let spec = GaussianMixtureSpec {
            weights: vec![0.5, 0.5],
            means: vec![
                DVector::from_column_slice(&[-2.0, 0.0]),
                DVector::from_column_slice(&[2.0, 0.0]),
            ],
            covariances: vec![DMatrix::identity(2, 2), DMatrix::identity(2, 2)],
        };
        let target = make_mixture(&spec).unwrap();
        let svg = render_plot(&target, &[]).unwrap();
        assert!(svg.matches("<path").count() >= LEVELS.len());
        assert_well_formed_xml(&svg);
    }

    #[test]
    fn high_dimension_is_rejected() {
        let target = make_gaussian(DVector::zeros(3), DMatrix::identity(3, 3)).unwrap();
        let err = render_plot(&target, &[]).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn titles_are_escaped() {
        let panels = vec![PlotPanel {
            title: "a < b & c".into(),
            ..PlotPanel::default()
        }];
        let svg = render_plot(&gaussian_2d(), &panels).unwrap();
        assert!(svg.contains("a &lt; b &amp; c"));
        assert_well_formed_xml(&svg);
    }
}
