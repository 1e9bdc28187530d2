//! SVG return curves: one line per run (mean over seeds) with a min/max
//! band. Output depends only on the input rows.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{HarnessError, HarnessResult};
use crate::metrics::{parse_metrics, CurvePoint};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 160.0;
const TOP: f64 = 20.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

struct Series {
    steps: Vec<u64>,
    mean: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

fn series(points: &[CurvePoint]) -> BTreeMap<String, Series> {
    let mut by_run: BTreeMap<String, BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
    for p in points {
        by_run
            .entry(p.run.clone())
            .or_default()
            .entry(p.learner_step)
            .or_default()
            .push(p.mean_return);
    }
    by_run
        .into_iter()
        .map(|(run, steps)| {
            let mut s = Series {
                steps: Vec::new(),
                mean: Vec::new(),
                lo: Vec::new(),
                hi: Vec::new(),
            };
            for (step, vals) in steps {
                s.steps.push(step);
                s.mean.push(vals.iter().sum::<f64>() / vals.len() as f64);
                s.lo.push(vals.iter().copied().fold(f64::INFINITY, f64::min));
                s.hi.push(vals.iter().copied().fold(f64::NEG_INFINITY, f64::max));
            }
            (run, s)
        })
        .collect()
}

pub fn render_svg(points: &[CurvePoint]) -> HarnessResult<String> {
    if points.is_empty() {
        return Err(HarnessError::Metrics("nothing to plot".into()));
    }
    let all = series(points);
    let max_step = points.iter().map(|p| p.learner_step).max().unwrap_or(1).max(1) as f64;
    let max_ret = points.iter().map(|p| p.mean_return).fold(0.0, f64::max);
    let y_top = if max_ret > 0.0 { max_ret * 1.05 } else { 1.0 };
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let x = |s: u64| LEFT + pw * s as f64 / max_step;
    let y = |r: f64| TOP + ph * (1.0 - r / y_top);

    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(
        svg,
        r#"<path d="M{LEFT:.1} {TOP:.1} V{:.1} H{:.1}" fill="none" stroke="black"/>"#,
        TOP + ph,
        LEFT + pw
    )
    .unwrap();
    for i in 0..=5 {
        let f = i as f64 / 5.0;
        let sx = LEFT + pw * f;
        let sy = TOP + ph * (1.0 - f);
        writeln!(
            svg,
            r#"<text x="{sx:.1}" y="{:.1}" text-anchor="middle">{:.0}</text>"#,
            TOP + ph + 16.0,
            max_step * f
        )
        .unwrap();
        writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.2}</text>"#,
            LEFT - 6.0,
            sy + 4.0,
            y_top * f
        )
        .unwrap();
    }
    writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">learner step</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 12.0
    )
    .unwrap();
    writeln!(
        svg,
        r#"<text transform="translate(16 {:.1}) rotate(-90)" text-anchor="middle">mean episode return</text>"#,
        TOP + ph / 2.0
    )
    .unwrap();

    for (i, (run, s)) in all.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut band = String::new();
        for (k, &step) in s.steps.iter().enumerate() {
            write!(band, "{}{:.1} {:.1} ", if k == 0 { "M" } else { "L" }, x(step), y(s.hi[k])).unwrap();
        }
        for (k, &step) in s.steps.iter().enumerate().rev() {
            write!(band, "L{:.1} {:.1} ", x(step), y(s.lo[k])).unwrap();
        }
        writeln!(svg, r#"<path class="band" d="{}Z" fill="{color}" fill-opacity="0.2" stroke="none"/>"#, band).unwrap();
        let line: Vec<String> = s
            .steps
            .iter()
            .zip(&s.mean)
            .map(|(&st, &m)| format!("{:.1},{:.1}", x(st), y(m)))
            .collect();
        writeln!(
            svg,
            r#"<polyline class="series" data-run="{run}" points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            line.join(" ")
        )
        .unwrap();
        let ly = TOP + 14.0 + 18.0 * i as f64;
        let lx = LEFT + pw + 14.0;
        writeln!(
            svg,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{run}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0
        )
        .unwrap();
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Read one or more metrics files and write a single SVG. Nothing is
/// written when any input is unreadable or empty.
pub fn plot_files(inputs: &[PathBuf], out: &Path) -> HarnessResult<()> {
    if inputs.is_empty() {
        return Err(HarnessError::Metrics("no input files".into()));
    }
    let mut points = Vec::new();
    for p in inputs {
        let text = std::fs::read_to_string(p).map_err(|e| HarnessError::io(p, e))?;
        points.extend(parse_metrics(&text).map_err(|e| HarnessError::Metrics(format!("{}: {e}", p.display())))?);
    }
    let svg = render_svg(&points)?;
    std::fs::write(out, svg).map_err(|e| HarnessError::io(out, e))
}
