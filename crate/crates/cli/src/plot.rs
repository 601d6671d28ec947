//! Trace CSVs to a three-panel SVG: loss (log scale), rotation error and
//! translation error against iteration.

use std::fmt::Write as _;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use cstep_core::optim::TRACE_HEADER;

use crate::common::write;
use crate::PlotArgs;

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub iteration: Vec<f64>,
    pub loss: Vec<f64>,
    pub rot: Vec<f64>,
    pub trans: Vec<f64>,
}

fn field(s: &str) -> Option<f64> {
    if s.eq_ignore_ascii_case("nan") {
        Some(f64::NAN)
    } else {
        s.parse().ok()
    }
}

/// Parse one trace file; errors name the file and line.
pub fn parse_trace(label: &str, text: &str, path: &Path) -> Result<Series> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == TRACE_HEADER => {}
        Some((i, _)) => bail!("{}:{}: expected header `{TRACE_HEADER}`", path.display(), i + 1),
        None => bail!("{}: empty trace", path.display()),
    }
    let mut s = Series { label: label.to_string(), iteration: vec![], loss: vec![], rot: vec![], trans: vec![] };
    for (i, line) in lines {
        let v: Vec<Option<f64>> = line.split(',').map(|p| field(p.trim())).collect();
        if v.len() != 5 || v.iter().any(Option::is_none) {
            bail!("{}:{}: expected five numeric fields", path.display(), i + 1);
        }
        let v: Vec<f64> = v.into_iter().flatten().collect();
        s.iteration.push(v[0]);
        s.loss.push(v[1]);
        s.trans.push(v[3]);
        s.rot.push(v[4]);
    }
    if s.iteration.is_empty() {
        bail!("{}: trace has no rows", path.display());
    }
    Ok(s)
}

/// Legend position: gradient descent, nonlinear CG, Newton, then the rest in
/// the order given.
fn rank(label: &str) -> usize {
    match label.to_ascii_lowercase().as_str() {
        "gd" => 0,
        "ncg" => 1,
        "newton" => 2,
        _ => 3,
    }
}

fn display(label: &str) -> String {
    match label.to_ascii_lowercase().as_str() {
        "gd" => "GD".into(),
        "ncg" => "NCG".into(),
        "newton" => "Newton".into(),
        _ => label.to_string(),
    }
}

const COLORS: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];
const PANEL_W: f64 = 320.0;
const PANEL_H: f64 = 220.0;
const MARGIN: f64 = 50.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn panel(svg: &mut String, x0: f64, title: &str, series: &[Series], pick: fn(&Series) -> &[f64], log: bool) {
    let y0 = 40.0;
    let _ = writeln!(svg, r##"<g class="panel"><text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="13">{}</text>"##, x0 + PANEL_W / 2.0, y0 - 8.0, escape(title));
    let _ = writeln!(svg, r##"<rect x="{x0:.1}" y="{y0:.1}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="#444"/>"##);
    let tf = |v: f64| if log { v.max(1e-300).log10() } else { v };
    let pts = |s: &Series| -> Vec<(f64, f64)> {
        s.iteration.iter().zip(pick(s)).filter(|(_, v)| v.is_finite() && (!log || **v > 0.0)).map(|(i, v)| (*i, tf(*v))).collect()
    };
    let all: Vec<(f64, f64)> = series.iter().flat_map(pts).collect();
    if all.is_empty() {
        let _ = writeln!(svg, r##"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="12" fill="#888">no data</text></g>"##, x0 + PANEL_W / 2.0, y0 + PANEL_H / 2.0);
        return;
    }
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in &all {
        xmin = xmin.min(*x);
        xmax = xmax.max(*x);
        ymin = ymin.min(*y);
        ymax = ymax.max(*y);
    }
    if xmax <= xmin {
        xmax = xmin + 1.0;
    }
    if ymax <= ymin {
        ymax = ymin + 1.0;
    }
    let sx = |x: f64| x0 + (x - xmin) / (xmax - xmin) * PANEL_W;
    let sy = |y: f64| y0 + PANEL_H - (y - ymin) / (ymax - ymin) * PANEL_H;
    let fmt_y = |y: f64| if log { format!("1e{y:.1}") } else { format!("{y:.3e}") };
    let _ = writeln!(svg, r##"<text x="{:.1}" y="{:.1}" text-anchor="end" font-size="10">{}</text>"##, x0 - 4.0, y0 + 10.0, fmt_y(ymax));
    let _ = writeln!(svg, r##"<text x="{:.1}" y="{:.1}" text-anchor="end" font-size="10">{}</text>"##, x0 - 4.0, y0 + PANEL_H, fmt_y(ymin));
    let _ = writeln!(svg, r##"<text x="{:.1}" y="{:.1}" font-size="10">{xmin}</text>"##, x0, y0 + PANEL_H + 14.0);
    let _ = writeln!(svg, r##"<text x="{:.1}" y="{:.1}" text-anchor="end" font-size="10">{xmax}</text>"##, x0 + PANEL_W, y0 + PANEL_H + 14.0);
    for (ci, s) in series.iter().enumerate() {
        let p = pts(s);
        if p.is_empty() {
            continue;
        }
        let d: Vec<String> = p.iter().map(|(x, y)| format!("{:.2},{:.2}", sx(*x), sy(*y))).collect();
        let _ = writeln!(
            svg,
            r##"<polyline class="curve" data-label="{}" fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"##,
            escape(&display(&s.label)),
            COLORS[ci % COLORS.len()],
            d.join(" ")
        );
    }
    let _ = writeln!(svg, "</g>");
}

/// Render the series, sorted into legend order, as one SVG document.
pub fn render(title: &str, mut series: Vec<Series>) -> String {
    series.sort_by_key(|s| rank(&s.label));
    let width = MARGIN + 3.0 * (PANEL_W + MARGIN);
    let height = 40.0 + PANEL_H + 40.0 + 20.0 * series.len() as f64 + 20.0;
    let mut svg = String::new();
    let _ = writeln!(svg, r##"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif">"##);
    let _ = writeln!(svg, r##"<text x="{:.1}" y="18" text-anchor="middle" font-size="15">{}</text>"##, width / 2.0, escape(title));
    let panels: [(&str, fn(&Series) -> &[f64], bool); 3] = [
        ("loss (log10)", |s| &s.loss, true),
        ("rotation error [deg]", |s| &s.rot, false),
        ("translation error [m]", |s| &s.trans, false),
    ];
    for (i, (name, pick, log)) in panels.into_iter().enumerate() {
        panel(&mut svg, MARGIN + i as f64 * (PANEL_W + MARGIN), name, &series, pick, log);
    }
    let ly = 40.0 + PANEL_H + 40.0;
    let _ = writeln!(svg, r##"<g class="legend">"##);
    for (ci, s) in series.iter().enumerate() {
        let y = ly + 20.0 * ci as f64;
        let _ = writeln!(svg, r##"<line x1="{MARGIN}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="{}" stroke-width="2"/>"##, MARGIN + 24.0, COLORS[ci % COLORS.len()]);
        let _ = writeln!(svg, r##"<text class="legend-entry" x="{:.1}" y="{:.1}" font-size="12">{}</text>"##, MARGIN + 30.0, y + 4.0, escape(&display(&s.label)));
    }
    let _ = writeln!(svg, "</g>\n</svg>");
    svg
}

pub fn run(a: &PlotArgs) -> Result<ExitCode> {
    let mut series = Vec::new();
    for t in &a.traces {
        let (label, path) = match t.split_once('=') {
            Some((l, p)) => (l.to_string(), Path::new(p).to_path_buf()),
            None => {
                let p = Path::new(t).to_path_buf();
                let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| t.clone());
                (stem, p)
            }
        };
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        series.push(parse_trace(&label, &text, &path)?);
    }
    write(&a.out, render(&a.title, series))?;
    println!("wrote {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TRACE: &str = "iteration,loss,grad_norm,trans_err,rot_err\n0,1e0,2,0.1,3\n1,1e-3,0.1,0.01,0.5\n";

    #[test]
    fn parse_errors_name_file_and_line() {
        let p = Path::new("t.csv");
        assert!(parse_trace("gd", TRACE, p).is_ok());
        let e = parse_trace("gd", "iteration,loss,grad_norm,trans_err,rot_err\n", p).unwrap_err().to_string();
        assert!(e.contains("no rows"), "{e}");
        let e = parse_trace("gd", "", p).unwrap_err().to_string();
        assert!(e.contains("empty"), "{e}");
        let e = parse_trace("gd", "iteration,loss,grad_norm,trans_err,rot_err\n0,1,2,3,4\n1,x,2,3,4\n", p).unwrap_err().to_string();
        assert!(e.contains("t.csv:3"), "{e}");
        let e = parse_trace("gd", "a,b\n", p).unwrap_err().to_string();
        assert!(e.contains("t.csv:1"), "{e}");
        let nan = parse_trace("gd", "iteration,loss,grad_norm,trans_err,rot_err\n0,1,2,nan,nan\n", p).unwrap();
        assert!(nan.rot[0].is_nan());
    }

    #[test]
    fn one_curve_per_panel_and_legend_order() {
        let p = Path::new("t.csv");
        let one = render("t", vec![parse_trace("newton", TRACE, p).unwrap()]);
        assert_eq!(one.matches("class=\"curve\"").count(), 3);
        let three = render(
            "t",
            vec![
                parse_trace("newton", TRACE, p).unwrap(),
                parse_trace("gd", TRACE, p).unwrap(),
                parse_trace("ncg", TRACE, p).unwrap(),
            ],
        );
        assert_eq!(three.matches("class=\"curve\"").count(), 9);
        let legend: Vec<&str> = three
            .lines()
            .filter(|l| l.contains("legend-entry"))
            .map(|l| l.rsplit_once('>').unwrap().0.rsplit_once('>').unwrap().1.trim_end_matches("</text"))
            .collect();
        assert_eq!(legend, vec!["GD", "NCG", "Newton"]);
    }
}
