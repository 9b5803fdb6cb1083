//! SVG charts: parameters vs. average mR per configuration (marker area
//! grows with parameter count), and the λ2 sweep as a line. The CSV inputs
//! stay the authoritative record.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Serialize;

use crate::run::Run;

#[derive(Args, Debug)]
pub struct PlotArgs {
    /// `reduction_report.csv` files (repeatable).
    #[arg(long = "report")]
    pub reports: Vec<PathBuf>,
    /// `sweep_lambda2.csv` from `sweep lambda2`.
    #[arg(long)]
    pub sweep: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Point {
    pub method: String,
    pub setting: String,
    pub params: f64,
    pub average: f64,
}

/// Rows of a reduction report that carry an average mR.
pub fn parse_report(text: &str) -> Result<Vec<Point>> {
    let mut out = Vec::new();
    let mut header = false;
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        if !header {
            header = true;
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            bail!("line {}: expected 5 fields", i + 1);
        }
        if f[4].is_empty() {
            continue;
        }
        out.push(Point {
            method: f[0].into(),
            setting: f[1].into(),
            params: f[3].parse().with_context(|| format!("line {}: params", i + 1))?,
            average: f[4].parse().with_context(|| format!("line {}: A", i + 1))?,
        });
    }
    Ok(out)
}

/// `(λ2, validation A, test A)` rows.
pub fn parse_sweep(text: &str) -> Result<Vec<(f64, f64, f64)>> {
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<f64> = l
                .split(',')
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .with_context(|| format!("sweep row {}", i + 1))?;
            match f[..] {
                [x, v, a] => Ok((x, v, a)),
                _ => bail!("sweep row {}: expected 3 fields", i + 1),
            }
        })
        .collect()
}

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 56.0;
const PALETTE: [&str; 7] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf"];

struct Axes {
    x: (f64, f64),
    y: (f64, f64),
    top: f64,
}

impl Axes {
    fn new(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone, top: f64) -> Self {
        let span = |v: (f64, f64)| if v.1 - v.0 < 1e-9 { (v.0 - 0.5, v.1 + 0.5) } else { v };
        let range = |it: &mut dyn Iterator<Item = f64>| it.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        let (x, y) = (span(range(&mut xs.clone())), span(range(&mut ys.clone())));
        let pad = |(lo, hi): (f64, f64)| (lo - 0.08 * (hi - lo), hi + 0.08 * (hi - lo));
        Self { x: pad(x), y: pad(y), top }
    }

    fn px(&self, x: f64) -> f64 {
        PAD + (x - self.x.0) / (self.x.1 - self.x.0) * (W - 2.0 * PAD)
    }

    fn py(&self, y: f64) -> f64 {
        self.top + H - PAD - (y - self.y.0) / (self.y.1 - self.y.0) * (H - 2.0 * PAD)
    }

    fn draw(&self, svg: &mut String, title: &str, xlabel: &str, xtick: impl Fn(f64) -> String) {
        let (t, b) = (self.top + PAD, self.top + H - PAD);
        let _ = writeln!(svg, r##"<rect x="{PAD}" y="{t}" width="{}" height="{}" fill="none" stroke="#444"/>"##, W - 2.0 * PAD, H - 2.0 * PAD);
        let _ = writeln!(svg, r##"<text x="{}" y="{}" text-anchor="middle" font-size="14">{title}</text>"##, W / 2.0, self.top + 28.0);
        let _ = writeln!(svg, r##"<text x="{}" y="{}" text-anchor="middle" font-size="12">{xlabel}</text>"##, W / 2.0, b + 38.0);
        let _ = writeln!(
            svg,
            r##"<text x="16" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 16 {})">average mR</text>"##,
            (t + b) / 2.0,
            (t + b) / 2.0
        );
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let x = self.x.0 + f * (self.x.1 - self.x.0);
            let y = self.y.0 + f * (self.y.1 - self.y.0);
            let _ = writeln!(svg, r##"<text x="{:.1}" y="{}" text-anchor="middle" font-size="10">{}</text>"##, self.px(x), b + 16.0, xtick(x));
            let _ = writeln!(svg, r##"<text x="{}" y="{:.1}" text-anchor="end" font-size="10">{y:.1}</text>"##, PAD - 6.0, self.py(y) + 3.0);
        }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn exp_tick(v: f64) -> String {
    let p = 10f64.powf(v);
    if p >= 1e6 {
        format!("{:.1}M", p / 1e6)
    } else if p >= 1e3 {
        format!("{:.0}K", p / 1e3)
    } else {
        format!("{p:.2e}")
    }
}

pub fn render(points: &[Point], sweep: &[(f64, f64, f64)]) -> String {
    let panels = usize::from(!points.is_empty()) + usize::from(!sweep.is_empty());
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{}" font-family="sans-serif">"##,
        H * panels as f64
    );
    let mut top = 0.0;
    if !points.is_empty() {
        let axes = Axes::new(points.iter().map(|p| p.params.max(1.0).log10()), points.iter().map(|p| p.average), top);
        axes.draw(&mut svg, "Parameters vs. average mR", "parameters (log scale)", exp_tick);
        let max = points.iter().map(|p| p.params).fold(1.0, f64::max);
        let mut methods: Vec<&str> = Vec::new();
        for p in points {
            if !methods.contains(&p.method.as_str()) {
                methods.push(&p.method);
            }
        }
        for p in points {
            let color = PALETTE[methods.iter().position(|m| *m == p.method).expect("listed") % PALETTE.len()];
            // Area ∝ (P / 1M)^1.5, normalized so the largest marker is 18 px.
            let r = (18.0 * (p.params / max).powf(0.75)).max(2.0);
            let (x, y) = (axes.px(p.params.max(1.0).log10()), axes.py(p.average));
            let _ = writeln!(svg, r##"<circle cx="{x:.1}" cy="{y:.1}" r="{r:.1}" fill="{color}" fill-opacity="0.55" stroke="{color}"/>"##);
            let _ = writeln!(svg, r##"<text x="{:.1}" y="{:.1}" font-size="9">{}</text>"##, x + r + 2.0, y + 3.0, escape(&p.setting));
        }
        for (i, m) in methods.iter().enumerate() {
            let y = top + PAD + 14.0 + 14.0 * i as f64;
            let _ = writeln!(svg, r##"<circle cx="{}" cy="{y}" r="5" fill="{}"/>"##, W - PAD - 80.0, PALETTE[i % PALETTE.len()]);
            let _ = writeln!(svg, r##"<text x="{}" y="{}" font-size="11">{}</text>"##, W - PAD - 70.0, y + 4.0, escape(m));
        }
        top += H;
    }
    if !sweep.is_empty() {
        let xs = sweep.iter().map(|s| s.0.log10());
        let ys = sweep.iter().flat_map(|s| [s.1, s.2]);
        let axes = Axes::new(xs, ys, top);
        axes.draw(&mut svg, "Masked cross-language weight sweep", "lambda2 (log scale)", |v| format!("1e{v:.1}"));
        for (series, color, dash, pick) in [
            ("validation", PALETTE[0], "4 3", 1usize),
            ("test", PALETTE[1], "", 2),
        ] {
            let pts: Vec<String> = sweep
                .iter()
                .map(|s| {
                    let y = if pick == 1 { s.1 } else { s.2 };
                    format!("{:.1},{:.1}", axes.px(s.0.log10()), axes.py(y))
                })
                .collect();
            let _ = writeln!(
                svg,
                r##"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2" stroke-dasharray="{dash}"/>"##,
                pts.join(" ")
            );
            let y = top + PAD + 14.0 + 14.0 * (pick - 1) as f64;
            let _ = writeln!(svg, r##"<text x="{}" y="{y}" font-size="11" fill="{color}">{series}</text>"##, W - PAD - 70.0);
        }
    }
    svg.push_str("</svg>\n");
    svg
}

#[derive(Serialize)]
struct PlotRecord {
    reports: Vec<String>,
    sweep: Option<String>,
    points: usize,
}

pub fn plot(args: &PlotArgs) -> Result<()> {
    if args.reports.is_empty() && args.sweep.is_none() {
        bail!("nothing to plot: pass --report and/or --sweep");
    }
    let mut points = Vec::new();
    for path in &args.reports {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        points.extend(parse_report(&text).with_context(|| format!("parsing {}", path.display()))?);
    }
    let sweep = match &args.sweep {
        Some(path) => parse_sweep(&std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?)?,
        None => Vec::new(),
    };
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("plot.svg"), render(&points, &sweep))?;
    let inputs: Vec<&Path> = args.reports.iter().chain(&args.sweep).map(PathBuf::as_path).collect();
    Run {
        command: "plot",
        seed: 0,
        inputs: &inputs,
    }
    .finish(
        &args.out,
        &PlotRecord {
            reports: args.reports.iter().map(|p| p.display().to_string()).collect(),
            sweep: args.sweep.as_ref().map(|p| p.display().to_string()),
            points: points.len(),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_rows_without_an_average_are_skipped() {
        let text = "# note\nmethod,setting,vocab_size,params,A\nfreq,t=1,40,1000,12.5\nfreq,t=2,30,900,\n";
        let pts = parse_report(text).unwrap();
        assert_eq!(pts.len(), 1);
        assert_eq!(pts[0].params, 1000.0);
        assert_eq!(pts[0].average, 12.5);
    }

    #[test]
    fn svg_has_one_marker_per_point_and_a_sweep_line() {
        let pts = vec![
            Point { method: "hem".into(), setting: "K=30".into(), params: 5e4, average: 60.0 },
            Point { method: "freq".into(), setting: "t=2".into(), params: 8e4, average: 50.0 },
        ];
        let svg = render(&pts, &[(1e-6, 50.0, 49.0), (1e-4, 55.0, 52.0)]);
        assert!(svg.starts_with("<svg"));
        // Two data markers plus two legend dots.
        assert_eq!(svg.matches("<circle").count(), 4);
        assert_eq!(svg.matches("<polyline").count(), 2);
    }
}
