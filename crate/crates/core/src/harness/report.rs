//! CSV and static SVG output. Numbers are printed with fixed formatting so
//! repeated runs on the same input produce identical bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::train::{TraceRecord, TrainTrace};
use crate::envs::MixtureSpec;
use crate::error::{Error, Result};
use crate::numeric::DenseArray;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 56.0;

fn fmt_value(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x}"),
        Some(x) => format!("{x}").to_lowercase(),
        None => String::new(),
    }
}

pub fn trace_csv(trace: &TrainTrace) -> String {
    let mut out = TraceRecord::COLUMNS.join(",");
    out.push('\n');
    for r in &trace.records {
        let row: Vec<String> = r.values().iter().map(|v| fmt_value(*v)).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn samples_csv(samples: &DenseArray) -> String {
    let mut out = String::from("x,y\n");
    for i in 0..samples.rows() {
        let r = samples.row(i);
        let _ = writeln!(out, "{},{}", r[0], r[1]);
    }
    out
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit(points: impl Iterator<Item = (f64, f64)>) -> Self {
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for (x, y) in points.filter(|(x, y)| x.is_finite() && y.is_finite()) {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !x0.is_finite() {
            (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
        }
        if x1 - x0 < 1e-12 {
            x1 = x0 + 1.0;
        }
        if y1 - y0 < 1e-12 {
            y0 -= 0.5;
            y1 += 0.5;
        }
        let pad = 0.05 * (y1 - y0);
        Self {
            x0,
            x1,
            y0: y0 - pad,
            y1: y1 + pad,
        }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        H - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * MARGIN)
    }
}

fn svg_open(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
}

fn axes(out: &mut String, f: &Frame, x_label: &str, y_label: &str) {
    let (l, r, t, b) = (MARGIN, W - MARGIN, MARGIN, H - MARGIN);
    let _ = writeln!(out, r#"<rect x="{l}" y="{t}" width="{:.1}" height="{:.1}" fill="none" stroke="black"/>"#, r - l, b - t);
    for i in 0..=4 {
        let fx = f.x0 + (f.x1 - f.x0) * i as f64 / 4.0;
        let fy = f.y0 + (f.y1 - f.y0) * i as f64 / 4.0;
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, f.px(fx), b + 16.0, tick(fx));
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, l - 4.0, f.py(fy) + 4.0, tick(fy));
    }
    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, W / 2.0, H - 12.0, escape(x_label));
    let _ = writeln!(
        out,
        r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// A named polyline.
pub struct Series<'a> {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
    pub color: Option<&'a str>,
}

pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[Series<'_>]) -> String {
    let f = Frame::fit(series.iter().flat_map(|s| s.points.iter().copied()));
    let mut out = String::new();
    svg_open(&mut out, title);
    axes(&mut out, &f, x_label, y_label);
    for (i, s) in series.iter().enumerate() {
        let color = s.color.unwrap_or(PALETTE[i % PALETTE.len()]);
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", f.px(x), f.py(y)))
            .collect();
        let dash = if s.dashed { r#" stroke-dasharray="6 4""# } else { "" };
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5"{dash} points="{}"/>"#,
            pts.join(" ")
        );
        let ly = MARGIN + 14.0 + 16.0 * i as f64;
        let _ = writeln!(out, r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"{dash}/>"#, W - MARGIN - 150.0, W - MARGIN - 130.0);
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, W - MARGIN - 124.0, ly + 4.0, escape(&s.name));
    }
    out.push_str("</svg>\n");
    out
}

/// Samples over the mixture: circles at one and `ood_radius` standard deviations.
pub fn scatter_plot(title: &str, samples: &DenseArray, mixture: &MixtureSpec, ood_radius: f64) -> String {
    let r = mixture.means.iter().flat_map(|m| [m[0].abs(), m[1].abs()]).fold(0.0, f64::max) + ood_radius * mixture.std + 0.5;
    let f = Frame {
        x0: -r,
        x1: r,
        y0: -r,
        y1: r,
    };
    let mut out = String::new();
    svg_open(&mut out, title);
    axes(&mut out, &f, "x1", "x2");
    let scale = (W - 2.0 * MARGIN) / (2.0 * r);
    let scale_y = (H - 2.0 * MARGIN) / (2.0 * r);
    for i in 0..samples.rows() {
        let p = samples.row(i);
        if p[0].abs() > r || p[1].abs() > r {
            continue;
        }
        let _ = writeln!(out, r##"<circle cx="{:.2}" cy="{:.2}" r="1.5" fill="#d62728" fill-opacity="0.35"/>"##, f.px(p[0]), f.py(p[1]));
    }
    for m in &mixture.means {
        for (k, dash) in [(1.0, ""), (ood_radius, r#" stroke-dasharray="4 3""#)] {
            let _ = writeln!(
                out,
                r##"<ellipse cx="{:.2}" cy="{:.2}" rx="{:.2}" ry="{:.2}" fill="none" stroke="#1f77b4" stroke-width="1.5"{dash}/>"##,
                f.px(m[0]),
                f.py(m[1]),
                k * mixture.std * scale,
                k * mixture.std * scale_y
            );
        }
    }
    // reward direction (1, 1)/√2
    let _ = writeln!(
        out,
        r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="gray" stroke-dasharray="2 3"/>"#,
        f.px(-r),
        f.py(-r),
        f.px(r),
        f.py(r)
    );
    out.push_str("</svg>\n");
    out
}

fn trace_label(t: &TrainTrace) -> String {
    format!("{} seed {}", t.variant, t.seed)
}

/// Writes one CSV per trace plus D-MSE and implicit-accuracy plots; returns the paths written.
pub fn report(traces: &[TrainTrace], out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    if traces.is_empty() || traces.iter().any(|t| t.records.is_empty()) {
        return Err(Error::InvalidArgument("report needs at least one non-empty trace".into()));
    }
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for t in traces {
        let path = dir.join(format!("trace_{}_seed{}.csv", t.variant, t.seed));
        fs::write(&path, trace_csv(t))?;
        written.push(path);
    }

    let mut dmse = Vec::new();
    for (i, t) in traces.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts = |g: fn(&TraceRecord) -> f64| t.records.iter().map(|r| (r.step as f64, g(r))).collect();
        dmse.push(Series {
            name: format!("E_win {}", trace_label(t)),
            points: pts(|r| r.e_winning),
            dashed: false,
            color: Some(color),
        });
        dmse.push(Series {
            name: format!("E_lose {}", trace_label(t)),
            points: pts(|r| r.e_losing),
            dashed: true,
            color: Some(color),
        });
    }
    let (s0, s1) = step_range(traces);
    dmse.push(Series {
        name: "BC reference".into(),
        points: vec![(s0, traces[0].reference_dmse), (s1, traces[0].reference_dmse)],
        dashed: true,
        color: Some("gray"),
    });
    let path = dir.join("dmse.svg");
    fs::write(&path, line_plot("Average D-MSE during alignment", "step", "D-MSE", &dmse))?;
    written.push(path);

    let mut acc = Vec::new();
    for (i, t) in traces.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        acc.push(Series {
            name: format!("train {}", trace_label(t)),
            points: t.records.iter().map(|r| (r.step as f64, r.i_acc)).collect(),
            dashed: false,
            color: Some(color),
        });
        if t.records.iter().any(|r| r.heldout_i_acc.is_finite()) {
            acc.push(Series {
                name: format!("held-out {}", trace_label(t)),
                points: t.records.iter().map(|r| (r.step as f64, r.heldout_i_acc)).collect(),
                dashed: true,
                color: Some(color),
            });
        }
    }
    let path = dir.join("implicit_accuracy.svg");
    fs::write(&path, line_plot("Implicit accuracy", "step", "I_acc", &acc))?;
    written.push(path);
    Ok(written)
}

fn step_range(traces: &[TrainTrace]) -> (f64, f64) {
    let lo = traces.iter().filter_map(|t| t.first()).map(|r| r.step).min().unwrap_or(0);
    let hi = traces.iter().filter_map(|t| t.last()).map(|r| r.step).max().unwrap_or(1);
    (lo as f64, hi as f64)
}
