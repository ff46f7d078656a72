//! Precision-recall figures as standalone SVG.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::eval::{f_measure, PrPoint};

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 56.0;
const ISO_F: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
const PALETTE: [&str; 8] = ["#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// One named curve.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub label: String,
    pub points: Vec<PrPoint>,
}

impl Curve {
    pub fn best_f(&self) -> f64 {
        self.points.iter().map(|p| f_measure(p.precision, p.recall)).fold(0.0, f64::max)
    }
}

/// Parses `threshold,precision,recall` rows as written by the evaluator.
/// Errors name the 1-based line.
pub fn parse_curve_csv(text: &str) -> Result<Vec<PrPoint>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, header)) if header.trim() == "threshold,precision,recall" => {}
        Some((i, header)) => return Err(Error::Data(format!("line {}: expected header threshold,precision,recall, found {header:?}", i + 1))),
        None => return Err(Error::Data("line 1: empty curve file".into())),
    }
    let mut points = Vec::new();
    for (i, line) in lines {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(Error::Data(format!("line {}: expected 3 fields, found {}", i + 1, fields.len())));
        }
        let mut v = [0.0; 3];
        for (slot, f) in v.iter_mut().zip(&fields) {
            *slot = f.parse::<f64>().map_err(|_| Error::Data(format!("line {}: {f:?} is not a number", i + 1)))?;
            if !(0.0..=1.0).contains(slot) {
                return Err(Error::Data(format!("line {}: value {f} is outside [0, 1]", i + 1)));
            }
        }
        points.push(PrPoint { threshold: v[0], precision: v[1], recall: v[2] });
    }
    if points.is_empty() {
        return Err(Error::Data("curve file has a header but no points".into()));
    }
    Ok(points)
}

fn sx(recall: f64) -> f64 {
    MARGIN + recall * (WIDTH - 2.0 * MARGIN)
}

fn sy(precision: f64) -> f64 {
    HEIGHT - MARGIN - precision * (HEIGHT - 2.0 * MARGIN)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Renders curves on a recall/precision square with iso-F contours. The
/// output depends only on the arguments.
pub fn render_pr_svg(title: &str, curves: &[Curve]) -> Result<String> {
    if curves.is_empty() {
        return Err(Error::Usage("nothing to plot: no curves given".into()));
    }
    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#).unwrap();
    writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{:.2}" y="24" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(title)).unwrap();

    // iso-F contours: p = F r / (2r - F) for r in (F/2, 1].
    for f in ISO_F {
        let mut pts = Vec::new();
        for k in 0..=100 {
            let r = f / 2.0 + (1.0 - f / 2.0) * (k as f64 / 100.0);
            let p = f * r / (2.0 * r - f);
            if p <= 1.0 {
                pts.push(format!("{:.2},{:.2}", sx(r), sy(p)));
            }
        }
        writeln!(s, r##"<polyline points="{}" fill="none" stroke="#bbbbbb" stroke-width="0.8" stroke-dasharray="3,3"/>"##, pts.join(" ")).unwrap();
        let label_p = f / (2.0 - f);
        writeln!(s, r##"<text x="{:.2}" y="{:.2}" fill="#888888" font-size="9">F={f:.1}</text>"##, sx(1.0) + 3.0, sy(label_p) + 3.0).unwrap();
    }

    // Axes and ticks.
    writeln!(s, r#"<rect x="{MARGIN}" y="{MARGIN}" width="{:.2}" height="{:.2}" fill="none" stroke="black"/>"#, WIDTH - 2.0 * MARGIN, HEIGHT - 2.0 * MARGIN).unwrap();
    for k in 0..=5 {
        let v = k as f64 / 5.0;
        writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{v:.1}</text>"#, sx(v), HEIGHT - MARGIN + 16.0).unwrap();
        writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{v:.1}</text>"#, MARGIN - 6.0, sy(v) + 4.0).unwrap();
    }
    writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">Recall</text>"#, WIDTH / 2.0, HEIGHT - 16.0).unwrap();
    writeln!(s, r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">Precision</text>"#, HEIGHT / 2.0, HEIGHT / 2.0).unwrap();

    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = c.points.iter().map(|p| format!("{:.2},{:.2}", sx(p.recall), sy(p.precision))).collect();
        writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.8"/>"#, pts.join(" ")).unwrap();
        let y = MARGIN + 14.0 + 16.0 * i as f64;
        writeln!(s, r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{color}" stroke-width="2"/>"#, MARGIN + 10.0, y - 4.0, MARGIN + 30.0, y - 4.0).unwrap();
        writeln!(s, r#"<text x="{:.2}" y="{y:.2}">[F={:.3}] {}</text>"#, MARGIN + 36.0, c.best_f(), escape(&c.label)).unwrap();
    }
    s.push_str("</svg>\n");
    Ok(s)
}
