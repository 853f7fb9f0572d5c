//! Minimal SVG line and scatter plots for training curves and sweeps.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(name: &str, points: impl IntoIterator<Item = (f64, f64)>) -> Self {
        Self { name: name.to_string(), points: points.into_iter().filter(|(x, y)| x.is_finite() && y.is_finite()).collect() }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn bounds(series: &[Series]) -> ((f64, f64), (f64, f64)) {
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return ((0.0, 1.0), (0.0, 1.0));
    }
    let pad = |lo: f64, hi: f64| if hi - lo < 1e-12 { (lo - 0.5, hi + 0.5) } else { (lo, hi) };
    (pad(x0, x1), pad(y0, y1))
}

fn plot(title: &str, xlabel: &str, ylabel: &str, series: &[Series], lines: bool) -> String {
    let ((x0, x1), (y0, y1)) = bounds(series);
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let sy = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);
    let mut out = String::new();
    writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#).unwrap();
    writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(out, r#"<text x="{}" y="20" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, escape(title)).unwrap();
    writeln!(
        out,
        r#"<path d="M{m} {t} L{m} {b} L{r} {b}" stroke="black" fill="none"/>"#,
        m = MARGIN,
        t = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN
    )
    .unwrap();
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, sx(xv), H - MARGIN + 16.0, tick(xv)).unwrap();
        writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, MARGIN - 6.0, sy(yv) + 4.0, tick(yv)).unwrap();
    }
    writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 12.0, escape(xlabel)).unwrap();
    writeln!(
        out,
        r#"<text x="16" y="{y}" text-anchor="middle" transform="rotate(-90 16 {y})">{}</text>"#,
        escape(ylabel),
        y = H / 2.0
    )
    .unwrap();
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        if lines && s.points.len() > 1 {
            let d: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
            writeln!(out, r#"<polyline points="{}" stroke="{color}" stroke-width="2" fill="none"/>"#, d.join(" ")).unwrap();
        }
        for &(x, y) in &s.points {
            writeln!(out, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, sx(x), sy(y)).unwrap();
        }
        let ly = MARGIN + 16.0 * i as f64;
        writeln!(out, r#"<rect x="{}" y="{:.1}" width="10" height="10" fill="{color}"/>"#, W - MARGIN - 140.0, ly - 9.0).unwrap();
        writeln!(out, r#"<text x="{}" y="{ly:.1}">{}</text>"#, W - MARGIN - 124.0, escape(&s.name)).unwrap();
    }
    out.push_str("</svg>\n");
    out
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.round() {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

pub fn line_plot(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    plot(title, xlabel, ylabel, series, true)
}

pub fn scatter_plot(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    plot(title, xlabel, ylabel, series, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plots_are_well_formed() {
        let s = Series::new("a<b", [(0.0, 1.0), (1.0, 2.0), (2.0, f64::NAN)]);
        assert_eq!(s.points.len(), 2);
        let svg = line_plot("t", "x", "y", &[s]);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("a&lt;b"));
        assert!(svg.contains("<polyline"));
        assert!(!scatter_plot("t", "x", "y", &[Series::new("p", [(1.0, 1.0)])]).contains("<polyline"));
    }

    #[test]
    fn empty_and_flat_series_do_not_divide_by_zero() {
        let svg = line_plot("t", "x", "y", &[Series::new("flat", [(1.0, 3.0), (1.0, 3.0)]), Series::new("none", [])]);
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
    }
}
