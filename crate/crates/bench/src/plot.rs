//! Minimal SVG line plots with a shaded band.

use std::fmt::Write;

const W: f64 = 720.0;
const H: f64 = 420.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 160.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];

/// `(x, mean, std)` triples of one curve.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64, f64)>,
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-300 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Mean curves with `mean ± std` bands. Non-finite points are skipped.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let finite = |p: &&(f64, f64, f64)| p.0.is_finite() && p.1.is_finite() && p.2.is_finite();
    let (x0, x1) = range(series.iter().flat_map(|s| s.points.iter().filter(finite).map(|p| p.0)));
    let (y0, y1) = range(series.iter().flat_map(|s| s.points.iter().filter(finite).flat_map(|p| [p.1 - p.2, p.1 + p.2])));
    let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + (y1 - y) / (y1 - y0) * ph;

    let mut o = String::new();
    let _ = writeln!(o, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(o, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(o, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, LEFT + pw / 2.0, esc(title));
    let _ = writeln!(o, r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let (x, y) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(o, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, sx(x), H - BOTTOM + 18.0, tick(x));
        let _ = writeln!(o, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, LEFT - 6.0, sy(y) + 4.0, tick(y));
        let _ = writeln!(o, r##"<line x1="{LEFT}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="#ddd"/>"##, LEFT + pw, sy(y), sy(y));
    }
    let _ = writeln!(o, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, H - 10.0, esc(x_label));
    let _ = writeln!(o, r#"<text transform="translate(16 {}) rotate(-90)" text-anchor="middle">{}</text>"#, TOP + ph / 2.0, esc(y_label));

    for (i, s) in series.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        let pts: Vec<&(f64, f64, f64)> = s.points.iter().filter(finite).collect();
        if pts.is_empty() {
            continue;
        }
        let upper = pts.iter().map(|p| format!("{:.2},{:.2}", sx(p.0), sy(p.1 + p.2)));
        let lower = pts.iter().rev().map(|p| format!("{:.2},{:.2}", sx(p.0), sy(p.1 - p.2)));
        let band: Vec<String> = upper.chain(lower).collect();
        let _ = writeln!(o, r#"<polygon points="{}" fill="{c}" fill-opacity="0.2" stroke="none"/>"#, band.join(" "));
        let line: Vec<String> = pts.iter().map(|p| format!("{:.2},{:.2}", sx(p.0), sy(p.1))).collect();
        let _ = writeln!(o, r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="1.5"/>"#, line.join(" "));
        let ly = TOP + 16.0 * i as f64 + 8.0;
        let _ = writeln!(o, r#"<line x1="{}" x2="{}" y1="{ly}" y2="{ly}" stroke="{c}" stroke-width="3"/>"#, W - RIGHT + 10.0, W - RIGHT + 30.0);
        let _ = writeln!(o, r#"<text x="{}" y="{}">{}</text>"#, W - RIGHT + 36.0, ly + 4.0, esc(&s.label));
    }
    o.push_str("</svg>\n");
    o
}

fn tick(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-3..1e5).contains(&a) {
        format!("{v:.2e}")
    } else {
        format!("{}", (v * 1e4).round() / 1e4)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_band_and_line_per_series() {
        let s = vec![
            Series { label: "a".into(), points: vec![(0.0, 1.0, 0.1), (1.0, 0.5, 0.1)] },
            Series { label: "b<c".into(), points: vec![(0.0, f64::NAN, 0.0), (1.0, 0.7, 0.0)] },
        ];
        let svg = line_plot("t", "x", "y", &s);
        assert_eq!(svg.matches("<polygon").count(), 2);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("b&lt;c") && !svg.contains("NaN"));
    }

    #[test]
    fn empty_plot_is_valid() {
        let svg = line_plot("t", "x", "y", &[]);
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
    }
}
