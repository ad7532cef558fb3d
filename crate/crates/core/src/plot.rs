//! Minimal SVG line charts with optional ±std bands.

use std::fmt::Write;

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// Half-width of a shaded band around `ys`.
    pub band: Option<Vec<f64>>,
}

impl Series {
    pub fn new(name: impl Into<String>, xs: Vec<f64>, ys: Vec<f64>) -> Self {
        Series { name: name.into(), xs, ys, band: None }
    }
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];
const W: f64 = 720.0;
const H: f64 = 420.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 180.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 48.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders every series on shared axes.
pub fn line_chart(series: &[Series], title: &str, xlabel: &str, ylabel: &str) -> String {
    let mut xmin = f64::INFINITY;
    let mut xmax = f64::NEG_INFINITY;
    let mut ymin = f64::INFINITY;
    let mut ymax = f64::NEG_INFINITY;
    for s in series {
        for (i, (&x, &y)) in s.xs.iter().zip(&s.ys).enumerate() {
            let b = s.band.as_ref().and_then(|b| b.get(i)).copied().unwrap_or(0.0);
            if x.is_finite() && y.is_finite() {
                xmin = xmin.min(x);
                xmax = xmax.max(x);
                ymin = ymin.min(y - b);
                ymax = ymax.max(y + b);
            }
        }
    }
    if !xmin.is_finite() {
        (xmin, xmax, ymin, ymax) = (0.0, 1.0, 0.0, 1.0);
    }
    if xmax <= xmin {
        xmax = xmin + 1.0;
    }
    if ymax <= ymin {
        ymax = ymin + 1.0;
    }
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - xmin) / (xmax - xmin) * pw;
    let sy = |y: f64| TOP + (1.0 - (y - ymin) / (ymax - ymin)) * ph;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, LEFT + pw / 2.0, escape(title));
    let _ = writeln!(
        out,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let y = ymin + f * (ymax - ymin);
        let x = xmin + f * (xmax - xmin);
        let _ = writeln!(
            out,
            r##"<line x1="{LEFT}" x2="{}" y1="{y0}" y2="{y0}" stroke="#ddd"/><text x="{}" y="{}" text-anchor="end">{y:.3}</text>"##,
            LEFT + pw,
            LEFT - 6.0,
            sy(y) + 4.0,
            y0 = sy(y)
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            sx(x),
            TOP + ph + 16.0,
            if xmax - xmin >= 10.0 { format!("{x:.0}") } else { format!("{x:.2}") }
        );
    }
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, H - 10.0, escape(xlabel));
    let _ = writeln!(
        out,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(ylabel)
    );
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<(f64, f64, f64)> = s
            .xs
            .iter()
            .zip(&s.ys)
            .enumerate()
            .filter(|(_, (x, y))| x.is_finite() && y.is_finite())
            .map(|(i, (&x, &y))| (x, y, s.band.as_ref().and_then(|b| b.get(i)).copied().unwrap_or(0.0)))
            .collect();
        if let Some(_band) = &s.band {
            let mut poly: Vec<String> = pts.iter().map(|&(x, y, b)| format!("{:.1},{:.1}", sx(x), sy(y + b))).collect();
            poly.extend(pts.iter().rev().map(|&(x, y, b)| format!("{:.1},{:.1}", sx(x), sy(y - b))));
            let _ = writeln!(out, r#"<polygon points="{}" fill="{color}" fill-opacity="0.15" stroke="none"/>"#, poly.join(" "));
        }
        let line: Vec<String> = pts.iter().map(|&(x, y, _)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        let _ = writeln!(
            out,
            r#"<polyline class="series" data-name="{}" points="{}" fill="none" stroke="{color}" stroke-width="1.6"/>"#,
            escape(&s.name),
            line.join(" ")
        );
        let ly = TOP + 14.0 + 18.0 * k as f64;
        let _ = writeln!(
            out,
            r#"<line x1="{}" x2="{}" y1="{ly}" y2="{ly}" stroke="{color}" stroke-width="3"/><text x="{}" y="{}">{}</text>"#,
            W - RIGHT + 12.0,
            W - RIGHT + 32.0,
            W - RIGHT + 38.0,
            ly + 4.0,
            escape(&s.name)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Number of plotted series in an SVG produced by [`line_chart`].
pub fn count_series(svg: &str) -> usize {
    svg.matches(r#"class="series""#).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_contains_each_series() {
        let mut a = Series::new("ppo", vec![0.0, 1.0, 2.0], vec![0.0, 0.1, 0.3]);
        a.band = Some(vec![0.01, 0.02, 0.05]);
        let b = Series::new("shaped <x>", vec![0.0, 1.0, 2.0], vec![0.0, 0.2, 0.5]);
        let svg = line_chart(&[a, b], "return", "iteration", "mean return");
        assert_eq!(count_series(&svg), 2);
        assert!(svg.contains("shaped &lt;x&gt;"));
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(count_series(&line_chart(&[], "", "", "")), 0);
    }
}
