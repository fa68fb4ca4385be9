//! Minimal SVG charts.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 55.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Copy)]
pub enum Scale {
    Linear,
    Log,
}

impl Scale {
    fn map(self, v: f64) -> f64 {
        match self {
            Scale::Linear => v,
            Scale::Log => v.log10(),
        }
    }
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn new(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Self {
        Self {
            x: padded_range(xs),
            y: padded_range(ys),
        }
    }

    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x.0) / (self.x.1 - self.x.0) * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        H - BOTTOM - (y - self.y.0) / (self.y.1 - self.y.0) * (H - TOP - BOTTOM)
    }
}

fn padded_range(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = v
        .filter(|x| x.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let span = (hi - lo).max(1e-12 * lo.abs().max(1.0));
    (lo - 0.05 * span, hi + 0.05 * span)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(out: &mut String, title: &str, x_label: &str, y_label: &str) {
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">
<rect width="{W}" height="{H}" fill="white"/>
<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>
<text x="{}" y="{}" text-anchor="middle">{}</text>
<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>
"#,
        W / 2.0,
        escape(title),
        (LEFT + W - RIGHT) / 2.0,
        H - 12.0,
        escape(x_label),
        (TOP + H - BOTTOM) / 2.0,
        (TOP + H - BOTTOM) / 2.0,
        escape(y_label)
    );
}

fn axes(out: &mut String, f: &Frame, xs: Scale, ys: Scale) {
    let _ = writeln!(
        out,
        r#"<rect x="{LEFT}" y="{TOP}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - LEFT - RIGHT,
        H - TOP - BOTTOM
    );
    for i in 0..=4 {
        let fx = f.x.0 + (f.x.1 - f.x.0) * i as f64 / 4.0;
        let fy = f.y.0 + (f.y.1 - f.y.0) * i as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            f.px(fx),
            H - BOTTOM + 16.0,
            tick(fx, xs)
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            f.py(fy) + 4.0,
            tick(fy, ys)
        );
    }
}

fn tick(v: f64, s: Scale) -> String {
    let v = match s {
        Scale::Linear => v,
        Scale::Log => 10f64.powf(v),
    };
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn legend(out: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let y = TOP + 14.0 + 16.0 * i as f64;
        let c = COLORS[i % COLORS.len()];
        let _ = writeln!(
            out,
            r#"<rect x="{}" y="{}" width="10" height="10" fill="{c}"/><text x="{}" y="{}">{}</text>"#,
            W - RIGHT - 150.0,
            y - 9.0,
            W - RIGHT - 135.0,
            y,
            escape(name)
        );
    }
}

/// Line-and-marker plot of each series.
pub fn line_plot(title: &str, x_label: &str, y_label: &str, series: &[Series], xs: Scale, ys: Scale) -> String {
    let all = || series.iter().flat_map(|s| s.points.iter());
    let f = Frame::new(all().map(|p| xs.map(p.0)), all().map(|p| ys.map(p.1)));
    let mut out = String::new();
    header(&mut out, title, x_label, y_label);
    axes(&mut out, &f, xs, ys);
    for (i, s) in series.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        let pts: Vec<(f64, f64)> = s
            .points
            .iter()
            .map(|&(x, y)| (xs.map(x), ys.map(y)))
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(x, y)| (f.px(x), f.py(y)))
            .collect();
        let path: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{c}" stroke-width="2"/>"#,
            path.join(" ")
        );
        for (x, y) in pts {
            let _ = writeln!(out, r#"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="{c}"/>"#);
        }
    }
    let names: Vec<&str> = series.iter().map(|s| s.name.as_str()).collect();
    legend(&mut out, &names);
    out.push_str("</svg>\n");
    out
}

/// Vertical bars with optional ± error whiskers.
pub fn bar_chart(title: &str, y_label: &str, bars: &[(String, f64, f64)]) -> String {
    let ys = bars
        .iter()
        .flat_map(|(_, v, e)| [0.0, v + e, v - e])
        .collect::<Vec<_>>();
    let f = Frame {
        x: (0.0, bars.len().max(1) as f64),
        y: padded_range(ys.into_iter()),
    };
    let mut out = String::new();
    header(&mut out, title, "rule", y_label);
    axes_y_only(&mut out, &f);
    let width = (W - LEFT - RIGHT) / bars.len().max(1) as f64;
    for (i, (name, v, e)) in bars.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        let x0 = f.px(i as f64) + 0.15 * width;
        let (top, base) = (f.py(v.max(0.0)), f.py(v.min(0.0)));
        let _ = writeln!(
            out,
            r#"<rect x="{x0:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="{c}"/>"#,
            0.7 * width,
            (base - top).max(0.5)
        );
        let cx = x0 + 0.35 * width;
        let _ = writeln!(
            out,
            r#"<line x1="{cx:.2}" x2="{cx:.2}" y1="{:.2}" y2="{:.2}" stroke="black"/>"#,
            f.py(v - e),
            f.py(v + e)
        );
        let _ = writeln!(
            out,
            r#"<text x="{cx:.2}" y="{}" text-anchor="end" font-size="10" transform="rotate(-35 {cx:.2} {})">{}</text>"#,
            H - BOTTOM + 14.0,
            H - BOTTOM + 14.0,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn axes_y_only(out: &mut String, f: &Frame) {
    let _ = writeln!(
        out,
        r#"<rect x="{LEFT}" y="{TOP}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - LEFT - RIGHT,
        H - TOP - BOTTOM
    );
    for i in 0..=4 {
        let fy = f.y.0 + (f.y.1 - f.y.0) * i as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            f.py(fy) + 4.0,
            tick(fy, Scale::Linear)
        );
    }
}

/// Overlaid step histograms with `bins` equal-width bins.
pub fn histogram(title: &str, x_label: &str, samples: &[(String, Vec<f64>)], bins: usize) -> String {
    let all = samples.iter().flat_map(|(_, v)| v.iter().copied());
    let (lo, hi) = padded_range(all);
    let width = (hi - lo) / bins as f64;
    let series: Vec<Series> = samples
        .iter()
        .map(|(name, v)| {
            let mut counts = vec![0usize; bins];
            for &x in v {
                let b = (((x - lo) / width) as usize).min(bins - 1);
                counts[b] += 1;
            }
            let n = v.len().max(1) as f64;
            Series {
                name: name.clone(),
                points: counts
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| (lo + (i as f64 + 0.5) * width, c as f64 / (n * width)))
                    .collect(),
            }
        })
        .collect();
    line_plot(title, x_label, "density", &series, Scale::Linear, Scale::Linear)
}
