//! Standalone SVG plots on a fixed 800x600 canvas.
//!
//! Line plots draw one `<polyline class="series">` per series, box plots one
//! `<g class="box">` per group. Each series or group carries its label in
//! `data-label` and the legend repeats it as text.

use std::fmt::Write;

pub const WIDTH: f64 = 800.0;
pub const HEIGHT: f64 = 600.0;

const LEFT: f64 = 80.0;
const RIGHT: f64 = 180.0;
const TOP: f64 = 50.0;
const BOTTOM: f64 = 60.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Value range padded so that a constant series still gets a visible band.
fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let pad = if lo.abs() > 0.0 { 0.1 * lo.abs() } else { 1.0 };
        return (lo - pad, hi + pad);
    }
    (lo, hi)
}

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - BOTTOM - (y - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - TOP - BOTTOM)
    }
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">
<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>
<text x="{}" y="28" text-anchor="middle" font-size="16">{}</text>"#,
        (LEFT + WIDTH - RIGHT) / 2.0,
        escape(title)
    );
}

fn axes(out: &mut String, frame: &Frame, xlabel: &str, ylabel: &str, x_ticks: bool) {
    let (x0, x1) = (LEFT, WIDTH - RIGHT);
    let (y0, y1) = (HEIGHT - BOTTOM, TOP);
    let _ = writeln!(
        out,
        r#"<g class="axes" stroke="black" fill="none"><line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}"/><line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}"/></g>"#
    );
    for i in 0..=4 {
        let v = frame.y.0 + (frame.y.1 - frame.y.0) * i as f64 / 4.0;
        let y = frame.py(v);
        let _ = writeln!(
            out,
            r#"<line x1="{}" y1="{y:.2}" x2="{x0}" y2="{y:.2}" stroke="black"/><text x="{}" y="{:.2}" text-anchor="end">{}</text>"#,
            x0 - 5.0,
            x0 - 8.0,
            y + 4.0,
            tick(v)
        );
        if x_ticks {
            let v = frame.x.0 + (frame.x.1 - frame.x.0) * i as f64 / 4.0;
            let x = frame.px(v);
            let _ = writeln!(
                out,
                r#"<line x1="{x:.2}" y1="{y0}" x2="{x:.2}" y2="{}" stroke="black"/><text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"#,
                y0 + 5.0,
                y0 + 20.0,
                tick(v)
            );
        }
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>
<text x="20" y="{}" text-anchor="middle" transform="rotate(-90 20 {})">{}</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 15.0,
        escape(xlabel),
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(ylabel)
    );
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn legend(out: &mut String, index: usize, label: &str) {
    let y = TOP + 10.0 + 20.0 * index as f64;
    let x = WIDTH - RIGHT + 15.0;
    let _ = writeln!(
        out,
        r#"<g class="legend"><line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{}" stroke-width="2"/><text x="{}" y="{}">{}</text></g>"#,
        x + 20.0,
        COLORS[index % COLORS.len()],
        x + 26.0,
        y + 4.0,
        escape(label)
    );
}

pub fn line_plot(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> String {
    let all = || series.iter().flat_map(|s| s.points.iter());
    let frame = Frame {
        x: range(all().map(|p| p.0)),
        y: range(all().map(|p| p.1)),
    };
    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, &frame, xlabel, ylabel, true);
    for (i, s) in series.iter().enumerate() {
        let points: Vec<String> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", frame.px(x), frame.py(y)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline class="series" data-label="{}" fill="none" stroke="{}" stroke-width="2" points="{}"/>"#,
            escape(&s.label),
            COLORS[i % COLORS.len()],
            points.join(" ")
        );
        legend(&mut out, i, &s.label);
    }
    out.push_str("</svg>\n");
    out
}

/// Median and quartiles by linear interpolation between order statistics.
pub fn quartiles(values: &[f64]) -> Option<[f64; 5]> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let (i, f) = (pos.floor() as usize, pos.fract());
        if i + 1 < v.len() {
            v[i] * (1.0 - f) + v[i + 1] * f
        } else {
            v[i]
        }
    };
    Some([v[0], q(0.25), q(0.5), q(0.75), v[v.len() - 1]])
}

pub fn box_plot(title: &str, ylabel: &str, groups: &[(String, Vec<f64>)]) -> String {
    let frame = Frame {
        x: (0.0, groups.len().max(1) as f64),
        y: range(groups.iter().flat_map(|g| g.1.iter().copied())),
    };
    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, &frame, "", ylabel, false);
    let slot = (WIDTH - LEFT - RIGHT) / groups.len().max(1) as f64;
    for (i, (label, values)) in groups.iter().enumerate() {
        let Some([min, q1, med, q3, max]) = quartiles(values) else {
            continue;
        };
        let color = COLORS[i % COLORS.len()];
        let cx = LEFT + slot * (i as f64 + 0.5);
        let half = (slot * 0.3).min(40.0);
        let _ = writeln!(
            out,
            r#"<g class="box" data-label="{}" stroke="{color}" fill="none" stroke-width="2"><line x1="{cx:.2}" y1="{:.2}" x2="{cx:.2}" y2="{:.2}"/><rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}"/><line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}"/><line x1="{cx:.2}" y1="{:.2}" x2="{cx:.2}" y2="{:.2}"/></g>"#,
            escape(label),
            frame.py(max),
            frame.py(q3),
            cx - half,
            frame.py(q3),
            2.0 * half,
            frame.py(q1) - frame.py(q3),
            cx - half,
            frame.py(med),
            cx + half,
            frame.py(med),
            frame.py(q1),
            frame.py(min),
        );
        let _ = writeln!(
            out,
            r#"<text x="{cx:.2}" y="{}" text-anchor="middle">{}</text>"#,
            HEIGHT - BOTTOM + 20.0,
            escape(label)
        );
        legend(&mut out, i, label);
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quartiles_of_known_sample() {
        assert_eq!(quartiles(&[3.0, 1.0, 2.0, 5.0, 4.0]), Some([1.0, 2.0, 3.0, 4.0, 5.0]));
        assert_eq!(quartiles(&[1.0, 2.0]).unwrap()[2], 1.5);
        assert_eq!(quartiles(&[]), None);
    }

    #[test]
    fn constant_range_is_widened() {
        let (lo, hi) = range([2.0, 2.0].into_iter());
        assert!(lo < 2.0 && hi > 2.0);
        assert_eq!(range(std::iter::empty()), (0.0, 1.0));
    }

    #[test]
    fn labels_are_escaped() {
        let s = line_plot("a<b", "x", "y", &[Series { label: "r&d".into(), points: vec![(0.0, 1.0)] }]);
        assert!(s.contains("a&lt;b") && s.contains("r&amp;d"));
        assert_eq!(s.matches("<polyline").count(), 1);
    }

    #[test]
    fn points_map_to_plot_area() {
        let s = line_plot("t", "x", "y", &[Series { label: "a".into(), points: vec![(0.0, 0.0), (1.0, 1.0)] }]);
        let expected = format!("points=\"{LEFT:.2},{:.2} {:.2},{TOP:.2}\"", HEIGHT - BOTTOM, WIDTH - RIGHT);
        assert!(s.contains(&expected), "{s}");
    }
}
