//! Byte-stable SVG plot emission (line charts and grouped histograms).
//!
//! Hand-rolled on purpose: the reports only need simple, deterministic
//! figures, and fixed-precision formatting keeps re-emission byte-identical.

use std::fmt::Write as _;

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub color: &'static str,
}

const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 30.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 60.0;

pub const SERIES_COLORS: [&str; 4] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728"];

fn fmt(v: f64) -> String {
    format!("{v:.3}")
}

fn svg_header(title: &str) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{title}</text>\n",
        W / 2.0
    );
    s
}

struct Axes {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Axes {
    fn x(&self, v: f64) -> f64 {
        let span = (self.x_max - self.x_min).max(1e-12);
        MARGIN_L + (v - self.x_min) / span * (W - MARGIN_L - MARGIN_R)
    }

    fn y(&self, v: f64) -> f64 {
        let span = (self.y_max - self.y_min).max(1e-12);
        H - MARGIN_B - (v - self.y_min) / span * (H - MARGIN_T - MARGIN_B)
    }
}

fn draw_frame(s: &mut String, axes: &Axes, x_label: &str, y_label: &str) {
    let x0 = MARGIN_L;
    let x1 = W - MARGIN_R;
    let y0 = H - MARGIN_B;
    let y1 = MARGIN_T;
    let _ = write!(
        s,
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n"
    );
    for i in 0..=4 {
        let fy = axes.y_min + (axes.y_max - axes.y_min) * i as f64 / 4.0;
        let py = axes.y(fy);
        let _ = write!(
            s,
            "<line x1=\"{}\" y1=\"{py}\" x2=\"{x0}\" y2=\"{py}\" stroke=\"black\"/>\n\
             <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{}</text>\n",
            x0 - 5.0,
            x0 - 8.0,
            py + 4.0,
            fmt(fy)
        );
    }
    let _ = write!(
        s,
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\">{x_label}</text>\n\
         <text x=\"16\" y=\"{}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{y_label}</text>\n",
        (MARGIN_L + W - MARGIN_R) / 2.0,
        H - 18.0,
        H / 2.0,
        H / 2.0
    );
}

/// A line chart with one polyline and point markers per series.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let mut s = svg_header(title);
    let xs: Vec<f64> = series.iter().flat_map(|sr| sr.points.iter().map(|p| p.0)).collect();
    let ys: Vec<f64> = series.iter().flat_map(|sr| sr.points.iter().map(|p| p.1)).collect();
    let axes = Axes {
        x_min: xs.iter().cloned().fold(f64::INFINITY, f64::min).min(0.0),
        x_max: xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(1.0),
        y_min: 0.0,
        y_max: ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(1e-6) * 1.1,
    };
    draw_frame(&mut s, &axes, x_label, y_label);
    for (i, sr) in series.iter().enumerate() {
        let mut path = String::new();
        for (j, &(x, y)) in sr.points.iter().enumerate() {
            let _ = write!(
                path,
                "{}{},{}",
                if j == 0 { "M" } else { " L" },
                fmt(axes.x(x)),
                fmt(axes.y(y))
            );
        }
        let _ = write!(
            s,
            "<path d=\"{path}\" fill=\"none\" stroke=\"{}\" stroke-width=\"2\"/>\n",
            sr.color
        );
        for &(x, y) in &sr.points {
            let _ = write!(
                s,
                "<circle cx=\"{}\" cy=\"{}\" r=\"3.5\" fill=\"{}\"/>\n",
                fmt(axes.x(x)),
                fmt(axes.y(y)),
                sr.color
            );
        }
        let ly = MARGIN_T + 16.0 * i as f64;
        let _ = write!(
            s,
            "<rect x=\"{}\" y=\"{}\" width=\"12\" height=\"12\" fill=\"{}\"/>\n\
             <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\">{}</text>\n",
            W - MARGIN_R - 150.0,
            ly,
            sr.color,
            W - MARGIN_R - 132.0,
            ly + 10.0,
            sr.label
        );
    }
    s.push_str("</svg>\n");
    s
}

/// A grouped histogram: one group of bars per x category, one bar per series.
pub fn grouped_histogram(
    title: &str,
    x_label: &str,
    y_label: &str,
    categories: &[String],
    series: &[(String, &'static str, Vec<f64>)],
) -> String {
    let mut s = svg_header(title);
    let y_max = series
        .iter()
        .flat_map(|(_, _, v)| v.iter().cloned())
        .fold(f64::NEG_INFINITY, f64::max)
        .max(1e-6)
        * 1.15;
    let axes = Axes { x_min: 0.0, x_max: categories.len() as f64, y_min: 0.0, y_max };
    draw_frame(&mut s, &axes, x_label, y_label);
    let group_w = (W - MARGIN_L - MARGIN_R) / categories.len() as f64;
    let bar_w = group_w * 0.8 / series.len() as f64;
    for (ci, cat) in categories.iter().enumerate() {
        for (si, (_, color, values)) in series.iter().enumerate() {
            let v = values.get(ci).copied().unwrap_or(0.0);
            let x = MARGIN_L + ci as f64 * group_w + group_w * 0.1 + si as f64 * bar_w;
            let y = axes.y(v);
            let _ = write!(
                s,
                "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{color}\"/>\n",
                fmt(x),
                fmt(y),
                fmt(bar_w),
                fmt((H - MARGIN_B - y).max(0.0))
            );
        }
        let _ = write!(
            s,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{cat}</text>\n",
            fmt(MARGIN_L + (ci as f64 + 0.5) * group_w),
            H - MARGIN_B + 18.0
        );
    }
    for (si, (label, color, _)) in series.iter().enumerate() {
        let ly = MARGIN_T + 16.0 * si as f64;
        let _ = write!(
            s,
            "<rect x=\"{}\" y=\"{}\" width=\"12\" height=\"12\" fill=\"{color}\"/>\n\
             <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\">{label}</text>\n",
            W - MARGIN_R - 150.0,
            ly,
            W - MARGIN_R - 132.0,
            ly + 10.0
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn emission_is_byte_stable() {
        let series = vec![Series {
            label: "conditioned".into(),
            points: vec![(4.0, 0.01), (12.0, 0.2), (60.0, 0.8)],
            color: SERIES_COLORS[0],
        }];
        let a = line_chart("t", "diversity", "frequency", &series);
        let b = line_chart("t", "diversity", "frequency", &series);
        assert_eq!(a, b);
        assert!(a.starts_with("<svg"));
        assert!(a.ends_with("</svg>\n"));
    }

    #[test]
    fn histogram_handles_all_zero() {
        let cats: Vec<String> = (1..=5).map(|i| i.to_string()).collect();
        let svg = grouped_histogram(
            "h",
            "tokens",
            "count",
            &cats,
            &[("common".into(), SERIES_COLORS[0], vec![0.0; 5])],
        );
        assert!(svg.contains("</svg>"));
    }
}
