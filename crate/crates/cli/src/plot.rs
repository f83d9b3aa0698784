//! Minimal SVG figures: polyline, scatter and histogram-bar primitives on a
//! fixed canvas with automatic ticks and a stacked legend.
//!
//! The figures are diagnostics, not publication graphics — everything is
//! rendered with a few hand-built SVG elements and no dependencies, and the
//! output is a pure function of the inputs, so reruns produce identical
//! bytes.

use std::io;
use std::path::Path;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_LEFT: f64 = 64.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 36.0;
const MARGIN_BOTTOM: f64 = 48.0;
const TICKS: usize = 5;

/// A single-panel figure in data coordinates.
pub struct Figure {
    title: String,
    x_label: String,
    y_label: String,
    x_range: (f64, f64),
    y_range: (f64, f64),
    shapes: Vec<String>,
    legend: Vec<(String, String)>,
}

impl Figure {
    /// New figure over the given data ranges (degenerate ranges are padded).
    pub fn new(
        title: &str,
        x_label: &str,
        y_label: &str,
        x_range: (f64, f64),
        y_range: (f64, f64),
    ) -> Self {
        Figure {
            title: title.to_owned(),
            x_label: x_label.to_owned(),
            y_label: y_label.to_owned(),
            x_range: pad_range(x_range),
            y_range: pad_range(y_range),
            shapes: Vec::new(),
            legend: Vec::new(),
        }
    }

    fn x_pix(&self, x: f64) -> f64 {
        let (lo, hi) = self.x_range;
        MARGIN_LEFT + (x - lo) / (hi - lo) * (WIDTH - MARGIN_LEFT - MARGIN_RIGHT)
    }

    fn y_pix(&self, y: f64) -> f64 {
        let (lo, hi) = self.y_range;
        HEIGHT - MARGIN_BOTTOM - (y - lo) / (hi - lo) * (HEIGHT - MARGIN_TOP - MARGIN_BOTTOM)
    }

    /// Polyline through `points` in data order.
    pub fn line(&mut self, points: &[(f64, f64)], color: &str, label: &str) {
        if points.is_empty() {
            return;
        }
        let path: Vec<String> = points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", self.x_pix(x), self.y_pix(y)))
            .collect();
        self.shapes.push(format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.6\"/>",
            path.join(" ")
        ));
        self.remember(label, color);
    }

    /// Small filled circles at `points`.
    pub fn scatter(&mut self, points: &[(f64, f64)], color: &str, label: &str) {
        for &(x, y) in points {
            self.shapes.push(format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"1.8\" fill=\"{color}\" fill-opacity=\"0.55\"/>",
                self.x_pix(x),
                self.y_pix(y)
            ));
        }
        self.remember(label, color);
    }

    /// Bars of the given data-space width centered on each `(x, height)`,
    /// rising from zero.
    pub fn bars(&mut self, points: &[(f64, f64)], width: f64, color: &str, label: &str) {
        let zero = self.y_pix(0.0);
        for &(x, height) in points {
            let top = self.y_pix(height);
            let left = self.x_pix(x - width / 2.0);
            let right = self.x_pix(x + width / 2.0);
            self.shapes.push(format!(
                "<rect x=\"{left:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" \
                 fill=\"{color}\" fill-opacity=\"0.45\"/>",
                top.min(zero),
                (right - left).abs(),
                (zero - top).abs()
            ));
        }
        self.remember(label, color);
    }

    fn remember(&mut self, label: &str, color: &str) {
        if !label.is_empty() && !self.legend.iter().any(|(l, _)| l == label) {
            self.legend.push((label.to_owned(), color.to_owned()));
        }
    }

    /// Render the complete SVG document.
    pub fn render(&self) -> String {
        let mut svg = String::new();
        svg.push_str(&format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" \
             font-family=\"sans-serif\" font-size=\"12\">\n"
        ));
        svg.push_str(&format!(
            "<rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
            WIDTH / 2.0,
            escape(&self.title)
        ));

        // Ticks, grid and labels.
        for i in 0..TICKS {
            let t = i as f64 / (TICKS - 1) as f64;
            let x = self.x_range.0 + t * (self.x_range.1 - self.x_range.0);
            let y = self.y_range.0 + t * (self.y_range.1 - self.y_range.0);
            let xp = self.x_pix(x);
            let yp = self.y_pix(y);
            svg.push_str(&format!(
                "<line x1=\"{xp:.2}\" y1=\"{:.2}\" x2=\"{xp:.2}\" y2=\"{:.2}\" \
                 stroke=\"#ddd\" stroke-width=\"0.6\"/>\n",
                MARGIN_TOP,
                HEIGHT - MARGIN_BOTTOM
            ));
            svg.push_str(&format!(
                "<line x1=\"{:.2}\" y1=\"{yp:.2}\" x2=\"{:.2}\" y2=\"{yp:.2}\" \
                 stroke=\"#ddd\" stroke-width=\"0.6\"/>\n",
                MARGIN_LEFT,
                WIDTH - MARGIN_RIGHT
            ));
            svg.push_str(&format!(
                "<text x=\"{xp:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>\n",
                HEIGHT - MARGIN_BOTTOM + 16.0,
                tick(x)
            ));
            svg.push_str(&format!(
                "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>\n",
                MARGIN_LEFT - 6.0,
                yp + 4.0,
                tick(y)
            ));
        }

        for shape in &self.shapes {
            svg.push_str(shape);
            svg.push('\n');
        }

        // Frame above the data so bars do not overpaint it.
        svg.push_str(&format!(
            "<rect x=\"{MARGIN_LEFT}\" y=\"{MARGIN_TOP}\" width=\"{:.1}\" height=\"{:.1}\" \
             fill=\"none\" stroke=\"#333\" stroke-width=\"1\"/>\n",
            WIDTH - MARGIN_LEFT - MARGIN_RIGHT,
            HEIGHT - MARGIN_TOP - MARGIN_BOTTOM
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
            (MARGIN_LEFT + WIDTH - MARGIN_RIGHT) / 2.0,
            HEIGHT - 10.0,
            escape(&self.x_label)
        ));
        svg.push_str(&format!(
            "<text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.1})\">{}</text>\n",
            (MARGIN_TOP + HEIGHT - MARGIN_BOTTOM) / 2.0,
            (MARGIN_TOP + HEIGHT - MARGIN_BOTTOM) / 2.0,
            escape(&self.y_label)
        ));

        for (i, (label, color)) in self.legend.iter().enumerate() {
            let y = MARGIN_TOP + 14.0 + 16.0 * i as f64;
            let x = WIDTH - MARGIN_RIGHT - 150.0;
            svg.push_str(&format!(
                "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{color}\"/>\n",
                y - 9.0
            ));
            svg.push_str(&format!(
                "<text x=\"{:.1}\" y=\"{y:.1}\">{}</text>\n",
                x + 14.0,
                escape(label)
            ));
        }

        svg.push_str("</svg>\n");
        svg
    }

    /// Render and write to `path`.
    pub fn save(&self, path: &Path) -> io::Result<()> {
        std::fs::write(path, self.render())
    }
}

/// The inclusive min/max of an iterator of finite values, padded 5% each
/// side; empty or degenerate input falls back to a unit interval.
pub fn data_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo > hi {
        return (0.0, 1.0);
    }
    let span = (hi - lo).max(1e-12);
    (lo - 0.05 * span, hi + 0.05 * span)
}

fn pad_range((lo, hi): (f64, f64)) -> (f64, f64) {
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, lo + 0.5)
    }
}

fn tick(v: f64) -> String {
    if v == 0.0 {
        return "0".to_owned();
    }
    let magnitude = v.abs();
    if !(1e-3..1e4).contains(&magnitude) {
        return format!("{v:.1e}");
    }
    let mut s = format!("{v:.3}");
    while s.ends_with('0') {
        s.pop();
    }
    if s.ends_with('.') {
        s.pop();
    }
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
