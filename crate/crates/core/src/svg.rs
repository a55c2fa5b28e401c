//! Minimal SVG writer for 2D panels.
//!
//! Every panel uses a fixed 800×800 viewBox. The data range is fitted to the
//! content with a 5% margin on each side; both axes share one scale so arrows
//! and distances are not distorted.
//!
//! Class colors: class 0 blue `#1f77b4`, class 1 red `#d62728`, then green,
//! purple, orange and brown, cycling. Unconditional items are gray `#555555`.

use std::fmt::Write as _;

pub const VIEW: f64 = 800.0;
pub const MARGIN: f64 = 0.05;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
pub const UNCONDITIONAL_COLOR: &str = "#555555";

/// Color for a class label, or the unconditional gray.
pub fn class_color(class: Option<usize>) -> &'static str {
    match class {
        Some(c) => PALETTE[c % PALETTE.len()],
        None => UNCONDITIONAL_COLOR,
    }
}

/// Data-to-pixel map fitted to a set of points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    x0: f64,
    y0: f64,
    span: f64,
}

impl Frame {
    /// Square frame covering every point with a 5% margin.
    pub fn fit(points: impl IntoIterator<Item = [f64; 2]>) -> Self {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in points {
            for j in 0..2 {
                if p[j].is_finite() {
                    lo[j] = lo[j].min(p[j]);
                    hi[j] = hi[j].max(p[j]);
                }
            }
        }
        if !lo[0].is_finite() {
            (lo, hi) = ([-1.0; 2], [1.0; 2]);
        }
        let mut span = (hi[0] - lo[0]).max(hi[1] - lo[1]);
        if span <= 1e-9 * (1.0 + lo[0].abs().max(lo[1].abs())) {
            // a single point: show a unit square around it
            span = 1.0;
        }
        let cx = 0.5 * (lo[0] + hi[0]);
        let cy = 0.5 * (lo[1] + hi[1]);
        let full = span / (1.0 - 2.0 * MARGIN);
        Self { x0: cx - 0.5 * full, y0: cy - 0.5 * full, span: full }
    }

    /// Pixel coordinates; y grows upward in data space.
    pub fn px(&self, p: [f64; 2]) -> (f64, f64) {
        let s = VIEW / self.span;
        ((p[0] - self.x0) * s, VIEW - (p[1] - self.y0) * s)
    }

    /// Pixels per data unit.
    pub fn scale(&self) -> f64 {
        VIEW / self.span
    }
}

/// An SVG document under construction.
pub struct Canvas {
    frame: Frame,
    body: String,
}

impl Canvas {
    pub fn new(frame: Frame) -> Self {
        Self { frame, body: String::new() }
    }

    pub fn frame(&self) -> Frame {
        self.frame
    }

    pub fn circle(&mut self, p: [f64; 2], r: f64, fill: &str, opacity: f64) {
        let (x, y) = self.frame.px(p);
        let _ = writeln!(
            self.body,
            r#"<circle cx="{x:.2}" cy="{y:.2}" r="{r:.2}" fill="{fill}" fill-opacity="{opacity:.2}"/>"#
        );
    }

    pub fn polyline(&mut self, pts: &[[f64; 2]], stroke: &str, width: f64, opacity: f64) {
        let coords: Vec<String> = pts
            .iter()
            .map(|&p| {
                let (x, y) = self.frame.px(p);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(
            self.body,
            r#"<polyline points="{}" fill="none" stroke="{stroke}" stroke-width="{width:.2}" stroke-opacity="{opacity:.2}"/>"#,
            coords.join(" ")
        );
    }

    /// Arrow from `p` along `v` (data units times `scale`), with a small head.
    pub fn arrow(&mut self, p: [f64; 2], v: [f64; 2], scale: f64, stroke: &str) {
        let (x1, y1) = self.frame.px(p);
        let (x2, y2) = self.frame.px([p[0] + scale * v[0], p[1] + scale * v[1]]);
        let _ = writeln!(
            self.body,
            r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="{stroke}" stroke-width="1.2"/>"#
        );
        let (dx, dy) = (x2 - x1, y2 - y1);
        let len = (dx * dx + dy * dy).sqrt();
        if len < 1e-6 {
            return;
        }
        let head = len.min(6.0);
        let (ux, uy) = (dx / len, dy / len);
        let left = (x2 - head * (ux + 0.5 * uy), y2 - head * (uy - 0.5 * ux));
        let right = (x2 - head * (ux - 0.5 * uy), y2 - head * (uy + 0.5 * ux));
        let _ = writeln!(
            self.body,
            r#"<polygon points="{x2:.2},{y2:.2} {:.2},{:.2} {:.2},{:.2}" fill="{stroke}"/>"#,
            left.0, left.1, right.0, right.1
        );
    }

    /// Small `+` marker.
    pub fn cross(&mut self, p: [f64; 2], size: f64, stroke: &str) {
        let (x, y) = self.frame.px(p);
        let _ = writeln!(
            self.body,
            r#"<path d="M{:.2} {y:.2}H{:.2}M{x:.2} {:.2}V{:.2}" stroke="{stroke}" stroke-width="1.5"/>"#,
            x - size,
            x + size,
            y - size,
            y + size
        );
    }

    /// Text anchored at a pixel position (not data coordinates).
    pub fn label(&mut self, x: f64, y: f64, text: &str) {
        let escaped = text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");
        let _ = writeln!(
            self.body,
            r##"<text x="{x:.2}" y="{y:.2}" font-family="sans-serif" font-size="16" fill="#222222">{escaped}</text>"##
        );
    }

    /// Raw SVG fragment, e.g. a nested panel.
    pub fn raw(&mut self, fragment: &str) {
        self.body.push_str(fragment);
    }

    pub fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {VIEW} {VIEW}\" width=\"{VIEW}\" height=\"{VIEW}\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            self.body
        )
    }

    /// The body wrapped in a group placed at `(x, y)` and scaled by `s`.
    pub fn into_group(self, x: f64, y: f64, s: f64) -> String {
        format!(
            "<g transform=\"translate({x:.2} {y:.2}) scale({s:.4})\">\n<rect width=\"{VIEW}\" height=\"{VIEW}\" fill=\"none\" stroke=\"#cccccc\"/>\n{}</g>\n",
            self.body
        )
    }
}
