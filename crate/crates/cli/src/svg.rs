//! Minimal SVG charts built from path, rect, line and text primitives.

use std::fmt::Write;

use tsem::Tensor;

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;

pub const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// A chart with linear axes over `x` and `y`.
pub struct Chart {
    body: String,
    x: (f64, f64),
    y: (f64, f64),
}

impl Chart {
    pub fn new(title: &str, xlabel: &str, ylabel: &str, x: (f64, f64), y: (f64, f64)) -> Self {
        let x = if x.1 > x.0 { x } else { (x.0 - 0.5, x.0 + 0.5) };
        let y = if y.1 > y.0 { y } else { (y.0 - 0.5, y.0 + 0.5) };
        let mut c = Self {
            body: String::new(),
            x,
            y,
        };
        let (x0, x1, y0, y1) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
        let _ = write!(
            c.body,
            r#"<rect x="0" y="0" width="{W}" height="{H}" fill="white"/><text x="{}" y="24" text-anchor="middle" font-size="16">{}</text>"#,
            W / 2.0,
            esc(title)
        );
        let _ = write!(
            c.body,
            r#"<path d="M{x0},{y0}V{y1}H{x1}" fill="none" stroke="black"/><text x="{}" y="{}" text-anchor="middle" font-size="13">{}</text><text x="18" y="{}" text-anchor="middle" font-size="13" transform="rotate(-90 18 {})">{}</text>"#,
            (x0 + x1) / 2.0,
            H - 15.0,
            esc(xlabel),
            (y0 + y1) / 2.0,
            (y0 + y1) / 2.0,
            esc(ylabel)
        );
        for i in 0..=5 {
            let f = i as f64 / 5.0;
            let (vx, vy) = (c.x.0 + f * (c.x.1 - c.x.0), c.y.0 + f * (c.y.1 - c.y.0));
            let (px, py) = (c.px(vx), c.py(vy));
            let _ = write!(
                c.body,
                r#"<line x1="{px}" y1="{y1}" x2="{px}" y2="{}" stroke="black"/><text x="{px}" y="{}" text-anchor="middle" font-size="11">{}</text>"#,
                y1 + 5.0,
                y1 + 18.0,
                tick(vx)
            );
            let _ = write!(
                c.body,
                r#"<line x1="{}" y1="{py}" x2="{x0}" y2="{py}" stroke="black"/><text x="{}" y="{}" text-anchor="end" font-size="11">{}</text>"#,
                x0 - 5.0,
                x0 - 8.0,
                py + 4.0,
                tick(vy)
            );
        }
        c
    }

    pub fn px(&self, v: f64) -> f64 {
        LEFT + (v - self.x.0) / (self.x.1 - self.x.0) * (W - LEFT - RIGHT)
    }

    pub fn py(&self, v: f64) -> f64 {
        H - BOTTOM - (v - self.y.0) / (self.y.1 - self.y.0) * (H - TOP - BOTTOM)
    }

    pub fn polyline(&mut self, pts: &[(f64, f64)], color: &str, label: &str) {
        let d: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", self.px(x), self.py(y)))
            .collect();
        let _ = write!(
            self.body,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"><title>{}</title></polyline>"#,
            d.join(" "),
            esc(label)
        );
    }

    pub fn point(&mut self, x: f64, y: f64, color: &str, label: &str) {
        let (px, py) = (self.px(x), self.py(y));
        let _ = write!(
            self.body,
            r#"<circle cx="{px:.2}" cy="{py:.2}" r="5" fill="{color}"/><text x="{:.2}" y="{:.2}" font-size="11">{}</text>"#,
            px + 7.0,
            py - 7.0,
            esc(label)
        );
    }

    /// Bar from the x-axis baseline up to `y`, centred at `x`.
    pub fn bar(&mut self, x: f64, width: f64, y: f64, color: &str, label: &str) {
        let (l, r) = (self.px(x - width / 2.0), self.px(x + width / 2.0));
        let (top, base) = (self.py(y), self.py(self.y.0));
        let _ = write!(
            self.body,
            r#"<rect x="{l:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="{color}"><title>{}</title></rect>"#,
            r - l,
            (base - top).max(0.0),
            esc(label)
        );
    }

    pub fn hline(&mut self, y: f64, color: &str, label: &str) {
        let py = self.py(y);
        let _ = write!(
            self.body,
            r#"<line x1="{LEFT}" y1="{py:.2}" x2="{}" y2="{py:.2}" stroke="{color}" stroke-dasharray="6 4"/><text x="{}" y="{:.2}" text-anchor="end" font-size="11" fill="{color}">{}</text>"#,
            W - RIGHT,
            W - RIGHT,
            py - 4.0,
            esc(label)
        );
    }

    /// Text under the x axis at data coordinate `x`, rotated for long labels.
    pub fn xlabel_at(&mut self, x: f64, label: &str) {
        let px = self.px(x);
        let py = H - BOTTOM + 30.0;
        let _ = write!(
            self.body,
            r#"<text x="{px:.2}" y="{py}" text-anchor="end" font-size="10" transform="rotate(-30 {px:.2} {py})">{}</text>"#,
            esc(label)
        );
    }

    pub fn legend(&mut self, entries: &[(&str, &str)]) {
        for (i, (color, label)) in entries.iter().enumerate() {
            let y = TOP + 8.0 + 16.0 * i as f64;
            let x = W - RIGHT - 170.0;
            let _ = write!(
                self.body,
                r#"<rect x="{x}" y="{}" width="10" height="10" fill="{color}"/><text x="{}" y="{}" font-size="11">{}</text>"#,
                y - 9.0,
                x + 14.0,
                y,
                esc(label)
            );
        }
    }

    pub fn raw(&mut self, s: &str) {
        self.body.push_str(s);
    }

    pub fn finish(self) -> String {
        format!(
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif">{}</svg>
"#,
            self.body
        )
    }
}

fn tick(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.to_string()
    }
}

/// Saliency heat map of a (D, T) map with the instance's series drawn on top,
/// one band per feature.
pub fn overlay(title: &str, instance: &Tensor, map: &Tensor) -> String {
    let (d, t) = (instance.shape()[0], instance.shape()[1]);
    let (lo, hi) = (map.min(), map.max());
    let band = (H - TOP - BOTTOM) / d as f64;
    let cell = (W - LEFT - RIGHT) / t as f64;
    let mut s = String::new();
    let _ = write!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif"><rect x="0" y="0" width="{W}" height="{H}" fill="white"/><text x="{}" y="24" text-anchor="middle" font-size="16">{}</text>"#,
        W / 2.0,
        esc(title)
    );
    for r in 0..d {
        let y0 = TOP + r as f64 * band;
        for c in 0..t {
            let v = if hi > lo {
                (map.get(&[r, c]) - lo) / (hi - lo)
            } else {
                0.0
            };
            let _ = write!(
                s,
                r#"<rect x="{:.2}" y="{y0:.2}" width="{:.2}" height="{band:.2}" fill="rgb(255,{g},{g})"/>"#,
                LEFT + c as f64 * cell,
                cell + 0.05,
                g = (255.0 * (1.0 - v)).round()
            );
        }
        let row = instance.row(r);
        let (a, b) = row
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                (a.min(v), b.max(v))
            });
        let span = if b > a { b - a } else { 1.0 };
        let pts: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, &v)| {
                format!(
                    "{:.2},{:.2}",
                    LEFT + (c as f64 + 0.5) * cell,
                    y0 + band * (0.9 - 0.8 * (v - a) / span)
                )
            })
            .collect();
        let _ = write!(
            s,
            r#"<polyline points="{}" fill="none" stroke="black" stroke-width="1.2"/><text x="{}" y="{:.2}" text-anchor="end" font-size="11">f{r}</text>"#,
            pts.join(" "),
            LEFT - 6.0,
            y0 + band / 2.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="13">time</text></svg>"#,
        W / 2.0,
        H - 20.0
    );
    s
}
