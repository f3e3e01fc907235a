//! Minimal SVG emission: a document buffer and framed axes with linear or
//! log-10 value scales.

use std::fmt::Write;

pub const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

/// A line segment between two points.
pub type Segment = ((f64, f64), (f64, f64));

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn pts(p: &[(f64, f64)]) -> String {
    let mut s = String::new();
    for (x, y) in p {
        let _ = write!(s, "{x:.2},{y:.2} ");
    }
    s.trim_end().to_string()
}

pub struct Svg {
    width: f64,
    height: f64,
    body: String,
}

impl Svg {
    pub fn new(width: f64, height: f64) -> Self {
        let mut s = Self {
            width,
            height,
            body: String::new(),
        };
        let _ = writeln!(
            s.body,
            r#"<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>"#
        );
        s
    }

    pub fn line(&mut self, a: (f64, f64), b: (f64, f64), stroke: &str, width: f64) {
        let _ = writeln!(
            self.body,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{stroke}" stroke-width="{width}"/>"#,
            a.0, a.1, b.0, b.1
        );
    }

    pub fn polyline(&mut self, p: &[(f64, f64)], stroke: &str, width: f64, dash: Option<&str>) {
        if p.is_empty() {
            return;
        }
        let dash = dash
            .map(|d| format!(r#" stroke-dasharray="{d}""#))
            .unwrap_or_default();
        let _ = writeln!(
            self.body,
            r#"<polyline points="{}" fill="none" stroke="{stroke}" stroke-width="{width}"{dash}/>"#,
            pts(p)
        );
    }

    pub fn polygon(&mut self, p: &[(f64, f64)], fill: &str, opacity: f64) {
        if p.is_empty() {
            return;
        }
        let _ = writeln!(
            self.body,
            r#"<polygon points="{}" fill="{fill}" fill-opacity="{opacity}" stroke="none"/>"#,
            pts(p)
        );
    }

    pub fn circle(&mut self, c: (f64, f64), r: f64, fill: &str, opacity: f64) {
        let _ = writeln!(
            self.body,
            r#"<circle cx="{:.2}" cy="{:.2}" r="{r}" fill="{fill}" fill-opacity="{opacity}"/>"#,
            c.0, c.1
        );
    }

    /// Disjoint segments as one path.
    pub fn segments(&mut self, segs: &[Segment], stroke: &str, width: f64) {
        if segs.is_empty() {
            return;
        }
        let mut d = String::new();
        for (a, b) in segs {
            let _ = write!(d, "M{:.2} {:.2}L{:.2} {:.2}", a.0, a.1, b.0, b.1);
        }
        let _ = writeln!(
            self.body,
            r#"<path d="{d}" fill="none" stroke="{stroke}" stroke-width="{width}"/>"#
        );
    }

    pub fn text(&mut self, at: (f64, f64), s: &str, size: f64, anchor: &str) {
        let _ = writeln!(
            self.body,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="{size}" text-anchor="{anchor}">{}</text>"#,
            at.0,
            at.1,
            esc(s)
        );
    }

    pub fn rect(&mut self, at: (f64, f64), size: (f64, f64), stroke: &str) {
        let _ = writeln!(
            self.body,
            r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="{stroke}"/>"#,
            at.0, at.1, size.0, size.1
        );
    }

    pub fn finish(self) -> String {
        format!(
            "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n\
             <svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n{body}</svg>\n",
            w = self.width,
            h = self.height,
            body = self.body
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    Linear,
    Log,
}

/// Padded `[min, max]` of the finite values (positive ones on a log scale).
pub fn range(values: impl IntoIterator<Item = f64>, scale: Scale) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values {
        if v.is_finite() && (scale == Scale::Linear || v > 0.0) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if !lo.is_finite() {
        return match scale {
            Scale::Linear => (0.0, 1.0),
            Scale::Log => (0.1, 1.0),
        };
    }
    match scale {
        Scale::Linear => {
            let pad = if hi > lo {
                0.05 * (hi - lo)
            } else {
                0.5 * lo.abs().max(1.0)
            };
            (lo - pad, hi + pad)
        }
        Scale::Log => {
            let (a, b) = (lo.log10().floor(), hi.log10().ceil());
            let b = if b <= a { a + 1.0 } else { b };
            (10f64.powf(a), 10f64.powf(b))
        }
    }
}

fn linear_ticks(lo: f64, hi: f64) -> Vec<f64> {
    let raw = (hi - lo) / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + 1e-9 * step {
        out.push(if t.abs() < 1e-12 * step { 0.0 } else { t });
        t += step;
    }
    out
}

fn fmt_tick(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-3..1e4).contains(&a) {
        format!("{v:.0e}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

/// A framed panel mapping data coordinates into a region of an [`Svg`].
pub struct Axes {
    origin: (f64, f64),
    size: (f64, f64),
    xr: (f64, f64),
    yr: (f64, f64),
    yscale: Scale,
    legend: Vec<(String, String, bool)>,
}

impl Axes {
    /// Draws frame, ticks and labels.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        svg: &mut Svg,
        origin: (f64, f64),
        size: (f64, f64),
        xr: (f64, f64),
        yr: (f64, f64),
        yscale: Scale,
        title: &str,
        labels: (&str, &str),
    ) -> Self {
        let ax = Self {
            origin,
            size,
            xr,
            yr,
            yscale,
            legend: Vec::new(),
        };
        svg.rect(origin, size, "#333");
        svg.text(
            (origin.0 + size.0 / 2.0, origin.1 - 8.0),
            title,
            13.0,
            "middle",
        );
        svg.text(
            (origin.0 + size.0 / 2.0, origin.1 + size.1 + 34.0),
            labels.0,
            11.0,
            "middle",
        );
        svg.text(
            (origin.0 - 48.0, origin.1 + size.1 / 2.0),
            labels.1,
            11.0,
            "middle",
        );
        let bottom = origin.1 + size.1;
        for t in linear_ticks(xr.0, xr.1) {
            let x = ax.px(t);
            svg.line((x, bottom), (x, bottom + 4.0), "#333", 1.0);
            svg.text((x, bottom + 16.0), &fmt_tick(t), 10.0, "middle");
        }
        let yt: Vec<f64> = match yscale {
            Scale::Linear => linear_ticks(yr.0, yr.1),
            Scale::Log => {
                let (a, b) = (yr.0.log10().round() as i32, yr.1.log10().round() as i32);
                (a..=b).map(|e| 10f64.powi(e)).collect()
            }
        };
        for t in yt {
            let y = ax.py(t);
            svg.line((origin.0 - 4.0, y), (origin.0, y), "#333", 1.0);
            svg.line((origin.0, y), (origin.0 + size.0, y), "#eee", 0.5);
            svg.text((origin.0 - 6.0, y + 3.5), &fmt_tick(t), 10.0, "end");
        }
        ax
    }

    pub fn px(&self, x: f64) -> f64 {
        self.origin.0 + (x - self.xr.0) / (self.xr.1 - self.xr.0) * self.size.0
    }

    pub fn py(&self, y: f64) -> f64 {
        let f = match self.yscale {
            Scale::Linear => (y - self.yr.0) / (self.yr.1 - self.yr.0),
            Scale::Log => {
                let y = y.max(self.yr.0 * 1e-3);
                (y.log10() - self.yr.0.log10()) / (self.yr.1.log10() - self.yr.0.log10())
            }
        };
        self.origin.1 + (1.0 - f) * self.size.1
    }

    fn map(&self, p: &[(f64, f64)]) -> Vec<(f64, f64)> {
        p.iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| (self.px(x), self.py(y)))
            .collect()
    }

    pub fn line(
        &mut self,
        svg: &mut Svg,
        p: &[(f64, f64)],
        color: &str,
        label: &str,
        dashed: bool,
    ) {
        let dash = dashed.then_some("6 4");
        svg.polyline(&self.map(p), color, 1.8, dash);
        self.legend
            .push((label.to_string(), color.to_string(), dashed));
    }

    /// Shaded region between `lo` and `hi` over `x`.
    pub fn band(&self, svg: &mut Svg, x: &[f64], lo: &[f64], hi: &[f64], color: &str) {
        let mut poly: Vec<(f64, f64)> = x.iter().zip(hi).map(|(a, b)| (*a, *b)).collect();
        poly.extend(x.iter().zip(lo).rev().map(|(a, b)| (*a, *b)));
        svg.polygon(&self.map(&poly), color, 0.2);
    }

    pub fn scatter(&self, svg: &mut Svg, p: &[(f64, f64)], color: &str) {
        for q in self.map(p) {
            svg.circle(q, 1.4, color, 0.5);
        }
    }

    pub fn segments(&self, svg: &mut Svg, segs: &[Segment], color: &str) {
        let m: Vec<_> = segs
            .iter()
            .map(|(a, b)| ((self.px(a.0), self.py(a.1)), (self.px(b.0), self.py(b.1))))
            .collect();
        svg.segments(&m, color, 1.2);
    }

    pub fn add_legend(&mut self, label: &str, color: &str, dashed: bool) {
        self.legend
            .push((label.to_string(), color.to_string(), dashed));
    }

    pub fn draw_legend(&self, svg: &mut Svg) {
        let x = self.origin.0 + self.size.0 - 120.0;
        for (k, (label, color, dashed)) in self.legend.iter().enumerate() {
            let y = self.origin.1 + 14.0 + 14.0 * k as f64;
            svg.polyline(
                &[(x, y), (x + 18.0, y)],
                color,
                2.0,
                dashed.then_some("6 4"),
            );
            svg.text((x + 22.0, y + 3.5), label, 10.0, "start");
        }
    }
}
