//! Minimal SVG plots for the analysis reports.

use std::fmt::Write;

const W: f64 = 480.0;
const H: f64 = 320.0;
const PAD: f64 = 40.0;
const COLORS: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

struct Axes {
    x: (f64, f64),
    y: (f64, f64),
}

impl Axes {
    fn px(&self, x: f64) -> f64 {
        let span = (self.x.1 - self.x.0).max(f64::EPSILON);
        PAD + (x - self.x.0) / span * (W - 2.0 * PAD)
    }

    fn py(&self, y: f64) -> f64 {
        let span = (self.y.1 - self.y.0).max(f64::EPSILON);
        H - PAD - (y - self.y.0) / span * (H - 2.0 * PAD)
    }
}

fn frame(out: &mut String, title: &str, xlabel: &str, ylabel: &str, axes: &Axes) {
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">
<rect width="{W}" height="{H}" fill="white"/>
<text x="{}" y="18" text-anchor="middle" font-size="13">{title}</text>
<line x1="{PAD}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/>
<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{b}" stroke="black"/>
<text x="{}" y="{}" text-anchor="middle">{xlabel}</text>
<text x="12" y="{}" text-anchor="middle" transform="rotate(-90 12 {})">{ylabel}</text>
<text x="{}" y="{}" text-anchor="end">{:.3}</text>
<text x="{}" y="{}" text-anchor="end">{:.3}</text>
"#,
        W / 2.0,
        W / 2.0,
        H - 8.0,
        H / 2.0,
        H / 2.0,
        PAD - 4.0,
        axes.py(axes.y.0),
        axes.y.0,
        PAD - 4.0,
        axes.py(axes.y.1) + 8.0,
        axes.y.1,
        b = H - PAD,
        r = W - PAD,
    );
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if lo.is_finite() {
        (lo.min(0.0), hi)
    } else {
        (0.0, 1.0)
    }
}

/// Per-head attention distance as dots over layers.
pub fn attention_plot(distances: &[Vec<f64>]) -> String {
    let axes = Axes {
        x: (0.5, distances.len() as f64 + 0.5),
        y: range(distances.iter().flatten().copied()),
    };
    let mut s = String::new();
    frame(&mut s, "Attention distance", "layer", "distance (px)", &axes);
    for (l, heads) in distances.iter().enumerate() {
        for (h, d) in heads.iter().enumerate() {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{}"/>"#,
                axes.px(l as f64 + 1.0),
                axes.py(*d),
                COLORS[h % COLORS.len()]
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            axes.px(l as f64 + 1.0),
            H - PAD + 14.0,
            l + 1
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Top-k singular percentage against k, one line per layer.
pub fn spectrum_plot(percentages: &[Vec<f64>]) -> String {
    let max_k = percentages.first().map_or(1, Vec::len);
    let axes = Axes {
        x: (1.0, max_k.max(2) as f64),
        y: (0.0, 1.0),
    };
    let mut s = String::new();
    frame(&mut s, "Singular value spectrum", "k", "top-k share", &axes);
    for (l, ks) in percentages.iter().enumerate() {
        let points: Vec<String> = ks
            .iter()
            .enumerate()
            .map(|(k, p)| format!("{:.1},{:.1}", axes.px(k as f64 + 1.0), axes.py(*p)))
            .collect();
        let color = COLORS[l % COLORS.len()];
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            points.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">layer {}</text>"#,
            W - PAD - 50.0,
            PAD + 14.0 * l as f64,
            l + 1
        );
    }
    s.push_str("</svg>\n");
    s
}
