//! Minimal SVG emission for trajectory overlays, loss curves and bar charts.

use std::fmt::Write as _;

use spacetoken::scene::Scene;
use spacetoken::shapes::Point2;

const W: f64 = 640.0;
const H: f64 = 480.0;
const MARGIN: f64 = 48.0;
const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

/// Maps data coordinates into the plot box.
struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit(points: impl Iterator<Item = Point2>) -> Self {
        let (mut x0, mut x1, mut y0, mut y1) = (
            f64::INFINITY,
            f64::NEG_INFINITY,
            f64::INFINITY,
            f64::NEG_INFINITY,
        );
        for [x, y] in points.filter(|p| p[0].is_finite() && p[1].is_finite()) {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !x0.is_finite() {
            return Self {
                x0: 0.0,
                x1: 1.0,
                y0: 0.0,
                y1: 1.0,
            };
        }
        let pad = |a: f64, b: f64| {
            if (b - a).abs() < 1e-9 {
                (a - 0.5, b + 0.5)
            } else {
                (a - 0.05 * (b - a), b + 0.05 * (b - a))
            }
        };
        let ((x0, x1), (y0, y1)) = (pad(x0, x1), pad(y0, y1));
        Self { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        H - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * MARGIN)
    }
}

fn open(title: &str) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    let _ = writeln!(s, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>",
        W / 2.0,
        escape(title)
    );
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn axes(s: &mut String, f: &Frame, xlabel: &str, ylabel: &str) {
    let _ = writeln!(
        s,
        "<rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#888\"/>",
        W - 2.0 * MARGIN,
        H - 2.0 * MARGIN
    );
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let (xv, yv) = (f.x0 + t * (f.x1 - f.x0), f.y0 + t * (f.y1 - f.y0));
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            f.px(xv),
            H - MARGIN + 16.0,
            tick(xv)
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>",
            MARGIN - 4.0,
            f.py(yv) + 4.0,
            tick(yv)
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
        W / 2.0,
        H - 8.0,
        escape(xlabel)
    );
    let _ = writeln!(
        s,
        "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{}</text>",
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    );
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.round() {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn polyline(
    s: &mut String,
    f: &Frame,
    pts: &[Point2],
    color: &str,
    width: f64,
    opacity: f64,
    dashed: bool,
) {
    let d: Vec<String> = pts
        .iter()
        .map(|p| format!("{:.1},{:.1}", f.px(p[0]), f.py(p[1])))
        .collect();
    let dash = if dashed {
        " stroke-dasharray=\"5 3\""
    } else {
        ""
    };
    let _ = writeln!(
        s,
        "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"{width}\" stroke-opacity=\"{opacity}\"{dash}/>",
        d.join(" ")
    );
}

fn polygon(s: &mut String, f: &Frame, pts: &[Point2], fill: &str, stroke: &str) {
    let d: Vec<String> = pts
        .iter()
        .map(|p| format!("{:.1},{:.1}", f.px(p[0]), f.py(p[1])))
        .collect();
    let _ = writeln!(
        s,
        "<polygon points=\"{}\" fill=\"{fill}\" stroke=\"{stroke}\"/>",
        d.join(" ")
    );
}

fn legend(s: &mut String, items: &[(&str, &str)]) {
    for (i, (label, color)) in items.iter().enumerate() {
        let y = MARGIN + 14.0 + 16.0 * i as f64;
        let _ = writeln!(
            s,
            "<rect x=\"{}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{color}\"/>",
            W - MARGIN - 150.0,
            y - 9.0
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{y}\">{}</text>",
            W - MARGIN - 135.0,
            escape(label)
        );
    }
}

/// Bird's-eye overlay. The plot's vertical axis is ego x (forward); its
/// horizontal axis is ego y, mirrored so left is left.
pub fn trajectory_overlay(scene: &Scene, predicted: &[Point2], title: &str) -> String {
    let view = |p: Point2| [-p[1], p[0]];
    let mut pts: Vec<Point2> = scene
        .future_xy()
        .into_iter()
        .chain(predicted.iter().copied())
        .map(view)
        .collect();
    pts.push([0.0, 0.0]);
    for a in &scene.agents {
        pts.extend(a.footprint(0).corners().map(view));
    }
    let f = Frame::fit(pts.into_iter());
    let mut s = open(title);
    for poly in &scene.drivable {
        let clipped: Vec<Point2> = poly
            .vertices
            .iter()
            .map(|&p| {
                let v = view(p);
                [v[0].clamp(f.x0, f.x1), v[1].clamp(f.y0, f.y1)]
            })
            .collect();
        polygon(&mut s, &f, &clipped, "#eeeeee", "#bbbbbb");
    }
    for a in &scene.agents {
        polygon(
            &mut s,
            &f,
            &a.footprint(0).corners().map(view),
            "#f4c27a",
            "#a0522d",
        );
    }
    let mut gt = vec![[0.0, 0.0]];
    gt.extend(scene.future_xy().into_iter().map(view));
    polyline(&mut s, &f, &gt, "#2ca02c", 2.5, 1.0, false);
    let mut pr = vec![[0.0, 0.0]];
    pr.extend(predicted.iter().copied().map(view));
    polyline(&mut s, &f, &pr, "#d62728", 2.0, 1.0, true);
    axes(&mut s, &f, "lateral (m, left negative)", "forward (m)");
    legend(
        &mut s,
        &[
            ("ground truth", "#2ca02c"),
            ("predicted", "#d62728"),
            ("agent at t=0", "#f4c27a"),
        ],
    );
    s.push_str("</svg>\n");
    s
}

/// Loss curves from `(step, columns)` rows; one series per named column.
pub fn loss_curves(series: &[(&str, Vec<Point2>)], title: &str) -> String {
    let f = Frame::fit(series.iter().flat_map(|(_, p)| p.iter().copied()));
    let mut s = open(title);
    for (i, (_, pts)) in series.iter().enumerate() {
        polyline(&mut s, &f, pts, PALETTE[i % PALETTE.len()], 1.5, 1.0, false);
    }
    axes(&mut s, &f, "step", "loss");
    let items: Vec<(&str, &str)> = series
        .iter()
        .enumerate()
        .map(|(i, (n, _))| (*n, PALETTE[i % PALETTE.len()]))
        .collect();
    legend(&mut s, &items);
    s.push_str("</svg>\n");
    s
}

/// Every predicted trajectory (thin, translucent) over every ground-truth one.
pub fn trajectory_fan(predicted: &[Vec<Point2>], truth: &[Vec<Point2>], title: &str) -> String {
    let view = |p: &Point2| [-p[1], p[0]];
    let f = Frame::fit(
        predicted
            .iter()
            .chain(truth)
            .flatten()
            .map(view)
            .chain([[0.0, 0.0]]),
    );
    let mut s = open(title);
    let with_origin = |t: &Vec<Point2>| {
        std::iter::once([0.0, 0.0])
            .chain(t.iter().map(view))
            .collect::<Vec<_>>()
    };
    for t in truth {
        polyline(&mut s, &f, &with_origin(t), "#2ca02c", 1.0, 0.25, false);
    }
    for t in predicted {
        polyline(&mut s, &f, &with_origin(t), "#d62728", 1.0, 0.35, false);
    }
    axes(&mut s, &f, "lateral (m, left negative)", "forward (m)");
    legend(
        &mut s,
        &[("ground truth", "#2ca02c"), ("predicted", "#d62728")],
    );
    s.push_str("</svg>\n");
    s
}

/// Horizontal bars with error whiskers.
pub fn bar_chart(rows: &[(String, f64, f64)], xlabel: &str, title: &str) -> String {
    let hi = rows
        .iter()
        .map(|r| r.1 + r.2)
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max)
        .max(1e-9)
        * 1.1;
    let f = Frame {
        x0: 0.0,
        x1: hi,
        y0: 0.0,
        y1: rows.len().max(1) as f64,
    };
    let mut s = open(title);
    let band = (H - 2.0 * MARGIN) / rows.len().max(1) as f64;
    for (i, (name, v, sd)) in rows.iter().enumerate() {
        let y = MARGIN + band * i as f64 + band * 0.2;
        let v = if v.is_finite() { *v } else { 0.0 };
        let _ = writeln!(
            s,
            "<rect x=\"{MARGIN}\" y=\"{y:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"{}\"/>",
            f.px(v) - MARGIN,
            band * 0.6,
            PALETTE[i % PALETTE.len()]
        );
        let cy = y + band * 0.3;
        let _ = writeln!(
            s,
            "<line x1=\"{:.1}\" x2=\"{:.1}\" y1=\"{cy:.1}\" y2=\"{cy:.1}\" stroke=\"black\"/>",
            f.px((v - sd).max(0.0)),
            f.px(v + sd)
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{:.1}\">{} ({v:.3})</text>",
            MARGIN + 4.0,
            cy + 4.0,
            escape(name)
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
        W / 2.0,
        H - 8.0,
        escape(xlabel)
    );
    s.push_str("</svg>\n");
    s
}
