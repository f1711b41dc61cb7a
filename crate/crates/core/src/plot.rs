//! SVG rendering of a scene with its predicted modes.
//!
//! Geometry is written in scene meters inside a group whose transform maps
//! meters to pixels, so point lists can be read back verbatim.

use std::fmt::Write;

use crate::model::Prediction;
use crate::scene::{Point, Scene};

pub const WIDTH: f64 = 800.0;
pub const HEIGHT: f64 = 800.0;
const MARGIN: f64 = 40.0;

const MODE_COLORS: [&str; 6] = ["#d62728", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn points_attr(points: &[Point]) -> String {
    let mut s = String::new();
    for (i, p) in points.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        write!(s, "{},{}", p[0], p[1]).unwrap();
    }
    s
}

struct View {
    cx: f64,
    cy: f64,
    scale: f64,
}

impl View {
    fn fit(points: impl Iterator<Item = Point>) -> Self {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in points {
            for d in 0..2 {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        if !lo[0].is_finite() {
            lo = [-1.0, -1.0];
            hi = [1.0, 1.0];
        }
        let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1.0);
        Self {
            cx: 0.5 * (lo[0] + hi[0]),
            cy: 0.5 * (lo[1] + hi[1]),
            scale: (WIDTH.min(HEIGHT) - 2.0 * MARGIN) / span,
        }
    }

    fn to_pixels(&self, p: Point) -> Point {
        [
            WIDTH / 2.0 + self.scale * (p[0] - self.cx),
            HEIGHT / 2.0 - self.scale * (p[1] - self.cy),
        ]
    }
}

/// Lanes in grey, target history in blue, ground truth in green and each
/// predicted mode with its probability.
pub fn render_svg(scene: &Scene, pred: &Prediction) -> String {
    let lanes: Vec<Vec<Point>> = scene
        .segments
        .iter()
        .filter(|s| s.is_valid())
        .map(|s| {
            let mut pts: Vec<Point> = Vec::new();
            for (v, &ok) in s.vectors.iter().zip(&s.mask) {
                if ok {
                    if pts.last() != Some(&v.start()) {
                        pts.push(v.start());
                    }
                    pts.push(v.end());
                }
            }
            pts
        })
        .collect();
    let history: Vec<Point> = scene
        .target()
        .map(|a| {
            a.steps
                .iter()
                .zip(&a.mask)
                .filter(|(_, &m)| m)
                .map(|(s, _)| s.end())
                .collect()
        })
        .unwrap_or_default();
    let gt = &scene.ground_truth.positions;
    let view = View::fit(
        lanes
            .iter()
            .flatten()
            .chain(&history)
            .chain(gt)
            .chain(pred.modes.iter().flat_map(|m| &m.positions))
            .copied(),
    );

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<g id="scene" transform="translate({} {}) scale({} {}) translate({} {})" fill="none" stroke-linecap="round">"#,
        WIDTH / 2.0,
        HEIGHT / 2.0,
        view.scale,
        -view.scale,
        -view.cx,
        -view.cy
    )
    .unwrap();
    let stroke = |px: f64| px / view.scale;
    for (lane, seg) in lanes.iter().zip(scene.segments.iter().filter(|s| s.is_valid())) {
        writeln!(
            s,
            r##"<polyline class="lane" data-id="{}" stroke="#b0b0b0" stroke-width="{}" points="{}"/>"##,
            seg.id,
            stroke(3.0),
            points_attr(lane)
        )
        .unwrap();
    }
    writeln!(
        s,
        r##"<polyline class="history" stroke="#1f77b4" stroke-width="{}" points="{}"/>"##,
        stroke(3.0),
        points_attr(&history)
    )
    .unwrap();
    writeln!(
        s,
        r##"<polyline class="ground-truth" stroke="#2ca02c" stroke-width="{}" points="{}"/>"##,
        stroke(3.0),
        points_attr(gt)
    )
    .unwrap();
    for (k, mode) in pred.modes.iter().enumerate() {
        writeln!(
            s,
            r#"<polyline class="mode" data-mode="{k}" data-prob="{}" stroke="{}" stroke-width="{}" points="{}"/>"#,
            mode.probability,
            MODE_COLORS[k % MODE_COLORS.len()],
            stroke(2.0),
            points_attr(&mode.positions)
        )
        .unwrap();
    }
    writeln!(s, "</g>").unwrap();
    for (k, mode) in pred.modes.iter().enumerate() {
        if let Some(&end) = mode.positions.last() {
            let [x, y] = view.to_pixels(end);
            writeln!(
                s,
                r#"<text class="prob" x="{:.1}" y="{:.1}" font-family="sans-serif" font-size="12" fill="{}">{:.2}</text>"#,
                x + 4.0,
                y - 4.0,
                MODE_COLORS[k % MODE_COLORS.len()],
                mode.probability
            )
            .unwrap();
        }
    }
    let label = if pred.refined { "refined" } else { "stage 1" };
    writeln!(
        s,
        r#"<text x="10" y="20" font-family="sans-serif" font-size="14">{label}</text>"#
    )
    .unwrap();
    writeln!(s, "</svg>").unwrap();
    s
}

/// Reads back the point lists of every `<polyline class="mode">`.
pub fn parse_mode_polylines(svg: &str) -> Vec<Vec<Point>> {
    svg.lines()
        .filter(|l| l.starts_with(r#"<polyline class="mode""#))
        .filter_map(|l| {
            let start = l.find(r#"points=""#)? + 8;
            let end = start + l[start..].find('"')?;
            l[start..end]
                .split(' ')
                .map(|pair| {
                    let (x, y) = pair.split_once(',')?;
                    Some([x.parse().ok()?, y.parse().ok()?])
                })
                .collect()
        })
        .collect()
}
