//! Static top-down SVG: obstacles, subtask entry/exit discs with heading
//! ticks, and trajectory polylines.

use std::fmt::Write as _;

use crate::geometry::PoseRegion;
use crate::hlm::Subtask;
use crate::sim::{EnvironmentMap, Obstacle, TrajectorySample};

const WIDTH_PX: f64 = 800.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

struct Frame {
    scale: f64,
    min_x: f64,
    max_y: f64,
}

impl Frame {
    fn x(&self, x: f64) -> f64 {
        (x - self.min_x) * self.scale
    }

    fn y(&self, y: f64) -> f64 {
        (self.max_y - y) * self.scale
    }
}

fn region(out: &mut String, f: &Frame, r: &PoseRegion, stroke: &str, dashed: bool) {
    let dash = if dashed { " stroke-dasharray=\"4 3\"" } else { "" };
    let _ = writeln!(
        out,
        r#"<circle cx="{:.2}" cy="{:.2}" r="{:.2}" fill="none" stroke="{stroke}"{dash}/>"#,
        f.x(r.center_x),
        f.y(r.center_y),
        r.position_radius * f.scale
    );
    let (s, c) = r.heading.sin_cos();
    let len = r.position_radius;
    let _ = writeln!(
        out,
        r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{stroke}"/>"#,
        f.x(r.center_x),
        f.y(r.center_y),
        f.x(r.center_x + len * c),
        f.y(r.center_y + len * s)
    );
}

pub fn render_overlay(env: &EnvironmentMap, subtasks: &[Subtask], tracks: &[&[TrajectorySample]]) -> String {
    let b = &env.bounds;
    let f = Frame {
        scale: WIDTH_PX / (b.max_x - b.min_x),
        min_x: b.min_x,
        max_y: b.max_y,
    };
    let height = (b.max_y - b.min_y) * f.scale;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH_PX:.0}" height="{height:.0}" viewBox="0 0 {WIDTH_PX:.2} {height:.2}">"#
    );
    let _ = writeln!(
        out,
        "<rect x=\"0\" y=\"0\" width=\"{WIDTH_PX:.2}\" height=\"{height:.2}\" fill=\"white\" stroke=\"black\"/>"
    );
    for o in &env.obstacles {
        match *o {
            Obstacle::Rect {
                min_x,
                min_y,
                max_x,
                max_y,
            } => {
                let _ = writeln!(
                    out,
                    r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="#777"/>"##,
                    f.x(min_x),
                    f.y(max_y),
                    (max_x - min_x) * f.scale,
                    (max_y - min_y) * f.scale
                );
            }
            Obstacle::Circle { x, y, radius } => {
                let _ = writeln!(
                    out,
                    r##"<circle cx="{:.2}" cy="{:.2}" r="{:.2}" fill="#777"/>"##,
                    f.x(x),
                    f.y(y),
                    radius * f.scale
                );
            }
        }
    }
    for s in subtasks {
        region(&mut out, &f, &s.entry, "#888", true);
        region(&mut out, &f, &s.exit, "#2a2", false);
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" font-size="12" font-family="sans-serif">{}</text>"#,
            f.x(s.exit.center_x + s.exit.position_radius),
            f.y(s.exit.center_y + s.exit.position_radius),
            escape(s.id.as_str())
        );
    }
    for (i, track) in tracks.iter().enumerate() {
        if track.is_empty() {
            continue;
        }
        let mut points = String::new();
        for p in track.iter() {
            let _ = write!(points, "{:.2},{:.2} ", f.x(p.x_m), f.y(p.y_m));
        }
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5"/>"#,
            points.trim_end(),
            PALETTE[i % PALETTE.len()]
        );
    }
    out.push_str("</svg>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
