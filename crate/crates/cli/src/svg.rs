//! SoftMax-surface contour plots via marching squares.

use std::fmt::Write;

const SIZE: f64 = 480.0;
const MARGIN: f64 = 20.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Scores on a regular grid; `score[j * xs.len() + i]` is at `(xs[i], ys[j])`.
pub struct Grid<'a> {
    pub xs: &'a [f64],
    pub ys: &'a [f64],
    pub score: &'a [f64],
}

/// Iso-levels 0.05, 0.15, …, 0.95.
pub fn levels() -> Vec<f64> {
    (0..10).map(|k| 0.05 + 0.1 * k as f64).collect()
}

/// Line segments where the surface crosses `level`.
pub fn iso_segments(g: &Grid<'_>, level: f64) -> Vec<[(f64, f64); 2]> {
    let (nx, ny) = (g.xs.len(), g.ys.len());
    let at = |i: usize, j: usize| g.score[j * nx + i];
    let mut out = Vec::new();
    for j in 0..ny.saturating_sub(1) {
        for i in 0..nx.saturating_sub(1) {
            // corners a, b, c, d counter-clockwise from bottom-left
            let corners = [
                (g.xs[i], g.ys[j], at(i, j)),
                (g.xs[i + 1], g.ys[j], at(i + 1, j)),
                (g.xs[i + 1], g.ys[j + 1], at(i + 1, j + 1)),
                (g.xs[i], g.ys[j + 1], at(i, j + 1)),
            ];
            let above: Vec<bool> = corners.iter().map(|c| c.2 > level).collect();
            let mut cross: [Option<(f64, f64)>; 4] = [None; 4];
            for e in 0..4 {
                let (p, q) = (corners[e], corners[(e + 1) % 4]);
                if above[e] != above[(e + 1) % 4] {
                    let t = (level - p.2) / (q.2 - p.2);
                    cross[e] = Some((p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1)));
                }
            }
            let hits: Vec<usize> = (0..4).filter(|&e| cross[e].is_some()).collect();
            match hits.len() {
                2 => out.push([cross[hits[0]].unwrap(), cross[hits[1]].unwrap()]),
                4 => {
                    let center = corners.iter().map(|c| c.2).sum::<f64>() / 4.0 > level;
                    let pairs = if center == above[0] { [(0, 1), (2, 3)] } else { [(3, 0), (1, 2)] };
                    for (a, b) in pairs {
                        out.push([cross[a].unwrap(), cross[b].unwrap()]);
                    }
                }
                _ => {}
            }
        }
    }
    out
}

fn color(level: f64) -> String {
    let lerp = |a: f64, b: f64| (a + (b - a) * level).round() as u8;
    format!("#{:02x}{:02x}{:02x}", lerp(33.0, 178.0), lerp(102.0, 24.0), lerp(172.0, 43.0))
}

/// Renders the iso-contours, the 0.5 decision boundary, and labeled points.
pub fn render(g: &Grid<'_>, points: &[(f64, f64, usize)], comment: &str) -> String {
    let (x0, x1) = (g.xs[0], g.xs[g.xs.len() - 1]);
    let (y0, y1) = (g.ys[0], g.ys[g.ys.len() - 1]);
    let span = SIZE - 2.0 * MARGIN;
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * span;
    let py = |y: f64| SIZE - MARGIN - (y - y0) / (y1 - y0) * span;

    let mut s = String::new();
    writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#).unwrap();
    writeln!(s, "<!-- {comment} -->").unwrap();
    writeln!(s, r##"<rect x="{MARGIN}" y="{MARGIN}" width="{span}" height="{span}" fill="#ffffff" stroke="#444444"/>"##).unwrap();
    let mut draw = |level: f64, stroke: &str, width: f64| {
        let segs = iso_segments(g, level);
        if segs.is_empty() {
            return;
        }
        let mut d = String::new();
        for [a, b] in segs {
            write!(d, "M{:.2} {:.2}L{:.2} {:.2}", px(a.0), py(a.1), px(b.0), py(b.1)).unwrap();
        }
        writeln!(s, r#"<path d="{d}" fill="none" stroke="{stroke}" stroke-width="{width}"><title>{level:.2}</title></path>"#).unwrap();
    };
    for l in levels() {
        draw(l, &color(l), 1.0);
    }
    draw(0.5, "#000000", 2.0);
    for &(x, y, label) in points {
        writeln!(
            s,
            r##"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{}" stroke="#000000" stroke-width="0.4"/>"##,
            px(x),
            py(y),
            PALETTE[label % PALETTE.len()]
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}
