//! Minimal SVG rendering for contribution matrices.

use std::f64::consts::PI;
use std::fmt::Write;

use super::ContributionMatrix;

const PALETTE: [&str; 10] = [
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#ff9da7", "#9c755f", "#bab0ac",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Heatmap with one row per test domain and one column per adapter. Cells
/// below `threshold` are drawn blank; absent cells are hatched grey.
pub fn render_heatmap_svg(m: &ContributionMatrix, threshold: f64) -> String {
    let cell = 36.0;
    let left = 120.0;
    let top = 110.0;
    let width = left + cell * m.cols.len() as f64 + 20.0;
    let height = top + cell * m.rows.len() as f64 + 20.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    for (j, c) in m.cols.iter().enumerate() {
        let x = left + cell * (j as f64 + 0.5);
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{}" transform="rotate(-60 {x} {})" text-anchor="start">{}</text>"#,
            top - 6.0,
            top - 6.0,
            escape(c)
        );
    }
    for (i, r) in m.rows.iter().enumerate() {
        let y = top + cell * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            left - 6.0,
            y + cell * 0.6,
            escape(r)
        );
        for (j, v) in m.cells[i].iter().enumerate() {
            let x = left + cell * j as f64;
            match v {
                None => {
                    let _ = writeln!(
                        s,
                        "<rect x=\"{x}\" y=\"{y}\" width=\"{cell}\" height=\"{cell}\" fill=\"#dddddd\" stroke=\"#ffffff\"/>"
                    );
                }
                Some(w) => {
                    let shade = if *w >= threshold { w.clamp(0.0, 1.0) } else { 0.0 };
                    let level = (255.0 * (1.0 - shade)).round() as u8;
                    let _ = writeln!(
                        s,
                        "<rect x=\"{x}\" y=\"{y}\" width=\"{cell}\" height=\"{cell}\" fill=\"rgb({level},{level},255)\" stroke=\"#ffffff\"/>"
                    );
                    if *w >= threshold {
                        let ink = if shade > 0.5 { "#ffffff" } else { "#000000" };
                        let _ = writeln!(
                            s,
                            r#"<text x="{}" y="{}" text-anchor="middle" fill="{ink}">{:.2}</text>"#,
                            x + cell / 2.0,
                            y + cell * 0.6,
                            w
                        );
                    }
                }
            }
        }
    }
    s.push_str("</svg>\n");
    s
}

/// One pie per test domain. Slices below `threshold` are merged into "other".
pub fn render_pies_svg(m: &ContributionMatrix, threshold: f64) -> String {
    let radius = 70.0;
    let pane_w = 2.0 * radius + 200.0;
    let pane_h = 2.0 * radius + 50.0;
    let per_row = 3usize;
    let rows = m.rows.len().div_ceil(per_row);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif" font-size="11">"#,
        pane_w * per_row.min(m.rows.len()).max(1) as f64,
        pane_h * rows.max(1) as f64
    );
    for (i, row) in m.rows.iter().enumerate() {
        let ox = pane_w * (i % per_row) as f64;
        let oy = pane_h * (i / per_row) as f64;
        let (cx, cy) = (ox + radius + 10.0, oy + radius + 30.0);
        let _ = writeln!(s, r#"<text x="{cx}" y="{}" text-anchor="middle" font-weight="bold">{}</text>"#, oy + 18.0, escape(row));

        let mut slices: Vec<(String, f64)> = Vec::new();
        let mut other = 0.0;
        for (c, v) in m.cols.iter().zip(&m.cells[i]) {
            match v {
                Some(w) if *w >= threshold => slices.push((c.clone(), *w)),
                Some(w) => other += w,
                None => {}
            }
        }
        slices.sort_by(|a, b| b.1.total_cmp(&a.1));
        if other > 0.0 {
            slices.push(("other".into(), other));
        }
        let total: f64 = slices.iter().map(|x| x.1).sum();
        if total <= 0.0 {
            continue;
        }
        let mut angle = -PI / 2.0;
        for (k, (label, w)) in slices.iter().enumerate() {
            let frac = w / total;
            let colour = if label == "other" { "#cccccc" } else { PALETTE[k % PALETTE.len()] };
            if frac >= 0.999_999 {
                let _ = writeln!(s, r#"<circle cx="{cx}" cy="{cy}" r="{radius}" fill="{colour}"/>"#);
            } else {
                let end = angle + 2.0 * PI * frac;
                let (x0, y0) = (cx + radius * angle.cos(), cy + radius * angle.sin());
                let (x1, y1) = (cx + radius * end.cos(), cy + radius * end.sin());
                let large = if frac > 0.5 { 1 } else { 0 };
                let _ = writeln!(
                    s,
                    r##"<path d="M {cx:.2} {cy:.2} L {x0:.2} {y0:.2} A {radius} {radius} 0 {large} 1 {x1:.2} {y1:.2} Z" fill="{colour}" stroke="#ffffff"/>"##
                );
                angle = end;
            }
            let ly = oy + 40.0 + 14.0 * k as f64;
            let lx = ox + 2.0 * radius + 24.0;
            let _ = writeln!(s, r#"<rect x="{lx}" y="{}" width="10" height="10" fill="{colour}"/>"#, ly - 9.0);
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{ly}">{} {:.0}%</text>"#,
                lx + 14.0,
                escape(label),
                100.0 * frac
            );
        }
    }
    s.push_str("</svg>\n");
    s
}
