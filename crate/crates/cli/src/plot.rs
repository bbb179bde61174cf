//! Self-contained SVG scatter panels.

use std::fmt::Write;

use ddss::tensorgrad::Tensor;

pub struct Panel<'a> {
    pub title: String,
    pub points: &'a Tensor,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One row of square panels sharing the window `[-extent, extent]²`. Points
/// are drawn in panel-local coordinates, so equal inputs give equal markup.
pub fn render(panels: &[Panel<'_>], size: f64, extent: f64, config_hash: &str) -> String {
    let pad = 10.0;
    let title_h = 24.0;
    let width = panels.len() as f64 * (size + pad) + pad;
    let height = size + title_h + 2.0 * pad;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(s, "<!-- ddss plot; config-hash {config_hash} -->");
    let _ = writeln!(s, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    let scale = size / (2.0 * extent);
    for (p, panel) in panels.iter().enumerate() {
        let x0 = pad + p as f64 * (size + pad);
        let _ = writeln!(s, r#"<g transform="translate({x0},{pad})">"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="16" font-family="sans-serif" font-size="13" text-anchor="middle">{}</text>"#,
            size / 2.0,
            escape(&panel.title)
        );
        let _ = writeln!(s, r#"<g transform="translate(0,{title_h})">"#);
        let _ = writeln!(s, r##"<rect width="{size}" height="{size}" fill="none" stroke="#999"/>"##);
        for i in 0..panel.points.rows() {
            let row = panel.points.row(i);
            let (x, y) = (row[0], row.get(1).copied().unwrap_or(0.0));
            if x.abs() > extent || y.abs() > extent {
                continue;
            }
            let _ = writeln!(
                s,
                r##"<circle cx="{:.2}" cy="{:.2}" r="1.2" fill="#1f4e99" fill-opacity="0.5"/>"##,
                (x + extent) * scale,
                (extent - y) * scale
            );
        }
        s.push_str("</g>\n</g>\n");
    }
    s.push_str("</svg>\n");
    s
}
