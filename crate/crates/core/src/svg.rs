//! Segment timelines rendered as standalone SVG.

use crate::metrics::segments_from_labels;
use std::fmt::Write;

const ROW_HEIGHT: f64 = 24.0;
const ROW_GAP: f64 = 8.0;
const LABEL_WIDTH: f64 = 90.0;

/// Evenly spaced hues; deterministic per class id.
pub fn class_color(class: usize, num_classes: usize) -> String {
    let h = 360.0 * class as f64 / num_classes.max(1) as f64;
    format!("hsl({h:.1},65%,55%)")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// One row per labeled sequence, one `<rect>` per segment.
pub fn timeline(rows: &[(&str, &[usize])], num_classes: usize, width: f64) -> String {
    let frames = rows.iter().map(|r| r.1.len()).max().unwrap_or(0).max(1);
    let scale = (width - LABEL_WIDTH).max(1.0) / frames as f64;
    let height = rows.len() as f64 * (ROW_HEIGHT + ROW_GAP) + ROW_GAP;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    for (i, (name, labels)) in rows.iter().enumerate() {
        let y = ROW_GAP + i as f64 * (ROW_HEIGHT + ROW_GAP);
        let _ = writeln!(
            out,
            r#"<text x="4" y="{:.1}" font-family="sans-serif" font-size="12">{}</text>"#,
            y + ROW_HEIGHT * 0.7,
            escape(name)
        );
        for seg in segments_from_labels(labels) {
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{y:.1}" width="{:.2}" height="{ROW_HEIGHT}" fill="{}"><title>class {} [{}, {})</title></rect>"#,
                LABEL_WIDTH + seg.start as f64 * scale,
                seg.len() as f64 * scale,
                class_color(seg.label, num_classes),
                seg.label,
                seg.start,
                seg.end
            );
        }
    }
    out.push_str("</svg>\n");
    out
}
