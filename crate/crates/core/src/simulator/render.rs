use std::fmt::Write;

use super::{EventKind, Timeline};

const WIDTH: f64 = 960.0;
const GUTTER: f64 = 64.0;
const ROW: f64 = 26.0;

fn color(kind: EventKind) -> &'static str {
    match kind {
        EventKind::Forward => "#4e79a7",
        EventKind::Backward => "#f28e2b",
        EventKind::Collective => "#e15759",
        EventKind::SendRecv => "#76b7b2",
        EventKind::Idle => "#e6e6e6",
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Gantt chart with one row per device.
pub(super) fn svg(t: &Timeline) -> String {
    let height = ROW * t.devices as f64 + 30.0;
    let scale = if t.step_time > 0.0 { (WIDTH - GUTTER - 8.0) / t.step_time } else { 0.0 };
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" font-family="monospace" font-size="10">"#
    );
    for d in 0..t.devices {
        let y = ROW * d as f64 + 4.0;
        let _ = writeln!(out, r#"<g class="device" data-device="{d}">"#);
        let _ = writeln!(out, r#"<text x="4" y="{:.1}">dev {d}</text>"#, y + 15.0);
        for e in t.events.iter().filter(|e| e.device == d) {
            let x = GUTTER + e.start * scale;
            let w = (e.end - e.start) * scale;
            let _ = writeln!(
                out,
                r#"<rect x="{x:.2}" y="{y:.1}" width="{w:.2}" height="{:.1}" fill="{}" stroke="white" stroke-width="0.5"><title>{} [{:.6e}, {:.6e}]</title></rect>"#,
                ROW - 6.0,
                color(e.kind),
                escape(&e.label),
                e.start,
                e.end
            );
            if w > 7.0 * e.label.len() as f64 && e.kind != EventKind::Idle {
                let _ = writeln!(
                    out,
                    r#"<text x="{:.2}" y="{:.1}" fill="white">{}</text>"#,
                    x + 2.0,
                    y + 13.0,
                    escape(&e.label)
                );
            }
        }
        out.push_str("</g>\n");
    }
    let _ = writeln!(out, r#"<text x="{GUTTER}" y="{:.1}">step time {:.6e} s</text>"#, height - 6.0, t.step_time);
    out.push_str("</svg>\n");
    out
}
