//! Stacked bar chart of per-slot traffic, rendered as SVG from CSV rows.

use std::fmt::Write;

use dasim_core::metrics::SlotRow;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 60.0;
const SERIES: [(&str, &str); 3] = [("cell", "#4477aa"), ("signaling", "#ee6677"), ("header", "#228833")];

fn values(r: &SlotRow) -> [u64; 3] {
    [r.bytes_cell, r.bytes_signaling, r.bytes_header]
}

pub fn traffic_svg(title: &str, rows: &[SlotRow]) -> String {
    let mut s = String::new();
    let max = rows.iter().map(|r| values(r).iter().sum::<u64>()).max().unwrap_or(0).max(1) as f64;
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let slot_w = plot_w / rows.len().max(1) as f64;
    let bar_w = slot_w * 0.7;
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{MARGIN}" y="24" font-size="14">{}</text>"#, escape(title));
    let _ = writeln!(
        s,
        r#"<line x1="{MARGIN}" y1="{y}" x2="{x}" y2="{y}" stroke="black"/>"#,
        y = HEIGHT - MARGIN,
        x = WIDTH - MARGIN
    );
    let _ = writeln!(
        s,
        r#"<text x="4" y="{}" >{:.3e} B</text>"#,
        MARGIN + 4.0,
        max
    );
    for (i, r) in rows.iter().enumerate() {
        let x = MARGIN + i as f64 * slot_w + (slot_w - bar_w) / 2.0;
        let mut y = HEIGHT - MARGIN;
        for (v, (_, colour)) in values(r).iter().zip(SERIES) {
            let h = *v as f64 / max * plot_h;
            y -= h;
            let _ = writeln!(
                s,
                r#"<rect x="{x:.1}" y="{y:.1}" width="{bar_w:.1}" height="{h:.1}" fill="{colour}"/>"#
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{} s{}</text>"#,
            x + bar_w / 2.0,
            HEIGHT - MARGIN + 16.0,
            escape(&r.strategy),
            r.slot
        );
    }
    for (i, (name, colour)) in SERIES.iter().enumerate() {
        let x = WIDTH - MARGIN - 90.0;
        let y = MARGIN + i as f64 * 16.0;
        let _ = writeln!(s, r#"<rect x="{x}" y="{}" width="10" height="10" fill="{colour}"/>"#, y - 9.0);
        let _ = writeln!(s, r#"<text x="{}" y="{y}">{name}</text>"#, x + 14.0);
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(strategy: &str, cell: u64) -> SlotRow {
        SlotRow {
            slot: 0,
            strategy: strategy.into(),
            bytes_cell: cell,
            bytes_signaling: 10,
            bytes_header: 5,
            producer_egress: cell,
            v_success_rate: None,
            r_success_rate: None,
            v_deadline_rate: None,
            r_deadline_rate: None,
            p50_ms: None,
            p90_ms: None,
            p99_ms: None,
            cost_usd: 0.0,
        }
    }

    #[test]
    fn one_bar_segment_per_series_and_row() {
        let svg = traffic_svg("a<b", &[row("centralized", 100), row("dht_cache", 50)]);
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("a&lt;b"));
        assert_eq!(svg.matches("<rect").count(), 1 + 2 * 3 + 3);
    }

    #[test]
    fn empty_rows_still_render() {
        assert!(traffic_svg("x", &[]).ends_with("</svg>\n"));
    }
}
