//! Minimal SVG bar chart of per-class IoU.

use std::fmt::Write;

use crate::data::MiouReport;

const BAR_W: usize = 48;
const GAP: usize = 16;
const PLOT_H: f64 = 200.0;
const TOP: f64 = 30.0;

pub fn bar_chart(report: &MiouReport, names: &[String]) -> String {
    let n = report.per_class.len();
    let width = GAP + n * (BAR_W + GAP);
    let height = TOP + PLOT_H + 40.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{GAP}" y="18">mIoU {:.4}</text>"#,
        report.mean
    );
    let base = TOP + PLOT_H;
    let _ = writeln!(
        s,
        r#"<line x1="{GAP}" y1="{base}" x2="{}" y2="{base}" stroke="black"/>"#,
        width - GAP
    );
    for (c, iou) in report.per_class.iter().enumerate() {
        let x = GAP + c * (BAR_W + GAP);
        let cx = x + BAR_W / 2;
        let name = names.get(c).map(String::as_str).unwrap_or("?");
        match iou {
            Some(v) => {
                let h = v.clamp(0.0, 1.0) * PLOT_H;
                let _ = writeln!(
                    s,
                    r#"<rect x="{x}" y="{:.2}" width="{BAR_W}" height="{h:.2}" fill="steelblue"/>"#,
                    base - h
                );
                let _ = writeln!(
                    s,
                    r#"<text x="{cx}" y="{:.2}" text-anchor="middle">{v:.3}</text>"#,
                    base - h - 4.0
                );
            }
            None => {
                let _ = writeln!(
                    s,
                    r#"<text x="{cx}" y="{:.2}" text-anchor="middle">n/a</text>"#,
                    base - 4.0
                );
            }
        }
        let _ = writeln!(
            s,
            r#"<text x="{cx}" y="{:.2}" text-anchor="middle">{}</text>"#,
            base + 16.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
