//! Error-versus-epoch line plots as standalone SVG.

use std::fmt::Write;

use il_lab::data::{Metrics, Split};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 160.0;
const TOP: f64 = 20.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// One labelled run. Train error is drawn solid, test error dashed.
pub struct Series<'a> {
    pub label: String,
    pub metrics: &'a [Metrics],
}

fn points(m: &[Metrics], split: Split) -> Vec<(f64, f64)> {
    m.iter()
        .filter(|r| r.split == split)
        .map(|r| (r.epoch as f64, 100.0 * r.error_rate))
        .collect()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn render(series: &[Series]) -> String {
    let max_epoch = series
        .iter()
        .flat_map(|s| s.metrics.iter().map(|m| m.epoch))
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let max_err = series
        .iter()
        .flat_map(|s| s.metrics.iter().map(|m| 100.0 * m.error_rate))
        .fold(0.0f64, f64::max);
    let y_max = if max_err > 0.0 { (max_err * 1.05).min(100.0) } else { 1.0 };
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let sx = |e: f64| LEFT + plot_w * e / max_epoch;
    let sy = |v: f64| TOP + plot_h * (1.0 - v / y_max);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{LEFT},{TOP} V{} H{}" fill="none" stroke="black"/>"#,
        TOP + plot_h,
        LEFT + plot_w
    );
    for i in 0..=5 {
        let v = y_max * i as f64 / 5.0;
        let y = sy(v);
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{y:.1}" x2="{LEFT}" y2="{y:.1}" stroke="black"/><text x="{}" y="{:.1}" text-anchor="end">{v:.1}</text>"#,
            LEFT - 4.0,
            LEFT - 6.0,
            y + 4.0
        );
    }
    let ticks = (max_epoch as usize).min(10);
    for i in 0..=ticks {
        let e = (max_epoch * i as f64 / ticks as f64).round();
        let x = sx(e);
        let _ = writeln!(
            s,
            r#"<line x1="{x:.1}" y1="{}" x2="{x:.1}" y2="{}" stroke="black"/><text x="{x:.1}" y="{}" text-anchor="middle">{e}</text>"#,
            TOP + plot_h,
            TOP + plot_h + 4.0,
            TOP + plot_h + 18.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">epoch</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">error (%)</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0
    );

    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        for (split, dash) in [(Split::Train, ""), (Split::Test, r#" stroke-dasharray="6 4""#)] {
            let pts = points(ser.metrics, split);
            if pts.is_empty() {
                continue;
            }
            let path: Vec<String> = pts.iter().map(|&(e, v)| format!("{:.1},{:.1}", sx(e), sy(v))).collect();
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>"#,
                path.join(" ")
            );
        }
        let ly = TOP + 16.0 * i as f64 + 8.0;
        let lx = WIDTH - RIGHT + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="1.5"/><text x="{}" y="{}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(&ser.label)
        );
    }
    s.push_str("</svg>\n");
    s
}
