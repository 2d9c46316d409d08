//! Per-epoch curves as CSV and minimal SVG line charts.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use msfl_core::train::{LogKind, LogRecord, LOG_FILE};

const W: f64 = 640.0;
const H: f64 = 360.0;
const MARGIN: f64 = 48.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// `(name, points)` series on shared axes.
pub fn line_chart(title: &str, x_label: &str, series: &[(&str, Vec<(f64, f64)>)]) -> String {
    let pts = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let sy = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{title}</text>"#, W / 2.0);
    let _ = writeln!(
        s,
        r#"<path d="M{m} {t} L{m} {b} L{r} {b}" fill="none" stroke="black"/>"#,
        m = MARGIN,
        t = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN
    );
    for (v, y) in [(y0, H - MARGIN), (y1, MARGIN)] {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, MARGIN - 4.0, y + 4.0, fmt_tick(v));
    }
    for (v, x) in [(x0, MARGIN), (x1, W - MARGIN)] {
        let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{}</text>"#, H - MARGIN + 16.0, fmt_tick(v));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#, W / 2.0, H - 10.0);
    for (i, (name, points)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let d: Vec<String> = points
            .iter()
            .enumerate()
            .map(|(j, &(x, y))| format!("{}{:.2} {:.2}", if j == 0 { "M" } else { "L" }, sx(x), sy(y)))
            .collect();
        let _ = writeln!(s, r#"<path d="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, d.join(" "));
        let ly = MARGIN + 14.0 * i as f64;
        let _ = writeln!(s, r#"<text x="{}" y="{ly}" fill="{color}">{name}</text>"#, W - MARGIN - 120.0);
    }
    s.push_str("</svg>\n");
    s
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

/// Epoch summaries from the run's log (covering resumed runs too) as
/// `curves.csv`, `loss.svg` and `accuracy.svg`.
pub fn write_curves(dir: &Path) -> anyhow::Result<()> {
    let text = fs::read_to_string(dir.join(LOG_FILE))?;
    let mut epochs = Vec::new();
    for line in text.lines() {
        let r: LogRecord = serde_json::from_str(line)?;
        if r.kind == LogKind::Epoch {
            epochs.push(r);
        }
    }
    let mut csv = String::from("epoch,base_loss,penalty,train_accuracy,lr\n");
    for r in &epochs {
        let _ = writeln!(csv, "{},{},{},{},{}", r.epoch, r.base_loss, r.penalty, r.train_accuracy, r.lr);
    }
    fs::write(dir.join("curves.csv"), csv)?;
    let series = |f: fn(&LogRecord) -> f64| epochs.iter().map(|r| (r.epoch as f64, f(r))).collect::<Vec<_>>();
    fs::write(
        dir.join("loss.svg"),
        line_chart("training loss", "epoch", &[("base loss", series(|r| r.base_loss)), ("penalty", series(|r| r.penalty))]),
    )?;
    fs::write(
        dir.join("accuracy.svg"),
        line_chart("train accuracy", "epoch", &[("accuracy", series(|r| r.train_accuracy))]),
    )?;
    Ok(())
}
