//! SVG figures from a run's reports: training accuracy curves and nMI bars.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use crate::config::RunConfig;
use crate::error::{config_err, io_err, Result};

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
const W: f64 = 640.0;
const H: f64 = 400.0;
const M: f64 = 60.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn frame(title: &str, y_label: &str) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n\
         <text x=\"16\" y=\"{}\" transform=\"rotate(-90 16 {})\" text-anchor=\"middle\">{}</text>\n",
        W / 2.0,
        escape(title),
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    for i in 0..=4 {
        let v = i as f64 / 4.0;
        let y = H - M - v * (H - 2.0 * M);
        let _ = writeln!(s, "<line x1=\"{M}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"#ddd\"/>", W - M);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{v:.2}</text>", M - 6.0, y + 4.0);
    }
    let _ = writeln!(s, "<line x1=\"{M}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>", H - M, W - M, H - M);
    let _ = writeln!(s, "<line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{}\" stroke=\"black\"/>", H - M);
    s
}

/// Line chart of `(x, y)` series with `y` in `[0, 1]`.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let mut s = frame(title, y_label);
    let x_max = series.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)).fold(1.0_f64, f64::max);
    let px = |x: f64| M + x / x_max * (W - 2.0 * M);
    let py = |y: f64| H - M - y.clamp(0.0, 1.0) * (H - 2.0 * M);
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>", W / 2.0, H - 20.0, escape(x_label));
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{x_max}</text>", W - M, H - M + 16.0);
    for (i, (name, pts)) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{colour}\" stroke-width=\"2\" points=\"{}\"/>", points.join(" "));
        let ly = M + 6.0 + 16.0 * i as f64;
        let _ = writeln!(s, "<rect x=\"{}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{colour}\"/>", M + 10.0, ly - 9.0);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{ly}\">{}</text>", M + 26.0, escape(name));
    }
    s.push_str("</svg>\n");
    s
}

/// Bar chart of values in `[0, 1]`.
pub fn bar_chart(title: &str, y_label: &str, bars: &[(String, f64)]) -> String {
    let mut s = frame(title, y_label);
    let slot = (W - 2.0 * M) / bars.len().max(1) as f64;
    for (i, (name, v)) in bars.iter().enumerate() {
        let h = v.clamp(0.0, 1.0) * (H - 2.0 * M);
        let x = M + slot * i as f64 + slot * 0.15;
        let _ = writeln!(
            s,
            "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{h:.1}\" fill=\"{}\"/>",
            H - M - h,
            slot * 0.7,
            PALETTE[i % PALETTE.len()]
        );
        let cx = x + slot * 0.35;
        let _ = writeln!(s, "<text x=\"{cx:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{v:.3}</text>", H - M - h - 4.0);
        let ly = H - M + 14.0;
        let _ = writeln!(s, "<text x=\"{cx:.1}\" y=\"{ly}\" text-anchor=\"end\" font-size=\"10\" transform=\"rotate(-25 {cx:.1} {ly})\">{}</text>", escape(name));
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `report/accuracy.svg` from `metrics.jsonl` and, when the run has
/// been analysed, `report/nmi.svg` from `analysis.json`.
pub fn cmd_report(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let dir = cfg.run_dir();
    let metrics_path = dir.join("metrics.jsonl");
    if !metrics_path.exists() {
        return config_err(format!("no {}; run `refgame train` first", metrics_path.display()));
    }
    let text = std::fs::read_to_string(&metrics_path).map_err(io_err(&metrics_path))?;
    let mut curves: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line)?;
        if v["kind"] == "epoch" {
            let (Some(name), Some(epoch), Some(acc)) = (v["variant"].as_str(), v["epoch"].as_f64(), v["acc"].as_f64()) else {
                return config_err(format!("{}: malformed epoch line", metrics_path.display()));
            };
            curves.entry(name.to_string()).or_default().push((epoch + 1.0, acc));
        }
    }
    let out = dir.join("report");
    std::fs::create_dir_all(&out).map_err(io_err(&out))?;
    let mut written = Vec::new();
    let series: Vec<(String, Vec<(f64, f64)>)> = curves.into_iter().collect();
    let acc_path = out.join("accuracy.svg");
    std::fs::write(&acc_path, line_chart("Training game accuracy", "epoch", "accuracy", &series)).map_err(io_err(&acc_path))?;
    written.push(acc_path);
    let analysis_path = dir.join("analysis.json");
    if analysis_path.exists() {
        let text = std::fs::read_to_string(&analysis_path).map_err(io_err(&analysis_path))?;
        let v: serde_json::Value = serde_json::from_str(&text)?;
        let bars: Vec<(String, f64)> = v["results"]
            .as_array()
            .into_iter()
            .flatten()
            .filter_map(|e| {
                let name = format!("{} {} {}", e["variant"].as_str()?, e["source"].as_str()?, e["split"].as_str().unwrap_or(""));
                Some((name.trim().to_string(), e["report"]["nmi"].as_f64()?))
            })
            .collect();
        let nmi_path = out.join("nmi.svg");
        std::fs::write(&nmi_path, bar_chart("Protocol nMI", "nMI", &bars)).map_err(io_err(&nmi_path))?;
        written.push(nmi_path);
    }
    Ok(written)
}
