//! Result files: metrics and ledger CSVs, JSON summaries, a UA-vs-bytes SVG
//! chart and a manifest listing everything written.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use crate::config::pairs_to_map;
use crate::distill::write_records_csv;
use crate::engine::{RoundMetrics, RunResult};
use crate::error::{Error, Result};
use crate::transport::Direction;

pub const PLOT_FILE: &str = "ua_vs_bytes.svg";
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EmitOptions {
    /// Also dump the final cache contents per algorithm.
    pub export_cache: bool,
}

pub fn write_metrics_csv<W: Write>(metrics: &[RoundMetrics], mut out: W) -> std::io::Result<()> {
    writeln!(out, "round,client,accuracy,best_so_far,cum_bytes_up,cum_bytes_down")?;
    for m in metrics {
        for (k, (a, b)) in m.accuracy.iter().zip(&m.best_so_far).enumerate() {
            writeln!(
                out,
                "{},{k},{a},{b},{},{}",
                m.round, m.cum_bytes_up, m.cum_bytes_down
            )?;
        }
    }
    Ok(())
}

/// Final UA, byte totals, per-round UA/bytes and the config echo.
pub fn summary_json(r: &RunResult) -> Value {
    let per_round: Vec<Value> = r
        .metrics
        .iter()
        .map(|m| {
            json!({
                "round": m.round,
                "average_ua": m.average_ua,
                "cum_bytes_up": m.cum_bytes_up,
                "cum_bytes_down": m.cum_bytes_down,
                "online": m.online.iter().filter(|&&o| o).count(),
            })
        })
        .collect();
    let up = r.ledger.total(Direction::Uplink);
    let down = r.ledger.total(Direction::Downlink);
    json!({
        "algorithm": r.algorithm.name(),
        "final_average_ua": r.final_average_ua(),
        "total_bytes": up + down,
        "total_bytes_up": up,
        "total_bytes_down": down,
        "rounds": per_round,
        "archs": r.archs,
        "param_counts": r.param_counts,
        "config": pairs_to_map(&r.cfg.to_pairs()),
    })
}

/// One `(x, y)` polyline per labeled series.
pub type Series = (String, Vec<(f64, f64)>);

/// `(cumulative bytes, average UA)` per round.
pub fn ua_vs_bytes(r: &RunResult) -> Series {
    let pts = r
        .metrics
        .iter()
        .map(|m| ((m.cum_bytes_up + m.cum_bytes_down) as f64, m.average_ua))
        .collect();
    (r.algorithm.name().to_string(), pts)
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line chart of average UA against cumulative bytes.
pub fn render_svg(title: &str, series: &[Series]) -> String {
    let (w, h) = (640.0, 420.0);
    let (left, right, top, bottom) = (70.0, 160.0, 40.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let xmax = series
        .iter()
        .flat_map(|s| s.1.iter().map(|p| p.0))
        .fold(0.0_f64, f64::max)
        .max(1.0);
    let sx = |x: f64| left + pw * x / xmax;
    let sy = |y: f64| top + ph * (1.0 - y.clamp(0.0, 1.0));

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, left + pw / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{left},{top} V{} H{}" fill="none" stroke="black"/>"#,
        top + ph,
        left + pw
    );
    for i in 0..=5 {
        let f = i as f64 / 5.0;
        let y = sy(f);
        let x = sx(xmax * f);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{f:.1}</text>"#, left - 6.0, y + 4.0);
        let _ = writeln!(s, r##"<line x1="{left}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/>"##, left + pw);
        let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{}</text>"#, top + ph + 18.0, format_bytes(xmax * f));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">cumulative bytes</text>"#, left + pw / 2.0, h - 8.0);
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">average UA</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );
    for (i, (label, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let d: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline class="series" data-label="{}" points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            escape(label),
            d.join(" ")
        );
        let ly = top + 14.0 + 18.0 * i as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(s, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, lx + 20.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, lx + 26.0, ly + 4.0, escape(label));
    }
    s.push_str("</svg>\n");
    s
}

fn format_bytes(b: f64) -> String {
    if b >= 1e6 {
        format!("{:.1}M", b / 1e6)
    } else if b >= 1e3 {
        format!("{:.0}k", b / 1e3)
    } else {
        format!("{b:.0}")
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

/// Writes every file for one grid cell into `out_dir` and returns the paths
/// in write order. File names depend only on the algorithm names.
pub fn emit_outputs(results: &[RunResult], out_dir: &Path, opts: EmitOptions) -> Result<Vec<PathBuf>> {
    if results.is_empty() {
        return Err(Error::Input("no results to emit".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for r in results {
        let name = r.algorithm.name();

        let path = out_dir.join(format!("{name}_metrics.csv"));
        let mut f = create(&path)?;
        write_metrics_csv(&r.metrics, &mut f)
            .and_then(|_| f.flush())
            .map_err(|e| Error::io(&path, e))?;
        written.push(path);

        let path = out_dir.join(format!("{name}_ledger.csv"));
        let mut f = create(&path)?;
        r.ledger
            .write_csv(&mut f)
            .and_then(|_| f.flush())
            .map_err(|e| Error::io(&path, e))?;
        written.push(path);

        let path = out_dir.join(format!("{name}_summary.json"));
        let text = serde_json::to_string_pretty(&summary_json(r)).expect("summary serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        written.push(path);

        if opts.export_cache && !r.cache_snapshot.is_empty() {
            let path = out_dir.join(format!("{name}_cache.csv"));
            let mut f = create(&path)?;
            write_records_csv(&r.cache_snapshot, &mut f)
                .and_then(|_| f.flush())
                .map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
    }

    let series: Vec<Series> = results.iter().map(ua_vs_bytes).collect();
    let title = out_dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    let path = out_dir.join(PLOT_FILE);
    fs::write(&path, render_svg(&title, &series)).map_err(|e| Error::io(&path, e))?;
    written.push(path);

    let path = out_dir.join(MANIFEST_FILE);
    let mut text = String::new();
    for p in &written {
        if let Some(n) = p.file_name() {
            let _ = writeln!(text, "{}", n.to_string_lossy());
        }
    }
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}
