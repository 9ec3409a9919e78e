use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// One `(model, multiple, scale)` cell of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub model: String,
    pub encoding: String,
    pub scale: f64,
    pub multiple: usize,
    pub eval_len: usize,
    /// Mean loss in nats; for a diverged model, the last finite training loss.
    pub loss_nats: Option<f64>,
    pub stderr: Option<f64>,
    pub tokens: usize,
    pub seed: u64,
    pub diverged: bool,
    /// Why the cell has no loss (for example a position table that is too short).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub git_describe: String,
    pub config_hash: String,
    pub timestamp_unix: u64,
}

impl ReportMeta {
    /// Metadata for the current checkout and the given config JSON.
    pub fn collect(config: &serde_json::Value) -> Self {
        let git_describe = std::process::Command::new("git")
            .args(["describe", "--always", "--dirty", "--tags"])
            .output()
            .ok()
            .filter(|o| o.status.success())
            .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
            .unwrap_or_else(|| "unknown".into());
        let timestamp_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            git_describe,
            config_hash: config_hash(config),
            timestamp_unix,
        }
    }
}

/// First 16 hex digits of the SHA-256 of the compact JSON.
pub fn config_hash(config: &serde_json::Value) -> String {
    let digest = Sha256::digest(config.to_string().as_bytes());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    /// Training sequence length the multiples refer to.
    pub train_seq_len: usize,
    pub rows: Vec<EvalRow>,
    pub metadata: ReportMeta,
}

pub const CSV_HEADER: &str = "model,encoding,scale,multiple,eval_len,loss_nats,stderr,tokens,seed,diverged";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl EvalReport {
    pub fn new(train_seq_len: usize, rows: Vec<EvalRow>, metadata: ReportMeta) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            train_seq_len,
            rows,
            metadata,
        }
    }

    /// Rows as CSV. Cells without a loss leave `loss_nats` and `stderr` empty.
    pub fn to_csv(&self) -> String {
        rows_csv(&self.rows)
    }
}

fn rows_csv(rows: &[EvalRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            csv_field(&r.model),
            csv_field(&r.encoding),
            r.scale,
            r.multiple,
            r.eval_len,
            opt(r.loss_nats),
            opt(r.stderr),
            r.tokens,
            r.seed,
            r.diverged
        );
    }
    out
}

/// Several reports merged into one artifact set.
#[derive(Clone, Debug, PartialEq)]
pub struct MergedReport {
    pub rows: Vec<EvalRow>,
    pub csv: String,
    pub json: serde_json::Value,
    pub svg: String,
}

/// Merges reports; rows are sorted by `(model, multiple, scale)`, ties kept
/// in input order.
pub fn compare_report(reports: &[EvalReport]) -> Result<MergedReport> {
    let first = reports.first().ok_or_else(|| Error::Merge("no reports to merge".into()))?;
    for r in reports {
        if r.schema_version != first.schema_version {
            return Err(Error::Merge(format!(
                "schema versions differ: {} vs {}",
                first.schema_version, r.schema_version
            )));
        }
    }
    let mut rows: Vec<EvalRow> = reports.iter().flat_map(|r| r.rows.iter().cloned()).collect();
    rows.sort_by(|a, b| {
        a.model
            .cmp(&b.model)
            .then(a.multiple.cmp(&b.multiple))
            .then(a.scale.total_cmp(&b.scale))
    });
    let json = serde_json::json!({
        "schema_version": first.schema_version,
        "metadata": reports.iter().map(|r| &r.metadata).collect::<Vec<_>>(),
        "train_seq_len": reports.iter().map(|r| r.train_seq_len).collect::<Vec<_>>(),
        "rows": rows,
    });
    Ok(MergedReport {
        csv: rows_csv(&rows),
        svg: loss_curve_svg(&rows),
        json,
        rows,
    })
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Loss against evaluation length (log2 x-axis), one line per `(model, scale)`.
pub fn loss_curve_svg(rows: &[EvalRow]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 170.0, 20.0, 50.0);
    let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for r in rows {
        let Some(loss) = r.loss_nats else { continue };
        let name = if r.scale == 1.0 {
            r.model.clone()
        } else {
            format!("{} x{}", r.model, r.scale)
        };
        let x = (r.eval_len as f64).log2();
        match series.iter_mut().find(|s| s.0 == name) {
            Some(s) => s.1.push((x, loss)),
            None => series.push((name, vec![(x, loss)])),
        }
    }
    let pts = series.iter().flat_map(|s| s.1.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x0 > x1 {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-9 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-9 {
        y1 = y0 + 1.0;
    }
    let pw = w - left - right;
    let ph = h - top - bottom;
    let px = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| top + (y1 - y) / (y1 - y0) * ph;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">
<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>
<line x1="{left}" y1="{yb}" x2="{xr}" y2="{yb}" stroke="black"/>
<line x1="{left}" y1="{top}" x2="{left}" y2="{yb}" stroke="black"/>
<text x="{cx}" y="{lx}" text-anchor="middle">evaluation length (tokens)</text>
<text x="14" y="{cy}" text-anchor="middle" transform="rotate(-90 14 {cy})">loss (nats)</text>"#,
        yb = top + ph,
        xr = left + pw,
        cx = left + pw / 2.0,
        lx = h - 10.0,
        cy = top + ph / 2.0,
    );
    let mut tick = x0.floor();
    while tick <= x1 + 1e-9 {
        if tick >= x0 - 1e-9 {
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                px(tick),
                top + ph + 16.0,
                2f64.powf(tick).round()
            );
        }
        tick += 1.0;
    }
    for i in 0..=4 {
        let y = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.2}</text>"#,
            left - 6.0,
            py(y) + 4.0,
            y
        );
    }
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut pts = pts.clone();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            path.join(" ")
        );
        for &(x, y) in &pts {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, px(x), py(y));
        }
        let ly = top + 14.0 * (i as f64 + 1.0);
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            w - right + 10.0,
            w - right + 30.0,
            w - right + 36.0,
            ly + 4.0,
            xml_escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}
