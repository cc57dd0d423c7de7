//! Merging training logs and drawing reward curves as SVG.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::trainer::LOG_HEADER;

/// A parsed training log: run label plus the raw CSV records.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedLog {
    pub name: String,
    pub records: Vec<Vec<String>>,
}

impl NamedLog {
    pub fn parse(name: impl Into<String>, text: &str) -> Result<Self> {
        let name = name.into();
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default().trim();
        if header != LOG_HEADER {
            return Err(Error::Format(format!(
                "log {name:?} has header {header:?}, expected {LOG_HEADER:?}"
            )));
        }
        let width = LOG_HEADER.split(',').count();
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: Vec<String> = line.split(',').map(str::to_string).collect();
            if rec.len() != width {
                return Err(Error::Format(format!(
                    "log {name:?} row {} has {} fields",
                    i + 1,
                    rec.len()
                )));
            }
            records.push(rec);
        }
        Ok(Self { name, records })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let name = path
            .parent()
            .and_then(|p| p.file_name())
            .or_else(|| path.file_stem())
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into());
        Self::parse(name, &std::fs::read_to_string(path)?)
    }

    /// `(step, eval reward)` points; falls back to the per-step mean group
    /// reward when the log holds no evaluations.
    pub fn curve(&self) -> Vec<(f64, f64)> {
        let pick = |col: usize| -> Vec<(f64, f64)> {
            self.records
                .iter()
                .filter_map(|r| Some((r[0].parse().ok()?, r[col].parse().ok()?)))
                .collect()
        };
        let eval = pick(2);
        if eval.is_empty() {
            pick(1)
        } else {
            eval
        }
    }
}

pub fn merged_csv(logs: &[NamedLog]) -> String {
    let mut s = format!("run,{LOG_HEADER}\n");
    for log in logs {
        for r in &log.records {
            let _ = writeln!(s, "{},{}", log.name, r.join(","));
        }
    }
    s
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
];

/// Reward-versus-step chart with one polyline per log and a legend.
pub fn svg_chart(logs: &[NamedLog]) -> String {
    let (w, h, m) = (640.0, 400.0, 50.0);
    let curves: Vec<Vec<(f64, f64)>> = logs.iter().map(NamedLog::curve).collect();
    let pts = curves.iter().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
    let sy = |y: f64| h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{cx}\" y=\"{lb}\" text-anchor=\"middle\" font-size=\"12\">step</text>\n\
         <text x=\"12\" y=\"{cy}\" font-size=\"12\" transform=\"rotate(-90 12 {cy})\" text-anchor=\"middle\">eval reward</text>\n",
        b = h - m,
        r = w - m,
        cx = w / 2.0,
        lb = h - 12.0,
        cy = h / 2.0,
    );
    for (x, y, label) in [(m, h - m + 16.0, x0), (w - m, h - m + 16.0, x1)] {
        let _ = writeln!(
            s,
            "<text x=\"{x}\" y=\"{y}\" font-size=\"10\" text-anchor=\"middle\">{label}</text>"
        );
    }
    for (y, label) in [(h - m, y0), (m, y1)] {
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{y}\" font-size=\"10\" text-anchor=\"end\">{label:.3}</text>",
            m - 4.0
        );
    }
    for (i, (log, curve)) in logs.iter().zip(&curves).enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = curve
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            "<polyline class=\"curve\" fill=\"none\" stroke=\"{colour}\" stroke-width=\"2\" points=\"{}\"/>",
            points.join(" ")
        );
        let ly = m + 16.0 * i as f64;
        let _ = writeln!(
            s,
            "<line x1=\"{a}\" y1=\"{ly}\" x2=\"{b}\" y2=\"{ly}\" stroke=\"{colour}\" stroke-width=\"2\"/>\
             <text class=\"legend\" x=\"{c}\" y=\"{ty}\" font-size=\"11\">{}</text>",
            escape(&log.name),
            a = w - m - 140.0,
            b = w - m - 120.0,
            c = w - m - 115.0,
            ty = ly + 4.0,
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Writes `curves.svg` and `merged.csv` into `out_dir`.
pub fn export_curves(logs: &[NamedLog], out_dir: &Path) -> Result<()> {
    if logs.is_empty() {
        return Err(Error::InvalidArgument("no logs to export".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    write_atomic(&out_dir.join("curves.svg"), svg_chart(logs).as_bytes())?;
    write_atomic(&out_dir.join("merged.csv"), merged_csv(logs).as_bytes())
}
