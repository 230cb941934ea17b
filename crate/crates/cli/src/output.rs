//! File writers for reports: CSV cells, PGM heatmaps and JSON.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use mmfuse::Tensor;
use serde::Serialize;

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_text(path, &s)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Quotes a CSV field when it needs it.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn csv_line(fields: &[String]) -> String {
    let mut line = fields.iter().map(|f| csv_field(f)).collect::<Vec<_>>().join(",");
    line.push('\n');
    line
}

/// Row-major grid of a 2-D tensor, one image row per line.
pub fn grid_csv(t: &Tensor) -> String {
    let w = t.shape()[1];
    let mut out = String::new();
    for row in t.data().chunks(w) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "{}", cells.join(","));
    }
    out
}

/// Binary 8-bit PGM; `lo..=hi` maps onto `0..=255`.
pub fn pgm(t: &Tensor, lo: f64, hi: f64) -> Vec<u8> {
    let (h, w) = (t.shape()[0], t.shape()[1]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(t.data().iter().map(|&v| {
        let x = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
        (x * 255.0).round() as u8
    }));
    out
}

/// Writes `stem.pgm` and `stem.csv`.
pub fn write_heatmap(dir: &Path, stem: &str, t: &Tensor, lo: f64, hi: f64) -> Result<()> {
    let pgm_path = dir.join(format!("{stem}.pgm"));
    fs::write(&pgm_path, pgm(t, lo, hi)).with_context(|| format!("writing {}", pgm_path.display()))?;
    write_text(&dir.join(format!("{stem}.csv")), &grid_csv(t))
}
