//! Artifact writing: per-run output directories, CSV tables, JSON reports.
//! No timestamps, hostnames or float rounding anywhere — rerunning a config
//! must reproduce every byte.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::Value;

use rkflow_core::latent::LatentState;

pub struct OutDir {
    root: PathBuf,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)
            .with_context(|| format!("creating output directory {}", root.display()))?;
        Ok(OutDir { root: root.to_path_buf() })
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn write_text(&self, name: &str, text: &str) -> Result<PathBuf> {
        let path = self.root.join(name);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn write_json(&self, name: &str, value: &Value) -> Result<PathBuf> {
        let text = serde_json::to_string_pretty(value).context("serializing report")?;
        self.write_text(name, &(text + "\n"))
    }
}

/// Shortest-roundtrip float formatting (the default `Display`), so parsing
/// the CSV back recovers the exact value.
pub fn fmt_f64(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".to_string()
    } else if v == f64::NEG_INFINITY {
        "-inf".to_string()
    } else {
        format!("{v}")
    }
}

/// JSON value for a float, with the +-infinity sentinel spelled out (JSON
/// numbers cannot carry it).
pub fn json_f64(v: f64) -> Value {
    match serde_json::Number::from_f64(v) {
        Some(n) => Value::Number(n),
        None => Value::String(fmt_f64(v)),
    }
}

pub struct CsvTable {
    text: String,
    columns: usize,
}

impl CsvTable {
    pub fn new(header: &[&str]) -> Self {
        CsvTable { text: header.join(",") + "\n", columns: header.len() }
    }

    pub fn row(&mut self, cells: &[String]) {
        assert_eq!(cells.len(), self.columns, "csv row width");
        self.text.push_str(&cells.join(","));
        self.text.push('\n');
    }

    pub fn finish(self) -> String {
        self.text
    }
}

/// Matrix CSV: one row per line, exact floats.
pub fn matrix_csv(m: &rkflow_core::linalg::Mat) -> String {
    let mut out = String::new();
    for i in 0..m.rows() {
        let cells: Vec<String> = m.row(i).iter().map(|&v| fmt_f64(v)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

/// Trajectory CSV: header t,x0..x{n-1}, one row per node.
pub fn trajectory_csv(trajectory: &[(f64, LatentState)]) -> String {
    let n = trajectory.first().map_or(0, |(_, z)| z.len());
    let mut header: Vec<String> = vec!["t".to_string()];
    header.extend((0..n).map(|i| format!("x{i}")));
    let mut out = header.join(",") + "\n";
    for (t, z) in trajectory {
        let mut cells = vec![fmt_f64(*t)];
        cells.extend(z.data().iter().map(|&v| fmt_f64(v)));
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}
