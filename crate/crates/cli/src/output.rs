//! Result files: JSON summaries, CSV tables and two-column plot data.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::Value;

use crate::error::CliError;

/// Files produced by one command, held in memory until written.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct OutputSet {
    files: BTreeMap<String, String>,
}

impl OutputSet {
    pub fn insert(&mut self, name: impl Into<String>, contents: String) {
        self.files.insert(name.into(), contents);
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.files.get(name).map(String::as_str)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.files.keys().map(String::as_str)
    }

    pub fn write_to(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        for (name, contents) in &self.files {
            let path = dir.join(name);
            std::fs::write(&path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        }
        Ok(())
    }
}

/// One `#` comment line carrying the command, master seed and resolved
/// config as compact JSON.
pub fn provenance_line(command: &str, seed: u64, config: &Value) -> String {
    format!("# stablab {command} seed={seed} config={config}\n")
}

pub fn to_json_pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("JSON values always serialize");
    s.push('\n');
    s
}

/// Minimal CSV table writer; values are written with `Display`.
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn render(&self, preamble: &str) -> String {
        let mut out = String::from(preamble);
        out.push_str(&self.header.join(","));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join(","));
            out.push('\n');
        }
        out
    }
}

/// Two tab-separated columns `step value`, readable by gnuplot.
pub fn write_plot_tsv(preamble: &str, points: &[(f64, f64)]) -> String {
    let mut out = String::from(preamble);
    out.push_str("# step\tvalue\n");
    for (x, y) in points {
        out.push_str(&format!("{x}\t{y}\n"));
    }
    out
}

/// Parses the output of [`write_plot_tsv`]. Lines starting with `#` and
/// blank lines are skipped.
pub fn parse_plot_tsv(text: &str) -> Result<Vec<(f64, f64)>, CliError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cols = line.split('\t');
        let (Some(a), Some(b), None) = (cols.next(), cols.next(), cols.next()) else {
            return Err(CliError::Usage(format!("plot data line {} needs exactly two columns", n + 1)));
        };
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Usage(format!("plot data line {}: `{s}` is not a number", n + 1)))
        };
        out.push((parse(a)?, parse(b)?));
    }
    Ok(out)
}

/// Formats a float for CSV; non-finite values become `inf`, `-inf`, `NaN`.
pub fn num(v: f64) -> String {
    v.to_string()
}
