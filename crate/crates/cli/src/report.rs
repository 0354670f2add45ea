//! Text report and CSV tables. Numbers carry 12 significant digits and are
//! printed without locale dependence.

use crate::CliError;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

/// Rounds to 12 significant digits and prints the shortest form of the
/// rounded value, in exponent notation outside `[1e-6, 1e15)`.
pub fn num(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let rounded: f64 = format!("{v:.11e}").parse().expect("formatted float parses");
    if (1e-6..1e15).contains(&rounded.abs()) {
        format!("{rounded}")
    } else {
        format!("{rounded:e}")
    }
}

pub fn nums(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| num(*x)).collect();
    format!("[{}]", parts.join(", "))
}

/// Structured `key: value` report with titled sections.
#[derive(Debug, Default)]
pub struct Report {
    text: String,
}

impl Report {
    pub fn new(command: &str) -> Self {
        let mut r = Self::default();
        r.line("command", command);
        r
    }

    pub fn section(&mut self, title: &str) {
        let _ = write!(self.text, "\n[{title}]\n");
    }

    pub fn line(&mut self, key: &str, value: impl AsRef<str>) {
        let _ = writeln!(self.text, "{key}: {}", value.as_ref());
    }

    pub fn value(&mut self, key: &str, v: f64) {
        self.line(key, num(v));
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join("report.txt");
        fs::write(&path, &self.text).map_err(|e| CliError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

pub fn write_table(dir: &Path, name: &str, header: &[String], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(dir.join(name))?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush().map_err(|e| CliError::Io {
        path: dir.join(name).display().to_string(),
        message: e.to_string(),
    })
}
