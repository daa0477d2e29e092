//! Output directory, schema-versioned JSON and fixed-precision CSV.
//!
//! JSON documents carry `schema_version`, the command and the configuration
//! hash. Wall-clock timings are written to a separate `timings.json` so that
//! every other file is byte-identical across reruns with the same
//! configuration and seed.

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::CliError;

/// Version of the JSON and CSV layouts.
pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable that selects the output directory when `--out` is
/// not given.
pub const OUT_DIR_ENV: &str = "INSENS_OUT_DIR";

/// Default output directory.
pub const DEFAULT_OUT_DIR: &str = "insens-out";

/// Output directory: the `--out` flag, then the environment, then the default.
pub fn resolve_out_dir(flag: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    match std::env::var_os(OUT_DIR_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from(DEFAULT_OUT_DIR),
    }
}

/// A created output directory.
pub struct OutDir {
    root: PathBuf,
}

fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

impl OutDir {
    /// Create the directory (and parents) if needed.
    pub fn create(root: PathBuf) -> Result<Self, CliError> {
        std::fs::create_dir_all(&root).map_err(|e| io_err(&root, e))?;
        Ok(Self { root })
    }

    /// Path of a file inside the directory.
    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Write pretty JSON with a trailing newline.
    pub fn write_json(&self, name: &str, value: &Value) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        let mut text =
            serde_json::to_string_pretty(value).map_err(|e| CliError::Output(e.to_string()))?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| io_err(&path, e))?;
        Ok(path)
    }

    /// Write a CSV table.
    pub fn write_csv(&self, name: &str, table: &Table) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Output(e.to_string()))?;
        w.write_record(&table.header)
            .map_err(|e| CliError::Output(e.to_string()))?;
        for row in &table.rows {
            w.write_record(row)
                .map_err(|e| CliError::Output(e.to_string()))?;
        }
        w.flush().map_err(|e| io_err(&path, e))?;
        Ok(path)
    }
}

/// A CSV table of preformatted cells.
#[derive(Debug, Clone, Default)]
pub struct Table {
    /// Column names.
    pub header: Vec<String>,
    /// Rows.
    pub rows: Vec<Vec<String>>,
}

impl Table {
    /// Empty table with the given columns.
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    /// Append a row.
    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }
}

/// A float with 17 significant digits (round-trip exact); non-finite values
/// are written as `nan`, `inf`, `-inf`.
pub fn num(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x.is_nan() {
        "nan".into()
    } else if x > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

/// An optional float, empty when absent.
pub fn opt_num(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

/// Serialize a report into a JSON value.
pub fn to_value<T: Serialize>(x: &T) -> Result<Value, CliError> {
    serde_json::to_value(x).map_err(|e| CliError::Output(e.to_string()))
}

/// Remove every `seconds` entry from a JSON tree and return them keyed by
/// their path, so the remaining document is deterministic.
pub fn extract_timings(value: &mut Value, prefix: &str, out: &mut Map<String, Value>) {
    match value {
        Value::Object(map) => {
            if let Some(t) = map.remove("seconds") {
                out.insert(
                    if prefix.is_empty() {
                        "total".into()
                    } else {
                        prefix.to_string()
                    },
                    t,
                );
            }
            for (k, v) in map.iter_mut() {
                let p = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                extract_timings(v, &p, out);
            }
        }
        Value::Array(items) => {
            for (i, v) in items.iter_mut().enumerate() {
                extract_timings(v, &format!("{prefix}[{i}]"), out);
            }
        }
        _ => {}
    }
}

/// Envelope shared by every JSON document.
pub fn envelope(command: &str, config_hash: &str, seed: u64) -> Map<String, Value> {
    let mut m = Map::new();
    m.insert("schema_version".into(), Value::from(SCHEMA_VERSION));
    m.insert("command".into(), Value::from(command));
    m.insert("config_hash".into(), Value::from(config_hash));
    m.insert("seed".into(), Value::from(seed));
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_round_trip() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 6.02e23] {
            assert_eq!(num(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(num(f64::NAN), "nan");
        assert_eq!(num(f64::NEG_INFINITY), "-inf");
    }

    #[test]
    fn timings_are_extracted() {
        let mut v = serde_json::json!({"a": {"seconds": 1.5, "x": 2}, "b": [{"seconds": 3.0}]});
        let mut t = Map::new();
        extract_timings(&mut v, "", &mut t);
        assert_eq!(v, serde_json::json!({"a": {"x": 2}, "b": [{}]}));
        assert_eq!(t["a"], 1.5);
        assert_eq!(t["b[0]"], 3.0);
    }
}
