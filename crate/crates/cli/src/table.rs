//! CSV tables with a leading `# key=value ...` line recording the stage,
//! config checksum and seed they came from.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{CliError, Result, Stage};

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

/// Fixed six-decimal rendering used for every real-valued cell.
pub fn num(x: f64) -> String {
    format!("{x:.6}")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableMeta {
    pub stage: Stage,
    pub config_checksum: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Cell `name` of the first row whose first cell is `key`.
    pub fn get(&self, key: &str, name: &str) -> Option<&str> {
        let c = self.column(name)?;
        self.rows
            .iter()
            .find(|r| r[0] == key)
            .map(|r| r[c].as_str())
    }

    pub fn get_f64(&self, key: &str, name: &str) -> Option<f64> {
        self.get(key, name)?.parse().ok()
    }

    pub fn to_csv(&self, meta: &TableMeta) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        let body = String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8");
        format!(
            "# stage={} config_checksum={} seed={}\n{body}",
            meta.stage, meta.config_checksum, meta.seed
        )
    }

    pub fn parse(text: &str) -> std::result::Result<(BTreeMap<String, String>, Table), String> {
        let (first, body) = text.split_once('\n').ok_or("empty table")?;
        let meta = first
            .strip_prefix("# ")
            .ok_or("missing `# ` header line")?
            .split_whitespace()
            .filter_map(|kv| kv.split_once('='))
            .map(|(k, v)| (k.to_owned(), v.to_owned()))
            .collect();
        let mut r = csv::Reader::from_reader(body.as_bytes());
        let columns = r
            .headers()
            .map_err(|e| e.to_string())?
            .iter()
            .map(str::to_owned)
            .collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|rec| rec.iter().map(str::to_owned).collect()))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| e.to_string())?;
        Ok((meta, Table { columns, rows }))
    }
}

pub(crate) fn write_file(stage: Stage, path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|source| CliError::Io {
            stage,
            path: dir.to_path_buf(),
            source,
        })?;
    }
    std::fs::write(path, contents).map_err(|source| CliError::Io {
        stage,
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a table another stage produced, reporting which stage to run when it
/// is absent.
pub(crate) fn read_table(stage: Stage, path: &Path, producer: Stage) -> Result<Table> {
    let text = read_input(stage, path, producer)?;
    Table::parse(&text)
        .map(|(_, t)| t)
        .map_err(|e| crate::error::invalid(stage, format!("{}: {e}", path.display())))
}

pub(crate) fn read_input(stage: Stage, path: &Path, producer: Stage) -> Result<String> {
    if !path.exists() {
        return Err(CliError::MissingInput {
            stage,
            path: path.to_path_buf(),
            needs: producer,
        });
    }
    std::fs::read_to_string(path).map_err(|source| CliError::Io {
        stage,
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_roundtrip_keeps_header_fields() {
        let mut t = Table::new(&["method", "mae"]);
        t.push(vec!["D&S".into(), num(0.5)]);
        t.push(vec!["a,b".into(), num(1.0 / 3.0)]);
        let meta = TableMeta {
            stage: Stage::TruthinfBench,
            config_checksum: "abc".into(),
            seed: 7,
        };
        let text = t.to_csv(&meta);
        assert!(text.starts_with("# stage=truthinf-bench config_checksum=abc seed=7\n"));
        let (m, back) = Table::parse(&text).unwrap();
        assert_eq!(back, t);
        assert_eq!(m["seed"], "7");
        assert_eq!(back.get_f64("D&S", "mae"), Some(0.5));
        assert_eq!(back.get("a,b", "mae"), Some("0.333333"));
    }

    #[test]
    fn digest_of_empty_input() {
        assert_eq!(
            sha256_hex(b""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }
}
