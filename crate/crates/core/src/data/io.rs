//! CSV corpus files: header `phone_id,f1,...,f9,label`, one row per sample.

use std::collections::BTreeMap;
use std::path::Path;

use super::sample::{PhoneDataset, Role, Sample, FEATURE_NAMES, N_FEATURES};
use crate::error::{Error, Result};

const ID_COLUMN: &str = "phone_id";
const LABEL_COLUMN: &str = "label";

/// Reads a corpus file. Phones appear in first-seen order; every phone starts
/// as a contributor until roles are assigned.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Vec<PhoneDataset>> {
    let path = path.as_ref();
    let parse_err = |row: usize, detail: String| Error::Parse {
        path: path.to_path_buf(),
        row,
        detail,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| parse_err(0, e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(1, format!("missing column `{name}`")))
    };
    let id_col = column(ID_COLUMN)?;
    let label_col = column(LABEL_COLUMN)?;
    let mut feature_cols = [0usize; N_FEATURES];
    for (slot, name) in feature_cols.iter_mut().zip(FEATURE_NAMES) {
        *slot = column(name)?;
    }

    let mut order: Vec<String> = Vec::new();
    let mut by_phone: BTreeMap<String, Vec<Sample>> = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        // Header is row 1.
        let row = i + 2;
        let record = record.map_err(|e| parse_err(row, e.to_string()))?;
        let cell = |col: usize, name: &str| -> Result<f64> {
            let raw = record
                .get(col)
                .ok_or_else(|| parse_err(row, format!("missing value for `{name}`")))?;
            let v: f64 = raw
                .parse()
                .map_err(|_| parse_err(row, format!("`{name}` is not numeric: {raw:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(row, format!("`{name}` is not finite")));
            }
            Ok(v)
        };
        let mut f = [0.0; N_FEATURES];
        for (j, (&col, name)) in feature_cols.iter().zip(FEATURE_NAMES).enumerate() {
            f[j] = cell(col, name)?;
        }
        if f[0] != 0.0 && f[0] != 1.0 {
            return Err(parse_err(row, format!("f1 must be 0 or 1, got {}", f[0])));
        }
        let label = cell(label_col, LABEL_COLUMN)?;
        let id = record
            .get(id_col)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| parse_err(row, "empty phone_id".to_owned()))?
            .to_owned();
        if !by_phone.contains_key(&id) {
            order.push(id.clone());
        }
        by_phone
            .entry(id)
            .or_default()
            .push(Sample::from_features(f, label));
    }
    order
        .into_iter()
        .map(|id| {
            let samples = by_phone.remove(&id).expect("id recorded");
            PhoneDataset::new(id, Role::Contributor, samples)
        })
        .collect()
}

pub fn save_csv(path: impl AsRef<Path>, corpus: &[PhoneDataset]) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(csv_io)?;
    let mut header = vec![ID_COLUMN];
    header.extend(FEATURE_NAMES);
    header.push(LABEL_COLUMN);
    w.write_record(&header).map_err(csv_io)?;
    for d in corpus {
        for s in &d.samples {
            let mut row = Vec::with_capacity(N_FEATURES + 2);
            row.push(d.phone_id.clone());
            row.extend(s.features().iter().map(|v| v.to_string()));
            row.push(s.label.to_string());
            w.write_record(&row).map_err(csv_io)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}
