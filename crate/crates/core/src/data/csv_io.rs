//! CSV ingestion with dense label remapping.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SplitRole};
use crate::error::{Error, Result};

/// How to read a labeled CSV: which column holds the class label, which
/// columns to drop (identifiers etc.), and the field delimiter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvSchema {
    pub label_column: String,
    #[serde(default)]
    pub ignore_columns: Vec<String>,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
}

fn default_delimiter() -> char {
    ','
}

impl CsvSchema {
    pub fn new(label_column: impl Into<String>) -> Self {
        Self {
            label_column: label_column.into(),
            ignore_columns: Vec::new(),
            delimiter: ',',
        }
    }

    pub fn ignore(mut self, column: impl Into<String>) -> Self {
        self.ignore_columns.push(column.into());
        self
    }
}

/// Mapping from raw label strings to dense class indices, persisted with
/// results so predictions can be translated back.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelMap {
    pub classes: Vec<String>,
}

impl LabelMap {
    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// Load a headered CSV into a [`Dataset`].
///
/// Features are every non-ignored, non-label column, parsed as `f64` in
/// header order. Label strings map to dense indices in sorted order so the
/// mapping does not depend on row order. Parse failures name the offending
/// data row (1-based, excluding the header).
pub fn load_csv_dataset(path: &Path, schema: &CsvSchema) -> Result<(Dataset, LabelMap)> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter as u8)
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| Error::Ingest(format!("cannot open {}: {e}", path.display())))?;

    let headers = reader
        .headers()
        .map_err(|e| Error::Ingest(format!("bad header: {e}")))?
        .clone();
    let label_idx = headers
        .iter()
        .position(|h| h == schema.label_column)
        .ok_or_else(|| {
            Error::Ingest(format!("label column '{}' not found", schema.label_column))
        })?;
    let feature_idx: Vec<usize> = headers
        .iter()
        .enumerate()
        .filter(|(i, h)| *i != label_idx && !schema.ignore_columns.iter().any(|c| c == h))
        .map(|(i, _)| i)
        .collect();
    if feature_idx.is_empty() {
        return Err(Error::Ingest("no feature columns remain".into()));
    }

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut raw_labels: Vec<String> = Vec::new();
    for (row_no, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Ingest(format!("row {}: {e}", row_no + 1)))?;
        let mut row = Vec::with_capacity(feature_idx.len());
        for &i in &feature_idx {
            let field = record.get(i).ok_or_else(|| {
                Error::Ingest(format!("row {}: missing field {}", row_no + 1, &headers[i]))
            })?;
            let value: f64 = field.trim().parse().map_err(|_| {
                Error::Ingest(format!(
                    "row {}: non-numeric value '{}' in column '{}'",
                    row_no + 1,
                    field,
                    &headers[i]
                ))
            })?;
            if !value.is_finite() {
                return Err(Error::Ingest(format!(
                    "row {}: non-finite value in column '{}'",
                    row_no + 1,
                    &headers[i]
                )));
            }
            row.push(value);
        }
        rows.push(row);
        raw_labels.push(record.get(label_idx).unwrap_or("").trim().to_string());
    }
    if rows.is_empty() {
        return Err(Error::Ingest("csv contains no data rows".into()));
    }

    let mut class_set: BTreeMap<String, usize> = BTreeMap::new();
    for label in &raw_labels {
        let next = class_set.len();
        class_set.entry(label.clone()).or_insert(next);
    }
    // Reindex in sorted order for a row-order-independent mapping.
    let classes: Vec<String> = class_set.keys().cloned().collect();
    let dense: BTreeMap<&String, usize> = classes.iter().enumerate().map(|(i, c)| (c, i)).collect();
    let y: Vec<usize> = raw_labels.iter().map(|l| dense[l]).collect();

    let d = feature_idx.len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let x = Array2::from_shape_vec((y.len(), d), flat)
        .map_err(|e| Error::Shape(format!("csv reshape: {e}")))?;
    let dataset = Dataset::new(x, y, classes.len(), SplitRole::Unsplit)?;
    Ok((dataset, LabelMap { classes }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_csv(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_toy_csv() {
        let f = write_csv("a,b,target\n1.0,2.0,cat\n3.5,4.0,dog\n");
        let (ds, map) = load_csv_dataset(f.path(), &CsvSchema::new("target")).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.n_features(), 2);
        assert_eq!(map.classes, vec!["cat", "dog"]);
        assert_eq!(ds.y, vec![0, 1]);
        assert_eq!(ds.x[[1, 0]], 3.5);
    }

    #[test]
    fn label_mapping_is_row_order_independent() {
        let f1 = write_csv("a,target\n1,z\n2,a\n");
        let f2 = write_csv("a,target\n2,a\n1,z\n");
        let (_, m1) = load_csv_dataset(f1.path(), &CsvSchema::new("target")).unwrap();
        let (_, m2) = load_csv_dataset(f2.path(), &CsvSchema::new("target")).unwrap();
        assert_eq!(m1.classes, m2.classes);
    }

    #[test]
    fn ignored_columns_are_dropped() {
        let f = write_csv("id,a,target\n9,1.0,x\n8,2.0,y\n");
        let schema = CsvSchema::new("target").ignore("id");
        let (ds, _) = load_csv_dataset(f.path(), &schema).unwrap();
        assert_eq!(ds.n_features(), 1);
        assert_eq!(ds.x[[0, 0]], 1.0);
    }

    #[test]
    fn bad_value_error_names_the_row() {
        let f = write_csv("a,target\n1.0,x\nabc,y\n");
        let err = load_csv_dataset(f.path(), &CsvSchema::new("target")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 2"), "got: {msg}");
        assert!(msg.contains("abc"));
    }

    #[test]
    fn missing_label_column_errors() {
        let f = write_csv("a,b\n1,2\n");
        assert!(load_csv_dataset(f.path(), &CsvSchema::new("target")).is_err());
    }
}
