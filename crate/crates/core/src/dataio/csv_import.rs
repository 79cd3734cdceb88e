//! Plain CSV ingestion: one series per file, one column per channel.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::{Split, TimeSeriesDataset, TimeSeriesSample};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, Default)]
pub struct CsvOptions {
    /// The first column holds observation times rather than a channel.
    pub time_column: bool,
}

/// Reads one series. A leading row that does not parse as numbers is
/// treated as a header.
pub fn read_series_csv(path: &Path, options: &CsvOptions, label: Option<usize>) -> Result<TimeSeriesSample> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 1;
        let record = record.map_err(|e| Error::Data { line, msg: e.to_string() })?;
        let parsed: std::result::Result<Vec<f64>, _> = record.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(row) => rows.push(row),
            Err(_) if i == 0 => continue,
            Err(e) => return Err(Error::Data { line, msg: format!("{}: {e}", path.display()) }),
        }
    }
    let width = rows.first().map_or(0, Vec::len);
    let skip = usize::from(options.time_column);
    if width <= skip {
        return Err(Error::Dataset(format!("{}: no channel columns", path.display())));
    }
    let d = width - skip;
    let mut times = Vec::with_capacity(rows.len());
    let mut values = Vec::with_capacity(rows.len() * d);
    for row in &rows {
        if options.time_column {
            times.push(row[0]);
        }
        values.extend_from_slice(&row[skip..]);
    }
    let len = rows.len();
    let values = Tensor::new([len.max(1), d], values).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    TimeSeriesSample::new(values, options.time_column.then_some(times), label)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

#[derive(Deserialize)]
struct ManifestRow {
    file: PathBuf,
    #[serde(default)]
    label: Option<usize>,
    split: Split,
}

/// Builds a dataset from a manifest CSV with columns `file,label,split`.
/// Relative file paths resolve against the manifest's directory.
pub fn convert_manifest(
    manifest: &Path,
    options: &CsvOptions,
    classes: Option<usize>,
    freq_hz: Option<f64>,
) -> Result<TimeSeriesDataset> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(manifest)
        .map_err(|e| Error::Dataset(format!("{}: {e}", manifest.display())))?;
    let mut entries = Vec::new();
    for (i, row) in reader.deserialize::<ManifestRow>().enumerate() {
        // Line 1 is the header.
        let row = row.map_err(|e| Error::Data { line: i + 2, msg: e.to_string() })?;
        entries.push(row);
    }
    entries.sort_by_key(|r| r.split as u8);
    let classes = classes.or_else(|| entries.iter().filter_map(|r| r.label).max().map(|m| m + 1));
    let mut samples = Vec::with_capacity(entries.len());
    let mut splits = Vec::with_capacity(entries.len());
    for row in entries {
        let path = if row.file.is_absolute() { row.file.clone() } else { base.join(&row.file) };
        samples.push(read_series_csv(&path, options, row.label)?);
        splits.push(row.split);
    }
    TimeSeriesDataset::new(samples, splits, classes, freq_hz)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    #[test]
    fn header_and_time_column() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        fs::write(&p, "t,x,y\n0,1,2\n0.5,3,4\n2,5,6\n").unwrap();
        let s = read_series_csv(&p, &CsvOptions { time_column: true }, Some(1)).unwrap();
        assert_eq!(s.values().shape(), &[3, 2]);
        assert_eq!(s.timestamps().unwrap(), &[0.0, 0.5, 2.0]);
        assert_eq!(s.channel(1), vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn bad_cell_names_its_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        fs::write(&p, "1\n2\nx\n4\n").unwrap();
        let err = read_series_csv(&p, &CsvOptions::default(), None).unwrap_err();
        assert!(matches!(err, Error::Data { line: 3, .. }), "{err}");
    }

    #[test]
    fn manifest_orders_splits() {
        let dir = tempfile::tempdir().unwrap();
        for (name, body) in [("a.csv", "1\n2\n3\n"), ("b.csv", "3\n2\n1\n")] {
            fs::write(dir.path().join(name), body).unwrap();
        }
        let m = dir.path().join("manifest.csv");
        fs::write(&m, "file,label,split\na.csv,0,test\nb.csv,1,train\n").unwrap();
        let ds = convert_manifest(&m, &CsvOptions::default(), None, None).unwrap();
        assert_eq!(ds.num_classes(), Some(2));
        assert_eq!(ds.split_of(0), Split::Train);
        assert_eq!(ds.sample(0).label(), Some(1));
    }
}
