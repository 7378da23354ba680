//! Time-series containers, sliding-window extraction, min-max scaling and
//! CSV ingestion.

use std::path::Path;

use crate::error::{Result, XragError};

/// Denominator guard used by [`minmax_scale`]; keeps constant windows finite.
pub const MINMAX_EPS: f64 = 1e-8;

/// A univariate series with provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub values: Vec<f64>,
    pub source_id: String,
    pub name: String,
}

impl Series {
    pub fn new(values: Vec<f64>, source_id: impl Into<String>, name: impl Into<String>) -> Self {
        Series {
            values,
            source_id: source_id.into(),
            name: name.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// An input window of length T paired with the horizon of length L that
/// immediately follows it in the source series.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowPair {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub source_id: String,
    pub start_index: usize,
}

impl WindowPair {
    /// Window identity used for leakage checks: same source, same offset.
    pub fn identity(&self) -> (&str, usize) {
        (&self.source_id, self.start_index)
    }
}

/// A window mapped to [0, 1] with the statistics needed to invert the map.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaledWindow {
    pub values: Vec<f64>,
    pub min_val: f64,
    pub range_val: f64,
}

impl ScaledWindow {
    /// Maps a scaled value back to the original units.
    pub fn descale_value(&self, v: f64) -> f64 {
        v * (self.range_val + MINMAX_EPS) + self.min_val
    }

    pub fn descale(&self, vs: &[f64]) -> Vec<f64> {
        vs.iter().map(|&v| self.descale_value(v)).collect()
    }

    /// Inverse of [`minmax_scale`] applied to the stored values.
    pub fn invert(&self) -> Vec<f64> {
        self.descale(&self.values)
    }
}

/// Min-max scaling to [0, 1] with an epsilon-guarded denominator.
///
/// Constant windows map to all zeros. Panics on an empty slice; callers
/// always hold a full window.
pub fn minmax_scale(x: &[f64]) -> ScaledWindow {
    assert!(!x.is_empty(), "minmax_scale on empty window");
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &v in x {
        min = min.min(v);
        max = max.max(v);
    }
    let range = max - min;
    let denom = range + MINMAX_EPS;
    ScaledWindow {
        values: x.iter().map(|&v| (v - min) / denom).collect(),
        min_val: min,
        range_val: range,
    }
}

/// Scales an arbitrary slice with the statistics of an already-scaled window.
///
/// Used to express a horizon in the coordinate system of its input window.
pub fn scale_with(stats: &ScaledWindow, vs: &[f64]) -> Vec<f64> {
    let denom = stats.range_val + MINMAX_EPS;
    vs.iter().map(|&v| (v - stats.min_val) / denom).collect()
}

/// Cuts (x, y) window pairs at start indices 0, stride, 2·stride, …
pub fn make_windows(s: &Series, t: usize, l: usize, stride: usize) -> Result<Vec<WindowPair>> {
    assert!(t >= 1 && l >= 1 && stride >= 1, "degenerate window spec");
    let needed = t + l;
    if s.len() < needed {
        return Err(XragError::SeriesTooShort {
            source_id: s.source_id.clone(),
            len: s.len(),
            needed,
        });
    }
    let count = (s.len() - needed) / stride + 1;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let start = i * stride;
        out.push(WindowPair {
            x: s.values[start..start + t].to_vec(),
            y: s.values[start + t..start + needed].to_vec(),
            source_id: s.source_id.clone(),
            start_index: start,
        });
    }
    Ok(out)
}

/// Column selector for CSV ingestion.
#[derive(Clone, Debug)]
pub enum ColumnSel {
    Name(String),
    Index(usize),
}

impl std::fmt::Display for ColumnSel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ColumnSel::Name(n) => write!(f, "{n}"),
            ColumnSel::Index(i) => write!(f, "#{i}"),
        }
    }
}

/// Loads one column of a headered CSV file as a [`Series`].
///
/// Rows must be in chronological order. NaN and empty cells are rejected
/// with the offending line number (header is line 1).
pub fn load_csv(path: &Path, column: &ColumnSel) -> Result<Series> {
    let path_str = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| XragError::Csv {
            path: path_str.clone(),
            detail: e.to_string(),
        })?;

    let headers = reader
        .headers()
        .map_err(|e| XragError::Csv {
            path: path_str.clone(),
            detail: e.to_string(),
        })?
        .clone();

    let col_idx = match column {
        ColumnSel::Index(i) => {
            if *i >= headers.len() {
                return Err(XragError::ColumnNotFound {
                    path: path_str,
                    column: column.to_string(),
                });
            }
            *i
        }
        ColumnSel::Name(name) => headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| XragError::ColumnNotFound {
                path: path_str.clone(),
                column: name.clone(),
            })?,
    };
    let col_name = headers.get(col_idx).unwrap_or("").to_string();

    let mut values = Vec::new();
    for (row_i, record) in reader.records().enumerate() {
        let line = row_i + 2; // header occupies line 1
        let record = record.map_err(|e| XragError::Csv {
            path: path_str.clone(),
            detail: e.to_string(),
        })?;
        let cell = record.get(col_idx).unwrap_or("");
        values.push(parse_cell(cell, &path_str, line, &col_name)?);
    }

    Ok(Series {
        values,
        source_id: format!("{path_str}:{col_name}"),
        name: col_name,
    })
}

/// Loads every numeric channel of a headered CSV file.
///
/// A non-numeric first column (timestamps) is skipped. All remaining
/// columns must parse.
pub fn load_channels(path: &Path) -> Result<Vec<Series>> {
    let path_str = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| XragError::Csv {
            path: path_str.clone(),
            detail: e.to_string(),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| XragError::Csv {
            path: path_str.clone(),
            detail: e.to_string(),
        })?
        .clone();

    let mut rows: Vec<csv::StringRecord> = Vec::new();
    for record in reader.records() {
        rows.push(record.map_err(|e| XragError::Csv {
            path: path_str.clone(),
            detail: e.to_string(),
        })?);
    }
    if rows.is_empty() {
        return Err(XragError::EmptyInput("csv has no data rows"));
    }

    // Skip a leading timestamp column when its first cell is non-numeric.
    let first_cell = rows[0].get(0).unwrap_or("");
    let start_col = if first_cell.trim().parse::<f64>().is_ok() {
        0
    } else {
        1
    };

    let mut channels = Vec::new();
    for c in start_col..headers.len() {
        let name = headers.get(c).unwrap_or("").to_string();
        let mut values = Vec::with_capacity(rows.len());
        for (row_i, record) in rows.iter().enumerate() {
            let line = row_i + 2;
            let cell = record.get(c).unwrap_or("");
            values.push(parse_cell(cell, &path_str, line, &name)?);
        }
        channels.push(Series {
            values,
            source_id: format!("{path_str}:{name}"),
            name,
        });
    }
    Ok(channels)
}

fn parse_cell(cell: &str, path: &str, line: usize, column: &str) -> Result<f64> {
    let trimmed = cell.trim();
    let bad = || XragError::UnparsableCell {
        path: path.to_string(),
        line,
        column: column.to_string(),
        cell: cell.to_string(),
    };
    if trimmed.is_empty() {
        return Err(bad());
    }
    let v: f64 = trimmed.parse().map_err(|_| bad())?;
    if !v.is_finite() {
        return Err(bad());
    }
    Ok(v)
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
    fn load_csv_named_column() {
        let f = write_csv("date,OT\n2020-01-01,1.0\n2020-01-02,2.0\n2020-01-03,3.0\n2020-01-04,4.0\n");
        let s = load_csv(f.path(), &ColumnSel::Name("OT".into())).unwrap();
        assert_eq!(s.values, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.name, "OT");
    }

    #[test]
    fn load_csv_blank_cell_names_line() {
        let f = write_csv("date,OT\n2020-01-01,1.0\n2020-01-02,\n");
        let err = load_csv(f.path(), &ColumnSel::Name("OT".into())).unwrap_err();
        match err {
            XragError::UnparsableCell { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn load_csv_nan_rejected() {
        let f = write_csv("date,OT\n2020-01-01,NaN\n");
        assert!(load_csv(f.path(), &ColumnSel::Name("OT".into())).is_err());
    }

    #[test]
    fn load_csv_missing_column() {
        let f = write_csv("date,OT\n2020-01-01,1.0\n");
        let err = load_csv(f.path(), &ColumnSel::Name("HUFL".into())).unwrap_err();
        assert!(matches!(err, XragError::ColumnNotFound { .. }));
    }

    #[test]
    fn load_channels_skips_timestamp() {
        let f = write_csv("date,a,b\n2020-01-01,1.0,10.0\n2020-01-02,2.0,20.0\n");
        let chans = load_channels(f.path()).unwrap();
        assert_eq!(chans.len(), 2);
        assert_eq!(chans[0].values, vec![1.0, 2.0]);
        assert_eq!(chans[1].values, vec![10.0, 20.0]);
    }

    #[test]
    fn make_windows_counts_and_contents() {
        let s = Series::new((0..10).map(|i| i as f64).collect(), "s", "s");
        let ws = make_windows(&s, 4, 2, 1).unwrap();
        assert_eq!(ws.len(), 5);
        assert_eq!(ws[0].x, vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(ws[0].y, vec![4.0, 5.0]);
        assert_eq!(ws[4].start_index, 4);
    }

    #[test]
    fn make_windows_boundary_single_pair() {
        let s = Series::new((0..6).map(|i| i as f64).collect(), "s", "s");
        let ws = make_windows(&s, 4, 2, 1).unwrap();
        assert_eq!(ws.len(), 1);
    }

    #[test]
    fn make_windows_too_short() {
        let s = Series::new((0..5).map(|i| i as f64).collect(), "s", "s");
        let err = make_windows(&s, 4, 2, 1).unwrap_err();
        assert!(matches!(err, XragError::SeriesTooShort { needed: 6, .. }));
    }

    #[test]
    fn window_reconstruction_matches_source_slice() {
        let s = Series::new((0..50).map(|i| (i as f64).sin()).collect(), "s", "s");
        for w in make_windows(&s, 7, 3, 2).unwrap() {
            let mut joined = w.x.clone();
            joined.extend_from_slice(&w.y);
            assert_eq!(&s.values[w.start_index..w.start_index + 10], &joined[..]);
        }
    }

    #[test]
    fn minmax_scale_basic() {
        let sw = minmax_scale(&[0.0, 5.0, 10.0]);
        assert!((sw.values[0] - 0.0).abs() < 1e-6);
        assert!((sw.values[1] - 0.5).abs() < 1e-6);
        assert!((sw.values[2] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn minmax_scale_constant_window() {
        let sw = minmax_scale(&[3.0, 3.0, 3.0]);
        assert_eq!(sw.values, vec![0.0, 0.0, 0.0]);
        assert_eq!(sw.range_val, 0.0);
    }

    #[test]
    fn minmax_scale_two_point() {
        let sw = minmax_scale(&[-1.0, 1.0]);
        assert!((sw.values[0]).abs() < 1e-6);
        assert!((sw.values[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn minmax_roundtrip() {
        let xs = [3.5, -2.0, 8.25, 0.0, 1.0];
        let sw = minmax_scale(&xs);
        for (orig, back) in xs.iter().zip(sw.invert()) {
            let rel = (orig - back).abs() / orig.abs().max(1.0);
            assert!(rel < 1e-9, "{orig} vs {back}");
        }
    }

    #[test]
    fn scaling_near_idempotent_on_unit_interval() {
        let xs = [0.0, 0.25, 0.5, 0.75, 1.0];
        let sw = minmax_scale(&xs);
        for (a, b) in xs.iter().zip(&sw.values) {
            assert!((a - b).abs() <= 1e-7);
        }
    }
}
