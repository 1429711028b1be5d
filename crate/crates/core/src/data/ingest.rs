use std::fs;
use std::io::Write;
use std::path::Path;

use super::{default_names, DataError, RawSeries};

/// Orientation of a series CSV.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CsvLayout {
    /// One line per variable, one column per timestep.
    VariablesAsRows,
    /// One column per variable, one line per timestep.
    VariablesAsColumns,
}

pub fn load_csv(path: &Path, layout: CsvLayout) -> Result<RawSeries, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
    parse_csv(&text, layout, &path.display().to_string())
}

/// Parses comma-separated numeric text. A first line containing any
/// non-numeric cell is taken as a header; with [`CsvLayout::VariablesAsColumns`]
/// it supplies the variable names.
pub fn parse_csv(text: &str, layout: CsvLayout, source: &str) -> Result<RawSeries, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut header: Option<Vec<String>> = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| DataError::Csv { path: source.to_string(), message: e.to_string() })?;
        let line = record.position().map_or(i as u64 + 1, |p| p.line()) as usize;
        if record.iter().all(str::is_empty) {
            continue;
        }
        let parsed: Vec<Result<f64, &str>> =
            record.iter().map(|c| c.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or(c)).collect();
        if header.is_none() && rows.is_empty() && parsed.iter().any(Result::is_err) {
            header = Some(record.iter().map(str::to_string).collect());
            width = Some(record.len());
            continue;
        }
        let expected = *width.get_or_insert(record.len());
        if record.len() != expected {
            return Err(DataError::Ragged { path: source.to_string(), line, expected, found: record.len() });
        }
        let mut row = Vec::with_capacity(parsed.len());
        for (column, cell) in parsed.into_iter().enumerate() {
            match cell {
                Ok(v) => row.push(v),
                Err(raw) => {
                    return Err(DataError::NonNumeric {
                        path: source.to_string(),
                        line,
                        column: column + 1,
                        cell: raw.to_string(),
                    })
                }
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(DataError::EmptyFile { path: source.to_string() });
    }
    let series = match layout {
        CsvLayout::VariablesAsRows => RawSeries::new(default_names(rows.len()), rows)?,
        CsvLayout::VariablesAsColumns => {
            let h = rows[0].len();
            let values = (0..h).map(|v| rows.iter().map(|r| r[v]).collect()).collect();
            RawSeries::new(header.unwrap_or_else(|| default_names(h)), values)?
        }
    };
    Ok(series)
}

/// Writes a series; the column layout carries a header of variable names.
pub fn write_csv(series: &RawSeries, path: &Path, layout: CsvLayout) -> Result<(), DataError> {
    let io = |source| DataError::Io { path: path.to_path_buf(), source };
    let mut out = String::new();
    let join = |vals: &mut dyn Iterator<Item = f64>| vals.map(|v| v.to_string()).collect::<Vec<_>>().join(",");
    match layout {
        CsvLayout::VariablesAsRows => {
            for row in &series.values {
                out.push_str(&join(&mut row.iter().copied()));
                out.push('\n');
            }
        }
        CsvLayout::VariablesAsColumns => {
            out.push_str(&series.variables.join(","));
            out.push('\n');
            for t in 0..series.len() {
                out.push_str(&join(&mut series.values.iter().map(|r| r[t])));
                out.push('\n');
            }
        }
    }
    let mut file = fs::File::create(path).map_err(io)?;
    file.write_all(out.as_bytes()).map_err(io)
}
