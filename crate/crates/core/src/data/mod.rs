//! Raw series, standardization, windowing, augmentation, scenario assembly,
//! synthetic process generation and file ingestion.

mod augment;
pub mod cache;
mod ingest;
mod prepare;
pub mod preset;
mod scenario;
mod standardize;
pub mod synthetic;
mod window;

pub use augment::augment_pairs;
pub use ingest::{load_csv, parse_csv, write_csv, CsvLayout};
pub use prepare::{prepare_scenario, PreparedScenario};
pub use preset::{Plant, Preset};
pub use scenario::{build_scenario, build_split_scenario, Scenario, ScenarioKind, ScenarioSpec};
pub use standardize::StandardizerState;
pub use synthetic::{generate_synthetic_process, FaultKind, SyntheticFaultConfig, SyntheticSeries};
pub use window::sliding_window;

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("series has no data")]
    EmptySeries,
    #[error("series needs at least {needed} timesteps, found {found}")]
    TooShort { needed: usize, found: usize },
    #[error("variable {variable} has {found} values, expected {expected}")]
    RaggedSeries { variable: usize, expected: usize, found: usize },
    #[error("series contains a non-finite value at variable {variable}, step {step}")]
    NonFinite { variable: usize, step: usize },
    #[error("variable count mismatch: expected {expected}, found {found}")]
    VariableMismatch { expected: usize, found: usize },
    #[error("window length {window} exceeds series length {length}")]
    WindowTooLong { window: usize, length: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("class {class}: needs {needed} windows but pool holds {available} (short by {deficit})")]
    Shortfall { class: usize, needed: usize, available: usize, deficit: usize },
    #[error("{path}: empty file")]
    EmptyFile { path: String },
    #[error("{path}: line {line} has {found} fields, expected {expected}")]
    Ragged { path: String, line: usize, expected: usize, found: usize },
    #[error("{path}: line {line}, column {column}: cannot parse {cell:?} as a number")]
    NonNumeric { path: String, line: usize, column: usize, cell: String },
    #[error("{path}: {message}")]
    Csv { path: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset cache: {0}")]
    Cache(String),
}

/// `H` named process variables observed over `L` timesteps.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSeries {
    pub variables: Vec<String>,
    /// One row of length `L` per variable.
    pub values: Vec<Vec<f64>>,
    /// Free-form sampling notes (period, units).
    pub metadata: String,
}

impl RawSeries {
    /// Validates a rectangular, finite, non-empty series. Variable names
    /// default to `x1..xH` when `variables` is empty.
    pub fn new(variables: Vec<String>, values: Vec<Vec<f64>>) -> Result<Self, DataError> {
        if values.is_empty() || values[0].is_empty() {
            return Err(DataError::EmptySeries);
        }
        let expected = values[0].len();
        for (variable, row) in values.iter().enumerate() {
            if row.len() != expected {
                return Err(DataError::RaggedSeries { variable, expected, found: row.len() });
            }
            if let Some(step) = row.iter().position(|v| !v.is_finite()) {
                return Err(DataError::NonFinite { variable, step });
            }
        }
        let variables = if variables.is_empty() { default_names(values.len()) } else { variables };
        if variables.len() != values.len() {
            return Err(DataError::VariableMismatch { expected: values.len(), found: variables.len() });
        }
        Ok(Self { variables, values, metadata: String::new() })
    }

    pub fn with_metadata(mut self, metadata: impl Into<String>) -> Self {
        self.metadata = metadata.into();
        self
    }

    /// Number of variables `H`.
    pub fn height(&self) -> usize {
        self.values.len()
    }

    /// Number of timesteps `L`.
    pub fn len(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Timesteps `[start, end)` of every variable.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self, DataError> {
        if start >= end || end > self.len() {
            return Err(DataError::Config(format!("invalid slice {start}..{end} of {} steps", self.len())));
        }
        Ok(Self {
            variables: self.variables.clone(),
            values: self.values.iter().map(|r| r[start..end].to_vec()).collect(),
            metadata: self.metadata.clone(),
        })
    }
}

pub fn default_names(h: usize) -> Vec<String> {
    (1..=h).map(|i| format!("x{i}")).collect()
}

/// Where a window was cut from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Origin {
    pub series: usize,
    pub start: usize,
}

/// An `H x W` window (row-major, one row per variable) with its class label.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowedSample {
    pub data: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub label: usize,
    pub origin: Origin,
}

impl WindowedSample {
    pub fn row(&self, h: usize) -> &[f64] {
        &self.data[h * self.width..(h + 1) * self.width]
    }
}

/// Per-class counts of a set of samples over `classes` classes.
pub fn class_counts(samples: &[WindowedSample], classes: usize) -> Vec<usize> {
    let mut counts = vec![0; classes];
    for s in samples {
        if s.label < classes {
            counts[s.label] += 1;
        }
    }
    counts
}
