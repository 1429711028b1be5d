use super::{DataError, RawSeries, WindowedSample};

/// Default floor for the applied standard deviation.
pub const STD_GUARD: f64 = 1e-8;

/// Per-variable population mean and standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct StandardizerState {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub guard: f64,
}

impl StandardizerState {
    /// Fits on a training series. Constant variables keep `std = 0`; the
    /// guard takes over when the state is applied.
    pub fn fit(train: &RawSeries) -> Result<Self, DataError> {
        if train.height() == 0 || train.is_empty() {
            return Err(DataError::EmptySeries);
        }
        if train.len() < 2 {
            return Err(DataError::TooShort { needed: 2, found: train.len() });
        }
        let n = train.len() as f64;
        let mean: Vec<f64> = train.values.iter().map(|r| r.iter().sum::<f64>() / n).collect();
        let std = train
            .values
            .iter()
            .zip(&mean)
            .map(|(r, m)| (r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt())
            .collect();
        Ok(Self { mean, std, guard: STD_GUARD })
    }

    /// Fits on the pooled timesteps of a set of windows.
    pub fn fit_samples(train: &[WindowedSample]) -> Result<Self, DataError> {
        let first = train.first().ok_or(DataError::EmptySeries)?;
        let mut rows = vec![Vec::with_capacity(train.len() * first.width); first.height];
        for s in train {
            if s.height != first.height {
                return Err(DataError::VariableMismatch { expected: first.height, found: s.height });
            }
            for (h, row) in rows.iter_mut().enumerate() {
                row.extend_from_slice(s.row(h));
            }
        }
        Self::fit(&RawSeries::new(Vec::new(), rows)?)
    }

    pub fn variables(&self) -> usize {
        self.mean.len()
    }

    pub fn applied_std(&self, h: usize) -> f64 {
        self.std[h].max(self.guard)
    }

    pub fn apply(&self, series: &RawSeries) -> Result<RawSeries, DataError> {
        self.check(series.height())?;
        let values = series
            .values
            .iter()
            .enumerate()
            .map(|(h, r)| {
                let s = self.applied_std(h);
                r.iter().map(|v| (v - self.mean[h]) / s).collect()
            })
            .collect();
        Ok(RawSeries { variables: series.variables.clone(), values, metadata: series.metadata.clone() })
    }

    pub fn apply_sample(&self, sample: &WindowedSample) -> Result<WindowedSample, DataError> {
        self.check(sample.height)?;
        let mut out = sample.clone();
        for h in 0..sample.height {
            let s = self.applied_std(h);
            for v in &mut out.data[h * sample.width..(h + 1) * sample.width] {
                *v = (*v - self.mean[h]) / s;
            }
        }
        Ok(out)
    }

    pub fn apply_samples(&self, samples: &[WindowedSample]) -> Result<Vec<WindowedSample>, DataError> {
        samples.iter().map(|s| self.apply_sample(s)).collect()
    }

    fn check(&self, h: usize) -> Result<(), DataError> {
        if h != self.variables() {
            return Err(DataError::VariableMismatch { expected: self.variables(), found: h });
        }
        Ok(())
    }
}
