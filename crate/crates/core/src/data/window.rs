use super::{DataError, Origin, RawSeries, WindowedSample};

/// Cuts `series` into `window`-step slices starting at `0, stride, 2*stride, ...`;
/// a trailing partial window is dropped.
pub fn sliding_window(
    series: &RawSeries,
    label: usize,
    series_id: usize,
    window: usize,
    stride: usize,
) -> Result<Vec<WindowedSample>, DataError> {
    if window == 0 || stride == 0 {
        return Err(DataError::Config(format!("window ({window}) and stride ({stride}) must be >= 1")));
    }
    let length = series.len();
    if window > length {
        return Err(DataError::WindowTooLong { window, length });
    }
    let h = series.height();
    let count = (length - window) / stride + 1;
    Ok((0..count)
        .map(|k| {
            let start = k * stride;
            let mut data = Vec::with_capacity(h * window);
            for row in &series.values {
                data.extend_from_slice(&row[start..start + window]);
            }
            WindowedSample {
                data,
                height: h,
                width: window,
                label,
                origin: Origin { series: series_id, start },
            }
        })
        .collect())
}
