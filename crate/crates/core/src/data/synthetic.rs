//! Synthetic multivariate process with a known root-cause variable.
//!
//! The normal condition is a stable vector autoregression
//! `x_t = A x_{t-1} + L e_t` with `e_t ~ N(0, I)`, rescaled so every variable
//! has unit stationary variance. A fault adds an input `u_t` to the update
//! of variable `k` from the onset step; it propagates to the other variables
//! through the off-diagonal couplings. Step faults are scaled so that the
//! steady-state mean of variable `k` moves by exactly `magnitude`.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};

use super::{default_names, DataError, RawSeries};
use crate::par::{self, Execution};
use crate::rng::{self, StreamRng};

const BURN_IN: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FaultKind {
    Step,
    RandomVariation,
}

impl FaultKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Step => "step",
            Self::RandomVariation => "random-variation",
        }
    }
}

impl fmt::Display for FaultKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FaultKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "step" => Ok(Self::Step),
            "random-variation" | "random_variation" => Ok(Self::RandomVariation),
            other => Err(DataError::Config(format!("unknown fault kind {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticFaultConfig {
    /// Root-cause variable index.
    pub variable: usize,
    pub kind: FaultKind,
    /// Size in unit-variance (standardized) units. Zero gives a null fault.
    pub magnitude: f64,
    /// First faulty step of the recorded series.
    pub onset: usize,
    /// `H x H` coupling matrix; [`default_coupling`] when absent.
    pub coupling: Option<Vec<Vec<f64>>>,
}

impl SyntheticFaultConfig {
    pub fn step(variable: usize, magnitude: f64) -> Self {
        Self { variable, kind: FaultKind::Step, magnitude, onset: 0, coupling: None }
    }

    pub fn random_variation(variable: usize, magnitude: f64) -> Self {
        Self { variable, kind: FaultKind::RandomVariation, magnitude, onset: 0, coupling: None }
    }
}

/// Normal-condition and fault-condition recordings of the same process.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSeries {
    pub normal: RawSeries,
    pub fault: RawSeries,
}

/// The coupling shipped with the generator: self-persistence 0.5, each
/// variable drives its successor with weight 0.3 and (for `H >= 4`) the
/// variable three steps downstream with weight -0.15, wrapping around.
/// Every column's absolute sum is at most 0.95, so the process is stable.
pub fn default_coupling(h: usize) -> Vec<Vec<f64>> {
    let mut a = vec![vec![0.0; h]; h];
    for i in 0..h {
        a[i][i] = 0.5;
        if h >= 2 {
            a[(i + 1) % h][i] += 0.3;
        }
        if h >= 4 {
            a[(i + 3) % h][i] += -0.15;
        }
    }
    a
}

/// Unit-variance form of a stable VAR(1) process.
#[derive(Clone, Debug)]
pub struct ProcessModel {
    /// Coupling expressed in unit-variance coordinates.
    coupling: Vec<Vec<f64>>,
    /// Innovation scale per variable.
    noise: Vec<f64>,
}

impl ProcessModel {
    pub fn new(coupling: &[Vec<f64>]) -> Result<Self, DataError> {
        let h = coupling.len();
        if h < 2 || coupling.iter().any(|r| r.len() != h) {
            return Err(DataError::Config(format!("coupling must be square with H >= 2, got {h} rows")));
        }
        let sigma = stationary_covariance(coupling)?;
        let scale: Vec<f64> = (0..h).map(|i| 1.0 / sigma[i][i].sqrt()).collect();
        let scaled = (0..h)
            .map(|i| (0..h).map(|j| scale[i] * coupling[i][j] / scale[j]).collect())
            .collect();
        Ok(Self { coupling: scaled, noise: scale })
    }

    pub fn variables(&self) -> usize {
        self.noise.len()
    }

    /// Input gain that moves variable `k`'s steady-state mean by one unit.
    pub fn step_gain(&self, k: usize) -> f64 {
        let h = self.variables();
        let mut m: Vec<Vec<f64>> = (0..h)
            .map(|i| (0..h).map(|j| f64::from(i == j) - self.coupling[i][j]).collect())
            .collect();
        let mut rhs: Vec<f64> = (0..h).map(|i| f64::from(i == k)).collect();
        let response = solve(&mut m, &mut rhs);
        1.0 / response[k]
    }

    fn simulate(&self, fault: Option<&SyntheticFaultConfig>, len: usize, rng: &mut StreamRng) -> Vec<Vec<f64>> {
        let h = self.variables();
        let gain = fault.map_or(0.0, |f| match f.kind {
            FaultKind::Step => self.step_gain(f.variable),
            FaultKind::RandomVariation => 1.0,
        });
        let mut state = vec![0.0; h];
        let mut next = vec![0.0; h];
        let mut out = vec![Vec::with_capacity(len); h];
        for t in 0..BURN_IN + len {
            for i in 0..h {
                let e: f64 = StandardNormal.sample(rng);
                let drift: f64 = self.coupling[i].iter().zip(&state).map(|(a, x)| a * x).sum();
                next[i] = drift + self.noise[i] * e;
            }
            if let Some(f) = fault {
                if t >= BURN_IN + f.onset {
                    let u = match f.kind {
                        FaultKind::Step => f.magnitude,
                        FaultKind::RandomVariation => {
                            let e: f64 = StandardNormal.sample(rng);
                            f.magnitude * e
                        }
                    };
                    next[f.variable] += gain * u;
                }
            }
            std::mem::swap(&mut state, &mut next);
            if t >= BURN_IN {
                for (row, &v) in out.iter_mut().zip(&state) {
                    row.push(v);
                }
            }
        }
        out
    }
}

fn validate(config: &SyntheticFaultConfig, h: usize) -> Result<(), DataError> {
    if config.variable >= h {
        return Err(DataError::Config(format!(
            "fault variable {} out of range for {h} variables",
            config.variable
        )));
    }
    if !(config.magnitude >= 0.0 && config.magnitude.is_finite()) {
        return Err(DataError::Config(format!("fault magnitude must be finite and >= 0, got {}", config.magnitude)));
    }
    Ok(())
}

fn model_for(config: &SyntheticFaultConfig, h: usize) -> Result<ProcessModel, DataError> {
    if h < 2 {
        return Err(DataError::Config(format!("synthetic process needs H >= 2, got {h}")));
    }
    match &config.coupling {
        Some(c) if c.len() != h => Err(DataError::Config(format!("coupling has {} rows for {h} variables", c.len()))),
        Some(c) => ProcessModel::new(c),
        None => ProcessModel::new(&default_coupling(h)),
    }
}

fn to_series(values: Vec<Vec<f64>>, label: &str) -> RawSeries {
    let h = values.len();
    RawSeries { variables: default_names(h), values, metadata: format!("synthetic {label}, unit period") }
}

/// One normal and one faulty recording of length `len` over `h` variables.
pub fn generate_synthetic_process(
    config: &SyntheticFaultConfig,
    h: usize,
    len: usize,
    seed: u64,
) -> Result<SyntheticSeries, DataError> {
    validate(config, h)?;
    let model = model_for(config, h)?;
    let normal = model.simulate(None, len, &mut rng::stream(seed, &[rng::domain::SYNTHETIC, 0]));
    let fault = model.simulate(Some(config), len, &mut rng::stream(seed, &[rng::domain::SYNTHETIC, 1]));
    Ok(SyntheticSeries { normal: to_series(normal, "normal"), fault: to_series(fault, "fault") })
}

/// One recording per class: class 0 is normal, class `i + 1` carries
/// `faults[i]`. All faults share the coupling of `faults[0]` (or the default).
pub fn generate_classes(
    faults: &[SyntheticFaultConfig],
    h: usize,
    len: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<RawSeries>, DataError> {
    recordings(faults, h, len, seed, 0, exec)
}

/// Independent training and test recordings for every class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassRecordings {
    pub train: Vec<RawSeries>,
    pub test: Vec<RawSeries>,
}

pub fn generate_class_recordings(
    faults: &[SyntheticFaultConfig],
    h: usize,
    train_len: usize,
    test_len: usize,
    seed: u64,
    exec: Execution,
) -> Result<ClassRecordings, DataError> {
    Ok(ClassRecordings {
        train: recordings(faults, h, train_len, seed, 0, exec)?,
        test: recordings(faults, h, test_len, seed, 1, exec)?,
    })
}

fn recordings(
    faults: &[SyntheticFaultConfig],
    h: usize,
    len: usize,
    seed: u64,
    part: u64,
    exec: Execution,
) -> Result<Vec<RawSeries>, DataError> {
    let first = faults.first().ok_or_else(|| DataError::Config("no fault classes configured".into()))?;
    for f in faults {
        validate(f, h)?;
    }
    let model = model_for(first, h)?;
    let classes: Vec<Option<&SyntheticFaultConfig>> =
        std::iter::once(None).chain(faults.iter().map(Some)).collect();
    Ok(par::map_range(exec, classes.len(), |c| {
        let mut r = rng::stream(seed, &[rng::domain::SYNTHETIC, 100 + part, c as u64]);
        let label = if c == 0 { "normal".to_string() } else { format!("fault {c}") };
        to_series(model.simulate(classes[c], len, &mut r), &label)
    }))
}

fn stationary_covariance(a: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, DataError> {
    let h = a.len();
    let identity: Vec<Vec<f64>> = (0..h).map(|i| (0..h).map(|j| f64::from(i == j)).collect()).collect();
    let mut sigma = identity.clone();
    for _ in 0..100_000 {
        let left: Vec<Vec<f64>> = (0..h)
            .map(|i| (0..h).map(|q| (0..h).map(|p| a[i][p] * sigma[p][q]).sum()).collect())
            .collect();
        let mut next = identity.clone();
        for i in 0..h {
            for j in 0..h {
                next[i][j] += (0..h).map(|q| left[i][q] * a[j][q]).sum::<f64>();
            }
        }
        let delta = next.iter().flatten().zip(sigma.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        sigma = next;
        if !delta.is_finite() || sigma[0][0] > 1e12 {
            break;
        }
        if delta < 1e-13 {
            return Ok(sigma);
        }
    }
    Err(DataError::Config("coupling matrix is not stable (spectral radius >= 1)".into()))
}

/// Gaussian elimination with partial pivoting; `m` is consumed.
fn solve(m: &mut [Vec<f64>], rhs: &mut [f64]) -> Vec<f64> {
    let n = rhs.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&a, &b| m[a][col].abs().total_cmp(&m[b][col].abs())).unwrap_or(col);
        m.swap(col, pivot);
        rhs.swap(col, pivot);
        for row in col + 1..n {
            let f = m[row][col] / m[col][col];
            for k in col..n {
                m[row][k] -= f * m[col][k];
            }
            rhs[row] -= f * rhs[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| m[row][k] * x[k]).sum();
        x[row] = (rhs[row] - s) / m[row][row];
    }
    x
}
