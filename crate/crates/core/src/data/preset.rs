//! Synthetic stand-ins for a stirred-tank heater (5 variables, one fault)
//! and a larger benchmark plant (22 variables, ten faults).

use std::fmt;
use std::str::FromStr;

use super::synthetic::{generate_class_recordings, ClassRecordings};
use super::{prepare_scenario, DataError, FaultKind, PreparedScenario, ScenarioKind, ScenarioSpec, SyntheticFaultConfig};
use crate::par::Execution;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Plant {
    StirredTank,
    BenchmarkPlant,
}

impl Plant {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::StirredTank => "stirred-tank",
            Self::BenchmarkPlant => "benchmark-plant",
        }
    }
}

impl fmt::Display for Plant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Plant {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "stirred-tank" => Ok(Self::StirredTank),
            "benchmark-plant" => Ok(Self::BenchmarkPlant),
            other => Err(DataError::Config(format!("unknown plant {other:?} (stirred-tank|benchmark-plant)"))),
        }
    }
}

pub const STIRRED_TANK_VARIABLES: [&str; 5] = ["level", "temperature", "steam", "cold_water", "hot_water"];

/// Everything needed to synthesize and window one scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct Preset {
    pub plant: Plant,
    pub variables: Vec<String>,
    pub faults: Vec<SyntheticFaultConfig>,
    pub window: usize,
    pub stride: usize,
    pub spec: ScenarioSpec,
}

impl Preset {
    /// Step fault of size 3 on the steam variable; counts of the published
    /// stirred-tank settings.
    pub fn stirred_tank(kind: ScenarioKind, seed: u64) -> Self {
        Self {
            plant: Plant::StirredTank,
            variables: STIRRED_TANK_VARIABLES.iter().map(|s| s.to_string()).collect(),
            faults: vec![SyntheticFaultConfig::step(2, 3.0)],
            window: 10,
            stride: 10,
            spec: ScenarioSpec::stirred_tank(kind, seed),
        }
    }

    /// Ten single-variable faults on distinct variables: three steps and
    /// seven random variations, mirroring the mix of the selected benchmark
    /// faults; counts of the published benchmark settings.
    pub fn benchmark_plant(kind: ScenarioKind, seed: u64) -> Self {
        Self {
            plant: Plant::BenchmarkPlant,
            variables: (1..=22).map(|i| format!("X{i}")).collect(),
            faults: BENCHMARK_FAULTS
                .iter()
                .map(|&(variable, kind, magnitude)| SyntheticFaultConfig { variable, kind, magnitude, onset: 0, coupling: None })
                .collect(),
            window: 10,
            stride: 10,
            spec: ScenarioSpec::benchmark_plant(kind, 11, seed),
        }
    }

    pub fn new(plant: Plant, kind: ScenarioKind, seed: u64) -> Self {
        match plant {
            Plant::StirredTank => Self::stirred_tank(kind, seed),
            Plant::BenchmarkPlant => Self::benchmark_plant(kind, seed),
        }
    }

    pub fn classes(&self) -> usize {
        self.faults.len() + 1
    }

    pub fn height(&self) -> usize {
        self.variables.len()
    }

    /// Recording lengths that yield exactly enough windows for the largest
    /// per-class train and test counts.
    pub fn recording_lengths(&self) -> (usize, usize) {
        let len = |n: usize| (n.max(1) - 1) * self.stride + self.window;
        let max = |v: &[usize]| v.iter().copied().max().unwrap_or(1);
        (len(max(&self.spec.train_counts)), len(max(&self.spec.test_counts)))
    }

    /// Raw per-class recordings, named after the preset's variables.
    pub fn generate(&self, exec: Execution) -> Result<ClassRecordings, DataError> {
        if self.spec.classes() != self.classes() {
            return Err(DataError::Config(format!(
                "scenario lists {} classes but the plant has {}",
                self.spec.classes(),
                self.classes()
            )));
        }
        let (train_len, test_len) = self.recording_lengths();
        let mut rec = generate_class_recordings(&self.faults, self.height(), train_len, test_len, self.spec.seed, exec)?;
        for s in rec.train.iter_mut().chain(rec.test.iter_mut()) {
            s.variables = self.variables.clone();
        }
        Ok(rec)
    }

    pub fn prepare(&self, exec: Execution) -> Result<PreparedScenario, DataError> {
        let rec = self.generate(exec)?;
        prepare_scenario(&rec.train, &rec.test, self.window, self.stride, &self.spec)
    }
}

/// (variable, kind, magnitude) of the benchmark-plant faults.
const BENCHMARK_FAULTS: [(usize, FaultKind, f64); 10] = [
    (0, FaultKind::Step, 1.5),
    (3, FaultKind::Step, 1.5),
    (1, FaultKind::Step, 1.5),
    (6, FaultKind::RandomVariation, 2.0),
    (17, FaultKind::RandomVariation, 2.0),
    (8, FaultKind::RandomVariation, 2.0),
    (21, FaultKind::RandomVariation, 2.0),
    (12, FaultKind::RandomVariation, 2.0),
    (10, FaultKind::RandomVariation, 2.0),
    (15, FaultKind::Step, 1.5),
];
