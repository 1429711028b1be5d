use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;

use super::{DataError, WindowedSample};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScenarioKind {
    Balanced,
    Imbalanced,
    LongTail,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 3] = [Self::Balanced, Self::Imbalanced, Self::LongTail];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Balanced => "balanced",
            Self::Imbalanced => "imbalanced",
            Self::LongTail => "long-tail",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "balanced" => Ok(Self::Balanced),
            "imbalanced" => Ok(Self::Imbalanced),
            "long-tail" | "longtail" | "long_tail" => Ok(Self::LongTail),
            other => Err(DataError::Config(format!(
                "unknown scenario {other:?} (expected balanced, imbalanced or long-tail)"
            ))),
        }
    }
}

/// Per-class train/test sample counts. Class 0 is the normal condition.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioSpec {
    pub train_counts: Vec<usize>,
    pub test_counts: Vec<usize>,
    pub kind: ScenarioKind,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn new(
        train_counts: Vec<usize>,
        test_counts: Vec<usize>,
        kind: ScenarioKind,
        seed: u64,
    ) -> Result<Self, DataError> {
        if train_counts.len() < 2 || train_counts.len() != test_counts.len() {
            return Err(DataError::Config(format!(
                "need matching train/test counts for at least two classes, got {} and {}",
                train_counts.len(),
                test_counts.len()
            )));
        }
        if let Some(c) = train_counts.iter().chain(&test_counts).position(|&n| n == 0) {
            return Err(DataError::Config(format!(
                "class {} has a zero count",
                c % train_counts.len()
            )));
        }
        if test_counts.iter().any(|&n| n != test_counts[0]) {
            return Err(DataError::Config(format!("test counts must be equal across classes, got {test_counts:?}")));
        }
        Ok(Self { train_counts, test_counts, kind, seed })
    }

    /// Two-class stirred-tank layout: 780 normal training windows, a
    /// kind-dependent number of fault windows, 200/200 for test.
    pub fn stirred_tank(kind: ScenarioKind, seed: u64) -> Self {
        let fault = match kind {
            ScenarioKind::Balanced => 450,
            ScenarioKind::Imbalanced => 200,
            ScenarioKind::LongTail => 20,
        };
        Self { train_counts: vec![780, fault], test_counts: vec![200, 200], kind, seed }
    }

    /// Benchmark-plant layout over `classes` classes (normal + faults):
    /// 4780 normal training windows, 4780/478/20 per fault, 780 per class for test.
    pub fn benchmark_plant(kind: ScenarioKind, classes: usize, seed: u64) -> Self {
        let fault = match kind {
            ScenarioKind::Balanced => 4780,
            ScenarioKind::Imbalanced => 478,
            ScenarioKind::LongTail => 20,
        };
        let mut train_counts = vec![fault; classes];
        train_counts[0] = 4780;
        Self { train_counts, test_counts: vec![780; classes], kind, seed }
    }

    pub fn classes(&self) -> usize {
        self.train_counts.len()
    }
}

/// Disjoint train and test sets.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub train: Vec<WindowedSample>,
    pub test: Vec<WindowedSample>,
}

/// Draws each class's train and test windows without replacement from its
/// pool (`pools[c]` holds class `c`); the two draws never share a window.
pub fn build_scenario(pools: &[Vec<WindowedSample>], spec: &ScenarioSpec) -> Result<Scenario, DataError> {
    if pools.len() != spec.classes() {
        return Err(DataError::Config(format!(
            "{} class pools supplied for a {}-class scenario",
            pools.len(),
            spec.classes()
        )));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, pool) in pools.iter().enumerate() {
        if let Some(bad) = pool.iter().find(|s| s.label != class) {
            return Err(DataError::Config(format!("pool {class} contains a sample labelled {}", bad.label)));
        }
        let needed = spec.train_counts[class] + spec.test_counts[class];
        if pool.len() < needed {
            return Err(DataError::Shortfall {
                class,
                needed,
                available: pool.len(),
                deficit: needed - pool.len(),
            });
        }
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut rng::stream(spec.seed, &[rng::domain::SCENARIO, class as u64]));
        let (tr, rest) = order.split_at(spec.train_counts[class]);
        train.extend(tr.iter().map(|&i| pool[i].clone()));
        test.extend(rest[..spec.test_counts[class]].iter().map(|&i| pool[i].clone()));
    }
    Ok(Scenario { train, test })
}

/// Draws each class's train windows from `train_pools[c]` and its test
/// windows from `test_pools[c]`, without replacement.
pub fn build_split_scenario(
    train_pools: &[Vec<WindowedSample>],
    test_pools: &[Vec<WindowedSample>],
    spec: &ScenarioSpec,
) -> Result<Scenario, DataError> {
    if train_pools.len() != spec.classes() || test_pools.len() != spec.classes() {
        return Err(DataError::Config(format!(
            "{}/{} class pools supplied for a {}-class scenario",
            train_pools.len(),
            test_pools.len(),
            spec.classes()
        )));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 0..spec.classes() {
        for (part, pool, count, out) in [
            (0, &train_pools[class], spec.train_counts[class], &mut train),
            (1, &test_pools[class], spec.test_counts[class], &mut test),
        ] {
            if let Some(bad) = pool.iter().find(|s| s.label != class) {
                return Err(DataError::Config(format!("pool {class} contains a sample labelled {}", bad.label)));
            }
            if pool.len() < count {
                return Err(DataError::Shortfall { class, needed: count, available: pool.len(), deficit: count - pool.len() });
            }
            let mut order: Vec<usize> = (0..pool.len()).collect();
            order.shuffle(&mut rng::stream(spec.seed, &[rng::domain::SCENARIO, class as u64, 1 + part]));
            out.extend(order[..count].iter().map(|&i| pool[i].clone()));
        }
    }
    Ok(Scenario { train, test })
}
