use super::{build_split_scenario, sliding_window, DataError, RawSeries, Scenario, ScenarioSpec, StandardizerState};

/// Standardized, windowed train/test sets ready for training.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedScenario {
    pub variables: Vec<String>,
    pub standardizer: StandardizerState,
    pub scenario: Scenario,
}

/// Turns per-class recordings into a scenario.
///
/// The standardizer is fitted on the normal-condition training recording
/// (`train[0]`) alone and applied to every recording, so the test
/// recordings never influence it. Training windows come from `train[c]`,
/// test windows from `test[c]`; train windows carry series id `c`, test
/// windows `classes + c`.
pub fn prepare_scenario(
    train: &[RawSeries],
    test: &[RawSeries],
    window: usize,
    stride: usize,
    spec: &ScenarioSpec,
) -> Result<PreparedScenario, DataError> {
    let classes = spec.classes();
    if train.len() != classes || test.len() != classes {
        return Err(DataError::Config(format!(
            "{} training and {} test recordings for a {classes}-class scenario",
            train.len(),
            test.len()
        )));
    }
    let variables = train[0].variables.clone();
    for s in train.iter().chain(test) {
        if s.height() != variables.len() {
            return Err(DataError::VariableMismatch { expected: variables.len(), found: s.height() });
        }
    }
    let standardizer = StandardizerState::fit(&train[0])?;
    let pools = |set: &[RawSeries], offset: usize| -> Result<Vec<_>, DataError> {
        set.iter()
            .enumerate()
            .map(|(c, s)| sliding_window(&standardizer.apply(s)?, c, offset + c, window, stride))
            .collect()
    };
    let scenario = build_split_scenario(&pools(train, 0)?, &pools(test, classes)?, spec)?;
    Ok(PreparedScenario { variables, standardizer, scenario })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{class_counts, ScenarioKind};

    fn ramp(offset: f64, len: usize) -> RawSeries {
        let values = vec![(0..len).map(|t| offset + t as f64).collect(), (0..len).map(|t| (t % 3) as f64).collect()];
        RawSeries::new(vec![], values).unwrap()
    }

    #[test]
    fn counts_and_no_test_influence() {
        let spec = ScenarioSpec::new(vec![5, 2], vec![3, 3], ScenarioKind::LongTail, 1).unwrap();
        let train = [ramp(0.0, 60), ramp(100.0, 30)];
        let a = prepare_scenario(&train, &[ramp(5.0, 40), ramp(7.0, 40)], 4, 4, &spec).unwrap();
        let b = prepare_scenario(&train, &[ramp(5.0, 40), ramp(-900.0, 40)], 4, 4, &spec).unwrap();
        assert_eq!(a.standardizer, b.standardizer);
        assert_eq!(a.scenario.train, b.scenario.train);
        assert_eq!(class_counts(&a.scenario.train, 2), vec![5, 2]);
        assert_eq!(class_counts(&a.scenario.test, 2), vec![3, 3]);
        assert!(a.scenario.test.iter().all(|s| s.origin.series >= 2));
        // Class-0 test windows only depend on class-0 test data.
        let zero = |p: &PreparedScenario| p.scenario.test.iter().filter(|s| s.label == 0).cloned().collect::<Vec<_>>();
        assert_eq!(zero(&a), zero(&b));
    }

    #[test]
    fn shortfall_surfaces() {
        let spec = ScenarioSpec::new(vec![50, 2], vec![3, 3], ScenarioKind::LongTail, 1).unwrap();
        let err = prepare_scenario(&[ramp(0.0, 60), ramp(1.0, 30)], &[ramp(0.0, 40), ramp(0.0, 40)], 4, 4, &spec);
        assert!(matches!(err, Err(DataError::Shortfall { class: 0, .. })));
    }
}
