//! Dataset manifest: `sccam-manifest 1` followed by `key=value` lines.
//!
//! ```text
//! sccam-manifest 1
//! plant=stirred-tank
//! scenario=long-tail
//! seed=0
//! window=10
//! stride=10
//! classes=2
//! variables=level,temperature,steam,cold_water,hot_water
//! train_counts=780,20
//! test_counts=200,200
//! fault.1=kind:step variable:steam magnitude:3 onset:0
//! file.train.0=train/class_0.csv sha256:<first 16 hex digits>
//! file.test.0=test/class_0.csv sha256:<...>
//! ...
//! ```
//!
//! Each class has one training and one test recording, written as CSV with
//! one column per variable and a header of variable names.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use sccam_core::data::{Preset, ScenarioKind, ScenarioSpec};

use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.txt";
const HEADER: &str = "sccam-manifest 1";

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub plant: String,
    pub spec: ScenarioSpec,
    pub window: usize,
    pub stride: usize,
    pub variables: Vec<String>,
    pub faults: Vec<String>,
    /// Per class: (relative path, checksum) of the training and test recordings.
    pub train_files: Vec<(String, String)>,
    pub test_files: Vec<(String, String)>,
}

pub fn checksum(bytes: &[u8]) -> String {
    Sha256::digest(bytes)[..8].iter().map(|b| format!("{b:02x}")).collect()
}

pub fn class_file(part: &str, class: usize) -> String {
    format!("{part}/class_{class}.csv")
}

impl Manifest {
    pub fn for_preset(preset: &Preset) -> Self {
        let faults = preset
            .faults
            .iter()
            .map(|f| {
                format!(
                    "kind:{} variable:{} magnitude:{} onset:{}",
                    f.kind.as_str(),
                    preset.variables[f.variable],
                    f.magnitude,
                    f.onset
                )
            })
            .collect();
        Self {
            plant: preset.plant.to_string(),
            spec: preset.spec.clone(),
            window: preset.window,
            stride: preset.stride,
            variables: preset.variables.clone(),
            faults,
            train_files: Vec::new(),
            test_files: Vec::new(),
        }
    }

    pub fn classes(&self) -> usize {
        self.spec.classes()
    }

    pub fn render(&self) -> String {
        let join = |v: &[usize]| v.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(",");
        let mut s = format!("{HEADER}\n");
        let _ = writeln!(s, "plant={}", self.plant);
        let _ = writeln!(s, "scenario={}", self.spec.kind);
        let _ = writeln!(s, "seed={}", self.spec.seed);
        let _ = writeln!(s, "window={}", self.window);
        let _ = writeln!(s, "stride={}", self.stride);
        let _ = writeln!(s, "classes={}", self.classes());
        let _ = writeln!(s, "variables={}", self.variables.join(","));
        let _ = writeln!(s, "train_counts={}", join(&self.spec.train_counts));
        let _ = writeln!(s, "test_counts={}", join(&self.spec.test_counts));
        for (i, f) in self.faults.iter().enumerate() {
            let _ = writeln!(s, "fault.{}={f}", i + 1);
        }
        for (part, files) in [("train", &self.train_files), ("test", &self.test_files)] {
            for (c, (path, sum)) in files.iter().enumerate() {
                let _ = writeln!(s, "file.{part}.{c}={path} sha256:{sum}");
            }
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let bad = |m: String| CliError::Data(format!("manifest: {m}"));
        let mut lines = text.lines();
        if lines.next() != Some(HEADER) {
            return Err(bad(format!("first line must be {HEADER:?}")));
        }
        let mut map = BTreeMap::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("expected key=value, got {line:?}")))?;
            map.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| map.get(k).cloned().ok_or_else(|| bad(format!("missing key {k}")));
        let num = |k: &str| get(k)?.parse::<u64>().map_err(|_| bad(format!("{k} is not a number")));
        let counts = |k: &str| -> Result<Vec<usize>, CliError> {
            get(k)?.split(',').map(|n| n.parse().map_err(|_| bad(format!("{k}: bad count {n:?}")))).collect()
        };
        let kind: ScenarioKind = get("scenario")?.parse().map_err(|e| bad(format!("{e}")))?;
        let spec = ScenarioSpec::new(counts("train_counts")?, counts("test_counts")?, kind, num("seed")?)
            .map_err(|e| bad(e.to_string()))?;
        let classes = num("classes")? as usize;
        if classes != spec.classes() {
            return Err(bad(format!("classes={classes} but {} counts", spec.classes())));
        }
        let files = |part: &str| -> Result<Vec<(String, String)>, CliError> {
            (0..classes)
                .map(|c| {
                    let v = get(&format!("file.{part}.{c}"))?;
                    let (path, sum) = v.split_once(" sha256:").ok_or_else(|| bad(format!("file.{part}.{c}: no checksum")))?;
                    Ok((path.to_string(), sum.to_string()))
                })
                .collect()
        };
        let faults = (1..classes).map(|i| get(&format!("fault.{i}"))).collect::<Result<_, _>>()?;
        Ok(Self {
            plant: get("plant")?,
            window: num("window")? as usize,
            stride: num("stride")? as usize,
            variables: get("variables")?.split(',').map(str::to_string).collect(),
            faults,
            train_files: files("train")?,
            test_files: files("test")?,
            spec,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parse_round_trip() {
        let mut m = Manifest::for_preset(&Preset::stirred_tank(ScenarioKind::LongTail, 4));
        m.train_files = vec![(class_file("train", 0), "00".into()), (class_file("train", 1), "01".into())];
        m.test_files = vec![(class_file("test", 0), "10".into()), (class_file("test", 1), "11".into())];
        let text = m.render();
        assert!(text.contains("train_counts=780,20\n"));
        assert!(text.contains("fault.1=kind:step variable:steam magnitude:3 onset:0\n"));
        assert_eq!(Manifest::parse(&text).unwrap(), m);
        assert!(Manifest::parse(&text.replace("classes=2", "classes=3")).is_err());
        assert!(Manifest::parse("plant=x").is_err());
    }

    #[test]
    fn checksum_is_a_sha256_prefix() {
        assert_eq!(checksum(b"abc"), "ba7816bf8f01cfea");
    }
}
