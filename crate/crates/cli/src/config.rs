//! Run configuration: built-in defaults, overlaid by an optional TOML file,
//! overlaid by command-line flags.
//!
//! ```toml
//! seed = 7                     # master seed: data, initialization, shuffling, noise
//!
//! [data]
//! dir = "data"                 # dataset directory (generate writes, train reads)
//! plant = "stirred-tank"       # or "benchmark-plant"
//! scenario = "long-tail"       # balanced | imbalanced | long-tail
//! window = 10
//! stride = 10
//! train_counts = [780, 20]     # per class, normal first
//! test_counts = [200, 200]
//!
//! [[data.faults]]              # replaces the plant's fault list
//! variable = 2                 # 0-based variable index
//! kind = "step"                # step | random-variation
//! magnitude = 3.0
//! onset = 0
//!
//! [model]
//! reduction = 4
//! spatial_size = 7
//! hidden = 128
//! embed_dim = 64
//!
//! [train]
//! strategy = "contrastive"     # contrastive | frozen-random | cross-entropy-only
//! batch_size = 32
//! stage1_epochs = 100
//! stage2_epochs = 50
//! stage1_lr = 0.05
//! stage2_lr = 0.1
//! momentum = 0.9
//! temperature = 0.5
//! noise_scale = 1.0
//! freeze_encoder = true
//! ```
//!
//! Every key is optional; unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use sccam_core::data::{FaultKind, Plant, Preset, ScenarioKind, ScenarioSpec, SyntheticFaultConfig};
use sccam_core::model::ModelConfig;
use sccam_core::train::{Strategy, TrainConfig};

use crate::error::CliError;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub dir: Option<PathBuf>,
    pub plant: Option<String>,
    pub scenario: Option<String>,
    pub window: Option<usize>,
    pub stride: Option<usize>,
    pub train_counts: Option<Vec<usize>>,
    pub test_counts: Option<Vec<usize>>,
    pub faults: Option<Vec<FaultSection>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSection {
    pub variable: usize,
    pub kind: String,
    pub magnitude: f64,
    #[serde(default)]
    pub onset: usize,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub reduction: Option<usize>,
    pub spatial_size: Option<usize>,
    pub hidden: Option<usize>,
    pub embed_dim: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub strategy: Option<String>,
    pub batch_size: Option<usize>,
    pub stage1_epochs: Option<usize>,
    pub stage2_epochs: Option<usize>,
    pub stage1_lr: Option<f64>,
    pub stage2_lr: Option<f64>,
    pub momentum: Option<f64>,
    pub temperature: Option<f64>,
    pub noise_scale: Option<f64>,
    pub freeze_encoder: Option<bool>,
}

/// Flag values that override the file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub scenario: Option<String>,
    pub plant: Option<String>,
    pub data: Option<PathBuf>,
}

/// Fully resolved settings.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub data_dir: PathBuf,
    pub preset: Preset,
    pub model: ModelDims,
    pub train: TrainConfig,
}

/// Model dimensions other than the window shape, which comes from the data.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelDims {
    pub reduction: usize,
    pub spatial_size: usize,
    pub hidden: usize,
    pub embed_dim: usize,
}

impl ModelDims {
    pub fn for_window(&self, height: usize, width: usize) -> ModelConfig {
        ModelConfig {
            reduction: self.reduction,
            spatial_size: self.spatial_size,
            hidden: self.hidden,
            embed_dim: self.embed_dim,
            ..ModelConfig::new(height, width)
        }
    }
}

pub fn parse_file(text: &str, origin: &Path) -> Result<FileConfig, CliError> {
    toml::from_str(text).map_err(|e| CliError::Config(format!("{}: {e}", origin.display())))
}

pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig, CliError> {
    let file = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Path { path: p.to_path_buf(), message: e.to_string() })?;
            parse_file(&text, p)?
        }
        None => FileConfig::default(),
    };
    resolve(file, overrides)
}

fn config_err<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Config(e.to_string())
}

pub fn resolve(file: FileConfig, o: &Overrides) -> Result<RunConfig, CliError> {
    let seed = o.seed.or(file.seed).unwrap_or(0);
    let d = file.data;
    let plant: Plant = o.plant.as_deref().or(d.plant.as_deref()).unwrap_or("stirred-tank").parse().map_err(config_err)?;
    let kind: ScenarioKind =
        o.scenario.as_deref().or(d.scenario.as_deref()).unwrap_or("long-tail").parse().map_err(config_err)?;
    let mut preset = Preset::new(plant, kind, seed);
    if let Some(w) = d.window {
        preset.window = w;
    }
    if let Some(s) = d.stride {
        preset.stride = s;
    }
    if let Some(faults) = d.faults {
        preset.faults = faults
            .into_iter()
            .map(|f| {
                let kind: FaultKind = f.kind.parse().map_err(config_err)?;
                Ok(SyntheticFaultConfig { variable: f.variable, kind, magnitude: f.magnitude, onset: f.onset, coupling: None })
            })
            .collect::<Result<_, CliError>>()?;
        if let Some(f) = preset.faults.iter().find(|f| f.variable >= preset.variables.len()) {
            return Err(CliError::Config(format!(
                "fault variable {} outside the plant's {} variables",
                f.variable,
                preset.variables.len()
            )));
        }
    }
    if d.train_counts.is_some() || d.test_counts.is_some() || preset.spec.classes() != preset.classes() {
        let classes = preset.classes();
        let base = &preset.spec;
        let fit = |counts: Option<Vec<usize>>, defaults: &[usize]| -> Vec<usize> {
            counts.unwrap_or_else(|| (0..classes).map(|c| defaults[c.min(defaults.len() - 1)]).collect())
        };
        let train = fit(d.train_counts, &base.train_counts);
        let test = fit(d.test_counts, &base.test_counts);
        preset.spec = ScenarioSpec::new(train, test, kind, seed).map_err(config_err)?;
        if preset.spec.classes() != classes {
            return Err(CliError::Config(format!(
                "{} class counts given for {classes} classes (normal + {} faults)",
                preset.spec.classes(),
                classes - 1
            )));
        }
    }
    if preset.window == 0 || preset.stride == 0 {
        return Err(CliError::Config("window and stride must be positive".into()));
    }

    let m = file.model;
    let defaults = ModelConfig::new(1, 1);
    let model = ModelDims {
        reduction: m.reduction.unwrap_or(defaults.reduction),
        spatial_size: m.spatial_size.unwrap_or(defaults.spatial_size),
        hidden: m.hidden.unwrap_or(defaults.hidden),
        embed_dim: m.embed_dim.unwrap_or(defaults.embed_dim),
    };
    model.for_window(preset.height(), preset.window).validate().map_err(config_err)?;

    let t = file.train;
    let base = TrainConfig::default();
    let train = TrainConfig {
        strategy: match t.strategy {
            Some(s) => s.parse::<Strategy>().map_err(config_err)?,
            None => base.strategy,
        },
        batch_size: t.batch_size.unwrap_or(base.batch_size),
        stage1_epochs: t.stage1_epochs.unwrap_or(base.stage1_epochs),
        stage2_epochs: t.stage2_epochs.unwrap_or(base.stage2_epochs),
        stage1_lr: t.stage1_lr.unwrap_or(base.stage1_lr),
        stage2_lr: t.stage2_lr.unwrap_or(base.stage2_lr),
        momentum: t.momentum.unwrap_or(base.momentum),
        temperature: t.temperature.unwrap_or(base.temperature),
        noise_scale: t.noise_scale.unwrap_or(base.noise_scale),
        freeze_encoder: t.freeze_encoder.unwrap_or(base.freeze_encoder),
        seed,
    };
    train.validate().map_err(config_err)?;

    let data_dir = o.data.clone().or(d.dir).unwrap_or_else(|| PathBuf::from("data"));
    Ok(RunConfig { seed, data_dir, preset, model, train })
}
