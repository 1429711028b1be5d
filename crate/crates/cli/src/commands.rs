use std::fs;
use std::path::{Path, PathBuf};

use sccam_core::data::{cache, load_csv, prepare_scenario, write_csv, CsvLayout, RawSeries, Scenario, WindowedSample};
use sccam_core::explain::{
    export_heatmap, global_explanation, local_explanation, Explanation, HeatmapFormat, MapSource, Scope,
};
use sccam_core::model::{deserialize, serialize, Checkpoint, Model};
use sccam_core::par::{self, Execution};
use sccam_core::train::{self, Metrics, RunOutput, TrainReport};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::manifest::{checksum, class_file, Manifest, MANIFEST_FILE};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const REPORT_FILE: &str = "report.txt";
pub const DATASET_FILE: &str = "dataset.bin";

/// Lines for standard output; each is `key=value`.
pub type Output = Vec<String>;

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Path { path: path.to_path_buf(), message: e.to_string() }
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(io_err(path))
}

pub fn generate(cfg: &RunConfig, out: &Path) -> Result<Output, CliError> {
    let preset = &cfg.preset;
    log::info!("generating {} / {} data into {}", preset.plant, preset.spec.kind, out.display());
    let recordings = preset.generate(Execution::Sequential)?;
    let mut manifest = Manifest::for_preset(preset);
    for (part, series, files) in [
        ("train", &recordings.train, &mut manifest.train_files),
        ("test", &recordings.test, &mut manifest.test_files),
    ] {
        for (c, s) in series.iter().enumerate() {
            let rel = class_file(part, c);
            let path = out.join(&rel);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(io_err(parent))?;
            }
            write_csv(s, &path, CsvLayout::VariablesAsColumns)?;
            files.push((rel, checksum(&read(&path)?)));
        }
    }
    let text = manifest.render();
    let path = out.join(MANIFEST_FILE);
    write(&path, text.as_bytes())?;
    let mut lines = vec![
        format!("manifest={}", path.display()),
        format!("manifest_checksum={}", checksum(text.as_bytes())),
        format!("classes={}", manifest.classes()),
    ];
    lines.extend(text.lines().skip(1).filter(|l| l.contains("_counts=")).map(str::to_string));
    Ok(lines)
}

/// Reads and verifies a generated dataset.
pub fn load_dataset(dir: &Path) -> Result<(Manifest, Vec<RawSeries>, Vec<RawSeries>, String), CliError> {
    let path = dir.join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(CliError::Path { path, message: "dataset manifest not found (run `sccam generate` first)".into() });
    }
    let text = String::from_utf8(read(&path)?).map_err(|_| CliError::Data(format!("{}: not UTF-8", path.display())))?;
    let manifest = Manifest::parse(&text)?;
    let load = |files: &[(String, String)]| -> Result<Vec<RawSeries>, CliError> {
        files
            .iter()
            .map(|(rel, sum)| {
                let p = dir.join(rel);
                let found = checksum(&read(&p)?);
                if &found != sum {
                    return Err(CliError::Data(format!("{}: checksum {found} does not match manifest {sum}", p.display())));
                }
                let series = load_csv(&p, CsvLayout::VariablesAsColumns)?;
                if series.variables != manifest.variables {
                    return Err(CliError::Data(format!("{}: variables differ from the manifest", p.display())));
                }
                Ok(series)
            })
            .collect()
    };
    let train = load(&manifest.train_files)?;
    let test = load(&manifest.test_files)?;
    Ok((manifest, train, test, checksum(text.as_bytes())))
}

/// A prepared dataset plus the report lines describing where it came from.
pub struct Prepared {
    pub variables: Vec<String>,
    pub scenario: Scenario,
    pub classes: usize,
    pub echo: Vec<(String, String)>,
}

pub fn prepare(cfg: &RunConfig, scenario_flag: Option<&str>) -> Result<Prepared, CliError> {
    let (manifest, train, test, manifest_sum) = load_dataset(&cfg.data_dir)?;
    if let Some(flag) = scenario_flag {
        if flag != manifest.spec.kind.as_str() {
            return Err(CliError::Config(format!(
                "--scenario {flag} does not match the dataset in {} ({})",
                cfg.data_dir.display(),
                manifest.spec.kind
            )));
        }
    }
    let prepared = prepare_scenario(&train, &test, manifest.window, manifest.stride, &manifest.spec)?;
    let echo = vec![
        ("data.dir".to_string(), cfg.data_dir.display().to_string()),
        ("data.manifest_checksum".to_string(), manifest_sum),
        ("data.plant".to_string(), manifest.plant.clone()),
        ("data.scenario".to_string(), manifest.spec.kind.to_string()),
        ("data.seed".to_string(), manifest.spec.seed.to_string()),
        ("data.window".to_string(), manifest.window.to_string()),
        ("data.stride".to_string(), manifest.stride.to_string()),
        ("data.variables".to_string(), manifest.variables.join(",")),
    ];
    Ok(Prepared { variables: prepared.variables, scenario: prepared.scenario, classes: manifest.classes(), echo })
}

fn train_one(cfg: &RunConfig, data: &Prepared, seed: u64, out: &Path) -> Result<Output, CliError> {
    let train_cfg = train::TrainConfig { seed, ..cfg.train.clone() };
    let model_cfg = cfg.model.for_window(data.variables.len(), data.scenario.train[0].width);
    log::info!("training seed {seed} ({} windows)", data.scenario.train.len());
    let RunOutput { model, mut report } = train::run(&data.scenario, data.classes, model_cfg, &train_cfg, Execution::Sequential)?;
    let mut config = data.echo.clone();
    config.append(&mut report.config);
    report.config = config;
    let ckpt = out.join(CHECKPOINT_FILE);
    let report_path = out.join(REPORT_FILE);
    let dataset = out.join(DATASET_FILE);
    write(&ckpt, &serialize(&Checkpoint { encoder: model.encoder, classifier: Some(model.classifier) }))?;
    write(&report_path, report.render().as_bytes())?;
    write(&dataset, &cache::encode(&data.variables, &data.scenario)?)?;
    let m = report.metrics.as_ref().expect("run always evaluates");
    Ok(vec![
        format!("seed={seed}"),
        format!("checkpoint={}", ckpt.display()),
        format!("report={}", report_path.display()),
        format!("dataset={}", dataset.display()),
        format!("accuracy={}", m.accuracy),
        format!("macro_accuracy={}", m.macro_accuracy),
    ])
}

/// Trains `seeds` runs starting at the configured seed. Several seeds run
/// concurrently, each in its own `seed-<n>` directory.
pub fn train(cfg: &RunConfig, scenario_flag: Option<&str>, out: &Path, seeds: usize) -> Result<Output, CliError> {
    let data = prepare(cfg, scenario_flag)?;
    if seeds <= 1 {
        return train_one(cfg, &data, cfg.seed, out);
    }
    let results = par::map_range(Execution::Parallel, seeds, |i| {
        let seed = cfg.seed + i as u64;
        train_one(cfg, &data, seed, &out.join(format!("seed-{seed}")))
    });
    let mut lines = Vec::new();
    for r in results {
        lines.extend(r?);
    }
    Ok(lines)
}

pub fn load_model(path: &Path) -> Result<Model, CliError> {
    let ck = deserialize(&read(path)?).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let classifier = ck
        .classifier
        .ok_or_else(|| CliError::Data(format!("{}: checkpoint holds no classifier", path.display())))?;
    Ok(Model { encoder: ck.encoder, classifier })
}

fn dataset_path(checkpoint: &Path, explicit: Option<&Path>) -> PathBuf {
    explicit.map(Path::to_path_buf).unwrap_or_else(|| checkpoint.with_file_name(DATASET_FILE))
}

fn load_cache(path: &Path) -> Result<(Vec<String>, Scenario), CliError> {
    let bytes = read(path)?;
    cache::decode(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn check_compatible(model: &Model, variables: &[String], test: &[WindowedSample]) -> Result<(), CliError> {
    let c = &model.encoder.config;
    if let Some(w) = test.first() {
        if (w.height, w.width) != (c.height, c.width) || variables.len() != c.height {
            return Err(CliError::Data(format!(
                "dataset windows are {}x{} but the checkpoint expects {}x{}",
                w.height, w.width, c.height, c.width
            )));
        }
    }
    Ok(())
}

pub fn metric_lines(m: &Metrics) -> Output {
    let mut lines = vec![format!("accuracy={}", m.accuracy), format!("macro_accuracy={}", m.macro_accuracy)];
    for (c, acc) in m.per_class.iter().enumerate() {
        let acc = acc.map_or_else(|| "n/a".to_string(), |a| a.to_string());
        lines.push(format!("class.{c}.accuracy={acc}"));
    }
    for (c, row) in m.confusion.iter().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        lines.push(format!("confusion.{c}={}", cells.join(",")));
    }
    lines
}

pub fn evaluate(checkpoint: &Path, data: Option<&Path>, out: Option<&Path>) -> Result<Output, CliError> {
    let model = load_model(checkpoint)?;
    let dataset = dataset_path(checkpoint, data);
    let (variables, scenario) = load_cache(&dataset)?;
    check_compatible(&model, &variables, &scenario.test)?;
    let metrics = train::evaluate(&model, &scenario.test, Execution::Sequential)?;
    let mut lines = metric_lines(&metrics);
    if let Some(out) = out {
        let report = TrainReport {
            config: vec![
                ("evaluate.checkpoint".into(), checkpoint.display().to_string()),
                ("evaluate.dataset".into(), dataset.display().to_string()),
            ],
            stage1_loss: Vec::new(),
            stage2_loss: Vec::new(),
            metrics: Some(metrics),
        };
        let path = out.join(REPORT_FILE);
        write(&path, report.render().as_bytes())?;
        lines.push(format!("report={}", path.display()));
    }
    Ok(lines)
}

pub struct ExplainRequest<'a> {
    pub checkpoint: &'a Path,
    pub data: Option<&'a Path>,
    pub scope: Scope,
    pub class: Option<usize>,
    pub sample_index: Option<usize>,
    pub out: &'a Path,
    pub source: MapSource,
}

pub fn explain(req: &ExplainRequest<'_>) -> Result<Output, CliError> {
    let model = load_model(req.checkpoint)?;
    let (variables, scenario) = load_cache(&dataset_path(req.checkpoint, req.data))?;
    check_compatible(&model, &variables, &scenario.test)?;
    let classes = model.classifier.classes();
    if let Some(c) = req.class.filter(|&c| c >= classes) {
        return Err(CliError::Data(format!("class {c} is not in the test set (classes 0..{classes})")));
    }
    let (explanation, stem, extra): (Explanation, String, Vec<String>) = match req.scope {
        Scope::Global => {
            let class = req.class.ok_or_else(|| CliError::Config("--scope global needs --class".into()))?;
            let e = global_explanation(&model, &scenario.test, class, &variables, req.source, Execution::Sequential)?;
            (e, format!("global-class{class}"), Vec::new())
        }
        Scope::Local => {
            let index = req.sample_index.ok_or_else(|| CliError::Config("--scope local needs --sample-index".into()))?;
            let pool: Vec<&WindowedSample> =
                scenario.test.iter().filter(|s| req.class.is_none_or(|c| s.label == c)).collect();
            let window = pool.get(index).ok_or_else(|| {
                let within = req.class.map_or_else(String::new, |c| format!(" of class {c}"));
                CliError::Data(format!("sample index {index} out of range: {} test windows{within}", pool.len()))
            })?;
            let e = local_explanation(&model, window, &variables, req.source)?;
            let stem = match req.class {
                Some(c) => format!("local-class{c}-sample{index}"),
                None => format!("local-sample{index}"),
            };
            let extra = vec![format!("label={}", window.label), format!("predicted={}", e.class)];
            (e, stem, extra)
        }
    };
    fs::create_dir_all(req.out).map_err(io_err(req.out))?;
    let csv = req.out.join(format!("{stem}.csv"));
    let pgm = req.out.join(format!("{stem}.pgm"));
    export_heatmap(&explanation, &csv, HeatmapFormat::Csv)?;
    export_heatmap(&explanation, &pgm, HeatmapFormat::Pgm)?;
    let (lo, hi) = explanation.map.min_max();
    let mut lines = vec![
        explanation.verdict(),
        format!("scope={}", explanation.scope),
        format!("class={}", explanation.class),
    ];
    lines.extend(extra);
    let contributions: Vec<String> = explanation.contributions.iter().map(|c| c.to_string()).collect();
    lines.extend([
        format!("contributions={}", contributions.join(",")),
        format!("map_min={lo}"),
        format!("map_max={hi}"),
        format!("csv={}", csv.display()),
        format!("pgm={}", pgm.display()),
    ]);
    Ok(lines)
}
