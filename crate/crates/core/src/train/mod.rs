//! Two-stage training: the encoder learns from the supervised contrastive
//! objective on noise-augmented pairs, then a linear classifier is fitted
//! with cross-entropy on the (frozen) embeddings of the original windows.

mod report;

pub use report::{Metrics, TrainReport, REPORT_VERSION};

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::RngCore;
use thiserror::Error;

use crate::data::{augment_pairs, class_counts, DataError, Scenario, WindowedSample};
use crate::loss::supervised_positives;
use crate::model::{batch_tensor, ClassifierParams, EncoderParams, Model, ModelConfig, ModelError};
use crate::numerics::{NumericsError, Tape, Tensor};
use crate::par::Execution;
use crate::rng;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("stage {stage}, epoch {epoch}, batch {batch}: {source}")]
    Diverged {
        stage: u8,
        epoch: usize,
        batch: usize,
        #[source]
        source: NumericsError,
    },
    #[error("class {class} has no training samples; the classifier could never learn it")]
    MissingClass { class: usize },
    #[error("evaluation set is empty")]
    EmptyTestSet,
}

/// How the encoder is obtained before the classifier is fitted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    /// Contrastive pre-training, then the classifier.
    Contrastive,
    /// Randomly initialized encoder: the contrastive stage runs with a zero
    /// learning rate, which only populates the batch-norm moments.
    FrozenRandom,
    /// No contrastive stage: encoder and classifier trained jointly with
    /// cross-entropy for the combined epoch budget of both stages.
    CrossEntropyOnly,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Contrastive => "contrastive",
            Self::FrozenRandom => "frozen-random",
            Self::CrossEntropyOnly => "cross-entropy-only",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "contrastive" => Ok(Self::Contrastive),
            "frozen-random" => Ok(Self::FrozenRandom),
            "cross-entropy-only" => Ok(Self::CrossEntropyOnly),
            other => Err(TrainError::Config(format!(
                "unknown strategy {other:?} (contrastive|frozen-random|cross-entropy-only)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Original windows per batch; the contrastive batch holds twice as many.
    pub batch_size: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub stage1_lr: f64,
    pub stage2_lr: f64,
    pub momentum: f64,
    pub temperature: f64,
    pub noise_scale: f64,
    pub seed: u64,
    pub freeze_encoder: bool,
    pub strategy: Strategy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            stage1_epochs: 100,
            stage2_epochs: 50,
            stage1_lr: 0.05,
            stage2_lr: 0.1,
            momentum: 0.9,
            temperature: 0.5,
            noise_scale: 1.0,
            seed: 0,
            freeze_encoder: true,
            strategy: Strategy::Contrastive,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.batch_size < 2 {
            return fail(format!("batch size {} must be at least 2", self.batch_size));
        }
        for (name, v) in [("stage1_lr", self.stage1_lr), ("stage2_lr", self.stage2_lr)] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} {v} must be finite and non-negative"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum {} must lie in [0, 1)", self.momentum));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail(format!("temperature {} must be positive", self.temperature));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return fail(format!("noise scale {} must be non-negative", self.noise_scale));
        }
        Ok(())
    }

    /// Key/value echo for reports.
    pub fn echo(&self) -> Vec<(String, String)> {
        [
            ("train.strategy", self.strategy.to_string()),
            ("train.batch_size", self.batch_size.to_string()),
            ("train.stage1_epochs", self.stage1_epochs.to_string()),
            ("train.stage2_epochs", self.stage2_epochs.to_string()),
            ("train.stage1_lr", self.stage1_lr.to_string()),
            ("train.stage2_lr", self.stage2_lr.to_string()),
            ("train.momentum", self.momentum.to_string()),
            ("train.temperature", self.temperature.to_string()),
            ("train.noise_scale", self.noise_scale.to_string()),
            ("train.freeze_encoder", self.freeze_encoder.to_string()),
            ("train.seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

pub fn model_echo(c: &ModelConfig) -> Vec<(String, String)> {
    [
        ("model.height", c.height.to_string()),
        ("model.width", c.width.to_string()),
        ("model.reduction", c.reduction.to_string()),
        ("model.spatial_size", c.spatial_size.to_string()),
        ("model.hidden", c.hidden.to_string()),
        ("model.embed_dim", c.embed_dim.to_string()),
        ("model.bn_epsilon", c.bn_epsilon.to_string()),
        ("model.bn_momentum", c.bn_momentum.to_string()),
        ("model.normalize", c.normalize.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

/// SGD with heavy-ball momentum: `v <- mu v + g`, `p <- p - lr v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self { lr, momentum, velocity: Vec::new() }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((p, &g), v) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *v = self.momentum * *v + g;
                *p -= self.lr * *v;
            }
        }
    }
}

fn shuffled(n: usize, seed: u64, stage: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[rng::domain::SHUFFLE, stage, epoch as u64]));
    order
}

fn diverged(stage: u8, epoch: usize, batch: usize) -> impl Fn(ModelError) -> TrainError {
    move |e| match e {
        ModelError::Numerics(source) => TrainError::Diverged { stage, epoch, batch, source },
        other => TrainError::Model(other),
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Contrastive stage. Returns, per epoch, the batch mean of the contrastive
/// loss divided by the number of anchors.
///
/// Batches holding a single window are skipped with a warning: their
/// augmented pair is its own only candidate, so the loss is identically zero.
pub fn train_stage1(encoder: &mut EncoderParams, train: &[WindowedSample], cfg: &TrainConfig) -> Result<Vec<f64>, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::Config("empty training set".into()));
    }
    let mut sgd = Sgd::new(cfg.stage1_lr, cfg.momentum);
    let learn = cfg.stage1_lr > 0.0;
    let mut curve = Vec::with_capacity(cfg.stage1_epochs);
    for epoch in 0..cfg.stage1_epochs {
        let order = shuffled(train.len(), cfg.seed, 1, epoch);
        let mut losses = Vec::new();
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                log::warn!("stage 1 epoch {epoch}: skipping batch {b} with a single window");
                continue;
            }
            let originals: Vec<WindowedSample> = chunk.iter().map(|&i| train[i].clone()).collect();
            let noise_seed = rng::stream(cfg.seed, &[rng::domain::AUGMENT, epoch as u64, b as u64]).next_u64();
            let batch = augment_pairs(&originals, cfg.noise_scale, noise_seed);
            let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
            let refs: Vec<&WindowedSample> = batch.iter().collect();
            let mut tape = Tape::new();
            let input = tape.constant(batch_tensor(&encoder.config, &refs)?);
            let vars = encoder.bind(&mut tape, learn);
            let fail = diverged(1, epoch, b);
            let nodes = encoder.forward(&mut tape, &vars, input, true).map_err(&fail)?;
            let total = tape
                .contrastive(nodes.embedding, &supervised_positives(&labels), cfg.temperature)
                .map_err(|e| fail(e.into()))?;
            // Per-anchor average keeps the step size independent of the batch size.
            let loss = tape.scale(total, 1.0 / labels.len() as f64).map_err(|e| fail(e.into()))?;
            losses.push(tape.value(loss).data()[0]);
            if learn {
                tape.backward(loss).map_err(|e| fail(e.into()))?;
                let grads: Vec<Tensor> = vars.all.iter().map(|&v| tape.grad(v).expect("backward ran")).collect();
                sgd.step(&mut encoder.tensors, &grads);
                if let Some(i) = encoder.tensors.iter().position(|t| !t.is_finite()) {
                    return Err(fail(ModelError::Numerics(NumericsError::NonFinite {
                        op: crate::model::ENCODER_TENSORS[i],
                    })));
                }
            }
        }
        if losses.is_empty() {
            return Err(TrainError::Config("every stage-1 batch was skipped; need at least 2 windows".into()));
        }
        log::debug!("stage 1 epoch {epoch}: loss {}", mean(&losses));
        curve.push(mean(&losses));
    }
    Ok(curve)
}

fn require_all_classes(train: &[WindowedSample], classes: usize) -> Result<(), TrainError> {
    if let Some(b) = train.iter().find(|s| s.label >= classes) {
        return Err(TrainError::Config(format!("label {} outside {classes} classes", b.label)));
    }
    match class_counts(train, classes).iter().position(|&n| n == 0) {
        Some(class) => Err(TrainError::MissingClass { class }),
        None => Ok(()),
    }
}

/// Classifier stage on original (non-augmented) windows. With
/// `freeze_encoder` the encoder runs in inference mode and its embeddings
/// are computed once; otherwise encoder and classifier are updated jointly.
pub fn train_stage2(
    encoder: &mut EncoderParams,
    train: &[WindowedSample],
    classes: usize,
    cfg: &TrainConfig,
    exec: Execution,
) -> Result<(ClassifierParams, Vec<f64>), TrainError> {
    cfg.validate()?;
    require_all_classes(train, classes)?;
    let mut classifier = ClassifierParams::init(classes, encoder.config.embed_dim, cfg.seed)?;
    let curve = if cfg.freeze_encoder {
        let refs: Vec<&WindowedSample> = train.iter().collect();
        let embeddings = encoder.embed(&refs, exec)?;
        fit_classifier(&mut classifier, &embeddings, train, cfg)?
    } else {
        train_joint(encoder, &mut classifier, train, cfg, cfg.stage2_epochs, cfg.stage2_lr, 2)?
    };
    Ok((classifier, curve))
}

fn fit_classifier(
    classifier: &mut ClassifierParams,
    embeddings: &[Vec<f64>],
    train: &[WindowedSample],
    cfg: &TrainConfig,
) -> Result<Vec<f64>, TrainError> {
    let d = classifier.embed_dim();
    let mut sgd = Sgd::new(cfg.stage2_lr, cfg.momentum);
    let mut curve = Vec::with_capacity(cfg.stage2_epochs);
    for epoch in 0..cfg.stage2_epochs {
        let order = shuffled(train.len(), cfg.seed, 2, epoch);
        let mut losses = Vec::new();
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let fail = diverged(2, epoch, b);
            let z: Vec<f64> = chunk.iter().flat_map(|&i| embeddings[i].iter().copied()).collect();
            let targets: Vec<usize> = chunk.iter().map(|&i| train[i].label).collect();
            let mut tape = Tape::new();
            let zv = tape.constant(Tensor::new(&[chunk.len(), d], z).map_err(|e| fail(e.into()))?);
            let w = tape.param(classifier.weight.clone());
            let logits = tape.dense(zv, w, None).map_err(|e| fail(e.into()))?;
            let loss = tape.cross_entropy(logits, &targets).map_err(|e| fail(e.into()))?;
            losses.push(tape.value(loss).data()[0]);
            tape.backward(loss).map_err(|e| fail(e.into()))?;
            sgd.step(std::slice::from_mut(&mut classifier.weight), &[tape.grad(w).expect("backward ran")]);
            if !classifier.weight.is_finite() {
                return Err(fail(ModelError::Numerics(NumericsError::NonFinite { op: "classifier.weight" })));
            }
        }
        curve.push(mean(&losses));
    }
    Ok(curve)
}

/// Cross-entropy through encoder and classifier. The encoder follows the
/// stage-1 learning rate, the classifier `classifier_lr`.
fn train_joint(
    encoder: &mut EncoderParams,
    classifier: &mut ClassifierParams,
    train: &[WindowedSample],
    cfg: &TrainConfig,
    epochs: usize,
    classifier_lr: f64,
    stage: u8,
) -> Result<Vec<f64>, TrainError> {
    let mut enc_sgd = Sgd::new(cfg.stage1_lr, cfg.momentum);
    let mut cls_sgd = Sgd::new(classifier_lr, cfg.momentum);
    let mut curve = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let order = shuffled(train.len(), cfg.seed, u64::from(stage), epoch);
        let mut losses = Vec::new();
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                log::warn!("stage {stage} epoch {epoch}: skipping batch {b} with a single window");
                continue;
            }
            let fail = diverged(stage, epoch, b);
            let refs: Vec<&WindowedSample> = chunk.iter().map(|&i| &train[i]).collect();
            let targets: Vec<usize> = refs.iter().map(|s| s.label).collect();
            let mut tape = Tape::new();
            let input = tape.constant(batch_tensor(&encoder.config, &refs)?);
            let vars = encoder.bind(&mut tape, true);
            let w = tape.param(classifier.weight.clone());
            let nodes = encoder.forward(&mut tape, &vars, input, true).map_err(&fail)?;
            let logits = tape.dense(nodes.embedding, w, None).map_err(|e| fail(e.into()))?;
            let loss = tape.cross_entropy(logits, &targets).map_err(|e| fail(e.into()))?;
            losses.push(tape.value(loss).data()[0]);
            tape.backward(loss).map_err(|e| fail(e.into()))?;
            let grads: Vec<Tensor> = vars.all.iter().map(|&v| tape.grad(v).expect("backward ran")).collect();
            enc_sgd.step(&mut encoder.tensors, &grads);
            cls_sgd.step(std::slice::from_mut(&mut classifier.weight), &[tape.grad(w).expect("backward ran")]);
            if encoder.tensors.iter().any(|t| !t.is_finite()) || !classifier.weight.is_finite() {
                return Err(fail(ModelError::Numerics(NumericsError::NonFinite { op: "sgd update" })));
            }
        }
        if losses.is_empty() {
            return Err(TrainError::Config("every batch was skipped; need at least 2 windows".into()));
        }
        curve.push(mean(&losses));
    }
    Ok(curve)
}

/// Inference-mode predictions over `test`, summarized.
pub fn evaluate(model: &Model, test: &[WindowedSample], exec: Execution) -> Result<Metrics, TrainError> {
    if test.is_empty() {
        return Err(TrainError::EmptyTestSet);
    }
    let classes = model.classifier.classes();
    if let Some(s) = test.iter().find(|s| s.label >= classes) {
        return Err(TrainError::Config(format!("test label {} outside {classes} classes", s.label)));
    }
    let refs: Vec<&WindowedSample> = test.iter().collect();
    let predictions = model.predict(&refs, exec)?;
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (s, p) in test.iter().zip(&predictions) {
        confusion[s.label][p.label] += 1;
    }
    Ok(Metrics::from_confusion(confusion))
}

/// A trained model with the report describing how it was obtained.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub model: Model,
    pub report: TrainReport,
}

/// Initializes, trains and evaluates a model on `scenario` according to
/// `cfg.strategy`.
pub fn run(
    scenario: &Scenario,
    classes: usize,
    model_config: ModelConfig,
    cfg: &TrainConfig,
    exec: Execution,
) -> Result<RunOutput, TrainError> {
    cfg.validate()?;
    require_all_classes(&scenario.train, classes)?;
    let mut encoder = EncoderParams::init(model_config, cfg.seed)?;
    let (stage1, stage2, classifier) = match cfg.strategy {
        Strategy::Contrastive | Strategy::FrozenRandom => {
            let stage_cfg = match cfg.strategy {
                Strategy::FrozenRandom => TrainConfig { stage1_lr: 0.0, ..cfg.clone() },
                _ => cfg.clone(),
            };
            let stage1 = train_stage1(&mut encoder, &scenario.train, &stage_cfg)?;
            let (classifier, stage2) = train_stage2(&mut encoder, &scenario.train, classes, &stage_cfg, exec)?;
            (stage1, stage2, classifier)
        }
        Strategy::CrossEntropyOnly => {
            let mut classifier = ClassifierParams::init(classes, encoder.config.embed_dim, cfg.seed)?;
            let epochs = cfg.stage1_epochs + cfg.stage2_epochs;
            let curve = train_joint(&mut encoder, &mut classifier, &scenario.train, cfg, epochs, cfg.stage2_lr, 2)?;
            (Vec::new(), curve, classifier)
        }
    };
    let model = Model { encoder, classifier };
    let metrics = evaluate(&model, &scenario.test, exec)?;
    let mut config = cfg.echo();
    config.extend(model_echo(&model.encoder.config));
    config.push(("data.classes".into(), classes.to_string()));
    config.push(("data.train_counts".into(), join(&class_counts(&scenario.train, classes))));
    config.push(("data.test_counts".into(), join(&class_counts(&scenario.test, classes))));
    let report = TrainReport { config, stage1_loss: stage1, stage2_loss: stage2, metrics: Some(metrics) };
    Ok(RunOutput { model, report })
}

fn join(values: &[usize]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}
