//! The encoder (two pointwise conv + batch-norm + ReLU stages, attention,
//! projection head) and the linear classifier on its embeddings.

mod checkpoint;

pub use checkpoint::{deserialize, serialize, Checkpoint, CHECKPOINT_VERSION};

use thiserror::Error;

use crate::attention::{self, ChannelAttentionParams, CbamVars, SpatialAttentionParams};
use crate::data::WindowedSample;
use crate::numerics::{softmax, BnMode, NumericsError, RunningMoments, Tape, Tensor, Var};
use crate::par::{self, Execution};
use crate::rng;

/// Output channels of the first pointwise convolution.
pub const CONV1: usize = 16;
/// Output channels of the second pointwise convolution; the attention block
/// and the explanation maps work on this many channels.
pub const CONV2: usize = 32;

/// Samples per tape during batched inference.
const INFER_CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("{what}: expected {expected}, found {found}")]
    Dimension { what: &'static str, expected: String, found: String },
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint checksum mismatch (file truncated or corrupted)")]
    Checksum,
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Window height `H` (process variables).
    pub height: usize,
    /// Window width `W` (timesteps).
    pub width: usize,
    /// Channel-attention reduction ratio; must divide [`CONV2`].
    pub reduction: usize,
    /// Spatial-attention filter size; odd.
    pub spatial_size: usize,
    /// Projection head hidden width.
    pub hidden: usize,
    /// Embedding dimension `D_z`.
    pub embed_dim: usize,
    pub bn_epsilon: f64,
    /// Weight kept on the running moments at each update.
    pub bn_momentum: f64,
    /// Project embeddings onto the unit sphere.
    pub normalize: bool,
}

impl ModelConfig {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            reduction: 4,
            spatial_size: 7,
            hidden: 128,
            embed_dim: 64,
            bn_epsilon: 1e-5,
            bn_momentum: 0.9,
            normalize: true,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.height == 0 || self.width == 0 {
            return fail(format!("window {}x{} is empty", self.height, self.width));
        }
        if self.reduction == 0 || CONV2 % self.reduction != 0 {
            return fail(format!("reduction ratio {} must divide {CONV2}", self.reduction));
        }
        if self.spatial_size % 2 == 0 {
            return fail(format!("spatial filter size {} must be odd", self.spatial_size));
        }
        if self.hidden == 0 {
            return fail("projection hidden width must be positive".into());
        }
        if self.embed_dim < 2 {
            return fail(format!("embedding dimension {} must be at least 2", self.embed_dim));
        }
        if !(self.bn_epsilon > 0.0) {
            return fail(format!("batch-norm epsilon {} must be positive", self.bn_epsilon));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return fail(format!("batch-norm momentum {} must lie in [0, 1)", self.bn_momentum));
        }
        Ok(())
    }

    pub fn flat_dim(&self) -> usize {
        CONV2 * self.height * self.width
    }
}

/// Names of the encoder tensors, in storage order.
pub const ENCODER_TENSORS: [&str; 14] = [
    "conv1.kernel",
    "conv1.bias",
    "bn1.gamma",
    "bn1.beta",
    "conv2.kernel",
    "conv2.bias",
    "bn2.gamma",
    "bn2.beta",
    "attention.w0",
    "attention.w1",
    "attention.kernel",
    "attention.bias",
    "projection.w1",
    "projection.w2",
];

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: ModelConfig,
    /// Tensors named by [`ENCODER_TENSORS`].
    pub tensors: Vec<Tensor>,
    /// Running moments of the two batch-norm layers.
    pub moments: [RunningMoments; 2],
}

impl EncoderParams {
    /// Fan-in uniform initialization; batch-norm scales start at one and
    /// shifts at zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut r = rng::stream(seed, &[rng::domain::INIT, 0]);
        let fan = |n: usize| (n as f64).recip().sqrt();
        let c = ChannelAttentionParams::init(CONV2, config.reduction, &mut r)?;
        let s = SpatialAttentionParams::init(config.spatial_size, &mut r)?;
        let tensors = vec![
            Tensor::uniform(&[CONV1, 1], 1.0, &mut r),
            Tensor::uniform(&[CONV1], 1.0, &mut r),
            Tensor::full(&[CONV1], 1.0),
            Tensor::zeros(&[CONV1]),
            Tensor::uniform(&[CONV2, CONV1], fan(CONV1), &mut r),
            Tensor::uniform(&[CONV2], fan(CONV1), &mut r),
            Tensor::full(&[CONV2], 1.0),
            Tensor::zeros(&[CONV2]),
            c.w0,
            c.w1,
            s.kernel,
            s.bias,
            Tensor::uniform(&[config.hidden, config.flat_dim()], fan(config.flat_dim()), &mut r),
            Tensor::uniform(&[config.embed_dim, config.hidden], fan(config.hidden), &mut r),
        ];
        Self::from_tensors(config, tensors)
    }

    /// Every tensor zero (batch-norm scales included).
    pub fn zeros(config: ModelConfig) -> Result<Self, ModelError> {
        let shapes = expected_shapes(&config);
        Self::from_tensors(config, shapes.iter().map(|s| Tensor::zeros(s)).collect())
    }

    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self, ModelError> {
        config.validate()?;
        let shapes = expected_shapes(&config);
        if tensors.len() != shapes.len() {
            return Err(ModelError::Dimension {
                what: "encoder tensor count",
                expected: shapes.len().to_string(),
                found: tensors.len().to_string(),
            });
        }
        for ((name, shape), t) in ENCODER_TENSORS.iter().zip(&shapes).zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(ModelError::Dimension {
                    what: name,
                    expected: format!("{shape:?}"),
                    found: format!("{:?}", t.shape()),
                });
            }
        }
        let moments = [
            RunningMoments::new(CONV1, config.bn_momentum),
            RunningMoments::new(CONV2, config.bn_momentum),
        ];
        Ok(Self { config, tensors, moments })
    }

    /// True once training has populated both batch-norm running moments.
    pub fn is_trained(&self) -> bool {
        self.moments.iter().all(|m| m.initialized)
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> EncoderVars {
        let vars: Vec<Var> =
            self.tensors.iter().map(|t| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) }).collect();
        EncoderVars::from_slice(&vars)
    }

    /// Records the forward pass of a `B x 1 x H x W` batch. Training mode
    /// normalizes with batch statistics and folds them into `self.moments`.
    pub fn forward(&mut self, tape: &mut Tape, vars: &EncoderVars, input: Var, train: bool) -> Result<EncoderNodes, ModelError> {
        let [m1, m2] = &mut self.moments;
        if train {
            encode(tape, &self.config, vars, input, BnMode::Train(m1), BnMode::Train(m2))
        } else {
            encode(tape, &self.config, vars, input, BnMode::Infer(m1), BnMode::Infer(m2))
        }
    }

    /// Inference-mode artifacts for each window, in input order. Chunks of
    /// windows are processed in parallel when `exec` allows it.
    pub fn infer(&self, windows: &[&WindowedSample], exec: Execution) -> Result<Vec<ForwardArtifacts>, ModelError> {
        par::map_chunks(exec, windows, INFER_CHUNK, |chunk| vec![self.infer_chunk(chunk)])
            .into_iter()
            .collect::<Result<Vec<_>, _>>()
            .map(|v| v.into_iter().flatten().collect())
    }

    /// Inference-mode embeddings only.
    pub fn embed(&self, windows: &[&WindowedSample], exec: Execution) -> Result<Vec<Vec<f64>>, ModelError> {
        Ok(self.infer(windows, exec)?.into_iter().map(|a| a.embedding).collect())
    }

    fn infer_chunk(&self, windows: &[&WindowedSample]) -> Result<Vec<ForwardArtifacts>, ModelError> {
        let mut tape = Tape::new();
        let input = tape.constant(batch_tensor(&self.config, windows)?);
        let vars = self.bind(&mut tape, false);
        let [m1, m2] = &self.moments;
        let nodes = encode(&mut tape, &self.config, &vars, input, BnMode::Infer(m1), BnMode::Infer(m2))?;
        let (h, w, d) = (self.config.height, self.config.width, self.config.embed_dim);
        let map = CONV2 * h * w;
        let z = tape.value(nodes.embedding).data();
        let refined = tape.value(nodes.refined).data();
        let channel = tape.value(nodes.channel).data();
        let spatial = tape.value(nodes.spatial).data();
        Ok((0..windows.len())
            .map(|b| ForwardArtifacts {
                embedding: z[b * d..][..d].to_vec(),
                refined: Tensor::new(&[CONV2, h, w], refined[b * map..][..map].to_vec()).expect("finite tape values"),
                channel: channel[b * CONV2..][..CONV2].to_vec(),
                spatial: Tensor::new(&[1, h, w], spatial[b * h * w..][..h * w].to_vec()).expect("finite tape values"),
            })
            .collect())
    }
}

fn expected_shapes(c: &ModelConfig) -> Vec<Vec<usize>> {
    let k = c.spatial_size;
    let hidden = CONV2 / c.reduction.max(1);
    vec![
        vec![CONV1, 1],
        vec![CONV1],
        vec![CONV1],
        vec![CONV1],
        vec![CONV2, CONV1],
        vec![CONV2],
        vec![CONV2],
        vec![CONV2],
        vec![hidden, CONV2],
        vec![CONV2, hidden],
        vec![1, 2, k, k],
        vec![1],
        vec![c.hidden, c.flat_dim()],
        vec![c.embed_dim, c.hidden],
    ]
}

/// Stacks windows into a `B x 1 x H x W` tensor, checking their dimensions.
pub fn batch_tensor(config: &ModelConfig, windows: &[&WindowedSample]) -> Result<Tensor, ModelError> {
    let mut data = Vec::with_capacity(windows.len() * config.height * config.width);
    for s in windows {
        if (s.height, s.width) != (config.height, config.width) {
            return Err(ModelError::Dimension {
                what: "window",
                expected: format!("{}x{}", config.height, config.width),
                found: format!("{}x{}", s.height, s.width),
            });
        }
        data.extend_from_slice(&s.data);
    }
    Ok(Tensor::new(&[windows.len(), 1, config.height, config.width], data)?)
}

/// Encoder parameters registered on a tape, in [`ENCODER_TENSORS`] order.
#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub all: Vec<Var>,
}

impl EncoderVars {
    pub fn from_slice(vars: &[Var]) -> Self {
        assert_eq!(vars.len(), ENCODER_TENSORS.len(), "encoder variable count");
        Self { all: vars.to_vec() }
    }

    fn attention(&self) -> CbamVars {
        CbamVars { w0: self.all[8], w1: self.all[9], kernel: self.all[10], bias: self.all[11] }
    }
}

/// Tape handles of one encoder pass.
#[derive(Clone, Copy, Debug)]
pub struct EncoderNodes {
    /// `B x D_z`.
    pub embedding: Var,
    /// `B x 32 x H x W`.
    pub refined: Var,
    pub channel: Var,
    pub spatial: Var,
}

/// conv1 -> BN -> ReLU -> conv2 -> BN -> ReLU -> attention -> flatten ->
/// dense -> ReLU -> dense (-> unit norm).
pub fn encode(
    tape: &mut Tape,
    config: &ModelConfig,
    vars: &EncoderVars,
    input: Var,
    bn1: BnMode<'_>,
    bn2: BnMode<'_>,
) -> Result<EncoderNodes, ModelError> {
    let shape = tape.shape(input).to_vec();
    let &[batch, 1, h, w] = shape.as_slice() else {
        return Err(ModelError::Dimension {
            what: "encoder input",
            expected: format!("B x 1 x {} x {}", config.height, config.width),
            found: format!("{shape:?}"),
        });
    };
    if (h, w) != (config.height, config.width) {
        return Err(ModelError::Dimension {
            what: "window",
            expected: format!("{}x{}", config.height, config.width),
            found: format!("{h}x{w}"),
        });
    }
    let v = &vars.all;
    let eps = config.bn_epsilon;
    let x = tape.conv_pointwise(input, v[0], v[1])?;
    let x = tape.batch_norm(x, v[2], v[3], eps, bn1)?;
    let x = tape.relu(x)?;
    let x = tape.conv_pointwise(x, v[4], v[5])?;
    let x = tape.batch_norm(x, v[6], v[7], eps, bn2)?;
    let x = tape.relu(x)?;
    let att = attention::cbam(tape, x, &vars.attention())?;
    let flat = tape.reshape(att.refined, &[batch, config.flat_dim()])?;
    let hidden = tape.dense(flat, v[12], None)?;
    let hidden = tape.relu(hidden)?;
    let z = tape.dense(hidden, v[13], None)?;
    let embedding = if config.normalize { tape.l2_normalize(z)? } else { z };
    Ok(EncoderNodes { embedding, refined: att.refined, channel: att.channel, spatial: att.spatial })
}

/// Per-window inference outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardArtifacts {
    pub embedding: Vec<f64>,
    /// `F_S`, `32 x H x W`.
    pub refined: Tensor,
    /// `A_C`, one gate per channel.
    pub channel: Vec<f64>,
    /// `A_S`, `1 x H x W`.
    pub spatial: Tensor,
}

/// Linear classifier `p = W z`, `W` being `M x D_z`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    pub weight: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classification {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub label: usize,
}

impl ClassifierParams {
    pub fn init(classes: usize, embed_dim: usize, seed: u64) -> Result<Self, ModelError> {
        Self::check(classes, embed_dim)?;
        let mut r = rng::stream(seed, &[rng::domain::INIT, 1]);
        Ok(Self { weight: Tensor::uniform(&[classes, embed_dim], (embed_dim as f64).recip().sqrt(), &mut r) })
    }

    pub fn zeros(classes: usize, embed_dim: usize) -> Result<Self, ModelError> {
        Self::check(classes, embed_dim)?;
        Ok(Self { weight: Tensor::zeros(&[classes, embed_dim]) })
    }

    pub fn from_weight(weight: Tensor) -> Result<Self, ModelError> {
        let &[m, d] = weight.shape() else {
            return Err(ModelError::Dimension {
                what: "classifier weight",
                expected: "M x D_z".into(),
                found: format!("{:?}", weight.shape()),
            });
        };
        Self::check(m, d)?;
        Ok(Self { weight })
    }

    fn check(classes: usize, embed_dim: usize) -> Result<(), ModelError> {
        if classes < 2 {
            return Err(ModelError::Config(format!("a classifier needs at least 2 classes, got {classes}")));
        }
        if embed_dim == 0 {
            return Err(ModelError::Config("classifier input dimension must be positive".into()));
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn embed_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Logits, softmax probabilities and the arg-max label (lowest index on
    /// ties).
    pub fn classify(&self, z: &[f64]) -> Result<Classification, ModelError> {
        if z.len() != self.embed_dim() {
            return Err(ModelError::Dimension {
                what: "embedding",
                expected: self.embed_dim().to_string(),
                found: z.len().to_string(),
            });
        }
        let d = self.embed_dim();
        let logits: Vec<f64> =
            (0..self.classes()).map(|m| self.weight.data()[m * d..][..d].iter().zip(z).map(|(a, b)| a * b).sum()).collect();
        let probabilities = softmax(&logits);
        let label = argmax(&logits);
        Ok(Classification { logits, probabilities, label })
    }
}

/// Index of the largest value; the lowest such index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// A trained encoder with its classifier head.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub encoder: EncoderParams,
    pub classifier: ClassifierParams,
}

impl Model {
    /// Predicted label for each window.
    pub fn predict(&self, windows: &[&WindowedSample], exec: Execution) -> Result<Vec<Classification>, ModelError> {
        self.encoder.embed(windows, exec)?.iter().map(|z| self.classifier.classify(z)).collect()
    }
}

#[cfg(test)]
mod tests;
