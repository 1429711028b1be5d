//! Convolutional block attention: channel gating from pooled spatial
//! statistics through a shared bottleneck MLP, followed by spatial gating from
//! channel-pooled maps through an `a x a` convolution.

use rand::Rng;

use crate::numerics::{NumericsError, PoolMode, Tape, Tensor, Var};

/// Shared bottleneck MLP of the channel branch. No biases.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelAttentionParams {
    /// `C/r x C`.
    pub w0: Tensor,
    /// `C x C/r`.
    pub w1: Tensor,
    pub reduction: usize,
}

impl ChannelAttentionParams {
    pub fn zeros(channels: usize, reduction: usize) -> Result<Self, NumericsError> {
        let hidden = hidden_width(channels, reduction)?;
        Ok(Self { w0: Tensor::zeros(&[hidden, channels]), w1: Tensor::zeros(&[channels, hidden]), reduction })
    }

    /// Uniform in `+-1/sqrt(fan_in)`.
    pub fn init<R: Rng + ?Sized>(channels: usize, reduction: usize, rng: &mut R) -> Result<Self, NumericsError> {
        let hidden = hidden_width(channels, reduction)?;
        let w0 = Tensor::uniform(&[hidden, channels], (channels as f64).recip().sqrt(), rng);
        let w1 = Tensor::uniform(&[channels, hidden], (hidden as f64).recip().sqrt(), rng);
        Ok(Self { w0, w1, reduction })
    }

    pub fn from_weights(w0: Tensor, w1: Tensor, reduction: usize) -> Result<Self, NumericsError> {
        let channels = w1.shape().first().copied().unwrap_or(0);
        let hidden = hidden_width(channels, reduction)?;
        if w0.shape() != [hidden, channels] || w1.shape() != [channels, hidden] {
            return Err(NumericsError::ShapeMismatch {
                op: "channel_attention",
                left: w0.shape().to_vec(),
                right: w1.shape().to_vec(),
            });
        }
        Ok(Self { w0, w1, reduction })
    }

    pub fn channels(&self) -> usize {
        self.w1.shape()[0]
    }
}

fn hidden_width(channels: usize, reduction: usize) -> Result<usize, NumericsError> {
    if reduction == 0 || channels == 0 || channels % reduction != 0 {
        return Err(NumericsError::Config(format!(
            "reduction ratio {reduction} must divide the channel count {channels}"
        )));
    }
    Ok(channels / reduction)
}

/// `1 x 2 x a x a` filter over the stacked (mean, max) channel maps, plus bias.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialAttentionParams {
    pub kernel: Tensor,
    /// Single entry.
    pub bias: Tensor,
}

impl SpatialAttentionParams {
    pub fn zeros(size: usize) -> Result<Self, NumericsError> {
        check_size(size)?;
        Ok(Self { kernel: Tensor::zeros(&[1, 2, size, size]), bias: Tensor::zeros(&[1]) })
    }

    pub fn init<R: Rng + ?Sized>(size: usize, rng: &mut R) -> Result<Self, NumericsError> {
        check_size(size)?;
        let bound = ((2 * size * size) as f64).recip().sqrt();
        Ok(Self { kernel: Tensor::uniform(&[1, 2, size, size], bound, rng), bias: Tensor::uniform(&[1], bound, rng) })
    }

    pub fn from_weights(kernel: Tensor, bias: f64) -> Result<Self, NumericsError> {
        let &[1, 2, a, b] = kernel.shape() else {
            return Err(NumericsError::Rank { op: "spatial_attention", expected: "1 x 2 x a x a", shape: kernel.shape().to_vec() });
        };
        if a != b {
            return Err(NumericsError::Config(format!("spatial filter must be square, got {a}x{b}")));
        }
        check_size(a)?;
        Ok(Self { kernel, bias: Tensor::scalar(bias).reshape(&[1])? })
    }

    pub fn size(&self) -> usize {
        self.kernel.shape()[2]
    }
}

fn check_size(size: usize) -> Result<(), NumericsError> {
    if size % 2 == 0 {
        return Err(NumericsError::Config(format!("spatial filter size must be odd, got {size}")));
    }
    Ok(())
}

/// Attention parameters registered on a tape.
#[derive(Clone, Copy, Debug)]
pub struct CbamVars {
    pub w0: Var,
    pub w1: Var,
    pub kernel: Var,
    pub bias: Var,
}

impl CbamVars {
    /// Registers the parameters as leaves; `trainable` selects `param` over
    /// `constant`.
    pub fn bind(tape: &mut Tape, c: &ChannelAttentionParams, s: &SpatialAttentionParams, trainable: bool) -> Self {
        let mut leaf = |t: &Tensor| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        Self { w0: leaf(&c.w0), w1: leaf(&c.w1), kernel: leaf(&s.kernel), bias: leaf(&s.bias) }
    }
}

/// Tape handles of one attention pass.
#[derive(Clone, Copy, Debug)]
pub struct CbamNodes {
    /// `F_S`, same shape as the input.
    pub refined: Var,
    /// `A_C`, `C x 1 x 1` per sample.
    pub channel: Var,
    /// `A_S`, `1 x H x W` per sample.
    pub spatial: Var,
}

/// `A_C = sigmoid(W1 relu(W0 avg(F)) + W1 relu(W0 max(F)))`.
pub fn channel_attention(tape: &mut Tape, features: Var, w0: Var, w1: Var) -> Result<Var, NumericsError> {
    let avg = tape.pool_spatial(features, PoolMode::Avg)?;
    let max = tape.pool_spatial(features, PoolMode::Max)?;
    let pooled_shape = tape.shape(avg).to_vec();
    let channels = tape.shape(w1).first().copied().unwrap_or(0);
    let rows = tape.value(avg).len() / channels.max(1);
    let branch = |tape: &mut Tape, pooled: Var| -> Result<Var, NumericsError> {
        let flat = tape.reshape(pooled, &[rows, channels])?;
        let hidden = tape.dense(flat, w0, None)?;
        let hidden = tape.relu(hidden)?;
        tape.dense(hidden, w1, None)
    };
    let a = branch(tape, avg)?;
    let b = branch(tape, max)?;
    let logits = tape.add(a, b)?;
    let gate = tape.sigmoid(logits)?;
    tape.reshape(gate, &pooled_shape)
}

/// `A_S = sigmoid(f([mean_c(F); max_c(F)]))` with same padding.
pub fn spatial_attention(tape: &mut Tape, features: Var, kernel: Var, bias: Var) -> Result<Var, NumericsError> {
    let avg = tape.pool_channel(features, PoolMode::Avg)?;
    let max = tape.pool_channel(features, PoolMode::Max)?;
    let stacked = tape.concat_channels(&[avg, max])?;
    let conv = tape.conv2d_same(stacked, kernel, bias)?;
    tape.sigmoid(conv)
}

/// Channel then spatial attention: `F_C = A_C * F`, `F_S = A_S * F_C`.
pub fn cbam(tape: &mut Tape, features: Var, params: &CbamVars) -> Result<CbamNodes, NumericsError> {
    let channel = channel_attention(tape, features, params.w0, params.w1)?;
    let gated = tape.mul_broadcast(features, channel)?;
    let spatial = spatial_attention(tape, gated, params.kernel, params.bias)?;
    let refined = tape.mul_broadcast(gated, spatial)?;
    Ok(CbamNodes { refined, channel, spatial })
}

/// Result of a value-level attention pass.
#[derive(Clone, Debug, PartialEq)]
pub struct CbamOutput {
    pub refined: Tensor,
    pub channel: Tensor,
    pub spatial: Tensor,
}

/// Attention on a `C x H x W` (or batched `B x C x H x W`) map with fixed
/// parameters.
pub fn cbam_forward(
    features: &Tensor,
    channel: &ChannelAttentionParams,
    spatial: &SpatialAttentionParams,
) -> Result<CbamOutput, NumericsError> {
    let mut tape = Tape::new();
    let f = tape.constant(features.clone());
    let vars = CbamVars::bind(&mut tape, channel, spatial, false);
    let nodes = cbam(&mut tape, f, &vars)?;
    Ok(CbamOutput {
        refined: tape.value(nodes.refined).clone(),
        channel: tape.value(nodes.channel).clone(),
        spatial: tape.value(nodes.spatial).clone(),
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;
    use crate::numerics::{check_gradients, sigmoid_scalar};
    use crate::par::Execution;
    use crate::rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng::stream(seed, &[7]);
        let n = shape.iter().product();
        t(shape, &(0..n).map(|_| r.random_range(-2.0..2.0)).collect::<Vec<_>>())
    }

    #[test]
    fn zero_mlp_gives_half() {
        let c = ChannelAttentionParams::zeros(4, 2).unwrap();
        let s = SpatialAttentionParams::zeros(3).unwrap();
        let f = random(&[4, 3, 5], 1);
        let out = cbam_forward(&f, &c, &s).unwrap();
        assert_eq!(out.channel.shape(), &[4, 1, 1]);
        assert!(out.channel.data().iter().all(|&v| v == 0.5));
        assert_eq!(out.spatial.shape(), &[1, 3, 5]);
        assert!(out.spatial.data().iter().all(|&v| v == 0.5));
        for (r, x) in out.refined.data().iter().zip(f.data()) {
            assert_eq!(*r, 0.25 * x);
        }
    }

    #[test]
    fn channel_gate_by_hand() {
        // C=2, r=2: W0 = [0.5, -1], W1 = [[2], [-1]]. Channel 0 constant 2,
        // channel 1 constant -1, so avg = max = [2, -1].
        // hidden = relu(0.5*2 - 1*(-1)) = 2 per branch, each branch gives
        // W1*2 = [4, -2]; the two branches sum to [8, -4].
        let c = ChannelAttentionParams::from_weights(t(&[1, 2], &[0.5, -1.0]), t(&[2, 1], &[2.0, -1.0]), 2).unwrap();
        let f = t(&[2, 2, 2], &[2.0, 2.0, 2.0, 2.0, -1.0, -1.0, -1.0, -1.0]);
        let mut tape = Tape::new();
        let fv = tape.constant(f);
        let (w0, w1) = (tape.constant(c.w0.clone()), tape.constant(c.w1.clone()));
        let a = channel_attention(&mut tape, fv, w0, w1).unwrap();
        let got = tape.value(a).data();
        assert!((got[0] - 1.0 / (1.0 + (-8.0f64).exp())).abs() < 1e-15);
        assert!((got[1] - 1.0 / (1.0 + 4.0f64.exp())).abs() < 1e-15);
    }

    #[test]
    fn single_channel_spatial_gate_closed_form() {
        let (a, b) = (0.7, -0.2);
        let s = SpatialAttentionParams::from_weights(t(&[1, 2, 1, 1], &[a, b]), 0.0).unwrap();
        let f = random(&[1, 3, 4], 2);
        let mut tape = Tape::new();
        let fv = tape.constant(f.clone());
        let (k, bias) = (tape.constant(s.kernel.clone()), tape.constant(s.bias.clone()));
        let gate = spatial_attention(&mut tape, fv, k, bias).unwrap();
        for (g, x) in tape.value(gate).data().iter().zip(f.data()) {
            assert!((g - sigmoid_scalar((a + b) * x)).abs() < 1e-15);
        }
    }

    #[test]
    fn invalid_parameters() {
        assert!(ChannelAttentionParams::zeros(6, 4).is_err());
        assert!(ChannelAttentionParams::zeros(4, 0).is_err());
        assert!(SpatialAttentionParams::zeros(4).is_err());
        assert!(SpatialAttentionParams::from_weights(Tensor::zeros(&[1, 3, 3, 3]), 0.0).is_err());
        let c = ChannelAttentionParams::zeros(4, 2).unwrap();
        let s = SpatialAttentionParams::zeros(3).unwrap();
        assert!(cbam_forward(&Tensor::zeros(&[3, 2, 2]), &c, &s).is_err());
    }

    #[test]
    fn composition_matches_literal_steps() {
        let mut r = rng::stream(5, &[]);
        let c = ChannelAttentionParams::init(8, 4, &mut r).unwrap();
        let s = SpatialAttentionParams::init(3, &mut r).unwrap();
        let f = random(&[8, 4, 6], 3);
        let out = cbam_forward(&f, &c, &s).unwrap();
        // Pooling, MLP and gating spelled out on plain slices.
        let (ch, hw) = (8, 24);
        let mlp = |v: &[f64]| -> Vec<f64> {
            let hidden: Vec<f64> =
                (0..2).map(|j| (0..ch).map(|i| c.w0.at(&[j, i]) * v[i]).sum::<f64>().max(0.0)).collect();
            (0..ch).map(|i| (0..2).map(|j| c.w1.at(&[i, j]) * hidden[j]).sum()).collect()
        };
        let avg: Vec<f64> = (0..ch).map(|i| f.data()[i * hw..][..hw].iter().sum::<f64>() / hw as f64).collect();
        let max: Vec<f64> =
            (0..ch).map(|i| f.data()[i * hw..][..hw].iter().cloned().fold(f64::MIN, f64::max)).collect();
        let ac: Vec<f64> = mlp(&avg).iter().zip(mlp(&max)).map(|(a, b)| sigmoid_scalar(a + b)).collect();
        let fc: Vec<f64> = (0..ch * hw).map(|i| ac[i / hw] * f.data()[i]).collect();
        let mut tape = Tape::new();
        let fcv = tape.constant(Tensor::new(&[8, 4, 6], fc.clone()).unwrap());
        let (k, b) = (tape.constant(s.kernel.clone()), tape.constant(s.bias.clone()));
        let asv = spatial_attention(&mut tape, fcv, k, b).unwrap();
        let a_s = tape.value(asv).data().to_vec();
        for (i, got) in out.refined.data().iter().enumerate() {
            let want = a_s[i % hw] * fc[i];
            assert!((got - want).abs() <= 1e-14 * want.abs().max(1.0));
        }
        assert!(ac.iter().zip(out.channel.data()).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..3 {
            let mut r = rng::stream(seed, &[11]);
            let c = ChannelAttentionParams::init(4, 2, &mut r).unwrap();
            let s = SpatialAttentionParams::init(3, &mut r).unwrap();
            let inputs = [random(&[2, 4, 3, 4], seed), c.w0, c.w1, s.kernel, s.bias];
            let err = check_gradients(
                &inputs,
                |tp, v| {
                    let vars = CbamVars { w0: v[1], w1: v[2], kernel: v[3], bias: v[4] };
                    Ok(cbam(tp, v[0], &vars)?.refined)
                },
                1e-5,
                seed,
                Execution::Sequential,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    fn shape_and_seed() -> impl Strategy<Value = (usize, usize, usize, usize, u64)> {
        (1usize..4, 1usize..7, 1usize..9, prop::sample::select(vec![1usize, 3, 5]), any::<u64>())
            .prop_map(|(k, h, w, a, seed)| (4 * k, h, w, a, seed))
    }

    proptest! {
        #[test]
        fn gates_in_open_unit_interval_and_contract((c, h, w, a, seed) in shape_and_seed()) {
            let mut r = rng::stream(seed, &[]);
            let cp = ChannelAttentionParams::init(c, 4, &mut r).unwrap();
            let sp = SpatialAttentionParams::init(a, &mut r).unwrap();
            let f = random(&[c, h, w], seed).map(|v| v * 10.0);
            let out = cbam_forward(&f, &cp, &sp).unwrap();
            prop_assert_eq!(out.refined.shape(), f.shape());
            prop_assert_eq!(out.channel.shape(), &[c, 1, 1]);
            prop_assert_eq!(out.spatial.shape(), &[1, h, w]);
            for &v in out.channel.data().iter().chain(out.spatial.data()) {
                prop_assert!(v > 0.0 && v < 1.0);
            }
            for (r, x) in out.refined.data().iter().zip(f.data()) {
                prop_assert!(r.abs() <= x.abs());
            }
        }

        #[test]
        fn channel_permutation_is_equivariant(seed in any::<u64>(), rot in 1usize..8) {
            let (c, h, w) = (8, 3, 4);
            let mut r = rng::stream(seed, &[]);
            let cp = ChannelAttentionParams::init(c, 4, &mut r).unwrap();
            let f = random(&[c, h, w], seed);
            let perm: Vec<usize> = (0..c).map(|i| (i + rot) % c).collect();
            let fp: Vec<f64> = perm.iter().flat_map(|&p| f.outer(p).to_vec()).collect();
            let w0p: Vec<f64> = (0..2).flat_map(|j| perm.iter().map(move |&p| (j, p))).map(|(j, p)| cp.w0.at(&[j, p])).collect();
            let w1p: Vec<f64> = perm.iter().flat_map(|&p| cp.w1.outer(p).to_vec()).collect();
            let gate = |f: Tensor, w0: Tensor, w1: Tensor| {
                let mut tape = Tape::new();
                let (f, w0, w1) = (tape.constant(f), tape.constant(w0), tape.constant(w1));
                let a = channel_attention(&mut tape, f, w0, w1).unwrap();
                tape.value(a).data().to_vec()
            };
            let base = gate(f, cp.w0.clone(), cp.w1.clone());
            let permuted = gate(t(&[c, h, w], &fp), t(&[2, c], &w0p), t(&[c, 2], &w1p));
            for (i, &p) in perm.iter().enumerate() {
                prop_assert!((permuted[i] - base[p]).abs() < 1e-12);
            }
        }
    }
}
