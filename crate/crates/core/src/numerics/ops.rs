use super::tape::{MapDims, Op};
use super::{NumericsError, Tape, Tensor, Var};

/// Reduction used by the pooling ops.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
}

/// Exponential moving averages of batch statistics, one entry per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Weight kept on the previous running value at each update.
    pub momentum: f64,
    pub initialized: bool,
}

impl RunningMoments {
    pub fn new(channels: usize, momentum: f64) -> Self {
        Self { mean: vec![0.0; channels], var: vec![1.0; channels], momentum, initialized: false }
    }

    /// Folds one batch's statistics in. The first update copies them.
    pub fn update(&mut self, mean: &[f64], var: &[f64]) {
        if !self.initialized {
            self.mean.copy_from_slice(mean);
            self.var.copy_from_slice(var);
            self.initialized = true;
            return;
        }
        let m = self.momentum;
        for (r, &b) in self.mean.iter_mut().zip(mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, &b) in self.var.iter_mut().zip(var) {
            *r = m * *r + (1.0 - m) * b;
        }
    }
}

/// Batch-norm behavior: batch statistics (updating the running moments) or
/// stored running moments.
pub enum BnMode<'a> {
    Train(&'a mut RunningMoments),
    Infer(&'a RunningMoments),
}

/// Logistic function, clamped so the result stays strictly inside (0, 1).
pub fn sigmoid_scalar(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Max-shifted softmax of a logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Interprets `C x H x W` (unbatched) or `B x C x H x W`.
fn map_dims(op: &'static str, shape: &[usize]) -> Result<(MapDims, bool), NumericsError> {
    match *shape {
        [c, h, w] => Ok((MapDims { batch: 1, channels: c, height: h, width: w }, false)),
        [b, c, h, w] => Ok((MapDims { batch: b, channels: c, height: h, width: w }, true)),
        _ => Err(NumericsError::Rank { op, expected: "3 or 4", shape: shape.to_vec() }),
    }
}

fn map_shape(dims: MapDims, channels: usize, batched: bool) -> Vec<usize> {
    if batched {
        vec![dims.batch, channels, dims.height, dims.width]
    } else {
        vec![channels, dims.height, dims.width]
    }
}

fn pad4(shape: &[usize]) -> Option<[usize; 4]> {
    if shape.len() > 4 {
        return None;
    }
    let mut out = [1; 4];
    out[4 - shape.len()..].copy_from_slice(shape);
    Some(out)
}

impl Tape {
    /// 1x1 convolution: `out[o,h,w] = sum_i kernel[o,i] * input[i,h,w] + bias[o]`.
    pub fn conv_pointwise(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var, NumericsError> {
        const OP: &str = "conv_pointwise";
        let (dims, batched) = map_dims(OP, self.shape(input))?;
        let kshape = self.shape(kernel).to_vec();
        let [out_channels, in_channels] = kshape[..] else {
            return Err(NumericsError::Rank { op: OP, expected: "2", shape: kshape });
        };
        if in_channels != dims.channels {
            return Err(NumericsError::Dimension {
                op: OP,
                axis: "input channel",
                expected: in_channels,
                found: dims.channels,
            });
        }
        if self.value(bias).len() != out_channels {
            return Err(NumericsError::Dimension {
                op: OP,
                axis: "bias",
                expected: out_channels,
                found: self.value(bias).len(),
            });
        }
        let s = dims.spatial();
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let bv = self.value(bias).data();
        let mut out = vec![0.0; dims.batch * out_channels * s];
        for b in 0..dims.batch {
            for o in 0..out_channels {
                let dst = &mut out[(b * out_channels + o) * s..][..s];
                dst.fill(bv[o]);
                for i in 0..in_channels {
                    let w = k[o * in_channels + i];
                    let src = &x[(b * in_channels + i) * s..][..s];
                    dst.iter_mut().zip(src).for_each(|(d, &v)| *d += w * v);
                }
            }
        }
        let value = Tensor::from_parts(map_shape(dims, out_channels, batched), out);
        self.push(OP, value, Op::ConvPointwise { input, kernel, bias, dims, out_channels }, &[
            input, kernel, bias,
        ])
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn conv_pointwise_backward(
        &self,
        g: &[f64],
        input: Var,
        kernel: Var,
        bias: Var,
        dims: MapDims,
        out_channels: usize,
        grads: &mut [Option<Vec<f64>>],
    ) {
        let s = dims.spatial();
        let cin = dims.channels;
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        if let Some(dx) = self.slot(grads, input) {
            for b in 0..dims.batch {
                for o in 0..out_channels {
                    let go = &g[(b * out_channels + o) * s..][..s];
                    for i in 0..cin {
                        let w = k[o * cin + i];
                        let dst = &mut dx[(b * cin + i) * s..][..s];
                        dst.iter_mut().zip(go).for_each(|(d, &gv)| *d += w * gv);
                    }
                }
            }
        }
        if let Some(dk) = self.slot(grads, kernel) {
            for b in 0..dims.batch {
                for o in 0..out_channels {
                    let go = &g[(b * out_channels + o) * s..][..s];
                    for i in 0..cin {
                        let src = &x[(b * cin + i) * s..][..s];
                        dk[o * cin + i] += go.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
        }
        if let Some(db) = self.slot(grads, bias) {
            for b in 0..dims.batch {
                for o in 0..out_channels {
                    db[o] += g[(b * out_channels + o) * s..][..s].iter().sum::<f64>();
                }
            }
        }
    }

    /// Zero-padded `size x size` cross-correlation from `C` channels to one,
    /// preserving the spatial size. `kernel` is `1 x C x size x size`.
    pub fn conv2d_same(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var, NumericsError> {
        const OP: &str = "conv2d_same";
        let (dims, batched) = map_dims(OP, self.shape(input))?;
        let kshape = self.shape(kernel).to_vec();
        let [1, kc, kh, kw] = kshape[..] else {
            return Err(NumericsError::Rank { op: OP, expected: "4 (1 x C x a x a)", shape: kshape });
        };
        if kh != kw {
            return Err(NumericsError::Config(format!("{OP}: kernel must be square, got {kh}x{kw}")));
        }
        if kh % 2 == 0 {
            return Err(NumericsError::Config(format!(
                "{OP}: filter size must be odd for same padding, got {kh}"
            )));
        }
        if kc != dims.channels {
            return Err(NumericsError::Dimension {
                op: OP,
                axis: "input channel",
                expected: kc,
                found: dims.channels,
            });
        }
        if self.value(bias).len() != 1 {
            return Err(NumericsError::Dimension {
                op: OP,
                axis: "bias",
                expected: 1,
                found: self.value(bias).len(),
            });
        }
        let size = kh;
        let pad = (size / 2) as isize;
        let (h, w) = (dims.height as isize, dims.width as isize);
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let b0 = self.value(bias).data()[0];
        let s = dims.spatial();
        let mut out = vec![b0; dims.batch * s];
        for b in 0..dims.batch {
            let dst = &mut out[b * s..][..s];
            for c in 0..dims.channels {
                let src = &x[(b * dims.channels + c) * s..][..s];
                for ky in 0..size {
                    for kx in 0..size {
                        let wv = k[(c * size + ky) * size + kx];
                        let (dy, dx) = (ky as isize - pad, kx as isize - pad);
                        for y in 0..h {
                            let sy = y + dy;
                            if sy < 0 || sy >= h {
                                continue;
                            }
                            for xx in 0..w {
                                let sx = xx + dx;
                                if sx < 0 || sx >= w {
                                    continue;
                                }
                                dst[(y * w + xx) as usize] += wv * src[(sy * w + sx) as usize];
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::from_parts(map_shape(dims, 1, batched), out);
        self.push(OP, value, Op::Conv2dSame { input, kernel, bias, dims, size }, &[input, kernel, bias])
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn conv2d_same_backward(
        &self,
        g: &[f64],
        input: Var,
        kernel: Var,
        bias: Var,
        dims: MapDims,
        size: usize,
        grads: &mut [Option<Vec<f64>>],
    ) {
        let pad = (size / 2) as isize;
        let (h, w) = (dims.height as isize, dims.width as isize);
        let s = dims.spatial();
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        // Visits every (output, kernel tap, source) triple inside the image.
        let each = |f: &mut dyn FnMut(usize, usize, usize, usize)| {
            for b in 0..dims.batch {
                for c in 0..dims.channels {
                    for ky in 0..size {
                        for kx in 0..size {
                            let (dy, dx) = (ky as isize - pad, kx as isize - pad);
                            for y in 0..h {
                                let sy = y + dy;
                                if sy < 0 || sy >= h {
                                    continue;
                                }
                                for xx in 0..w {
                                    let sx = xx + dx;
                                    if sx < 0 || sx >= w {
                                        continue;
                                    }
                                    f(
                                        b * s + (y * w + xx) as usize,
                                        (c * size + ky) * size + kx,
                                        (b * dims.channels + c) * s + (sy * w + sx) as usize,
                                        c,
                                    );
                                }
                            }
                        }
                    }
                }
            }
        };
        if let Some(dx) = self.slot(grads, input) {
            each(&mut |o, ki, si, _| dx[si] += g[o] * k[ki]);
        }
        if let Some(dk) = self.slot(grads, kernel) {
            each(&mut |o, ki, si, _| dk[ki] += g[o] * x[si]);
        }
        if let Some(db) = self.slot(grads, bias) {
            db[0] += g.iter().sum::<f64>();
        }
    }

    /// Batch normalization of a `B x D` batch or, per channel, of a
    /// `B x C x H x W` map (statistics pooled over batch and spatial axes).
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        epsilon: f64,
        mode: BnMode<'_>,
    ) -> Result<Var, NumericsError> {
        const OP: &str = "batch_norm";
        let shape = self.shape(input).to_vec();
        let (batch, channels, spatial) = match shape[..] {
            [b, d] => (b, d, 1),
            [b, c, h, w] => (b, c, h * w),
            _ => return Err(NumericsError::Rank { op: OP, expected: "2 or 4", shape }),
        };
        if batch == 0 {
            return Err(NumericsError::Contract(format!("{OP}: empty batch")));
        }
        for (var, axis) in [(gamma, "gamma"), (beta, "beta")] {
            if self.value(var).len() != channels {
                return Err(NumericsError::Dimension {
                    op: OP,
                    axis,
                    expected: channels,
                    found: self.value(var).len(),
                });
            }
        }
        let x = self.value(input).data();
        let n = (batch * spatial) as f64;
        let channel_iter = |c: usize| {
            (0..batch).flat_map(move |b| {
                let start = (b * channels + c) * spatial;
                start..start + spatial
            })
        };
        let train = matches!(mode, BnMode::Train(_));
        let (mean, var) = match mode {
            BnMode::Train(running) => {
                let mean: Vec<f64> =
                    (0..channels).map(|c| channel_iter(c).map(|i| x[i]).sum::<f64>() / n).collect();
                let var: Vec<f64> = (0..channels)
                    .map(|c| channel_iter(c).map(|i| (x[i] - mean[c]).powi(2)).sum::<f64>() / n)
                    .collect();
                running.update(&mean, &var);
                (mean, var)
            }
            BnMode::Infer(running) => {
                if !running.initialized {
                    return Err(NumericsError::UninitializedState);
                }
                if running.mean.len() != channels {
                    return Err(NumericsError::Dimension {
                        op: OP,
                        axis: "running moments",
                        expected: channels,
                        found: running.mean.len(),
                    });
                }
                (running.mean.clone(), running.var.clone())
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for c in 0..channels {
            for i in channel_iter(c) {
                xhat[i] = (x[i] - mean[c]) * inv_std[c];
                out[i] = xhat[i] * gv[c] + bv[c];
            }
        }
        let value = Tensor::from_parts(shape, out);
        self.push(
            OP,
            value,
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, channels, spatial, train },
            &[input, gamma, beta],
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn batch_norm_backward(
        &self,
        g: &[f64],
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: &[f64],
        inv_std: &[f64],
        channels: usize,
        spatial: usize,
        train: bool,
        grads: &mut [Option<Vec<f64>>],
    ) {
        let batch = g.len() / (channels * spatial);
        let n = (batch * spatial) as f64;
        let idx = |c: usize| {
            (0..batch).flat_map(move |b| {
                let start = (b * channels + c) * spatial;
                start..start + spatial
            })
        };
        let gv = self.value(gamma).data().to_vec();
        let sum_g: Vec<f64> = (0..channels).map(|c| idx(c).map(|i| g[i]).sum()).collect();
        let sum_gx: Vec<f64> = (0..channels).map(|c| idx(c).map(|i| g[i] * xhat[i]).sum()).collect();
        if let Some(dg) = self.slot(grads, gamma) {
            dg.iter_mut().zip(&sum_gx).for_each(|(d, s)| *d += s);
        }
        if let Some(db) = self.slot(grads, beta) {
            db.iter_mut().zip(&sum_g).for_each(|(d, s)| *d += s);
        }
        if let Some(dx) = self.slot(grads, input) {
            for c in 0..channels {
                let scale = gv[c] * inv_std[c];
                if train {
                    let (mg, mgx) = (sum_g[c] / n, sum_gx[c] / n);
                    for i in idx(c) {
                        dx[i] += scale * (g[i] - mg - xhat[i] * mgx);
                    }
                } else {
                    for i in idx(c) {
                        dx[i] += scale * g[i];
                    }
                }
            }
        }
    }

    pub fn relu(&mut self, input: Var) -> Result<Var, NumericsError> {
        let value = self.value(input).map(|v| v.max(0.0));
        self.push("relu", value, Op::Relu(input), &[input])
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var, NumericsError> {
        let value = self.value(input).map(|v| factor * v);
        self.push("scale", value, Op::Scale(input, factor), &[input])
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var, NumericsError> {
        let value = self.value(input).map(sigmoid_scalar);
        self.push("sigmoid", value, Op::Sigmoid(input), &[input])
    }

    /// Per-channel reduction over all spatial positions, giving `C x 1 x 1`.
    /// Max-pool gradients go to the first row-major argmax.
    pub fn pool_spatial(&mut self, input: Var, mode: PoolMode) -> Result<Var, NumericsError> {
        const OP: &str = "pool_spatial";
        let (dims, batched) = map_dims(OP, self.shape(input))?;
        let s = dims.spatial();
        if s == 0 {
            return Err(NumericsError::Contract(format!("{OP}: empty spatial extent")));
        }
        let x = self.value(input).data();
        let rows = dims.batch * dims.channels;
        let (out, argmax) = match mode {
            PoolMode::Avg => {
                ((0..rows).map(|r| x[r * s..][..s].iter().sum::<f64>() / s as f64).collect(), None)
            }
            PoolMode::Max => {
                let mut out = Vec::with_capacity(rows);
                let mut arg = Vec::with_capacity(rows);
                for r in 0..rows {
                    let (i, v) = first_argmax(&x[r * s..][..s]);
                    out.push(v);
                    arg.push(r * s + i);
                }
                (out, Some(arg))
            }
        };
        let shape = if batched {
            vec![dims.batch, dims.channels, 1, 1]
        } else {
            vec![dims.channels, 1, 1]
        };
        self.push(OP, Tensor::from_parts(shape, out), Op::PoolSpatial { input, dims, argmax }, &[input])
    }

    pub(crate) fn pool_spatial_backward(
        &self,
        g: &[f64],
        input: Var,
        dims: MapDims,
        argmax: Option<&[usize]>,
        grads: &mut [Option<Vec<f64>>],
    ) {
        let s = dims.spatial();
        if let Some(dx) = self.slot(grads, input) {
            match argmax {
                None => {
                    for (r, &gr) in g.iter().enumerate() {
                        dx[r * s..][..s].iter_mut().for_each(|d| *d += gr / s as f64);
                    }
                }
                Some(arg) => {
                    for (&i, &gr) in arg.iter().zip(g) {
                        dx[i] += gr;
                    }
                }
            }
        }
    }

    /// Per-position reduction over channels, giving `1 x H x W`.
    pub fn pool_channel(&mut self, input: Var, mode: PoolMode) -> Result<Var, NumericsError> {
        const OP: &str = "pool_channel";
        let (dims, batched) = map_dims(OP, self.shape(input))?;
        if dims.channels == 0 {
            return Err(NumericsError::Contract(format!("{OP}: zero channels")));
        }
        let s = dims.spatial();
        let c = dims.channels;
        let x = self.value(input).data();
        let mut out = vec![0.0; dims.batch * s];
        let mut argmax = matches!(mode, PoolMode::Max).then(|| vec![0usize; dims.batch * s]);
        for b in 0..dims.batch {
            for p in 0..s {
                let at = |ch: usize| (b * c + ch) * s + p;
                match mode {
                    PoolMode::Avg => {
                        out[b * s + p] = (0..c).map(|ch| x[at(ch)]).sum::<f64>() / c as f64;
                    }
                    PoolMode::Max => {
                        let mut best = at(0);
                        for ch in 1..c {
                            if x[at(ch)] > x[best] {
                                best = at(ch);
                            }
                        }
                        out[b * s + p] = x[best];
                        if let Some(a) = argmax.as_mut() {
                            a[b * s + p] = best;
                        }
                    }
                }
            }
        }
        let value = Tensor::from_parts(map_shape(dims, 1, batched), out);
        self.push(OP, value, Op::PoolChannel { input, dims, argmax }, &[input])
    }

    pub(crate) fn pool_channel_backward(
        &self,
        g: &[f64],
        input: Var,
        dims: MapDims,
        argmax: Option<&[usize]>,
        grads: &mut [Option<Vec<f64>>],
    ) {
        let s = dims.spatial();
        let c = dims.channels;
        if let Some(dx) = self.slot(grads, input) {
            match argmax {
                None => {
                    for b in 0..dims.batch {
                        for p in 0..s {
                            let gv = g[b * s + p] / c as f64;
                            for ch in 0..c {
                                dx[(b * c + ch) * s + p] += gv;
                            }
                        }
                    }
                }
                Some(arg) => {
                    for (&i, &gv) in arg.iter().zip(g) {
                        dx[i] += gv;
                    }
                }
            }
        }
    }

    /// Concatenates feature maps along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        const OP: &str = "concat_channels";
        let Some(&first) = parts.first() else {
            return Err(NumericsError::Contract(format!("{OP}: nothing to concatenate")));
        };
        let (d0, batched) = map_dims(OP, self.shape(first))?;
        let mut total = 0;
        let mut recorded = Vec::with_capacity(parts.len());
        for &p in parts {
            let (d, b) = map_dims(OP, self.shape(p))?;
            if b != batched || d.batch != d0.batch || d.height != d0.height || d.width != d0.width {
                return Err(NumericsError::ShapeMismatch {
                    op: OP,
                    left: self.shape(first).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            total += d.channels;
            recorded.push((p, d.channels));
        }
        let s = d0.spatial();
        let mut out = Vec::with_capacity(d0.batch * total * s);
        for b in 0..d0.batch {
            for &(p, c) in &recorded {
                out.extend_from_slice(&self.value(p).data()[b * c * s..][..c * s]);
            }
        }
        let value = Tensor::from_parts(map_shape(d0, total, batched), out);
        self.push(OP, value, Op::ConcatChannels { parts: recorded, batch: d0.batch, spatial: s }, parts)
    }

    pub(crate) fn concat_backward(
        &self,
        g: &[f64],
        parts: &[(Var, usize)],
        batch: usize,
        spatial: usize,
        grads: &mut [Option<Vec<f64>>],
    ) {
        let total: usize = parts.iter().map(|p| p.1).sum();
        let mut offset = 0;
        for &(p, c) in parts {
            if let Some(dx) = self.slot(grads, p) {
                for b in 0..batch {
                    let src = &g[(b * total + offset) * spatial..][..c * spatial];
                    let dst = &mut dx[b * c * spatial..][..c * spatial];
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
            }
            offset += c;
        }
    }

    /// Elementwise product with `gate` broadcast over its unit axes. Ranks up
    /// to four; `gate` must have the rank of `x`.
    pub fn mul_broadcast(&mut self, x: Var, gate: Var) -> Result<Var, NumericsError> {
        const OP: &str = "mul_broadcast";
        let (xs, gs) = (self.shape(x).to_vec(), self.shape(gate).to_vec());
        let mismatch = || NumericsError::ShapeMismatch { op: OP, left: xs.clone(), right: gs.clone() };
        if xs.len() != gs.len() {
            return Err(mismatch());
        }
        let (Some(xd), Some(gd)) = (pad4(&xs), pad4(&gs)) else {
            return Err(NumericsError::Rank { op: OP, expected: "<= 4", shape: xs.clone() });
        };
        if xd.iter().zip(&gd).any(|(&a, &b)| b != 1 && b != a) {
            return Err(mismatch());
        }
        let xv = self.value(x).data();
        let gv = self.value(gate).data();
        let mut out = Vec::with_capacity(xv.len());
        for_each_broadcast(xd, gd, |xi, gi| out.push(xv[xi] * gv[gi]));
        let value = Tensor::from_parts(xs.clone(), out);
        self.push(OP, value, Op::MulBroadcast { x, gate, x_dims: xd, gate_dims: gd }, &[x, gate])
    }

    pub(crate) fn mul_broadcast_backward(
        &self,
        g: &[f64],
        x: Var,
        gate: Var,
        x_dims: [usize; 4],
        gate_dims: [usize; 4],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let xv = self.value(x).data();
        let gv = self.value(gate).data();
        if let Some(dx) = self.slot(grads, x) {
            for_each_broadcast(x_dims, gate_dims, |xi, gi| dx[xi] += g[xi] * gv[gi]);
        }
        if let Some(dg) = self.slot(grads, gate) {
            for_each_broadcast(x_dims, gate_dims, |xi, gi| dg[gi] += g[xi] * xv[xi]);
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericsError::ShapeMismatch {
                op: "add",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let value = self.value(input).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(input), &[input])
    }

    /// Affine map `y = W x (+ b)` on a vector `D` or a batch `B x D`;
    /// `weight` is `D_out x D`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var, NumericsError> {
        const OP: &str = "dense";
        let xs = self.shape(input).to_vec();
        let (rows, d, batched) = match xs[..] {
            [d] => (1, d, false),
            [b, d] => (b, d, true),
            _ => return Err(NumericsError::Rank { op: OP, expected: "1 or 2", shape: xs }),
        };
        let ws = self.shape(weight).to_vec();
        let [dout, din] = ws[..] else {
            return Err(NumericsError::Rank { op: OP, expected: "2", shape: ws });
        };
        if din != d {
            return Err(NumericsError::Dimension { op: OP, axis: "input feature", expected: din, found: d });
        }
        if let Some(b) = bias {
            if self.value(b).len() != dout {
                return Err(NumericsError::Dimension {
                    op: OP,
                    axis: "bias",
                    expected: dout,
                    found: self.value(b).len(),
                });
            }
        }
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let bv = bias.map(|b| self.value(b).data());
        let mut out = vec![0.0; rows * dout];
        for r in 0..rows {
            let xr = &x[r * d..][..d];
            for o in 0..dout {
                let wr = &w[o * d..][..d];
                let mut acc = bv.map_or(0.0, |b| b[o]);
                acc += wr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
                out[r * dout + o] = acc;
            }
        }
        let shape = if batched { vec![rows, dout] } else { vec![dout] };
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        self.push(OP, Tensor::from_parts(shape, out), Op::Dense { input, weight, bias, rows }, &inputs)
    }

    pub(crate) fn dense_backward(
        &self,
        g: &[f64],
        input: Var,
        weight: Var,
        bias: Option<Var>,
        rows: usize,
        grads: &mut [Option<Vec<f64>>],
    ) {
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let dout = g.len() / rows;
        let d = x.len() / rows;
        if let Some(dx) = self.slot(grads, input) {
            for r in 0..rows {
                let dxr = &mut dx[r * d..][..d];
                for o in 0..dout {
                    let gv = g[r * dout + o];
                    if gv == 0.0 {
                        continue;
                    }
                    dxr.iter_mut().zip(&w[o * d..][..d]).for_each(|(a, &b)| *a += gv * b);
                }
            }
        }
        if let Some(dw) = self.slot(grads, weight) {
            for r in 0..rows {
                let xr = &x[r * d..][..d];
                for o in 0..dout {
                    let gv = g[r * dout + o];
                    if gv == 0.0 {
                        continue;
                    }
                    dw[o * d..][..d].iter_mut().zip(xr).for_each(|(a, &b)| *a += gv * b);
                }
            }
        }
        if let Some(b) = bias {
            if let Some(db) = self.slot(grads, b) {
                for r in 0..rows {
                    db.iter_mut().zip(&g[r * dout..][..dout]).for_each(|(a, b)| *a += b);
                }
            }
        }
    }

    /// Scales each row (or the single vector) to unit Euclidean norm. Rows
    /// with norm below `1e-12` are divided by that floor instead.
    pub fn l2_normalize(&mut self, input: Var) -> Result<Var, NumericsError> {
        const OP: &str = "l2_normalize";
        let xs = self.shape(input).to_vec();
        let (rows, d) = match xs[..] {
            [d] => (1, d),
            [b, d] => (b, d),
            _ => return Err(NumericsError::Rank { op: OP, expected: "1 or 2", shape: xs }),
        };
        let x = self.value(input).data();
        let mut norms = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(x.len());
        for r in 0..rows {
            let xr = &x[r * d..][..d];
            let n = xr.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
            norms.push(n);
            out.extend(xr.iter().map(|v| v / n));
        }
        self.push(OP, Tensor::from_parts(xs, out), Op::L2Normalize { input, rows, norms }, &[input])
    }

    pub(crate) fn l2_normalize_backward(
        &self,
        g: &[f64],
        out: &Tensor,
        input: Var,
        rows: usize,
        norms: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let d = g.len() / rows;
        let y = out.data();
        if let Some(dx) = self.slot(grads, input) {
            for r in 0..rows {
                let (yr, gr) = (&y[r * d..][..d], &g[r * d..][..d]);
                let n = norms[r];
                if n > NORM_FLOOR {
                    let proj: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for i in 0..d {
                        dx[r * d + i] += (gr[i] - yr[i] * proj) / n;
                    }
                } else {
                    for i in 0..d {
                        dx[r * d + i] += gr[i] / n;
                    }
                }
            }
        }
    }

    pub fn sum(&mut self, input: Var) -> Result<Var, NumericsError> {
        let total = self.value(input).data().iter().sum();
        self.push("sum", Tensor::scalar(total), Op::Sum(input), &[input])
    }

    /// Inner product of two equally sized tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        if self.value(a).len() != self.value(b).len() {
            return Err(NumericsError::ShapeMismatch {
                op: "dot",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let v = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).sum();
        self.push("dot", Tensor::scalar(v), Op::Dot(a, b), &[a, b])
    }
}

const NORM_FLOOR: f64 = 1e-12;

fn first_argmax(values: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    (best, values[best])
}

fn for_each_broadcast(x: [usize; 4], g: [usize; 4], mut f: impl FnMut(usize, usize)) {
    let gstride = [g[1] * g[2] * g[3], g[2] * g[3], g[3], 1];
    let pick = |axis: usize, i: usize| if g[axis] == 1 { 0 } else { i * gstride[axis] };
    let mut xi = 0;
    for a in 0..x[0] {
        let ga = pick(0, a);
        for b in 0..x[1] {
            let gb = ga + pick(1, b);
            for c in 0..x[2] {
                let gc = gb + pick(2, c);
                for d in 0..x[3] {
                    f(xi, gc + pick(3, d));
                    xi += 1;
                }
            }
        }
    }
}
