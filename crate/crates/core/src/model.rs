//! Differentiable pose regressors.
//!
//! [`PoseModel`] is the contract the augmentation pipeline needs: forward
//! predictions, the loss gradient with respect to input pixels (weights
//! frozen), and a gradient-descent step. [`PoseRegressor`] is a small
//! convolutional reference implementation with hand-written backprop.
//!
//! Images enter the network as `pixels / 255`; input gradients are reported
//! with respect to the raw `[0, 255]` pixels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{ImageDims, ImageSample, Pose, SampleTuple};
use crate::error::{Error, Result};
use crate::loss::{tuple_loss_with_grad, LossBreakdown, LossParams};

const KERNEL: usize = 3;
const STRIDE: usize = 2;
const POSE_DIM: usize = 6;

/// Derivative of a loss with respect to raw input pixels (HWC order).
#[derive(Clone, Debug, PartialEq)]
pub struct InputGradient {
    dims: ImageDims,
    grad: Vec<f64>,
}

impl InputGradient {
    pub fn new(dims: ImageDims, grad: Vec<f64>) -> Result<Self> {
        if grad.len() != dims.len() {
            return Err(Error::shape(dims.len(), grad.len()));
        }
        Ok(InputGradient { dims, grad })
    }

    pub fn dims(&self) -> ImageDims {
        self.dims
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn is_finite(&self) -> bool {
        self.grad.iter().all(|g| g.is_finite())
    }
}

/// Outcome of one optimisation step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    /// Mean tuple loss before the update.
    pub loss: f64,
    pub params: LossParams,
}

pub trait PoseModel: Send + Sync {
    fn input_dims(&self) -> ImageDims;

    /// Pose predicted for a single image.
    fn predict(&self, sample: &ImageSample) -> Result<Pose>;

    /// One pose per sample of the tuple.
    fn forward(&self, tuple: &SampleTuple) -> Result<Vec<Pose>> {
        tuple.samples().iter().map(|s| self.predict(s)).collect()
    }

    /// Loss gradient with respect to every input image of the tuple, with the
    /// weights held fixed. Ground truth is taken from the samples' poses.
    fn input_gradient(
        &self,
        tuple: &SampleTuple,
        params: &LossParams,
    ) -> Result<(LossBreakdown, Vec<InputGradient>)>;

    /// One gradient-descent step on the mean tuple loss of `tuples`, updating
    /// the weights and the loss weighting parameters.
    fn train_step(&mut self, tuples: &[SampleTuple], params: &LossParams, lr: f64) -> Result<StepOutcome>;

    /// Digest of the trainable weights.
    fn checksum(&self) -> String;
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// How the last feature map is reduced before the dense layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Mean over each channel's plane.
    GlobalAverage,
    /// Every activation, in CHW order.
    #[default]
    Flatten,
}

/// Layer sizes of the reference regressor: strided 3×3 convolutions, a
/// pooling stage (flatten by default), one hidden dense layer and a 6-unit
/// pose head.
///
/// The head output is mapped to a pose as `offset + scale * head`, a fixed
/// standardisation of the regression targets that keeps plain SGD usable when
/// translations span tens of metres.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchDescriptor {
    pub input: ImageDims,
    pub conv_channels: Vec<usize>,
    pub hidden: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub pooling: Pooling,
    #[serde(default)]
    pub output_offset: [f64; POSE_DIM],
    #[serde(default = "unit_scale")]
    pub output_scale: [f64; POSE_DIM],
}

fn unit_scale() -> [f64; POSE_DIM] {
    [1.0; POSE_DIM]
}

impl Default for ArchDescriptor {
    fn default() -> Self {
        ArchDescriptor {
            input: ImageDims::DEFAULT,
            conv_channels: vec![8, 16, 32],
            hidden: 64,
            activation: Activation::Tanh,
            pooling: Pooling::Flatten,
            output_offset: [0.0; POSE_DIM],
            output_scale: unit_scale(),
        }
    }
}

impl ArchDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.input.is_empty() || self.hidden == 0 || self.conv_channels.is_empty() {
            return Err(Error::invalid(format!("degenerate architecture {self:?}")));
        }
        if self.conv_channels.contains(&0) {
            return Err(Error::invalid("convolution with zero channels"));
        }
        if !self.output_offset.iter().all(|v| v.is_finite())
            || !self.output_scale.iter().all(|v| v.is_finite() && *v > 0.0)
        {
            return Err(Error::invalid("output offset must be finite and output scale positive"));
        }
        Ok(())
    }

    fn layout(&self) -> Layout {
        let mut offset = 0;
        let mut convs = Vec::new();
        let (mut c, mut h, mut w) = (self.input.channels, self.input.height, self.input.width);
        for &out in &self.conv_channels {
            let oh = (h - 1) / STRIDE + 1;
            let ow = (w - 1) / STRIDE + 1;
            let weights = offset;
            offset += out * c * KERNEL * KERNEL;
            let bias = offset;
            offset += out;
            convs.push(ConvGeom {
                in_c: c,
                in_h: h,
                in_w: w,
                out_c: out,
                out_h: oh,
                out_w: ow,
                weights,
                bias,
            });
            c = out;
            h = oh;
            w = ow;
        }
        let pooled = match self.pooling {
            Pooling::GlobalAverage => c,
            Pooling::Flatten => c * h * w,
        };
        let dense_w = offset;
        offset += self.hidden * pooled;
        let dense_b = offset;
        offset += self.hidden;
        let head_w = offset;
        offset += POSE_DIM * self.hidden;
        let head_b = offset;
        offset += POSE_DIM;
        Layout {
            convs,
            pooled,
            hidden: self.hidden,
            dense_w,
            dense_b,
            head_w,
            head_b,
            total: offset,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ConvGeom {
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    out_h: usize,
    out_w: usize,
    weights: usize,
    bias: usize,
}

impl ConvGeom {
    fn fan_in(&self) -> usize {
        self.in_c * KERNEL * KERNEL
    }

    fn out_len(&self) -> usize {
        self.out_c * self.out_h * self.out_w
    }

    fn patch_len(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Unrolls the input into rows of `out_h * out_w` samples, one row per
    /// (input channel, ky, kx) in weight order. Padding reads as zero.
    fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let (ih, iw, oh, ow) = (self.in_h, self.in_w, self.out_h, self.out_w);
        let p = self.patch_len();
        let mut cols = vec![0.0; self.fan_in() * p];
        for i in 0..self.in_c {
            let src = &input[i * ih * iw..(i + 1) * ih * iw];
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    let row = &mut cols[((i * KERNEL + ky) * KERNEL + kx) * p..][..p];
                    for oy in 0..oh {
                        let Some(iy) = (oy * STRIDE + ky).checked_sub(1).filter(|&y| y < ih) else {
                            continue;
                        };
                        for ox in 0..ow {
                            if let Some(ix) = (ox * STRIDE + kx).checked_sub(1).filter(|&x| x < iw) {
                                row[oy * ow + ox] = src[iy * iw + ix];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adds the unrolled gradient rows back onto the input positions they were read from.
    fn col2im(&self, dcols: &[f64], d_in: &mut [f64]) {
        let (ih, iw, oh, ow) = (self.in_h, self.in_w, self.out_h, self.out_w);
        let p = self.patch_len();
        d_in.fill(0.0);
        for i in 0..self.in_c {
            let dst = &mut d_in[i * ih * iw..(i + 1) * ih * iw];
            for ky in 0..KERNEL {
                for kx in 0..KERNEL {
                    let row = &dcols[((i * KERNEL + ky) * KERNEL + kx) * p..][..p];
                    for oy in 0..oh {
                        let Some(iy) = (oy * STRIDE + ky).checked_sub(1).filter(|&y| y < ih) else {
                            continue;
                        };
                        for ox in 0..ow {
                            if let Some(ix) = (ox * STRIDE + kx).checked_sub(1).filter(|&x| x < iw) {
                                dst[iy * iw + ix] += row[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    fn forward(&self, params: &[f64], input: &[f64], out: &mut [f64]) {
        let p = self.patch_len();
        let k_len = self.fan_in();
        let cols = self.im2col(input);
        for o in 0..self.out_c {
            let plane = &mut out[o * p..(o + 1) * p];
            plane.fill(params[self.bias + o]);
            let weights = &params[self.weights + o * k_len..][..k_len];
            for (wv, col) in weights.iter().zip(cols.chunks_exact(p)) {
                for (d, c) in plane.iter_mut().zip(col) {
                    *d += wv * c;
                }
            }
        }
    }

    /// Backpropagates `d_out` (w.r.t. the pre-activation output). Adds into
    /// `d_params` and writes the input gradient into `d_in`, each when given.
    fn backward(
        &self,
        params: &[f64],
        input: &[f64],
        d_out: &[f64],
        mut d_params: Option<&mut [f64]>,
        d_in: Option<&mut [f64]>,
    ) {
        let p = self.patch_len();
        let k_len = self.fan_in();
        let cols = self.im2col(input);
        let mut dcols = d_in.is_some().then(|| vec![0.0; k_len * p]);
        for o in 0..self.out_c {
            let g = &d_out[o * p..(o + 1) * p];
            if let Some(dp) = d_params.as_deref_mut() {
                dp[self.bias + o] += g.iter().sum::<f64>();
                let dw = &mut dp[self.weights + o * k_len..][..k_len];
                for (d, col) in dw.iter_mut().zip(cols.chunks_exact(p)) {
                    *d += g.iter().zip(col).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            if let Some(dc) = dcols.as_deref_mut() {
                let weights = &params[self.weights + o * k_len..][..k_len];
                for (wv, drow) in weights.iter().zip(dc.chunks_exact_mut(p)) {
                    for (d, gv) in drow.iter_mut().zip(g) {
                        *d += wv * gv;
                    }
                }
            }
        }
        if let (Some(dc), Some(d_in)) = (dcols, d_in) {
            self.col2im(&dc, d_in);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    convs: Vec<ConvGeom>,
    pooled: usize,
    hidden: usize,
    dense_w: usize,
    dense_b: usize,
    head_w: usize,
    head_b: usize,
    total: usize,
}

/// Activations kept for the backward pass.
struct Trace {
    /// Network input followed by each convolution's activated output (CHW).
    maps: Vec<Vec<f64>>,
    pooled: Vec<f64>,
    hidden: Vec<f64>,
    output: [f64; POSE_DIM],
}

/// Small convolutional pose regressor.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseRegressor {
    arch: ArchDescriptor,
    layout: Layout,
    params: Vec<f64>,
}

impl PoseRegressor {
    /// Seeded LeCun-uniform weights (variance `1 / fan_in`), zero biases.
    pub fn new(arch: ArchDescriptor, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize, params: &mut [f64]| {
            let bound = (3.0 / fan_in as f64).sqrt();
            for p in &mut params[range] {
                *p = rng.gen_range(-bound..bound);
            }
        };
        for conv in &layout.convs {
            fill(conv.weights..conv.bias, conv.fan_in(), &mut params);
        }
        fill(layout.dense_w..layout.dense_b, layout.pooled, &mut params);
        fill(layout.head_w..layout.head_b, layout.hidden, &mut params);
        Ok(PoseRegressor {
            arch,
            layout,
            params,
        })
    }

    pub fn from_params(arch: ArchDescriptor, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        if params.len() != layout.total {
            return Err(Error::shape(format!("{} parameters", layout.total), params.len()));
        }
        Ok(PoseRegressor {
            arch,
            layout,
            params,
        })
    }

    pub fn arch(&self) -> &ArchDescriptor {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Final-layer weights and bias, `[6 × hidden]` then `[6]`.
    pub fn head_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        let (w, b) = self.params[self.layout.head_w..].split_at_mut(self.layout.head_b - self.layout.head_w);
        (w, b)
    }

    /// Replaces the output affine. An all-zero head then predicts `offset`.
    pub fn set_output_affine(&mut self, offset: [f64; POSE_DIM], scale: [f64; POSE_DIM]) -> Result<()> {
        let arch = ArchDescriptor {
            output_offset: offset,
            output_scale: scale,
            ..self.arch.clone()
        };
        arch.validate()?;
        self.arch = arch;
        self.head_mut().1.fill(0.0);
        Ok(())
    }

    fn check_dims(&self, dims: ImageDims) -> Result<()> {
        if dims != self.arch.input {
            return Err(Error::shape(self.arch.input, dims));
        }
        Ok(())
    }

    fn trace(&self, sample: &ImageSample) -> Trace {
        let dims = self.arch.input;
        let (h, w, c) = (dims.height, dims.width, dims.channels);
        let act = self.arch.activation;
        let px = sample.pixels.data();
        let mut input = vec![0.0; dims.len()];
        for row in 0..h {
            for col in 0..w {
                for ch in 0..c {
                    input[(ch * h + row) * w + col] = px[dims.index(row, col, ch)] / 255.0;
                }
            }
        }
        let mut maps = vec![input];
        for conv in &self.layout.convs {
            let mut out = vec![0.0; conv.out_len()];
            conv.forward(&self.params, maps.last().expect("input map"), &mut out);
            for v in &mut out {
                *v = act.apply(*v);
            }
            maps.push(out);
        }
        let last = maps.last().expect("conv output");
        let area = (last.len() / self.layout.pooled) as f64;
        let pooled: Vec<f64> = last
            .chunks(last.len() / self.layout.pooled)
            .map(|plane| plane.iter().sum::<f64>() / area)
            .collect();
        let hidden: Vec<f64> = (0..self.layout.hidden)
            .map(|k| {
                let row = &self.params[self.layout.dense_w + k * self.layout.pooled..][..self.layout.pooled];
                let z = self.params[self.layout.dense_b + k]
                    + row.iter().zip(&pooled).map(|(a, b)| a * b).sum::<f64>();
                act.apply(z)
            })
            .collect();
        let mut output = [0.0; POSE_DIM];
        for (k, o) in output.iter_mut().enumerate() {
            let row = &self.params[self.layout.head_w + k * self.layout.hidden..][..self.layout.hidden];
            let z = self.params[self.layout.head_b + k] + row.iter().zip(&hidden).map(|(a, b)| a * b).sum::<f64>();
            *o = self.arch.output_offset[k] + self.arch.output_scale[k] * z;
        }
        Trace {
            maps,
            pooled,
            hidden,
            output,
        }
    }

    /// Backward pass from `d_output`. Returns the parameter gradient and the
    /// gradient w.r.t. raw HWC pixels, each only when requested.
    fn backward(
        &self,
        trace: &Trace,
        d_output: &[f64; POSE_DIM],
        want_params: bool,
        want_input: bool,
    ) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
        let l = &self.layout;
        let act = self.arch.activation;
        let mut d_params = want_params.then(|| vec![0.0; l.total]);

        let mut d_hidden = vec![0.0; l.hidden];
        for (k, &g) in d_output.iter().enumerate() {
            let g = g * self.arch.output_scale[k];
            let w_row = &self.params[l.head_w + k * l.hidden..][..l.hidden];
            if let Some(dp) = d_params.as_deref_mut() {
                dp[l.head_b + k] += g;
                for (d, h) in dp[l.head_w + k * l.hidden..][..l.hidden].iter_mut().zip(&trace.hidden) {
                    *d += g * h;
                }
            }
            for (d, wv) in d_hidden.iter_mut().zip(w_row) {
                *d += g * wv;
            }
        }
        let mut d_pooled = vec![0.0; l.pooled];
        for j in 0..l.hidden {
            let dz = d_hidden[j] * act.derivative_from_output(trace.hidden[j]);
            if dz == 0.0 {
                continue;
            }
            let w_row = &self.params[l.dense_w + j * l.pooled..][..l.pooled];
            if let Some(dp) = d_params.as_deref_mut() {
                dp[l.dense_b + j] += dz;
                for (d, x) in dp[l.dense_w + j * l.pooled..][..l.pooled].iter_mut().zip(&trace.pooled) {
                    *d += dz * x;
                }
            }
            for (d, wv) in d_pooled.iter_mut().zip(w_row) {
                *d += dz * wv;
            }
        }

        let last = trace.maps.last().expect("conv output");
        let plane = last.len() / l.pooled;
        let mut d_map: Vec<f64> = (0..last.len())
            .map(|i| d_pooled[i / plane] / plane as f64)
            .collect();
        for (li, conv) in l.convs.iter().enumerate().rev() {
            let out = &trace.maps[li + 1];
            for (d, &a) in d_map.iter_mut().zip(out) {
                *d *= act.derivative_from_output(a);
            }
            if li == 0 && !want_input {
                conv.backward(&self.params, &trace.maps[li], &d_map, d_params.as_deref_mut(), None);
                return (d_params, None);
            }
            let mut d_in = vec![0.0; trace.maps[li].len()];
            conv.backward(&self.params, &trace.maps[li], &d_map, d_params.as_deref_mut(), Some(&mut d_in));
            d_map = d_in;
        }

        let dims = self.arch.input;
        let (h, w, c) = (dims.height, dims.width, dims.channels);
        let mut d_raw = vec![0.0; dims.len()];
        for ch in 0..c {
            for row in 0..h {
                for col in 0..w {
                    d_raw[dims.index(row, col, ch)] = d_map[(ch * h + row) * w + col] / 255.0;
                }
            }
        }
        (d_params, Some(d_raw))
    }

    fn forward_tuple(&self, tuple: &SampleTuple) -> Result<Vec<Trace>> {
        self.check_dims(tuple.dims())?;
        Ok(tuple.samples().par_iter().map(|s| self.trace(s)).collect())
    }

    /// Mean tuple loss over a batch and its parameter gradient.
    fn batch_gradient(&self, tuples: &[SampleTuple], params: &LossParams) -> Result<(f64, Vec<f64>, f64, f64)> {
        if tuples.is_empty() {
            return Err(Error::invalid("empty training batch"));
        }
        for t in tuples {
            self.check_dims(t.dims())?;
        }
        let per_tuple: Vec<Result<(f64, Vec<f64>, f64, f64)>> = tuples
            .par_iter()
            .map(|tuple| {
                let traces: Vec<Trace> = tuple.samples().iter().map(|s| self.trace(s)).collect();
                let predicted: Vec<Pose> = traces.iter().map(|t| Pose::from_array(t.output)).collect();
                let (loss, grad) = tuple_loss_with_grad(&predicted, &tuple.poses(), params)?;
                let mut acc = vec![0.0; self.layout.total];
                for (trace, d_out) in traces.iter().zip(&grad.poses) {
                    let (dp, _) = self.backward(trace, d_out, true, false);
                    for (a, g) in acc.iter_mut().zip(dp.expect("param grad")) {
                        *a += g;
                    }
                }
                Ok((loss.total, acc, grad.beta, grad.gamma))
            })
            .collect();
        let n = tuples.len() as f64;
        let mut total = 0.0;
        let mut grad = vec![0.0; self.layout.total];
        let (mut d_beta, mut d_gamma) = (0.0, 0.0);
        // sequential reduction keeps results independent of thread scheduling
        for r in per_tuple {
            let (loss, g, db, dg) = r?;
            total += loss;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
            d_beta += db;
            d_gamma += dg;
        }
        for g in &mut grad {
            *g /= n;
        }
        Ok((total / n, grad, d_beta / n, d_gamma / n))
    }
}

impl PoseModel for PoseRegressor {
    fn input_dims(&self) -> ImageDims {
        self.arch.input
    }

    fn predict(&self, sample: &ImageSample) -> Result<Pose> {
        self.check_dims(sample.dims())?;
        Ok(Pose::from_array(self.trace(sample).output))
    }

    fn forward(&self, tuple: &SampleTuple) -> Result<Vec<Pose>> {
        Ok(self
            .forward_tuple(tuple)?
            .into_iter()
            .map(|t| Pose::from_array(t.output))
            .collect())
    }

    fn input_gradient(&self, tuple: &SampleTuple, params: &LossParams) -> Result<(LossBreakdown, Vec<InputGradient>)> {
        let traces = self.forward_tuple(tuple)?;
        let predicted: Vec<Pose> = traces.iter().map(|t| Pose::from_array(t.output)).collect();
        let (loss, grad) = tuple_loss_with_grad(&predicted, &tuple.poses(), params)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFinite(format!("loss {} during input gradient", loss.total)));
        }
        let dims = self.arch.input;
        let grads = traces
            .par_iter()
            .zip(grad.poses.par_iter())
            .map(|(trace, d_out)| {
                let (_, d_raw) = self.backward(trace, d_out, false, true);
                InputGradient {
                    dims,
                    grad: d_raw.expect("input gradient"),
                }
            })
            .collect();
        Ok((loss, grads))
    }

    fn train_step(&mut self, tuples: &[SampleTuple], params: &LossParams, lr: f64) -> Result<StepOutcome> {
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::invalid(format!("learning rate must be finite and >= 0, got {lr}")));
        }
        let (loss, grad, d_beta, d_gamma) = self.batch_gradient(tuples, params)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss {loss} (beta {}, gamma {})",
                params.beta, params.gamma
            )));
        }
        let mut next = *params;
        if lr > 0.0 {
            for (p, g) in self.params.iter_mut().zip(&grad) {
                *p -= lr * g;
            }
            next.beta -= lr * d_beta;
            next.gamma -= lr * d_gamma;
        }
        Ok(StepOutcome { loss, params: next })
    }

    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.to_le_bytes());
        }
        hex::encode(&h.finalize()[..16])
    }
}
