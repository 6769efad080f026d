//! Numeric kernels for every layer type the model zoo needs.
//!
//! All kernels are pure functions over immutable inputs and are
//! deterministic: two runs on identical inputs produce bit-identical
//! outputs. Internal parallelism only ever partitions output elements,
//! never the accumulation inside one element.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Full parameterization of a 2-D convolution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    /// Symmetric zero padding applied to both spatial borders.
    pub pad: usize,
    pub groups: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    /// Ungrouped convolution with a square kernel.
    pub fn simple(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            pad,
            groups: 1,
            has_bias: false,
        }
    }

    /// Depthwise 3x3 convolution (groups = in = out).
    pub fn depthwise(channels: usize, stride: usize) -> Self {
        ConvSpec {
            in_channels: channels,
            out_channels: channels,
            kernel_h: 3,
            kernel_w: 3,
            stride,
            pad: 1,
            groups: channels,
            has_bias: false,
        }
    }

    pub fn with_bias(mut self) -> Self {
        self.has_bias = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0
            || self.out_channels == 0
            || self.kernel_h == 0
            || self.kernel_w == 0
            || self.stride == 0
            || self.groups == 0
        {
            return Err(Error::Shape(format!("conv spec has zero-valued field: {self:?}")));
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return Err(Error::Shape(format!(
                "conv channels ({} in, {} out) not divisible by groups {}",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        Ok(())
    }

    /// Expected weight tensor dims: (Cout, Cin/groups, Kh, Kw).
    pub fn weight_dims(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel_h,
            self.kernel_w,
        ]
    }

    /// Output spatial size; rejects zero-sized outputs.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let pad_h = h + 2 * self.pad;
        let pad_w = w + 2 * self.pad;
        if pad_h < self.kernel_h || pad_w < self.kernel_w {
            return Err(Error::Shape(format!(
                "conv kernel {}x{} exceeds padded input {}x{}",
                self.kernel_h, self.kernel_w, pad_h, pad_w
            )));
        }
        Ok((
            (pad_h - self.kernel_h) / self.stride + 1,
            (pad_w - self.kernel_w) / self.stride + 1,
        ))
    }

    /// Multiply-accumulate count for one image at the given input size.
    pub fn macs(&self, h: usize, w: usize) -> Result<u64> {
        let (oh, ow) = self.output_hw(h, w)?;
        Ok(oh as u64
            * ow as u64
            * self.out_channels as u64
            * (self.in_channels / self.groups) as u64
            * self.kernel_h as u64
            * self.kernel_w as u64)
    }

    /// Weight count (plus bias when present).
    pub fn param_count(&self) -> u64 {
        let w = self.out_channels as u64
            * (self.in_channels / self.groups) as u64
            * self.kernel_h as u64
            * self.kernel_w as u64;
        if self.has_bias {
            w + self.out_channels as u64
        } else {
            w
        }
    }
}

/// Inference-time batch-normalization parameters for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub epsilon: f32,
}

impl BnParams {
    pub fn identity(channels: usize) -> Self {
        BnParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            epsilon: 0.0,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        if self.beta.len() != c || self.running_mean.len() != c || self.running_var.len() != c {
            return Err(Error::Shape(format!(
                "batch-norm parameter lengths differ: gamma {}, beta {}, mean {}, var {}",
                c,
                self.beta.len(),
                self.running_mean.len(),
                self.running_var.len()
            )));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Shape(format!(
                "batch-norm epsilon {} must be finite and non-negative",
                self.epsilon
            )));
        }
        for (i, &v) in self.running_var.iter().enumerate() {
            if v < 0.0 {
                return Err(Error::Shape(format!(
                    "running variance [{i}] = {v} is negative"
                )));
            }
            if v + self.epsilon <= 0.0 {
                return Err(Error::Shape(format!(
                    "variance[{i}] + epsilon is not positive; normalization would divide by zero"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    Avg,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub mode: PoolMode,
    pub kernel: usize,
    pub stride: usize,
    pub ceil_mode: bool,
}

impl PoolSpec {
    pub fn output_len(&self, input: usize) -> Result<usize> {
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::Shape("pool kernel/stride must be positive".into()));
        }
        if self.kernel > input {
            return Err(Error::Shape(format!(
                "pool kernel {} exceeds input extent {}",
                self.kernel, input
            )));
        }
        let span = input - self.kernel;
        let mut out = if self.ceil_mode {
            span.div_ceil(self.stride) + 1
        } else {
            span / self.stride + 1
        };
        // A ceil-mode window must still start inside the input.
        if (out - 1) * self.stride >= input {
            out -= 1;
        }
        if out == 0 {
            return Err(Error::Shape("pool produces empty output".into()));
        }
        Ok(out)
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((self.output_len(h)?, self.output_len(w)?))
    }
}

/// Dot product with a fixed 8-lane accumulation pattern. Deterministic:
/// identical inputs always produce bit-identical results.
#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (pa, pb) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            acc[l] += pa[l] * pb[l];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    (((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]))) + tail
}

/// 2-D cross-correlation (no kernel flip) with symmetric zero padding.
///
/// `weights` dims must be (Cout, Cin/groups, Kh, Kw). The fast path lowers
/// each group to an im2col patch matrix; patch columns are ordered
/// channel-major, then kernel row, then kernel column, matching the naive
/// accumulation order.
pub fn conv2d(
    input: &Tensor,
    weights: &Tensor,
    bias: Option<&[f32]>,
    spec: &ConvSpec,
) -> Result<Tensor> {
    spec.validate()?;
    let [n, c_in, h, w] = input.dims();
    if c_in != spec.in_channels {
        return Err(Error::Shape(format!(
            "conv expects {} input channels, tensor has {}",
            spec.in_channels, c_in
        )));
    }
    if weights.dims() != spec.weight_dims() {
        return Err(Error::Shape(format!(
            "conv weight dims {:?} do not match spec {:?}",
            weights.dims(),
            spec.weight_dims()
        )));
    }
    match bias {
        Some(b) if b.len() != spec.out_channels => {
            return Err(Error::Shape(format!(
                "conv bias length {} != out channels {}",
                b.len(),
                spec.out_channels
            )));
        }
        _ => {}
    }
    let (out_h, out_w) = spec.output_hw(h, w)?;

    let groups = spec.groups;
    let c_pg = spec.in_channels / groups; // input channels per group
    let o_pg = spec.out_channels / groups; // output channels per group
    let k_len = c_pg * spec.kernel_h * spec.kernel_w;
    let out_plane = out_h * out_w;

    let pointwise =
        spec.kernel_h == 1 && spec.kernel_w == 1 && spec.stride == 1 && spec.pad == 0;

    let mut output = Tensor::zeros([n, spec.out_channels, out_h, out_w]);
    let wdata = weights.data();

    for img in 0..n {
        if pointwise {
            // 1x1 stride-1: accumulate scaled input planes, no patch matrix.
            let in_base = img * c_in * h * w;
            let in_data = input.data();
            let out_img = &mut output.data_mut()
                [img * spec.out_channels * out_plane..(img + 1) * spec.out_channels * out_plane];
            out_img
                .par_chunks_mut(out_plane)
                .enumerate()
                .for_each(|(oc, out_row)| {
                    let g = oc / o_pg;
                    out_row.fill(bias.map_or(0.0, |b| b[oc]));
                    for cl in 0..c_pg {
                        let wv = wdata[oc * k_len + cl];
                        let c = g * c_pg + cl;
                        let in_row = &in_data[in_base + c * out_plane..in_base + (c + 1) * out_plane];
                        for (o, x) in out_row.iter_mut().zip(in_row) {
                            *o += wv * x;
                        }
                    }
                });
            continue;
        }

        // im2col: one patch matrix per group, rows are output positions.
        let mut cols: Vec<Vec<f32>> = Vec::with_capacity(groups);
        for g in 0..groups {
            let mut col = vec![0.0f32; out_plane * k_len];
            for cl in 0..c_pg {
                let plane = input.plane(img, g * c_pg + cl);
                for kh in 0..spec.kernel_h {
                    for kw in 0..spec.kernel_w {
                        let k = (cl * spec.kernel_h + kh) * spec.kernel_w + kw;
                        for oh in 0..out_h {
                            let ih = oh * spec.stride + kh;
                            if ih < spec.pad || ih >= h + spec.pad {
                                continue;
                            }
                            let ih = ih - spec.pad;
                            let row = &plane[ih * w..(ih + 1) * w];
                            for ow in 0..out_w {
                                let iw = ow * spec.stride + kw;
                                if iw < spec.pad || iw >= w + spec.pad {
                                    continue;
                                }
                                col[(oh * out_w + ow) * k_len + k] = row[iw - spec.pad];
                            }
                        }
                    }
                }
            }
            cols.push(col);
        }

        let out_img = &mut output.data_mut()
            [img * spec.out_channels * out_plane..(img + 1) * spec.out_channels * out_plane];
        out_img
            .par_chunks_mut(out_plane)
            .enumerate()
            .for_each(|(oc, out_row)| {
                let g = oc / o_pg;
                let col = &cols[g];
                let wrow = &wdata[oc * k_len..(oc + 1) * k_len];
                let b = bias.map_or(0.0, |b| b[oc]);
                for (p, o) in out_row.iter_mut().enumerate() {
                    *o = dot(wrow, &col[p * k_len..(p + 1) * k_len]) + b;
                }
            });
    }
    Ok(output)
}

/// Inference batch normalization: y = gamma * (x - mean) / sqrt(var + eps) + beta.
pub fn batch_norm_infer(input: &Tensor, params: &BnParams) -> Result<Tensor> {
    params.validate()?;
    let [n, c, h, w] = input.dims();
    if params.channels() != c {
        return Err(Error::Shape(format!(
            "batch-norm has {} channels, tensor has {}",
            params.channels(),
            c
        )));
    }
    let mut out = input.clone();
    let plane = h * w;
    for img in 0..n {
        for ch in 0..c {
            let scale = params.gamma[ch] / (params.running_var[ch] + params.epsilon).sqrt();
            let mean = params.running_mean[ch];
            let beta = params.beta[ch];
            let start = (img * c + ch) * plane;
            for v in &mut out.data_mut()[start..start + plane] {
                *v = (*v - mean) * scale + beta;
            }
        }
    }
    Ok(out)
}

/// Elementwise max(x, 0).
pub fn relu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    for v in out.data_mut() {
        *v = v.max(0.0);
    }
    out
}

/// 2-D pooling. Average mode divides by the number of in-bounds elements in
/// each window, so edge windows in ceil mode average fewer elements and a
/// constant input stays constant.
pub fn pool2d(input: &Tensor, spec: &PoolSpec) -> Result<Tensor> {
    let [n, c, h, w] = input.dims();
    let (out_h, out_w) = spec.output_hw(h, w)?;
    let mut out = Tensor::zeros([n, c, out_h, out_w]);
    for img in 0..n {
        for ch in 0..c {
            let plane = input.plane(img, ch);
            for oh in 0..out_h {
                let h0 = oh * spec.stride;
                let h1 = (h0 + spec.kernel).min(h);
                for ow in 0..out_w {
                    let w0 = ow * spec.stride;
                    let w1 = (w0 + spec.kernel).min(w);
                    let v = match spec.mode {
                        PoolMode::Max => {
                            let mut m = f32::NEG_INFINITY;
                            for ih in h0..h1 {
                                for iw in w0..w1 {
                                    m = m.max(plane[ih * w + iw]);
                                }
                            }
                            m
                        }
                        PoolMode::Avg => {
                            let mut s = 0.0f32;
                            for ih in h0..h1 {
                                for iw in w0..w1 {
                                    s += plane[ih * w + iw];
                                }
                            }
                            s / ((h1 - h0) * (w1 - w0)) as f32
                        }
                    };
                    out.set(img, ch, oh, ow, v);
                }
            }
        }
    }
    Ok(out)
}

/// Mean over the full H*W extent of every channel; output is N x C x 1 x 1.
pub fn global_avg_pool(input: &Tensor) -> Tensor {
    let [n, c, h, w] = input.dims();
    let count = (h * w) as f32;
    let mut out = Tensor::zeros([n, c, 1, 1]);
    for img in 0..n {
        for ch in 0..c {
            let mut s = 0.0f32;
            for &x in input.plane(img, ch) {
                s += x;
            }
            out.set(img, ch, 0, 0, s / count);
        }
    }
    out
}

/// Concatenate along the channel axis, preserving argument order.
pub fn concat_channels(inputs: &[&Tensor]) -> Result<Tensor> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
    let [n, _, h, w] = first.dims();
    let mut c_total = 0;
    for t in inputs {
        let [tn, tc, th, tw] = t.dims();
        if tn != n || th != h || tw != w {
            return Err(Error::Shape(format!(
                "concat inputs disagree outside the channel axis: {:?} vs {:?}",
                first.dims(),
                t.dims()
            )));
        }
        c_total += tc;
    }
    let mut out = Tensor::zeros([n, c_total, h, w]);
    let plane = h * w;
    for img in 0..n {
        let mut c_off = 0;
        for t in inputs {
            let tc = t.dims()[1];
            for ch in 0..tc {
                let dst = ((img * c_total) + c_off + ch) * plane;
                out.data_mut()[dst..dst + plane].copy_from_slice(t.plane(img, ch));
            }
            c_off += tc;
        }
    }
    Ok(out)
}

/// Elementwise sum of two tensors with identical dims.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "add of mismatched dims {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let mut out = a.clone();
    for (o, x) in out.data_mut().iter_mut().zip(b.data()) {
        *o += x;
    }
    Ok(out)
}

/// Fully connected layer on a spatially collapsed tensor (N, C, 1, 1).
/// `weights` dims must be (Cout, Cin, 1, 1).
pub fn linear(input: &Tensor, weights: &Tensor, bias: &[f32]) -> Result<Tensor> {
    let [n, c, h, w] = input.dims();
    if h != 1 || w != 1 {
        return Err(Error::Shape(format!(
            "linear expects 1x1 spatial input, got {h}x{w}"
        )));
    }
    let [out_f, in_f, wh, ww] = weights.dims();
    if wh != 1 || ww != 1 || in_f != c {
        return Err(Error::Shape(format!(
            "linear weight dims {:?} do not match input channels {}",
            weights.dims(),
            c
        )));
    }
    if bias.len() != out_f {
        return Err(Error::Shape(format!(
            "linear bias length {} != out features {}",
            bias.len(),
            out_f
        )));
    }
    let mut out = Tensor::zeros([n, out_f, 1, 1]);
    for img in 0..n {
        let x = &input.data()[img * c..(img + 1) * c];
        for o in 0..out_f {
            let wrow = &weights.data()[o * in_f..(o + 1) * in_f];
            out.set(img, o, 0, 0, dot(wrow, x) + bias[o]);
        }
    }
    Ok(out)
}

/// Softmax over the channel axis at every (n, h, w) position, computed with
/// max subtraction so large logits cannot overflow.
pub fn softmax_channels(input: &Tensor) -> Tensor {
    let [n, c, h, w] = input.dims();
    let mut out = input.clone();
    let plane = h * w;
    for img in 0..n {
        for y in 0..h {
            for x in 0..w {
                let mut m = f32::NEG_INFINITY;
                for ch in 0..c {
                    m = m.max(input.at(img, ch, y, x));
                }
                let mut sum = 0.0f32;
                for ch in 0..c {
                    let e = (input.at(img, ch, y, x) - m).exp();
                    out.data_mut()[((img * c + ch) * plane) + y * w + x] = e;
                    sum += e;
                }
                for ch in 0..c {
                    out.data_mut()[((img * c + ch) * plane) + y * w + x] /= sum;
                }
            }
        }
    }
    out
}
