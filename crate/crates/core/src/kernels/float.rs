//! Full-precision operators used by the first and last layers, shortcuts and
//! as the float baseline for speedup measurements.
//!
//! Every reduction accumulates in a fixed order (kernel row, kernel column,
//! input channel) starting from `0.0`, so results do not depend on blocking
//! or thread count.

use serde::{Deserialize, Serialize};

use super::{parallel_rows, Activation, ConvGeometry, KernelError, Padding, Result};
use crate::bitpack::{FloatTensor, Shape};

/// Geometry and padding of a float convolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv2dParams {
    pub stride: (usize, usize),
    pub padding: Padding,
    /// Value used for out-of-bounds taps under `Same` padding.
    pub pad_value: f32,
    pub depthwise: bool,
}

impl Default for Conv2dParams {
    fn default() -> Self {
        Conv2dParams {
            stride: (1, 1),
            padding: Padding::Valid,
            pad_value: 0.0,
            depthwise: false,
        }
    }
}

/// `sum·multiplier + bias`, each factor optional.
#[inline(always)]
pub fn conv_epilogue(sum: f32, multiplier: Option<f32>, bias: Option<f32>) -> f32 {
    let v = match multiplier {
        Some(m) => sum * m,
        None => sum,
    };
    match bias {
        Some(b) => v + b,
        None => v,
    }
}

/// Batch-normalization parameters, per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchNormParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub mean: Vec<f32>,
    pub variance: Vec<f32>,
    pub epsilon: f32,
}

impl BatchNormParams {
    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// `(scale, shift)` with `y = x·scale + shift`,
    /// `scale = γ/√(σ²+ε)` and `shift = β − scale·μ`.
    pub fn scale_shift(&self) -> (Vec<f32>, Vec<f32>) {
        let scale: Vec<f32> = self
            .gamma
            .iter()
            .zip(&self.variance)
            .map(|(g, v)| g / (v + self.epsilon).sqrt())
            .collect();
        let shift = scale
            .iter()
            .zip(&self.beta)
            .zip(&self.mean)
            .map(|((s, b), m)| b - s * m)
            .collect();
        (scale, shift)
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let c = self.gamma.len();
        if self.beta.len() != c || self.mean.len() != c || self.variance.len() != c {
            return Err("batch-norm parameter lengths differ".into());
        }
        if self.variance.iter().any(|&v| v < 0.0 || v.is_nan()) {
            return Err("negative variance".into());
        }
        if self.epsilon.is_nan() || self.epsilon < 0.0 {
            return Err("epsilon must be non-negative".into());
        }
        if self.variance.iter().any(|&v| v + self.epsilon <= 0.0) {
            return Err("variance + epsilon must be positive".into());
        }
        Ok(())
    }
}

const MR: usize = 4;
const NR: usize = 16;
const KC: usize = 256;
const MC: usize = 64;

/// Convolution with weights pre-packed for the GEMM.
#[derive(Debug, Clone)]
pub struct PreparedConv2d {
    params: Conv2dParams,
    weight_shape: Shape,
    /// `K x out` weights in panels of `NR` columns (regular convolution) or
    /// `(c, ky, kx)` weights (depthwise).
    packed: Vec<f32>,
    multiplier: Option<Vec<f32>>,
    bias: Option<Vec<f32>>,
}

impl PreparedConv2d {
    /// `weights` is `(out, kh, kw, in)`; for depthwise `(channels, kh, kw, 1)`.
    pub fn new(
        weights: &FloatTensor,
        multiplier: Option<&[f32]>,
        bias: Option<&[f32]>,
        params: Conv2dParams,
    ) -> Result<Self> {
        let ws = weights.shape();
        if params.depthwise && ws.channels != 1 {
            return Err(KernelError::Config(format!(
                "depthwise weights must have one input channel, got {ws}"
            )));
        }
        for (name, v) in [("multiplier", multiplier), ("bias", bias)] {
            if let Some(v) = v {
                if v.len() != ws.batch {
                    return Err(KernelError::Dimension(format!(
                        "{name} has {} entries for {} output channels",
                        v.len(),
                        ws.batch
                    )));
                }
            }
        }
        let packed = if params.depthwise {
            weights.data().to_vec()
        } else {
            let k = ws.height * ws.width * ws.channels;
            let n = ws.batch;
            let panels = n.div_ceil(NR);
            let mut packed = vec![0.0f32; panels * k * NR];
            for o in 0..n {
                let (p, j) = (o / NR, o % NR);
                for kk in 0..k {
                    packed[(p * k + kk) * NR + j] = weights.data()[o * k + kk];
                }
            }
            packed
        };
        Ok(PreparedConv2d {
            params,
            weight_shape: ws,
            packed,
            multiplier: multiplier.map(<[f32]>::to_vec),
            bias: bias.map(<[f32]>::to_vec),
        })
    }

    pub fn params(&self) -> Conv2dParams {
        self.params
    }

    pub fn weight_shape(&self) -> Shape {
        self.weight_shape
    }

    pub fn geometry(&self, input: Shape) -> Result<ConvGeometry> {
        let expected_in = if self.params.depthwise {
            self.weight_shape.batch
        } else {
            self.weight_shape.channels
        };
        if input.channels != expected_in {
            return Err(KernelError::Dimension(format!(
                "input {input} has {} channels, weights expect {expected_in}",
                input.channels
            )));
        }
        ConvGeometry::new(
            (input.height, input.width),
            (self.weight_shape.height, self.weight_shape.width),
            self.params.stride,
            self.params.padding,
        )
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let g = self.geometry(input)?;
        Ok(Shape::new(input.batch, g.out_h, g.out_w, self.weight_shape.batch))
    }

    /// Multiply-accumulate count for one run on `input`.
    pub fn macs(&self, input: Shape) -> Result<u64> {
        let out = self.output_shape(input)?;
        let per = (self.weight_shape.height * self.weight_shape.width * self.weight_shape.channels) as u64;
        Ok(out.elements() as u64 * per)
    }

    /// Runs the convolution; `scratch` holds the im2col matrix between calls.
    pub fn run(
        &self,
        input: &[f32],
        in_shape: Shape,
        out: &mut [f32],
        scratch: &mut Vec<f32>,
        threads: usize,
    ) -> Result<()> {
        let geom = self.geometry(in_shape)?;
        let out_shape = Shape::new(in_shape.batch, geom.out_h, geom.out_w, self.weight_shape.batch);
        if out.len() != out_shape.elements() || input.len() != in_shape.elements() {
            return Err(KernelError::Dimension("convolution buffer sizes".into()));
        }
        if self.params.depthwise {
            self.run_depthwise(input, in_shape, &geom, out, threads);
            return Ok(());
        }
        let k = self.weight_shape.height * self.weight_shape.width * self.weight_shape.channels;
        let n = self.weight_shape.batch;
        let direct = self.weight_shape.height == 1
            && self.weight_shape.width == 1
            && geom.stride_h == 1
            && geom.stride_w == 1
            && geom.pad_top == 0
            && geom.pad_left == 0;
        let a: &[f32] = if direct {
            input
        } else {
            im2col_float(input, in_shape, &geom, self.params.pad_value, scratch);
            scratch
        };
        parallel_rows(out, n, threads, |first, chunk| {
            let rows = chunk.len() / n;
            gemm(&a[first * k..(first + rows) * k], rows, k, &self.packed, n, chunk);
            self.epilogue(chunk, n);
        });
        Ok(())
    }

    fn epilogue(&self, out: &mut [f32], n: usize) {
        if self.multiplier.is_none() && self.bias.is_none() {
            return;
        }
        for row in out.chunks_exact_mut(n) {
            for (c, v) in row.iter_mut().enumerate() {
                *v = conv_epilogue(
                    *v,
                    self.multiplier.as_ref().map(|m| m[c]),
                    self.bias.as_ref().map(|b| b[c]),
                );
            }
        }
    }

    fn run_depthwise(&self, input: &[f32], s: Shape, geom: &ConvGeometry, out: &mut [f32], threads: usize) {
        let c_n = s.channels;
        let (kh, kw) = (geom.kernel_h, geom.kernel_w);
        let w = &self.packed;
        let pad = self.params.pad_value;
        let row_len = geom.out_w * c_n;
        parallel_rows(out, row_len, threads, |first, chunk| {
            for (i, out_row) in chunk.chunks_exact_mut(row_len).enumerate() {
                let row = first + i;
                let (n, oy) = (row / geom.out_h, row % geom.out_h);
                for ox in 0..geom.out_w {
                    let dst = &mut out_row[ox * c_n..(ox + 1) * c_n];
                    dst.fill(0.0);
                    for ky in 0..kh {
                        let iy = geom.input_y(oy, ky);
                        for kx in 0..kw {
                            let tap = ky * kw + kx;
                            match (iy, geom.input_x(ox, kx)) {
                                (Some(y), Some(x)) => {
                                    let src = &input[((n * s.height + y) * s.width + x) * c_n..][..c_n];
                                    for c in 0..c_n {
                                        dst[c] += src[c] * w[c * kh * kw + tap];
                                    }
                                }
                                _ => {
                                    for c in 0..c_n {
                                        dst[c] += pad * w[c * kh * kw + tap];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            self.epilogue(chunk, c_n);
        });
    }
}

fn im2col_float(input: &[f32], s: Shape, geom: &ConvGeometry, pad: f32, out: &mut Vec<f32>) {
    let c = s.channels;
    let k = geom.kernel_h * geom.kernel_w * c;
    let rows = s.batch * geom.out_h * geom.out_w;
    out.clear();
    out.resize(rows * k, 0.0);
    let mut r = 0;
    for n in 0..s.batch {
        for oy in 0..geom.out_h {
            for ox in 0..geom.out_w {
                let row = &mut out[r * k..(r + 1) * k];
                for ky in 0..geom.kernel_h {
                    let iy = geom.input_y(oy, ky);
                    for kx in 0..geom.kernel_w {
                        let dst = &mut row[(ky * geom.kernel_w + kx) * c..][..c];
                        match (iy, geom.input_x(ox, kx)) {
                            (Some(y), Some(x)) => {
                                dst.copy_from_slice(&input[((n * s.height + y) * s.width + x) * c..][..c])
                            }
                            _ => dst.fill(pad),
                        }
                    }
                }
                r += 1;
            }
        }
    }
}

/// `c = a·b` for row-major `a` (`rows x k`) and panel-packed `b`.
///
/// The AVX2 build only widens the vectors; multiplies and adds stay
/// separate, so both paths produce identical bits.
fn gemm(a: &[f32], rows: usize, k: usize, b: &[f32], n: usize, c: &mut [f32]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: avx2 was detected at runtime.
            unsafe { gemm_avx2(a, rows, k, b, n, c) };
            return;
        }
    }
    gemm_generic(a, rows, k, b, n, c)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn gemm_avx2(a: &[f32], rows: usize, k: usize, b: &[f32], n: usize, c: &mut [f32]) {
    gemm_generic(a, rows, k, b, n, c)
}

#[inline(always)]
fn gemm_generic(a: &[f32], rows: usize, k: usize, b: &[f32], n: usize, c: &mut [f32]) {
    if k == 0 {
        c.fill(0.0);
        return;
    }
    let panels = n.div_ceil(NR);
    for kb in (0..k).step_by(KC) {
        let ke = (kb + KC).min(k);
        for rb in (0..rows).step_by(MC) {
            let re = (rb + MC).min(rows);
            for p in 0..panels {
                let bp = &b[(p * k + kb) * NR..(p * k + ke) * NR];
                let j0 = p * NR;
                let nj = (n - j0).min(NR);
                let mut r = rb;
                while r + MR <= re {
                    micro::<MR>(a, k, r, kb, ke, bp, c, n, j0, nj);
                    r += MR;
                }
                while r < re {
                    micro::<1>(a, k, r, kb, ke, bp, c, n, j0, nj);
                    r += 1;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn micro<const M: usize>(
    a: &[f32],
    k: usize,
    r: usize,
    kb: usize,
    ke: usize,
    bp: &[f32],
    c: &mut [f32],
    n: usize,
    j0: usize,
    nj: usize,
) {
    let mut acc = [[0.0f32; NR]; M];
    if kb > 0 {
        for i in 0..M {
            acc[i][..nj].copy_from_slice(&c[(r + i) * n + j0..][..nj]);
        }
    }
    let rows: [&[f32]; M] = std::array::from_fn(|i| &a[(r + i) * k + kb..(r + i) * k + ke]);
    for (kk, bv) in bp.chunks_exact(NR).enumerate() {
        let bv: &[f32; NR] = bv.try_into().unwrap();
        for i in 0..M {
            let av = rows[i][kk];
            for j in 0..NR {
                acc[i][j] += av * bv[j];
            }
        }
    }
    for i in 0..M {
        c[(r + i) * n + j0..][..nj].copy_from_slice(&acc[i][..nj]);
    }
}

/// Float 2-D convolution, NHWC input and `(out, kh, kw, in)` weights.
pub fn conv2d(
    input: &FloatTensor,
    weights: &FloatTensor,
    multiplier: Option<&[f32]>,
    bias: Option<&[f32]>,
    params: Conv2dParams,
    threads: usize,
) -> Result<FloatTensor> {
    let conv = PreparedConv2d::new(weights, multiplier, bias, params)?;
    let mut out = FloatTensor::zeros(conv.output_shape(input.shape())?);
    conv.run(input.data(), input.shape(), out.data_mut(), &mut Vec::new(), threads)?;
    Ok(out)
}

pub fn maxpool2d(
    input: &FloatTensor,
    window: (usize, usize),
    stride: (usize, usize),
    padding: Padding,
) -> Result<FloatTensor> {
    let s = input.shape();
    let geom = ConvGeometry::new((s.height, s.width), window, stride, padding)?;
    let mut out = FloatTensor::zeros(Shape::new(s.batch, geom.out_h, geom.out_w, s.channels));
    maxpool2d_into(input.data(), s, &geom, out.data_mut());
    Ok(out)
}

pub(crate) fn maxpool2d_into(input: &[f32], s: Shape, geom: &ConvGeometry, out: &mut [f32]) {
    let c_n = s.channels;
    let mut o = 0;
    for n in 0..s.batch {
        for oy in 0..geom.out_h {
            let (ylo, yhi) = geom.valid_rows(oy);
            for ox in 0..geom.out_w {
                let (xlo, xhi) = geom.valid_cols(ox);
                let dst = &mut out[o * c_n..(o + 1) * c_n];
                dst.fill(f32::NEG_INFINITY);
                for ky in ylo..yhi {
                    let y = oy * geom.stride_h + ky - geom.pad_top;
                    for kx in xlo..xhi {
                        let x = ox * geom.stride_w + kx - geom.pad_left;
                        let src = &input[((n * s.height + y) * s.width + x) * c_n..][..c_n];
                        for (d, &v) in dst.iter_mut().zip(src) {
                            if v > *d {
                                *d = v;
                            }
                        }
                    }
                }
                o += 1;
            }
        }
    }
}

pub fn add(a: &FloatTensor, b: &FloatTensor) -> Result<FloatTensor> {
    if a.shape() != b.shape() {
        return Err(KernelError::Dimension(format!(
            "add of mismatched shapes {} and {}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = FloatTensor::zeros(a.shape());
    add_into(a.data(), b.data(), out.data_mut());
    Ok(out)
}

pub(crate) fn add_into(a: &[f32], b: &[f32], out: &mut [f32]) {
    for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
        *o = x + y;
    }
}

/// ReLU, clamped at `cap` when given.
pub fn relu(input: &FloatTensor, cap: Option<f32>) -> FloatTensor {
    let mut out = input.clone();
    relu_in_place(out.data_mut(), cap);
    out
}

pub(crate) fn relu_in_place(data: &mut [f32], cap: Option<f32>) {
    let act = match cap {
        Some(c) => Activation::ClampedRelu(c),
        None => Activation::Relu,
    };
    for v in data {
        *v = act.apply(*v);
    }
}

pub fn batch_norm(input: &FloatTensor, params: &BatchNormParams) -> Result<FloatTensor> {
    if params.channels() != input.shape().channels {
        return Err(KernelError::Dimension(format!(
            "batch norm over {} channels applied to {}",
            params.channels(),
            input.shape()
        )));
    }
    let (scale, shift) = params.scale_shift();
    let mut out = FloatTensor::zeros(input.shape());
    scale_shift_into(input.data(), &scale, &shift, out.data_mut());
    Ok(out)
}

pub(crate) fn scale_shift_into(input: &[f32], scale: &[f32], shift: &[f32], out: &mut [f32]) {
    let c_n = scale.len();
    for (src, dst) in input.chunks_exact(c_n).zip(out.chunks_exact_mut(c_n)) {
        for c in 0..c_n {
            dst[c] = src[c] * scale[c] + shift[c];
        }
    }
}

/// Fully connected layer over the flattened `h·w·c` features of each batch
/// item. Weights are `(out, 1, 1, features)`.
pub fn dense(input: &FloatTensor, weights: &FloatTensor, bias: Option<&[f32]>) -> Result<FloatTensor> {
    let s = input.shape();
    let ws = weights.shape();
    let features = s.height * s.width * s.channels;
    if ws.height * ws.width * ws.channels != features {
        return Err(KernelError::Dimension(format!(
            "dense weights {ws} do not match {features} input features"
        )));
    }
    if bias.is_some_and(|b| b.len() != ws.batch) {
        return Err(KernelError::Dimension("dense bias length".into()));
    }
    let mut out = FloatTensor::zeros(Shape::new(s.batch, 1, 1, ws.batch));
    dense_into(input.data(), features, weights.data(), bias, out.data_mut());
    Ok(out)
}

pub(crate) fn dense_into(input: &[f32], features: usize, weights: &[f32], bias: Option<&[f32]>, out: &mut [f32]) {
    let outputs = weights.len() / features.max(1);
    for (x, dst) in input.chunks_exact(features).zip(out.chunks_exact_mut(outputs)) {
        for (o, d) in dst.iter_mut().enumerate() {
            let w = &weights[o * features..(o + 1) * features];
            let mut sum = 0.0f32;
            for i in 0..features {
                sum += x[i] * w[i];
            }
            *d = conv_epilogue(sum, None, bias.map(|b| b[o]));
        }
    }
}

pub fn global_avg_pool(input: &FloatTensor) -> FloatTensor {
    let s = input.shape();
    let mut out = FloatTensor::zeros(Shape::new(s.batch, 1, 1, s.channels));
    global_avg_pool_into(input.data(), s, out.data_mut());
    out
}

pub(crate) fn global_avg_pool_into(input: &[f32], s: Shape, out: &mut [f32]) {
    let plane = s.height * s.width;
    let c_n = s.channels;
    for n in 0..s.batch {
        let dst = &mut out[n * c_n..(n + 1) * c_n];
        dst.fill(0.0);
        for p in 0..plane {
            let src = &input[(n * plane + p) * c_n..][..c_n];
            for (d, v) in dst.iter_mut().zip(src) {
                *d += v;
            }
        }
        for d in dst.iter_mut() {
            *d /= plane as f32;
        }
    }
}
