//! Compute kernels: bitpacked im2col, XOR/popcount GEMM, fused output
//! transforms, zero-padding correction, binary max pooling and the float
//! operator suite.

mod bconv;
mod bgemm;
pub mod float;
mod im2col;
mod padding;
mod pool;
mod threshold;
mod transform;

use serde::{Deserialize, Serialize};

pub use bconv::PreparedBConv;
pub use bgemm::{bgemm, bgemm_into, AccumulatorMatrix};
pub use im2col::{im2col_bitpacked, pack_weight_matrix, BitpackedMatrix};
pub use padding::{build_padding_correction, PaddingCorrection};
pub use pool::bmaxpool;
pub(crate) use pool::bmaxpool_into;
pub use threshold::{AccumulatorDomain, ChannelThreshold, ThresholdError, ThresholdSet};
pub use transform::{output_transform_bitpacked, output_transform_float};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KernelError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

pub type Result<T, E = KernelError> = std::result::Result<T, E>;

/// Spatial padding declaration for float convolutions and pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Valid,
    Same,
}

/// Padding of a binary convolution.
///
/// `Zero` is the training-time declaration; it has to be legalized into
/// `ZeroCorrected` (one-padding plus an integer correction) before the
/// bitpacked kernels can run it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PaddingMode {
    Valid,
    One,
    Zero,
    ZeroCorrected,
}

impl PaddingMode {
    pub fn spatial(self) -> Padding {
        match self {
            PaddingMode::Valid => Padding::Valid,
            _ => Padding::Same,
        }
    }

    /// Domain of the effective accumulator seen by the output transform.
    pub fn accumulator_domain(self) -> AccumulatorDomain {
        match self {
            PaddingMode::Valid | PaddingMode::One => AccumulatorDomain::Integer,
            PaddingMode::Zero | PaddingMode::ZeroCorrected => AccumulatorDomain::HalfInteger,
        }
    }
}

/// Activation fused into a binary convolution, applied before the
/// per-channel affine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    None,
    Relu,
    ClampedRelu(f32),
}

impl Activation {
    #[inline(always)]
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::None => x,
            Activation::Relu => x.max(0.0),
            Activation::ClampedRelu(cap) => x.max(0.0).min(cap),
        }
    }
}

/// `multiplier * act(dot) + bias`, the canonical fused transform order.
#[inline(always)]
pub fn fused_transform(dot: f32, multiplier: f32, bias: f32, act: Activation) -> f32 {
    multiplier * act.apply(dot) + bias
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    #[default]
    Float,
    Bitpacked(ThresholdSet),
}

/// Fully legalized binary convolution configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct BConvDescriptor {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub padding: PaddingMode,
    pub activation: Activation,
    pub multiplier: Vec<f32>,
    pub bias: Vec<f32>,
    pub output: OutputKind,
}

impl BConvDescriptor {
    /// A descriptor with identity multiplier, zero bias and float output.
    pub fn new(
        kernel: (usize, usize),
        stride: (usize, usize),
        in_channels: usize,
        out_channels: usize,
        padding: PaddingMode,
    ) -> Self {
        BConvDescriptor {
            kernel_h: kernel.0,
            kernel_w: kernel.1,
            stride_h: stride.0,
            stride_w: stride.1,
            in_channels,
            out_channels,
            padding,
            activation: Activation::None,
            multiplier: vec![1.0; out_channels],
            bias: vec![0.0; out_channels],
            output: OutputKind::Float,
        }
    }

    /// Length `n` of each ±1 dot product.
    pub fn dot_length(&self) -> usize {
        self.kernel_h * self.kernel_w * self.in_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_h == 0 || self.kernel_w == 0 || self.stride_h == 0 || self.stride_w == 0 {
            return Err(KernelError::Config("kernel and stride must be positive".into()));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(KernelError::Config("channel counts must be positive".into()));
        }
        if self.multiplier.len() != self.out_channels || self.bias.len() != self.out_channels {
            return Err(KernelError::Config(format!(
                "multiplier/bias lengths {}/{} do not match {} output channels",
                self.multiplier.len(),
                self.bias.len(),
                self.out_channels
            )));
        }
        if let OutputKind::Bitpacked(t) = &self.output {
            if t.len() != self.out_channels {
                return Err(KernelError::Config(format!(
                    "{} thresholds for {} output channels",
                    t.len(),
                    self.out_channels
                )));
            }
        }
        Ok(())
    }

    pub fn geometry(&self, in_h: usize, in_w: usize) -> Result<ConvGeometry> {
        ConvGeometry::new(
            (in_h, in_w),
            (self.kernel_h, self.kernel_w),
            (self.stride_h, self.stride_w),
            self.padding.spatial(),
        )
    }
}

/// Output size and padding offsets of a strided window operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride_h: usize,
    pub stride_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

fn axis(input: usize, kernel: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    match padding {
        Padding::Valid => {
            if kernel > input {
                return Err(KernelError::Config(format!(
                    "kernel extent {kernel} larger than input extent {input}"
                )));
            }
            Ok(((input - kernel) / stride + 1, 0))
        }
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            Ok((out, total / 2))
        }
    }
}

impl ConvGeometry {
    pub fn new(
        input: (usize, usize),
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<Self> {
        if input.0 == 0 || input.1 == 0 {
            return Err(KernelError::Config("empty spatial input".into()));
        }
        if kernel.0 == 0 || kernel.1 == 0 || stride.0 == 0 || stride.1 == 0 {
            return Err(KernelError::Config("kernel and stride must be positive".into()));
        }
        let (out_h, pad_top) = axis(input.0, kernel.0, stride.0, padding)?;
        let (out_w, pad_left) = axis(input.1, kernel.1, stride.1, padding)?;
        Ok(ConvGeometry {
            in_h: input.0,
            in_w: input.1,
            out_h,
            out_w,
            kernel_h: kernel.0,
            kernel_w: kernel.1,
            stride_h: stride.0,
            stride_w: stride.1,
            pad_top,
            pad_left,
        })
    }

    /// Input row read by output row `oy` at kernel row `ky`, if inside.
    #[inline(always)]
    pub fn input_y(&self, oy: usize, ky: usize) -> Option<usize> {
        let y = (oy * self.stride_h + ky).checked_sub(self.pad_top)?;
        (y < self.in_h).then_some(y)
    }

    #[inline(always)]
    pub fn input_x(&self, ox: usize, kx: usize) -> Option<usize> {
        let x = (ox * self.stride_w + kx).checked_sub(self.pad_left)?;
        (x < self.in_w).then_some(x)
    }

    /// Range of kernel rows that land inside the input for output row `oy`.
    pub fn valid_rows(&self, oy: usize) -> (usize, usize) {
        valid_range(oy * self.stride_h, self.pad_top, self.kernel_h, self.in_h)
    }

    pub fn valid_cols(&self, ox: usize) -> (usize, usize) {
        valid_range(ox * self.stride_w, self.pad_left, self.kernel_w, self.in_w)
    }
}

fn valid_range(origin: usize, pad: usize, kernel: usize, extent: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(origin).min(kernel);
    let hi = (extent + pad).saturating_sub(origin).min(kernel);
    (lo, hi.max(lo))
}

/// Splits `rows` into at most `threads` contiguous chunks of whole rows and
/// runs `f(first_row, chunk)` on each; `out` holds `row_len` items per row.
pub(crate) fn parallel_rows<T: Send, F>(out: &mut [T], row_len: usize, threads: usize, f: F)
where
    F: Fn(usize, &mut [T]) + Sync,
{
    let rows = out.len().checked_div(row_len).unwrap_or(0);
    let threads = threads.max(1).min(rows.max(1));
    if threads == 1 {
        f(0, out);
        return;
    }
    let per = rows.div_ceil(threads);
    std::thread::scope(|s| {
        for (i, chunk) in out.chunks_mut(per * row_len).enumerate() {
            let f = &f;
            s.spawn(move || f(i * per, chunk));
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_geometry_matches_tf_convention() {
        let g = ConvGeometry::new((4, 4), (3, 3), (1, 1), Padding::Same).unwrap();
        assert_eq!((g.out_h, g.out_w, g.pad_top, g.pad_left), (4, 4, 1, 1));
        let g = ConvGeometry::new((7, 7), (3, 3), (2, 2), Padding::Same).unwrap();
        assert_eq!((g.out_h, g.pad_top), (4, 1));
        let g = ConvGeometry::new((8, 8), (3, 3), (2, 2), Padding::Same).unwrap();
        assert_eq!((g.out_h, g.pad_top), (4, 0));
    }

    #[test]
    fn valid_geometry_rejects_oversized_kernel() {
        assert!(ConvGeometry::new((2, 2), (3, 3), (1, 1), Padding::Valid).is_err());
        let g = ConvGeometry::new((5, 5), (3, 3), (2, 2), Padding::Valid).unwrap();
        assert_eq!((g.out_h, g.out_w), (2, 2));
    }

    #[test]
    fn valid_ranges_agree_with_per_tap_lookup() {
        for &(input, k, s) in &[(4, 3, 1), (7, 5, 2), (5, 1, 1), (3, 5, 1), (8, 3, 2)] {
            let g = ConvGeometry::new((input, input), (k, k), (s, s), Padding::Same).unwrap();
            for oy in 0..g.out_h {
                let (lo, hi) = g.valid_rows(oy);
                for ky in 0..k {
                    assert_eq!(g.input_y(oy, ky).is_some(), ky >= lo && ky < hi);
                }
            }
        }
    }

    #[test]
    fn descriptor_validation() {
        let mut d = BConvDescriptor::new((3, 3), (1, 1), 32, 8, PaddingMode::One);
        assert!(d.validate().is_ok());
        assert_eq!(d.dot_length(), 288);
        d.bias.pop();
        assert!(d.validate().is_err());
    }
}
