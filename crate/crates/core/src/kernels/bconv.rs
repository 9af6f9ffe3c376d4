use super::im2col::im2col_into;
use super::transform::{transform_bitpacked_into, transform_float_into};
use super::{
    bgemm_into, build_padding_correction, pack_weight_matrix, BConvDescriptor, BitpackedMatrix, ChannelThreshold,
    ConvGeometry, KernelError, OutputKind, PaddingCorrection, PaddingMode, Result,
};
use crate::bitpack::{BitpackedTensor, FloatTensor, Shape};

/// A binary convolution bound to an input shape, with weights laid out for
/// the GEMM, padding correction built and thresholds compiled.
#[derive(Debug, Clone)]
pub struct PreparedBConv {
    desc: BConvDescriptor,
    weights: BitpackedMatrix,
    correction: PaddingCorrection,
    thresholds: Option<Vec<ChannelThreshold>>,
    input_shape: Shape,
    geom: ConvGeometry,
}

impl PreparedBConv {
    /// `weights` are bitpacked `(out, kh, kw, in)`. A stored `correction`
    /// table is used when given; otherwise zero padding builds one.
    pub fn new(
        desc: BConvDescriptor,
        weights: &BitpackedTensor,
        correction: Option<PaddingCorrection>,
        input_shape: Shape,
    ) -> Result<Self> {
        desc.validate()?;
        let ws = weights.shape();
        if ws != Shape::new(desc.out_channels, desc.kernel_h, desc.kernel_w, desc.in_channels) {
            return Err(KernelError::Dimension(format!(
                "weights {ws} do not match a {}x{} kernel from {} to {} channels",
                desc.kernel_h, desc.kernel_w, desc.in_channels, desc.out_channels
            )));
        }
        if input_shape.channels != desc.in_channels {
            return Err(KernelError::Dimension(format!(
                "input {input_shape} does not have {} channels",
                desc.in_channels
            )));
        }
        let geom = desc.geometry(input_shape.height, input_shape.width)?;
        let zero = matches!(desc.padding, PaddingMode::Zero | PaddingMode::ZeroCorrected);
        let correction = match correction {
            Some(c) if zero => {
                let rebuilt = PaddingCorrection::from_table(&geom, desc.out_channels, c.values().to_vec())?;
                if rebuilt != c {
                    return Err(KernelError::Dimension(
                        "correction table does not match the geometry".into(),
                    ));
                }
                c
            }
            Some(c) if !c.is_empty() => {
                return Err(KernelError::Config(format!(
                    "{:?} padding takes no correction table",
                    desc.padding
                )))
            }
            _ => build_padding_correction(weights, &desc, (input_shape.height, input_shape.width))?,
        };
        let thresholds = match &desc.output {
            OutputKind::Float => None,
            OutputKind::Bitpacked(t) => {
                if !t.is_consistent() {
                    return Err(KernelError::Config("inconsistent threshold set".into()));
                }
                Some(t.compile())
            }
        };
        Ok(PreparedBConv {
            weights: pack_weight_matrix(weights),
            desc,
            correction,
            thresholds,
            input_shape,
            geom,
        })
    }

    pub fn descriptor(&self) -> &BConvDescriptor {
        &self.desc
    }

    pub fn correction(&self) -> &PaddingCorrection {
        &self.correction
    }

    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }

    pub fn output_shape(&self) -> Shape {
        Shape::new(
            self.input_shape.batch,
            self.geom.out_h,
            self.geom.out_w,
            self.desc.out_channels,
        )
    }

    pub fn bitpacked_output(&self) -> bool {
        self.thresholds.is_some()
    }

    /// Number of accumulators produced by [`accumulate`](Self::accumulate).
    pub fn accumulator_len(&self) -> usize {
        self.output_shape().elements()
    }

    /// Binary multiply-accumulate count per run.
    pub fn macs(&self) -> u64 {
        self.accumulator_len() as u64 * self.desc.dot_length() as u64
    }

    /// im2col followed by the XOR/popcount GEMM.
    pub fn accumulate(
        &self,
        input: &[u32],
        scratch: &mut BitpackedMatrix,
        acc: &mut [i32],
        threads: usize,
    ) -> Result<()> {
        if input.len() != self.input_shape.packed_words() {
            return Err(KernelError::Dimension(format!(
                "input holds {} words, {} expected",
                input.len(),
                self.input_shape.packed_words()
            )));
        }
        im2col_into(input, self.input_shape, &self.geom, scratch);
        bgemm_into(scratch, &self.weights, acc, threads)
    }

    pub fn transform_float(&self, acc: &[i32], out: &mut [f32]) {
        transform_float_into(
            acc,
            self.desc.dot_length() as i32,
            &self.desc.multiplier,
            &self.desc.bias,
            self.desc.activation,
            (self.geom.out_h, self.geom.out_w),
            &self.correction,
            out,
        );
    }

    /// Panics if the descriptor has float output.
    pub fn transform_bitpacked(&self, acc: &[i32], out: &mut [u32]) {
        let t = self.thresholds.as_ref().expect("descriptor has bitpacked output");
        transform_bitpacked_into(acc, t, (self.geom.out_h, self.geom.out_w), &self.correction, out);
    }

    pub fn run_float(&self, input: &BitpackedTensor, threads: usize) -> Result<FloatTensor> {
        let mut acc = vec![0; self.accumulator_len()];
        self.accumulate(input.words(), &mut BitpackedMatrix::zeros(0, 0), &mut acc, threads)?;
        let mut out = FloatTensor::zeros(self.output_shape());
        self.transform_float(&acc, out.data_mut());
        Ok(out)
    }

    pub fn run_bitpacked(&self, input: &BitpackedTensor, threads: usize) -> Result<BitpackedTensor> {
        if self.thresholds.is_none() {
            return Err(KernelError::Config("descriptor has float output".into()));
        }
        let mut acc = vec![0; self.accumulator_len()];
        self.accumulate(input.words(), &mut BitpackedMatrix::zeros(0, 0), &mut acc, threads)?;
        let mut words = vec![0; self.output_shape().packed_words()];
        self.transform_bitpacked(&acc, &mut words);
        Ok(BitpackedTensor::from_words(self.output_shape(), words).expect("thresholding leaves padding clear"))
    }
}
