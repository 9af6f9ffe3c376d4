use super::{
    fused_transform, AccumulatorMatrix, Activation, BConvDescriptor, ChannelThreshold, KernelError, PaddingCorrection,
    Result, ThresholdSet,
};
use crate::bitpack::{words_for, BitpackedTensor, FloatTensor, Shape, WORD_BITS};

fn check_rows(acc: &AccumulatorMatrix, out_shape: Shape) -> Result<()> {
    if acc.rows != out_shape.pixels() || acc.cols != out_shape.channels {
        return Err(KernelError::Dimension(format!(
            "{}x{} accumulators cannot fill output {out_shape}",
            acc.rows, acc.cols
        )));
    }
    Ok(())
}

/// Float output transform: `multiplier·act(n − 2·acc − correction) + bias`.
pub fn output_transform_float(
    acc: &AccumulatorMatrix,
    desc: &BConvDescriptor,
    out_shape: Shape,
    correction: &PaddingCorrection,
) -> Result<FloatTensor> {
    check_rows(acc, out_shape)?;
    let mut out = FloatTensor::zeros(out_shape);
    transform_float_into(
        &acc.data,
        desc.dot_length() as i32,
        &desc.multiplier,
        &desc.bias,
        desc.activation,
        (out_shape.height, out_shape.width),
        correction,
        out.data_mut(),
    );
    Ok(out)
}

/// Bitpacked output transform: compares accumulators against per-channel
/// thresholds.
pub fn output_transform_bitpacked(
    acc: &AccumulatorMatrix,
    thresholds: &ThresholdSet,
    out_shape: Shape,
    correction: &PaddingCorrection,
) -> Result<BitpackedTensor> {
    check_rows(acc, out_shape)?;
    if thresholds.len() != acc.cols || !thresholds.is_consistent() {
        return Err(KernelError::Config(
            "threshold set does not match output channels".into(),
        ));
    }
    let mut words = vec![0u32; out_shape.packed_words()];
    transform_bitpacked_into(
        &acc.data,
        &thresholds.compile(),
        (out_shape.height, out_shape.width),
        correction,
        &mut words,
    );
    Ok(BitpackedTensor::from_words(out_shape, words).expect("thresholding leaves padding clear"))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn transform_float_into(
    acc: &[i32],
    n: i32,
    multiplier: &[f32],
    bias: &[f32],
    act: Activation,
    out_hw: (usize, usize),
    correction: &PaddingCorrection,
    out: &mut [f32],
) {
    let cols = multiplier.len();
    let plane = out_hw.0 * out_hw.1;
    for (r, (acc_row, out_row)) in acc.chunks_exact(cols).zip(out.chunks_exact_mut(cols)).enumerate() {
        if correction.is_empty() {
            for c in 0..cols {
                let dot = n - 2 * acc_row[c];
                out_row[c] = fused_transform(dot as f32, multiplier[c], bias[c], act);
            }
        } else {
            let pos = r % plane;
            let corr = correction.at(pos / out_hw.1, pos % out_hw.1);
            for c in 0..cols {
                let dot = n - 2 * acc_row[c] - corr[c];
                out_row[c] = fused_transform(dot as f32, multiplier[c], bias[c], act);
            }
        }
    }
}

pub(crate) fn transform_bitpacked_into(
    acc: &[i32],
    thresholds: &[ChannelThreshold],
    out_hw: (usize, usize),
    correction: &PaddingCorrection,
    out: &mut [u32],
) {
    let cols = thresholds.len();
    let wpp = words_for(cols);
    let plane = out_hw.0 * out_hw.1;
    for (r, (acc_row, words)) in acc.chunks_exact(cols).zip(out.chunks_exact_mut(wpp)).enumerate() {
        words.fill(0);
        let corr = if correction.is_empty() {
            None
        } else {
            let pos = r % plane;
            Some(correction.at(pos / out_hw.1, pos % out_hw.1))
        };
        for c in 0..cols {
            let acc2 = 2 * acc_row[c] + corr.map_or(0, |k| k[c]);
            if thresholds[c].bit(acc2) {
                words[c / WORD_BITS] |= 1 << (c % WORD_BITS);
            }
        }
    }
}
