use super::{ConvGeometry, Padding, Result};
use crate::bitpack::{BitpackedTensor, Shape};

/// Binary max pooling. Since a clear bit is `+1`, the maximum of a window
/// is the bitwise AND of its words. Padded positions are skipped.
pub fn bmaxpool(
    input: &BitpackedTensor,
    window: (usize, usize),
    stride: (usize, usize),
    padding: Padding,
) -> Result<BitpackedTensor> {
    let shape = input.shape();
    let geom = ConvGeometry::new((shape.height, shape.width), window, stride, padding)?;
    let out_shape = Shape::new(shape.batch, geom.out_h, geom.out_w, shape.channels);
    let mut words = vec![0u32; out_shape.packed_words()];
    bmaxpool_into(input.words(), shape, &geom, &mut words);
    Ok(BitpackedTensor::from_words(out_shape, words).expect("AND keeps padding clear"))
}

pub(crate) fn bmaxpool_into(words: &[u32], shape: Shape, geom: &ConvGeometry, out: &mut [u32]) {
    let wpp = shape.words_per_pixel();
    let mut o = 0;
    for n in 0..shape.batch {
        for oy in 0..geom.out_h {
            let (ylo, yhi) = geom.valid_rows(oy);
            for ox in 0..geom.out_w {
                let (xlo, xhi) = geom.valid_cols(ox);
                let dst = &mut out[o * wpp..(o + 1) * wpp];
                dst.fill(u32::MAX);
                for ky in ylo..yhi {
                    let y = oy * geom.stride_h + ky - geom.pad_top;
                    for kx in xlo..xhi {
                        let x = ox * geom.stride_w + kx - geom.pad_left;
                        let start = ((n * shape.height + y) * shape.width + x) * wpp;
                        for (d, s) in dst.iter_mut().zip(&words[start..start + wpp]) {
                            *d &= s;
                        }
                    }
                }
                o += 1;
            }
        }
    }
}
