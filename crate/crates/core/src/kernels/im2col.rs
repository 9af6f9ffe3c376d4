use super::{BConvDescriptor, ConvGeometry, KernelError, Result};
use crate::bitpack::{BitpackedTensor, Shape, WORD_BITS};

/// Row-major matrix of packed sign bits.
///
/// Each row holds `words` 32-bit words. Storage pairs consecutive words into
/// `u64` lanes so the GEMM can process 64 bits per popcount; an odd trailing
/// word occupies the low half of the last lane with the high half clear.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitpackedMatrix {
    rows: usize,
    words: usize,
    stride: usize,
    data: Vec<u64>,
}

#[inline(always)]
fn put(row: &mut [u64], i: usize, v: u32) {
    if i.is_multiple_of(2) {
        row[i / 2] = v as u64;
    } else {
        row[i / 2] |= (v as u64) << 32;
    }
}

impl BitpackedMatrix {
    pub fn zeros(rows: usize, words: usize) -> Self {
        let stride = words.div_ceil(2);
        BitpackedMatrix {
            rows,
            words,
            stride,
            data: vec![0; rows * stride],
        }
    }

    /// Builds a matrix from `rows * words` row-major 32-bit words.
    pub fn from_u32_rows(rows: usize, words: usize, data: &[u32]) -> Self {
        assert_eq!(data.len(), rows * words);
        let mut m = BitpackedMatrix::zeros(rows, words);
        if words == 0 {
            return m;
        }
        for (r, src) in data.chunks_exact(words).enumerate() {
            let row = m.row_mut(r);
            for (i, &w) in src.iter().enumerate() {
                put(row, i, w);
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Number of 32-bit words per row.
    pub fn words_per_row(&self) -> usize {
        self.words
    }

    /// Number of `u64` lanes per row.
    pub fn lanes_per_row(&self) -> usize {
        self.stride
    }

    pub fn data(&self) -> &[u64] {
        &self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[u64] {
        &self.data[r * self.stride..(r + 1) * self.stride]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [u64] {
        &mut self.data[r * self.stride..(r + 1) * self.stride]
    }

    /// The `i`-th 32-bit word of row `r`.
    pub fn word(&self, r: usize, i: usize) -> u32 {
        let lane = self.data[r * self.stride + i / 2];
        if i.is_multiple_of(2) {
            lane as u32
        } else {
            (lane >> 32) as u32
        }
    }

    pub fn bit(&self, r: usize, b: usize) -> bool {
        (self.word(r, b / WORD_BITS) >> (b % WORD_BITS)) & 1 == 1
    }

    /// Reshapes to `rows` rows of `words` words, reusing the allocation.
    pub(crate) fn resize(&mut self, rows: usize, words: usize) {
        self.rows = rows;
        self.words = words;
        self.stride = words.div_ceil(2);
        self.data.resize(rows * self.stride, 0);
    }
}

/// Gathers receptive fields of a bitpacked NHWC tensor into matrix rows.
///
/// Row `r` corresponds to output position `(n, oy, ox)` in row-major order
/// and holds, for each kernel tap `(ky, kx)`, the packed words of the input
/// pixel under that tap. Taps outside the input are filled with clear bits,
/// i.e. `+1.0`.
pub fn im2col_bitpacked(input: &BitpackedTensor, desc: &BConvDescriptor) -> Result<BitpackedMatrix> {
    let shape = input.shape();
    if shape.channels != desc.in_channels {
        return Err(KernelError::Dimension(format!(
            "input has {} channels, descriptor expects {}",
            shape.channels, desc.in_channels
        )));
    }
    let geom = desc.geometry(shape.height, shape.width)?;
    let mut out = BitpackedMatrix::zeros(0, 0);
    im2col_into(input.words(), shape, &geom, &mut out);
    Ok(out)
}

pub(crate) fn im2col_into(words: &[u32], shape: Shape, geom: &ConvGeometry, out: &mut BitpackedMatrix) {
    let wpp = shape.words_per_pixel();
    let rows = shape.batch * geom.out_h * geom.out_w;
    let row_words = geom.kernel_h * geom.kernel_w * wpp;
    out.resize(rows, row_words);
    if row_words == 0 {
        return;
    }
    let pixel = |n: usize, y: usize, x: usize| {
        let start = ((n * shape.height + y) * shape.width + x) * wpp;
        &words[start..start + wpp]
    };
    let mut r = 0;
    for n in 0..shape.batch {
        for oy in 0..geom.out_h {
            for ox in 0..geom.out_w {
                let row = out.row_mut(r);
                let mut i = 0;
                for ky in 0..geom.kernel_h {
                    let iy = geom.input_y(oy, ky);
                    for kx in 0..geom.kernel_w {
                        match (iy, geom.input_x(ox, kx)) {
                            (Some(y), Some(x)) => {
                                for &w in pixel(n, y, x) {
                                    put(row, i, w);
                                    i += 1;
                                }
                            }
                            _ => {
                                for _ in 0..wpp {
                                    put(row, i, 0);
                                    i += 1;
                                }
                            }
                        }
                    }
                }
                r += 1;
            }
        }
    }
}

/// Lays out bitpacked `(out, kh, kw, in)` weights as one row per filter,
/// matching the tap order produced by [`im2col_bitpacked`].
pub fn pack_weight_matrix(weights: &BitpackedTensor) -> BitpackedMatrix {
    let s = weights.shape();
    let per_filter = s.height * s.width * s.words_per_pixel();
    BitpackedMatrix::from_u32_rows(s.batch, per_filter, weights.words())
}
