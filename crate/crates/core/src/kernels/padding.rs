use super::{BConvDescriptor, ConvGeometry, KernelError, PaddingMode, Result};
use crate::bitpack::{BitpackedTensor, Shape};

/// Integer correction turning a one-padded binary convolution into a
/// zero-padded one: `dot_zero = dot_one − correction`.
///
/// Output positions are grouped into classes by which kernel rows (and
/// columns) fall outside the input. Every position in a class sees the same
/// set of padded taps, so one value per (row class, column class, channel)
/// suffices.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PaddingCorrection {
    row_class: Vec<usize>,
    col_class: Vec<usize>,
    row_classes: usize,
    col_classes: usize,
    out_channels: usize,
    values: Vec<i32>,
}

fn classify(extent: usize, range: impl Fn(usize) -> (usize, usize)) -> (Vec<usize>, usize) {
    let mut keys: Vec<(usize, usize)> = Vec::new();
    let map = (0..extent)
        .map(|o| {
            let key = range(o);
            match keys.iter().position(|k| *k == key) {
                Some(i) => i,
                None => {
                    keys.push(key);
                    keys.len() - 1
                }
            }
        })
        .collect();
    (map, keys.len())
}

/// Output index to class, and each class's valid kernel range.
type Classes = (Vec<usize>, Vec<(usize, usize)>);

/// Row classes then column classes.
fn class_ranges(geom: &ConvGeometry) -> (Classes, Classes) {
    let (row_class, nr) = classify(geom.out_h, |oy| geom.valid_rows(oy));
    let (col_class, nc) = classify(geom.out_w, |ox| geom.valid_cols(ox));
    let mut rows = vec![(0, 0); nr];
    for (oy, &c) in row_class.iter().enumerate() {
        rows[c] = geom.valid_rows(oy);
    }
    let mut cols = vec![(0, 0); nc];
    for (ox, &c) in col_class.iter().enumerate() {
        cols[c] = geom.valid_cols(ox);
    }
    ((row_class, rows), (col_class, cols))
}

impl PaddingCorrection {
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Shape of the value table as a tensor: `(row classes, col classes, 1, channels)`.
    pub fn table_shape(&self) -> Shape {
        Shape::new(self.row_classes, self.col_classes, 1, self.out_channels)
    }

    pub fn values(&self) -> &[i32] {
        &self.values
    }

    pub fn row_class(&self, oy: usize) -> usize {
        self.row_class[oy]
    }

    pub fn col_class(&self, ox: usize) -> usize {
        self.col_class[ox]
    }

    /// Corrections of all channels for output position `(oy, ox)`.
    #[inline]
    pub fn at(&self, oy: usize, ox: usize) -> &[i32] {
        let class = self.row_class[oy] * self.col_classes + self.col_class[ox];
        &self.values[class * self.out_channels..(class + 1) * self.out_channels]
    }

    #[inline]
    pub fn get(&self, oy: usize, ox: usize, c: usize) -> i32 {
        self.at(oy, ox)[c]
    }

    /// Rebuilds a correction from a stored value table.
    pub fn from_table(geom: &ConvGeometry, out_channels: usize, values: Vec<i32>) -> Result<Self> {
        let ((row_class, rows), (col_class, cols)) = class_ranges(geom);
        let expected = rows.len() * cols.len() * out_channels;
        if values.len() != expected {
            return Err(KernelError::Dimension(format!(
                "correction table has {} entries, geometry needs {expected}",
                values.len()
            )));
        }
        Ok(PaddingCorrection {
            row_class,
            col_class,
            row_classes: rows.len(),
            col_classes: cols.len(),
            out_channels,
            values,
        })
    }
}

/// Computes the zero-padding correction for bitpacked `(out, kh, kw, in)`
/// weights. Returns an empty correction unless the descriptor declares zero
/// padding.
pub fn build_padding_correction(
    weights: &BitpackedTensor,
    desc: &BConvDescriptor,
    input_hw: (usize, usize),
) -> Result<PaddingCorrection> {
    if !matches!(desc.padding, PaddingMode::Zero | PaddingMode::ZeroCorrected) {
        return Ok(PaddingCorrection::default());
    }
    let ws = weights.shape();
    if ws != Shape::new(desc.out_channels, desc.kernel_h, desc.kernel_w, desc.in_channels) {
        return Err(KernelError::Dimension(format!(
            "weights {ws} do not match descriptor {}x{}x{}x{}",
            desc.out_channels, desc.kernel_h, desc.kernel_w, desc.in_channels
        )));
    }
    let geom = desc.geometry(input_hw.0, input_hw.1)?;
    let ((row_class, rows), (col_class, cols)) = class_ranges(&geom);

    // Σ over input channels of each tap's ±1 weights.
    let in_c = desc.in_channels as i32;
    let mut tap_sums = vec![0i32; desc.out_channels * desc.kernel_h * desc.kernel_w];
    for o in 0..desc.out_channels {
        for ky in 0..desc.kernel_h {
            for kx in 0..desc.kernel_w {
                let ones: u32 = weights.pixel(o, ky, kx).iter().map(|w| w.count_ones()).sum();
                tap_sums[(o * desc.kernel_h + ky) * desc.kernel_w + kx] = in_c - 2 * ones as i32;
            }
        }
    }

    let mut values = Vec::with_capacity(rows.len() * cols.len() * desc.out_channels);
    for &(ylo, yhi) in &rows {
        for &(xlo, xhi) in &cols {
            for o in 0..desc.out_channels {
                let mut outside = 0;
                for ky in 0..desc.kernel_h {
                    for kx in 0..desc.kernel_w {
                        let inside = ky >= ylo && ky < yhi && kx >= xlo && kx < xhi;
                        if !inside {
                            outside += tap_sums[(o * desc.kernel_h + ky) * desc.kernel_w + kx];
                        }
                    }
                }
                values.push(outside);
            }
        }
    }
    Ok(PaddingCorrection {
        row_class,
        col_class,
        row_classes: rows.len(),
        col_classes: cols.len(),
        out_channels: desc.out_channels,
        values,
    })
}
