use super::{parallel_rows, BitpackedMatrix, KernelError, Result};

/// Row-major matrix of XOR-popcount accumulators.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccumulatorMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<i32>,
}

impl AccumulatorMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        AccumulatorMatrix {
            rows,
            cols,
            data: vec![0; rows * cols],
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> i32 {
        self.data[r * self.cols + c]
    }
}

/// Binary GEMM: `acc[r][c] = Σ popcount(lhs[r] XOR weights[c])`.
///
/// With `n` valid bits per row, the ±1 dot product is `n − 2·acc`.
pub fn bgemm(lhs: &BitpackedMatrix, weights: &BitpackedMatrix) -> Result<AccumulatorMatrix> {
    let mut acc = AccumulatorMatrix::zeros(lhs.rows(), weights.rows());
    bgemm_into(lhs, weights, &mut acc.data, 1)?;
    Ok(acc)
}

/// [`bgemm`] into a caller-provided buffer of `lhs.rows() * weights.rows()`
/// accumulators, partitioning output rows over `threads` workers.
pub fn bgemm_into(lhs: &BitpackedMatrix, weights: &BitpackedMatrix, out: &mut [i32], threads: usize) -> Result<()> {
    if lhs.words_per_row() != weights.words_per_row() {
        return Err(KernelError::Dimension(format!(
            "lhs rows have {} words, weight rows have {}",
            lhs.words_per_row(),
            weights.words_per_row()
        )));
    }
    let cols = weights.rows();
    if out.len() != lhs.rows() * cols {
        return Err(KernelError::Dimension(format!(
            "output buffer holds {} accumulators, need {}",
            out.len(),
            lhs.rows() * cols
        )));
    }
    let k = lhs.lanes_per_row();
    parallel_rows(out, cols, threads, |first_row, chunk| {
        let rows = chunk.len() / cols.max(1);
        let a = &lhs.data()[first_row * k..(first_row + rows) * k];
        dispatch(a, weights.data(), k, rows, cols, chunk);
    });
    Ok(())
}

fn dispatch(a: &[u64], w: &[u64], k: usize, rows: usize, cols: usize, out: &mut [i32]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("popcnt") {
            // SAFETY: the popcnt feature was detected at runtime.
            unsafe { kernel_popcnt(a, w, k, rows, cols, out) };
            return;
        }
    }
    kernel(a, w, k, rows, cols, out);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "popcnt")]
unsafe fn kernel_popcnt(a: &[u64], w: &[u64], k: usize, rows: usize, cols: usize, out: &mut [i32]) {
    kernel(a, w, k, rows, cols, out)
}

const MR: usize = 4;
const NR: usize = 4;
/// Output channels processed per pass over the activation rows.
const NC: usize = 64;

#[inline(always)]
fn dot(x: &[u64], y: &[u64]) -> u32 {
    x.iter().zip(y).map(|(a, b)| (a ^ b).count_ones()).sum()
}

#[inline(always)]
fn kernel(a: &[u64], w: &[u64], k: usize, rows: usize, cols: usize, out: &mut [i32]) {
    if k == 0 {
        out.fill(0);
        return;
    }
    for c_tile in (0..cols).step_by(NC) {
        let c_end = (c_tile + NC).min(cols);
        let full_rows = rows - rows % MR;
        for r0 in (0..full_rows).step_by(MR) {
            let xs: [&[u64]; MR] = std::array::from_fn(|i| &a[(r0 + i) * k..(r0 + i + 1) * k]);
            let full_cols_end = c_tile + (c_end - c_tile) / NR * NR;
            for c0 in (c_tile..full_cols_end).step_by(NR) {
                let ys: [&[u64]; NR] = std::array::from_fn(|j| &w[(c0 + j) * k..(c0 + j + 1) * k]);
                let mut acc = [[0u32; NR]; MR];
                for i in 0..k {
                    let x: [u64; MR] = std::array::from_fn(|r| xs[r][i]);
                    let y: [u64; NR] = std::array::from_fn(|c| ys[c][i]);
                    for r in 0..MR {
                        for c in 0..NR {
                            acc[r][c] += (x[r] ^ y[c]).count_ones();
                        }
                    }
                }
                for r in 0..MR {
                    for c in 0..NR {
                        out[(r0 + r) * cols + c0 + c] = acc[r][c] as i32;
                    }
                }
            }
            for c in full_cols_end..c_end {
                let y = &w[c * k..(c + 1) * k];
                for r in 0..MR {
                    out[(r0 + r) * cols + c] = dot(xs[r], y) as i32;
                }
            }
        }
        for r in full_rows..rows {
            let x = &a[r * k..(r + 1) * k];
            for c in c_tile..c_end {
                out[r * cols + c] = dot(x, &w[c * k..(c + 1) * k]) as i32;
            }
        }
    }
}
