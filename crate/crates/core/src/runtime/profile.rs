//! Per-op timing results.

use crate::graph::OpKind;

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileRecord {
    pub node: String,
    pub kind: OpKind,
    /// Position in execution order.
    pub layer: usize,
    pub median_us: f64,
    /// Share of the summed op medians, in percent.
    pub pct: f64,
    /// Median of the im2col + GEMM phase (binary convolutions only).
    pub accumulate_us: Option<f64>,
    /// Median of the output transform phase (binary convolutions only).
    pub transform_us: Option<f64>,
    pub bytes_read: usize,
    pub bytes_written: usize,
    pub macs_binary: u64,
    pub macs_float: u64,
}

/// Coarse buckets used to summarize where time goes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    Quantize,
    BConvAccumulate,
    BConvTransform,
    FloatConv,
    Add,
    Other,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::Quantize,
        Category::BConvAccumulate,
        Category::BConvTransform,
        Category::FloatConv,
        Category::Add,
        Category::Other,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Category::Quantize => "Quantize",
            Category::BConvAccumulate => "BConv accumulation",
            Category::BConvTransform => "BConv output transform",
            Category::FloatConv => "Float Conv2D",
            Category::Add => "Add",
            Category::Other => "Other",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    pub records: Vec<ProfileRecord>,
    /// Median wall time of a whole execution.
    pub end_to_end_us: f64,
    pub runs: usize,
}

impl Profile {
    pub fn total_op_us(&self) -> f64 {
        self.records.iter().map(|r| r.median_us).sum()
    }

    /// Percentage of summed op time per category. A binary convolution's
    /// median is split between its two phases in proportion to their
    /// medians.
    pub fn categories(&self) -> Vec<(Category, f64)> {
        let mut us = [0.0f64; 6];
        for r in &self.records {
            match r.kind {
                OpKind::Quantize => us[0] += r.median_us,
                OpKind::BConv2D => {
                    let a = r.accumulate_us.unwrap_or(0.0);
                    let t = r.transform_us.unwrap_or(0.0);
                    let share = if a + t > 0.0 { a / (a + t) } else { 1.0 };
                    us[1] += r.median_us * share;
                    us[2] += r.median_us * (1.0 - share);
                }
                OpKind::Conv2D => us[3] += r.median_us,
                OpKind::Add => us[4] += r.median_us,
                _ => us[5] += r.median_us,
            }
        }
        let total: f64 = us.iter().sum();
        Category::ALL
            .iter()
            .zip(us)
            .map(|(&c, v)| (c, if total > 0.0 { v / total * 100.0 } else { 0.0 }))
            .collect()
    }

    pub fn category_pct(&self, category: Category) -> f64 {
        self.categories()
            .into_iter()
            .find(|(c, _)| *c == category)
            .map_or(0.0, |(_, p)| p)
    }
}
