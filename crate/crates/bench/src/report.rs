//! CSV and text output for profiles, pass reports and tensors.

use std::io::Write;

use anyhow::{ensure, Result};
use binconv_core::bitpack::{FloatTensor, Shape};
use binconv_core::converter::PassReport;
use binconv_core::runtime::{Category, Profile};
use serde::{Deserialize, Serialize};

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ProfileRow {
    pub op: String,
    pub kind: String,
    pub layer: usize,
    pub median_us: f64,
    pub pct: f64,
    pub macs_binary: u64,
    pub macs_float: u64,
}

pub fn write_profile_csv(profile: &Profile, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in &profile.records {
        w.serialize(ProfileRow {
            op: r.node.clone(),
            kind: r.kind.name().to_string(),
            layer: r.layer,
            median_us: r.median_us,
            pct: r.pct,
            macs_binary: r.macs_binary,
            macs_float: r.macs_float,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_profile_csv(input: impl std::io::Read) -> Result<Vec<ProfileRow>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(Into::into))
        .collect()
}

/// Category breakdown plus the binary convolution phase split.
pub fn format_profile(profile: &Profile) -> String {
    let mut out = format!(
        "{} ops, end-to-end median {:.1} us over {} runs (sum of op medians {:.1} us)\n",
        profile.records.len(),
        profile.end_to_end_us,
        profile.runs,
        profile.total_op_us()
    );
    for (c, pct) in profile.categories() {
        out += &format!("  {:<24} {:>6.2} %\n", c.label(), pct);
    }
    let (acc, tr): (f64, f64) = profile
        .records
        .iter()
        .filter_map(|r| Some((r.accumulate_us?, r.transform_us?)))
        .fold((0.0, 0.0), |(a, t), (x, y)| (a + x, t + y));
    if acc + tr > 0.0 {
        out += &format!(
            "  BConv2D phases: accumulation {:.1} us, output transform {:.1} us\n",
            acc, tr
        );
    }
    let largest = profile
        .categories()
        .into_iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(c, _)| c)
        .unwrap_or(Category::Other);
    out += &format!("  largest category: {}\n", largest.label());
    out
}

pub fn format_reports(reports: &[PassReport]) -> String {
    let mut out = String::new();
    for r in reports {
        let status = match r.verified {
            Some(true) => "verified",
            Some(false) => "MISMATCH",
            None => "unverified",
        };
        out += &format!(
            "{:<18} -{} +{} ~{}  {}\n",
            r.pass,
            r.removed.len(),
            r.added.len(),
            r.modified.len(),
            status
        );
        for s in &r.skipped {
            out += &format!("    skipped `{}`: {}\n", s.node, s.reason);
        }
    }
    out
}

/// Tensor as stored in input and output JSON files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorFile {
    pub shape: [usize; 4],
    pub data: Vec<f32>,
}

impl TensorFile {
    pub fn from_tensor(t: &FloatTensor) -> Self {
        let s = t.shape();
        TensorFile {
            shape: [s.batch, s.height, s.width, s.channels],
            data: t.data().to_vec(),
        }
    }

    pub fn into_tensor(self) -> Result<FloatTensor> {
        let [n, h, w, c] = self.shape;
        let shape = Shape::new(n, h, w, c);
        ensure!(
            shape.elements() == self.data.len(),
            "tensor of shape {shape} needs {} values, file has {}",
            shape.elements(),
            self.data.len()
        );
        Ok(FloatTensor::new(shape, self.data))
    }
}
