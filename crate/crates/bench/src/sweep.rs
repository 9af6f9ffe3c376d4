//! Single-convolution latency sweeps, binary against float.

use std::io::Write;

use anyhow::{ensure, Context, Result};
use binconv_core::converter::{convert, ConvertOptions};
use binconv_core::graph::{OpKind, PadValue};
use binconv_core::runtime::ExecutionPlan;
use serde::{Deserialize, Serialize};

use crate::factory::{single_conv, SingleConv};
use crate::random_inputs;

/// Configs at or above this many MACs enter the regression.
pub const REGRESSION_MIN_MACS: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    Binary,
    Float,
}

/// Grid of stride-1, same-padded square convolutions with equal input and
/// output channel counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub channels: Vec<usize>,
    pub spatial: Vec<usize>,
    pub kernels: Vec<usize>,
    pub precisions: Vec<Precision>,
    pub runs: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            channels: vec![32, 64, 96, 128, 160, 256],
            spatial: vec![8, 16, 32, 64],
            kernels: vec![3, 5],
            precisions: vec![Precision::Binary, Precision::Float],
            runs: 5,
            warmup: 1,
            seed: 0,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            !self.channels.is_empty() && !self.spatial.is_empty() && !self.kernels.is_empty(),
            "sweep grid is empty"
        );
        ensure!(
            self.channels
                .iter()
                .chain(&self.spatial)
                .chain(&self.kernels)
                .all(|&v| v > 0),
            "sweep dimensions must be positive"
        );
        ensure!(!self.precisions.is_empty(), "no precision selected");
        ensure!(self.runs >= 1, "runs must be at least 1");
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub channels: usize,
    pub spatial: usize,
    pub kernel: usize,
    pub macs: u64,
    pub binary_us: Option<f64>,
    pub float_us: Option<f64>,
    pub speedup: Option<f64>,
}

/// Least-squares fit of log10(latency) against log10(MACs).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Regression {
    pub slope: f64,
    pub intercept: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeedupSummary {
    pub mean: f64,
    /// Speedups weighted by float latency.
    pub weighted_mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummary {
    pub speedup: Option<SpeedupSummary>,
    pub binary_fit: Option<Regression>,
    pub float_fit: Option<Regression>,
    pub min_macs: u64,
    pub max_macs: u64,
}

fn conv_latency(spec: SingleConv, config: &SweepConfig, threads: usize) -> Result<f64> {
    let graph = single_conv(spec, config.seed)?;
    let model = convert(&graph, &ConvertOptions::default())?.graph;
    let plan = ExecutionPlan::new(model)?;
    let inputs = random_inputs(&plan, config.seed);
    let profile = plan.profile(&inputs, config.runs, config.warmup, threads)?;
    let kind = if spec.binary { OpKind::BConv2D } else { OpKind::Conv2D };
    profile
        .records
        .iter()
        .find(|r| r.kind == kind)
        .map(|r| r.median_us)
        .context("converted model has no convolution")
}

/// Runs every grid point in every configured precision.
pub fn run_sweep(config: &SweepConfig, threads: usize, mut progress: impl FnMut(&SweepRow)) -> Result<Vec<SweepRow>> {
    config.validate()?;
    let mut rows = Vec::new();
    for &channels in &config.channels {
        for &spatial in &config.spatial {
            for &kernel in &config.kernels {
                let spec = |binary| SingleConv {
                    hw: spatial,
                    in_channels: channels,
                    out_channels: channels,
                    kernel,
                    stride: 1,
                    binary,
                    pad: PadValue::One,
                };
                let mut row = SweepRow {
                    channels,
                    spatial,
                    kernel,
                    macs: (spatial * spatial * kernel * kernel * channels * channels) as u64,
                    binary_us: None,
                    float_us: None,
                    speedup: None,
                };
                for &p in &config.precisions {
                    let us = conv_latency(spec(p == Precision::Binary), config, threads)?;
                    match p {
                        Precision::Binary => row.binary_us = Some(us),
                        Precision::Float => row.float_us = Some(us),
                    }
                }
                if let (Some(b), Some(f)) = (row.binary_us, row.float_us) {
                    row.speedup = Some(f / b);
                }
                progress(&row);
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

pub fn log_log_fit(points: &[(u64, f64)]) -> Option<Regression> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|&&(m, t)| m > 0 && t > 0.0)
        .map(|&(m, t)| ((m as f64).log10(), t.log10()))
        .collect();
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return None;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    Some(Regression {
        slope,
        intercept: my - slope * mx,
        points: pts.len(),
    })
}

pub fn summarize(rows: &[SweepRow]) -> SweepSummary {
    let pairs: Vec<(f64, f64)> = rows.iter().filter_map(|r| Some((r.speedup?, r.float_us?))).collect();
    let speedup = (!pairs.is_empty()).then(|| {
        let n = pairs.len() as f64;
        let weight: f64 = pairs.iter().map(|p| p.1).sum();
        SpeedupSummary {
            mean: pairs.iter().map(|p| p.0).sum::<f64>() / n,
            weighted_mean: pairs.iter().map(|p| p.0 * p.1).sum::<f64>() / weight,
            min: pairs.iter().map(|p| p.0).fold(f64::INFINITY, f64::min),
            max: pairs.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max),
        }
    });
    let fit = |get: fn(&SweepRow) -> Option<f64>| {
        let pts: Vec<(u64, f64)> = rows
            .iter()
            .filter(|r| r.macs >= REGRESSION_MIN_MACS)
            .filter_map(|r| Some((r.macs, get(r)?)))
            .collect();
        log_log_fit(&pts)
    };
    SweepSummary {
        speedup,
        binary_fit: fit(|r| r.binary_us),
        float_fit: fit(|r| r.float_us),
        min_macs: rows.iter().map(|r| r.macs).min().unwrap_or(0),
        max_macs: rows.iter().map(|r| r.macs).max().unwrap_or(0),
    }
}

pub fn write_csv(rows: &[SweepRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(input: impl std::io::Read) -> Result<Vec<SweepRow>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(Into::into))
        .collect()
}

/// Human-readable aggregate table.
pub fn format_summary(s: &SweepSummary) -> String {
    let mut out = format!("MACs range: {} to {}\n", s.min_macs, s.max_macs);
    if let Some(sp) = &s.speedup {
        out += &format!(
            "speedup  mean {:.2}x  weighted mean {:.2}x  range {:.2}x to {:.2}x\n",
            sp.mean, sp.weighted_mean, sp.min, sp.max
        );
    }
    for (name, fit) in [("binary", &s.binary_fit), ("float", &s.float_fit)] {
        if let Some(f) = fit {
            out += &format!(
                "{name:<6} log-log fit over {} configs >= {} MACs: slope {:.3}, intercept {:.3}\n",
                f.points, REGRESSION_MIN_MACS, f.slope, f.intercept
            );
        }
    }
    out
}
