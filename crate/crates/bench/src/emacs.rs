//! Equivalent MAC counts.

use serde::Serialize;

/// Binary MACs assumed to cost as much as one float MAC.
pub const DEFAULT_FACTOR: f64 = 15.0;

/// `float + binary / factor`.
pub fn emacs(binary_macs: u64, float_macs: u64, factor: f64) -> f64 {
    assert!(factor > 0.0, "eMAC factor must be positive");
    float_macs as f64 + binary_macs as f64 / factor
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EMacRow {
    pub model: String,
    pub binary_macs: u64,
    pub float_macs: u64,
    pub factor: f64,
    pub emacs: f64,
    pub latency_us: f64,
}

impl EMacRow {
    pub fn new(model: String, binary_macs: u64, float_macs: u64, factor: f64, latency_us: f64) -> Self {
        EMacRow {
            model,
            binary_macs,
            float_macs,
            factor,
            emacs: emacs(binary_macs, float_macs, factor),
            latency_us,
        }
    }
}
