//! Training graph to inference model conversion.
//!
//! The pipeline is fixed: binarize, fold_batchnorm, reorder_maxpool,
//! fuse_binary_chain, legalize_padding, pack_weights. With verification
//! enabled every pass is checked against its input graph with the float
//! oracle on seeded random probes.

mod passes;

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bitpack::FloatTensor;
use crate::graph::{DType, Graph, GraphError, Node, TensorData};
use crate::model::write_model;
use crate::runtime::{run_oracle, RuntimeError};

/// Absolute tolerance for float outputs during verification.
pub const VERIFY_TOLERANCE: f32 = 1e-4;
/// Random inputs per verified pass.
pub const VERIFY_PROBES: usize = 16;

pub const PASSES: [&str; 6] = [
    "binarize",
    "fold_batchnorm",
    "reorder_maxpool",
    "fuse_binary_chain",
    "legalize_padding",
    "pack_weights",
];

type PassFn = fn(&mut Graph, &mut Vec<Skipped>) -> Result<(), PassFailure>;

const PIPELINE: [PassFn; 6] = [
    passes::binarize,
    passes::fold_batchnorm,
    passes::reorder_maxpool,
    passes::fuse_binary_chain,
    passes::legalize_padding,
    passes::pack_weights,
];

#[derive(Debug)]
pub(crate) struct PassFailure {
    node: String,
    reason: String,
}

/// A node a pass matched but left alone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Skipped {
    pub node: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PassReport {
    pub pass: &'static str,
    pub removed: Vec<String>,
    pub added: Vec<String>,
    pub modified: Vec<String>,
    pub skipped: Vec<Skipped>,
    /// `Some(true)` once the pass has been checked against the oracle;
    /// `None` when verification is off.
    pub verified: Option<bool>,
}

impl PassReport {
    pub fn changed(&self) -> bool {
        !(self.removed.is_empty() && self.added.is_empty() && self.modified.is_empty())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConvertOptions {
    pub verify: bool,
    /// Seed for the verification probes.
    pub seed: u64,
    /// Corrupts the graph right after the named pass. Test hook.
    #[doc(hidden)]
    pub fault_after: Option<&'static str>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConvertError {
    #[error("input graph: {0}")]
    Input(GraphError),
    #[error("pass {pass}: node `{node}`: {reason}")]
    Pass {
        pass: &'static str,
        node: String,
        reason: String,
    },
    #[error("pass {pass} produced an invalid graph: {source}")]
    Invalid { pass: &'static str, source: GraphError },
    #[error("pass {pass}: oracle failed: {source}")]
    Oracle { pass: &'static str, source: RuntimeError },
    #[error("pass {pass} changed the graph's results: {detail}")]
    VerificationFailed { pass: &'static str, detail: String },
}

/// Converted graph plus per-pass reports.
#[derive(Debug, Clone)]
pub struct Conversion {
    pub graph: Graph,
    pub reports: Vec<PassReport>,
}

impl Conversion {
    /// The serialized model file.
    pub fn to_bytes(&self) -> Vec<u8> {
        write_model(&self.graph)
    }
}

/// Runs the pass pipeline over a training graph (or an already converted
/// one, which comes back unchanged).
pub fn convert(graph: &Graph, options: &ConvertOptions) -> Result<Conversion, ConvertError> {
    let mut current = graph.clone();
    current.check().map_err(ConvertError::Input)?;
    let probes = if options.verify {
        probes(&current, options.seed)
    } else {
        Vec::new()
    };
    let mut reports = Vec::with_capacity(PASSES.len());
    for (&pass, run) in PASSES.iter().zip(PIPELINE) {
        let mut next = current.clone();
        let mut skipped = Vec::new();
        run(&mut next, &mut skipped).map_err(|f| ConvertError::Pass {
            pass,
            node: f.node,
            reason: f.reason,
        })?;
        next.prune_tensors();
        if options.fault_after == Some(pass) {
            inject_fault(&mut next);
        }
        next.check().map_err(|source| ConvertError::Invalid { pass, source })?;
        let verified = if options.verify {
            verify(pass, &current, &next, &probes)?;
            Some(true)
        } else {
            None
        };
        let (removed, added, modified) = diff(&current, &next);
        reports.push(PassReport {
            pass,
            removed,
            added,
            modified,
            skipped,
            verified,
        });
        current = next;
    }
    Ok(Conversion {
        graph: current,
        reports,
    })
}

fn diff(before: &Graph, after: &Graph) -> (Vec<String>, Vec<String>, Vec<String>) {
    let a: BTreeMap<&str, &Node> = before.nodes.iter().map(|n| (n.id.as_str(), n)).collect();
    let b: BTreeMap<&str, &Node> = after.nodes.iter().map(|n| (n.id.as_str(), n)).collect();
    let ids: BTreeSet<&str> = a.keys().chain(b.keys()).copied().collect();
    let (mut removed, mut added, mut modified) = (Vec::new(), Vec::new(), Vec::new());
    for id in ids {
        match (a.get(id), b.get(id)) {
            (Some(_), None) => removed.push(id.to_string()),
            (None, Some(_)) => added.push(id.to_string()),
            (Some(x), Some(y)) if x != y || weights_changed(before, after, x) => modified.push(id.to_string()),
            _ => {}
        }
    }
    (removed, added, modified)
}

fn weights_changed(before: &Graph, after: &Graph, node: &Node) -> bool {
    node.inputs
        .iter()
        .any(|t| before.tensors.get(t).map(|d| &d.data) != after.tensors.get(t).map(|d| &d.data))
}

fn probes(graph: &Graph, seed: u64) -> Vec<Vec<FloatTensor>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..VERIFY_PROBES)
        .map(|_| {
            graph
                .inputs
                .iter()
                .map(|&t| {
                    let s = graph.shape(t);
                    FloatTensor::new(s, (0..s.elements()).map(|_| rng.gen_range(-1.0..=1.0)).collect())
                })
                .collect()
        })
        .collect()
}

fn verify(pass: &'static str, before: &Graph, after: &Graph, probes: &[Vec<FloatTensor>]) -> Result<(), ConvertError> {
    let oracle =
        |g: &Graph, x: &[FloatTensor]| run_oracle(g, x).map_err(|source| ConvertError::Oracle { pass, source });
    for (p, x) in probes.iter().enumerate() {
        let want = oracle(before, x)?;
        let got = oracle(after, x)?;
        for (o, (w, g)) in want.iter().zip(&got).enumerate() {
            let exact = before.tensor(before.outputs[o]).dtype == DType::Bitpacked
                || after.tensor(after.outputs[o]).dtype == DType::Bitpacked;
            let tol = if exact { 0.0 } else { VERIFY_TOLERANCE };
            let bad = w
                .data()
                .iter()
                .zip(g.data())
                .enumerate()
                .map(|(i, (a, b))| (i, (a - b).abs()))
                .find(|&(_, d)| d > tol || d.is_nan());
            if let Some((i, d)) = bad {
                return Err(ConvertError::VerificationFailed {
                    pass,
                    detail: format!("probe {p}, output {o}, element {i} differs by {d}"),
                });
            }
        }
    }
    Ok(())
}

/// Corrupts the lowest-id constant so that results change.
fn inject_fault(g: &mut Graph) {
    if let Some(def) = g.tensors.values_mut().find(|t| t.data.is_some()) {
        match def.data.as_mut().unwrap() {
            TensorData::F32(v) => v.iter_mut().for_each(|x| *x = -*x),
            TensorData::Words(w) => w[0] ^= 1,
            TensorData::I32(v) => v[0] += 1,
        }
    }
}
