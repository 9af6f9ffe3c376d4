//! Operator graph shared by training-graph ingestion, converter passes and
//! the runtime.

mod builder;
mod schema;
mod validate;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

pub use builder::GraphBuilder;
pub(crate) use schema::parse_document;
pub use schema::{parse_training_graph, parse_unvalidated};
pub use validate::Diagnostic;

use crate::bitpack::Shape;
use crate::kernels::float::BatchNormParams;
use crate::kernels::{Activation, OutputKind, Padding, PaddingMode};

pub type TensorId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DType {
    F32,
    Bitpacked,
    I32,
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DType::F32 => "f32",
            DType::Bitpacked => "bitpacked",
            DType::I32 => "i32",
        })
    }
}

/// Constant payload. Bitpacked constants are stored as packed words.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    Words(Vec<u32>),
    I32(Vec<i32>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::Words(_) => DType::Bitpacked,
            TensorData::I32(_) => DType::I32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::Words(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn byte_len(&self) -> usize {
        self.len() * 4
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        match self {
            TensorData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::Words(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            TensorData::I32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
        }
    }

    pub fn from_le_bytes(dtype: DType, bytes: &[u8]) -> Option<Self> {
        if !bytes.len().is_multiple_of(4) {
            return None;
        }
        let words = bytes.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]);
        Some(match dtype {
            DType::F32 => TensorData::F32(words.map(f32::from_le_bytes).collect()),
            DType::Bitpacked => TensorData::Words(words.map(u32::from_le_bytes).collect()),
            DType::I32 => TensorData::I32(words.map(i32::from_le_bytes).collect()),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorDef {
    pub id: TensorId,
    pub dtype: DType,
    /// Logical NHWC shape; for bitpacked tensors the channel count is the
    /// number of valid channels.
    pub shape: Option<Shape>,
    /// Marks float weights that hold binarized (±1) values.
    pub binary: bool,
    pub data: Option<TensorData>,
}

impl TensorDef {
    pub fn new(id: TensorId, dtype: DType, shape: Option<Shape>) -> Self {
        TensorDef {
            id,
            dtype,
            shape,
            binary: false,
            data: None,
        }
    }

    pub fn is_constant(&self) -> bool {
        self.data.is_some()
    }

    pub fn f32_data(&self) -> Option<&[f32]> {
        match &self.data {
            Some(TensorData::F32(v)) => Some(v),
            _ => None,
        }
    }

    pub fn words(&self) -> Option<&[u32]> {
        match &self.data {
            Some(TensorData::Words(v)) => Some(v),
            _ => None,
        }
    }

    pub fn i32_data(&self) -> Option<&[i32]> {
        match &self.data {
            Some(TensorData::I32(v)) => Some(v),
            _ => None,
        }
    }

    /// Number of stored elements (words for bitpacked tensors) implied by
    /// the shape.
    pub fn storage_len(&self) -> Option<usize> {
        self.shape.map(|s| match self.dtype {
            DType::Bitpacked => s.packed_words(),
            _ => s.elements(),
        })
    }

    pub fn byte_size(&self) -> Option<usize> {
        self.storage_len().map(|n| n * 4)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadValue {
    #[default]
    Zero,
    One,
}

impl PadValue {
    pub fn value(self) -> f32 {
        match self {
            PadValue::Zero => 0.0,
            PadValue::One => 1.0,
        }
    }
}

fn unit_stride() -> [usize; 2] {
    [1, 1]
}

fn valid() -> Padding {
    Padding::Valid
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conv2dAttrs {
    #[serde(default = "unit_stride")]
    pub stride: [usize; 2],
    #[serde(default = "valid")]
    pub padding: Padding,
    #[serde(default)]
    pub pad_value: PadValue,
    #[serde(default, skip_serializing_if = "is_false")]
    pub depthwise: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub multiplier: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<Vec<f32>>,
}

impl Default for Conv2dAttrs {
    fn default() -> Self {
        Conv2dAttrs {
            stride: [1, 1],
            padding: Padding::Valid,
            pad_value: PadValue::Zero,
            depthwise: false,
            multiplier: None,
            bias: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BConvAttrs {
    #[serde(default = "unit_stride")]
    pub stride: [usize; 2],
    pub padding: PaddingMode,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub multiplier: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<Vec<f32>>,
    #[serde(default)]
    pub output: OutputKind,
}

impl BConvAttrs {
    pub fn new(padding: PaddingMode) -> Self {
        BConvAttrs {
            stride: [1, 1],
            padding,
            activation: Activation::None,
            multiplier: None,
            bias: None,
            output: OutputKind::Float,
        }
    }

    pub fn multiplier_or_one(&self, channels: usize) -> Vec<f32> {
        self.multiplier.clone().unwrap_or_else(|| vec![1.0; channels])
    }

    pub fn bias_or_zero(&self, channels: usize) -> Vec<f32> {
        self.bias.clone().unwrap_or_else(|| vec![0.0; channels])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolAttrs {
    pub window: [usize; 2],
    pub stride: [usize; 2],
    #[serde(default = "valid")]
    pub padding: Padding,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReluAttrs {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cap: Option<f32>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseAttrs {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<Vec<f32>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Sign,
    Conv2D,
    BConv2D,
    BMaxPool2D,
    MaxPool2D,
    BatchNorm,
    ReLU,
    Add,
    Dense,
    GlobalAvgPool,
    Quantize,
    Dequantize,
}

impl OpKind {
    pub const ALL: [OpKind; 12] = [
        OpKind::Sign,
        OpKind::Conv2D,
        OpKind::BConv2D,
        OpKind::BMaxPool2D,
        OpKind::MaxPool2D,
        OpKind::BatchNorm,
        OpKind::ReLU,
        OpKind::Add,
        OpKind::Dense,
        OpKind::GlobalAvgPool,
        OpKind::Quantize,
        OpKind::Dequantize,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Sign => "Sign",
            OpKind::Conv2D => "Conv2D",
            OpKind::BConv2D => "BConv2D",
            OpKind::BMaxPool2D => "BMaxPool2D",
            OpKind::MaxPool2D => "MaxPool2D",
            OpKind::BatchNorm => "BatchNorm",
            OpKind::ReLU => "ReLU",
            OpKind::Add => "Add",
            OpKind::Dense => "Dense",
            OpKind::GlobalAvgPool => "GlobalAvgPool",
            OpKind::Quantize => "Quantize",
            OpKind::Dequantize => "Dequantize",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Sign,
    Conv2D(Conv2dAttrs),
    BConv2D(BConvAttrs),
    BMaxPool2D(PoolAttrs),
    MaxPool2D(PoolAttrs),
    BatchNorm(BatchNormParams),
    ReLU(ReluAttrs),
    Add,
    Dense(DenseAttrs),
    GlobalAvgPool,
    Quantize,
    Dequantize,
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Sign => OpKind::Sign,
            Op::Conv2D(_) => OpKind::Conv2D,
            Op::BConv2D(_) => OpKind::BConv2D,
            Op::BMaxPool2D(_) => OpKind::BMaxPool2D,
            Op::MaxPool2D(_) => OpKind::MaxPool2D,
            Op::BatchNorm(_) => OpKind::BatchNorm,
            Op::ReLU(_) => OpKind::ReLU,
            Op::Add => OpKind::Add,
            Op::Dense(_) => OpKind::Dense,
            Op::GlobalAvgPool => OpKind::GlobalAvgPool,
            Op::Quantize => OpKind::Quantize,
            Op::Dequantize => OpKind::Dequantize,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: String,
    pub op: Op,
    pub inputs: Vec<TensorId>,
    pub outputs: Vec<TensorId>,
}

impl Node {
    pub fn kind(&self) -> OpKind {
        self.op.kind()
    }

    /// The single output tensor every op in the set produces.
    pub fn output(&self) -> TensorId {
        self.outputs[0]
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("node `{node}`: {reason}")]
    Node { node: String, reason: String },
    #[error("tensor {tensor}: {reason}")]
    Tensor { tensor: TensorId, reason: String },
    #[error("cycle through nodes {}", .0.join(" -> "))]
    Cycle(Vec<String>),
    #[error("invalid graph: {}", .0.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Diagnostic>),
}

/// A directed acyclic operator graph. `nodes` is kept in topological order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Graph {
    pub tensors: BTreeMap<TensorId, TensorDef>,
    pub nodes: Vec<Node>,
    pub inputs: Vec<TensorId>,
    pub outputs: Vec<TensorId>,
}

impl Graph {
    pub fn tensor(&self, id: TensorId) -> &TensorDef {
        &self.tensors[&id]
    }

    pub fn tensor_mut(&mut self, id: TensorId) -> &mut TensorDef {
        self.tensors.get_mut(&id).expect("tensor exists")
    }

    pub fn shape(&self, id: TensorId) -> Shape {
        self.tensors[&id].shape.expect("shapes are inferred")
    }

    pub fn next_tensor_id(&self) -> TensorId {
        self.tensors.keys().next_back().map_or(0, |id| id + 1)
    }

    pub fn is_output(&self, id: TensorId) -> bool {
        self.outputs.contains(&id)
    }

    /// Node index producing each tensor.
    pub fn producers(&self) -> HashMap<TensorId, usize> {
        let mut map = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            for &o in &n.outputs {
                map.insert(o, i);
            }
        }
        map
    }

    /// Node indices consuming each tensor, in node order.
    pub fn consumers(&self) -> HashMap<TensorId, Vec<usize>> {
        let mut map: HashMap<TensorId, Vec<usize>> = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            for &t in &n.inputs {
                let v = map.entry(t).or_default();
                if v.last() != Some(&i) {
                    v.push(i);
                }
            }
        }
        map
    }

    pub fn count(&self, kind: OpKind) -> usize {
        self.nodes.iter().filter(|n| n.kind() == kind).count()
    }

    pub fn unique_node_id(&self, base: &str) -> String {
        let taken: HashSet<&str> = self.nodes.iter().map(|n| n.id.as_str()).collect();
        if !taken.contains(base) {
            return base.to_string();
        }
        (1..)
            .map(|i| format!("{base}_{i}"))
            .find(|c| !taken.contains(c.as_str()))
            .unwrap()
    }

    /// Drops tensors no node or graph boundary refers to.
    pub fn prune_tensors(&mut self) {
        let mut used: HashSet<TensorId> = self.inputs.iter().chain(&self.outputs).copied().collect();
        for n in &self.nodes {
            used.extend(n.inputs.iter().chain(&n.outputs));
        }
        self.tensors.retain(|id, _| used.contains(id));
    }

    /// Reorders nodes topologically, keeping the existing order among
    /// independent nodes.
    pub fn sort(&mut self) -> Result<(), GraphError> {
        let producers = self.producers();
        let n = self.nodes.len();
        let mut indegree = vec![0usize; n];
        let mut users: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, node) in self.nodes.iter().enumerate() {
            for t in &node.inputs {
                if let Some(&p) = producers.get(t) {
                    indegree[i] += 1;
                    users[p].push(i);
                }
            }
        }
        let mut ready: std::collections::BTreeSet<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for &u in &users[i] {
                indegree[u] -= 1;
                if indegree[u] == 0 {
                    ready.insert(u);
                }
            }
        }
        if order.len() != n {
            return Err(GraphError::Cycle(self.find_cycle(&indegree, &producers)));
        }
        let mut slots: Vec<Option<Node>> = std::mem::take(&mut self.nodes).into_iter().map(Some).collect();
        self.nodes = order.into_iter().map(|i| slots[i].take().unwrap()).collect();
        Ok(())
    }

    fn find_cycle(&self, indegree: &[usize], producers: &HashMap<TensorId, usize>) -> Vec<String> {
        // Walk backwards through unresolved producers until a node repeats.
        let start = indegree.iter().position(|&d| d > 0).unwrap();
        let mut path = vec![start];
        let mut seen = HashMap::from([(start, 0usize)]);
        let mut cur = start;
        loop {
            let next = self.nodes[cur]
                .inputs
                .iter()
                .filter_map(|t| producers.get(t).copied())
                .find(|&p| indegree[p] > 0)
                .expect("unresolved node has an unresolved producer");
            if let Some(&pos) = seen.get(&next) {
                let mut cycle: Vec<String> = path[pos..].iter().rev().map(|&i| self.nodes[i].id.clone()).collect();
                cycle.push(cycle[0].clone());
                return cycle;
            }
            seen.insert(next, path.len());
            path.push(next);
            cur = next;
        }
    }
}
