//! Structured-text (JSON) form of a graph.

use std::collections::{HashMap, HashSet};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{is_false, DType, Graph, GraphError, Node, Op, OpKind, TensorData, TensorDef, TensorId};
use crate::bitpack::Shape;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGraph {
    version: u32,
    tensors: Vec<RawTensor>,
    nodes: Vec<RawNode>,
    inputs: Vec<TensorId>,
    outputs: Vec<TensorId>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTensor {
    id: TensorId,
    dtype: DType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    shape: Option<Shape>,
    #[serde(default, skip_serializing_if = "is_false")]
    binary: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    data: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNode {
    id: String,
    op: String,
    inputs: Vec<TensorId>,
    outputs: Vec<TensorId>,
    #[serde(default)]
    attrs: Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NoAttrs {}

fn typed<T: serde::de::DeserializeOwned>(attrs: Value) -> Result<T, String> {
    let attrs = if attrs.is_null() {
        Value::Object(Default::default())
    } else {
        attrs
    };
    serde_json::from_value(attrs).map_err(|e| format!("bad attributes: {e}"))
}

fn parse_op(kind: OpKind, attrs: Value) -> Result<Op, String> {
    Ok(match kind {
        OpKind::Sign => typed::<NoAttrs>(attrs).map(|_| Op::Sign)?,
        OpKind::Conv2D => Op::Conv2D(typed(attrs)?),
        OpKind::BConv2D => Op::BConv2D(typed(attrs)?),
        OpKind::BMaxPool2D => Op::BMaxPool2D(typed(attrs)?),
        OpKind::MaxPool2D => Op::MaxPool2D(typed(attrs)?),
        OpKind::BatchNorm => Op::BatchNorm(typed(attrs)?),
        OpKind::ReLU => Op::ReLU(typed(attrs)?),
        OpKind::Add => typed::<NoAttrs>(attrs).map(|_| Op::Add)?,
        OpKind::Dense => Op::Dense(typed(attrs)?),
        OpKind::GlobalAvgPool => typed::<NoAttrs>(attrs).map(|_| Op::GlobalAvgPool)?,
        OpKind::Quantize => typed::<NoAttrs>(attrs).map(|_| Op::Quantize)?,
        OpKind::Dequantize => typed::<NoAttrs>(attrs).map(|_| Op::Dequantize)?,
    })
}

fn op_attrs(op: &Op) -> Value {
    let v = match op {
        Op::Conv2D(a) => serde_json::to_value(a),
        Op::BConv2D(a) => serde_json::to_value(a),
        Op::BMaxPool2D(a) | Op::MaxPool2D(a) => serde_json::to_value(a),
        Op::BatchNorm(a) => serde_json::to_value(a),
        Op::ReLU(a) => serde_json::to_value(a),
        Op::Dense(a) => serde_json::to_value(a),
        Op::Sign | Op::Add | Op::GlobalAvgPool | Op::Quantize | Op::Dequantize => serde_json::to_value(NoAttrs {}),
    };
    v.expect("attributes serialize")
}

/// Parses a graph document and checks its structure (references, single
/// producers, acyclicity) without running shape inference.
pub fn parse_unvalidated(text: &str) -> Result<Graph, GraphError> {
    let mut graph = parse_document(text)?;
    check_structure(&graph)?;
    graph.sort()?;
    Ok(graph)
}

/// Parses a document into a graph without any cross-reference checks.
pub(crate) fn parse_document(text: &str) -> Result<Graph, GraphError> {
    let raw: RawGraph = serde_json::from_str(text).map_err(|e| GraphError::Schema(e.to_string()))?;
    if raw.version != SCHEMA_VERSION {
        return Err(GraphError::Schema(format!(
            "unsupported version {} (expected {SCHEMA_VERSION})",
            raw.version
        )));
    }
    let mut graph = Graph::default();
    for t in raw.tensors {
        let data = match t.data {
            None => None,
            Some(b64) => {
                let bytes = BASE64.decode(b64.as_bytes()).map_err(|e| GraphError::Tensor {
                    tensor: t.id,
                    reason: format!("bad base64 payload: {e}"),
                })?;
                Some(
                    TensorData::from_le_bytes(t.dtype, &bytes).ok_or_else(|| GraphError::Tensor {
                        tensor: t.id,
                        reason: format!("payload of {} bytes is not a whole number of elements", bytes.len()),
                    })?,
                )
            }
        };
        let def = TensorDef {
            id: t.id,
            dtype: t.dtype,
            shape: t.shape,
            binary: t.binary,
            data,
        };
        if graph.tensors.insert(t.id, def).is_some() {
            return Err(GraphError::Tensor {
                tensor: t.id,
                reason: "defined twice".into(),
            });
        }
    }
    let mut node_ids = HashSet::new();
    for n in raw.nodes {
        if !node_ids.insert(n.id.clone()) {
            return Err(GraphError::Node {
                node: n.id,
                reason: "duplicate node id".into(),
            });
        }
        let kind = OpKind::from_name(&n.op).ok_or_else(|| GraphError::Node {
            node: n.id.clone(),
            reason: format!("unknown op `{}`", n.op),
        })?;
        let op = parse_op(kind, n.attrs).map_err(|reason| GraphError::Node {
            node: n.id.clone(),
            reason,
        })?;
        graph.nodes.push(Node {
            id: n.id,
            op,
            inputs: n.inputs,
            outputs: n.outputs,
        });
    }
    graph.inputs = raw.inputs;
    graph.outputs = raw.outputs;
    Ok(graph)
}

/// Parses and fully validates a graph document; shapes of all tensors are
/// inferred.
pub fn parse_training_graph(text: &str) -> Result<Graph, GraphError> {
    let mut graph = parse_unvalidated(text)?;
    graph.check()?;
    Ok(graph)
}

pub(crate) fn check_structure(graph: &Graph) -> Result<(), GraphError> {
    let mut producer: HashMap<TensorId, &str> = HashMap::new();
    for n in &graph.nodes {
        for &t in n.inputs.iter().chain(&n.outputs) {
            if !graph.tensors.contains_key(&t) {
                return Err(GraphError::Node {
                    node: n.id.clone(),
                    reason: format!("dangling tensor id {t}"),
                });
            }
        }
        for &t in &n.outputs {
            if let Some(prev) = producer.insert(t, &n.id) {
                return Err(GraphError::Node {
                    node: n.id.clone(),
                    reason: format!("tensor {t} is also produced by `{prev}`"),
                });
            }
            if graph.tensors[&t].is_constant() || graph.inputs.contains(&t) {
                return Err(GraphError::Node {
                    node: n.id.clone(),
                    reason: format!("writes to constant or graph input {t}"),
                });
            }
        }
    }
    for n in &graph.nodes {
        for &t in &n.inputs {
            if !producer.contains_key(&t) && !graph.tensors[&t].is_constant() && !graph.inputs.contains(&t) {
                return Err(GraphError::Node {
                    node: n.id.clone(),
                    reason: format!("input tensor {t} has no producer"),
                });
            }
        }
    }
    for &t in graph.inputs.iter().chain(&graph.outputs) {
        if !graph.tensors.contains_key(&t) {
            return Err(GraphError::Tensor {
                tensor: t,
                reason: "graph boundary refers to an undefined tensor".into(),
            });
        }
    }
    for &t in &graph.outputs {
        if !producer.contains_key(&t) && !graph.inputs.contains(&t) && !graph.tensors[&t].is_constant() {
            return Err(GraphError::Tensor {
                tensor: t,
                reason: "graph output has no producer".into(),
            });
        }
    }
    Ok(())
}

impl Graph {
    fn to_raw(&self, with_data: bool) -> RawGraph {
        RawGraph {
            version: SCHEMA_VERSION,
            tensors: self
                .tensors
                .values()
                .map(|t| RawTensor {
                    id: t.id,
                    dtype: t.dtype,
                    shape: t.shape,
                    binary: t.binary,
                    data: if with_data {
                        t.data.as_ref().map(|d| BASE64.encode(d.to_le_bytes()))
                    } else {
                        None
                    },
                })
                .collect(),
            nodes: self
                .nodes
                .iter()
                .map(|n| RawNode {
                    id: n.id.clone(),
                    op: n.kind().name().to_string(),
                    inputs: n.inputs.clone(),
                    outputs: n.outputs.clone(),
                    attrs: op_attrs(&n.op),
                })
                .collect(),
            inputs: self.inputs.clone(),
            outputs: self.outputs.clone(),
        }
    }

    /// Serializes the graph, constants included, as a JSON document.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_raw(true)).expect("graph serializes")
    }

    /// Compact JSON without constant payloads.
    pub fn to_json_structure(&self) -> String {
        serde_json::to_string(&self.to_raw(false)).expect("graph serializes")
    }
}
