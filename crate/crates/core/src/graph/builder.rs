use std::collections::HashMap;

use super::{DType, Graph, GraphError, Node, Op, OpKind, TensorData, TensorDef, TensorId};
use crate::bitpack::Shape;
use crate::kernels::OutputKind;

/// Incremental graph construction with automatic tensor and node ids.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    graph: Graph,
    counters: HashMap<OpKind, usize>,
}

fn output_dtype(op: &Op) -> DType {
    match op {
        Op::Quantize | Op::BMaxPool2D(_) => DType::Bitpacked,
        Op::BConv2D(a) if matches!(a.output, OutputKind::Bitpacked(_)) => DType::Bitpacked,
        _ => DType::F32,
    }
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn tensor(&mut self, def: TensorDef) -> TensorId {
        let id = def.id;
        self.graph.tensors.insert(id, def);
        id
    }

    pub fn input(&mut self, shape: Shape) -> TensorId {
        let id = self.graph.next_tensor_id();
        self.graph.inputs.push(id);
        self.tensor(TensorDef::new(id, DType::F32, Some(shape)))
    }

    pub fn constant(&mut self, shape: Shape, data: TensorData) -> TensorId {
        let id = self.graph.next_tensor_id();
        let mut def = TensorDef::new(id, data.dtype(), Some(shape));
        def.data = Some(data);
        self.tensor(def)
    }

    pub fn constant_f32(&mut self, shape: Shape, data: Vec<f32>) -> TensorId {
        self.constant(shape, TensorData::F32(data))
    }

    /// Float weights flagged as binarized.
    pub fn binary_weights(&mut self, shape: Shape, data: Vec<f32>) -> TensorId {
        let id = self.constant_f32(shape, data);
        self.graph.tensor_mut(id).binary = true;
        id
    }

    /// Appends a node and returns its output tensor.
    pub fn node(&mut self, op: Op, inputs: &[TensorId]) -> TensorId {
        let dtype = output_dtype(&op);
        self.node_unchecked(op, inputs, dtype)
    }

    /// Appends a node with an explicit output dtype, which may disagree with
    /// the op's signature.
    pub fn node_unchecked(&mut self, op: Op, inputs: &[TensorId], dtype: DType) -> TensorId {
        let kind = op.kind();
        let n = self.counters.entry(kind).or_insert(0);
        let id = format!("{}_{}", kind.name().to_lowercase(), n);
        *n += 1;
        let out = self.graph.next_tensor_id();
        self.tensor(TensorDef::new(out, dtype, None));
        self.graph.nodes.push(Node {
            id,
            op,
            inputs: inputs.to_vec(),
            outputs: vec![out],
        });
        out
    }

    pub fn output(&mut self, t: TensorId) {
        self.graph.outputs.push(t);
    }

    /// Sorts, type-checks and shape-infers the graph.
    pub fn finish(self) -> Result<Graph, GraphError> {
        let mut g = self.graph;
        g.check()?;
        Ok(g)
    }

    pub fn finish_unchecked(self) -> Graph {
        self.graph
    }
}
