//! Type checking and shape inference.

use std::fmt;

use super::schema::check_structure;
use super::{DType, Graph, GraphError, Node, Op, TensorDef, TensorId};
use crate::bitpack::{BitpackedTensor, Shape};
use crate::kernels::{ConvGeometry, OutputKind, PaddingCorrection, PaddingMode};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub node: Option<String>,
    pub message: String,
}

impl Diagnostic {
    fn node(node: &str, message: impl Into<String>) -> Self {
        Diagnostic {
            node: Some(node.to_string()),
            message: message.into(),
        }
    }

    fn graph(message: impl Into<String>) -> Self {
        Diagnostic {
            node: None,
            message: message.into(),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.node {
            Some(n) => write!(f, "node `{n}`: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

type Inferred = Result<Vec<(DType, Shape)>, String>;

impl Graph {
    /// Checks every type, shape and attribute invariant. An empty result
    /// means the graph is valid.
    pub fn validate(&self) -> Vec<Diagnostic> {
        self.clone().infer_shapes()
    }

    /// Validates and shape-infers in place, failing on any diagnostic.
    pub fn check(&mut self) -> Result<(), GraphError> {
        let diagnostics = self.infer_shapes();
        if diagnostics.is_empty() {
            Ok(())
        } else {
            Err(GraphError::Invalid(diagnostics))
        }
    }

    /// Like [`validate`](Self::validate), annotating every tensor with its
    /// inferred shape.
    pub fn infer_shapes(&mut self) -> Vec<Diagnostic> {
        if let Err(e) = check_structure(self).and_then(|_| self.sort()) {
            return vec![Diagnostic::graph(e.to_string())];
        }
        let mut diags = Vec::new();
        for t in self.tensors.values() {
            check_tensor(t, &mut diags);
        }
        for &i in &self.inputs {
            let t = &self.tensors[&i];
            if t.shape.is_none() {
                diags.push(Diagnostic::graph(format!("graph input {i} has no shape")));
            }
            if t.dtype != DType::F32 || t.is_constant() {
                diags.push(Diagnostic::graph(format!(
                    "graph input {i} must be a non-constant f32 tensor"
                )));
            }
        }
        let clean_inputs = diags.is_empty();
        for idx in 0..self.nodes.len() {
            let node = &self.nodes[idx];
            let unknown = node.inputs.iter().any(|t| self.tensors[t].shape.is_none());
            if unknown && !diags.is_empty() {
                continue;
            }
            match infer_node(self, node) {
                Ok(outs) => {
                    let id = node.id.clone();
                    for (t, (dtype, shape)) in node.outputs.clone().into_iter().zip(outs) {
                        let def = self.tensors.get_mut(&t).unwrap();
                        if def.dtype != dtype {
                            diags.push(Diagnostic::node(
                                &id,
                                format!("output {t} is declared {} but the op produces {dtype}", def.dtype),
                            ));
                        }
                        match def.shape {
                            Some(s) if s != shape => diags.push(Diagnostic::node(
                                &id,
                                format!("output {t} is declared {s} but inferred {shape}"),
                            )),
                            _ => def.shape = Some(shape),
                        }
                    }
                }
                Err(msg) => diags.push(Diagnostic::node(&node.id, msg)),
            }
        }
        if clean_inputs && diags.is_empty() {
            for &o in &self.outputs {
                if self.tensors[&o].shape.is_none() {
                    diags.push(Diagnostic::graph(format!("graph output {o} has no shape")));
                }
            }
        }
        diags
    }
}

fn check_tensor(t: &TensorDef, diags: &mut Vec<Diagnostic>) {
    let Some(data) = &t.data else {
        if t.binary {
            diags.push(Diagnostic::graph(format!(
                "tensor {}: only constant weights can be binary",
                t.id
            )));
        }
        return;
    };
    if data.dtype() != t.dtype {
        diags.push(Diagnostic::graph(format!(
            "tensor {}: payload does not match dtype {}",
            t.id, t.dtype
        )));
        return;
    }
    match t.storage_len() {
        None => diags.push(Diagnostic::graph(format!("constant tensor {} has no shape", t.id))),
        Some(n) if n != data.len() => diags.push(Diagnostic::graph(format!(
            "constant tensor {} holds {} elements, shape {} needs {n}",
            t.id,
            data.len(),
            t.shape.unwrap()
        ))),
        Some(_) => {
            if let (Some(words), Some(shape)) = (t.words(), t.shape) {
                if let Err(e) = BitpackedTensor::from_words(shape, words.to_vec()) {
                    diags.push(Diagnostic::graph(format!("tensor {}: {e}", t.id)));
                }
            }
        }
    }
    if t.binary && t.dtype != DType::F32 {
        diags.push(Diagnostic::graph(format!(
            "tensor {}: the binary flag applies to f32 weights",
            t.id
        )));
    }
}

fn arity(node: &Node, min: usize, max: usize) -> Result<(), String> {
    if node.inputs.len() < min || node.inputs.len() > max {
        let want = if min == max {
            min.to_string()
        } else {
            format!("{min} to {max}")
        };
        return Err(format!("expected {want} inputs, got {}", node.inputs.len()));
    }
    if node.outputs.len() != 1 {
        return Err(format!("expected 1 output, got {}", node.outputs.len()));
    }
    Ok(())
}

fn input(g: &Graph, node: &Node, i: usize, dtype: DType) -> Result<(TensorId, Shape), String> {
    let t = node.inputs[i];
    let def = &g.tensors[&t];
    if def.dtype != dtype {
        return Err(format!("expected {dtype} input, tensor {t} is {}", def.dtype));
    }
    let shape = def.shape.ok_or_else(|| format!("input tensor {t} has unknown shape"))?;
    Ok((t, shape))
}

fn constant<'g>(g: &'g Graph, t: TensorId, what: &str) -> Result<&'g TensorDef, String> {
    let def = &g.tensors[&t];
    if !def.is_constant() {
        return Err(format!("{what} tensor {t} must be constant"));
    }
    Ok(def)
}

fn per_channel(name: &str, v: &Option<Vec<f32>>, channels: usize) -> Result<(), String> {
    match v {
        Some(v) if v.len() != channels => Err(format!("{name} has {} entries for {channels} channels", v.len())),
        Some(v) if v.iter().any(|x| !x.is_finite()) => Err(format!("{name} must be finite")),
        _ => Ok(()),
    }
}

fn geometry(
    input: Shape,
    kernel: (usize, usize),
    stride: [usize; 2],
    padding: crate::kernels::Padding,
) -> Result<ConvGeometry, String> {
    ConvGeometry::new((input.height, input.width), kernel, (stride[0], stride[1]), padding).map_err(|e| e.to_string())
}

fn infer_node(g: &Graph, node: &Node) -> Inferred {
    let one = |dtype: DType, shape: Shape| Ok(vec![(dtype, shape)]);
    match &node.op {
        Op::Sign => {
            arity(node, 1, 1)?;
            one(DType::F32, input(g, node, 0, DType::F32)?.1)
        }
        Op::Quantize => {
            arity(node, 1, 1)?;
            one(DType::Bitpacked, input(g, node, 0, DType::F32)?.1)
        }
        Op::Dequantize => {
            arity(node, 1, 1)?;
            one(DType::F32, input(g, node, 0, DType::Bitpacked)?.1)
        }
        Op::Conv2D(a) => {
            arity(node, 2, 2)?;
            let (_, x) = input(g, node, 0, DType::F32)?;
            let (wt, w) = input(g, node, 1, DType::F32)?;
            constant(g, wt, "weight")?;
            if a.depthwise {
                if w.channels != 1 || w.batch != x.channels {
                    return Err(format!("depthwise weights {w} do not fit input {x}"));
                }
            } else if w.channels != x.channels {
                return Err(format!(
                    "weights {w} expect {} input channels, input is {x}",
                    w.channels
                ));
            }
            per_channel("multiplier", &a.multiplier, w.batch)?;
            per_channel("bias", &a.bias, w.batch)?;
            let geom = geometry(x, (w.height, w.width), a.stride, a.padding)?;
            one(DType::F32, Shape::new(x.batch, geom.out_h, geom.out_w, w.batch))
        }
        Op::BConv2D(a) => {
            arity(node, 2, 3)?;
            let (_, x) = input(g, node, 0, DType::Bitpacked)?;
            let wt = node.inputs[1];
            let wdef = constant(g, wt, "weight")?;
            let w = wdef.shape.ok_or("weights have no shape")?;
            match wdef.dtype {
                DType::Bitpacked => {}
                DType::F32 => {
                    if wdef.f32_data().unwrap().iter().any(|&v| v != 1.0 && v != -1.0) {
                        return Err(format!("float weights {wt} of a binary convolution must be exactly ±1"));
                    }
                }
                DType::I32 => return Err(format!("weights {wt} must be f32 or bitpacked")),
            }
            if w.channels != x.channels {
                return Err(format!(
                    "weights {w} expect {} input channels, input is {x}",
                    w.channels
                ));
            }
            per_channel("multiplier", &a.multiplier, w.batch)?;
            per_channel("bias", &a.bias, w.batch)?;
            let geom = geometry(x, (w.height, w.width), a.stride, a.padding.spatial())?;
            let corrected = a.padding == PaddingMode::ZeroCorrected;
            match (corrected, node.inputs.get(2)) {
                (true, Some(&ct)) => {
                    let (_, _) = input(g, node, 2, DType::I32)?;
                    let cdef = constant(g, ct, "correction")?;
                    let table = PaddingCorrection::from_table(&geom, w.batch, cdef.i32_data().unwrap().to_vec())
                        .map_err(|e| format!("correction tensor {ct}: {e}"))?;
                    if cdef.shape != Some(table.table_shape()) {
                        return Err(format!(
                            "correction tensor {ct} must have shape {}",
                            table.table_shape()
                        ));
                    }
                }
                (true, None) => return Err("zero_corrected padding requires a correction tensor".into()),
                (false, Some(_)) => return Err(format!("{:?} padding takes no correction tensor", a.padding)),
                (false, None) => {}
            }
            let out = Shape::new(x.batch, geom.out_h, geom.out_w, w.batch);
            match &a.output {
                OutputKind::Float => one(DType::F32, out),
                OutputKind::Bitpacked(t) => {
                    if t.len() != w.batch || !t.is_consistent() {
                        return Err(format!("threshold set does not describe {} channels", w.batch));
                    }
                    one(DType::Bitpacked, out)
                }
            }
        }
        Op::BMaxPool2D(a) | Op::MaxPool2D(a) => {
            arity(node, 1, 1)?;
            let dtype = if matches!(node.op, Op::BMaxPool2D(_)) {
                DType::Bitpacked
            } else {
                DType::F32
            };
            let (_, x) = input(g, node, 0, dtype)?;
            let geom = geometry(x, (a.window[0], a.window[1]), a.stride, a.padding)?;
            one(dtype, Shape::new(x.batch, geom.out_h, geom.out_w, x.channels))
        }
        Op::BatchNorm(p) => {
            arity(node, 1, 1)?;
            let (_, x) = input(g, node, 0, DType::F32)?;
            p.validate()?;
            if p.channels() != x.channels {
                return Err(format!("batch norm over {} channels applied to {x}", p.channels()));
            }
            one(DType::F32, x)
        }
        Op::ReLU(a) => {
            arity(node, 1, 1)?;
            if a.cap.is_some_and(|c| c.is_nan() || c < 0.0 || c.is_infinite()) {
                return Err("cap must be finite and non-negative".into());
            }
            one(DType::F32, input(g, node, 0, DType::F32)?.1)
        }
        Op::Add => {
            arity(node, 2, 2)?;
            let (_, a) = input(g, node, 0, DType::F32)?;
            let (_, b) = input(g, node, 1, DType::F32)?;
            if a != b {
                return Err(format!("Add of mismatched shapes {a} and {b}"));
            }
            one(DType::F32, a)
        }
        Op::Dense(a) => {
            arity(node, 2, 2)?;
            let (_, x) = input(g, node, 0, DType::F32)?;
            let (wt, w) = input(g, node, 1, DType::F32)?;
            constant(g, wt, "weight")?;
            let features = x.height * x.width * x.channels;
            if w.height * w.width * w.channels != features {
                return Err(format!("weights {w} do not match {features} input features"));
            }
            per_channel("bias", &a.bias, w.batch)?;
            one(DType::F32, Shape::new(x.batch, 1, 1, w.batch))
        }
        Op::GlobalAvgPool => {
            arity(node, 1, 1)?;
            let (_, x) = input(g, node, 0, DType::F32)?;
            one(DType::F32, Shape::new(x.batch, 1, 1, x.channels))
        }
    }
}
