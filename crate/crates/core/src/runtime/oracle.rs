//! Reference evaluation in plain float arithmetic.
//!
//! Bitpacked tensors are represented by their `±1.0` values. Binary
//! convolutions are evaluated as float convolutions over `±1` operands, so
//! the oracle shares no code with the bitpacked kernels.

use std::collections::HashMap;

use super::RuntimeError;
use crate::bitpack::{bit_value, sign_bit, FloatTensor, Shape};
use crate::graph::{Graph, Node, Op, TensorId};
use crate::kernels::float::{self, Conv2dParams};
use crate::kernels::{fused_transform, ConvGeometry, OutputKind, PaddingCorrection, PaddingMode};

fn signs(x: &FloatTensor) -> FloatTensor {
    FloatTensor::new(x.shape(), x.data().iter().map(|&v| bit_value(sign_bit(v))).collect())
}

fn kernel_err(node: &Node) -> impl FnOnce(crate::kernels::KernelError) -> RuntimeError + '_ {
    move |source| RuntimeError::Kernel {
        node: node.id.clone(),
        source,
    }
}

fn constant_f32(graph: &Graph, t: TensorId) -> FloatTensor {
    let def = graph.tensor(t);
    let shape = def.shape.expect("constants have shapes");
    match (def.f32_data(), def.words()) {
        (Some(v), _) => FloatTensor::new(shape, v.to_vec()),
        (_, Some(w)) => {
            let mut data = vec![0.0; shape.elements()];
            crate::bitpack::dequantize_into(w, shape.channels, &mut data);
            FloatTensor::new(shape, data)
        }
        _ => unreachable!("validated weight constant"),
    }
}

/// Evaluates `graph` on `inputs` and returns its outputs. Bitpacked outputs
/// are returned as `±1.0` floats.
pub fn run_oracle(graph: &Graph, inputs: &[FloatTensor]) -> Result<Vec<FloatTensor>, RuntimeError> {
    let mut values = oracle_values(graph, inputs)?;
    Ok(graph
        .outputs
        .iter()
        .map(|t| values.remove(t).unwrap_or_else(|| constant_f32(graph, *t)))
        .collect())
}

/// Every non-constant tensor value computed by the oracle.
pub fn oracle_values(graph: &Graph, inputs: &[FloatTensor]) -> Result<HashMap<TensorId, FloatTensor>, RuntimeError> {
    super::check_inputs(graph, inputs)?;
    let mut values: HashMap<TensorId, FloatTensor> = graph.inputs.iter().copied().zip(inputs.iter().cloned()).collect();
    for node in &graph.nodes {
        let get = |i: usize| -> FloatTensor {
            let t = node.inputs[i];
            values.get(&t).cloned().unwrap_or_else(|| constant_f32(graph, t))
        };
        let out = match &node.op {
            Op::Sign | Op::Quantize => signs(&get(0)),
            Op::Dequantize => get(0),
            Op::Conv2D(a) => {
                let params = Conv2dParams {
                    stride: (a.stride[0], a.stride[1]),
                    padding: a.padding,
                    pad_value: a.pad_value.value(),
                    depthwise: a.depthwise,
                };
                float::conv2d(&get(0), &get(1), a.multiplier.as_deref(), a.bias.as_deref(), params, 1)
                    .map_err(kernel_err(node))?
            }
            Op::BConv2D(a) => bconv(graph, node, a, &get(0), &get(1))?,
            Op::BMaxPool2D(a) | Op::MaxPool2D(a) => float::maxpool2d(
                &get(0),
                (a.window[0], a.window[1]),
                (a.stride[0], a.stride[1]),
                a.padding,
            )
            .map_err(kernel_err(node))?,
            Op::BatchNorm(p) => float::batch_norm(&get(0), p).map_err(kernel_err(node))?,
            Op::ReLU(a) => float::relu(&get(0), a.cap),
            Op::Add => float::add(&get(0), &get(1)).map_err(kernel_err(node))?,
            Op::Dense(a) => float::dense(&get(0), &get(1), a.bias.as_deref()).map_err(kernel_err(node))?,
            Op::GlobalAvgPool => float::global_avg_pool(&get(0)),
        };
        values.insert(node.output(), out);
    }
    Ok(values)
}

fn bconv(
    graph: &Graph,
    node: &Node,
    a: &crate::graph::BConvAttrs,
    x: &FloatTensor,
    w: &FloatTensor,
) -> Result<FloatTensor, RuntimeError> {
    let x = signs(x);
    let ws = w.shape();
    let n = ws.height * ws.width * ws.channels;
    let pad_value = match a.padding {
        PaddingMode::Valid | PaddingMode::Zero => 0.0,
        PaddingMode::One | PaddingMode::ZeroCorrected => 1.0,
    };
    let params = Conv2dParams {
        stride: (a.stride[0], a.stride[1]),
        padding: a.padding.spatial(),
        pad_value,
        depthwise: false,
    };
    let mut dot = float::conv2d(&x, w, None, None, params, 1).map_err(kernel_err(node))?;
    let out_shape = dot.shape();
    if a.padding == PaddingMode::ZeroCorrected {
        let xs = x.shape();
        let geom = ConvGeometry::new(
            (xs.height, xs.width),
            (ws.height, ws.width),
            (a.stride[0], a.stride[1]),
            a.padding.spatial(),
        )
        .map_err(kernel_err(node))?;
        let table = graph
            .tensor(node.inputs[2])
            .i32_data()
            .expect("validated correction")
            .to_vec();
        let corr = PaddingCorrection::from_table(&geom, ws.batch, table).map_err(kernel_err(node))?;
        apply_correction(&mut dot, &corr);
    }
    let m = a.multiplier_or_one(ws.batch);
    let b = a.bias_or_zero(ws.batch);
    let c_n = ws.batch;
    let mut out = FloatTensor::zeros(out_shape);
    for (i, (o, &d)) in out.data_mut().iter_mut().zip(dot.data()).enumerate() {
        let c = i % c_n;
        *o = match &a.output {
            OutputKind::Float => fused_transform(d, m[c], b[c], a.activation),
            OutputKind::Bitpacked(t) => bit_value(t.bit(c, n as i32 - d as i32)),
        };
    }
    Ok(out)
}

fn apply_correction(dot: &mut FloatTensor, corr: &PaddingCorrection) {
    let Shape {
        batch,
        height,
        width,
        channels,
    } = dot.shape();
    for nb in 0..batch {
        for y in 0..height {
            for x in 0..width {
                let k = corr.at(y, x);
                let i = dot.index(nb, y, x, 0);
                for (v, &kc) in dot.data_mut()[i..i + channels].iter_mut().zip(k) {
                    *v -= kc as f32;
                }
            }
        }
    }
}
