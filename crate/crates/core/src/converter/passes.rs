//! The rewrite passes. Each one edits a graph in place and leaves node
//! order to the following `Graph::check`.

use std::collections::{HashMap, HashSet};

use super::{PassFailure, Skipped};
use crate::bitpack::{quantize, BitpackedTensor, FloatTensor};
use crate::graph::{BConvAttrs, DType, Graph, Node, Op, OpKind, PadValue, TensorData, TensorDef, TensorId};
use crate::kernels::{
    build_padding_correction, Activation, BConvDescriptor, OutputKind, Padding, PaddingMode, ThresholdSet,
};

const SNAP_TOLERANCE: f32 = 1e-6;

fn fresh_id(taken: &mut HashSet<String>, base: String) -> String {
    let id = if taken.contains(&base) {
        (1..)
            .map(|i| format!("{base}_{i}"))
            .find(|c| !taken.contains(c))
            .unwrap()
    } else {
        base
    };
    taken.insert(id.clone());
    id
}

fn new_tensor(g: &mut Graph, dtype: DType, like: TensorId) -> TensorId {
    let id = g.next_tensor_id();
    let shape = g.tensor(like).shape;
    g.tensors.insert(id, TensorDef::new(id, dtype, shape));
    id
}

/// True if `t` is read by exactly one node and is not a graph output.
fn single_use(g: &Graph, consumers: &HashMap<TensorId, Vec<usize>>, t: TensorId) -> Option<usize> {
    match consumers.get(&t).map(Vec::as_slice) {
        Some(&[only]) if !g.is_output(t) => Some(only),
        _ => None,
    }
}

fn snap_binary(g: &mut Graph, node: &str, t: TensorId) -> Result<(), PassFailure> {
    let fail = |reason: String| PassFailure {
        node: node.to_string(),
        reason,
    };
    let Some(TensorData::F32(data)) = &mut g.tensor_mut(t).data else {
        return Err(fail(format!("binary weights {t} are not f32 constants")));
    };
    for v in data.iter_mut() {
        if (*v - 1.0).abs() <= SNAP_TOLERANCE {
            *v = 1.0;
        } else if (*v + 1.0).abs() <= SNAP_TOLERANCE {
            *v = -1.0;
        } else {
            return Err(fail(format!("binary weight tensor {t} holds {v}, which is not ±1")));
        }
    }
    Ok(())
}

/// Sign becomes Quantize; binary-flagged convolutions fed by a Sign become
/// BConv2D. Float readers of a Sign keep their tensor through a Dequantize.
pub(super) fn binarize(g: &mut Graph, _: &mut Vec<Skipped>) -> Result<(), PassFailure> {
    let consumers = g.consumers();
    let producers = g.producers();
    let binary: HashSet<usize> = g
        .nodes
        .iter()
        .enumerate()
        .filter(|(_, n)| match &n.op {
            Op::Conv2D(a) => {
                !a.depthwise
                    && g.tensor(n.inputs[1]).binary
                    && producers
                        .get(&n.inputs[0])
                        .is_some_and(|&p| g.nodes[p].kind() == OpKind::Sign)
            }
            _ => false,
        })
        .map(|(i, _)| i)
        .collect();

    let mut taken: HashSet<String> = g.nodes.iter().map(|n| n.id.clone()).collect();
    let mut packed: HashMap<TensorId, TensorId> = HashMap::new();
    let old = std::mem::take(&mut g.nodes);
    let mut nodes = Vec::with_capacity(old.len());
    for (i, node) in old.into_iter().enumerate() {
        match node.op {
            Op::Sign => {
                let y = node.output();
                let q = new_tensor(g, DType::Bitpacked, y);
                let float_readers = g.is_output(y)
                    || consumers
                        .get(&y)
                        .is_some_and(|users| users.iter().any(|u| !binary.contains(u)));
                packed.insert(y, q);
                let dequantize_id = fresh_id(&mut taken, format!("{}_dequantize", node.id));
                nodes.push(Node {
                    id: node.id,
                    op: Op::Quantize,
                    inputs: node.inputs,
                    outputs: vec![q],
                });
                if float_readers {
                    nodes.push(Node {
                        id: dequantize_id,
                        op: Op::Dequantize,
                        inputs: vec![q],
                        outputs: vec![y],
                    });
                }
            }
            Op::Conv2D(a) if binary.contains(&i) => {
                snap_binary(g, &node.id, node.inputs[1])?;
                let padding = match (a.padding, a.pad_value) {
                    (Padding::Valid, _) => PaddingMode::Valid,
                    (Padding::Same, PadValue::One) => PaddingMode::One,
                    (Padding::Same, PadValue::Zero) => PaddingMode::Zero,
                };
                let mut attrs = BConvAttrs::new(padding);
                attrs.stride = a.stride;
                attrs.multiplier = a.multiplier;
                attrs.bias = a.bias;
                nodes.push(Node {
                    op: Op::BConv2D(attrs),
                    ..node
                });
            }
            op => nodes.push(Node { op, ..node }),
        }
    }
    for n in &mut nodes {
        if n.kind() == OpKind::BConv2D {
            if let Some(&q) = packed.get(&n.inputs[0]) {
                n.inputs[0] = q;
            }
        }
    }
    g.nodes = nodes;
    Ok(())
}

fn fold_affine(multiplier: &mut Option<Vec<f32>>, bias: &mut Option<Vec<f32>>, scale: &[f32], shift: &[f32]) {
    let m = match multiplier.take() {
        Some(m) => m.iter().zip(scale).map(|(m, s)| m * s).collect(),
        None => scale.to_vec(),
    };
    let b = match bias.take() {
        Some(b) => b.iter().zip(scale).zip(shift).map(|((b, s), t)| b * s + t).collect(),
        None => shift.to_vec(),
    };
    *multiplier = Some(m);
    *bias = Some(b);
}

/// A ReLU between a binary convolution and a BatchNorm can move into the
/// convolution when it commutes with the existing affine.
fn relu_absorbable(a: &BConvAttrs) -> bool {
    a.output == OutputKind::Float
        && a.activation == Activation::None
        && a.bias.as_ref().is_none_or(|b| b.iter().all(|&v| v == 0.0))
        && a.multiplier.as_ref().is_none_or(|m| m.iter().all(|&v| v > 0.0))
}

/// Finds one foldable BatchNorm and folds it. Returns false when none is left.
fn fold_one(g: &mut Graph) -> bool {
    let consumers = g.consumers();
    let producers = g.producers();
    for (j, bn) in g.nodes.iter().enumerate() {
        let Op::BatchNorm(p) = &bn.op else { continue };
        let t = bn.inputs[0];
        let Some(&pi) = producers.get(&t) else { continue };
        if single_use(g, &consumers, t).is_none() {
            continue;
        }
        let (scale, shift) = p.scale_shift();
        let out = bn.output();
        let mut remove = vec![j];
        let target = match &g.nodes[pi].op {
            Op::BConv2D(a) if a.output == OutputKind::Float && a.activation == Activation::None => pi,
            Op::Conv2D(_) => pi,
            Op::ReLU(r) if r.cap.is_none() => {
                let u = g.nodes[pi].inputs[0];
                match (producers.get(&u), single_use(g, &consumers, u)) {
                    (Some(&ci), Some(_)) if matches!(&g.nodes[ci].op, Op::BConv2D(a) if relu_absorbable(a)) => {
                        remove.push(pi);
                        ci
                    }
                    _ => continue,
                }
            }
            _ => continue,
        };
        let relu = remove.len() == 2;
        let node = &mut g.nodes[target];
        match &mut node.op {
            Op::BConv2D(a) => {
                if relu {
                    a.activation = Activation::Relu;
                }
                fold_affine(&mut a.multiplier, &mut a.bias, &scale, &shift);
            }
            Op::Conv2D(a) => fold_affine(&mut a.multiplier, &mut a.bias, &scale, &shift),
            _ => unreachable!(),
        }
        node.outputs[0] = out;
        let mut k = 0;
        g.nodes.retain(|_| {
            k += 1;
            !remove.contains(&(k - 1))
        });
        return true;
    }
    false
}

/// Folds BatchNorm into a directly preceding convolution, optionally
/// through a plain ReLU after a binary convolution.
pub(super) fn fold_batchnorm(g: &mut Graph, skipped: &mut Vec<Skipped>) -> Result<(), PassFailure> {
    while fold_one(g) {}
    for n in &g.nodes {
        if n.kind() == OpKind::BatchNorm {
            skipped.push(Skipped {
                node: n.id.clone(),
                reason: "not directly preceded by a foldable convolution".into(),
            });
        }
    }
    Ok(())
}

/// MaxPool2D → Quantize becomes Quantize → BMaxPool2D, which is exact
/// because max and sign commute.
pub(super) fn reorder_maxpool(g: &mut Graph, _: &mut Vec<Skipped>) -> Result<(), PassFailure> {
    let consumers = g.consumers();
    let mut rewrites = Vec::new();
    for (i, n) in g.nodes.iter().enumerate() {
        if n.kind() != OpKind::MaxPool2D {
            continue;
        }
        if let Some(qi) = single_use(g, &consumers, n.output()) {
            if g.nodes[qi].kind() == OpKind::Quantize {
                rewrites.push((i, qi));
            }
        }
    }
    for (i, qi) in rewrites {
        let x = g.nodes[i].inputs[0];
        let xq = new_tensor(g, DType::Bitpacked, x);
        let z = g.nodes[qi].output();
        let Op::MaxPool2D(attrs) = g.nodes[i].op.clone() else {
            unreachable!()
        };
        g.nodes[qi].inputs = vec![x];
        g.nodes[qi].outputs = vec![xq];
        let pool = &mut g.nodes[i];
        pool.op = Op::BMaxPool2D(attrs);
        pool.inputs = vec![xq];
        pool.outputs = vec![z];
    }
    Ok(())
}

/// A float-output binary convolution read only by a Quantize produces bits
/// directly through per-channel thresholds.
pub(super) fn fuse_binary_chain(g: &mut Graph, skipped: &mut Vec<Skipped>) -> Result<(), PassFailure> {
    let consumers = g.consumers();
    let mut remove = HashSet::new();
    for i in 0..g.nodes.len() {
        let Op::BConv2D(a) = &g.nodes[i].op else { continue };
        if a.output != OutputKind::Float {
            continue;
        }
        let Some(qi) = single_use(g, &consumers, g.nodes[i].output()) else {
            continue;
        };
        if g.nodes[qi].kind() != OpKind::Quantize {
            continue;
        }
        let ws = g.shape(g.nodes[i].inputs[1]);
        let n = ws.height * ws.width * ws.channels;
        let m = a.multiplier_or_one(ws.batch);
        let b = a.bias_or_zero(ws.batch);
        match ThresholdSet::compute(n, &m, &b, a.activation, a.padding.accumulator_domain()) {
            Ok(t) => {
                let z = g.nodes[qi].output();
                let node = &mut g.nodes[i];
                if let Op::BConv2D(a) = &mut node.op {
                    a.output = OutputKind::Bitpacked(t);
                }
                node.outputs[0] = z;
                remove.insert(qi);
            }
            Err(e) => skipped.push(Skipped {
                node: g.nodes[i].id.clone(),
                reason: e.to_string(),
            }),
        }
    }
    let mut k = 0;
    g.nodes.retain(|_| {
        k += 1;
        !remove.contains(&(k - 1))
    });
    Ok(())
}

fn packed_weights(g: &Graph, t: TensorId) -> BitpackedTensor {
    let def = g.tensor(t);
    let shape = def.shape.expect("weights have shapes");
    match &def.data {
        Some(TensorData::F32(v)) => quantize(&FloatTensor::new(shape, v.clone())),
        Some(TensorData::Words(w)) => BitpackedTensor::from_words(shape, w.clone()).expect("validated weights"),
        _ => unreachable!("validated weight constant"),
    }
}

/// Zero-padded binary convolutions get a stored correction table.
pub(super) fn legalize_padding(g: &mut Graph, _: &mut Vec<Skipped>) -> Result<(), PassFailure> {
    for i in 0..g.nodes.len() {
        let Op::BConv2D(a) = &g.nodes[i].op else { continue };
        if a.padding != PaddingMode::Zero {
            continue;
        }
        let node = &g.nodes[i];
        let weights = packed_weights(g, node.inputs[1]);
        let ws = weights.shape();
        let x = g.shape(node.inputs[0]);
        let desc = BConvDescriptor::new(
            (ws.height, ws.width),
            (a.stride[0], a.stride[1]),
            ws.channels,
            ws.batch,
            PaddingMode::ZeroCorrected,
        );
        let corr = build_padding_correction(&weights, &desc, (x.height, x.width)).map_err(|e| PassFailure {
            node: node.id.clone(),
            reason: e.to_string(),
        })?;
        let id = g.next_tensor_id();
        let mut def = TensorDef::new(id, DType::I32, Some(corr.table_shape()));
        def.data = Some(TensorData::I32(corr.values().to_vec()));
        g.tensors.insert(id, def);
        let node = &mut g.nodes[i];
        node.inputs.truncate(2);
        node.inputs.push(id);
        if let Op::BConv2D(a) = &mut node.op {
            a.padding = PaddingMode::ZeroCorrected;
        }
    }
    Ok(())
}

/// Stores binary convolution weights one bit per value.
pub(super) fn pack_weights(g: &mut Graph, _: &mut Vec<Skipped>) -> Result<(), PassFailure> {
    let consumers = g.consumers();
    let mut done: HashMap<TensorId, TensorId> = HashMap::new();
    for i in 0..g.nodes.len() {
        if g.nodes[i].kind() != OpKind::BConv2D {
            continue;
        }
        let w = g.nodes[i].inputs[1];
        if let Some(&p) = done.get(&w) {
            g.nodes[i].inputs[1] = p;
            continue;
        }
        if g.tensor(w).dtype != DType::F32 {
            continue;
        }
        let words = TensorData::Words(packed_weights(g, w).words().to_vec());
        let shared = consumers[&w].iter().any(|&c| g.nodes[c].kind() != OpKind::BConv2D);
        let target = if shared { new_tensor(g, DType::Bitpacked, w) } else { w };
        let def = g.tensor_mut(target);
        def.dtype = DType::Bitpacked;
        def.binary = false;
        def.data = Some(words);
        done.insert(w, target);
        g.nodes[i].inputs[1] = target;
    }
    Ok(())
}
