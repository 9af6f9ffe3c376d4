use binconv_core::bitpack::{FloatTensor, Shape};
use binconv_core::converter::{convert, ConvertError, ConvertOptions, PASSES};
use binconv_core::graph::{
    BConvAttrs, Conv2dAttrs, DType, DenseAttrs, Graph, GraphBuilder, Op, OpKind, PadValue, PoolAttrs, ReluAttrs,
    TensorId,
};
use binconv_core::kernels::float::BatchNormParams;
use binconv_core::kernels::{Activation, OutputKind, Padding, PaddingMode};
use binconv_core::model::read_model;
use binconv_core::runtime::{run_oracle, ExecutionPlan};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn signs(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| if rng.gen() { 1.0 } else { -1.0 }).collect()
}

fn same(pad_value: PadValue) -> Conv2dAttrs {
    Conv2dAttrs {
        padding: Padding::Same,
        pad_value,
        ..Default::default()
    }
}

fn bn(gamma: f32, beta: f32, mean: f32, variance: f32, epsilon: f32, c: usize) -> Op {
    Op::BatchNorm(BatchNormParams {
        gamma: vec![gamma; c],
        beta: vec![beta; c],
        mean: vec![mean; c],
        variance: vec![variance; c],
        epsilon,
    })
}

/// BatchNorm whose zero crossings sit at half-integer dot products, so
/// rounding never moves a sign.
fn tie_free_bn(rng: &mut ChaCha8Rng, c: usize, n: usize) -> Op {
    let gamma: Vec<f32> = (0..c)
        .map(|_| rng.gen_range(0.5..1.5) * if rng.gen_bool(0.8) { 1.0 } else { -1.0 })
        .collect();
    let mean: Vec<f32> = (0..c)
        .map(|_| (rng.gen_range(-(n as i32) / 3..n as i32 / 3) as f32) + 0.5)
        .collect();
    Op::BatchNorm(BatchNormParams {
        gamma,
        beta: vec![0.0; c],
        mean,
        variance: vec![1.0; c],
        epsilon: 0.0,
    })
}

fn binary_conv(
    b: &mut GraphBuilder,
    rng: &mut ChaCha8Rng,
    x: TensorId,
    cin: usize,
    cout: usize,
    pad: PadValue,
) -> TensorId {
    let w = b.binary_weights(Shape::new(cout, 3, 3, cin), signs(rng, cout * 9 * cin));
    b.node(Op::Conv2D(same(pad)), &[x, w])
}

fn sign_conv(pad: PadValue) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut b = GraphBuilder::new();
    let x = b.input(Shape::new(1, 5, 5, 8));
    let s = b.node(Op::Sign, &[x]);
    let y = binary_conv(&mut b, &mut rng, s, 8, 4, pad);
    b.output(y);
    b.finish().unwrap()
}

/// Stem, a reorderable max pool, a fusable binary chain, a zero-padded
/// conv and a shortcut block.
fn network(seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = GraphBuilder::new();
    let x = b.input(Shape::new(1, 10, 10, 3));
    let w = b.constant_f32(Shape::new(40, 3, 3, 3), uniform(&mut rng, 40 * 27));
    let c = b.node(
        Op::Conv2D(Conv2dAttrs {
            stride: [2, 2],
            ..same(PadValue::Zero)
        }),
        &[x, w],
    );
    let c = b.node(tie_free_bn(&mut rng, 40, 4), &[c]);
    let p = b.node(
        Op::MaxPool2D(PoolAttrs {
            window: [2, 2],
            stride: [1, 1],
            padding: Padding::Same,
        }),
        &[c],
    );
    let s = b.node(Op::Sign, &[p]);
    let y = binary_conv(&mut b, &mut rng, s, 40, 36, PadValue::Zero);
    let y = b.node(tie_free_bn(&mut rng, 36, 360), &[y]);
    let s = b.node(Op::Sign, &[y]);
    let y = binary_conv(&mut b, &mut rng, s, 36, 36, PadValue::One);
    let y = b.node(Op::ReLU(ReluAttrs::default()), &[y]);
    let y = b.node(bn(0.5, 0.25, 1.0, 1.0, 0.0, 36), &[y]);
    let s = b.node(Op::Sign, &[y]);
    let z = binary_conv(&mut b, &mut rng, s, 36, 36, PadValue::One);
    let z = b.node(tie_free_bn(&mut rng, 36, 324), &[z]);
    let z = b.node(Op::Add, &[z, y]);
    let g = b.node(Op::GlobalAvgPool, &[z]);
    let dw = b.constant_f32(Shape::new(5, 1, 1, 36), uniform(&mut rng, 180));
    let d = b.node(
        Op::Dense(DenseAttrs {
            bias: Some(uniform(&mut rng, 5)),
        }),
        &[g, dw],
    );
    b.output(d);
    b.finish().unwrap()
}

fn input_for(g: &Graph, seed: u64) -> Vec<FloatTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    g.inputs
        .iter()
        .map(|&t| {
            let s = g.shape(t);
            FloatTensor::new(s, uniform(&mut rng, s.elements()))
        })
        .collect()
}

fn verified() -> ConvertOptions {
    ConvertOptions {
        verify: true,
        ..Default::default()
    }
}

#[test]
fn sign_then_binary_conv_becomes_quantize_then_bconv() {
    let out = convert(&sign_conv(PadValue::One), &ConvertOptions::default())
        .unwrap()
        .graph;
    let kinds: Vec<OpKind> = out.nodes.iter().map(|n| n.kind()).collect();
    assert_eq!(kinds, [OpKind::Quantize, OpKind::BConv2D]);
    let bconv = &out.nodes[1];
    assert_eq!(out.tensor(bconv.inputs[0]).dtype, DType::Bitpacked);
    assert_eq!(out.tensor(bconv.inputs[1]).dtype, DType::Bitpacked);
    let Op::BConv2D(a) = &bconv.op else { unreachable!() };
    assert_eq!(a.padding, PaddingMode::One);
}

#[test]
fn conv_without_binary_flag_is_untouched() {
    let mut b = GraphBuilder::new();
    let x = b.input(Shape::new(1, 4, 4, 2));
    let s = b.node(Op::Sign, &[x]);
    let w = b.constant_f32(Shape::new(3, 1, 1, 2), vec![1.0, -1.0, 1.0, 1.0, -1.0, -1.0]);
    let y = b.node(Op::Conv2D(Conv2dAttrs::default()), &[s, w]);
    b.output(y);
    let out = convert(&b.finish().unwrap(), &verified()).unwrap().graph;
    assert_eq!(out.count(OpKind::Conv2D), 1);
    assert_eq!(out.count(OpKind::BConv2D), 0);
    assert_eq!(out.count(OpKind::Dequantize), 1);
}

#[test]
fn non_binary_weight_names_the_tensor() {
    let mut b = GraphBuilder::new();
    let x = b.input(Shape::new(1, 4, 4, 2));
    let s = b.node(Op::Sign, &[x]);
    let w = b.binary_weights(Shape::new(1, 1, 1, 2), vec![1.0, 0.3]);
    let y = b.node(Op::Conv2D(Conv2dAttrs::default()), &[s, w]);
    b.output(y);
    let err = convert(&b.finish().unwrap(), &ConvertOptions::default()).unwrap_err();
    let ConvertError::Pass { pass, reason, .. } = &err else {
        panic!("{err:?}")
    };
    assert_eq!(*pass, "binarize");
    assert!(reason.contains(&format!("tensor {w}")), "{reason}");
}

#[test]
fn near_binary_weights_are_snapped() {
    let mut b = GraphBuilder::new();
    let x = b.input(Shape::new(1, 4, 4, 2));
    let s = b.node(Op::Sign, &[x]);
    let w = b.binary_weights(Shape::new(1, 1, 1, 2), vec![1.0 - 5e-7, -1.0 + 5e-7]);
    let y = b.node(Op::Conv2D(Conv2dAttrs::default()), &[s, w]);
    b.output(y);
    assert!(convert(&b.finish().unwrap(), &verified()).is_ok());
}

fn folded(bn_op: Op) -> BConvAttrs {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut b = GraphBuilder::new();
    let x = b.input(Shape::new(1, 4, 4, 8));
    let s = b.node(Op::Sign, &[x]);
    let y = binary_conv(&mut b, &mut rng, s, 8, 1, PadValue::One);
    let z = b.node(bn_op, &[y]);
    b.output(z);
    let out = convert(&b.finish().unwrap(), &verified()).unwrap().graph;
    assert_eq!(out.count(OpKind::BatchNorm), 0);
    let Op::BConv2D(a) = &out.nodes.iter().find(|n| n.kind() == OpKind::BConv2D).unwrap().op else {
        unreachable!()
    };
    a.clone()
}

#[test]
fn identity_batchnorm_folds_to_unit_affine() {
    let a = folded(bn(1.0, 0.0, 0.0, 1.0, 0.0, 1));
    assert_eq!(a.multiplier, Some(vec![1.0]));
    assert_eq!(a.bias, Some(vec![0.0]));
}

#[test]
fn batchnorm_fold_arithmetic() {
    let a = folded(bn(2.0, 1.0, 3.0, 4.0, 0.0, 1));
    assert_eq!(a.multiplier, Some(vec![1.0]));
    assert_eq!(a.bias, Some(vec![-2.0]));
}

#[test]
fn random_batchnorm_fold_matches_unfolded() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10 {
        let mut b = GraphBuilder::new();
        let x = b.input(Shape::new(1, 6, 6, 16));
        let s = b.node(Op::Sign, &[x]);
        let y = binary_conv(&mut b, &mut rng, s, 16, 12, PadValue::One);
        let y = b.node(Op::ReLU(ReluAttrs::default()), &[y]);
        let y = b.node(
            Op::BatchNorm(BatchNormParams {
                gamma: uniform(&mut rng, 12),
                beta: uniform(&mut rng, 12),
                mean: uniform(&mut rng, 12),
                variance: uniform(&mut rng, 12).iter().map(|v| v.abs() + 0.1).collect(),
                epsilon: 1e-3,
            }),
            &[y],
        );
        b.output(y);
        let g = b.finish().unwrap();
        let conv = convert(&g, &verified()).unwrap();
        assert_eq!(conv.graph.count(OpKind::BatchNorm), 0);
        assert_eq!(conv.graph.count(OpKind::ReLU), 0);
    }
}

#[test]
fn batchnorm_after_other_ops_is_left_in_place() {
    let mut b = GraphBuilder::new();
    let x = b.input(Shape::new(1, 4, 4, 2));
    let y = b.node(Op::GlobalAvgPool, &[x]);
    let z = b.node(bn(2.0, 1.0, 0.0, 1.0, 0.0, 2), &[y]);
    b.output(z);
    let conv = convert(&b.finish().unwrap(), &verified()).unwrap();
    assert_eq!(conv.graph.count(OpKind::BatchNorm), 1);
    assert_eq!(conv.reports[1].skipped.len(), 1);
}

fn pool_then_binary(shortcut: bool) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut b = GraphBuilder::new();
    let x = b.input(Shape::new(1, 6, 6, 4));
    let p = b.node(
        Op::MaxPool2D(PoolAttrs {
            window: [2, 2],
            stride: [2, 2],
            padding: Padding::Valid,
        }),
        &[x],
    );
    let s = b.node(Op::Sign, &[p]);
    let y = binary_conv(&mut b, &mut rng, s, 4, 4, PadValue::One);
    let out = if shortcut { b.node(Op::Add, &[y, p]) } else { y };
    b.output(out);
    b.finish().unwrap()
}

#[test]
fn maxpool_moves_behind_quantize() {
    let out = convert(&pool_then_binary(false), &verified()).unwrap().graph;
    let kinds: Vec<OpKind> = out.nodes.iter().map(|n| n.kind()).collect();
    assert_eq!(kinds, [OpKind::Quantize, OpKind::BMaxPool2D, OpKind::BConv2D]);
}

#[test]
fn maxpool_with_float_reader_stays() {
    let out = convert(&pool_then_binary(true), &verified()).unwrap().graph;
    assert_eq!(out.count(OpKind::MaxPool2D), 1);
    assert_eq!(out.count(OpKind::BMaxPool2D), 0);
}

fn chain(rng: &mut ChaCha8Rng, shortcut: bool, pad: PadValue) -> Graph {
    let mut b = GraphBuilder::new();
    let x = b.input(Shape::new(1, 6, 5, 24));
    let s = b.node(Op::Sign, &[x]);
    let y = binary_conv(&mut b, rng, s, 24, 24, pad);
    let y = b.node(tie_free_bn(rng, 24, 216), &[y]);
    let s = b.node(Op::Sign, &[y]);
    let z = binary_conv(&mut b, rng, s, 24, 24, PadValue::One);
    let out = if shortcut { b.node(Op::Add, &[z, y]) } else { z };
    b.output(out);
    b.finish().unwrap()
}

#[test]
fn binary_chain_fuses_into_thresholds() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let out = convert(&chain(&mut rng, false, PadValue::One), &verified())
        .unwrap()
        .graph;
    assert_eq!(out.count(OpKind::Quantize), 1);
    let first = out.nodes.iter().find(|n| n.kind() == OpKind::BConv2D).unwrap();
    let Op::BConv2D(a) = &first.op else { unreachable!() };
    let OutputKind::Bitpacked(t) = &a.output else {
        panic!("not fused")
    };
    let gamma_positive: Vec<bool> = a.multiplier.as_ref().unwrap().iter().map(|&m| m > 0.0).collect();
    for (c, pos) in gamma_positive.iter().enumerate() {
        if t.constant[c].is_none() {
            assert_eq!(t.flip[c], !pos, "channel {c}");
        }
    }
}

#[test]
fn binary_chain_with_shortcut_is_not_fused() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let out = convert(&chain(&mut rng, true, PadValue::One), &verified())
        .unwrap()
        .graph;
    assert!(out
        .nodes
        .iter()
        .all(|n| !matches!(&n.op, Op::BConv2D(a) if a.output != OutputKind::Float)));
    assert_eq!(out.count(OpKind::Quantize), 2);
}

#[test]
fn fused_chains_are_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for i in 0..50 {
        let pad = if i % 2 == 0 { PadValue::One } else { PadValue::Zero };
        let g = chain(&mut rng, false, pad);
        let conv = convert(&g, &ConvertOptions::default()).unwrap();
        assert!(conv.reports[3].changed());
        let plan = ExecutionPlan::new(conv.graph).unwrap();
        let x = input_for(&g, i);
        assert_eq!(plan.execute(&x, 1).unwrap(), run_oracle(&g, &x).unwrap(), "chain {i}");
    }
}

#[test]
fn padding_legalization() {
    let one = convert(&sign_conv(PadValue::One), &ConvertOptions::default())
        .unwrap()
        .graph;
    assert_eq!(one.nodes[1].inputs.len(), 2);
    assert!(one.tensors.values().all(|t| t.dtype != DType::I32));

    let zero = convert(&sign_conv(PadValue::Zero), &verified()).unwrap().graph;
    let node = &zero.nodes[1];
    let Op::BConv2D(a) = &node.op else { unreachable!() };
    assert_eq!(a.padding, PaddingMode::ZeroCorrected);
    let table = zero.tensor(node.inputs[2]);
    assert_eq!(table.dtype, DType::I32);
    // 3x3 classes per axis: top/left edge, interior, bottom/right edge
    let corr = table.i32_data().unwrap();
    let interior = &corr[(3 + 1) * 4..(3 + 2) * 4];
    assert_eq!(interior, &[0, 0, 0, 0]);
    assert!(corr.iter().any(|&v| v != 0));
}

#[test]
fn zero_padded_conv_equals_explicit_zero_padding() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..5 {
        let mut b = GraphBuilder::new();
        let x = b.input(Shape::new(1, 7, 6, 33));
        let s = b.node(Op::Sign, &[x]);
        let y = binary_conv(&mut b, &mut rng, s, 33, 7, PadValue::Zero);
        b.output(y);
        let g = b.finish().unwrap();
        let plan = ExecutionPlan::new(convert(&g, &verified()).unwrap().graph).unwrap();
        let x = input_for(&g, 1);
        assert_eq!(plan.execute(&x, 1).unwrap(), run_oracle(&g, &x).unwrap());
    }
}

fn packed_bytes(cout: usize, cin: usize) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut b = GraphBuilder::new();
    let x = b.input(Shape::new(1, 4, 4, cin));
    let s = b.node(Op::Sign, &[x]);
    let y = binary_conv(&mut b, &mut rng, s, cin, cout, PadValue::One);
    b.output(y);
    let g = b.finish().unwrap();
    let float_bytes = g.tensor(g.nodes[1].inputs[1]).byte_size().unwrap();
    let out = convert(&g, &ConvertOptions::default()).unwrap().graph;
    (float_bytes, out.tensor(out.nodes[1].inputs[1]).byte_size().unwrap())
}

#[test]
fn packing_shrinks_weights_32x() {
    assert_eq!(packed_bytes(64, 32), (73728, 2304));
    assert_eq!(packed_bytes(1, 40).1, 9 * 2 * 4);
}

#[test]
fn packed_weights_keep_their_signs() {
    let g = sign_conv(PadValue::One);
    let w = g.tensor(g.nodes[1].inputs[1]).f32_data().unwrap().to_vec();
    let out = convert(&g, &ConvertOptions::default()).unwrap().graph;
    let def = out.tensor(out.nodes[1].inputs[1]);
    let packed =
        binconv_core::bitpack::BitpackedTensor::from_words(def.shape.unwrap(), def.words().unwrap().to_vec()).unwrap();
    assert_eq!(binconv_core::bitpack::dequantize(&packed).data(), &w[..]);
}

#[test]
fn reconverting_is_a_fixed_point() {
    for seed in 0..3 {
        let first = convert(&network(seed), &ConvertOptions::default()).unwrap().to_bytes();
        let again = convert(&read_model(&first).unwrap(), &ConvertOptions::default()).unwrap();
        assert!(again.reports.iter().all(|r| !r.changed()));
        assert_eq!(again.to_bytes(), first);
    }
}

#[test]
fn network_converts_with_every_pass_verified() {
    for seed in 0..4 {
        let g = network(seed);
        let conv = convert(
            &g,
            &ConvertOptions {
                verify: true,
                seed,
                ..Default::default()
            },
        )
        .unwrap();
        let names: Vec<&str> = conv.reports.iter().map(|r| r.pass).collect();
        assert_eq!(names, PASSES);
        assert!(conv.reports.iter().all(|r| r.verified == Some(true)));
        let out = &conv.graph;
        for kind in [OpKind::Sign, OpKind::BatchNorm, OpKind::MaxPool2D] {
            assert_eq!(out.count(kind), 0, "{kind}");
        }
        assert_eq!(out.count(OpKind::BMaxPool2D), 1);
        let plan = ExecutionPlan::new(out.clone()).unwrap();
        let x = input_for(&g, seed);
        let got = plan.execute(&x, 1).unwrap();
        let want = run_oracle(&g, &x).unwrap();
        for (a, b) in got[0].data().iter().zip(want[0].data()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }
}

#[test]
fn broken_pass_fails_verification() {
    let g = network(0);
    for pass in ["binarize", "pack_weights"] {
        let opts = ConvertOptions {
            verify: true,
            fault_after: Some(pass),
            ..Default::default()
        };
        match convert(&g, &opts) {
            Err(ConvertError::VerificationFailed { pass: p, .. }) => assert_eq!(p, pass),
            other => panic!("{pass}: {other:?}"),
        }
    }
}

#[test]
fn activation_is_recorded_when_relu_is_absorbed() {
    let a = {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut b = GraphBuilder::new();
        let x = b.input(Shape::new(1, 4, 4, 8));
        let s = b.node(Op::Sign, &[x]);
        let y = binary_conv(&mut b, &mut rng, s, 8, 2, PadValue::One);
        let y = b.node(Op::ReLU(ReluAttrs::default()), &[y]);
        let y = b.node(bn(1.0, 0.5, 0.0, 1.0, 0.0, 2), &[y]);
        b.output(y);
        let out = convert(&b.finish().unwrap(), &verified()).unwrap().graph;
        let Op::BConv2D(a) = &out.nodes[1].op else {
            unreachable!()
        };
        a.clone()
    };
    assert_eq!(a.activation, Activation::Relu);
    assert_eq!(a.bias, Some(vec![0.5, 0.5]));
}
