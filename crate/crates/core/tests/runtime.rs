use binconv_core::bitpack::{quantize, FloatTensor, Shape};
use binconv_core::graph::{
    BConvAttrs, Conv2dAttrs, DenseAttrs, Graph, GraphBuilder, Op, PadValue, PoolAttrs, ReluAttrs, TensorData,
};
use binconv_core::kernels::float::BatchNormParams;
use binconv_core::kernels::{
    build_padding_correction, Activation, BConvDescriptor, OutputKind, Padding, PaddingMode, ThresholdSet,
};
use binconv_core::model::write_model;
use binconv_core::runtime::{load_model, run_oracle, ExecutionPlan, RuntimeError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn signs(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| if rng.gen() { 1.0 } else { -1.0 }).collect()
}

fn random_input(rng: &mut ChaCha8Rng, s: Shape) -> FloatTensor {
    FloatTensor::new(s, uniform(rng, s.elements()))
}

fn assert_close(a: &[FloatTensor], b: &[FloatTensor], tol: f32) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert_eq!(x.shape(), y.shape());
        for (i, (p, q)) in x.data().iter().zip(y.data()).enumerate() {
            assert!((p - q).abs() <= tol, "element {i}: {p} vs {q}");
        }
    }
}

fn float_graph(rng: &mut ChaCha8Rng) -> Graph {
    let mut b = GraphBuilder::new();
    let x = b.input(Shape::new(1, 9, 9, 5));
    let w = b.constant_f32(Shape::new(8, 3, 3, 5), uniform(rng, 8 * 45));
    let attrs = Conv2dAttrs {
        stride: [2, 2],
        padding: Padding::Same,
        bias: Some(uniform(rng, 8)),
        ..Default::default()
    };
    let c = b.node(Op::Conv2D(attrs), &[x, w]);
    let bn = b.node(
        Op::BatchNorm(BatchNormParams {
            gamma: uniform(rng, 8),
            beta: uniform(rng, 8),
            mean: uniform(rng, 8),
            variance: vec![0.5; 8],
            epsilon: 1e-3,
        }),
        &[c],
    );
    let r = b.node(Op::ReLU(ReluAttrs { cap: Some(0.8) }), &[bn]);
    let p = b.node(
        Op::MaxPool2D(PoolAttrs {
            window: [2, 2],
            stride: [1, 1],
            padding: Padding::Same,
        }),
        &[r],
    );
    let s = b.node(Op::Add, &[p, r]);
    let g = b.node(Op::GlobalAvgPool, &[s]);
    let dw = b.constant_f32(Shape::new(3, 1, 1, 8), uniform(rng, 24));
    let d = b.node(
        Op::Dense(DenseAttrs {
            bias: Some(uniform(rng, 3)),
        }),
        &[g, dw],
    );
    b.output(d);
    b.output(s);
    b.finish().unwrap()
}

fn binary_graph(rng: &mut ChaCha8Rng, padding: PaddingMode, bitpacked_out: bool) -> Graph {
    let in_s = Shape::new(2, 7, 6, 40);
    let w_s = Shape::new(9, 3, 3, 40);
    let mut b = GraphBuilder::new();
    let x = b.input(in_s);
    let q = b.node(Op::Quantize, &[x]);
    let wv = signs(rng, w_s.elements());
    let weights = quantize(&FloatTensor::new(w_s, wv));
    let w = b.constant(w_s, TensorData::Words(weights.words().to_vec()));
    let mut attrs = BConvAttrs::new(padding);
    attrs.multiplier = Some(uniform(rng, 9));
    attrs.bias = Some(uniform(rng, 9).iter().map(|v| v * 20.0).collect());
    attrs.activation = Activation::Relu;
    let mut inputs = vec![q, w];
    if padding == PaddingMode::ZeroCorrected {
        let mut desc = BConvDescriptor::new((3, 3), (1, 1), 40, 9, padding);
        desc.multiplier = attrs.multiplier.clone().unwrap();
        let corr = build_padding_correction(&weights, &desc, (7, 6)).unwrap();
        inputs.push(b.constant(corr.table_shape(), TensorData::I32(corr.values().to_vec())));
    }
    if bitpacked_out {
        let m = vec![1.0; 9];
        attrs.multiplier = None;
        attrs.activation = Activation::None;
        let t = ThresholdSet::compute(
            360,
            &m,
            attrs.bias.as_ref().unwrap(),
            Activation::None,
            padding.accumulator_domain(),
        )
        .unwrap();
        attrs.output = OutputKind::Bitpacked(t);
    }
    let y = b.node(Op::BConv2D(attrs), &inputs);
    let out = if bitpacked_out {
        let p = b.node(
            Op::BMaxPool2D(PoolAttrs {
                window: [2, 2],
                stride: [2, 2],
                padding: Padding::Same,
            }),
            &[y],
        );
        b.node(Op::Dequantize, &[p])
    } else {
        y
    };
    b.output(out);
    b.finish().unwrap()
}

#[test]
fn float_ops_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = float_graph(&mut rng);
    let plan = ExecutionPlan::new(g.clone()).unwrap();
    for _ in 0..4 {
        let x = random_input(&mut rng, Shape::new(1, 9, 9, 5));
        let got = plan.execute(std::slice::from_ref(&x), 1).unwrap();
        let want = run_oracle(&g, &[x]).unwrap();
        assert_close(&got, &want, 1e-5);
    }
}

#[test]
fn binary_ops_match_oracle_for_every_padding() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for padding in [
        PaddingMode::Valid,
        PaddingMode::One,
        PaddingMode::Zero,
        PaddingMode::ZeroCorrected,
    ] {
        for bitpacked in [false, true] {
            let g = binary_graph(&mut rng, padding, bitpacked);
            let plan = ExecutionPlan::new(g.clone()).unwrap();
            let x = random_input(&mut rng, Shape::new(2, 7, 6, 40));
            let got = plan.execute(std::slice::from_ref(&x), 2).unwrap();
            let want = run_oracle(&g, &[x]).unwrap();
            assert_close(&got, &want, 1e-4);
        }
    }
}

#[test]
fn outputs_do_not_depend_on_threads() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = binary_graph(&mut rng, PaddingMode::One, false);
    let plan = ExecutionPlan::new(g).unwrap();
    let x = random_input(&mut rng, Shape::new(2, 7, 6, 40));
    let one = plan.execute(std::slice::from_ref(&x), 1).unwrap();
    for threads in [2, 3, 8] {
        assert_eq!(plan.execute(std::slice::from_ref(&x), threads).unwrap(), one);
    }
}

#[test]
fn repeated_runs_are_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let plan = ExecutionPlan::new(float_graph(&mut rng)).unwrap();
    let x = random_input(&mut rng, Shape::new(1, 9, 9, 5));
    let first = plan.execute(std::slice::from_ref(&x), 1).unwrap();
    assert_eq!(plan.execute(std::slice::from_ref(&x), 1).unwrap(), first);
}

#[test]
fn single_op_model_plans_two_buffers() {
    let mut b = GraphBuilder::new();
    let x = b.input(Shape::new(1, 4, 4, 3));
    let w = b.constant_f32(Shape::new(2, 1, 1, 3), vec![0.5; 6]);
    let y = b.node(
        Op::Conv2D(Conv2dAttrs {
            pad_value: PadValue::Zero,
            ..Default::default()
        }),
        &[x, w],
    );
    b.output(y);
    let plan = ExecutionPlan::new(b.finish().unwrap()).unwrap();
    let mem = plan.memory();
    assert_eq!(mem.buffers.len(), 2);
    assert!(mem.conflicts().is_empty());
    assert_eq!(mem.peak_bytes(), (48 + 32) * 4);
}

#[test]
fn planned_buffers_never_collide() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let plan = ExecutionPlan::new(float_graph(&mut rng)).unwrap();
    let mem = plan.memory();
    assert!(mem.conflicts().is_empty());
    assert!(mem.peak_bytes() <= mem.unshared_bytes());
}

#[test]
fn loads_from_model_bytes() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let g = binary_graph(&mut rng, PaddingMode::ZeroCorrected, true);
    let plan = load_model(&write_model(&g)).unwrap();
    let x = random_input(&mut rng, Shape::new(2, 7, 6, 40));
    let got = plan.execute(std::slice::from_ref(&x), 1).unwrap();
    assert_close(&got, &run_oracle(&g, &[x]).unwrap(), 1e-4);
}

#[test]
fn rejects_wrong_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let plan = ExecutionPlan::new(float_graph(&mut rng)).unwrap();
    let bad = FloatTensor::zeros(Shape::new(1, 9, 9, 4));
    assert!(matches!(
        plan.execute(&[bad], 1),
        Err(RuntimeError::Input { index: 0, .. })
    ));
    assert!(matches!(plan.execute(&[], 1), Err(RuntimeError::Input { .. })));
}

#[test]
fn profile_covers_every_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let g = binary_graph(&mut rng, PaddingMode::One, true);
    let plan = ExecutionPlan::new(g.clone()).unwrap();
    let x = random_input(&mut rng, Shape::new(2, 7, 6, 40));
    let p = plan.profile(&[x], 5, 1, 1).unwrap();
    assert_eq!(p.records.len(), g.nodes.len());
    let pct: f64 = p.records.iter().map(|r| r.pct).sum();
    assert!((pct - 100.0).abs() < 1e-6);
    let bconv = p.records.iter().find(|r| r.accumulate_us.is_some()).unwrap();
    assert!(bconv.macs_binary > 0);
    assert_eq!(bconv.macs_binary, 2 * 7 * 6 * 9 * 360);
}
