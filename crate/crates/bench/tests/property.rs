use std::collections::{BTreeSet, HashMap};

use binconv_bench::factory::{quicknet_like, random_bnn};
use binconv_bench::random_inputs;
use binconv_core::converter::{convert, ConvertOptions};
use binconv_core::graph::{DType, Graph, Op, OpKind};
use binconv_core::kernels::{OutputKind, PaddingMode};
use binconv_core::runtime::{run_oracle, Arena, ExecutionPlan};

fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

#[test]
fn converted_random_graphs_match_the_training_graph() {
    let mut kinds = BTreeSet::new();
    let mut paddings = BTreeSet::new();
    let mut bitpacked_outputs = 0;
    for seed in 0..200 {
        let g = random_bnn(seed);
        let converted = convert(&g, &ConvertOptions::default()).unwrap().graph;
        kinds.extend(g.nodes.iter().map(|n| n.kind()));
        for node in &converted.nodes {
            kinds.insert(node.kind());
            if let Op::BConv2D(a) = &node.op {
                paddings.insert(format!("{:?}", a.padding));
                bitpacked_outputs += matches!(a.output, OutputKind::Bitpacked(_)) as usize;
            }
        }
        let plan = ExecutionPlan::new(converted).unwrap();
        let inputs = random_inputs(&plan, seed);
        let want = run_oracle(&g, &inputs).unwrap();
        for threads in [1, 3] {
            let got = plan.execute(&inputs, threads).unwrap();
            assert_eq!(got.len(), want.len());
            for (i, (a, b)) in got.iter().zip(&want).enumerate() {
                assert_eq!(a.shape(), b.shape(), "seed {seed} output {i}");
                let d = max_abs_diff(a.data(), b.data());
                assert!(d <= 1e-4, "seed {seed} output {i}: max difference {d}");
            }
        }
    }
    for k in [
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
    ] {
        assert!(kinds.contains(&k), "{k:?} never exercised");
    }
    for mode in [PaddingMode::Valid, PaddingMode::One, PaddingMode::ZeroCorrected] {
        assert!(paddings.contains(&format!("{mode:?}")), "{mode:?} never exercised");
    }
    assert!(bitpacked_outputs > 0);
}

/// Checks a memory plan from first principles: every activation has a
/// buffer large enough for it, live over its producer and readers, and
/// no two buffers live at the same step share an element.
fn check_plan(plan: &ExecutionPlan) {
    let g: &Graph = plan.graph();
    let mem = plan.memory();
    let by_tensor: HashMap<_, _> = mem.buffers.iter().map(|b| (b.tensor, b)).collect();
    let last_step = g.nodes.len() - 1;
    for (step, node) in g.nodes.iter().enumerate() {
        for &t in node.inputs.iter().chain(&node.outputs) {
            let def = g.tensor(t);
            if def.is_constant() {
                continue;
            }
            let b = by_tensor[&t];
            assert!(b.first <= step && step <= b.last, "tensor {t} not live at step {step}");
            assert!(b.len >= def.storage_len().unwrap());
            let arena = if def.dtype == DType::Bitpacked {
                Arena::Words
            } else {
                Arena::Float
            };
            assert_eq!(b.arena, arena);
        }
    }
    for &t in &g.outputs {
        assert!(by_tensor[&t].last > last_step);
    }
    for b in &mem.buffers {
        let cap = match b.arena {
            Arena::Float => mem.float_len,
            Arena::Words => mem.words_len,
        };
        assert!(b.offset + b.len <= cap);
    }
    for (i, a) in mem.buffers.iter().enumerate() {
        for b in &mem.buffers[i + 1..] {
            if a.arena != b.arena || a.len == 0 || b.len == 0 {
                continue;
            }
            let live = a.first.max(b.first) <= a.last.min(b.last);
            let disjoint = a.offset + a.len <= b.offset || b.offset + b.len <= a.offset;
            assert!(!live || disjoint, "tensors {} and {} collide", a.tensor, b.tensor);
        }
    }
    assert!(mem.peak_bytes() <= mem.unshared_bytes());
}

#[test]
fn memory_plans_are_sound() {
    for seed in 0..1000 {
        let g = random_bnn(seed);
        let plan = if seed % 2 == 0 {
            ExecutionPlan::new(convert(&g, &ConvertOptions::default()).unwrap().graph)
        } else {
            ExecutionPlan::new(g)
        };
        check_plan(&plan.unwrap());
    }
}

#[test]
fn quicknet_plan_reuses_memory() {
    let g = quicknet_like(&[2, 2, 2, 2], &[32, 64, 128, 256], 64, 10, 0).unwrap();
    let plan = ExecutionPlan::new(convert(&g, &ConvertOptions::default()).unwrap().graph).unwrap();
    check_plan(&plan);
    let mem = plan.memory();
    assert!(
        mem.peak_bytes() < mem.unshared_bytes(),
        "{} >= {}",
        mem.peak_bytes(),
        mem.unshared_bytes()
    );
}
