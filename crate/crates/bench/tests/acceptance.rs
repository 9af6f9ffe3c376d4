//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fail.

use std::time::Instant;

use binconv_bench::factory::{quicknet_like, random_bnn, shortcut_study, single_conv, ShortcutVariant, SingleConv};
use binconv_bench::random_inputs;
use binconv_bench::sweep::{run_sweep, summarize, Precision, SweepConfig};
use binconv_core::bitpack::{pack_signs, quantize, words_for, BitpackedTensor, FloatTensor, Shape};
use binconv_core::converter::{convert, ConvertOptions};
use binconv_core::graph::{Graph, OpKind, PadValue, TensorData};
use binconv_core::kernels::float::maxpool2d;
use binconv_core::kernels::{
    bgemm, bmaxpool, AccumulatorDomain, Activation, BConvDescriptor, BitpackedMatrix, OutputKind, Padding, PaddingMode,
    PreparedBConv, ThresholdSet,
};
use binconv_core::model::read_model;
use binconv_core::runtime::{Category, ExecutionPlan};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn signs(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| if rng.gen() { 1.0 } else { -1.0 }).collect()
}

fn reference_dot(x: &[f32], w: &[f32]) -> i32 {
    x.iter().zip(w).map(|(a, b)| (a * b) as i32).sum()
}

fn packed_rows(rows: &[Vec<f32>]) -> BitpackedMatrix {
    let words = words_for(rows[0].len());
    let mut data = vec![0u32; rows.len() * words];
    for (r, v) in rows.iter().enumerate() {
        pack_signs(v, &mut data[r * words..(r + 1) * words]);
    }
    BitpackedMatrix::from_u32_rows(rows.len(), words, &data)
}

/// Checks `n − 2·acc` from the binary GEMM against the integer dot product
/// for every (lhs, weight) row pair.
fn check_dots(xs: &[Vec<f32>], ws: &[Vec<f32>]) -> Result<usize, String> {
    let n = xs[0].len() as i32;
    let acc = bgemm(&packed_rows(xs), &packed_rows(ws)).map_err(|e| e.to_string())?;
    for (i, x) in xs.iter().enumerate() {
        for (j, w) in ws.iter().enumerate() {
            let got = n - 2 * acc.get(i, j);
            let want = reference_dot(x, w);
            if got != want {
                return Err(format!("n={n}: popcount gives {got}, dot product is {want}"));
            }
        }
    }
    Ok(xs.len() * ws.len())
}

fn criterion_1() -> Outcome {
    let nibble = |p: usize| -> Vec<f32> { (0..8).map(|b| if p >> b & 1 == 1 { -1.0 } else { 1.0 }).collect() };
    let all: Vec<Vec<f32>> = (0..256).map(nibble).collect();
    let exhaustive = check_dots(&all, &all)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut random = 0;
    for n in [32, 96, 512] {
        for _ in 0..1000 {
            let xs: Vec<_> = (0..10).map(|_| signs(&mut rng, n)).collect();
            let ws: Vec<_> = (0..10).map(|_| signs(&mut rng, n)).collect();
            random += check_dots(&xs, &ws)?;
        }
    }
    Ok(format!(
        "{exhaustive} exhaustive pairs at n=8, {random} random pairs at n in {{32, 96, 512}}, 0 failures"
    ))
}

/// Direct convolution over ±1 values with explicit padding semantics.
struct ConvCase {
    batch: usize,
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    padding: PaddingMode,
}

impl ConvCase {
    fn out_extent(&self, d: usize) -> (usize, usize) {
        match self.padding {
            PaddingMode::Valid => ((d - self.k) / self.stride + 1, 0),
            _ => {
                let out = d.div_ceil(self.stride);
                let total = ((out - 1) * self.stride + self.k).saturating_sub(d);
                (out, total / 2)
            }
        }
    }

    /// Integer dot products, laid out `[n][oy][ox][co]`.
    fn dots(&self, x: &[f32], wts: &[f32]) -> (Vec<i32>, usize, usize) {
        let (oh, pt) = self.out_extent(self.h);
        let (ow, pl) = self.out_extent(self.w);
        let mut out = Vec::with_capacity(self.batch * oh * ow * self.cout);
        for n in 0..self.batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    for co in 0..self.cout {
                        let mut s = 0i32;
                        for ky in 0..self.k {
                            for kx in 0..self.k {
                                let y = (oy * self.stride + ky) as isize - pt as isize;
                                let xx = (ox * self.stride + kx) as isize - pl as isize;
                                let inside = y >= 0 && xx >= 0 && (y as usize) < self.h && (xx as usize) < self.w;
                                for ci in 0..self.cin {
                                    let wv = wts[((co * self.k + ky) * self.k + kx) * self.cin + ci] as i32;
                                    let xv = if inside {
                                        x[((n * self.h + y as usize) * self.w + xx as usize) * self.cin + ci] as i32
                                    } else if self.padding == PaddingMode::One {
                                        1
                                    } else {
                                        0
                                    };
                                    s += xv * wv;
                                }
                            }
                        }
                        out.push(s);
                    }
                }
            }
        }
        (out, oh, ow)
    }
}

fn activate(act: Activation, x: f32) -> f32 {
    match act {
        Activation::None => x,
        Activation::Relu => {
            if x < 0.0 {
                0.0
            } else {
                x
            }
        }
        Activation::ClampedRelu(cap) => {
            if x < 0.0 {
                0.0
            } else if x > cap {
                cap
            } else {
                x
            }
        }
    }
}

fn random_activation(rng: &mut ChaCha8Rng) -> Activation {
    match rng.gen_range(0..3) {
        0 => Activation::None,
        1 => Activation::Relu,
        _ => Activation::ClampedRelu(rng.gen_range(0.5..8.0)),
    }
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let modes = [
        PaddingMode::Valid,
        PaddingMode::One,
        PaddingMode::Zero,
        PaddingMode::ZeroCorrected,
    ];
    let mut max_diff = 0f32;
    let mut bits = 0usize;
    for case_id in 0..200 {
        let k = *[1, 3, 5].choose(&mut rng).unwrap();
        let case = ConvCase {
            batch: rng.gen_range(1..=2),
            h: rng.gen_range(k.max(3)..=11),
            w: rng.gen_range(k.max(3)..=11),
            cin: rng.gen_range(32..=96),
            cout: rng.gen_range(8..=72),
            k,
            stride: rng.gen_range(1..=2),
            padding: modes[case_id % 4],
        };
        let bitpacked = case_id % 8 >= 4;
        let x = signs(&mut rng, case.batch * case.h * case.w * case.cin);
        let wts = signs(&mut rng, case.cout * k * k * case.cin);
        let mut desc = BConvDescriptor::new((k, k), (case.stride, case.stride), case.cin, case.cout, case.padding);
        desc.activation = random_activation(&mut rng);
        desc.multiplier = (0..case.cout).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let n = (k * k * case.cin) as f32;
        desc.bias = (0..case.cout).map(|_| rng.gen_range(-0.3 * n..0.3 * n)).collect();
        if bitpacked {
            let t = ThresholdSet::compute(
                k * k * case.cin,
                &desc.multiplier,
                &desc.bias,
                desc.activation,
                case.padding.accumulator_domain(),
            )
            .map_err(|e| e.to_string())?;
            desc.output = OutputKind::Bitpacked(t);
        }
        let (mult, bias, act) = (desc.multiplier.clone(), desc.bias.clone(), desc.activation);
        let in_shape = Shape::new(case.batch, case.h, case.w, case.cin);
        let weights = quantize(&FloatTensor::new(Shape::new(case.cout, k, k, case.cin), wts.clone()));
        let input = quantize(&FloatTensor::new(in_shape, x.clone()));
        let conv = PreparedBConv::new(desc, &weights, None, in_shape).map_err(|e| e.to_string())?;
        let (dots, oh, ow) = case.dots(&x, &wts);
        let want: Vec<f32> = dots
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let c = i % case.cout;
                mult[c] * activate(act, d as f32) + bias[c]
            })
            .collect();
        let fail = |what: String| format!("config {case_id} (k{k} s{} {:?}): {what}", case.stride, case.padding);
        if bitpacked {
            let out: BitpackedTensor = conv.run_bitpacked(&input, 1).map_err(|e| e.to_string())?;
            let expected = quantize(&FloatTensor::new(Shape::new(case.batch, oh, ow, case.cout), want));
            if out.words() != expected.words() {
                return Err(fail("bitpacked output differs".into()));
            }
            bits += case.batch * oh * ow * case.cout;
        } else {
            let out = conv.run_float(&input, 1).map_err(|e| e.to_string())?;
            if out.data().len() != want.len() {
                return Err(fail("output size differs".into()));
            }
            for (a, b) in out.data().iter().zip(&want) {
                let d = (a - b).abs();
                if d > 1e-4 || d.is_nan() {
                    return Err(fail(format!("float output off by {d}")));
                }
                max_diff = max_diff.max(d);
            }
        }
    }
    Ok(format!(
        "200 configs, max float difference {max_diff:.1e} (tolerance 1e-4), {bits} bits exact"
    ))
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0usize;
    for config in 0..100 {
        let n = rng.gen_range(1..=512usize);
        let gamma: f32 = if config % 10 == 0 {
            0.0
        } else {
            rng.gen_range(-2.0..2.0)
        };
        let beta: f32 = rng.gen_range(-(n as f32)..n as f32);
        let act = random_activation(&mut rng);
        for domain in [AccumulatorDomain::Integer, AccumulatorDomain::HalfInteger] {
            let t = ThresholdSet::compute(n, &[gamma], &[beta], act, domain)
                .map_err(|e| format!("config {config}: {e}"))?;
            let step = if domain == AccumulatorDomain::Integer { 2 } else { 1 };
            for acc2 in (0..=2 * n as i32).step_by(step) {
                let dot = n as f32 - acc2 as f32;
                let unfused = gamma * activate(act, dot) + beta;
                let want = unfused < 0.0;
                if t.bit(0, acc2) != want {
                    return Err(format!(
                        "config {config} (n {n}, gamma {gamma}, beta {beta}, {act:?}): mismatch at acc {}",
                        acc2 as f32 / 2.0
                    ));
                }
                checked += 1;
            }
        }
    }
    Ok(format!("100 configs, {checked} accumulator values, 0 mismatches"))
}

fn criterion_4() -> Outcome {
    let mut graphs: Vec<(String, Graph)> = (0..38).map(|s| (format!("random {s}"), random_bnn(4000 + s))).collect();
    for s in 0..6 {
        let g = quicknet_like(&[1, 2], &[32, 48], 24, 5, s).map_err(|e| e.to_string())?;
        graphs.push((format!("quicknet {s}"), g));
    }
    for (i, v) in [ShortcutVariant::A, ShortcutVariant::B, ShortcutVariant::C]
        .into_iter()
        .enumerate()
    {
        for s in 0..2 {
            let g = shortcut_study(v, 32, 5, s).map_err(|e| e.to_string())?;
            graphs.push((format!("shortcut {i}/{s}"), g));
        }
    }
    let mut passes = 0;
    for (name, g) in &graphs {
        let options = ConvertOptions {
            verify: true,
            ..Default::default()
        };
        let c = convert(g, &options).map_err(|e| format!("{name}: {e}"))?;
        for r in &c.reports {
            if r.verified != Some(true) {
                return Err(format!("{name}: pass {} not verified", r.pass));
            }
            passes += 1;
        }
        let bytes = c.to_bytes();
        let again = convert(
            &read_model(&bytes).map_err(|e| e.to_string())?,
            &ConvertOptions::default(),
        )
        .map_err(|e| format!("{name}: reconversion: {e}"))?;
        if again.to_bytes() != bytes {
            return Err(format!("{name}: reconversion is not byte-identical"));
        }
    }
    Ok(format!(
        "{} graphs, {passes} passes verified, reconversion byte-identical",
        graphs.len()
    ))
}

fn criterion_5() -> Outcome {
    let mut parts = Vec::new();
    for (cin, cout) in [(32, 64), (256, 256)] {
        let spec = SingleConv {
            hw: 4,
            in_channels: cin,
            out_channels: cout,
            kernel: 3,
            stride: 1,
            binary: true,
            pad: PadValue::One,
        };
        let g = convert(
            &single_conv(spec, 0).map_err(|e| e.to_string())?,
            &ConvertOptions::default(),
        )
        .map_err(|e| e.to_string())?
        .graph;
        let node = g
            .nodes
            .iter()
            .find(|n| n.kind() == OpKind::BConv2D)
            .ok_or("no BConv2D")?;
        let packed = match &g.tensor(node.inputs[1]).data {
            Some(d @ TensorData::Words(_)) => d.byte_len(),
            _ => return Err("weights are not bitpacked".into()),
        };
        let float = 3 * 3 * cin * cout * 4;
        if packed * 32 != float {
            return Err(format!(
                "3x3x{cin}x{cout}: {packed} packed bytes for {float} float bytes"
            ));
        }
        parts.push(format!("3x3x{cin}x{cout} {float} -> {packed} bytes"));
    }
    Ok(format!("{} (factor 32)", parts.join(", ")))
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for i in 0..1000 {
        let (h, w) = (rng.gen_range(2..=12), rng.gen_range(2..=12));
        let c = rng.gen_range(1..=100);
        let shape = Shape::new(rng.gen_range(1..=2), h, w, c);
        let data = (0..shape.elements())
            .map(|_| {
                if rng.gen_bool(0.05) {
                    0.0
                } else {
                    rng.gen_range(-1.0..1.0)
                }
            })
            .collect();
        let x = FloatTensor::new(shape, data);
        let window = rng.gen_range(2..=3.min(h).min(w));
        let stride = rng.gen_range(1..=2);
        let padding = if rng.gen() { Padding::Same } else { Padding::Valid };
        let a = quantize(&maxpool2d(&x, (window, window), (stride, stride), padding).map_err(|e| e.to_string())?);
        let b = bmaxpool(&quantize(&x), (window, window), (stride, stride), padding).map_err(|e| e.to_string())?;
        if a != b {
            return Err(format!(
                "tensor {i} ({shape}, window {window}, stride {stride}, {padding:?}) differs"
            ));
        }
    }
    Ok("1000 tensors bit-exact".into())
}

fn criterion_7() -> Outcome {
    let config = SweepConfig {
        channels: vec![256],
        spatial: vec![14, 7],
        kernels: vec![3],
        runs: 10,
        warmup: 2,
        ..Default::default()
    };
    let rows = run_sweep(&config, 1, |_| {}).map_err(|e| e.to_string())?;
    let mut parts = Vec::new();
    let mut ok = true;
    for r in &rows {
        let s = r.speedup.ok_or("missing speedup")?;
        ok &= s >= 4.0;
        parts.push(format!(
            "{0}x{0}x256x256x3x3 {1:.2}x ({2:.0} vs {3:.0} us)",
            r.spatial,
            s,
            r.float_us.unwrap(),
            r.binary_us.unwrap()
        ));
    }
    let msg = format!("{}; floor 4x, published range 8.5-18.5x", parts.join(", "));
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn criterion_8() -> Outcome {
    let config = SweepConfig {
        precisions: vec![Precision::Binary],
        runs: 3,
        warmup: 1,
        ..Default::default()
    };
    let rows = run_sweep(&config, 1, |_| {}).map_err(|e| e.to_string())?;
    let fit = summarize(&rows).binary_fit.ok_or("too few configs for a fit")?;
    let msg = format!(
        "binary slope {:.3} over {} configs >= 1M MACs (accepted 0.7-1.3)",
        fit.slope, fit.points
    );
    if (0.7..=1.3).contains(&fit.slope) {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn criterion_9() -> Outcome {
    let g = quicknet_like(&[4, 4, 4, 4], &[32, 64, 256, 512], 224, 1000, 0).map_err(|e| e.to_string())?;
    let plan = ExecutionPlan::new(
        convert(&g, &ConvertOptions::default())
            .map_err(|e| e.to_string())?
            .graph,
    )
    .map_err(|e| e.to_string())?;
    let profile = plan
        .profile(&random_inputs(&plan, 0), 5, 1, 1)
        .map_err(|e| e.to_string())?;
    let total: f64 = profile.records.iter().map(|r| r.pct).sum();
    let cats = profile.categories();
    let (largest, pct) = cats
        .iter()
        .copied()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .ok_or("empty profile")?;
    let msg = format!("sum {total:.3} %, largest {} at {pct:.1} %", largest.label());
    if (total - 100.0).abs() <= 0.5 && largest == Category::BConvAccumulate {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn criterion_10() -> Outcome {
    for seed in 0..20 {
        let g = random_bnn(7000 + seed);
        let plan = ExecutionPlan::new(
            convert(&g, &ConvertOptions::default())
                .map_err(|e| e.to_string())?
                .graph,
        )
        .map_err(|e| e.to_string())?;
        let x = random_inputs(&plan, seed);
        let reference = plan.execute(&x, 1).map_err(|e| e.to_string())?;
        for threads in [2, 4] {
            let out = plan.execute(&x, threads).map_err(|e| e.to_string())?;
            let same = out.len() == reference.len()
                && out.iter().zip(&reference).all(|(a, b)| {
                    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits())
                });
            if !same {
                return Err(format!("model {seed} differs between 1 and {threads} threads"));
            }
        }
    }
    Ok("20 models identical at 1, 2 and 4 threads".into())
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("dot-product identity", criterion_1),
        ("kernel matches oracle", criterion_2),
        ("threshold fusion exact", criterion_3),
        ("converter preserves semantics", criterion_4),
        ("weight compression", criterion_5),
        ("maxpool reorder identity", criterion_6),
        ("binary speedup", criterion_7),
        ("MACs-latency linearity", criterion_8),
        ("profile consistency", criterion_9),
        ("thread determinism", criterion_10),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = check();
        let secs = start.elapsed().as_secs_f64();
        let (status, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        failed += outcome.is_err() as usize;
        println!("criterion {:>2} {status} {name}: {detail} [{secs:.1} s]", i + 1);
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
}
