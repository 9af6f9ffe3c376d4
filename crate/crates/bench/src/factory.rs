//! Training graphs with random weights.

use std::collections::BTreeMap;

use binconv_core::bitpack::Shape;
use binconv_core::graph::{
    Conv2dAttrs, DenseAttrs, Graph, GraphBuilder, Op, OpKind, PadValue, PoolAttrs, ReluAttrs, TensorId,
};
use binconv_core::kernels::float::BatchNormParams;
use binconv_core::kernels::Padding;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FactoryError {
    #[error("N and k must have the same non-zero length (got {n} and {k})")]
    Lengths { n: usize, k: usize },
    #[error("{0}")]
    Invalid(String),
}

/// Shortcut placement for the ResNet18-like study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ShortcutVariant {
    /// Shortcuts in every block; downsampling blocks use a strided 1x1
    /// float convolution on the shortcut path.
    A,
    /// Shortcuts in regular blocks only.
    B,
    /// No shortcuts.
    C,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SingleConv {
    pub hw: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub binary: bool,
    /// Padding value for binary convolutions; float convolutions always pad
    /// with zero.
    pub pad: PadValue,
}

struct Net {
    b: GraphBuilder,
    rng: ChaCha8Rng,
}

impl Net {
    fn new(seed: u64) -> Self {
        Net {
            b: GraphBuilder::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn uniform(&mut self, n: usize, limit: f32) -> Vec<f32> {
        (0..n).map(|_| self.rng.gen_range(-limit..limit)).collect()
    }

    fn float_conv(
        &mut self,
        x: TensorId,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        depthwise: bool,
    ) -> TensorId {
        let (o, i) = if depthwise { (cin, 1) } else { (cout, cin) };
        let limit = (3.0 / (k * k * if depthwise { 1 } else { cin }) as f32).sqrt();
        let w = self.uniform(o * k * k * i, limit);
        let w = self.b.constant_f32(Shape::new(o, k, k, i), w);
        let attrs = Conv2dAttrs {
            stride: [stride, stride],
            padding: if k == 1 { Padding::Valid } else { Padding::Same },
            depthwise,
            ..Default::default()
        };
        self.b.node(Op::Conv2D(attrs), &[x, w])
    }

    #[allow(clippy::too_many_arguments)]
    fn binary_conv(
        &mut self,
        x: TensorId,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: Padding,
        pad: PadValue,
    ) -> TensorId {
        let w: Vec<f32> = (0..cout * k * k * cin)
            .map(|_| if self.rng.gen() { 1.0 } else { -1.0 })
            .collect();
        let w = self.b.binary_weights(Shape::new(cout, k, k, cin), w);
        let attrs = Conv2dAttrs {
            stride: [stride, stride],
            padding,
            pad_value: pad,
            ..Default::default()
        };
        self.b.node(Op::Conv2D(attrs), &[x, w])
    }

    /// BatchNorm after a float convolution.
    fn bn(&mut self, x: TensorId, c: usize) -> TensorId {
        let gamma = (0..c).map(|_| self.rng.gen_range(0.5..1.5)).collect();
        let beta = self.uniform(c, 0.1);
        let p = BatchNormParams {
            gamma,
            beta,
            mean: vec![0.0; c],
            variance: vec![1.0; c],
            epsilon: 1e-3,
        };
        self.b.node(Op::BatchNorm(p), &[x])
    }

    /// BatchNorm after a binary convolution over dot products of length
    /// `n`. The affine crosses zero only at half-integers, which no
    /// accumulator value can hit.
    fn binary_bn(&mut self, x: TensorId, c: usize, n: usize) -> TensorId {
        let spread = (n as f32).sqrt().max(1.0) as i32;
        let gamma = (0..c)
            .map(|_| self.rng.gen_range(0.25..1.0) * if self.rng.gen_bool(0.85) { 1.0 } else { -1.0 })
            .collect();
        let mean = (0..c)
            .map(|_| self.rng.gen_range(-spread..=spread) as f32 + 0.5)
            .collect();
        let p = BatchNormParams {
            gamma,
            beta: vec![0.0; c],
            mean,
            variance: vec![1.0; c],
            epsilon: 0.0,
        };
        self.b.node(Op::BatchNorm(p), &[x])
    }

    fn relu(&mut self, x: TensorId) -> TensorId {
        self.b.node(Op::ReLU(ReluAttrs::default()), &[x])
    }

    fn maxpool(&mut self, x: TensorId, window: usize, stride: usize, padding: Padding) -> TensorId {
        let attrs = PoolAttrs {
            window: [window, window],
            stride: [stride, stride],
            padding,
        };
        self.b.node(Op::MaxPool2D(attrs), &[x])
    }

    fn head(&mut self, x: TensorId, c: usize, classes: usize) -> TensorId {
        let g = self.b.node(Op::GlobalAvgPool, &[x]);
        let w = self.uniform(classes * c, (3.0 / c as f32).sqrt());
        let w = self.b.constant_f32(Shape::new(classes, 1, 1, c), w);
        let bias = self.uniform(classes, 0.1);
        self.b.node(Op::Dense(DenseAttrs { bias: Some(bias) }), &[g, w])
    }

    fn finish(mut self, out: TensorId) -> Graph {
        self.b.output(out);
        self.b.finish().expect("factory graphs are valid")
    }
}

/// QuickNet-style network: a float stem down to a quarter of the input
/// resolution, residual sections of one-padded binary 3x3 convolutions
/// with `k[i]` filters repeated `n[i]` times, max-pool + 1x1 transitions,
/// then global pooling and a dense classifier.
pub fn quicknet_like(
    n: &[usize],
    k: &[usize],
    input_hw: usize,
    classes: usize,
    seed: u64,
) -> Result<Graph, FactoryError> {
    if n.len() != k.len() || n.is_empty() {
        return Err(FactoryError::Lengths { n: n.len(), k: k.len() });
    }
    if k.contains(&0) || classes == 0 {
        return Err(FactoryError::Invalid("filter and class counts must be positive".into()));
    }
    if input_hw < 4 << (n.len() - 1) {
        return Err(FactoryError::Invalid(format!(
            "input {input_hw} is too small for {} sections",
            n.len()
        )));
    }
    let mut net = Net::new(seed);
    let x = net.b.input(Shape::new(1, input_hw, input_hw, 3));
    let y = net.float_conv(x, 3, 16, 3, 2, false);
    let y = net.bn(y, 16);
    let y = net.relu(y);
    let y = net.float_conv(y, 16, 16, 3, 2, true);
    let y = net.bn(y, 16);
    let y = net.float_conv(y, 16, k[0], 1, 1, false);
    let mut y = net.bn(y, k[0]);
    for (i, (&blocks, &filters)) in n.iter().zip(k).enumerate() {
        if i > 0 {
            let p = net.maxpool(y, 3, 2, Padding::Same);
            let c = net.float_conv(p, k[i - 1], filters, 1, 1, false);
            y = net.bn(c, filters);
        }
        for _ in 0..blocks {
            let s = net.b.node(Op::Sign, &[y]);
            let c = net.binary_conv(s, filters, filters, 3, 1, Padding::Same, PadValue::One);
            let c = net.relu(c);
            let c = net.binary_bn(c, filters, 9 * filters);
            y = net.b.node(Op::Add, &[c, y]);
        }
    }
    let y = net.relu(y);
    let out = net.head(y, *k.last().unwrap(), classes);
    Ok(net.finish(out))
}

/// Stage widths of the shortcut study network.
pub const SHORTCUT_STAGES: [usize; 4] = [64, 128, 256, 512];

/// Binarized ResNet18-like network with shortcut placement `variant`.
/// The float stem maps `input_hw` down by four before the first stage.
pub fn shortcut_study(
    variant: ShortcutVariant,
    input_hw: usize,
    classes: usize,
    seed: u64,
) -> Result<Graph, FactoryError> {
    if input_hw < 32 || classes == 0 {
        return Err(FactoryError::Invalid(
            "shortcut study needs input >= 32 and classes > 0".into(),
        ));
    }
    let mut net = Net::new(seed);
    let x = net.b.input(Shape::new(1, input_hw, input_hw, 3));
    let y = net.float_conv(x, 3, 64, 7, 2, false);
    let y = net.bn(y, 64);
    let y = net.relu(y);
    let mut y = net.maxpool(y, 3, 2, Padding::Same);
    let mut c_in = 64;
    for (s, &c) in SHORTCUT_STAGES.iter().enumerate() {
        for j in 0..2 {
            let down = s > 0 && j == 0;
            let stride = if down { 2 } else { 1 };
            let q = net.b.node(Op::Sign, &[y]);
            let b = net.binary_conv(q, c_in, c, 3, stride, Padding::Same, PadValue::One);
            let b = net.binary_bn(b, c, 9 * c_in);
            y = match (variant, down) {
                (ShortcutVariant::A, true) => {
                    let sc = net.float_conv(y, c_in, c, 1, 2, false);
                    let sc = net.bn(sc, c);
                    net.b.node(Op::Add, &[b, sc])
                }
                (ShortcutVariant::A | ShortcutVariant::B, false) => net.b.node(Op::Add, &[b, y]),
                _ => b,
            };
            c_in = c;
        }
    }
    let out = net.head(y, c_in, classes);
    Ok(net.finish(out))
}

/// One convolution, binary (fed by a Sign) or float.
pub fn single_conv(spec: SingleConv, seed: u64) -> Result<Graph, FactoryError> {
    let SingleConv {
        hw,
        in_channels,
        out_channels,
        kernel,
        stride,
        binary,
        pad,
    } = spec;
    if hw == 0 || in_channels == 0 || out_channels == 0 || kernel == 0 || stride == 0 {
        return Err(FactoryError::Invalid("convolution dimensions must be positive".into()));
    }
    let mut net = Net::new(seed);
    let x = net.b.input(Shape::new(1, hw, hw, in_channels));
    let y = if binary {
        let s = net.b.node(Op::Sign, &[x]);
        net.binary_conv(s, in_channels, out_channels, kernel, stride, Padding::Same, pad)
    } else {
        let w = net.uniform(out_channels * kernel * kernel * in_channels, 1.0);
        let w = net
            .b
            .constant_f32(Shape::new(out_channels, kernel, kernel, in_channels), w);
        let attrs = Conv2dAttrs {
            stride: [stride, stride],
            padding: Padding::Same,
            ..Default::default()
        };
        net.b.node(Op::Conv2D(attrs), &[x, w])
    };
    Ok(net.finish(y))
}

/// Small random network mixing every training-graph op and every padding
/// mode. Batch norms after binary convolutions are tie-free and float
/// convolutions carry no bias, so conversion preserves every sign.
pub fn random_bnn(seed: u64) -> Graph {
    let mut net = Net::new(seed);
    let rng = &mut net.rng;
    let (mut h, mut w) = (rng.gen_range(5..=10), rng.gen_range(5..=10));
    let mut c = *[3, 8, 16, 33].choose(rng).unwrap();
    let x = net.b.input(Shape::new(1, h, w, c));
    let mut cur = x;
    let mut extra_output = None;
    let steps = net.rng.gen_range(2..=5);
    for _ in 0..steps {
        let block = net.rng.gen_range(0..7);
        let (before, bh, bw, bc) = (cur, h, w, c);
        match block {
            0 => {
                let depthwise = net.rng.gen_bool(0.3);
                let k = if net.rng.gen() { 1 } else { 3 };
                let stride = if h >= 6 && w >= 6 && net.rng.gen_bool(0.3) {
                    2
                } else {
                    1
                };
                let cout = if depthwise { c } else { net.rng.gen_range(4..=40) };
                cur = net.float_conv(cur, c, cout, k, stride, depthwise);
                c = cout;
                (h, w) = (h.div_ceil(stride), w.div_ceil(stride));
                cur = net.bn(cur, c);
                match net.rng.gen_range(0..3) {
                    0 => cur = net.relu(cur),
                    1 => cur = net.b.node(Op::ReLU(ReluAttrs { cap: Some(1.5) }), &[cur]),
                    _ => {}
                }
            }
            1..=3 => {
                if block == 2 && h >= 3 && w >= 3 {
                    let (window, stride) = if net.rng.gen() { (2, 2) } else { (3, 1) };
                    let padding = if net.rng.gen() { Padding::Same } else { Padding::Valid };
                    cur = net.maxpool(cur, window, stride, padding);
                    let geo = |d: usize| match padding {
                        Padding::Same => d.div_ceil(stride),
                        Padding::Valid => (d - window) / stride + 1,
                    };
                    (h, w) = (geo(h), geo(w));
                }
                let chain = if block == 3 { 2 } else { 1 };
                for _ in 0..chain {
                    let s = net.b.node(Op::Sign, &[cur]);
                    let k = if net.rng.gen_bool(0.3) { 1 } else { 3 };
                    let stride = if h >= 6 && w >= 6 && net.rng.gen_bool(0.25) {
                        2
                    } else {
                        1
                    };
                    let (padding, pad) = match net.rng.gen_range(0..3) {
                        0 if h >= k && w >= k => (Padding::Valid, PadValue::Zero),
                        1 => (Padding::Same, PadValue::Zero),
                        _ => (Padding::Same, PadValue::One),
                    };
                    let cout = *[8, 16, 32, 40, 64].choose(&mut net.rng).unwrap();
                    let y = net.binary_conv(s, c, cout, k, stride, padding, pad);
                    let n = k * k * c;
                    let geo = |d: usize| match padding {
                        Padding::Same => d.div_ceil(stride),
                        Padding::Valid => (d - k) / stride + 1,
                    };
                    (h, w) = (geo(h), geo(w));
                    let y = match net.rng.gen_range(0..4) {
                        0 if chain == 1 => y,
                        1 => {
                            let r = net.relu(y);
                            net.binary_bn(r, cout, n)
                        }
                        _ => net.binary_bn(y, cout, n),
                    };
                    let same_shape = (h, w, cout) == (bh, bw, bc);
                    c = cout;
                    cur = if chain == 1 && same_shape && net.rng.gen() {
                        net.b.node(Op::Add, &[y, before])
                    } else {
                        y
                    };
                }
            }
            4 => {
                let r = net.relu(cur);
                cur = net.bn(r, c);
            }
            5 => {
                let s = net.b.node(Op::Sign, &[cur]);
                cur = net.b.node(Op::Add, &[s, cur]);
            }
            _ => {
                if extra_output.is_none() && net.rng.gen_bool(0.5) {
                    extra_output = Some(cur);
                }
                let s = net.b.node(Op::Sign, &[cur]);
                let cout = *[8, 32, 40].choose(&mut net.rng).unwrap();
                let y = net.binary_conv(s, c, cout, 3, 1, Padding::Same, PadValue::One);
                cur = net.binary_bn(y, cout, 9 * c);
                c = cout;
            }
        }
    }
    if let Some(t) = extra_output {
        net.b.output(t);
    }
    let out = if net.rng.gen() {
        let classes = net.rng.gen_range(3..=10);
        net.head(cur, c, classes)
    } else {
        cur
    };
    net.finish(out)
}

/// Per-kind node counts, for structural comparisons.
pub fn op_histogram(g: &Graph) -> BTreeMap<OpKind, usize> {
    let mut m = BTreeMap::new();
    for n in &g.nodes {
        *m.entry(n.kind()).or_insert(0) += 1;
    }
    m
}

/// Node counts present in `a` beyond those in `b`.
pub fn op_difference(a: &Graph, b: &Graph) -> BTreeMap<OpKind, usize> {
    let hb = op_histogram(b);
    op_histogram(a)
        .into_iter()
        .filter_map(|(k, n)| {
            let extra = n.saturating_sub(hb.get(&k).copied().unwrap_or(0));
            (extra > 0).then_some((k, extra))
        })
        .collect()
}
