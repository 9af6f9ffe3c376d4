use std::time::Instant;

use super::plan::{plan_memory, Arena, MemoryPlan};
use super::profile::{Profile, ProfileRecord};
use super::{check_inputs, RuntimeError};
use crate::bitpack::{
    bit_value, dequantize_into, quantize, quantize_into, sign_bit, BitpackedTensor, FloatTensor, Shape,
};
use crate::graph::{Graph, Node, Op, OpKind};
use crate::kernels::float::{self, Conv2dParams, PreparedConv2d};
use crate::kernels::{
    bmaxpool_into, BConvDescriptor, BitpackedMatrix, ConvGeometry, KernelError, PaddingCorrection, PreparedBConv,
};
use crate::timing::median;

#[derive(Debug, Clone)]
enum Kernel {
    Sign,
    Quantize {
        channels: usize,
    },
    Dequantize {
        channels: usize,
    },
    Conv {
        conv: PreparedConv2d,
        input: Shape,
    },
    BConv(Box<PreparedBConv>),
    BMaxPool {
        geom: ConvGeometry,
        input: Shape,
    },
    MaxPool {
        geom: ConvGeometry,
        input: Shape,
    },
    BatchNorm {
        scale: Vec<f32>,
        shift: Vec<f32>,
    },
    Relu(Option<f32>),
    Add,
    Dense {
        weights: Vec<f32>,
        features: usize,
        bias: Option<Vec<f32>>,
    },
    GlobalAvgPool {
        input: Shape,
    },
}

/// One scheduled operator.
#[derive(Debug, Clone)]
pub struct Step {
    pub node: String,
    pub kind: OpKind,
    kernel: Kernel,
    /// Buffer indices of activation inputs.
    inputs: Vec<usize>,
    output: usize,
    pub macs_binary: u64,
    pub macs_float: u64,
    pub bytes_read: usize,
    pub bytes_written: usize,
}

/// A loaded model: ops in execution order, prepared kernels and a buffer
/// plan. Immutable; every execution allocates its own arenas and scratch.
#[derive(Debug, Clone)]
pub struct ExecutionPlan {
    graph: Graph,
    steps: Vec<Step>,
    memory: MemoryPlan,
}

#[derive(Default)]
struct Scratch {
    bits: Option<BitpackedMatrix>,
    acc: Vec<i32>,
    im2col: Vec<f32>,
}

struct Arenas {
    f: Vec<f32>,
    w: Vec<u32>,
}

/// Read access to an arena with one mutably borrowed gap cut out.
struct ReadView<'a, T> {
    head: &'a [T],
    tail: &'a [T],
    gap_end: usize,
}

impl<'a, T> ReadView<'a, T> {
    fn whole(data: &'a [T]) -> Self {
        ReadView {
            head: data,
            tail: &[],
            gap_end: data.len(),
        }
    }

    fn split(data: &'a mut [T], offset: usize, len: usize) -> (Self, &'a mut [T]) {
        let (head, rest) = data.split_at_mut(offset);
        let (gap, tail) = rest.split_at_mut(len);
        (
            ReadView {
                head,
                tail,
                gap_end: offset + len,
            },
            gap,
        )
    }

    fn get(&self, offset: usize, len: usize) -> &'a [T] {
        if offset + len <= self.head.len() {
            &self.head[offset..offset + len]
        } else {
            assert!(offset >= self.gap_end, "planned buffers overlap");
            &self.tail[offset - self.gap_end..offset - self.gap_end + len]
        }
    }
}

enum Out<'a> {
    F(&'a mut [f32]),
    W(&'a mut [u32]),
}

fn unsupported(node: &Node, reason: impl Into<String>) -> RuntimeError {
    RuntimeError::Unsupported {
        node: node.id.clone(),
        reason: reason.into(),
    }
}

fn kernel_err(node: &str) -> impl FnOnce(KernelError) -> RuntimeError + '_ {
    move |source| RuntimeError::Kernel {
        node: node.to_string(),
        source,
    }
}

fn prepare(graph: &Graph, node: &Node) -> Result<(Kernel, u64, u64), RuntimeError> {
    let in_shape = graph.shape(node.inputs[0]);
    let out_shape = graph.shape(node.output());
    let err = kernel_err(&node.id);
    Ok(match &node.op {
        Op::Sign => (Kernel::Sign, 0, 0),
        Op::Quantize => (
            Kernel::Quantize {
                channels: in_shape.channels,
            },
            0,
            0,
        ),
        Op::Dequantize => (
            Kernel::Dequantize {
                channels: in_shape.channels,
            },
            0,
            0,
        ),
        Op::Conv2D(a) => {
            let w = graph.tensor(node.inputs[1]);
            let weights = FloatTensor::new(w.shape.unwrap(), w.f32_data().unwrap().to_vec());
            let params = Conv2dParams {
                stride: (a.stride[0], a.stride[1]),
                padding: a.padding,
                pad_value: a.pad_value.value(),
                depthwise: a.depthwise,
            };
            let conv =
                PreparedConv2d::new(&weights, a.multiplier.as_deref(), a.bias.as_deref(), params).map_err(err)?;
            let macs = conv.macs(in_shape).map_err(kernel_err(&node.id))?;
            (Kernel::Conv { conv, input: in_shape }, 0, macs)
        }
        Op::BConv2D(a) => {
            let w = graph.tensor(node.inputs[1]);
            let ws = w.shape.unwrap();
            let weights = match (w.f32_data(), w.words()) {
                (Some(v), _) => quantize(&FloatTensor::new(ws, v.to_vec())),
                (_, Some(words)) => BitpackedTensor::from_words(ws, words.to_vec()).expect("validated weights"),
                _ => unreachable!("validated weight constant"),
            };
            let mut desc = BConvDescriptor::new(
                (ws.height, ws.width),
                (a.stride[0], a.stride[1]),
                ws.channels,
                ws.batch,
                a.padding,
            );
            desc.activation = a.activation;
            desc.multiplier = a.multiplier_or_one(ws.batch);
            desc.bias = a.bias_or_zero(ws.batch);
            desc.output = a.output.clone();
            let correction = match node.inputs.get(2) {
                Some(&t) => {
                    let geom = desc
                        .geometry(in_shape.height, in_shape.width)
                        .map_err(kernel_err(&node.id))?;
                    let table = graph.tensor(t).i32_data().unwrap().to_vec();
                    Some(PaddingCorrection::from_table(&geom, ws.batch, table).map_err(kernel_err(&node.id))?)
                }
                None => None,
            };
            let conv = PreparedBConv::new(desc, &weights, correction, in_shape).map_err(err)?;
            let macs = conv.macs();
            (Kernel::BConv(Box::new(conv)), macs, 0)
        }
        Op::BMaxPool2D(a) | Op::MaxPool2D(a) => {
            let geom = ConvGeometry::new(
                (in_shape.height, in_shape.width),
                (a.window[0], a.window[1]),
                (a.stride[0], a.stride[1]),
                a.padding,
            )
            .map_err(err)?;
            if node.kind() == OpKind::BMaxPool2D {
                (Kernel::BMaxPool { geom, input: in_shape }, 0, 0)
            } else {
                (Kernel::MaxPool { geom, input: in_shape }, 0, 0)
            }
        }
        Op::BatchNorm(p) => {
            let (scale, shift) = p.scale_shift();
            (Kernel::BatchNorm { scale, shift }, 0, 0)
        }
        Op::ReLU(a) => (Kernel::Relu(a.cap), 0, 0),
        Op::Add => (Kernel::Add, 0, 0),
        Op::Dense(a) => {
            let w = graph.tensor(node.inputs[1]);
            let features = in_shape.height * in_shape.width * in_shape.channels;
            let macs = (out_shape.elements() * features) as u64;
            (
                Kernel::Dense {
                    weights: w.f32_data().unwrap().to_vec(),
                    features,
                    bias: a.bias.clone(),
                },
                0,
                macs,
            )
        }
        Op::GlobalAvgPool => (Kernel::GlobalAvgPool { input: in_shape }, 0, 0),
    })
}

impl ExecutionPlan {
    /// Builds a plan for a graph. The graph is validated and shape-inferred
    /// first.
    pub fn new(mut graph: Graph) -> Result<Self, RuntimeError> {
        graph.check()?;
        for &t in &graph.outputs {
            if graph.tensor(t).is_constant() {
                return Err(RuntimeError::Graph(crate::graph::GraphError::Tensor {
                    tensor: t,
                    reason: "constant graph outputs are not supported".into(),
                }));
            }
        }
        let memory = plan_memory(&graph);
        let mut steps = Vec::with_capacity(graph.nodes.len());
        for node in &graph.nodes {
            let weight_inputs = match node.kind() {
                OpKind::Conv2D | OpKind::Dense => 1,
                OpKind::BConv2D => node.inputs.len() - 1,
                _ => 0,
            };
            let act_inputs = &node.inputs[..node.inputs.len() - weight_inputs];
            let mut inputs = Vec::with_capacity(act_inputs.len());
            for &t in act_inputs {
                match memory.buffer_of(t) {
                    Some(b) if !graph.tensor(t).is_constant() => inputs.push(b),
                    _ => return Err(unsupported(node, format!("constant activation input {t}"))),
                }
            }
            let (kernel, macs_binary, macs_float) = prepare(&graph, node)?;
            let output = memory.buffer_of(node.output()).expect("outputs are planned");
            steps.push(Step {
                node: node.id.clone(),
                kind: node.kind(),
                kernel,
                bytes_read: inputs.iter().map(|&b| memory.buffers[b].bytes()).sum(),
                bytes_written: memory.buffers[output].bytes(),
                inputs,
                output,
                macs_binary,
                macs_float,
            });
        }
        Ok(ExecutionPlan { graph, steps, memory })
    }

    /// Loads a model file.
    pub fn load(bytes: &[u8]) -> Result<Self, RuntimeError> {
        ExecutionPlan::new(crate::model::read_model(bytes)?)
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn memory(&self) -> &MemoryPlan {
        &self.memory
    }

    pub fn input_shapes(&self) -> Vec<Shape> {
        self.graph.inputs.iter().map(|&t| self.graph.shape(t)).collect()
    }

    pub fn macs(&self) -> (u64, u64) {
        self.steps
            .iter()
            .fold((0, 0), |(b, f), s| (b + s.macs_binary, f + s.macs_float))
    }

    fn arenas(&self, inputs: &[FloatTensor]) -> Result<Arenas, RuntimeError> {
        check_inputs(&self.graph, inputs)?;
        let mut arenas = Arenas {
            f: vec![0.0; self.memory.float_len],
            w: vec![0; self.memory.words_len],
        };
        for (t, x) in self.graph.inputs.iter().zip(inputs) {
            let b = &self.memory.buffers[self.memory.buffer_of(*t).unwrap()];
            arenas.f[b.offset..b.offset + b.len].copy_from_slice(x.data());
        }
        Ok(arenas)
    }

    fn outputs(&self, arenas: &Arenas) -> Vec<FloatTensor> {
        self.graph
            .outputs
            .iter()
            .map(|&t| {
                let b = &self.memory.buffers[self.memory.buffer_of(t).unwrap()];
                let shape = self.graph.shape(t);
                match b.arena {
                    Arena::Float => FloatTensor::new(shape, arenas.f[b.offset..b.offset + b.len].to_vec()),
                    Arena::Words => {
                        let mut data = vec![0.0; shape.elements()];
                        dequantize_into(&arenas.w[b.offset..b.offset + b.len], shape.channels, &mut data);
                        FloatTensor::new(shape, data)
                    }
                }
            })
            .collect()
    }

    /// Runs the model. Outputs do not depend on `threads`.
    pub fn execute(&self, inputs: &[FloatTensor], threads: usize) -> Result<Vec<FloatTensor>, RuntimeError> {
        let mut arenas = self.arenas(inputs)?;
        let mut scratch = Scratch::default();
        let mut phases = [0.0; 2];
        for step in &self.steps {
            self.run_step(step, &mut arenas, &mut scratch, threads, &mut phases)?;
        }
        Ok(self.outputs(&arenas))
    }

    /// Times every op over `runs` executions after `warmup` untimed ones.
    pub fn profile(
        &self,
        inputs: &[FloatTensor],
        runs: usize,
        warmup: usize,
        threads: usize,
    ) -> Result<Profile, RuntimeError> {
        let runs = runs.max(1);
        let mut arenas = self.arenas(inputs)?;
        let mut scratch = Scratch::default();
        let n = self.steps.len();
        let mut op_us = vec![Vec::with_capacity(runs); n];
        let mut acc_us = vec![Vec::with_capacity(runs); n];
        let mut transform_us = vec![Vec::with_capacity(runs); n];
        let mut total_us = Vec::with_capacity(runs);
        for run in 0..warmup + runs {
            let start = Instant::now();
            for (i, step) in self.steps.iter().enumerate() {
                let mut phases = [0.0; 2];
                let t = Instant::now();
                self.run_step(step, &mut arenas, &mut scratch, threads, &mut phases)?;
                let us = t.elapsed().as_secs_f64() * 1e6;
                if run >= warmup {
                    op_us[i].push(us);
                    acc_us[i].push(phases[0]);
                    transform_us[i].push(phases[1]);
                }
            }
            if run >= warmup {
                total_us.push(start.elapsed().as_secs_f64() * 1e6);
            }
        }
        let medians: Vec<f64> = op_us.iter().map(|s| median(s)).collect();
        let sum: f64 = medians.iter().sum();
        let records = self
            .steps
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let bconv = s.kind == OpKind::BConv2D;
                ProfileRecord {
                    node: s.node.clone(),
                    kind: s.kind,
                    layer: i,
                    median_us: medians[i],
                    pct: if sum > 0.0 {
                        medians[i] / sum * 100.0
                    } else {
                        100.0 / n as f64
                    },
                    accumulate_us: bconv.then(|| median(&acc_us[i])),
                    transform_us: bconv.then(|| median(&transform_us[i])),
                    bytes_read: s.bytes_read,
                    bytes_written: s.bytes_written,
                    macs_binary: s.macs_binary,
                    macs_float: s.macs_float,
                }
            })
            .collect();
        Ok(Profile {
            records,
            end_to_end_us: median(&total_us),
            runs,
        })
    }

    fn run_step(
        &self,
        step: &Step,
        arenas: &mut Arenas,
        scratch: &mut Scratch,
        threads: usize,
        phases: &mut [f64; 2],
    ) -> Result<(), RuntimeError> {
        let bufs = &self.memory.buffers;
        let ob = &bufs[step.output];
        let (fv, wv, out) = match ob.arena {
            Arena::Float => {
                let (v, o) = ReadView::split(&mut arenas.f, ob.offset, ob.len);
                (v, ReadView::whole(&arenas.w), Out::F(o))
            }
            Arena::Words => {
                let (v, o) = ReadView::split(&mut arenas.w, ob.offset, ob.len);
                (ReadView::whole(&arenas.f), v, Out::W(o))
            }
        };
        let f = |k: usize| {
            let b = &bufs[step.inputs[k]];
            debug_assert_eq!(b.arena, Arena::Float);
            fv.get(b.offset, b.len)
        };
        let w = |k: usize| {
            let b = &bufs[step.inputs[k]];
            debug_assert_eq!(b.arena, Arena::Words);
            wv.get(b.offset, b.len)
        };
        let err = kernel_err(&step.node);
        match (&step.kernel, out) {
            (Kernel::Sign, Out::F(o)) => {
                for (o, &x) in o.iter_mut().zip(f(0)) {
                    *o = bit_value(sign_bit(x));
                }
            }
            (Kernel::Quantize { channels }, Out::W(o)) => quantize_into(f(0), *channels, o),
            (Kernel::Dequantize { channels }, Out::F(o)) => dequantize_into(w(0), *channels, o),
            (Kernel::Conv { conv, input }, Out::F(o)) => {
                conv.run(f(0), *input, o, &mut scratch.im2col, threads).map_err(err)?
            }
            (Kernel::BConv(conv), out) => {
                let t0 = Instant::now();
                scratch.acc.resize(conv.accumulator_len(), 0);
                let bits = scratch.bits.get_or_insert_with(|| BitpackedMatrix::zeros(0, 0));
                conv.accumulate(w(0), bits, &mut scratch.acc, threads).map_err(err)?;
                let t1 = Instant::now();
                match out {
                    Out::F(o) => conv.transform_float(&scratch.acc, o),
                    Out::W(o) => conv.transform_bitpacked(&scratch.acc, o),
                }
                phases[0] = (t1 - t0).as_secs_f64() * 1e6;
                phases[1] = t1.elapsed().as_secs_f64() * 1e6;
            }
            (Kernel::BMaxPool { geom, input }, Out::W(o)) => bmaxpool_into(w(0), *input, geom, o),
            (Kernel::MaxPool { geom, input }, Out::F(o)) => float::maxpool2d_into(f(0), *input, geom, o),
            (Kernel::BatchNorm { scale, shift }, Out::F(o)) => float::scale_shift_into(f(0), scale, shift, o),
            (Kernel::Relu(cap), Out::F(o)) => {
                o.copy_from_slice(f(0));
                float::relu_in_place(o, *cap);
            }
            (Kernel::Add, Out::F(o)) => float::add_into(f(0), f(1), o),
            (
                Kernel::Dense {
                    weights,
                    features,
                    bias,
                },
                Out::F(o),
            ) => float::dense_into(f(0), *features, weights, bias.as_deref(), o),
            (Kernel::GlobalAvgPool { input }, Out::F(o)) => float::global_avg_pool_into(f(0), *input, o),
            _ => unreachable!("output arena follows the op signature"),
        }
        Ok(())
    }
}
