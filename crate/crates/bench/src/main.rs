use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use binconv_bench::emacs::{EMacRow, DEFAULT_FACTOR};
use binconv_bench::factory::{quicknet_like, random_bnn, shortcut_study, single_conv, ShortcutVariant, SingleConv};
use binconv_bench::report::{format_profile, format_reports, write_profile_csv, TensorFile};
use binconv_bench::sweep::{format_summary, run_sweep, summarize, write_csv, SweepConfig};
use binconv_bench::{default_threads, random_inputs};
use binconv_core::converter::{convert, ConvertOptions, PASSES};
use binconv_core::graph::{parse_training_graph, Graph, PadValue};
use binconv_core::model::{read_model, MAGIC};
use binconv_core::runtime::ExecutionPlan;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "binconv",
    version,
    about = "Binarized network converter, runtime and benchmarks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Threads {
    /// Kernel threads [default: available cores].
    #[arg(long, env = "BINCONV_THREADS")]
    threads: Option<usize>,
}

impl Threads {
    fn get(&self) -> usize {
        self.threads.unwrap_or_else(default_threads).max(1)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Convert a training graph (or a model) into an inference model.
    Convert {
        input: PathBuf,
        output: PathBuf,
        /// Check every pass against the float oracle.
        #[arg(long)]
        verify: bool,
        /// Seed for verification probes.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the pass report here as well.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Run a model and write its outputs as JSON.
    Run {
        model: PathBuf,
        /// JSON array of {"shape": [n, h, w, c], "data": [...]} tensors.
        /// Seeded random inputs are used when absent.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        threads: Threads,
    },
    /// Time every op of a model.
    Profile {
        model: PathBuf,
        #[arg(long, default_value_t = 10)]
        runs: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        /// Per-op CSV destination; printed to stdout when absent.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        threads: Threads,
    },
    /// Binary against float single-convolution latency grid.
    Sweep {
        /// JSON sweep config; the default grid is used when absent.
        config: Option<PathBuf>,
        /// CSV destination; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        threads: Threads,
    },
    /// Generate a training graph with random weights.
    Factory {
        #[command(subcommand)]
        kind: FactoryKind,
        #[arg(long, global = true, default_value_t = 0)]
        seed: u64,
        /// Output path for the graph JSON.
        #[arg(long, global = true)]
        out: Option<PathBuf>,
    },
    /// Equivalent MACs and measured latency of converted models.
    Emacs {
        #[arg(required = true)]
        models: Vec<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_FACTOR)]
        factor: f64,
        #[arg(long, default_value_t = 5)]
        runs: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[command(flatten)]
        threads: Threads,
    },
}

#[derive(Subcommand)]
enum FactoryKind {
    /// Residual binary network with a float stem and transitions.
    Quicknet {
        /// Blocks per section.
        #[arg(long, value_delimiter = ',', default_value = "4,4,4,4")]
        n: Vec<usize>,
        /// Filters per section.
        #[arg(long, value_delimiter = ',', default_value = "32,64,256,512")]
        k: Vec<usize>,
        #[arg(long, default_value_t = 224)]
        input_hw: usize,
        #[arg(long, default_value_t = 1000)]
        classes: usize,
    },
    /// ResNet18-like network for the shortcut latency study.
    Shortcut {
        #[arg(value_enum)]
        variant: ShortcutVariant,
        #[arg(long, default_value_t = 224)]
        input_hw: usize,
        #[arg(long, default_value_t = 1000)]
        classes: usize,
    },
    /// A single convolution.
    SingleConv {
        #[arg(long)]
        hw: usize,
        #[arg(long)]
        cin: usize,
        #[arg(long)]
        cout: usize,
        #[arg(long, default_value_t = 3)]
        kernel: usize,
        #[arg(long, default_value_t = 1)]
        stride: usize,
        /// Build a float convolution instead of a binary one.
        #[arg(long)]
        float: bool,
        /// Zero-pad the binary convolution instead of one-padding it.
        #[arg(long)]
        zero_pad: bool,
    },
    /// Small random network covering every op.
    Random,
}

fn read_graph(path: &Path) -> Result<Graph> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.starts_with(MAGIC) {
        return read_model(&bytes).with_context(|| format!("loading model {}", path.display()));
    }
    let text = String::from_utf8(bytes).context("training graph is not UTF-8")?;
    parse_training_graph(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_plan(path: &Path) -> Result<ExecutionPlan> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    ExecutionPlan::load(&bytes).with_context(|| format!("loading model {}", path.display()))
}

fn sink(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

/// Human-readable summaries go to stdout unless stdout carries the CSV.
fn summary(csv_on_stdout: bool, text: &str) {
    if csv_on_stdout {
        eprint!("{text}");
    } else {
        print!("{text}");
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Convert {
            input,
            output,
            verify,
            seed,
            report,
            inject_fault,
        } => {
            let graph = read_graph(&input)?;
            let fault_after = match inject_fault {
                Some(name) => match PASSES.iter().find(|&&p| p == name) {
                    Some(&p) => Some(p),
                    None => bail!("unknown pass `{name}`"),
                },
                None => None,
            };
            let options = ConvertOptions {
                verify,
                seed,
                fault_after,
            };
            let conversion = convert(&graph, &options)?;
            fs::write(&output, conversion.to_bytes()).with_context(|| format!("writing {}", output.display()))?;
            let text = format_reports(&conversion.reports);
            print!("{text}");
            if let Some(p) = report {
                fs::write(&p, &text).with_context(|| format!("writing {}", p.display()))?;
            }
        }
        Command::Run {
            model,
            input,
            seed,
            out,
            threads,
        } => {
            let plan = load_plan(&model)?;
            let inputs = match input {
                Some(p) => {
                    let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    let files: Vec<TensorFile> = serde_json::from_str(&text).context("parsing input tensors")?;
                    files.into_iter().map(TensorFile::into_tensor).collect::<Result<_>>()?
                }
                None => random_inputs(&plan, seed),
            };
            let outputs = plan.execute(&inputs, threads.get())?;
            let files: Vec<TensorFile> = outputs.iter().map(TensorFile::from_tensor).collect();
            let mut w = sink(out.as_deref())?;
            serde_json::to_writer(&mut w, &files)?;
            writeln!(w)?;
        }
        Command::Profile {
            model,
            runs,
            warmup,
            csv,
            seed,
            threads,
        } => {
            if runs == 0 {
                bail!("--runs must be at least 1");
            }
            let plan = load_plan(&model)?;
            let inputs = random_inputs(&plan, seed);
            let profile = plan.profile(&inputs, runs, warmup, threads.get())?;
            write_profile_csv(&profile, sink(csv.as_deref())?)?;
            summary(csv.is_none(), &format_profile(&profile));
        }
        Command::Sweep { config, out, threads } => {
            let config: SweepConfig = match config {
                Some(p) => {
                    let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    serde_json::from_str(&text).context("parsing sweep config")?
                }
                None => SweepConfig::default(),
            };
            let rows = run_sweep(&config, threads.get(), |r| {
                eprintln!(
                    "{}x{}x{} k{}: binary {:?} us, float {:?} us",
                    r.spatial, r.spatial, r.channels, r.kernel, r.binary_us, r.float_us
                )
            })?;
            write_csv(&rows, sink(out.as_deref())?)?;
            summary(out.is_none(), &format_summary(&summarize(&rows)));
        }
        Command::Factory { kind, seed, out } => {
            let graph = match kind {
                FactoryKind::Quicknet {
                    n,
                    k,
                    input_hw,
                    classes,
                } => quicknet_like(&n, &k, input_hw, classes, seed)?,
                FactoryKind::Shortcut {
                    variant,
                    input_hw,
                    classes,
                } => shortcut_study(variant, input_hw, classes, seed)?,
                FactoryKind::SingleConv {
                    hw,
                    cin,
                    cout,
                    kernel,
                    stride,
                    float,
                    zero_pad,
                } => single_conv(
                    SingleConv {
                        hw,
                        in_channels: cin,
                        out_channels: cout,
                        kernel,
                        stride,
                        binary: !float,
                        pad: if zero_pad { PadValue::Zero } else { PadValue::One },
                    },
                    seed,
                )?,
                FactoryKind::Random => random_bnn(seed),
            };
            let mut w = sink(out.as_deref())?;
            w.write_all(graph.to_json().as_bytes())?;
            writeln!(w)?;
        }
        Command::Emacs {
            models,
            factor,
            runs,
            warmup,
            csv,
            threads,
        } => {
            if factor.is_nan() || factor <= 0.0 {
                bail!("--factor must be positive");
            }
            let mut rows = Vec::new();
            for path in &models {
                let plan = load_plan(path)?;
                let (binary, float) = plan.macs();
                let profile = plan.profile(&random_inputs(&plan, 0), runs.max(1), warmup, threads.get())?;
                rows.push(EMacRow::new(
                    path.display().to_string(),
                    binary,
                    float,
                    factor,
                    profile.end_to_end_us,
                ));
            }
            let mut w = csv::Writer::from_writer(sink(csv.as_deref())?);
            for r in &rows {
                w.serialize(r)?;
            }
            w.flush()?;
            let mut text = format!("eMACs with {factor} binary MACs per float MAC\n");
            for r in &rows {
                text += &format!(
                    "  {:<40} binary {:>14} float {:>12} eMACs {:>14.0} latency {:>10.1} us\n",
                    r.model, r.binary_macs, r.float_macs, r.emacs, r.latency_us
                );
            }
            summary(csv.is_none(), &text);
        }
    }
    Ok(())
}
