//! Command-line front end. Every subcommand maps 1:1 onto a library
//! operation; see the README for the on-disk formats.
//!
//! Exit codes: 0 success, 2 usage error, 3 validation/shape error,
//! 4 i/o or file-format error.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::bench::run_benchmark;
use crate::cost::{count_flops, summarize};
use crate::detector::{self, DetectorConfig};
use crate::error::{Error, Result};
use crate::fold::fold_batchnorm;
use crate::formats;
use crate::graph::Graph;
use crate::store::WeightStore;
use crate::tensor::Tensor;
use crate::zoo;

#[derive(Parser)]
#[command(
    name = "pelee",
    about = "Convolutional network graph engine: build, analyze, fuse, run, benchmark",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ModelSource {
    /// Model preset name (see `build --list`).
    #[arg(long, conflicts_with = "graph")]
    model: Option<String>,
    /// Graph JSON file produced by `build`.
    #[arg(long)]
    graph: Option<PathBuf>,
}

impl ModelSource {
    fn load(&self) -> Result<Graph> {
        match (&self.model, &self.graph) {
            (Some(name), None) => zoo::build_preset(name),
            (None, Some(path)) => Graph::from_json(&std::fs::read_to_string(path)?),
            _ => Err(Error::Invalid(
                "exactly one of --model or --graph is required".into(),
            )),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Construct a model graph and optionally a deterministic random
    /// weight store.
    Build {
        /// Model preset name.
        #[arg(long, required_unless_present = "list")]
        model: Option<String>,
        /// List available presets and exit.
        #[arg(long)]
        list: bool,
        /// Where to write the graph JSON.
        #[arg(long)]
        graph_out: Option<PathBuf>,
        /// Weight initialization scheme; only "random" is available.
        #[arg(long)]
        init: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Weight store prefix (writes <prefix>.manifest.json and <prefix>.bin).
        #[arg(long)]
        weights_out: Option<PathBuf>,
    },
    /// Per-node table of output shapes, parameters and MACs.
    Summary {
        #[command(flatten)]
        source: ModelSource,
        /// Square input resolution.
        #[arg(long, default_value_t = 224)]
        input: usize,
        /// Also write the machine-readable report here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Total multiply-accumulates, parameters and convolution-layer count.
    Flops {
        #[command(flatten)]
        source: ModelSource,
        #[arg(long, default_value_t = 224)]
        input: usize,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Fold batch normalization into the preceding convolutions.
    Fuse {
        #[command(flatten)]
        source: ModelSource,
        /// Weight store prefix to read (defaults to seeded random weights).
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        graph_out: Option<PathBuf>,
        #[arg(long)]
        weights_out: Option<PathBuf>,
    },
    /// Execute a graph on one input tensor.
    Run {
        #[command(flatten)]
        source: ModelSource,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Input tensor file; omit to use a seeded random input.
        #[arg(long)]
        input_file: Option<PathBuf>,
        /// Square input resolution for the random input.
        #[arg(long, default_value_t = 224)]
        input: usize,
        /// Write the first output tensor here instead of printing a summary.
        #[arg(long)]
        output: Option<PathBuf>,
        /// How many top classes to print for classifier outputs.
        #[arg(long, default_value_t = 5)]
        top: usize,
    },
    /// Latency benchmark: sequential batch-1 images, repeated runs.
    Bench {
        #[command(flatten)]
        source: ModelSource,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 224)]
        input: usize,
        #[arg(long, default_value_t = 100)]
        images: usize,
        #[arg(long, default_value_t = 10)]
        runs: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        /// Fold batch normalization before timing.
        #[arg(long)]
        fused: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Generate the detector default boxes.
    Priors {
        #[arg(long, default_value_t = 304)]
        input_size: usize,
        /// Include the stride-8 38x38 feature map.
        #[arg(long)]
        use_38x38: bool,
        /// Write one "cx cy w h" line per prior here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the detection pipeline and print one line per detection.
    Detect {
        /// Detector preset (default pelee-ssd) or graph file.
        #[command(flatten)]
        source: ModelSource,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Binary PPM (P6) image input.
        #[arg(long, conflicts_with = "input_file")]
        image: Option<PathBuf>,
        /// Tensor file input.
        #[arg(long)]
        input_file: Option<PathBuf>,
        /// Per-channel normalization mean for --image.
        #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.5, 0.5, 0.5])]
        mean: Vec<f32>,
        /// Per-channel normalization std for --image.
        #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.5, 0.5, 0.5])]
        std: Vec<f32>,
        #[arg(long, default_value_t = 0.01)]
        score_threshold: f32,
        #[arg(long, default_value_t = 0.45)]
        nms_iou: f32,
        #[arg(long, default_value_t = 200)]
        top_k: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cosine learning-rate annealing value at one epoch.
    Lr {
        #[arg(long)]
        epoch: u32,
        #[arg(long)]
        base: f64,
        #[arg(long, default_value_t = 120)]
        total: u32,
    },
}

/// Parse arguments and dispatch; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints its own message; 2 for usage errors, 0 for --help
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_weights(graph: &Graph, prefix: &Option<PathBuf>, seed: u64) -> Result<WeightStore> {
    match prefix {
        Some(p) => WeightStore::load(p),
        None => WeightStore::random_for(graph, seed),
    }
}

fn write_or_print(path: &Option<PathBuf>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Build {
            model,
            list,
            graph_out,
            init,
            seed,
            weights_out,
        } => {
            if list {
                for name in zoo::PRESET_NAMES {
                    println!("{name}");
                }
                return Ok(());
            }
            let model = model.expect("clap enforces --model");
            let graph = zoo::build_preset(&model)?;
            println!(
                "{model}: {} nodes, {} conv layers",
                graph.len(),
                graph.conv_layer_count()
            );
            if let Some(path) = &graph_out {
                std::fs::write(path, graph.to_json())?;
                println!("graph written to {}", path.display());
            }
            match init.as_deref() {
                None => {}
                Some("random") => {
                    let prefix = weights_out.ok_or_else(|| {
                        Error::Invalid("--init random requires --weights-out".into())
                    })?;
                    let store = WeightStore::random_for(&graph, seed)?;
                    store.save(&prefix)?;
                    println!(
                        "{} weight tensors written to {}.manifest.json / {}.bin",
                        store.len(),
                        prefix.display(),
                        prefix.display()
                    );
                }
                Some(other) => {
                    return Err(Error::Invalid(format!(
                        "unknown init scheme '{other}' (only 'random' is available)"
                    )));
                }
            }
            Ok(())
        }
        Command::Summary { source, input, json } => {
            let graph = source.load()?;
            let dims = [1, 3, input, input];
            print!("{}", summarize(&graph, dims)?);
            if let Some(path) = json {
                std::fs::write(path, count_flops(&graph, dims)?.to_json())?;
            }
            Ok(())
        }
        Command::Flops { source, input, json } => {
            let graph = source.load()?;
            let report = count_flops(&graph, [1, 3, input, input])?;
            println!(
                "{:.1}M macs, {:.2}M params ({:.2}M learned), {} conv layers @ {input}x{input}",
                report.total_macs as f64 / 1e6,
                report.total_params as f64 / 1e6,
                report.total_params_learned as f64 / 1e6,
                report.conv_layer_count
            );
            if let Some(path) = json {
                std::fs::write(path, report.to_json())?;
            }
            Ok(())
        }
        Command::Fuse {
            source,
            weights,
            seed,
            graph_out,
            weights_out,
        } => {
            let graph = source.load()?;
            let store = load_weights(&graph, &weights, seed)?;
            let before = graph.len();
            let (folded, fused_store) = fold_batchnorm(&graph, &store)?;
            println!(
                "folded {} batch-norm nodes ({} -> {} nodes)",
                before - folded.len(),
                before,
                folded.len()
            );
            if let Some(path) = &graph_out {
                std::fs::write(path, folded.to_json())?;
            }
            if let Some(prefix) = &weights_out {
                fused_store.save(prefix)?;
            }
            Ok(())
        }
        Command::Run {
            source,
            weights,
            seed,
            input_file,
            input,
            output,
            top,
        } => {
            let graph = source.load()?;
            let store = load_weights(&graph, &weights, seed)?;
            let tensor = match &input_file {
                Some(path) => formats::read_tensor(path)?,
                None => random_input(seed, [1, 3, input, input]),
            };
            let outputs = graph.execute(&store, &tensor)?;
            if let Some(path) = &output {
                let (name, first) = outputs.iter().next().ok_or_else(|| {
                    Error::Graph("graph declares no outputs".into())
                })?;
                formats::write_tensor(path, first)?;
                println!("output '{name}' written to {}", path.display());
                return Ok(());
            }
            for (name, tensor) in &outputs {
                let [n, c, h, w] = tensor.dims();
                println!("{name}: {n}x{c}x{h}x{w}");
                if h == 1 && w == 1 && c > 1 {
                    let mut scored: Vec<(usize, f32)> =
                        tensor.data().iter().copied().enumerate().collect();
                    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                    for (class, score) in scored.into_iter().take(top) {
                        println!("  class {class}: {score:.6}");
                    }
                }
            }
            Ok(())
        }
        Command::Bench {
            source,
            weights,
            input,
            images,
            runs,
            warmup,
            fused,
            seed,
            json,
        } => {
            let graph = source.load()?;
            let store = load_weights(&graph, &weights, seed)?;
            let name = source.model.clone().unwrap_or_else(|| "graph".to_string());
            let report = run_benchmark(
                &name,
                &graph,
                &store,
                [1, 3, input, input],
                images,
                runs,
                warmup,
                fused,
                seed,
            )?;
            print!("{}", report.table());
            if let Some(path) = json {
                std::fs::write(path, report.to_json())?;
            }
            Ok(())
        }
        Command::Priors {
            input_size,
            use_38x38,
            out,
        } => {
            let cfg = DetectorConfig {
                input_size,
                use_38x38,
                ..DetectorConfig::default()
            };
            let priors = detector::generate_priors(&cfg)?;
            let mut text = String::new();
            for p in &priors {
                text.push_str(&format!("{:.6} {:.6} {:.6} {:.6}\n", p.cx, p.cy, p.w, p.h));
            }
            println!("{} priors", priors.len());
            if let Some(path) = &out {
                std::fs::write(path, text)?;
            } else {
                print!("{text}");
            }
            Ok(())
        }
        Command::Detect {
            source,
            weights,
            seed,
            image,
            input_file,
            mean,
            std,
            score_threshold,
            nms_iou,
            top_k,
            out,
        } => {
            let graph = match (&source.model, &source.graph) {
                (None, None) => zoo::build_preset("pelee-ssd")?,
                _ => source.load()?,
            };
            let cfg = DetectorConfig {
                score_threshold,
                nms_iou_threshold: nms_iou,
                top_k,
                ..DetectorConfig::default()
            };
            let store = load_weights(&graph, &weights, seed)?;
            let tensor = match (&image, &input_file) {
                (Some(path), None) => formats::read_ppm(
                    path,
                    [mean[0], mean[1], mean[2]],
                    [std[0], std[1], std[2]],
                )?,
                (None, Some(path)) => formats::read_tensor(path)?,
                (None, None) => {
                    random_input(seed, [1, 3, cfg.input_size, cfg.input_size])
                }
                _ => unreachable!("clap conflicts_with"),
            };
            let [_, _, h, w] = tensor.dims();
            if h != cfg.input_size || w != cfg.input_size {
                return Err(Error::Shape(format!(
                    "detector expects {0}x{0} input, image is {h}x{w}",
                    cfg.input_size
                )));
            }
            let outputs = graph.execute(&store, &tensor)?;
            let (conf, loc) = detector::gather_predictions(&outputs, &cfg)?;
            let priors = detector::generate_priors(&cfg)?;
            let detections = detector::postprocess(&conf, &loc, &priors, &cfg)?;
            eprintln!("{} detections", detections.len());
            write_or_print(&out, &detector::format_detections(&detections))
        }
        Command::Lr { epoch, base, total } => {
            println!("{}", zoo::cosine_lr(epoch, base, total)?);
            Ok(())
        }
    }
}

fn random_input(seed: u64, dims: [usize; 4]) -> Tensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let len = dims.iter().product();
    Tensor::new(
        dims,
        (0..len).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
    )
    .expect("dims match data")
}

// keep Path import used on all platforms
#[allow(unused)]
fn _p(_: &Path) {}
