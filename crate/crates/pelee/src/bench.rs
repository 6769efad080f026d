//! Latency measurement: batch-1 sequential image processing, repeated runs,
//! wall-clock statistics. The timed region covers per-image normalization
//! and graph execution; graph construction, weight loading, the optional
//! batch-norm folding and warmup are all outside it.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fold::fold_batchnorm;
use crate::graph::Graph;
use crate::store::WeightStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub model: String,
    pub input_dims: [usize; 4],
    pub images_per_run: usize,
    pub runs: usize,
    pub warmup_runs: usize,
    /// Whether batch-norm folding was applied before timing.
    pub fused: bool,
    /// Kernel-internal worker threads in use.
    pub threads: usize,
    /// Wall time of each timed run, seconds.
    pub run_seconds: Vec<f64>,
    /// Mean latency per image, milliseconds.
    pub mean_latency_ms: f64,
    /// Population standard deviation of the per-run image latencies, ms.
    pub stddev_latency_ms: f64,
    pub images_per_second: f64,
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialization");
        s.push('\n');
        s
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "model: {} ({}, input {}x{}x{}x{}, {} threads)\n",
            self.model,
            if self.fused { "fused" } else { "unfused" },
            self.input_dims[0],
            self.input_dims[1],
            self.input_dims[2],
            self.input_dims[3],
            self.threads
        ));
        out.push_str(&format!(
            "protocol: {} images per run x {} runs, batch size 1, {} warmup run(s)\n",
            self.images_per_run, self.runs, self.warmup_runs
        ));
        for (i, s) in self.run_seconds.iter().enumerate() {
            out.push_str(&format!("run {:>2}: {:>9.4} s\n", i + 1, s));
        }
        out.push_str(&format!(
            "mean latency: {:.3} ms/image (stddev {:.3} ms), {:.2} images/s\n",
            self.mean_latency_ms, self.stddev_latency_ms, self.images_per_second
        ));
        out
    }
}

/// Per-image input normalization, part of the timed region.
fn normalize(input: &Tensor) -> Tensor {
    let mut t = input.clone();
    for v in t.data_mut() {
        *v = (*v - 0.5) * 2.0;
    }
    t
}

/// Run the benchmark protocol: `warmup` untimed runs, then `runs` timed
/// runs of `images_per_run` sequential single-image inferences over
/// pre-generated seeded random inputs.
#[allow(clippy::too_many_arguments)]
pub fn run_benchmark(
    model: &str,
    graph: &Graph,
    weights: &WeightStore,
    input_dims: [usize; 4],
    images_per_run: usize,
    runs: usize,
    warmup: usize,
    fused: bool,
    seed: u64,
) -> Result<BenchReport> {
    if input_dims[0] != 1 {
        return Err(Error::Invalid(format!(
            "benchmark protocol is batch size 1, got batch {}",
            input_dims[0]
        )));
    }
    if images_per_run == 0 || runs == 0 {
        return Err(Error::Invalid("images_per_run and runs must be positive".into()));
    }

    let (graph, weights) = if fused {
        let (g, w) = fold_batchnorm(graph, weights)?;
        (g, w)
    } else {
        (graph.clone(), weights.clone())
    };
    graph.infer_shapes(input_dims)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len: usize = input_dims.iter().product();
    let images: Vec<Tensor> = (0..images_per_run)
        .map(|_| {
            Tensor::new(
                input_dims,
                (0..len).map(|_| rng.random_range(0.0f32..1.0)).collect(),
            )
            .expect("dims match data")
        })
        .collect();

    let process_all = |graph: &Graph, weights: &WeightStore| -> Result<()> {
        for image in &images {
            let normalized = normalize(image);
            let out = graph.execute(weights, &normalized)?;
            std::hint::black_box(&out);
        }
        Ok(())
    };

    for _ in 0..warmup {
        process_all(&graph, &weights)?;
    }

    let mut run_seconds = Vec::with_capacity(runs);
    for _ in 0..runs {
        let start = Instant::now();
        process_all(&graph, &weights)?;
        run_seconds.push(start.elapsed().as_secs_f64());
    }

    let latencies_ms: Vec<f64> = run_seconds
        .iter()
        .map(|s| s * 1000.0 / images_per_run as f64)
        .collect();
    let mean = latencies_ms.iter().sum::<f64>() / runs as f64;
    let var = latencies_ms.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / runs as f64;
    let mean_run = run_seconds.iter().sum::<f64>() / runs as f64;

    Ok(BenchReport {
        model: model.to_string(),
        input_dims,
        images_per_run,
        runs,
        warmup_runs: warmup,
        fused,
        threads: rayon::current_num_threads(),
        run_seconds,
        mean_latency_ms: mean,
        stddev_latency_ms: var.sqrt(),
        images_per_second: images_per_run as f64 / mean_run,
    })
}
