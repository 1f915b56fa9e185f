use std::time::Instant;

use anyhow::{ensure, Context, Result};
use promptpool::{
    output_shape, parallel, pool_forward, read_tensor, softmax_scores, Dtype, PoolingSpec, Shape3,
    Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::commands::emit;
use crate::config::{pick, pick_list, FileConfig};
use crate::BenchArgs;

const DEFAULT_SHAPE: [usize; 4] = [32, 24, 24, 1024];
const DEFAULT_REPS: usize = 5;
const MIN_REPS: usize = 3;

#[derive(Debug, Serialize)]
struct DegreeReport {
    parallelism: usize,
    samples_ms: Vec<f64>,
    median_ms: f64,
    tokens_per_sec: f64,
}

fn median(samples: &[f64]) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

fn synthetic(shape: [usize; 4], seed: u64) -> Result<(Tensor, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let cells = shape[0] * shape[1] * shape[2];
    let logits: Vec<f64> = (0..cells).map(|_| rng.random_range(-4.0..4.0)).collect();
    let v = Tensor::from_f32(shape.to_vec(), v)?;
    let s = softmax_scores(&Tensor::from_f64(shape[..3].to_vec(), logits)?)?;
    Ok((v, s.into_tensor().cast(Dtype::F32)))
}

/// Times `reps` forward passes on a pool of `degree` threads.
fn time_degree(
    v: &Tensor,
    s: Option<&Tensor>,
    spec: &PoolingSpec,
    degree: usize,
    reps: usize,
) -> Result<(Vec<f64>, Tensor)> {
    parallel::with_degree(degree, || {
        let mut samples = Vec::with_capacity(reps);
        let mut last = None;
        for _ in 0..reps {
            let start = Instant::now();
            let out = pool_forward(v, s, spec)?;
            samples.push(start.elapsed().as_secs_f64() * 1e3);
            last = Some(out);
        }
        Ok((samples, last.expect("reps >= 1")))
    })?
}

pub fn run(a: BenchArgs) -> Result<()> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let reps = pick(a.reps, file.reps).unwrap_or(DEFAULT_REPS);
    ensure!(
        reps >= MIN_REPS,
        "--reps must be at least {MIN_REPS}, got {reps}"
    );
    let seed = pick(a.seed, file.seed).unwrap_or(0);
    let mode = pick(a.mode, file.mode).unwrap_or_default();
    let scaling = a.scaling || file.scaling.unwrap_or(false);
    let mut degrees = pick_list(a.common.parallelism, file.parallelism.clone());
    if degrees.is_empty() {
        let available = std::thread::available_parallelism().map_or(1, |n| n.get());
        degrees = if available > 1 {
            vec![1, available]
        } else {
            vec![1]
        };
    }
    ensure!(
        degrees.iter().all(|&d| d >= 1),
        "parallelism degrees must be >= 1"
    );

    let (v, s) = match pick(a.input, file.input.clone()) {
        Some(path) => {
            let v = read_tensor(&path).with_context(|| format!("reading {}", path.display()))?;
            let s = match pick(a.scores, file.scores.clone()) {
                Some(p) => read_tensor(&p).with_context(|| format!("reading {}", p.display()))?,
                None => synthetic([v.shape()[0], v.shape()[1], v.shape()[2], 1], seed)?.1,
            };
            (v, s)
        }
        None => synthetic(pick(a.shape, file.shape).unwrap_or(DEFAULT_SHAPE), seed)?,
    };
    ensure!(
        v.rank() == 4,
        "bench input must be T x W x H x D, got {:?}",
        v.shape()
    );
    let grid = Shape3::of(&v)?;
    let file_kernel = file.kernel.clone().map(|k| k.into_vec());
    let kernel = match (a.kernel, file_kernel.as_deref()) {
        (Some(k), _) => k,
        (None, Some([k])) => *k,
        (None, Some(_)) => anyhow::bail!("bench times a single kernel"),
        (None, None) if grid.t == 1 => PoolingSpec::image().kernel,
        (None, None) => PoolingSpec::video().kernel,
    };
    let file_stride = file.stride.clone().map(|k| k.into_vec());
    let stride = match (a.stride, file_stride.as_deref()) {
        (Some(st), _) => st,
        (None, Some([st])) => *st,
        _ => kernel,
    };
    let spec = PoolingSpec::new(kernel, stride, mode)?;
    let scores = mode.needs_scores().then_some(&s);
    let out_grid = output_shape(grid, &spec)?;

    eprintln!(
        "pool_forward {grid} x {} -> {out_grid}, {} mode, {reps} reps",
        v.shape()[3],
        mode.name()
    );
    eprintln!(
        "{:>11} {:>12} {:>14}",
        "parallelism", "median ms", "tokens/s"
    );
    let mut reports = Vec::new();
    let mut reference: Option<Tensor> = None;
    let mut identical = true;
    for &degree in &degrees {
        let (samples, out) = time_degree(&v, scores, &spec, degree, reps)?;
        match &reference {
            Some(r) => identical &= r.bit_eq(&out),
            None => reference = Some(out),
        }
        let med = median(&samples);
        let tps = grid.tokens() as f64 / (med / 1e3);
        eprintln!("{degree:>11} {med:>12.3} {tps:>14.0}");
        reports.push(DegreeReport {
            parallelism: degree,
            samples_ms: samples,
            median_ms: med,
            tokens_per_sec: tps,
        });
    }
    eprintln!(
        "outputs {} across degrees",
        if identical { "identical" } else { "DIFFER" }
    );

    let probe = if scaling {
        let mut probe_stride = stride;
        probe_stride[2] = (stride[2] / 2).max(1);
        if probe_stride == stride {
            Some(json!({"skipped": "h stride is already 1"}))
        } else {
            let probe_spec = PoolingSpec::new(kernel, probe_stride, mode)?;
            let probe_grid = output_shape(grid, &probe_spec)?;
            let degree = *degrees.iter().max().expect("non-empty");
            let base = reports
                .iter()
                .find(|r| r.parallelism == degree)
                .expect("timed above")
                .median_ms;
            let (samples, _) = time_degree(&v, scores, &probe_spec, degree, reps)?;
            let probe_ms = median(&samples);
            let cell_ratio = probe_grid.tokens() as f64 / out_grid.tokens() as f64;
            let time_ratio = probe_ms / base;
            eprintln!(
                "scaling: stride {stride:?} -> {probe_stride:?}, cells x{cell_ratio:.2}, time x{time_ratio:.2}"
            );
            Some(json!({
                "axis": "h",
                "parallelism": degree,
                "stride": probe_stride,
                "base_cells": out_grid.tokens(),
                "probe_cells": probe_grid.tokens(),
                "cell_ratio": cell_ratio,
                "base_median_ms": base,
                "probe_median_ms": probe_ms,
                "probe_samples_ms": samples,
                "time_ratio": time_ratio,
                "time_grew": time_ratio > 1.0,
            }))
        }
    } else {
        None
    };

    let report = json!({
        "command": "bench",
        "shape": v.shape(),
        "kernel": kernel,
        "stride": stride,
        "mode": mode.name(),
        "reps": reps,
        "input_tokens": grid.tokens(),
        "output_tokens": out_grid.tokens(),
        "results": reports,
        "identical": identical,
        "scaling": probe,
    });
    if let Some(path) = pick(a.common.output, file.output) {
        std::fs::write(&path, format!("{report}\n"))
            .with_context(|| format!("writing {}", path.display()))?;
    }
    emit(&report);
    ensure!(
        identical,
        "pooled outputs differ across parallelism degrees"
    );
    Ok(())
}
