//! Parameter, activation-memory and FLOP accounting, plus the latency
//! benchmark protocol.
//!
//! FLOPs count a multiply-accumulate as two operations. Elementwise layers
//! (BatchNorm, ReLU, residual add) cost one operation per output element,
//! except BatchNorm which costs two (scale and shift). Global average pooling
//! costs one addition per input element. Memory is the sum of every layer's
//! output activation at batch size 1, 4 bytes per value.

use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::models::Model;
use crate::nn::{LayerDesc, LayerKind};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerStats {
    pub name: String,
    pub kind: &'static str,
    pub output_shape: Vec<usize>,
    pub params: usize,
    pub memory_bytes: usize,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ModelStats {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerStats>,
    pub total_params: usize,
    pub total_memory_bytes: usize,
    pub total_flops: u64,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn kind_name(kind: &LayerKind) -> &'static str {
    match kind {
        LayerKind::Conv2d { .. } => "conv2d",
        LayerKind::BatchNorm { .. } => "batchnorm",
        LayerKind::Relu => "relu",
        LayerKind::Add => "add",
        LayerKind::GlobalAvgPool => "avgpool",
        LayerKind::Dense { .. } => "dense",
    }
}

/// Closed-form `(params, flops)` for one primitive layer.
pub fn layer_cost(desc: &LayerDesc) -> Result<(usize, u64)> {
    let out = numel(&desc.output_shape);
    let bad = |why: &str| Error::config("layer", format!("`{}`: {why}", desc.name));
    Ok(match desc.kind {
        LayerKind::Conv2d {
            in_channels,
            out_channels,
            kernel: (kh, kw),
            groups,
            bias,
            ..
        } => {
            if groups == 0 || in_channels % groups != 0 || desc.output_shape.len() != 3 {
                return Err(bad("inconsistent convolution description"));
            }
            let per_out = in_channels / groups * kh * kw;
            let params = out_channels * per_out + if bias { out_channels } else { 0 };
            let mut flops = 2 * out as u64 * per_out as u64;
            if bias {
                flops += out as u64;
            }
            (params, flops)
        }
        LayerKind::Dense {
            in_features,
            out_features,
            bias,
        } => {
            let params = in_features * out_features + if bias { out_features } else { 0 };
            let mut flops = 2 * (in_features * out_features) as u64;
            if bias {
                flops += out_features as u64;
            }
            (params, flops)
        }
        LayerKind::BatchNorm { channels } => (2 * channels, 2 * out as u64),
        LayerKind::Relu | LayerKind::Add => (0, out as u64),
        LayerKind::GlobalAvgPool => (0, numel(&desc.input_shape) as u64),
    })
}

/// Per-layer statistics at a per-sample input shape `[C, H, W]`.
///
/// Every parameter entry of the model must be claimed by exactly one layer
/// and each layer's closed-form count must match its stored tensors.
pub fn analyze(model: &Model, input_shape: &[usize]) -> Result<ModelStats> {
    let descs = model.describe_at(input_shape)?;
    let mut claimed = std::collections::HashSet::new();
    let mut layers = Vec::with_capacity(descs.len());
    for d in &descs {
        let (params, flops) = layer_cost(d)?;
        let mut stored = 0;
        for n in &d.param_names {
            stored += model.params.get(n)?.numel();
            if !claimed.insert(n.as_str()) {
                return Err(Error::config(
                    "layer",
                    format!("parameter `{n}` claimed by two layers"),
                ));
            }
        }
        if stored != params {
            return Err(Error::config(
                "layer",
                format!(
                    "`{}` closed form gives {params} parameters, store holds {stored}",
                    d.name
                ),
            ));
        }
        layers.push(LayerStats {
            name: d.name.clone(),
            kind: kind_name(&d.kind),
            output_shape: d.output_shape.clone(),
            params,
            memory_bytes: 4 * numel(&d.output_shape),
            flops,
        });
    }
    let total_params = layers.iter().map(|l| l.params).sum();
    if total_params != model.params.param_count() {
        return Err(Error::config(
            "layer",
            format!(
                "layers account for {total_params} parameters, store holds {}",
                model.params.param_count()
            ),
        ));
    }
    Ok(ModelStats {
        input_shape: input_shape.to_vec(),
        total_memory_bytes: layers.iter().map(|l| l.memory_bytes).sum(),
        total_flops: layers.iter().map(|l| l.flops).sum(),
        total_params,
        layers,
    })
}

impl ModelStats {
    pub fn memory_mb(&self) -> f64 {
        self.total_memory_bytes as f64 / (1024.0 * 1024.0)
    }

    pub fn mflops(&self) -> f64 {
        self.total_flops as f64 / 1e6
    }

    /// Aligned per-layer table with a totals row.
    pub fn to_table(&self) -> String {
        let w = self
            .layers
            .iter()
            .map(|l| l.name.len())
            .max()
            .unwrap_or(4)
            .max(5);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<w$}  {:<9}  {:>14}  {:>10}  {:>12}  {:>14}",
            "layer", "kind", "output", "params", "memory (B)", "flops"
        );
        for l in &self.layers {
            let shape = l
                .output_shape
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x");
            let _ = writeln!(
                s,
                "{:<w$}  {:<9}  {:>14}  {:>10}  {:>12}  {:>14}",
                l.name, l.kind, shape, l.params, l.memory_bytes, l.flops
            );
        }
        let _ = writeln!(
            s,
            "{:<w$}  {:<9}  {:>14}  {:>10}  {:>12}  {:>14}",
            "total", "", "", self.total_params, self.total_memory_bytes, self.total_flops
        );
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchConfig {
    pub warmup: usize,
    pub iters: usize,
    pub repeats: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            warmup: 100,
            iters: 1000,
            repeats: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub warmup: usize,
    pub iters: usize,
    /// Mean single-sample latency of each repeat, milliseconds.
    pub repeat_means_ms: Vec<f64>,
    pub mean_ms: f64,
    /// Sample standard deviation across repeats (0 for one repeat).
    pub std_ms: f64,
}

/// Times single-sample eval-mode forward passes of `model`.
pub fn bench_inference(
    model: &Model,
    input_shape: &[usize],
    cfg: BenchConfig,
) -> Result<BenchReport> {
    if cfg.iters == 0 || cfg.repeats == 0 {
        return Err(Error::config(
            "bench",
            "iters and repeats must be at least 1",
        ));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(input_shape);
    let n = numel(&shape);
    let x = Tensor::new(
        &shape,
        (0..n).map(|i| ((i % 17) as f32 - 8.0) / 8.0).collect(),
    )?;
    for _ in 0..cfg.warmup {
        std::hint::black_box(model.infer_logits(&x)?);
    }
    let mut means = Vec::with_capacity(cfg.repeats);
    for _ in 0..cfg.repeats {
        let t = Instant::now();
        for _ in 0..cfg.iters {
            std::hint::black_box(model.infer_logits(&x)?);
        }
        let elapsed = t.elapsed();
        if elapsed.is_zero() {
            log::warn!("benchmark repeat measured zero duration; clock resolution too coarse");
        }
        means.push(elapsed.as_secs_f64() * 1e3 / cfg.iters as f64);
    }
    let (mean_ms, std_ms) = mean_std(&means);
    Ok(BenchReport {
        warmup: cfg.warmup,
        iters: cfg.iters,
        repeat_means_ms: means,
        mean_ms,
        std_ms,
    })
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
