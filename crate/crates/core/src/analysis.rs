//! Parameter counts, multiply-accumulate estimates and forward latency.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::models::{Model, INPUT_CHANNELS};
use crate::params::ParamGroup;
use crate::tensor::{Mode, Real, Tensor};

/// Per-layer budget; a layer is a parameter name minus its last segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerBudget {
    pub name: String,
    pub params: usize,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    /// Convolution kernel elements only (no batch norm, bias or head).
    pub conv_kernel: usize,
    pub layers: Vec<(String, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopCount {
    pub input_size: usize,
    pub macs: u64,
    /// `2 * macs`.
    pub flops: u64,
    pub layers: Vec<(String, u64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub reps: usize,
    pub warmup: usize,
    pub median_ms: f64,
    pub samples_ms: Vec<f64>,
    pub machine: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub model: String,
    pub algebra: String,
    pub backend: String,
    pub classes: usize,
    pub phm_n: Option<usize>,
    pub total_params: usize,
    pub conv_kernel_params: usize,
    pub macs: u64,
    pub flops: u64,
    pub input_shape: [usize; 4],
    pub layers: Vec<LayerBudget>,
    pub latency: Option<LatencyReport>,
}

fn layer_of(param: &str) -> &str {
    param.rsplit_once('.').map_or(param, |(layer, _)| layer)
}

/// Counts every trainable element: kernels, L matrices, PHM blocks, batch
/// norm affine terms and biases.
pub fn count_params<T: Real>(model: &Model<T>) -> ParamCount {
    let mut layers: Vec<(String, usize)> = Vec::new();
    let mut conv_kernel = 0;
    for (_, name, p) in model.params.iter() {
        let layer = layer_of(name);
        match layers.last_mut() {
            Some((last, n)) if last == layer => *n += p.value.len(),
            _ => layers.push((layer.to_string(), p.value.len())),
        }
        if p.group == ParamGroup::Kernel {
            conv_kernel += p.value.len();
        }
    }
    ParamCount {
        total: layers.iter().map(|(_, n)| n).sum(),
        conv_kernel,
        layers,
    }
}

/// Multiply-accumulates of one forward pass on a single `input_size`-square
/// image. Hypercomplex convolutions count the full `O x C` operator, i.e.
/// `N^2` real convolutions at `1/N` channel shapes; the PHM head counts the
/// materialized `k x d` operator.
pub fn estimate_flops<T: Real>(model: &Model<T>, input_size: usize) -> Result<FlopCount> {
    let layers = model.macs_by_layer(input_size)?;
    let macs = layers.iter().map(|(_, m)| m).sum::<u64>();
    Ok(FlopCount {
        input_size,
        macs,
        flops: 2 * macs,
        layers,
    })
}

/// Description of the host used for latency measurements.
pub fn machine_descriptor() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".to_string());
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!(
        "{} {} | {cpu} | {cores} logical cores | 1 compute thread",
        std::env::consts::OS,
        std::env::consts::ARCH
    )
}

pub fn median(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return f64::NAN;
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let mid = s.len() / 2;
    if s.len() % 2 == 1 {
        s[mid]
    } else {
        0.5 * (s[mid - 1] + s[mid])
    }
}

/// Median wall time of a single-image eval-mode forward over `reps` runs,
/// after `warmup` untimed runs. Running statistics that were never trained
/// are treated as identity.
pub fn measure_latency<T: Real>(model: &Model<T>, reps: usize, warmup: usize) -> Result<LatencyReport> {
    let mut m = model.clone();
    if m.buffers.stats.iter().any(|s| !s.initialized) {
        m.buffers.set_identity();
    }
    let s = m.spec.input_size;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::<T>::rand_uniform(&[1, INPUT_CHANNELS, s, s], 0.0, 1.0, &mut rng);
    for _ in 0..warmup {
        m.logits(&x, Mode::Eval)?;
    }
    let mut samples_ms = Vec::with_capacity(reps.max(1));
    for _ in 0..reps.max(1) {
        let t0 = Instant::now();
        m.logits(&x, Mode::Eval)?;
        samples_ms.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    Ok(LatencyReport {
        reps: samples_ms.len(),
        warmup,
        median_ms: median(&samples_ms),
        samples_ms,
        machine: machine_descriptor(),
    })
}

impl BudgetReport {
    /// Parameters and MACs; latency only when `latency_reps` is given.
    pub fn new<T: Real>(model: &Model<T>, latency_reps: Option<usize>) -> Result<Self> {
        let spec = &model.spec;
        let params = count_params(model);
        let flops = estimate_flops(model, spec.input_size)?;
        let mut layers: Vec<LayerBudget> = params
            .layers
            .iter()
            .map(|(name, n)| LayerBudget {
                name: name.clone(),
                params: *n,
                macs: 0,
            })
            .collect();
        for (name, macs) in &flops.layers {
            match layers.iter_mut().find(|l| &l.name == name) {
                Some(l) => l.macs += macs,
                None => layers.push(LayerBudget {
                    name: name.clone(),
                    params: 0,
                    macs: *macs,
                }),
            }
        }
        let latency = latency_reps.map(|r| measure_latency(model, r, 2)).transpose()?;
        Ok(Self {
            model: spec.name.clone(),
            algebra: spec.algebra.to_string(),
            backend: spec.backend.to_string(),
            classes: spec.classes,
            phm_n: model.head.phm_n(),
            total_params: params.total,
            conv_kernel_params: params.conv_kernel,
            macs: flops.macs,
            flops: flops.flops,
            input_shape: [1, INPUT_CHANNELS, spec.input_size, spec.input_size],
            layers,
            latency,
        })
    }

    /// Human-readable summary.
    pub fn render(&self, per_layer: bool) -> String {
        let mut s = format!(
            "model       {}\nalgebra     {}\nbackend     {}{}\nclasses     {}\ninput       {:?}\nparams      {} ({:.2}M)\nconv kernel {}\nMACs        {} ({:.3}G)\nFLOPs       {} ({:.3}G, 2 x MACs)\n",
            self.model,
            self.algebra,
            self.backend,
            self.phm_n.map(|n| format!(" (PHM n = {n})")).unwrap_or_default(),
            self.classes,
            self.input_shape,
            self.total_params,
            self.total_params as f64 / 1e6,
            self.conv_kernel_params,
            self.macs,
            self.macs as f64 / 1e9,
            self.flops,
            self.flops as f64 / 1e9,
        );
        if let Some(l) = &self.latency {
            s.push_str(&format!(
                "latency     {:.3} ms median of {} runs\nmachine     {}\n",
                l.median_ms, l.reps, l.machine
            ));
        }
        if per_layer {
            s.push_str(&format!("\n{:<40} {:>12} {:>14}\n", "layer", "params", "MACs"));
            for l in &self.layers {
                s.push_str(&format!("{:<40} {:>12} {:>14}\n", l.name, l.params, l.macs));
            }
        }
        s
    }
}
