//! Steady-state inference latency and peak memory.
//!
//! Runs are strictly serial on the calling thread. Only the forward pass is
//! timed; the input tensor is built before the clock starts and decoding/NMS
//! are not part of the measurement.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{arena_peak_bytes, arena_reset_peak, Tensor};

pub const DEFAULT_RUNS: usize = 25;
pub const DEFAULT_DISCARD: usize = 5;

/// Anything that maps a `[1, 3, S, S]` batch to outputs.
pub trait Infer {
    fn name(&self) -> String;
    fn input_size(&self) -> usize;
    /// Bytes held by parameters; a lower bound for any memory measurement.
    fn param_bytes(&self) -> usize;
    fn infer(&self, input: &Tensor) -> Result<()>;
}

impl Infer for Model {
    fn name(&self) -> String {
        self.spec.variant.name().to_string()
    }

    fn input_size(&self) -> usize {
        self.spec.input_size
    }

    fn param_bytes(&self) -> usize {
        self.params.total_bytes()
    }

    fn infer(&self, input: &Tensor) -> Result<()> {
        self.predict(input).map(drop)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemorySource {
    /// `VmHWM` from `/proc/self/status`, reset through `/proc/self/clear_refs`.
    ProcessHighWaterMark,
    /// Peak bytes of live tensor buffers tracked by the autograd engine.
    TensorArena,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeakMemory {
    pub bytes: u64,
    pub source: MemorySource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub model: String,
    pub input_size: usize,
    pub batch_size: usize,
    pub runs_total: usize,
    pub runs_discarded: usize,
    /// Every run in order, including the discarded warm-up runs.
    pub latencies_ms: Vec<f64>,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub stddev_ms: f64,
    pub peak_memory: Option<PeakMemory>,
    /// Reserved for platforms with power sensors; always absent here.
    pub peak_power_w: Option<f64>,
}

impl BenchReport {
    pub fn retained(&self) -> &[f64] {
        &self.latencies_ms[self.runs_discarded..]
    }

    /// `inference time | peak RAM | peak power`, two decimals for milliseconds.
    pub fn summary(&self) -> String {
        let ram = match self.peak_memory {
            Some(m) => format!("{:.3} GB ({})", m.bytes as f64 / 1e9, match m.source {
                MemorySource::ProcessHighWaterMark => "process",
                MemorySource::TensorArena => "tensor arena",
            }),
            None => "n/a".into(),
        };
        let power = self.peak_power_w.map_or("n/a".to_string(), |p| format!("{p:.2} W"));
        format!("{}: {:.2} ms | peak RAM {} | peak power {}", self.model, self.mean_ms, ram, power)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Mean, median and population standard deviation.
pub fn summarize(samples: &[f64]) -> (f64, f64, f64) {
    if samples.is_empty() {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 0 { (sorted[mid - 1] + sorted[mid]) / 2.0 } else { sorted[mid] };
    (mean, median, var.sqrt())
}

/// A deterministic `[1, 3, S, S]` input with values in `[0, 1)`.
pub fn bench_input(size: usize) -> Tensor {
    let n = 3 * size * size;
    let data = (0..n).map(|i| ((i * 2654435761) % 1000) as f64 / 1000.0).collect();
    Tensor::from_vec(&[1, 3, size, size], data).expect("shape matches data")
}

/// Times `runs` consecutive forward passes at batch 1 and summarizes the last
/// `runs - discard`. Peak memory is measured on a separate forward afterwards.
pub fn time_inference(model: &dyn Infer, runs: usize, discard: usize) -> Result<BenchReport> {
    if runs == 0 || discard >= runs {
        return Err(Error::Invalid(format!("need runs > discard, got runs {runs} and discard {discard}")));
    }
    let input = bench_input(model.input_size());
    let mut latencies_ms = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t0 = Instant::now();
        model.infer(&input)?;
        latencies_ms.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    let (mean_ms, median_ms, stddev_ms) = summarize(&latencies_ms[discard..]);
    Ok(BenchReport {
        model: model.name(),
        input_size: model.input_size(),
        batch_size: 1,
        runs_total: runs,
        runs_discarded: discard,
        latencies_ms,
        mean_ms,
        median_ms,
        stddev_ms,
        peak_memory: Some(peak_memory(model)?),
        peak_power_w: None,
    })
}

fn status_kib(field: &str) -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with(field))?;
    line[field.len()..].trim().trim_end_matches("kB").trim().parse().ok()
}

/// Process high-water mark over one forward pass where the OS exposes it,
/// otherwise the tensor-arena peak plus parameter bytes.
pub fn peak_memory(model: &dyn Infer) -> Result<PeakMemory> {
    let input = bench_input(model.input_size());
    // Writing 5 resets VmHWM to the current RSS (Linux 4.0+).
    if std::fs::write("/proc/self/clear_refs", "5").is_ok() && status_kib("VmHWM:").is_some() {
        model.infer(&input)?;
        if let Some(kib) = status_kib("VmHWM:") {
            return Ok(PeakMemory { bytes: kib * 1024, source: MemorySource::ProcessHighWaterMark });
        }
    }
    Ok(PeakMemory { bytes: arena_peak(model, &input)?, source: MemorySource::TensorArena })
}

/// Tensor-arena high-water mark over one forward pass, counting parameters.
pub fn arena_peak(model: &dyn Infer, input: &Tensor) -> Result<u64> {
    arena_reset_peak();
    model.infer(input)?;
    Ok((arena_peak_bytes() + model.param_bytes()) as u64)
}
