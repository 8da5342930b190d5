//! Wall-clock embedding extraction timing and comparison tables.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netlib::{Mode, Model, Storage};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchResult {
    pub model: String,
    pub storage: Storage,
    pub batch_size: usize,
    pub warmup: usize,
    pub reps: usize,
    pub runs_ms: Vec<f64>,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub host: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub warmup: usize,
    pub reps: usize,
    pub batch_size: usize,
    pub pin_cpu: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { warmup: 5, reps: 30, batch_size: 1, pin_cpu: true }
    }
}

/// Summary statistics of a list of run times.
pub fn summarize(runs: &[f64]) -> (f64, f64, f64) {
    let mut sorted = runs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let median = if n % 2 == 1 { sorted[n / 2] } else { (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0 };
    let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
    (mean, median, sorted[rank - 1])
}

pub fn host_descriptor() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| s.lines().find(|l| l.starts_with("model name")).and_then(|l| l.split(':').nth(1)).map(|s| s.trim().to_string()))
        .unwrap_or_else(|| "unknown cpu".into());
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("{} {} | {cpu} | {threads} threads", std::env::consts::OS, std::env::consts::ARCH)
}

/// Pins the calling thread to its current CPU. Best effort.
#[cfg(target_os = "linux")]
pub fn pin_current_thread() -> bool {
    // SAFETY: plain libc calls on a zero-initialized cpu_set_t owned by this frame.
    unsafe {
        let cpu = libc::sched_getcpu();
        if cpu < 0 {
            return false;
        }
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        libc::CPU_SET(cpu as usize, &mut set);
        libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set) == 0
    }
}

#[cfg(not(target_os = "linux"))]
pub fn pin_current_thread() -> bool {
    false
}

/// Times `forward_embed` on `batch` in eval mode: `warmup` discarded runs,
/// then `reps` measured runs.
pub fn time_extraction(model: &Model, name: &str, storage: Storage, batch: &Tensor<f32>, warmup: usize, reps: usize) -> Result<BenchResult> {
    if reps < 3 {
        return Err(Error::invalid(format!("bench reps must be >= 3, got {reps}")));
    }
    let mut m = model.clone();
    m.set_mode(Mode::Eval);
    for _ in 0..warmup {
        std::hint::black_box(m.forward_embed(batch, None)?);
    }
    let mut runs_ms = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        std::hint::black_box(m.forward_embed(std::hint::black_box(batch), None)?);
        runs_ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let (mean_ms, median_ms, p95_ms) = summarize(&runs_ms);
    Ok(BenchResult {
        model: name.to_string(),
        storage,
        batch_size: batch.shape()[0],
        warmup,
        reps,
        runs_ms,
        mean_ms,
        median_ms,
        p95_ms,
        host: host_descriptor(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub storage: Storage,
    pub mean_ms: f64,
    pub median_ms: f64,
    /// Mean time of the reference (first) entry over this entry's mean.
    pub speedup: f64,
}

/// Rows sorted by mean time, each with its speedup against `results[0]`.
pub fn compare(results: &[BenchResult]) -> Result<Vec<ComparisonRow>> {
    if results.len() < 2 {
        return Err(Error::invalid("compare needs at least two results"));
    }
    let reference = results[0].mean_ms;
    let mut rows: Vec<ComparisonRow> = results
        .iter()
        .map(|r| ComparisonRow {
            model: r.model.clone(),
            storage: r.storage,
            mean_ms: r.mean_ms,
            median_ms: r.median_ms,
            speedup: reference / r.mean_ms,
        })
        .collect();
    rows.sort_by(|a, b| a.mean_ms.total_cmp(&b.mean_ms));
    Ok(rows)
}

fn storage_name(s: Storage) -> &'static str {
    match s {
        Storage::Dense => "dense",
        Storage::Sparse => "sparse",
    }
}

pub fn table_text(rows: &[ComparisonRow]) -> String {
    let width = rows.iter().map(|r| r.model.len()).max().unwrap_or(0).max(5);
    let mut out = format!("{:<width$}  {:<7}  {:>10}  {:>10}  {:>8}\n", "model", "storage", "mean_ms", "median_ms", "speedup");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:<7}  {:>10.3}  {:>10.3}  {:>7.2}x",
            r.model,
            storage_name(r.storage),
            r.mean_ms,
            r.median_ms,
            r.speedup
        );
    }
    out
}

pub fn table_csv(rows: &[ComparisonRow]) -> String {
    let mut out = String::from("model,storage,mean_ms,median_ms,speedup\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.model, storage_name(r.storage), r.mean_ms, r.median_ms, r.speedup);
    }
    out
}
