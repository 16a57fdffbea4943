//! Per-kernel timing statistics.

use serde::Serialize;

use crate::bench::kernels::Kernel;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub kernel: Kernel,
    pub samples: usize,
    pub mean_seconds: f64,
    pub min_seconds: f64,
    pub max_seconds: f64,
    /// Sample standard deviation; `None` with fewer than two samples.
    pub stddev_seconds: Option<f64>,
    pub best_mb_per_s: f64,
    pub mean_mb_per_s: f64,
    pub worst_mb_per_s: f64,
    pub stddev_mb_per_s: Option<f64>,
}

impl Serialize for Kernel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

/// Bandwidth in MB/s (10^6 bytes) for one pass over `elements`.
pub fn bandwidth(kernel: Kernel, elements: u64, seconds: f64) -> f64 {
    kernel.bytes_moved(elements) as f64 / seconds / 1e6
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn stddev(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64;
    Some(var.sqrt())
}

/// Statistics over `times` (seconds per pass). Returns `None` for no samples.
pub fn summarize(kernel: Kernel, elements: u64, times: &[f64]) -> Option<Summary> {
    if times.is_empty() {
        return None;
    }
    let bw: Vec<f64> = times.iter().map(|&t| bandwidth(kernel, elements, t)).collect();
    let fold = |xs: &[f64], f: fn(f64, f64) -> f64, init| xs.iter().copied().fold(init, f);
    Some(Summary {
        kernel,
        samples: times.len(),
        mean_seconds: mean(times),
        min_seconds: fold(times, f64::min, f64::INFINITY),
        max_seconds: fold(times, f64::max, f64::NEG_INFINITY),
        stddev_seconds: stddev(times),
        best_mb_per_s: fold(&bw, f64::max, f64::NEG_INFINITY),
        mean_mb_per_s: mean(&bw),
        worst_mb_per_s: fold(&bw, f64::min, f64::INFINITY),
        stddev_mb_per_s: stddev(&bw),
    })
}

/// The reps that enter the statistics: the first is a warm-up and dropped
/// whenever at least two were run.
pub fn measured_reps(reps: usize) -> std::ops::Range<usize> {
    if reps >= 2 {
        1..reps
    } else {
        0..reps
    }
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}
