//! Association-only throughput harness.
//!
//! Detections are generated up front; only [`Tracker::step`] is timed, so
//! the numbers exclude scenario generation and any I/O.

use std::time::{Duration, Instant};

use crate::error::Result;
use crate::simulate::{generate_scenario, ScenarioConfig};
use crate::tracker::{StageTimings, Tracker, TrackerConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub targets: usize,
    pub frames: usize,
    pub seed: u64,
    pub embed_dim: usize,
    pub fp_rate: f64,
    pub tracker: TrackerConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            targets: 30,
            frames: 300,
            seed: 0,
            embed_dim: 128,
            fp_rate: 1.0,
            tracker: TrackerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub targets: usize,
    pub frames_processed: usize,
    pub detections: usize,
    /// Association steps per second.
    pub fps: f64,
    pub mean_latency: Duration,
    pub p99_latency: Duration,
    pub stages: StageTimings,
}

impl BenchReport {
    pub fn header() -> &'static str {
        "targets  frames    dets       FPS   mean_ms    p99_ms  predict%  cost%  assign%  update%"
    }

    pub fn row(&self) -> String {
        let total = self.stages.total().as_secs_f64().max(f64::MIN_POSITIVE);
        let pct = |d: Duration| 100.0 * d.as_secs_f64() / total;
        format!(
            "{:>7} {:>7} {:>7} {:>9.1} {:>9.3} {:>9.3} {:>9.1} {:>6.1} {:>8.1} {:>8.1}",
            self.targets,
            self.frames_processed,
            self.detections,
            self.fps,
            self.mean_latency.as_secs_f64() * 1e3,
            self.p99_latency.as_secs_f64() * 1e3,
            pct(self.stages.predict),
            pct(self.stages.cost),
            pct(self.stages.assign),
            pct(self.stages.update),
        )
    }
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[Duration], q: f64) -> Duration {
    if sorted.is_empty() {
        return Duration::ZERO;
    }
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    let scenario = generate_scenario(&ScenarioConfig {
        n_frames: cfg.frames,
        n_targets: cfg.targets,
        p_miss: 0.05,
        fp_rate: cfg.fp_rate,
        box_jitter_std: 1.0,
        embed_dim: cfg.embed_dim,
        embed_noise_std: 0.05,
        min_height: 40.0,
        max_height: 120.0,
        seed: cfg.seed,
        ..ScenarioConfig::default()
    })?;
    let mut tracker = Tracker::new(cfg.tracker)?;
    let mut latencies = Vec::with_capacity(cfg.frames);
    let mut stages = StageTimings::default();
    for (k, dets) in scenario.frames.iter().enumerate() {
        let t = Instant::now();
        tracker.step(k as u64 + 1, dets)?;
        latencies.push(t.elapsed());
        stages.accumulate(&tracker.last_timings());
    }
    let total: Duration = latencies.iter().sum();
    let n = latencies.len();
    latencies.sort_unstable();
    Ok(BenchReport {
        targets: cfg.targets,
        frames_processed: n,
        detections: scenario.detection_count(),
        fps: if total.is_zero() {
            f64::INFINITY
        } else {
            n as f64 / total.as_secs_f64()
        },
        mean_latency: if n == 0 { Duration::ZERO } else { total / n as u32 },
        p99_latency: percentile(&latencies, 0.99),
        stages,
    })
}
