//! Wall-clock and allocation benchmarks of block forwards, broken down by
//! [`Phase`].
//!
//! Allocation figures come from the tensor byte counters of the thread that
//! runs the forward. Only one benchmark may run per process at a time.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::blocks::{init_weights, BlockConfig, BlockKind, Eval, Phase, Probe};
use crate::error::{param_err, Error, Result};
use crate::tensor::rng::derive_seed;
use crate::tensor::tracking::measure_peak;
use crate::tensor::{Distribution, Shape3, Tensor};

static BENCH_LOCK: Mutex<()> = Mutex::new(());

const ELEM_BYTES: u64 = std::mem::size_of::<f64>() as u64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSpec {
    pub block: BlockKind,
    pub shape: Shape3,
    /// Key/value-side input of fusion kinds; defaults to `shape` with the
    /// config's low-level channel count.
    #[serde(default)]
    pub low_shape: Option<Shape3>,
    pub config: BlockConfig,
    pub warmup: usize,
    pub measured: usize,
    pub seed: u64,
    /// Worker threads for the matmul kernels.
    #[serde(default = "one")]
    pub threads: usize,
    /// Byte budget of one similarity tile; `None` materializes the whole
    /// similarity matrix.
    #[serde(default)]
    pub tile_budget: Option<usize>,
}

fn one() -> usize {
    1
}

impl BenchSpec {
    pub fn new(block: BlockKind, shape: Shape3, config: BlockConfig) -> Self {
        Self {
            block,
            shape,
            low_shape: None,
            config,
            warmup: 1,
            measured: 3,
            seed: 0,
            threads: 1,
            tile_budget: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup < 1 {
            return Err(param_err!("warmup must be at least 1, got {}", self.warmup));
        }
        if self.measured < 3 {
            return Err(param_err!(
                "measured must be at least 3, got {}",
                self.measured
            ));
        }
        if self.threads < 1 {
            return Err(param_err!("threads must be at least 1"));
        }
        if self.tile_budget == Some(0) {
            return Err(param_err!("tile_budget must be positive"));
        }
        self.shape.validate()?;
        if self.shape.channels != self.config.in_channels {
            return Err(param_err!(
                "shape has {} channels, config expects {}",
                self.shape.channels,
                self.config.in_channels
            ));
        }
        self.config.validate(self.block)
    }

    fn low(&self) -> Option<Shape3> {
        self.block.is_fusion().then(|| {
            self.low_shape
                .unwrap_or(self.shape)
                .with_channels(self.config.key_channels())
        })
    }

    /// Key positions after sampling.
    pub fn anchors(&self) -> usize {
        let keys = self.low().unwrap_or(self.shape).positions();
        match (&self.config.sampler, self.block.is_asymmetric()) {
            (Some(s), true) => s.anchor_count(keys),
            _ => keys,
        }
    }

    /// Upper bound on tracked bytes live during one forward, beyond the
    /// inputs and weights: flattened inputs, embeddings and their transposes,
    /// sampled anchors, two similarity tiles, and the output stages.
    pub fn peak_bound_bytes(&self) -> u64 {
        let u = |v: usize| v as u64;
        let n = u(self.shape.positions());
        let c = u(self.shape.channels);
        let e = u(self.config.embed_channels);
        let out = u(self.config.out());
        let s = u(self.anchors());
        let (low_elems, n_low) = match self.low() {
            Some(l) => (u(l.numel()), u(l.positions())),
            None => (0, n),
        };
        let rows = u(crate::blocks::attention_tile_rows(
            self.shape.positions(),
            self.anchors(),
            self.tile_budget,
        ));
        let elems = 2 * c * n
            + low_elems
            + 4 * e * n
            + 2 * e * n_low
            + 3 * e * s
            + 2 * rows * s
            + e * rows
            + 2 * out * n;
        elems * ELEM_BYTES
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub samples_ms: Vec<f64>,
}

impl Stats {
    fn from_samples(samples_ms: Vec<f64>) -> Self {
        let n = samples_ms.len().max(1) as f64;
        Self {
            mean_ms: samples_ms.iter().sum::<f64>() / n,
            min_ms: samples_ms.iter().copied().fold(f64::INFINITY, f64::min),
            max_ms: samples_ms.iter().copied().fold(0.0, f64::max),
            samples_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseStats {
    pub phase: Phase,
    #[serde(flatten)]
    pub stats: Stats,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Environment {
    pub cpu_model: String,
    pub threads: usize,
    pub parallel_kernels: bool,
}

impl Environment {
    pub fn detect(threads: usize) -> Self {
        let cpu_model = std::fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|info| {
                info.lines()
                    .find(|l| l.starts_with("model name"))
                    .and_then(|l| l.split_once(':'))
                    .map(|(_, v)| v.trim().to_string())
            })
            .unwrap_or_else(|| std::env::consts::ARCH.to_string());
        Self {
            cpu_model,
            threads,
            parallel_kernels: cfg!(feature = "parallel"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub spec: BenchSpec,
    pub positions: usize,
    pub anchors: usize,
    pub phases: Vec<PhaseStats>,
    pub total: Stats,
    /// Highest tracked allocation over measured runs, beyond inputs and
    /// weights.
    pub peak_tracked_bytes: u64,
    pub peak_bound_bytes: u64,
    /// Bytes of similarity matrix produced per forward, summed over tiles.
    pub similarity_bytes: u64,
    /// Largest similarity tile resident at once.
    pub similarity_tile_bytes: u64,
    /// Every measured run produced the same output bits.
    pub deterministic: bool,
    pub environment: Environment,
}

impl BenchReport {
    pub fn phase(&self, phase: Phase) -> &Stats {
        &self.phases[phase.index()].stats
    }

    /// Whether the similarity product takes longer on average than every
    /// phase other than the two attention products combined.
    pub fn similarity_dominates(&self) -> bool {
        let rest: f64 = self
            .phases
            .iter()
            .filter(|p| !matches!(p.phase, Phase::Similarity | Phase::Aggregation))
            .map(|p| p.stats.mean_ms)
            .sum();
        self.phase(Phase::Similarity).mean_ms > rest
    }

    pub fn table(&self) -> String {
        let mut s = format!(
            "{} {}x{}x{} (S={}, threads={})\n{:<18} {:>12} {:>12} {:>12}\n",
            self.spec.block,
            self.spec.shape.channels,
            self.spec.shape.height,
            self.spec.shape.width,
            self.anchors,
            self.environment.threads,
            "phase",
            "mean ms",
            "min ms",
            "max ms"
        );
        let row = |name: &str, st: &Stats| {
            format!(
                "{name:<18} {:>12.3} {:>12.3} {:>12.3}\n",
                st.mean_ms, st.min_ms, st.max_ms
            )
        };
        for p in &self.phases {
            s += &row(p.phase.name(), &p.stats);
        }
        s += &row("total", &self.total);
        s += &format!(
            "peak tracked bytes {}  (bound {}), similarity bytes {}\n",
            self.peak_tracked_bytes, self.peak_bound_bytes, self.similarity_bytes
        );
        s
    }

    pub const CSV_HEADER: &'static str = "block,phase,run,ms";

    /// One row per phase per measured run, then the totals.
    pub fn csv_rows(&self) -> Vec<String> {
        let mut rows = Vec::new();
        let named = self
            .phases
            .iter()
            .map(|p| (p.phase.name(), &p.stats))
            .chain(std::iter::once(("total", &self.total)));
        for (name, stats) in named {
            for (run, ms) in stats.samples_ms.iter().enumerate() {
                rows.push(format!("{},{name},{run},{ms}", self.spec.block));
            }
        }
        rows
    }
}

struct Timer {
    current: Option<(Phase, Instant)>,
    spent: [Duration; 7],
    similarity_bytes: u64,
    largest_tile: u64,
}

impl Timer {
    fn new() -> Self {
        Self {
            current: None,
            spent: [Duration::ZERO; 7],
            similarity_bytes: 0,
            largest_tile: 0,
        }
    }

    fn close(&mut self, now: Instant) {
        if let Some((phase, start)) = self.current.take() {
            self.spent[phase.index()] += now - start;
        }
    }
}

impl Probe for Timer {
    fn enter(&mut self, phase: Phase) {
        let now = Instant::now();
        self.close(now);
        self.current = Some((phase, now));
    }

    fn finish(&mut self) {
        self.close(Instant::now());
    }

    fn on_normalized(&mut self, rows: &Tensor) {
        let bytes = rows.len() as u64 * ELEM_BYTES;
        self.similarity_bytes += bytes;
        self.largest_tile = self.largest_tile.max(bytes);
    }
}

/// Seeded inputs and weights of a bench spec.
pub fn bench_inputs(
    spec: &BenchSpec,
) -> Result<(Tensor, Option<Tensor>, crate::blocks::BlockWeights)> {
    let high = Tensor::seeded_fill(
        &spec.shape.dims(),
        derive_seed(spec.seed, 1),
        Distribution::Uniform,
    )?;
    let low = spec
        .low()
        .map(|l| Tensor::seeded_fill(&l.dims(), derive_seed(spec.seed, 2), Distribution::Uniform))
        .transpose()?;
    let weights = init_weights(&spec.config, derive_seed(spec.seed, 3))?;
    Ok((high, low, weights))
}

/// Runs `spec.warmup` untimed and `spec.measured` timed forwards.
///
/// Fails with a resource error if another benchmark is running in this
/// process.
pub fn run_bench(spec: &BenchSpec) -> Result<BenchReport> {
    spec.validate()?;
    let _guard = BENCH_LOCK
        .try_lock()
        .map_err(|_| Error::Resource("another benchmark is already running".into()))?;
    with_threads(spec.threads, || measure(spec))?
}

#[cfg(feature = "parallel")]
fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Resource(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

#[cfg(not(feature = "parallel"))]
fn with_threads<T>(threads: usize, f: impl FnOnce() -> T) -> Result<T> {
    if threads != 1 {
        return Err(param_err!("threads must be 1 without the parallel feature"));
    }
    Ok(f())
}

fn measure(spec: &BenchSpec) -> Result<BenchReport> {
    let (high, low, weights) = bench_inputs(spec)?;
    let forward = |timer: &mut Timer| {
        Eval::new(timer).with_tile_budget(spec.tile_budget).forward(
            spec.block,
            &high,
            low.as_ref(),
            &spec.config,
            &weights,
        )
    };
    for _ in 0..spec.warmup {
        forward(&mut Timer::new())?;
    }

    let mut phase_ms = (0..7)
        .map(|_| Vec::with_capacity(spec.measured))
        .collect::<Vec<_>>();
    let mut total_ms = Vec::with_capacity(spec.measured);
    let (mut peak, mut similarity_bytes, mut largest_tile) = (0u64, 0u64, 0u64);
    let mut first: Option<Tensor> = None;
    let mut deterministic = true;
    for _ in 0..spec.measured {
        let mut timer = Timer::new();
        let start = Instant::now();
        let (out, extra) = measure_peak(|| forward(&mut timer));
        let elapsed = start.elapsed();
        let out = out?;
        total_ms.push(elapsed.as_secs_f64() * 1e3);
        for (samples, spent) in phase_ms.iter_mut().zip(timer.spent) {
            samples.push(spent.as_secs_f64() * 1e3);
        }
        peak = peak.max(extra as u64);
        similarity_bytes = timer.similarity_bytes;
        largest_tile = timer.largest_tile;
        match &first {
            None => first = Some(out),
            Some(f) => deterministic &= f == &out,
        }
    }

    Ok(BenchReport {
        spec: spec.clone(),
        positions: spec.shape.positions(),
        anchors: spec.anchors(),
        phases: Phase::ALL
            .iter()
            .zip(phase_ms)
            .map(|(&phase, samples)| PhaseStats {
                phase,
                stats: Stats::from_samples(samples),
            })
            .collect(),
        total: Stats::from_samples(total_ms),
        peak_tracked_bytes: peak,
        peak_bound_bytes: spec.peak_bound_bytes(),
        similarity_bytes,
        similarity_tile_bytes: largest_tile,
        deterministic,
        environment: Environment::detect(spec.threads),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRatio {
    pub phase: Phase,
    pub baseline_ms: f64,
    pub candidate_ms: f64,
    /// `baseline / candidate`; infinite when the candidate phase took no time.
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: BlockKind,
    pub candidate: BlockKind,
    /// Ratio of mean totals, baseline over candidate.
    pub speedup: f64,
    /// Ratio of peak tracked bytes, baseline over candidate.
    pub memory_ratio: f64,
    /// Ratio of similarity bytes, baseline over candidate.
    pub similarity_ratio: f64,
    pub phases: Vec<PhaseRatio>,
}

fn ratio(a: f64, b: f64) -> f64 {
    if a == b {
        1.0
    } else {
        a / b
    }
}

/// Compares two reports on the same shape and configuration, up to the
/// block kind and sampler.
pub fn compare(baseline: &BenchReport, candidate: &BenchReport) -> Result<Comparison> {
    let (a, b) = (&baseline.spec, &candidate.spec);
    let strip = |c: &BlockConfig| BlockConfig {
        sampler: None,
        ..c.clone()
    };
    if a.shape != b.shape || a.low() != b.low() || strip(&a.config) != strip(&b.config) {
        return Err(param_err!(
            "reports differ in basis: {} on {} vs {} on {}",
            a.block,
            a.shape,
            b.block,
            b.shape
        ));
    }
    Ok(Comparison {
        baseline: a.block,
        candidate: b.block,
        speedup: ratio(baseline.total.mean_ms, candidate.total.mean_ms),
        memory_ratio: ratio(
            baseline.peak_tracked_bytes as f64,
            candidate.peak_tracked_bytes as f64,
        ),
        similarity_ratio: ratio(
            baseline.similarity_bytes as f64,
            candidate.similarity_bytes as f64,
        ),
        phases: baseline
            .phases
            .iter()
            .zip(&candidate.phases)
            .map(|(x, y)| PhaseRatio {
                phase: x.phase,
                baseline_ms: x.stats.mean_ms,
                candidate_ms: y.stats.mean_ms,
                speedup: ratio(x.stats.mean_ms, y.stats.mean_ms),
            })
            .collect(),
    })
}

impl Comparison {
    pub fn table(&self) -> String {
        let mut s = format!(
            "{} vs {}: speedup {:.2}x, peak memory ratio {:.2}x, similarity bytes ratio {:.1}x\n",
            self.baseline, self.candidate, self.speedup, self.memory_ratio, self.similarity_ratio
        );
        for p in &self.phases {
            s += &format!(
                "{:<18} {:>12.3} {:>12.3} {:>10.2}x\n",
                p.phase.name(),
                p.baseline_ms,
                p.candidate_ms,
                p.speedup
            );
        }
        s
    }
}

/// Bytes one untiled forward of `spec` needs, for preflight checks.
pub fn required_bytes(spec: &BenchSpec) -> u64 {
    BenchSpec {
        tile_budget: None,
        ..spec.clone()
    }
    .peak_bound_bytes()
}

/// `MemAvailable` from `/proc/meminfo`, if readable.
pub fn available_memory() -> Option<u64> {
    let info = std::fs::read_to_string("/proc/meminfo").ok()?;
    let line = info.lines().find(|l| l.starts_with("MemAvailable:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

/// Fails with a resource error when an untiled run of `spec` cannot fit in
/// available memory.
pub fn preflight(spec: &BenchSpec) -> Result<()> {
    let required = required_bytes(spec);
    match available_memory() {
        Some(avail) if avail < required => Err(Error::Resource(format!(
            "{} at {} needs about {required} bytes, {avail} available",
            spec.block, spec.shape
        ))),
        _ => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::SamplerSpec;

    static SERIAL: Mutex<()> = Mutex::new(());

    fn serial() -> std::sync::MutexGuard<'static, ()> {
        SERIAL.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn toy(kind: BlockKind) -> BenchSpec {
        let mut cfg = BlockConfig::new(1, 1);
        if kind.is_asymmetric() {
            cfg = cfg.with_sampler(SamplerSpec::pyramid_average(&[1]));
        }
        BenchSpec::new(kind, Shape3::new(1, 2, 2), cfg)
    }

    #[test]
    fn toy_report_structure() {
        let _s = serial();
        let r = run_bench(&toy(BlockKind::Nb)).unwrap();
        assert_eq!(r.phases.len(), 7);
        assert!(r.phases.iter().all(|p| p.stats.samples_ms.len() == 3));
        assert_eq!(r.total.samples_ms.len(), 3);
        assert!(r.deterministic);
        assert_eq!(r.similarity_bytes, 16 * 8);
        let sum_min: f64 = r.phases.iter().map(|p| p.stats.min_ms).sum();
        assert!(r.total.max_ms >= sum_min);
        assert_eq!(r.csv_rows().len(), 8 * 3);
    }

    #[test]
    fn spec_bounds() {
        let _s = serial();
        let mut s = toy(BlockKind::Nb);
        s.warmup = 0;
        assert!(run_bench(&s).is_err());
        let mut s = toy(BlockKind::Nb);
        s.measured = 2;
        assert!(s.validate().is_err());
    }

    #[test]
    fn concurrent_run_rejected() {
        let _s = serial();
        let guard = BENCH_LOCK.lock().unwrap();
        let err = run_bench(&toy(BlockKind::Nb)).unwrap_err();
        assert!(matches!(err, Error::Resource(_)));
        drop(guard);
    }

    #[test]
    fn compare_self_and_mismatch() {
        let _s = serial();
        let a = run_bench(&toy(BlockKind::Nb)).unwrap();
        let c = compare(&a, &a).unwrap();
        assert_eq!(c.speedup, 1.0);
        assert_eq!(c.memory_ratio, 1.0);
        assert!(c.phases.iter().all(|p| p.speedup == 1.0));
        let mut other = toy(BlockKind::Nb);
        other.shape = Shape3::new(1, 3, 2);
        let b = run_bench(&other).unwrap();
        assert!(compare(&a, &b).is_err());
        let ap = run_bench(&toy(BlockKind::Apnb)).unwrap();
        assert!(compare(&a, &ap).is_ok());
    }

    #[test]
    fn full_size_preflight_is_large() {
        let cfg = BlockConfig::new(2048, 256);
        let spec = BenchSpec::new(BlockKind::Nb, Shape3::new(2048, 128, 256), cfg);
        assert!(required_bytes(&spec) > 2 * 32768 * 32768 * 8);
    }
}
