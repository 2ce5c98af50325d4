//! Attention scaling benchmark and a per-thread counting allocator.
//!
//! Binaries that want allocation figures install the allocator:
//!
//! ```ignore
//! #[global_allocator]
//! static ALLOC: iscf_core::bench::CountingAlloc = iscf_core::bench::CountingAlloc;
//! ```
//!
//! Without it the byte columns read zero.

use std::alloc::{GlobalAlloc, Layout, System};
use std::cell::Cell;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::attention::{efficient_attention_values, explicit_context_attention, standard_attention};
use crate::error::{Error, Result};
use crate::params::{init_tensor, Init};
use crate::tensor::Tensor;

thread_local! {
    static BYTES: Cell<u64> = const { Cell::new(0) };
    static LARGEST: Cell<u64> = const { Cell::new(0) };
}

fn record(size: usize) {
    let _ = BYTES.try_with(|b| b.set(b.get() + size as u64));
    let _ = LARGEST.try_with(|l| l.set(l.get().max(size as u64)));
}

/// System allocator that tallies requested bytes on the calling thread.
pub struct CountingAlloc;

unsafe impl GlobalAlloc for CountingAlloc {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        record(layout.size());
        System.alloc(layout)
    }

    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        record(layout.size());
        System.alloc_zeroed(layout)
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        record(new_size);
        System.realloc(ptr, layout, new_size)
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        System.dealloc(ptr, layout)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocStats {
    /// Sum of all requested bytes.
    pub bytes: u64,
    /// Largest single request.
    pub largest: u64,
}

/// Run `f` and report what it allocated on this thread.
pub fn measure_allocs<R>(f: impl FnOnce() -> R) -> (R, AllocStats) {
    let b0 = BYTES.with(Cell::get);
    let l0 = LARGEST.with(|l| l.replace(0));
    let out = f();
    let stats = AllocStats { bytes: BYTES.with(Cell::get) - b0, largest: LARGEST.with(Cell::get) };
    LARGEST.with(|l| l.set(l.get().max(l0)));
    (out, stats)
}

/// Whether [`CountingAlloc`] is the active global allocator.
pub fn counting_enabled() -> bool {
    let (_, s) = measure_allocs(|| std::hint::black_box(vec![0u8; 64]));
    s.bytes >= 64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Efficient,
    Standard,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Efficient => "efficient",
            Variant::Standard => "standard",
        }
    }

    pub fn from_name(s: &str) -> Option<Variant> {
        [Variant::Efficient, Variant::Standard].into_iter().find(|v| v.name() == s)
    }

    fn run(self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        match self {
            Variant::Efficient => Ok(efficient_attention_values(q, k, v)?.0),
            Variant::Standard => standard_attention(q, k, v, 1.0 / (q.shape()[1] as f64).sqrt()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub n_list: Vec<usize>,
    pub d: usize,
    pub variants: Vec<Variant>,
    pub seed: u64,
    /// Keep repeating a measurement until this much time has been spent;
    /// the fastest repetition is reported.
    pub min_time: Duration,
    /// Largest `n` at which the associativity oracle is evaluated.
    pub oracle_max_n: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            n_list: vec![256, 512, 1024, 2048, 4096],
            d: 64,
            variants: vec![Variant::Efficient, Variant::Standard],
            seed: 0,
            min_time: Duration::from_millis(200),
            oracle_max_n: 1024,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub n: usize,
    pub d: usize,
    pub variant: Variant,
    pub wall_ns: u64,
    pub bytes_allocated: u64,
    pub largest_alloc: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Fitted log-log slope of wall time against `n`, per variant.
    pub slopes: Vec<(Variant, f64)>,
    /// Worst relative disagreement between the efficient and explicit paths.
    pub oracle_max_rel: f64,
}

impl BenchReport {
    pub fn slope(&self, v: Variant) -> Option<f64> {
        self.slopes.iter().find(|(x, _)| *x == v).map(|(_, s)| *s)
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("n,d,variant,wall_ns,bytes_allocated\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.n, r.d, r.variant.name(), r.wall_ns, r.bytes_allocated);
    }
    out
}

fn operands(n: usize, d: usize, seed: u64) -> [Tensor; 3] {
    ["q", "k", "v"].map(|tag| init_tensor(&[1, n, d], Init::TruncNormal(1.0), seed, tag))
}

fn time_min(min_time: Duration, mut f: impl FnMut() -> Result<()>) -> Result<u64> {
    let start = Instant::now();
    let mut best = u64::MAX;
    let mut reps = 0;
    while reps < 2 || start.elapsed() < min_time {
        let t = Instant::now();
        f()?;
        best = best.min(t.elapsed().as_nanos() as u64);
        reps += 1;
    }
    Ok(best)
}

pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.n_list.len() < 2 || cfg.d == 0 || cfg.variants.is_empty() {
        return Err(Error::InvalidConfig("bench needs at least two sizes, d > 0 and one variant".into()));
    }
    let mut oracle_max_rel = 0.0f64;
    for &n in cfg.n_list.iter().filter(|&&n| n <= cfg.oracle_max_n) {
        let [q, k, v] = operands(n, cfg.d, cfg.seed);
        let (fast, _) = efficient_attention_values(&q, &k, &v)?;
        let slow = explicit_context_attention(&q, &k, &v)?;
        oracle_max_rel = oracle_max_rel.max(fast.max_rel_diff(&slow, 1e-12));
    }
    if oracle_max_rel > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "efficient and explicit attention disagree (max rel {oracle_max_rel:e}); refusing to time"
        )));
    }

    let mut rows = Vec::new();
    for &variant in &cfg.variants {
        for &n in &cfg.n_list {
            let [q, k, v] = operands(n, cfg.d, cfg.seed);
            let (out, stats) = measure_allocs(|| variant.run(&q, &k, &v));
            std::hint::black_box(out?);
            let wall_ns = time_min(cfg.min_time, || {
                std::hint::black_box(variant.run(&q, &k, &v)?);
                Ok(())
            })?;
            rows.push(BenchRow { n, d: cfg.d, variant, wall_ns, bytes_allocated: stats.bytes, largest_alloc: stats.largest });
        }
    }
    let slopes = cfg
        .variants
        .iter()
        .map(|&v| {
            let (xs, ys): (Vec<f64>, Vec<f64>) =
                rows.iter().filter(|r| r.variant == v).map(|r| (r.n as f64, r.wall_ns.max(1) as f64)).unzip();
            (v, loglog_slope(&xs, &ys))
        })
        .collect();
    Ok(BenchReport { rows, slopes, oracle_max_rel })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(1.5)).collect();
        assert!((loglog_slope(&xs, &ys) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn small_bench_produces_rows() {
        let cfg = BenchConfig { n_list: vec![8, 16], d: 4, min_time: Duration::ZERO, ..BenchConfig::default() };
        let r = run_bench(&cfg).unwrap();
        assert_eq!(r.rows.len(), 4);
        assert!(r.oracle_max_rel < 1e-9);
        assert!(bench_csv(&r.rows).starts_with("n,d,variant,wall_ns,bytes_allocated\n"));
    }
}
