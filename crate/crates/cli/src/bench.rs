//! Inside-algorithm timing against grammar size.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tdpcfg::grammar::{random_dense_pcfg, random_td_pcfg};
use tdpcfg::inside::{inside_dense, inside_factored};
use tdpcfg::Sentence;

use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSpec {
    pub dense_m: Vec<usize>,
    /// Factored sizes, benchmarked with rank `d = m`.
    pub factored_m: Vec<usize>,
    pub len: usize,
    pub reps: usize,
    pub q: usize,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self { dense_m: vec![16, 32, 64], factored_m: vec![64, 128, 256, 512], len: 20, reps: 3, q: 50, seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Path {
    Dense,
    Factored,
}

impl Path {
    pub fn name(self) -> &'static str {
        match self {
            Path::Dense => "dense",
            Path::Factored => "factored",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Timing {
    pub path: Path,
    pub m: usize,
    pub n: usize,
    pub d: usize,
    pub len: usize,
    pub reps: usize,
    pub median_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub timings: Vec<Timing>,
    pub dense_exponent: Option<f64>,
    pub factored_exponent: Option<f64>,
}

impl BenchResult {
    pub fn table(&self) -> String {
        let mut out = String::from("path\tm\tn\td\tl\treps\tmedian_seconds\n");
        for t in &self.timings {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{:.6e}\n",
                t.path.name(),
                t.m,
                t.n,
                t.d,
                t.len,
                t.reps,
                t.median_seconds
            ));
        }
        out
    }

    pub fn exponents(&self) -> String {
        let fmt = |e: Option<f64>| e.map_or("undefined".to_string(), |e| format!("{e:.3}"));
        format!("path\texponent\ndense\t{}\nfactored\t{}\n", fmt(self.dense_exponent), fmt(self.factored_exponent))
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn fit_exponent(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let mid = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[mid]
    } else {
        (xs[mid - 1] + xs[mid]) / 2.0
    }
}

/// Shortest wall time of one timing sample; fast calls are repeated within a
/// sample until it lasts this long.
const MIN_SAMPLE_SECONDS: f64 = 0.02;

/// Splits `m` symbols as `n = max(1, m / 3)` nonterminals and the rest
/// preterminals.
pub fn split_symbols(m: usize) -> (usize, usize) {
    let n = (m / 3).max(1);
    (n, m - n)
}

struct Workload<'a> {
    timing: Timing,
    call: Box<dyn Fn() -> Result<()> + 'a>,
    inner: usize,
    samples: Vec<f64>,
}

impl Workload<'_> {
    fn sample(&mut self) -> Result<()> {
        let start = Instant::now();
        for _ in 0..self.inner {
            (self.call)()?;
        }
        self.samples.push(start.elapsed().as_secs_f64() / self.inner as f64);
        Ok(())
    }
}

/// Times every size with per-call medians over `reps` samples. Repetitions
/// are interleaved across sizes so slow periods of the machine hit all
/// sizes alike.
pub fn run_bench(spec: &BenchSpec) -> Result<BenchResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sentence = Sentence::new((0..spec.len).map(|_| rng.gen_range(0..spec.q)).collect());
    let sentence = &sentence;
    let timing = |path, m, n, d| Timing { path, m, n, d, len: spec.len, reps: spec.reps, median_seconds: 0.0 };
    let mut loads: Vec<Workload> = Vec::new();
    for &m in &spec.dense_m {
        let (n, p) = split_symbols(m);
        let g = random_dense_pcfg(n, p, spec.q, spec.seed)?;
        let call = Box::new(move || inside_dense(&g, sentence).map(drop).map_err(Into::into));
        loads.push(Workload { timing: timing(Path::Dense, m, n, 0), call, inner: 1, samples: Vec::new() });
    }
    for &m in &spec.factored_m {
        let (n, p) = split_symbols(m);
        let g = random_td_pcfg(n, p, spec.q, m, spec.seed)?;
        let call = Box::new(move || inside_factored(&g, sentence).map(drop).map_err(Into::into));
        loads.push(Workload { timing: timing(Path::Factored, m, n, m), call, inner: 1, samples: Vec::new() });
    }
    for load in &mut loads {
        let start = Instant::now();
        (load.call)()?;
        let first = start.elapsed().as_secs_f64();
        load.inner = ((MIN_SAMPLE_SECONDS / first.max(1e-9)).ceil() as usize).max(1);
    }
    for _ in 0..spec.reps.max(1) {
        for load in &mut loads {
            load.sample()?;
        }
    }
    let timings: Vec<Timing> = loads
        .into_iter()
        .map(|load| {
            let t = Timing { median_seconds: median(load.samples), ..load.timing };
            log::info!("{} m={} d={}: {:.4e} s", t.path.name(), t.m, t.d, t.median_seconds);
            t
        })
        .collect();
    let fit = |path: Path| {
        let pts: Vec<(f64, f64)> =
            timings.iter().filter(|t| t.path == path).map(|t| (t.m as f64, t.median_seconds)).collect();
        fit_exponent(&pts)
    };
    Ok(BenchResult { dense_exponent: fit(Path::Dense), factored_exponent: fit(Path::Factored), timings })
}
