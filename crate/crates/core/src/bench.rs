//! Timing harness for the scan kernels.
//!
//! Every configuration is first run through both kernels and compared; a
//! mismatch aborts with a contract error before any timing happens.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scan2d::Scan2d;
use crate::ssm::{discretize, scan_parallel, scan_sequential, ScanKernel, SsmParams};
use crate::tensor::Tensor;

/// Relative tolerance for the pre-timing equality check.
pub const EQUALITY_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct ScanBenchConfig {
    pub lengths: Vec<usize>,
    pub state_size: usize,
    /// Independent sequences per timed call.
    pub batch: usize,
    /// Timed samples per row; the median is reported.
    pub repeats: usize,
    /// Lower bound on the work (in sequence elements) inside one sample, so
    /// short sequences are timed over several calls.
    pub min_elements: usize,
    pub seed: u64,
}

impl Default for ScanBenchConfig {
    fn default() -> Self {
        Self {
            lengths: vec![256, 1024, 4096, 16384],
            state_size: 16,
            batch: 1,
            repeats: 21,
            min_elements: 1 << 18,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub kernel: &'static str,
    /// Sequence length; for the 2-D mode, `H × W`.
    pub len: usize,
    pub state_size: usize,
    pub batch: usize,
    /// Median seconds per call.
    pub seconds: f64,
}

impl BenchRow {
    pub fn elements_per_second(&self) -> f64 {
        (self.len * self.batch) as f64 / self.seconds
    }
}

pub fn kernel_name(k: ScanKernel) -> &'static str {
    match k {
        ScanKernel::Sequential => "sequential",
        ScanKernel::Parallel => "parallel",
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Seconds per call of `f`, averaged over `iters` calls.
fn time<F: FnMut() -> Result<()>>(iters: usize, mut f: F) -> Result<f64> {
    let t = Instant::now();
    for _ in 0..iters {
        f()?;
    }
    Ok(t.elapsed().as_secs_f64() / iters as f64)
}

fn random_system(l: usize, n: usize, rng: &mut ChaCha8Rng) -> SsmParams<f64> {
    SsmParams {
        a: (1..=n).map(|j| -(j as f64)).collect(),
        b: Tensor::randn(&[l, n], 1.0, rng),
        c: Tensor::randn(&[l, n], 1.0, rng),
        d: 1.0,
        delta: Tensor::rand_uniform(&[l], 0.001, 0.1, rng).data().to_vec(),
    }
}

fn max_rel_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// Times [`scan_sequential`] against [`scan_parallel`] for every length.
/// Samples are taken round-robin over all rows, so slow phases of the host
/// hit every length alike. Rows come out in (length, kernel) order.
pub fn bench_scan(cfg: &ScanBenchConfig) -> Result<Vec<BenchRow>> {
    if cfg.state_size == 0 || cfg.batch == 0 || cfg.lengths.contains(&0) {
        return Err(Error::Config(
            "bench lengths, state size and batch must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cases = Vec::new();
    for &l in &cfg.lengths {
        let systems = (0..cfg.batch)
            .map(|_| {
                let p = random_system(l, cfg.state_size, &mut rng);
                let disc = discretize(&p)?;
                let x = Tensor::<f64>::randn(&[l], 1.0, &mut rng).data().to_vec();
                Ok((disc, p.c, p.d, x))
            })
            .collect::<Result<Vec<_>>>()?;
        for (disc, c, d, x) in &systems {
            let s = scan_sequential(disc, c, *d, x)?;
            let p = scan_parallel(disc, c, *d, x)?;
            let err = max_rel_diff(&s, &p);
            if !(err <= EQUALITY_TOL) {
                return Err(Error::Contract(format!(
                    "parallel scan disagrees with sequential at L={l}: relative error {err:e}"
                )));
            }
        }
        let iters = cfg.min_elements.div_ceil(l * cfg.batch).max(1);
        for kernel in [ScanKernel::Sequential, ScanKernel::Parallel] {
            cases.push((l, kernel, iters, systems.clone()));
        }
    }
    let mut samples = vec![Vec::with_capacity(cfg.repeats); cases.len()];
    for _ in 0..cfg.repeats.max(1) {
        for ((_, kernel, iters, systems), out) in cases.iter().zip(&mut samples) {
            let run = match kernel {
                ScanKernel::Sequential => scan_sequential::<f64>,
                ScanKernel::Parallel => scan_parallel::<f64>,
            };
            out.push(time(*iters, || {
                for (disc, c, d, x) in systems {
                    std::hint::black_box(run(disc, c, *d, x)?);
                }
                Ok(())
            })?);
        }
    }
    Ok(cases
        .iter()
        .zip(samples)
        .map(|((l, kernel, _, _), s)| BenchRow {
            kernel: kernel_name(*kernel),
            len: *l,
            state_size: cfg.state_size,
            batch: cfg.batch,
            seconds: median(s),
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scan2dBenchConfig {
    pub height: usize,
    pub width: usize,
    pub state_size: usize,
    pub channels: usize,
    pub padding_tokens: bool,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for Scan2dBenchConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            state_size: 8,
            channels: 16,
            padding_tokens: true,
            repeats: 5,
            seed: 0,
        }
    }
}

/// Times one forward pass of the padded four-direction scan per kernel.
pub fn bench_scan2d(cfg: &Scan2dBenchConfig) -> Result<Vec<BenchRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::<f64>::new();
    let mut m = Scan2d::new(
        &mut store,
        "scan",
        cfg.channels,
        cfg.state_size,
        cfg.padding_tokens,
        &mut rng,
    )?;
    let x = Tensor::randn(&[1, cfg.height, cfg.width, cfg.channels], 1.0, &mut rng);
    let forward = |m: &Scan2d| -> Result<Tensor<f64>> {
        let g = Graph::new();
        let p = store.bind(&g, false);
        let y = m.forward(&g, &p, g.constant(x.clone()))?;
        Ok((*g.value(y)).clone())
    };
    let mut outs = Vec::new();
    for kernel in [ScanKernel::Sequential, ScanKernel::Parallel] {
        m.kernel = kernel;
        outs.push(forward(&m)?);
    }
    let err = max_rel_diff(outs[0].data(), outs[1].data());
    if !(err <= EQUALITY_TOL) {
        return Err(Error::Contract(format!(
            "parallel 2-D scan disagrees with sequential at {}x{}: relative error {err:e}",
            cfg.height, cfg.width
        )));
    }
    let mut rows = Vec::new();
    for kernel in [ScanKernel::Sequential, ScanKernel::Parallel] {
        m.kernel = kernel;
        let samples = (0..cfg.repeats.max(1))
            .map(|_| time(1, || forward(&m).map(|_| ())))
            .collect::<Result<Vec<_>>>()?;
        let seconds = median(samples);
        rows.push(BenchRow {
            kernel: kernel_name(kernel),
            len: cfg.height * cfg.width,
            state_size: cfg.state_size,
            batch: 1,
            seconds,
        });
    }
    Ok(rows)
}

/// Plain-text table, one line per row.
pub fn format_table(rows: &[BenchRow]) -> String {
    let mut s = format!(
        "{:<10} {:>8} {:>4} {:>5} {:>14} {:>16}\n",
        "kernel", "L", "N", "batch", "seconds", "elements/s"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<10} {:>8} {:>4} {:>5} {:>14.6e} {:>16.4e}",
            r.kernel,
            r.len,
            r.state_size,
            r.batch,
            r.seconds,
            r.elements_per_second()
        );
    }
    s
}

/// `t(long) / t(short)` for one kernel, if both rows exist.
pub fn time_ratio(rows: &[BenchRow], kernel: ScanKernel, long: usize, short: usize) -> Option<f64> {
    let name = kernel_name(kernel);
    let t = |l| rows.iter().find(|r| r.kernel == name && r.len == l).map(|r| r.seconds);
    Some(t(long)? / t(short)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_row_per_kernel_and_length() {
        let cfg = ScanBenchConfig {
            lengths: vec![16, 64],
            state_size: 4,
            batch: 2,
            repeats: 3,
            min_elements: 256,
            seed: 1,
        };
        let rows = bench_scan(&cfg).unwrap();
        let keys: Vec<_> = rows.iter().map(|r| (r.kernel, r.len)).collect();
        assert_eq!(
            keys,
            vec![
                ("sequential", 16),
                ("parallel", 16),
                ("sequential", 64),
                ("parallel", 64)
            ]
        );
        assert!(rows
            .iter()
            .all(|r| r.seconds > 0.0 && r.elements_per_second().is_finite()));
        let table = format_table(&rows);
        assert_eq!(table.lines().count(), 5);
        assert!(time_ratio(&rows, ScanKernel::Sequential, 64, 16).is_some());
        assert!(time_ratio(&rows, ScanKernel::Sequential, 128, 16).is_none());
    }

    #[test]
    fn scan2d_mode_reports_both_kernels() {
        let cfg = Scan2dBenchConfig {
            height: 4,
            width: 3,
            state_size: 2,
            channels: 3,
            repeats: 1,
            ..Default::default()
        };
        let rows = bench_scan2d(&cfg).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].len, 12);
    }

    #[test]
    fn zero_length_is_rejected() {
        let cfg = ScanBenchConfig {
            lengths: vec![0],
            ..Default::default()
        };
        assert!(matches!(bench_scan(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
