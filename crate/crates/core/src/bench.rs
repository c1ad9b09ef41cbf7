//! Single-threaded layer microbenchmarks: wall time, FLOPs and time per MFLOP.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{conv_depthwise, conv_pointwise, count_flops, FlopsDesc, Matrix};
use crate::nn::layers::{relu, BN_EPSILON};
use crate::parallel;
use crate::shift::asl_forward_raw;
use crate::tensor::{Element, Shape4, Tensor};

pub const DEFAULT_REPETITIONS: usize = 100;
pub const MIN_WARMUP: usize = 10;
/// A median below this many timer ticks is flagged as unreliable.
pub const COARSE_TIMER_TICKS: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BenchKind {
    DwConv3x3,
    Conv1x1,
    BnAffine,
    Relu,
    EltwiseSum,
    Asl,
}

impl BenchKind {
    pub const ALL: [BenchKind; 6] = [
        BenchKind::DwConv3x3,
        BenchKind::Conv1x1,
        BenchKind::BnAffine,
        BenchKind::Relu,
        BenchKind::EltwiseSum,
        BenchKind::Asl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BenchKind::DwConv3x3 => "dwconv3x3",
            BenchKind::Conv1x1 => "conv1x1",
            BenchKind::BnAffine => "bn_affine",
            BenchKind::Relu => "relu",
            BenchKind::EltwiseSum => "eltwise_sum",
            BenchKind::Asl => "asl",
        }
    }

    /// Multiply-accumulates of one forward pass on `input` (stride 1).
    pub fn flops(self, input: Shape4) -> u64 {
        let (c, h, w) = (input.c, input.h, input.w);
        let per_example = match self {
            BenchKind::DwConv3x3 => FlopsDesc::Depthwise {
                channels: c,
                kernel: 9,
                out_h: h,
                out_w: w,
            },
            BenchKind::Conv1x1 => FlopsDesc::Conv {
                out_channels: c,
                in_channels: c,
                kernel: 1,
                out_h: h,
                out_w: w,
            },
            BenchKind::BnAffine | BenchKind::Relu | BenchKind::EltwiseSum => FlopsDesc::Elementwise {
                channels: c,
                h,
                w,
                ops_per_element: 1,
            },
            BenchKind::Asl => FlopsDesc::Elementwise {
                channels: c,
                h,
                w,
                ops_per_element: 4,
            },
        };
        input.n as u64 * count_flops(&per_example)
    }
}

impl fmt::Display for BenchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BenchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BenchKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown benchmark layer {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchOptions {
    pub repetitions: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            repetitions: DEFAULT_REPETITIONS,
            warmup: MIN_WARMUP,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub name: String,
    /// `NxCxHxW`.
    pub input: String,
    pub repetitions: usize,
    pub warmup: usize,
    pub time_ms_median: f64,
    pub time_ms_mean: f64,
    pub flops: u64,
    pub ms_per_mflop: f64,
    pub coarse_timer: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub threads: usize,
    pub precision: String,
    pub records: Vec<BenchRecord>,
}

/// The layer set and input of the FLOPs-versus-time comparison table.
pub fn table1_input() -> Shape4 {
    Shape4::new(1, 64, 224, 224)
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Smallest positive step observed between consecutive clock reads.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::from_secs(1);
    for _ in 0..1000 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

fn bn_affine<T: Element>(x: &Tensor<T>, mean: &[T], var: &[T], gamma: &[T], beta: &[T]) -> Tensor<T> {
    let s = x.shape();
    let eps = T::from_f64_lossy(BN_EPSILON);
    let mut out = x.clone();
    let data = out.make_mut();
    for (i, plane) in data.chunks_mut(s.plane()).enumerate() {
        let c = i % s.c;
        let inv = T::one() / (var[c] + eps).sqrt();
        for v in plane {
            *v = (*v - mean[c]) * inv * gamma[c] + beta[c];
        }
    }
    out
}

/// Times the forward pass of one layer on a random input.
///
/// Refuses to run while library parallelism is active.
pub fn bench_layer<T: Element>(kind: BenchKind, input: Shape4, opts: &BenchOptions) -> Result<BenchRecord> {
    if parallel::is_active() {
        return Err(Error::Usage(
            "benchmarks must run single-threaded; disable parallelism first".into(),
        ));
    }
    if opts.repetitions == 0 {
        return Err(Error::Usage("repetitions must be positive".into()));
    }
    let warmup = opts.warmup.max(MIN_WARMUP);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut random = |len: usize, lo: f64, hi: f64| -> Vec<T> {
        (0..len).map(|_| T::from_f64_lossy(rng.random_range(lo..hi))).collect()
    };
    let c = input.c;
    let x = Tensor::from_vec(input, random(input.len(), -1.0, 1.0))?;
    let other = Tensor::from_vec(input, random(input.len(), -1.0, 1.0))?;
    let dw = Tensor::from_vec(Shape4::new(c, 1, 3, 3), random(c * 9, -0.3, 0.3))?;
    let pw = Matrix::from_vec(c, c, random(c * c, -0.1, 0.1))?;
    let mean = random(c, -0.1, 0.1);
    let var = random(c, 0.5, 1.5);
    let gamma = random(c, 0.5, 1.5);
    let beta = random(c, -0.1, 0.1);
    let theta = random(2 * c, -1.0, 1.0);

    let run = || -> Result<Tensor<T>> {
        Ok(match kind {
            BenchKind::DwConv3x3 => conv_depthwise(&x, &dw, 1, 1)?,
            BenchKind::Conv1x1 => conv_pointwise(&x, &pw, 1)?,
            BenchKind::BnAffine => bn_affine(&x, &mean, &var, &gamma, &beta),
            BenchKind::Relu => relu(&x),
            BenchKind::EltwiseSum => x.add(&other)?,
            BenchKind::Asl => asl_forward_raw(&x, &theta, 1)?.0,
        })
    };
    for _ in 0..warmup {
        std::hint::black_box(run()?);
    }
    let mut times = Vec::with_capacity(opts.repetitions);
    for _ in 0..opts.repetitions {
        let t0 = Instant::now();
        let y = run()?;
        let dt = t0.elapsed();
        std::hint::black_box(y);
        times.push(dt.as_secs_f64() * 1e3);
    }
    let mean_ms = times.iter().sum::<f64>() / times.len() as f64;
    times.sort_by(|a, b| a.total_cmp(b));
    let median_ms = median(&times);
    let flops = kind.flops(input);
    let resolution_ms = timer_resolution().as_secs_f64() * 1e3;
    Ok(BenchRecord {
        name: kind.name().to_string(),
        input: format!("{}x{}x{}x{}", input.n, input.c, input.h, input.w),
        repetitions: opts.repetitions,
        warmup,
        time_ms_median: median_ms,
        time_ms_mean: mean_ms,
        flops,
        ms_per_mflop: median_ms / (flops as f64 / 1e6),
        coarse_timer: median_ms < COARSE_TIMER_TICKS * resolution_ms,
    })
}

pub fn bench_layers<T: Element>(kinds: &[BenchKind], input: Shape4, opts: &BenchOptions) -> Result<BenchReport> {
    let records = kinds
        .iter()
        .map(|&k| bench_layer::<T>(k, input, opts))
        .collect::<Result<Vec<_>>>()?;
    Ok(BenchReport {
        threads: 1,
        precision: T::DTYPE.to_string(),
        records,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(ReportFormat::Text),
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            _ => Err(Error::Usage(format!("unknown report format {s:?} (expected text, csv or json)"))),
        }
    }
}

pub const REPORT_COLUMNS: [&str; 5] = ["name", "time_ms_median", "time_ms_mean", "flops", "ms_per_mflop"];

pub fn emit_report(report: &BenchReport, format: ReportFormat) -> Result<String> {
    if report.records.is_empty() {
        return Err(Error::Usage("no benchmark records to report".into()));
    }
    match format {
        ReportFormat::Json => {
            serde_json::to_string_pretty(report).map_err(|e| Error::Usage(format!("json encoding: {e}")))
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let enc = |e: csv::Error| Error::Usage(format!("csv encoding: {e}"));
            w.write_record(REPORT_COLUMNS).map_err(enc)?;
            for r in &report.records {
                w.write_record([
                    r.name.clone(),
                    format!("{:.6}", r.time_ms_median),
                    format!("{:.6}", r.time_ms_mean),
                    r.flops.to_string(),
                    format!("{:.8}", r.ms_per_mflop),
                ])
                .map_err(enc)?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Usage(format!("csv encoding: {e}")))?;
            Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
        }
        ReportFormat::Text => {
            let mut s = format!(
                "{:<12} {:>14} {:>12} {:>14} {:>14}\n",
                REPORT_COLUMNS[0], REPORT_COLUMNS[1], REPORT_COLUMNS[2], REPORT_COLUMNS[3], REPORT_COLUMNS[4]
            );
            for r in &report.records {
                s.push_str(&format!(
                    "{:<12} {:>14.4} {:>12.4} {:>14} {:>14.6}{}\n",
                    r.name,
                    r.time_ms_median,
                    r.time_ms_mean,
                    r.flops,
                    r.ms_per_mflop,
                    if r.coarse_timer { "  (coarse timer)" } else { "" }
                ));
            }
            s.push_str(&format!(
                "threads={} precision={} repetitions={}\n",
                report.threads, report.precision, report.records[0].repetitions
            ));
            Ok(s)
        }
    }
}
