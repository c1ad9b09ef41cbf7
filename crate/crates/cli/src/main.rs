use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use asl_core::bench::{self, BenchKind, BenchOptions, ReportFormat};
use asl_core::data::cifar::{self, CifarData, CifarKind, Split};
use asl_core::nn::checkpoint;
use asl_core::nn::{LrSchedule, SgdConfig, ShiftNorm};
use asl_core::shift::InitMode;
use asl_core::train::{TrainConfig, Trainer};
use asl_core::verify::{self, Fault, SuiteReport};
use asl_core::zoo::{self, NetworkConfig};
use asl_core::{parallel, Element, Error, Shape4};
use clap::{Args, Parser, Subcommand, ValueEnum};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_CHECKPOINT: u8 = 3;
const EXIT_SUITE: u8 = 4;

#[derive(Parser)]
#[command(name = "asl", version, about = "Active shift layer networks: train, evaluate, verify and benchmark")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Network config file (key = value lines)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory holding the CIFAR binary files
    #[arg(long, global = true, env = "ASL_DATA_ROOT")]
    data_root: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Dataset::Cifar10)]
    dataset: Dataset,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for the kernels; 1 disables parallel dispatch
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
    /// Shift initialization: grouped, int-normal, real-normal or uniform
    #[arg(long, global = true)]
    init: Option<InitMode>,
    /// Keep shift parameters fixed at their initial values
    #[arg(long, global = true)]
    freeze_shift: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Dataset {
    Cifar10,
    Cifar100,
}

impl Dataset {
    fn kind(self) -> CifarKind {
        match self {
            Dataset::Cifar10 => CifarKind::Cifar10,
            Dataset::Cifar100 => CifarKind::Cifar100,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScheduleKind {
    Step,
    Linear,
    Constant,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network on CIFAR
    Train(TrainArgs),
    /// Evaluate a checkpoint on a CIFAR split
    Eval(EvalArgs),
    /// Finite-difference gradient suites
    Gradcheck(SuiteArgs),
    /// Decomposition, collapse and adjoint oracle suites
    Oracle(SuiteArgs),
    /// Single-threaded layer benchmarks
    Bench(BenchArgs),
    /// Write per-layer shift values as csv
    ExportShifts(ExportArgs),
    /// Print the resolved network config
    ShowConfig,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 64_000)]
    iters: u64,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, value_enum, default_value_t = ScheduleKind::Step)]
    lr_schedule: ScheduleKind,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    /// Step milestones; defaults to 50% and 75% of the run
    #[arg(long, value_delimiter = ',')]
    milestones: Option<Vec<u64>>,
    #[arg(long, default_value_t = 0.1)]
    gamma: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    /// Base learning rate of the shift parameters
    #[arg(long, default_value_t = 1e-2)]
    shift_lr: f64,
    /// Shift gradient normalization: layer or channel
    #[arg(long, default_value = "layer")]
    shift_norm: ShiftNorm,
    #[arg(long)]
    no_augment: bool,
    #[arg(long)]
    no_prefetch: bool,
    #[arg(long, default_value_t = 2_000)]
    eval_interval: u64,
    #[arg(long, default_value_t = 100)]
    log_interval: u64,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 4_000)]
    checkpoint_interval: u64,
    /// Checkpoint to continue from
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value = "metrics.json")]
    metrics: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[arg(long, default_value_t = 500)]
    eval_batch: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Args)]
struct SuiteArgs {
    #[arg(long, hide = true)]
    inject_fault: Option<Fault>,
}

#[derive(Args)]
struct BenchArgs {
    /// Every layer at 1x64x224x224 with 100 repetitions
    #[arg(long)]
    table1: bool,
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<BenchKind>>,
    /// Input shape as N,C,H,W
    #[arg(long, value_delimiter = ',', num_args = 1)]
    input: Option<Vec<usize>>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    /// text, csv or json
    #[arg(long, default_value = "text")]
    format: ReportFormat,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    /// Trained checkpoint; the freshly initialized model when omitted
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

struct Failure {
    code: u8,
    error: Error,
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        let code = match error {
            Error::Checkpoint(_) => EXIT_CHECKPOINT,
            Error::Format { .. } => EXIT_DATA,
            _ => EXIT_USAGE,
        };
        Failure { code, error }
    }
}

fn with_code(code: u8) -> impl Fn(Error) -> Failure {
    move |error| Failure { code, error }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn network_config(g: &Global) -> CliResult<NetworkConfig> {
    let mut cfg = match &g.config {
        Some(path) => NetworkConfig::load(path)?,
        None => NetworkConfig {
            classes: g.dataset.kind().classes(),
            ..NetworkConfig::asnet_cifar(20, 16, 1)
        },
    };
    if let Some(mode) = g.init {
        cfg.init_mode = mode;
    }
    if g.freeze_shift {
        cfg.trainable = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_split(g: &Global, split: Split) -> CliResult<CifarData> {
    let root = g.data_root.as_deref().ok_or_else(|| Failure {
        code: EXIT_DATA,
        error: Error::Usage("no dataset root: pass --data-root or set ASL_DATA_ROOT".into()),
    })?;
    let data = cifar::load(root, g.dataset.kind(), split).map_err(with_code(EXIT_DATA))?;
    log::info!("loaded {} {:?} images from {}", data.len(), split, root.display());
    Ok(data)
}

fn check_classes(cfg: &NetworkConfig, g: &Global) -> CliResult<()> {
    let classes = g.dataset.kind().classes();
    if cfg.classes != classes || cfg.input_size != cifar::SIDE {
        return Err(Error::Config(format!(
            "network expects {} classes at {}px, dataset has {classes} classes at {}px",
            cfg.classes,
            cfg.input_size,
            cifar::SIDE
        ))
        .into());
    }
    Ok(())
}

fn write_output(path: Option<&Path>, text: &str) -> CliResult<()> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Error::Io {
            path: p.to_path_buf(),
            source: e,
        })?,
        None => print!("{text}"),
    }
    Ok(())
}

fn train_config(a: &TrainArgs, seed: u64) -> CliResult<TrainConfig> {
    let schedule = match a.lr_schedule {
        ScheduleKind::Step => LrSchedule::Step {
            base: a.lr,
            gamma: a.gamma,
            milestones: a.milestones.clone().unwrap_or_else(|| vec![a.iters / 2, a.iters * 3 / 4]),
        },
        ScheduleKind::Linear => LrSchedule::Linear {
            base: a.lr,
            total: a.iters,
        },
        ScheduleKind::Constant => LrSchedule::Constant { base: a.lr },
    };
    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        iterations: a.iters,
        batch_size: a.batch_size,
        sgd: SgdConfig {
            schedule,
            momentum: a.momentum,
            weight_decay: a.weight_decay,
            shift_lr: a.shift_lr,
            shift_norm: a.shift_norm,
        },
        augment: !a.no_augment,
        prefetch: !a.no_prefetch,
        eval_interval: a.eval_interval,
        log_interval: a.log_interval,
        checkpoint_dir: a.checkpoint_dir.clone(),
        checkpoint_interval: a.checkpoint_interval,
        seed,
        ..defaults
    };
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()).into());
    }
    Ok(cfg)
}

fn cmd_train<T: Element>(g: &Global, a: &TrainArgs) -> CliResult<()> {
    let net = network_config(g)?;
    check_classes(&net, g)?;
    let config = train_config(a, g.seed)?;
    let train = Arc::new(load_split(g, Split::Train)?);
    let test = Arc::new(load_split(g, Split::Test)?);
    if let Some(dir) = &config.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.clone(),
            source: e,
        })?;
    }
    let graph = zoo::build::<T>(&net, g.seed)?;
    let name = format!("{} {}/{}/{}", net.family, net.depth, net.width, net.epsilon);
    log::info!("{name}: {} parameters", graph.param_count());
    let mut trainer = Trainer::new(graph, name, config, train, test)?;
    if let Some(path) = &a.resume {
        trainer.resume(path).map_err(with_code(EXIT_CHECKPOINT))?;
    }
    let metrics = trainer.run()?;
    if let Some(dir) = &trainer.config.checkpoint_dir {
        trainer.save(&dir.join("final.bin"))?;
    }
    let json = serde_json::to_string_pretty(&metrics).expect("metrics serialize") + "\n";
    write_output(Some(&a.metrics), &json)?;
    println!(
        "iterations {} top1 {:.4} params {}",
        metrics.iterations, metrics.test.top1, metrics.param_count
    );
    Ok(())
}

fn cmd_eval<T: Element>(g: &Global, a: &EvalArgs) -> CliResult<()> {
    let net = network_config(g)?;
    check_classes(&net, g)?;
    let train = Arc::new(load_split(g, Split::Train)?);
    let data = match a.split {
        SplitArg::Train => Arc::clone(&train),
        SplitArg::Test => Arc::new(load_split(g, Split::Test)?),
    };
    let mut graph = zoo::build::<T>(&net, g.seed)?;
    checkpoint::load(&a.checkpoint, &mut graph, None).map_err(with_code(EXIT_CHECKPOINT))?;
    let config = TrainConfig {
        eval_batch: a.eval_batch.max(1),
        seed: g.seed,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(graph, String::new(), config, train, data)?;
    let report = trainer.evaluate()?;
    println!("{}", serde_json::to_string(&report).expect("report serialize"));
    Ok(())
}

fn print_suites(reports: &[SuiteReport]) -> CliResult<()> {
    for r in reports {
        println!("{r}");
    }
    match reports.iter().find(|r| !r.passed()) {
        Some(r) => Err(Failure {
            code: EXIT_SUITE,
            error: Error::State(format!(
                "suite {} failed; replay with seed {}",
                r.name,
                r.failing_seed.map_or("-".into(), |s| s.to_string())
            )),
        }),
        None => Ok(()),
    }
}

fn cmd_bench<T: Element>(a: &BenchArgs, seed: u64) -> CliResult<()> {
    parallel::set_enabled(false);
    let kinds = a.layers.clone().unwrap_or_else(|| BenchKind::ALL.to_vec());
    let input = match &a.input {
        Some(d) if a.table1 => {
            return Err(Error::Usage(format!("--input {d:?} conflicts with --table1")).into());
        }
        Some(d) if d.len() == 4 && d.iter().all(|&v| v > 0) => Shape4::new(d[0], d[1], d[2], d[3]),
        Some(d) => return Err(Error::Usage(format!("--input needs four positive sizes, got {d:?}")).into()),
        None => bench::table1_input(),
    };
    let defaults = BenchOptions::default();
    let opts = BenchOptions {
        repetitions: a.reps.unwrap_or(defaults.repetitions),
        warmup: a.warmup.unwrap_or(defaults.warmup),
        seed,
    };
    if a.table1 && opts.repetitions != bench::DEFAULT_REPETITIONS {
        log::warn!("--table1 with {} repetitions instead of {}", opts.repetitions, bench::DEFAULT_REPETITIONS);
    }
    let report = bench::bench_layers::<T>(&kinds, input, &opts)?;
    let text = bench::emit_report(&report, a.format)?;
    write_output(a.out.as_deref(), &text)
}

fn cmd_export<T: Element>(g: &Global, a: &ExportArgs) -> CliResult<()> {
    let net = network_config(g)?;
    let mut graph = zoo::build::<T>(&net, g.seed)?;
    if let Some(path) = &a.checkpoint {
        checkpoint::load(path, &mut graph, None).map_err(with_code(EXIT_CHECKPOINT))?;
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Usage(format!("csv: {e}"));
    w.write_record(["layer", "channel", "alpha", "beta"]).map_err(io)?;
    for (name, shift) in graph.shift_params() {
        for (c, (alpha, beta)) in shift.pairs().enumerate() {
            w.write_record([
                name.clone(),
                c.to_string(),
                alpha.to_f64_lossy().to_string(),
                beta.to_f64_lossy().to_string(),
            ])
            .map_err(io)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Usage(format!("csv: {e}")))?;
    write_output(a.out.as_deref(), &String::from_utf8(bytes).expect("csv is utf-8"))
}

fn dispatch<T: Element>(cli: &Cli) -> CliResult<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Train(a) => cmd_train::<T>(g, a),
        Command::Eval(a) => cmd_eval::<T>(g, a),
        Command::Gradcheck(a) => print_suites(&verify::gradient_suites(g.seed, a.inject_fault)?),
        Command::Oracle(_) => print_suites(&verify::oracle_suites(g.seed)?),
        Command::Bench(a) => cmd_bench::<T>(a, g.seed),
        Command::ExportShifts(a) => cmd_export::<T>(g, a),
        Command::ShowConfig => {
            print!("{}", network_config(g)?.to_text());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Some(n) = cli.global.threads {
        parallel::configure_threads(n);
    }
    let result = match cli.global.precision {
        Precision::F32 => dispatch::<f32>(&cli),
        Precision::F64 => dispatch::<f64>(&cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.error);
            ExitCode::from(f.code)
        }
    }
}
