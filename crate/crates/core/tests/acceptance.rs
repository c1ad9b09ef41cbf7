//! Acceptance checks, one line per criterion.
//!
//! CIFAR-10 training runs only when `ASL_DATA_ROOT` points at the binary
//! dataset and `ASL_ACCEPT_LONG=1`; otherwise those criteria report BLOCKED.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use asl_core::bench::{bench_layer, table1_input, BenchKind, BenchOptions};
use asl_core::data::cifar::{self, CifarKind, Split};
use asl_core::data::{mix_seed, synthetic_cifar};
use asl_core::kernels::{count_flops, FlopsDesc};
use asl_core::nn::layers::{LayerKind, ParamRole};
use asl_core::nn::Graph;
use asl_core::parallel;
use asl_core::shift::{init_shift, GroupedShiftSpec, InitMode};
use asl_core::train::{TrainConfig, Trainer};
use asl_core::verify::{self, recover_shift};
use asl_core::zoo::{build, build_asnet_cifar, build_asresnet, AblationMode, NetworkConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 20_180_522;

const C1_BUDGET: Duration = Duration::from_secs(10);
const C2_BUDGET: Duration = Duration::from_secs(60);
const C3_BUDGET: Duration = Duration::from_secs(300);
const C3_TRUE_SHIFT: (f64, f64) = (1.3, -0.7);
const C3_TOL_PX: f64 = 0.05;
const C3_STEPS: usize = 2_000;
const C3_INITS: usize = 10;
const C3_LR: f64 = 0.01;
const C5_RUNS: usize = 3;
const C6_TARGET_FULL: f64 = 0.8914;
const C6_FULL_BAND: f64 = 0.01;
const C6_TARGET_REDUCED: f64 = 0.85;
const C6_REDUCED_ITERS: u64 = 16_000;
const C7_ITERS: u64 = 2_000;
const PARAM_TOL: f64 = 0.15;

#[derive(PartialEq)]
enum Status {
    Pass,
    Fail,
    Blocked,
}

struct Line {
    id: usize,
    title: &'static str,
    status: Status,
    detail: String,
}

fn status(ok: bool) -> Status {
    if ok {
        Status::Pass
    } else {
        Status::Fail
    }
}

fn within(actual: f64, expected: f64, tol: f64) -> bool {
    (actual - expected).abs() <= tol * expected
}

fn c1() -> Line {
    let t = Instant::now();
    let suites = verify::oracle_suites(SEED).expect("oracle suites run");
    let decomp: Vec<_> = suites.iter().filter(|s| s.name.starts_with("decomposition")).collect();
    let elapsed = t.elapsed();
    let ok = decomp.len() == 2 && decomp.iter().all(|s| s.passed()) && elapsed < C1_BUDGET;
    Line {
        id: 1,
        title: "decomposition oracle",
        status: status(ok),
        detail: format!(
            "f32 max {:.2e} (<1e-5), f64 max {:.2e} (<1e-12), {} cases each, {:.2}s",
            decomp[0].max_error,
            decomp[1].max_error,
            decomp[0].cases,
            elapsed.as_secs_f64()
        ),
    }
}

fn c2() -> Line {
    let t = Instant::now();
    let suites = verify::gradient_suites(SEED, None).expect("gradient suites run");
    let elapsed = t.elapsed();
    let ok = suites.iter().all(|s| s.passed()) && elapsed < C2_BUDGET;
    Line {
        id: 2,
        title: "gradient correctness",
        status: status(ok),
        detail: format!(
            "asl max rel {:.2e} (<1e-4, {} cases), network max rel {:.2e} (<1e-3), {:.2}s",
            suites[0].max_error,
            suites[0].cases,
            suites[1].max_error,
            elapsed.as_secs_f64()
        ),
    }
}

fn c3() -> Line {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst: f64 = 0.0;
    let mut slowest = 0;
    let mut all = true;
    for i in 0..C3_INITS {
        let init = (rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0));
        let r = recover_shift(C3_TRUE_SHIFT, init, C3_STEPS, C3_LR, C3_TOL_PX, mix_seed(SEED, i as u64))
            .expect("recovery runs");
        worst = worst.max(r.error);
        match r.converged_at {
            Some(s) => slowest = slowest.max(s),
            None => all = false,
        }
    }
    let elapsed = t.elapsed();
    let ok = all && worst < C3_TOL_PX && elapsed < C3_BUDGET;
    Line {
        id: 3,
        title: "shift recovery",
        status: status(ok),
        detail: format!(
            "{C3_INITS} inits, worst final error {worst:.4} px (<{C3_TOL_PX}), all within tolerance by step {slowest} (<= {C3_STEPS}), {:.1}s",
            elapsed.as_secs_f64()
        ),
    }
}

fn c4() -> Line {
    let pw = count_flops(&FlopsDesc::Conv {
        out_channels: 64,
        in_channels: 64,
        kernel: 1,
        out_h: 224,
        out_w: 224,
    });
    let dw = count_flops(&FlopsDesc::Depthwise {
        channels: 64,
        kernel: 9,
        out_h: 224,
        out_w: 224,
    });
    let input = table1_input();
    let ok = pw == 205_520_896
        && dw == 28_901_376
        && BenchKind::Conv1x1.flops(input) == pw
        && BenchKind::DwConv3x3.flops(input) == dw;
    Line {
        id: 4,
        title: "FLOPs accounting",
        status: status(ok),
        detail: format!("conv1x1 {pw}, dwconv3x3 {dw}"),
    }
}

fn c5() -> Line {
    parallel::set_enabled(false);
    let opts = BenchOptions::default();
    let mut ordered = true;
    let mut pw_medians = Vec::new();
    let mut ratios = Vec::new();
    for run in 0..C5_RUNS {
        let o = BenchOptions {
            seed: run as u64,
            ..opts
        };
        let pw = bench_layer::<f32>(BenchKind::Conv1x1, table1_input(), &o).expect("bench conv1x1");
        let dw = bench_layer::<f32>(BenchKind::DwConv3x3, table1_input(), &o).expect("bench dwconv");
        ordered &= pw.ms_per_mflop < dw.ms_per_mflop;
        pw_medians.push(pw.time_ms_median);
        ratios.push(format!("{:.5}<{:.5}", pw.ms_per_mflop, dw.ms_per_mflop));
    }
    parallel::set_enabled(cfg!(feature = "parallel"));
    let mean = pw_medians.iter().sum::<f64>() / pw_medians.len() as f64;
    let sd = (pw_medians.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / pw_medians.len() as f64).sqrt();
    let cv = sd / mean;
    Line {
        id: 5,
        title: "efficiency ordering",
        status: status(ordered),
        detail: format!(
            "ms/MFLOP conv1x1 vs dwconv3x3 per run [{}], conv1x1 median cv {:.3} across runs, {} reps, 1 thread",
            ratios.join(", "),
            cv,
            opts.repetitions
        ),
    }
}

fn long_runs() -> Option<PathBuf> {
    let root = std::env::var_os("ASL_DATA_ROOT")?;
    (std::env::var("ASL_ACCEPT_LONG").as_deref() == Ok("1")).then(|| PathBuf::from(root))
}

fn load_cifar10(root: &Path) -> (Arc<cifar::CifarData>, Arc<cifar::CifarData>) {
    let train = cifar::load(root, CifarKind::Cifar10, Split::Train).expect("CIFAR-10 train split");
    let test = cifar::load(root, CifarKind::Cifar10, Split::Test).expect("CIFAR-10 test split");
    assert_eq!((train.len(), test.len()), (50_000, 10_000));
    (Arc::new(train), Arc::new(test))
}

fn c6() -> Line {
    let Some(root) = long_runs() else {
        return Line {
            id: 6,
            title: "CIFAR-10 training",
            status: Status::Blocked,
            detail: "needs the CIFAR-10 binary set (ASL_DATA_ROOT) and ASL_ACCEPT_LONG=1; not run".into(),
        };
    };
    let (train, test) = load_cifar10(&root);
    let full = std::env::var("ASL_ACCEPT_FULL").as_deref() == Ok("1");
    let cfg = if full { TrainConfig::default() } else { TrainConfig::scaled(C6_REDUCED_ITERS) };
    let cfg = TrainConfig { seed: SEED, ..cfg };
    let graph = build_asnet_cifar::<f32>(&NetworkConfig::asnet_cifar(20, 16, 1), SEED).expect("build");
    let t = Instant::now();
    let mut trainer = Trainer::new(graph, "asnet-cifar 20/16/1".into(), cfg, train, test).expect("trainer");
    let m = trainer.run().expect("training");
    let ok = if full {
        (m.test.top1 - C6_TARGET_FULL).abs() <= C6_FULL_BAND
    } else {
        m.test.top1 >= C6_TARGET_REDUCED
    };
    Line {
        id: 6,
        title: "CIFAR-10 training",
        status: status(ok),
        detail: format!(
            "{} iterations, top-1 {:.4} (target {}), {:.0}s",
            m.iterations,
            m.test.top1,
            if full { ">= 0.8814 and <= 0.9014" } else { ">= 0.85" },
            t.elapsed().as_secs_f64()
        ),
    }
}

fn shift_values(g: &Graph<f32>) -> Vec<f32> {
    g.params()
        .filter(|p| p.role == ParamRole::Shift)
        .flat_map(|p| p.value.clone())
        .collect()
}

fn c7() -> Line {
    // Grouped heuristic: 3x3 offsets by groups, leftover group at the origin.
    let mut grouped_ok = true;
    for c in [9usize, 27, 64, 100] {
        let theta = init_shift::<f64>(InitMode::GroupedHeuristic, c, 0).expect("grouped");
        let spec = GroupedShiftSpec::grid3x3(c).expect("spec");
        let n = c / 9;
        for (ch, (a, b)) in theta.pairs().enumerate() {
            let expect = if n == 0 {
                (ch as isize / 3 - 1, ch as isize % 3 - 1)
            } else if ch < 9 * n {
                ((ch / n) as isize / 3 - 1, (ch / n) as isize % 3 - 1)
            } else {
                (0, 0)
            };
            grouped_ok &= (a, b) == (expect.0 as f64, expect.1 as f64);
            grouped_ok &= spec.channel_offset(ch) == expect;
        }
    }
    let int_ok = init_shift::<f64>(InitMode::SampledInteger, 500, 3)
        .expect("int")
        .pairs()
        .all(|(a, b)| a.fract() == 0.0 && b.fract() == 0.0);

    // Frozen modes keep their shifts bit-identical through training.
    let small = Arc::new(synthetic_cifar(64, CifarKind::Cifar10, 1));
    let mut frozen_ok = true;
    let mut trained_moves = false;
    for mode in AblationMode::ALL {
        let mut net = NetworkConfig::asnet_cifar(8, 4, 1);
        mode.apply(&mut net);
        let g = build::<f32>(&net, SEED).expect("build");
        let before = shift_values(&g);
        let cfg = TrainConfig {
            iterations: 5,
            batch_size: 16,
            eval_interval: 0,
            log_interval: 0,
            prefetch: false,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(g, mode.to_string(), cfg, small.clone(), small.clone()).expect("trainer");
        t.run_until(5).expect("train");
        let after = shift_values(&t.graph);
        if mode.trainable() {
            trained_moves = before != after;
        } else {
            frozen_ok &= before.iter().map(|v| v.to_bits()).eq(after.iter().map(|v| v.to_bits()));
        }
    }
    let machinery = grouped_ok && int_ok && frozen_ok && trained_moves;
    let mut detail = format!(
        "GS offsets {}, SI integral {}, frozen shifts bit-identical {}, TR shifts move {}",
        grouped_ok, int_ok, frozen_ok, trained_moves
    );

    let Some(root) = long_runs() else {
        detail.push_str("; TR >= SR >= SI ranking needs CIFAR-10 (ASL_DATA_ROOT, ASL_ACCEPT_LONG=1), not run");
        return Line {
            id: 7,
            title: "ablation machinery",
            status: if machinery { Status::Blocked } else { Status::Fail },
            detail,
        };
    };
    let (train, test) = load_cifar10(&root);
    let mut acc = Vec::new();
    for mode in AblationMode::ALL {
        let mut net = NetworkConfig::asnet_cifar(20, 16, 1);
        mode.apply(&mut net);
        let g = build::<f32>(&net, SEED).expect("build");
        let cfg = TrainConfig {
            seed: SEED,
            eval_interval: 0,
            ..TrainConfig::scaled(C7_ITERS)
        };
        let mut t = Trainer::new(g, mode.to_string(), cfg, train.clone(), test.clone()).expect("trainer");
        acc.push(t.run().expect("train").test.top1);
    }
    // Accuracies in GS, SI, SR, TR order.
    detail.push_str(&format!(
        "; top-1 GS {:.4} SI {:.4} SR {:.4} TR {:.4}",
        acc[0], acc[1], acc[2], acc[3]
    ));
    Line {
        id: 7,
        title: "ablation machinery",
        status: status(machinery && acc[3] >= acc[2] && acc[2] >= acc[1]),
        detail,
    }
}

fn asl_params_are_2c(g: &Graph<f32>) -> bool {
    let trace = g.shape_trace(1).expect("trace");
    g.nodes()
        .iter()
        .filter(|n| n.kind() == Some(LayerKind::Shift))
        .all(|n| n.layer.as_ref().unwrap().params()[0].len() == 2 * trace[n.inputs[0]].1.c)
}

fn c8() -> Line {
    let small = build_asnet_cifar::<f32>(&NetworkConfig::asnet_cifar(20, 16, 1), 0).expect("build");
    let wide = build_asnet_cifar::<f32>(&NetworkConfig::asnet_cifar(20, 88, 1), 0).expect("build");
    let (a, b) = (small.param_count(), wide.param_count());
    let ok = within(a as f64, 0.035e6, PARAM_TOL)
        && within(b as f64, 0.99e6, PARAM_TOL)
        && asl_params_are_2c(&small)
        && asl_params_are_2c(&wide);
    Line {
        id: 8,
        title: "parameter counts",
        status: status(ok),
        detail: format!("ASNet(20,16,1) {a} vs 0.035M, ASNet(20,88,1) {b} vs 0.99M (+-15%), every ASL has 2C shifts"),
    }
}

fn c9() -> Line {
    let g = build_asresnet::<f32>(&NetworkConfig::as_resnet(68), 0).expect("build");
    let trace = g.shape_trace(1).expect("trace");
    let side = |name: &str| trace.iter().find(|(n, _)| n == name).map(|(_, s)| s.h).unwrap_or(0);
    let sides = [
        trace[0].1.h,
        side("stem/conv"),
        side("stage1/block1/add"),
        side("stage2/block3/add"),
        side("stage3/block4/add"),
        side("stage4/block6/add"),
        side("stage5/block3/add"),
        side("head/avgpool"),
    ];
    let count = g.param_count();
    let ok = sides == [224, 112, 112, 56, 28, 14, 7, 1] && within(count as f64, 3.42e6, PARAM_TOL);
    let trace_text: Vec<String> = sides.iter().map(|s| s.to_string()).collect();
    Line {
        id: 9,
        title: "AS-ResNet builder",
        status: status(ok),
        detail: format!("trace {}, w=68 params {count} vs 3.42M (+-15%)", trace_text.join("->")),
    }
}

fn main() {
    let checks: [fn() -> Line; 9] = [c1, c2, c3, c4, c5, c6, c7, c8, c9];
    let mut failed = 0;
    for check in checks {
        let line = check();
        let tag = match line.status {
            Status::Pass => "PASS",
            Status::Fail => {
                failed += 1;
                "FAIL"
            }
            Status::Blocked => "BLOCKED",
        };
        println!("criterion {} [{}] {}: {}", line.id, tag, line.title, line.detail);
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
