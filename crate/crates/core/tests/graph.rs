use asl_core::nn::layers::{he_normal, GlobalAvgPool, Linear, Pointwise, Relu, Shift};
use asl_core::nn::{Graph, GraphBuilder, LrSchedule, Mode, ParamRole, Sgd, SgdConfig, ShiftNorm};
use asl_core::shift::{init_shift, InitMode};
use asl_core::verify::{graph_gradient_errors, random_tensor, toy_network};
use asl_core::zoo::{build, NetworkConfig};
use asl_core::{Shape4, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn two_layer(seed: u64) -> Graph<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = GraphBuilder::<f64>::new(3, 6, 6);
    let theta = init_shift(InitMode::UniformReal, 3, rng.random()).unwrap();
    let s = b.add("asl", Shift::new(theta, 1), &[b.input()]).unwrap();
    let pw = b.add("pw", Pointwise::new(4, 3, 1, he_normal(12, 3, &mut rng)), &[s]).unwrap();
    let r = b.add("relu", Relu::new(), &[pw]).unwrap();
    let p = b.add("pool", GlobalAvgPool::new(), &[r]).unwrap();
    let fc = b.add("fc", Linear::new(4, 3, he_normal(12, 4, &mut rng), vec![0.0; 3]), &[p]).unwrap();
    b.finish(fc).unwrap()
}

#[test]
fn two_layer_graph_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for seed in 0..5 {
        let mut g = two_layer(seed);
        let x = random_tensor::<f64>(Shape4::new(2, 3, 6, 6), &mut rng);
        let errs = graph_gradient_errors(&mut g, &x, &[0, 2], 30, &mut rng).unwrap();
        let worst = errs.iter().cloned().fold(0.0, f64::max);
        assert!(worst < 1e-4, "seed {seed}: {worst}");
    }
}

#[test]
fn input_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = two_layer(3);
    let x = random_tensor::<f64>(Shape4::new(1, 3, 6, 6), &mut rng);
    g.forward_loss(&x, &[1]).unwrap();
    g.backward().unwrap();
    let analytic = g.input_grad().unwrap().clone();
    for i in (0..x.shape().len()).step_by(7) {
        let mut xp = x.clone();
        xp.make_mut()[i] += 1e-5;
        let mut xm = x.clone();
        xm.make_mut()[i] -= 1e-5;
        let fd = (g.forward_loss(&xp, &[1]).unwrap().1 - g.forward_loss(&xm, &[1]).unwrap().1) / 2e-5;
        let a = analytic.data()[i];
        assert!((a - fd).abs() <= 1e-6 * a.abs().max(fd.abs()).max(1.0), "{i}: {a} vs {fd}");
    }
}

#[test]
fn gradients_scale_linearly_with_loss_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = toy_network(4).unwrap();
    let x = random_tensor::<f64>(Shape4::new(2, 3, 8, 8), &mut rng);
    g.forward_loss(&x, &[1, 3]).unwrap();
    g.backward().unwrap();
    let base: Vec<Vec<f64>> = g.params().map(|p| p.grad.clone()).collect();
    g.backward_scaled(3.0).unwrap();
    for (p, b) in g.params().zip(&base) {
        for (s, v) in p.grad.iter().zip(b) {
            assert!((s - 3.0 * v).abs() <= 1e-12 * v.abs().max(1e-300) * 3.0 + 1e-300, "{}", p.name);
        }
    }
}

fn tiny_net(trainable: bool) -> Graph<f32> {
    let mut cfg = NetworkConfig::asnet_cifar(8, 4, 1);
    cfg.trainable = trainable;
    build(&cfg, 9).unwrap()
}

fn steps(g: &mut Graph<f32>, cfg: SgdConfig, n: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut opt = Sgd::new(cfg, g);
    for it in 0..n {
        let x = random_tensor::<f32>(Shape4::new(4, 3, 32, 32), &mut rng);
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..10)).collect();
        g.forward_loss(&x, &labels).unwrap();
        g.backward().unwrap();
        opt.step(g, it).unwrap();
    }
}

fn snapshot(g: &Graph<f32>, role: Option<ParamRole>) -> Vec<u32> {
    g.params()
        .filter(|p| role.is_none_or(|r| p.role == r))
        .flat_map(|p| p.value.iter().map(|v| v.to_bits()))
        .collect()
}

#[test]
fn frozen_shifts_stay_bit_identical() {
    let mut g = tiny_net(false);
    let shifts = snapshot(&g, Some(ParamRole::Shift));
    let weights = snapshot(&g, Some(ParamRole::Weight));
    steps(&mut g, SgdConfig::default(), 3);
    assert_eq!(snapshot(&g, Some(ParamRole::Shift)), shifts);
    assert_ne!(snapshot(&g, Some(ParamRole::Weight)), weights);
}

#[test]
fn trainable_shifts_move() {
    let mut g = tiny_net(true);
    let shifts = snapshot(&g, Some(ParamRole::Shift));
    steps(&mut g, SgdConfig::default(), 2);
    assert_ne!(snapshot(&g, Some(ParamRole::Shift)), shifts);
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let mut g = tiny_net(true);
    let before = snapshot(&g, None);
    let cfg = SgdConfig {
        schedule: LrSchedule::Constant { base: 0.0 },
        shift_norm: ShiftNorm::PerChannel,
        ..SgdConfig::default()
    };
    steps(&mut g, cfg, 3);
    assert_eq!(snapshot(&g, None), before);
}

#[test]
fn eval_mode_is_deterministic_and_batch_independent() {
    let mut g = tiny_net(true);
    steps(&mut g, SgdConfig::default(), 2);
    g.set_mode(Mode::Eval);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random_tensor::<f32>(Shape4::new(3, 3, 32, 32), &mut rng);
    let all = g.forward(&x).unwrap();
    let one = Tensor::from_vec(Shape4::new(1, 3, 32, 32), x.example(1).to_vec()).unwrap();
    let single = g.forward(&one).unwrap();
    assert_eq!(all.example(1), single.example(0));
}
