use asl_core::data::augment::CropFlip;
use asl_core::kernels::{conv_naive, ConvSpec, KernelOffset};
use asl_core::nn::checkpoint::{decode, encode, Entry};
use asl_core::nn::LrSchedule;
use asl_core::shift::{asl_backward, asl_forward_raw, decompose_conv, shift_integer, strided_size, GroupedShiftSpec, InitMode};
use asl_core::verify::random_tensor;
use asl_core::zoo::{AblationMode, NetworkConfig};
use asl_core::{Shape4, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tensor(seed: u64, shape: Shape4) -> Tensor<f64> {
    random_tensor(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn shape() -> impl Strategy<Value = Shape4> {
    (1usize..3, 1usize..5, 1usize..9, 1usize..9).prop_map(|(n, c, h, w)| Shape4::new(n, c, h, w))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn integer_asl_is_an_exact_shift(seed in any::<u64>(), s in shape(), di in -3isize..4, dj in -3isize..4) {
        let x = tensor(seed, s);
        let theta: Vec<f64> = (0..s.c).flat_map(|_| [di as f64, dj as f64]).collect();
        let (y, _) = asl_forward_raw(&x, &theta, 1).unwrap();
        prop_assert_eq!(y, shift_integer(&x, KernelOffset::new(0, di, dj)));
    }

    #[test]
    fn asl_backward_is_the_adjoint(seed in any::<u64>(), s in shape(), stride in 1usize..3) {
        let x = tensor(seed, s);
        let theta: Vec<f64> = tensor(seed ^ 1, Shape4::new(1, 2 * s.c, 1, 1)).data().iter().map(|v| 2.5 * v).collect();
        let (y, cache) = asl_forward_raw(&x, &theta, stride).unwrap();
        let (oh, ow) = strided_size(s.h, s.w, stride);
        prop_assert_eq!(y.shape(), Shape4::new(s.n, s.c, oh, ow));
        let g = tensor(seed ^ 2, y.shape());
        let back = asl_backward(&g, &cache).unwrap();
        let lhs = y.dot(&g).unwrap();
        let rhs = x.dot(&back.input).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()), "{} vs {}", lhs, rhs);
    }

    #[test]
    fn decomposition_matches_direct_convolution(seed in any::<u64>(), s in shape(), d in 1usize..5, stride in 1usize..3) {
        let x = tensor(seed, s);
        let spec = ConvSpec::same3x3(d, s.c, stride).unwrap();
        let w = tensor(seed ^ 3, spec.weight_shape());
        let direct = conv_naive(&x, &w, &spec).unwrap();
        let summed = decompose_conv(&x, &w, &spec).unwrap();
        prop_assert!(direct.max_abs_diff(&summed).unwrap() < 1e-12);
    }

    #[test]
    fn grouped_spec_assigns_every_channel(c in 1usize..200) {
        let spec = GroupedShiftSpec::grid3x3(c).unwrap();
        let mut per_offset = std::collections::HashMap::new();
        for ch in 0..c {
            let o = spec.channel_offset(ch);
            prop_assert!(o.0.abs() <= 1 && o.1.abs() <= 1);
            *per_offset.entry(o).or_insert(0usize) += 1;
        }
        if c >= 9 {
            let n = c / 9;
            for (o, count) in per_offset {
                let expected = if o == (0, 0) { n + c % 9 } else { n };
                prop_assert_eq!(count, expected);
            }
        }
    }

    #[test]
    fn checkpoint_entries_round_trip(values in prop::collection::vec(any::<f32>(), 0..40), wide in prop::collection::vec(-1e300f64..1e300, 1..10), name in "[a-z/]{1,12}") {
        let entries = vec![
            Entry::from_values(name.clone(), vec![values.len()], &values),
            Entry::from_values(format!("{name}2"), vec![wide.len(), 1], &wide),
        ];
        let back = decode(&encode(&entries)).unwrap();
        let stored: Vec<u32> = back[0].values::<f32>().unwrap().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(stored, values.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(back[1].values::<f64>().unwrap(), wide);
    }

    #[test]
    fn crop_flip_keeps_shape_and_double_flip_is_identity(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let side = 8;
        let src: Vec<i32> = (1..=(3 * side * side) as i32).collect();
        let a = CropFlip::sample(&mut rng);
        prop_assert!(a.dy <= 8 && a.dx <= 8);
        let mut once = vec![0; src.len()];
        CropFlip { dy: 4, dx: 4, flip: true }.apply(&src, 3, side, &mut once);
        let mut twice = vec![0; src.len()];
        CropFlip { dy: 4, dx: 4, flip: true }.apply(&once, 3, side, &mut twice);
        prop_assert_eq!(&twice, &src);
        let mut out = vec![-1; src.len()];
        a.apply(&src, 3, side, &mut out);
        prop_assert!(out.iter().all(|v| *v == 0 || src.contains(v)));
    }

    #[test]
    fn step_schedule_never_increases(m1 in 1u64..1000, gap in 1u64..1000, it in 0u64..3000) {
        let s = LrSchedule::Step { base: 0.1, gamma: 0.1, milestones: vec![m1, m1 + gap] };
        prop_assert!(s.lr(it + 1) <= s.lr(it));
        prop_assert!(s.lr(it) > 0.0);
    }

    #[test]
    fn network_config_text_round_trips(n in 1usize..5, width in 1usize..64, eps in 1usize..4, mode in 0usize..4) {
        let mut cfg = NetworkConfig::asnet_cifar(6 * n + 2, width, eps);
        AblationMode::ALL[mode].apply(&mut cfg);
        let back = NetworkConfig::parse(&cfg.to_text()).unwrap();
        prop_assert_eq!(AblationMode::classify(back.init_mode, back.trainable), Some(AblationMode::ALL[mode]));
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn init_mode_names_round_trip(i in 0usize..4) {
        let m = InitMode::ALL[i];
        prop_assert_eq!(m.name().parse::<InitMode>().unwrap(), m);
    }
}
