use mambamoe::accounting::{exact_count, exact_count_of};
use mambamoe::bench::expected_state_bytes;
use mambamoe::checkpoint;
use mambamoe::mamba::{scan_associative, scan_sequential, MambaDims, MambaParams, ScanMode, ScanOptions};
use mambamoe::model::{ForwardOptions, ModelConfig, ModelParams, Variant};
use mambamoe::moe::{ExpertKind, MoEOptions, MoEParams};
use mambamoe::param::{Init, Parameters};
use mambamoe::sinkhorn::{route_top1, sinkhorn, RouterLogits, SinkhornConfig, SinkhornInit};
use mambamoe::tensor::{FlopCounter, Tensor};
use mambamoe::train::{lr_at, make_task_batch, Task, TrainConfig, DELIM};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn variant() -> impl Strategy<Value = Variant> {
    prop::sample::select(Variant::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn converged_plans_are_balanced(s in 1usize..40, n in 1usize..9, seed in any::<u64>(), std in 0.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..s * n).map(|_| std * rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
        let logits = RouterLogits::new(s, n, data).unwrap();
        for init in [SinkhornInit::Uniform, SinkhornInit::Fast, SinkhornInit::FastLiteral] {
            let plan = sinkhorn(&logits, &SinkhornConfig { init, max_iters: 500, ..Default::default() });
            prop_assert!(plan.pi.iter().all(|&p| p >= 0.0 && p.is_finite()));
            prop_assert_eq!(plan.expert_of.len(), s);
            prop_assert!(plan.expert_of.iter().all(|&e| e < n));
            prop_assert!(plan.coeff.iter().all(|&c| c > 0.0 && c < 1.0));
            if plan.converged {
                let target = s as f64 / n as f64;
                prop_assert!(plan.row_sums().iter().all(|r| (r - 1.0).abs() <= 1e-3));
                prop_assert!(plan.col_sums().iter().all(|c| (c - target).abs() / target <= 1e-3));
            }
        }
    }

    #[test]
    fn top1_picks_a_maximum(row in prop::collection::vec(-5.0f64..5.0, 1..12)) {
        let e = route_top1(&row, row.len())[0];
        prop_assert!(row.iter().all(|&v| v <= row[e]));
        prop_assert!(row[..e].iter().all(|&v| v < row[e]));
    }

    #[test]
    fn associative_scan_matches_sequential(l in 1usize..70, w in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let da = Tensor::<f64>::from_fn(&[l, w], |_| rand::Rng::random_range(&mut rng, 0.0..1.0));
        let dbx = Tensor::<f64>::from_fn(&[l, w], |_| rand::Rng::random_range(&mut rng, -1.0..1.0));
        let a = scan_sequential(&da, &dbx).unwrap();
        let b = scan_associative(&da, &dbx).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn streaming_matches_sequence(d in 2usize..10, expand in 1usize..3, h in 1usize..6, r in 1usize..4, c in 1usize..5, l in 1usize..20, seed in 0u64..1000) {
        let dims = MambaDims { d_model: d, d_inner: d * expand, d_state: h, dt_rank: r, d_conv: c };
        let p = MambaParams::<f64>::init(dims, &Init::new(seed), "m", 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::from_fn(&[l, d], |_| rand::Rng::random_range(&mut rng, -2.0..2.0));
        for mode in [ScanMode::Sequential, ScanMode::Associative] {
            let opts = ScanOptions { mode, ..Default::default() };
            let seq = p.forward_sequence(&x, &opts, &mut FlopCounter::new()).unwrap();
            let mut state = p.fresh_state();
            let bytes = state.size_bytes();
            for t in 0..l {
                let y = p.step(&mut state, x.row(t), &ScanOptions::default(), &mut FlopCounter::new()).unwrap();
                for (a, b) in y.iter().zip(seq.row(t)) {
                    prop_assert!((a - b).abs() < 1e-10);
                }
            }
            prop_assert_eq!(bytes, state.size_bytes());
        }
    }

    #[test]
    fn moe_routing_conserves_tokens(tokens in 1usize..50, n in 1usize..6, seed in 0u64..1000, argmax in any::<bool>()) {
        let layer = MoEParams::<f64>::init(ExpertKind::Swiglu, 6, 8, n, &Init::new(seed), "moe", 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::from_fn(&[tokens, 6], |_| rand::Rng::random_range(&mut rng, -1.0..1.0));
        let opts = if argmax { MoEOptions { routing: mambamoe::moe::RoutingMode::Argmax, ..Default::default() } } else { MoEOptions::default() };
        let (y, routing) = layer.forward(&mut mambamoe::backend::Eager::new(), &x, &opts).unwrap();
        prop_assert_eq!(y.shape(), x.shape());
        prop_assert_eq!(routing.counts.iter().sum::<usize>(), tokens);
        prop_assert_eq!(routing.expert_of.len(), tokens);
    }

    #[test]
    fn checkpoints_round_trip(v in variant(), seed in 0u64..1000, tied in any::<bool>()) {
        let cfg = ModelConfig { tie_embeddings: tied, d_model: 16, d_ff: 24, vocab_size: 40, ..ModelConfig::tiny(v) };
        let m = ModelParams::<f32>::new(cfg, seed).unwrap();
        let (back, header) = checkpoint::from_bytes::<f32>(&checkpoint::to_bytes(&m, None).unwrap()).unwrap();
        prop_assert_eq!(&header.config, &m.config);
        let a = m.named_params();
        let b = back.named_params();
        prop_assert_eq!(a.len(), b.len());
        for ((na, pa), (nb, pb)) in a.iter().zip(&b) {
            prop_assert_eq!(na, nb);
            prop_assert!(pa.value.data().iter().zip(pb.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn exact_count_is_shape_enumeration(v in variant(), layers in 1usize..4, d in 1usize..5, e in 1usize..5, tied in any::<bool>()) {
        let d_model = 8 * d;
        let cfg = ModelConfig {
            n_layers: 2 * layers,
            d_model,
            n_experts: if v.uses_moe() { e } else { 1 },
            tie_embeddings: tied,
            n_heads: 2,
            vocab_size: 50,
            max_seq_len: 64,
            ..ModelConfig::tiny(v)
        };
        let symbolic = exact_count(&cfg).total;
        let shapes: u64 = cfg.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>() as u64).sum();
        prop_assert_eq!(symbolic, shapes);
        let model = ModelParams::<f32>::new(cfg, 0).unwrap();
        prop_assert_eq!(exact_count_of(&model).total, symbolic);
    }

    #[test]
    fn generation_state_bytes_follow_config(v in variant(), n in 1usize..30) {
        let cfg = ModelConfig { d_model: 16, d_ff: 16, vocab_size: 20, ..ModelConfig::tiny(v) };
        let m = ModelParams::<f32>::new(cfg.clone(), 1).unwrap();
        let mut state = m.fresh_state();
        let opts = ForwardOptions::inference();
        for t in 0..n {
            m.step(&mut state, t % 20, &opts, &mut FlopCounter::new()).unwrap();
        }
        prop_assert_eq!(state.size_bytes(), expected_state_bytes(&cfg, n, 4));
    }

    #[test]
    fn task_batches_respect_layout(seed in any::<u64>(), half in 4usize..20, pairs in 1usize..4) {
        let seq = 2 * half;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = make_task_batch(Task::Copy, &mut rng, 3, seq, 64, pairs).unwrap();
        prop_assert!(b.inputs.iter().chain(&b.targets).all(|&t| t < 64));
        for row in 0..3 {
            let inp = &b.inputs[row * seq..(row + 1) * seq];
            let delim = inp.iter().position(|&t| t == DELIM).unwrap();
            let scored: Vec<usize> = (0..seq).filter(|&i| b.weights[row * seq + i] > 0.0).map(|i| b.targets[row * seq + i]).collect();
            prop_assert_eq!(&scored[..], &inp[..scored.len()]);
            prop_assert!(delim >= scored.len());
        }
        let r = make_task_batch(Task::AssociativeRecall, &mut rng, 2, 4 * pairs + 8, 64, pairs).unwrap();
        prop_assert!(r.weights.iter().any(|&w| w > 0.0));
        prop_assert!(r.inputs.iter().chain(&r.targets).all(|&t| t < 64));
    }

    #[test]
    fn schedule_stays_between_bounds(steps in 1usize..5000, frac in 0.0f64..0.2) {
        let cfg = TrainConfig { steps, warmup_frac: frac, lr: 1e-2, min_lr: 1e-3, ..TrainConfig::default() };
        let warmup = ((steps as f64 * frac).ceil() as usize).max(1);
        let mut prev = f64::INFINITY;
        for step in 0..steps {
            let lr = lr_at(&cfg, step);
            prop_assert!(lr > 0.0 && lr <= 1e-2 + 1e-15);
            if step >= warmup {
                prop_assert!(lr >= 1e-3 - 1e-15 && lr <= prev + 1e-15);
                prev = lr;
            }
        }
    }
}
