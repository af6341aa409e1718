use attnbench::layers::{
    attention_map, init_weights, mhsa, project_qkv, ModelConfig, ModelWeights, RunOptions,
};
use attnbench::profile::{AttentionCounter, NoProbe};
use attnbench::pruning::{
    binconcrete_gate, deterministic_gate, estimate_gradient, gated_mhsa, prune_heads, sample_noise,
    sparsity_loss, sparsity_ratio, total_loss, train_gates, GateMode, GateSet, SyntheticTask,
    TrainOptions,
};
use attnbench::reuse::{build_reuse_model, parse_reuse_config};
use attnbench::tensor::{matmul, Matrix};
use attnbench::verify::{gradient_agreement, relative_error};
use attnbench::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn with_output_bias(mut w: ModelWeights, rng: &mut ChaCha8Rng) -> ModelWeights {
    for l in &mut w.layers {
        l.attention_mut()
            .output_bias
            .iter_mut()
            .for_each(|b| *b = rng.random_range(-0.5..0.5));
    }
    w
}

fn gated_run(w: &ModelWeights, x: &Matrix, gates: &[Vec<f32>]) -> Matrix {
    let opts = RunOptions {
        gates: Some(gates),
        ..RunOptions::default()
    };
    w.run(x, &opts, &mut AttentionCounter::default(), &mut NoProbe)
        .unwrap()
}

#[test]
fn binconcrete_examples() {
    for beta in [0.1, 2.0 / 3.0, 1.0, 5.0] {
        assert!((binconcrete_gate(0.0, 0.5, beta).unwrap() - 0.5).abs() < 1e-15);
    }
    for u in [1e-6, 0.3, 0.999] {
        assert!(binconcrete_gate(60.0, u, 2.0 / 3.0).unwrap() > 1.0 - 1e-12);
    }
    assert_eq!(deterministic_gate(-1.0), 0.0);
    assert_eq!(deterministic_gate(0.0), 0.0);
    assert_eq!(deterministic_gate(0.1), 1.0);
    for (u, beta) in [
        (0.0, 1.0),
        (1.0, 1.0),
        (0.5, 0.0),
        (0.5, -1.0),
        (f64::NAN, 1.0),
    ] {
        assert!(matches!(
            binconcrete_gate(0.0, u, beta),
            Err(Error::Domain(_))
        ));
    }
}

#[test]
fn sparsity_and_total_loss_examples() {
    let zeros = GateSet::new(2, 3, 0.0, 1.0);
    assert_eq!(sparsity_loss(&zeros), 0.5);
    assert_eq!(total_loss(0.0, &zeros), 0.5);
    assert!(sparsity_loss(&GateSet::new(2, 3, -800.0, 1.0)) < 1e-300);
    let free = GateSet::new(2, 3, 1.3, 0.0);
    assert_eq!(total_loss(0.42, &free), 0.42);
    let g = GateSet::new(3, 2, 0.7, 0.3);
    let (a, b) = (0.25, 1.5);
    let lhs = total_loss(a, &g) + total_loss(b, &g) - total_loss(a + b, &g);
    assert!((lhs - 0.3 * sparsity_loss(&g)).abs() < 1e-15);
}

#[test]
fn gated_mhsa_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for cfg in [
        ModelConfig::transformer(1, 16, 4),
        ModelConfig::conformer(1, 16, 4),
        ModelConfig::all_attention(1, 16, 4, 3),
    ] {
        let w = with_output_bias(init_weights(&cfg).unwrap(), &mut rng);
        let a = w.layers[0].attention();
        let x = random(6, 16, &mut rng);
        let plain = mhsa(&x, a, &cfg).unwrap();
        assert_eq!(gated_mhsa(&x, a, &[1.0; 4], &cfg).unwrap(), plain);
        assert!(relative_error(&gated_mhsa(&x, a, &[0.5; 4], &cfg).unwrap(), &plain) < 1e-5);
        let none = gated_mhsa(&x, a, &[0.0; 4], &cfg).unwrap();
        for row in none.row_iter() {
            assert_eq!(row, a.output_bias.as_slice());
        }
    }

    // one open gate: H times that head's contribution
    let cfg = ModelConfig::transformer(1, 16, 4);
    let w = with_output_bias(init_weights(&cfg).unwrap(), &mut rng);
    let a = w.layers[0].attention();
    let x = random(5, 16, &mut rng);
    let (q, k, v) = project_qkv(&x, a, 2).unwrap();
    let sa = matmul(&attention_map(&q, &k).unwrap(), &v, false).unwrap();
    let mut want = matmul(&sa, &a.output_block(2).unwrap(), false)
        .unwrap()
        .scale(4.0);
    want.add_row_bias(&a.output_bias).unwrap();
    let got = gated_mhsa(&x, a, &[0.0, 0.0, 1.0, 0.0], &cfg).unwrap();
    assert!(relative_error(&got, &want) < 1e-5);
    assert!(gated_mhsa(&x, a, &[1.0; 3], &cfg).is_err());
}

#[test]
fn sparsity_ratio_examples() {
    let pct = |p, t| (sparsity_ratio(p, t).unwrap() * 1000.0).round() / 10.0;
    assert_eq!(pct(69, 128), 53.9);
    assert_eq!(pct(22, 128), 17.2);
    assert_eq!(sparsity_ratio(0, 7).unwrap(), 0.0);
    assert!(matches!(sparsity_ratio(3, 0), Err(Error::Domain(_))));
    assert!(matches!(sparsity_ratio(9, 8), Err(Error::Domain(_))));
}

#[test]
fn prune_all_open_keeps_model() {
    let cfg = ModelConfig::all_attention(3, 16, 4, 2);
    let w = init_weights(&cfg).unwrap();
    let gates = GateSet::from_mask(&vec![vec![true; 4]; 3]);
    assert_eq!(prune_heads(&w, &gates).unwrap(), w);
}

#[test]
fn prune_matches_gated_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for cfg in [
        ModelConfig::all_attention(3, 16, 4, 2),
        ModelConfig::conformer(2, 16, 4),
    ] {
        let w = with_output_bias(init_weights(&cfg).unwrap(), &mut rng);
        for _ in 0..10 {
            let mask: Vec<Vec<bool>> = (0..cfg.num_layers)
                .map(|_| {
                    let mut row: Vec<bool> = (0..4).map(|_| rng.random_bool(0.5)).collect();
                    row[rng.random_range(0..4)] = true;
                    row
                })
                .collect();
            let gates = GateSet::from_mask(&mask);
            let pruned = prune_heads(&w, &gates).unwrap();
            for (l, row) in pruned.layers.iter().zip(&mask) {
                assert_eq!(
                    l.attention().num_heads(),
                    row.iter().filter(|&&o| o).count()
                );
            }
            for _ in 0..20 {
                let x = random(rng.random_range(1..12), 16, &mut rng);
                let want = gated_run(&w, &x, &gates.deterministic());
                assert!(relative_error(&pruned.forward(&x).unwrap(), &want) <= 1e-4);
            }
        }
    }
}

#[test]
fn fully_pruned_layer_outputs_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = ModelConfig::all_attention(2, 16, 4, 2);
    let w = with_output_bias(init_weights(&cfg).unwrap(), &mut rng);
    let gates = GateSet::from_mask(&[vec![false; 4], vec![true, false, true, false]]);
    let pruned = prune_heads(&w, &gates).unwrap();
    let first = pruned.layers[0].attention();
    assert_eq!(first.num_heads(), 0);
    assert!(first.output.is_none());
    let x = random(5, 16, &mut rng);
    assert!(
        relative_error(
            &pruned.forward(&x).unwrap(),
            &gated_run(&w, &x, &gates.deterministic())
        ) <= 1e-5
    );
    let mut counter = AttentionCounter::default();
    pruned
        .run(&x, &RunOptions::default(), &mut counter, &mut NoProbe)
        .unwrap();
    assert_eq!(counter.maps_computed, 1);
}

#[test]
fn prune_rejects_reuse_models_and_bad_shapes() {
    let cfg = ModelConfig::conformer(4, 16, 4);
    let w = build_reuse_model(&cfg, &parse_reuse_config("2x2", 4).unwrap()).unwrap();
    assert!(matches!(
        prune_heads(&w, &GateSet::for_config(&cfg, 0.0)),
        Err(Error::Config(_))
    ));
    let plain = init_weights(&cfg).unwrap();
    assert!(prune_heads(&plain, &GateSet::new(3, 4, 1.0, 0.0)).is_err());
}

fn toy() -> (ModelConfig, ModelWeights, SyntheticTask) {
    let cfg = ModelConfig::all_attention(4, 32, 4, 4);
    let w = init_weights(&cfg).unwrap();
    let task = SyntheticTask::distillation(&w, 16, 2, 7).unwrap();
    (cfg, w, task)
}

#[test]
fn training_keeps_gates_open_without_sparsity() {
    let (cfg, w, task) = toy();
    let (g, log) = train_gates(
        &w,
        &GateSet::for_config(&cfg, 0.0),
        &task,
        &TrainOptions::default(),
    )
    .unwrap();
    assert_eq!(g.mode, GateMode::Deterministic);
    assert_eq!(g.open_gates(), 16);
    assert_eq!(log.len(), 300);
    assert!(log.iter().all(|s| s.task_loss.is_finite()));
}

#[test]
fn open_gates_fall_with_lambda() {
    let (cfg, w, task) = toy();
    let opts = TrainOptions::default();
    let mut open = Vec::new();
    for lambda in [0.01, 0.02, 0.05] {
        open.push(
            train_gates(&w, &GateSet::for_config(&cfg, lambda), &task, &opts)
                .unwrap()
                .0
                .open_gates(),
        );
    }
    assert!(open.windows(2).all(|p| p[1] <= p[0]), "{open:?}");
}

#[test]
fn null_task_with_strong_sparsity_closes_everything() {
    let (cfg, w, _) = toy();
    let (g, log) = train_gates(
        &w,
        &GateSet::for_config(&cfg, 1.0),
        &SyntheticTask::null(),
        &TrainOptions::default(),
    )
    .unwrap();
    assert_eq!(g.open_gates(), 0);
    assert!(log.iter().all(|s| s.task_loss == 0.0));
    assert!(log.last().unwrap().sparsity_loss < log[0].sparsity_loss);
}

#[test]
fn non_finite_loss_is_reported() {
    let (cfg, w, task) = toy();
    let err = train_gates(
        &w,
        &GateSet::for_config(&cfg, f64::NAN),
        &task,
        &TrainOptions::default(),
    )
    .unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { step: 0 }));
}

#[test]
fn gradient_survives_step_refinement() {
    let (cfg, w, task) = toy();
    let gates = GateSet::for_config(&cfg, 0.05);
    let u = sample_noise(&gates, &mut ChaCha8Rng::seed_from_u64(4));
    let coarse = estimate_gradient(&w, &gates, &task, &u, 1e-2).unwrap();
    let fine = estimate_gradient(&w, &gates, &task, &u, 1e-3).unwrap();
    assert!(gradient_agreement(&coarse, &fine) >= 0.95);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn gate_ranges(la in -20.0f64..20.0, u in 1e-9f64..(1.0 - 1e-9), beta in 0.05f64..4.0) {
        let g = binconcrete_gate(la, u, beta).unwrap();
        prop_assert!((0.0..=1.0).contains(&g));
        let d = deterministic_gate(la);
        prop_assert!(d == 0.0 || d == 1.0);
    }

    #[test]
    fn sparsity_loss_increases_in_each_logit(la in prop::collection::vec(-5.0f64..5.0, 6), idx in 0usize..6, bump in 0.01f64..3.0) {
        let mut g = GateSet::new(2, 3, 0.0, 1.0);
        g.log_alpha = vec![la[..3].to_vec(), la[3..].to_vec()];
        let before = sparsity_loss(&g);
        g.log_alpha[idx / 3][idx % 3] += bump;
        prop_assert!(sparsity_loss(&g) > before);
    }

    #[test]
    fn uniform_gates_cancel(c in 0.01f32..=1.0, seed in any::<u64>(), heads in prop::sample::select(vec![1usize, 2, 4])) {
        let cfg = ModelConfig::all_attention(1, 16, heads, 2).with_seed(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = with_output_bias(init_weights(&cfg).unwrap(), &mut rng);
        let x = random(1 + seed as usize % 9, 16, &mut rng);
        let a = w.layers[0].attention();
        let plain = mhsa(&x, a, &cfg).unwrap();
        prop_assert!(relative_error(&gated_mhsa(&x, a, &vec![c; heads], &cfg).unwrap(), &plain) <= 1e-5);
    }
}
