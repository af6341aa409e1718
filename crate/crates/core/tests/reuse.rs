use attnbench::layers::{
    attention_map, init_weights, project_qkv, LayerWeights, ModelConfig, RunOptions,
};
use attnbench::profile::{AttentionCounter, NoProbe};
use attnbench::reuse::{build_reuse_model, parse_reuse_config, reuse_forward, ReuseSchedule, Role};
use attnbench::tensor::{layer_norm, matmul, Matrix, LAYER_NORM_EPS};
use attnbench::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

#[test]
fn parse_examples() {
    let s = parse_reuse_config("1x16", 16).unwrap();
    assert_eq!(s.group_count(), 16);
    assert!((0..16).all(|i| matches!(s.role(i), Role::Leader { followers: 0, .. })));
    let s = parse_reuse_config("4x4", 16).unwrap();
    assert_eq!(s.leaders().collect::<Vec<_>>(), vec![0, 4, 8, 12]);
    for g in s.groups() {
        assert_eq!(g.members, vec![g.leader + 1, g.leader + 2, g.leader + 3]);
    }
    assert!(matches!(
        parse_reuse_config("3x5", 16),
        Err(Error::Config(_))
    ));
    assert!(parse_reuse_config("4x4", 12).is_err());
    assert!(parse_reuse_config("4X4", 16).is_ok());
}

#[test]
fn explicit_groups() {
    let s = ReuseSchedule::from_groups(&[vec![0, 1, 2], vec![3]], 4).unwrap();
    assert_eq!(s.group_size(), None);
    assert_eq!(s.leaders().collect::<Vec<_>>(), vec![0, 3]);
    assert!(matches!(s.role(2), Role::Follower { group: 0 }));
    for bad in [
        vec![vec![1, 0], vec![2, 3]],
        vec![vec![0, 2], vec![1, 3]],
        vec![vec![0, 1]],
        vec![vec![0, 1, 2, 3], vec![3]],
    ] {
        assert!(ReuseSchedule::from_groups(&bad, 4).is_err(), "{bad:?}");
    }
}

#[test]
fn build_examples() {
    let cfg = ModelConfig::conformer(16, 32, 4);
    let w = build_reuse_model(&cfg, &parse_reuse_config("1x16", 16).unwrap()).unwrap();
    assert!(w.layers.iter().all(|l| l.attention().computes_map()));
    let w = build_reuse_model(&cfg, &parse_reuse_config("8x2", 16).unwrap()).unwrap();
    let owners: Vec<usize> = (0..16)
        .filter(|&i| w.layers[i].attention().computes_map())
        .collect();
    assert_eq!(owners, vec![0, 8]);
    for l in &w.layers {
        let a = l.attention();
        assert_eq!(a.value_head_dim, 2 * cfg.head_dim());
        assert_eq!(a.output.as_ref().unwrap().rows(), 2 * cfg.dim);
        if !a.computes_map() {
            assert!(a
                .heads
                .iter()
                .all(|h| h.query.is_none() && h.key.is_none() && h.position.is_none()));
        }
    }
}

#[test]
fn degenerate_schedule_is_bitwise_baseline() {
    for cfg in [
        ModelConfig::conformer(4, 32, 4),
        ModelConfig::all_attention(4, 32, 4, 3),
    ] {
        let w = init_weights(&cfg).unwrap();
        let x = random(12, 32, 1);
        let s = ReuseSchedule::baseline(4);
        let mut counter = AttentionCounter::default();
        assert_eq!(
            reuse_forward(&w, &s, &x, &mut counter).unwrap(),
            w.forward(&x).unwrap()
        );
        assert_eq!(counter.maps_computed, 4);
        assert_eq!(counter.maps_reused, 0);
    }
}

#[test]
fn four_by_four_computes_four_maps() {
    let cfg = ModelConfig::conformer(16, 16, 2);
    let s = parse_reuse_config("4x4", 16).unwrap();
    let w = build_reuse_model(&cfg, &s).unwrap();
    let mut counter = AttentionCounter::default();
    reuse_forward(&w, &s, &random(8, 16, 2), &mut counter).unwrap();
    assert_eq!(counter.maps_computed, 4);
    assert_eq!(counter.maps_reused, 12);
}

#[test]
fn follower_applies_leader_map() {
    // two transformer layers sharing one map; recompute everything by hand
    let cfg = ModelConfig::transformer(2, 16, 4);
    let s = parse_reuse_config("2x1", 2).unwrap();
    let w = build_reuse_model(&cfg, &s).unwrap();
    let x = random(6, 16, 3);
    let got = reuse_forward(&w, &s, &x, &mut AttentionCounter::default()).unwrap();

    let (LayerWeights::Transformer(l0), LayerWeights::Transformer(l1)) =
        (&w.layers[0], &w.layers[1])
    else {
        unreachable!()
    };
    let ln = |m: &Matrix, p: &attnbench::layers::LayerNormParams| {
        layer_norm(m, &p.gain, &p.bias, LAYER_NORM_EPS).unwrap()
    };
    let maps: Vec<Matrix> = (0..4)
        .map(|h| {
            let (q, k, _) = project_qkv(&x, &l0.attention, h).unwrap();
            attention_map(&q, &k).unwrap()
        })
        .collect();
    let apply = |input: &Matrix, a: &attnbench::layers::AttentionWeights| {
        let mut out = Matrix::zeros(input.rows(), 16);
        for (h, map) in maps.iter().enumerate() {
            let v = a.heads[h].value.forward(input).unwrap();
            let sa = matmul(map, &v, false).unwrap();
            out = out
                .add(&matmul(&sa, &a.output_block(h).unwrap(), false).unwrap())
                .unwrap();
        }
        out.add_row_bias(&a.output_bias).unwrap();
        out
    };
    let block = |input: &Matrix, l: &attnbench::layers::TransformerLayer| {
        let z = ln(
            &apply(input, &l.attention).add(input).unwrap(),
            &l.attention_norm,
        );
        let f = attnbench::layers::feed_forward(&z, &l.ff, cfg.activation).unwrap();
        ln(&f.add(&z).unwrap(), &l.ff_norm)
    };
    let want = block(&block(&x, l0), l1);
    assert!(
        got.max_abs_diff(&want) <= 1e-5 * (1.0 + want.max_abs()),
        "{}",
        got.max_abs_diff(&want)
    );

    // the stored map is the leader's recomputed map
    let head0 = attnbench::layers::head_maps(&x, &l0.attention, &cfg).unwrap();
    for (a, b) in head0.iter().zip(&maps) {
        assert!(a.max_abs_diff(b) <= 1e-6);
    }
}

#[test]
fn follower_is_sensitive_to_leader_query() {
    let cfg = ModelConfig::conformer(4, 16, 2);
    let s = parse_reuse_config("4x1", 4).unwrap();
    let w = build_reuse_model(&cfg, &s).unwrap();
    let x = random(10, 16, 4);
    let mut counter = AttentionCounter::default();
    let opts = RunOptions {
        schedule: Some(&s),
        ..RunOptions::default()
    };
    let before = w.run(&x, &opts, &mut counter, &mut NoProbe).unwrap();
    let mut w2 = w.clone();
    let q = w2.layers[0].attention_mut().heads[0]
        .query
        .as_mut()
        .unwrap();
    q.weight.as_mut_slice().iter_mut().for_each(|v| *v *= 1.5);
    let after = w2.run(&x, &opts, &mut counter, &mut NoProbe).unwrap();
    assert!(before.max_abs_diff(&after) > 1e-4);
    assert!(w.layers[1..].iter().all(|l| !l.attention().computes_map()));
}

#[test]
fn follower_without_schedule_is_rejected() {
    let cfg = ModelConfig::conformer(2, 16, 2);
    let s = parse_reuse_config("2x1", 2).unwrap();
    let w = build_reuse_model(&cfg, &s).unwrap();
    assert!(w.forward(&random(4, 16, 5)).is_err());
    let wrong = parse_reuse_config("1x2", 2).unwrap();
    assert!(reuse_forward(
        &w,
        &wrong,
        &random(4, 16, 5),
        &mut AttentionCounter::default()
    )
    .is_err());
}

fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|m| n.is_multiple_of(*m)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn counter_equals_group_count(layers in 1usize..9, pick in 0usize..8, kind in 0usize..3, t in 1usize..6) {
        let ds = divisors(layers);
        let m = ds[pick % ds.len()];
        let cfg = match kind {
            0 => ModelConfig::transformer(layers, 8, 2),
            1 => ModelConfig { conv_kernel: 3, ..ModelConfig::conformer(layers, 8, 2) },
            _ => ModelConfig::all_attention(layers, 8, 2, 2),
        };
        let s = parse_reuse_config(&format!("{m}x{}", layers / m), layers).unwrap();
        let w = build_reuse_model(&cfg, &s).unwrap();
        let mut counter = AttentionCounter::default();
        let y = reuse_forward(&w, &s, &random(t, 8, 7), &mut counter).unwrap();
        prop_assert_eq!(counter.maps_computed, layers / m);
        prop_assert_eq!(counter.total(), layers);
        prop_assert!(y.is_finite());
        // groups partition the layers, leader lowest, members consecutive
        let mut seen: Vec<usize> = Vec::new();
        for g in s.groups() {
            prop_assert!(g.members.iter().all(|&f| f > g.leader));
            seen.push(g.leader);
            seen.extend(&g.members);
        }
        prop_assert_eq!(seen, (0..layers).collect::<Vec<_>>());
    }

    #[test]
    fn degenerate_schedule_any_kind(layers in 1usize..5, kind in 0usize..3, seed in any::<u64>()) {
        let cfg = match kind {
            0 => ModelConfig::transformer(layers, 8, 2),
            1 => ModelConfig { conv_kernel: 3, ..ModelConfig::conformer(layers, 8, 2) },
            _ => ModelConfig::all_attention(layers, 8, 2, 1),
        }
        .with_seed(seed);
        let w = init_weights(&cfg).unwrap();
        let x = random(5, 8, seed);
        let got = reuse_forward(&w, &ReuseSchedule::baseline(layers), &x, &mut AttentionCounter::default()).unwrap();
        prop_assert_eq!(got, w.forward(&x).unwrap());
    }
}
