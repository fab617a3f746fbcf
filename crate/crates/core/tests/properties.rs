use lga_core::graph::{message_pass, normalize_adjacency, LocalGraph, Weights, NUM_DIRECTIONS};
use lga_core::loss::{pair_loss, DEFAULT_DELTA};
use lga_core::tensor::{
    conv1x1_grouped, flatten_nodes, unflatten_nodes, FeatureMap, GroupedLinear,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn map_strategy(max_side: usize, max_c: usize) -> impl Strategy<Value = FeatureMap> {
    (1..=max_side, 1..=max_side, 1..=max_c).prop_flat_map(|(h, w, c)| {
        prop::collection::vec(-4.0f64..4.0, h * w * c)
            .prop_map(move |d| FeatureMap::new(h, w, c, d).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn flatten_roundtrip(x in map_strategy(6, 5)) {
        let (h, w) = (x.height(), x.width());
        let m = flatten_nodes(&x);
        prop_assert_eq!(unflatten_nodes(m, h, w).unwrap(), x);
    }

    #[test]
    fn grouped_conv_is_linear(seed in any::<u64>(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = GroupedLinear::random(&mut rng, 6, 4, 2, false).unwrap();
        let a = FeatureMap::random(&mut rng, 3, 2, 6, -1.0, 1.0);
        let b = FeatureMap::random(&mut rng, 3, 2, 6, -1.0, 1.0);
        let mut mix = a.map(|v| alpha * v);
        mix.add_scaled(beta, &b).unwrap();
        let lhs = conv1x1_grouped(&mix, &w).unwrap();
        let mut rhs = conv1x1_grouped(&a, &w).unwrap().map(|v| alpha * v);
        rhs.add_scaled(beta, &conv1x1_grouped(&b, &w).unwrap()).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-12);
    }

    #[test]
    fn grouped_equals_block_diagonal(seed in any::<u64>(), gi in 0usize..5, cin_mul in 1usize..5, cout_mul in 1usize..5) {
        let g = [1usize, 2, 4, 8, 16][gi];
        let (cin, cout) = ((cin_mul * g).min(16), (cout_mul * g).min(16));
        prop_assume!(cin % g == 0 && cout % g == 0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = GroupedLinear::random(&mut rng, cin, cout, g, false).unwrap();
        let x = FeatureMap::random(&mut rng, 2, 2, cin, -1.0, 1.0);
        let y = conv1x1_grouped(&x, &w).unwrap();
        for n in 0..4 {
            for o in 0..cout {
                let expect: f64 = (0..cin).map(|i| w.dense_weight(o, i) * x.node(n)[i]).sum();
                prop_assert!((y.node(n)[o] - expect).abs() < 1e-12);
                // Off-block entries are structurally zero.
                for i in 0..cin {
                    if i / (cin / g) != o / (cout / g) {
                        prop_assert_eq!(w.dense_weight(o, i), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn normalized_outgoing_sums_below_one(h in 1usize..7, w in 1usize..7, scale in 0.01f64..1e3, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights: Vec<f64> = (0..h * w * NUM_DIRECTIONS).map(|_| scale * rng.gen_range(0.01..1.0)).collect();
        let raw = LocalGraph::from_raw_weights(h, w, &weights).unwrap();
        let g = normalize_adjacency(&raw, 1e-6).unwrap();
        prop_assert!(g.num_edges() <= 9 * h * w);
        for n in 0..h * w {
            let s = g.outgoing_sum(n, Weights::Normalized).unwrap();
            let r = raw.outgoing_sum(n, Weights::Raw).unwrap();
            prop_assert!(s < 1.0);
            prop_assert!((s - r / (r + 1e-6)).abs() < 1e-12);
        }
    }

    #[test]
    fn message_pass_linear_for_fixed_graph(seed in any::<u64>(), alpha in -2.0f64..2.0) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights: Vec<f64> = (0..25 * NUM_DIRECTIONS).map(|_| rng.gen_range(0.1..2.0)).collect();
        let g = normalize_adjacency(&LocalGraph::from_raw_weights(5, 5, &weights).unwrap(), 1e-6).unwrap();
        let a = FeatureMap::random(&mut rng, 5, 5, 3, -1.0, 1.0);
        let b = FeatureMap::random(&mut rng, 5, 5, 3, -1.0, 1.0);
        let mut mix = a.clone();
        mix.add_scaled(alpha, &b).unwrap();
        let mut expect = message_pass(&a, &g).unwrap();
        expect.add_scaled(alpha, &message_pass(&b, &g).unwrap()).unwrap();
        prop_assert!(message_pass(&mix, &g).unwrap().max_abs_diff(&expect).unwrap() < 1e-12);
    }

    #[test]
    fn pair_loss_nonnegative_and_monotone(u in 1e-3f64..50.0, v in 1e-3f64..50.0, dv in 1e-3f64..5.0) {
        let d = DEFAULT_DELTA;
        for c in [true, false] {
            prop_assert!(pair_loss(c, u, v, d) >= 0.0);
        }
        prop_assert!(pair_loss(true, u, v + dv, d) > pair_loss(true, u, v, d));
        prop_assert!(pair_loss(false, u, v + dv, d) < pair_loss(false, u, v, d));
    }
}
