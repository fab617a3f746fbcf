use lga_core::baselines::{
    attend_crisscross, attend_dense, crisscross_attention, crisscross_weights, dense_attention,
    dense_attention_weights, AttentionParams,
};
use lga_core::loss::{
    build_similarity, lga_contrastive_loss, node_divergence, pair_loss, ssim, Divergence,
    GroundTruth, LossOptions, PairBatch, Patch, PatchSimilarity, SimilarityMode, DEFAULT_DELTA,
};
use lga_core::tensor::{conv1x1_grouped, FeatureMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn dense_attention_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = AttentionParams::random(&mut rng, 4, 2, 3, 1).unwrap();
    let x = FeatureMap::random(&mut rng, 3, 3, 4, -1.0, 1.0);
    let q = conv1x1_grouped(&x, &p.query).unwrap();
    let k = conv1x1_grouped(&x, &p.key).unwrap();
    let v = conv1x1_grouped(&x, &p.value).unwrap();
    let got = dense_attention(&x, &p).unwrap();
    for i in 0..9 {
        let mut logits = [0.0; 9];
        for j in 0..9 {
            for c in 0..2 {
                logits[j] += q.node(i)[c] * k.node(j)[c];
            }
        }
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for c in 0..3 {
            let mut acc = 0.0;
            for j in 0..9 {
                acc += logits[j].exp() / z * v.node(j)[c];
            }
            assert!((got.node(i)[c] - acc).abs() < 1e-10);
        }
    }
}

#[test]
fn single_row_crisscross_equals_dense() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = AttentionParams::random(&mut rng, 3, 3, 2, 1).unwrap();
    for w in [1, 2, 7] {
        let x = FeatureMap::random(&mut rng, 1, w, 3, -1.0, 1.0);
        let a = crisscross_attention(&x, &p).unwrap();
        let b = dense_attention(&x, &p).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }
    // Same for a single column.
    let q = FeatureMap::random(&mut rng, 6, 1, 2, -1.0, 1.0);
    let k = FeatureMap::random(&mut rng, 6, 1, 2, -1.0, 1.0);
    let v = FeatureMap::random(&mut rng, 6, 1, 3, -1.0, 1.0);
    assert!(
        attend_crisscross(&q, &k, &v)
            .max_abs_diff(&attend_dense(&q, &k, &v))
            .unwrap()
            < 1e-12
    );
}

#[test]
fn attention_weight_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = AttentionParams::random(&mut rng, 4, 4, 4, 2).unwrap();
    let x = FeatureMap::random(&mut rng, 4, 5, 4, -3.0, 3.0);
    for row in crisscross_weights(&x, &p).unwrap() {
        assert_eq!(row.len(), 4 + 5 - 1);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let d = dense_attention_weights(&x, &p).unwrap();
    for r in d.row_iter() {
        assert!((r.sum() - 1.0).abs() < 1e-12);
    }
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let z: f64 = v.iter().map(|x| x.exp()).sum();
    v.iter().map(|x| x.exp() / z).collect()
}

#[test]
fn divergences_match_summation_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let len = rng.gen_range(1..8);
        let a: Vec<f64> = (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b: Vec<f64> = (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mse: f64 = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / len as f64;
        assert!((node_divergence(&a, &b, Divergence::Mse).unwrap() - mse).abs() < 1e-13);
        let (p, q) = (softmax(&a), softmax(&b));
        let kl: f64 = p.iter().zip(&q).map(|(pi, qi)| pi * (pi / qi).ln()).sum();
        assert!((node_divergence(&a, &b, Divergence::Kl).unwrap() - kl).abs() < 1e-12);
    }
    assert_eq!(
        node_divergence(&[0.0, 0.0], &[2.0, 0.0], Divergence::Mse).unwrap(),
        2.0
    );
    assert!(node_divergence(&[1.0], &[1.0, 2.0], Divergence::Mse).is_err());
    assert!(node_divergence(&[f64::NAN], &[1.0], Divergence::Mse).is_err());
}

#[test]
fn ssim_matches_term_by_term_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let n = 12;
        let a: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
        let (ma, mb) = (mean(&a), mean(&b));
        let va = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / n as f64;
        let vb = b.iter().map(|x| (x - mb).powi(2)).sum::<f64>() / n as f64;
        let cov = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x - ma) * (y - mb))
            .sum::<f64>()
            / n as f64;
        let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
        let expect =
            (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        let pa = Patch {
            height: 3,
            width: 4,
            channels: 1,
            data: a.clone(),
        };
        let pb = Patch {
            height: 3,
            width: 4,
            channels: 1,
            data: b,
        };
        assert!((ssim(&pa, &pb).unwrap() - expect).abs() < 1e-12);
        assert!((ssim(&pa, &pa).unwrap() - 1.0).abs() < 1e-12);
        let neg = Patch {
            data: a.iter().map(|x| 1.0 - x).collect(),
            ..pa.clone()
        };
        assert!(ssim(&pa, &neg).unwrap() < 1.0);
    }
}

#[test]
fn majority_labels_match_counting_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (gh, gw, h, w) = (12, 8, 3, 4);
    for _ in 0..20 {
        let labels: Vec<u32> = (0..gh * gw).map(|_| rng.gen_range(0..3)).collect();
        let gt = GroundTruth::Labels {
            height: gh,
            width: gw,
            labels: labels.clone(),
        };
        let sim = build_similarity(&gt, h, w, SimilarityMode::ClassMajority).unwrap();
        let got = sim.node_labels().unwrap();
        for y in 0..h {
            for x in 0..w {
                let mut counts = [0usize; 3];
                for py in 0..4 {
                    for px in 0..2 {
                        counts[labels[(y * 4 + py) * gw + x * 2 + px] as usize] += 1;
                    }
                }
                let best = counts.iter().max().unwrap();
                let expect = counts.iter().position(|c| c == best).unwrap() as u32;
                assert_eq!(got[y * w + x], expect);
            }
        }
    }
}

#[test]
fn similarity_construction_examples() {
    let uniform = GroundTruth::Labels {
        height: 4,
        width: 4,
        labels: vec![2; 16],
    };
    let s = build_similarity(&uniform, 2, 2, SimilarityMode::ClassMajority).unwrap();
    assert!((0..4).all(|i| (0..4).all(|j| s.similar(i, j))));

    let halves: Vec<u32> = (0..16).map(|i| if i % 4 < 2 { 0 } else { 1 }).collect();
    let s = build_similarity(
        &GroundTruth::Labels {
            height: 4,
            width: 4,
            labels: halves,
        },
        2,
        2,
        SimilarityMode::ClassMajority,
    )
    .unwrap();
    assert!(s.similar(0, 2) && s.similar(1, 3));
    assert!(!s.similar(0, 1) && !s.similar(2, 3));

    assert!(build_similarity(&uniform, 3, 2, SimilarityMode::ClassMajority).is_err());

    // A 2x2 tie goes to the smaller class.
    let tie = GroundTruth::Labels {
        height: 2,
        width: 2,
        labels: vec![2, 1, 1, 2],
    };
    let s = build_similarity(&tie, 1, 1, SimilarityMode::ClassMajority).unwrap();
    assert_eq!(s.node_labels().unwrap(), &[1]);

    // SSIM mode on a two-tone image.
    let img: Vec<f64> = (0..16)
        .map(|i| {
            if (i % 4) < 2 {
                (i as f64) / 40.0
            } else {
                1.0 - (i as f64) / 40.0
            }
        })
        .collect();
    let gt = GroundTruth::Image {
        height: 4,
        width: 4,
        channels: 1,
        data: img,
    };
    let s = build_similarity(&gt, 2, 2, SimilarityMode::SsimThreshold { tau: 0.8 }).unwrap();
    assert!(s.similar(1, 1));
    assert!(!s.similar(0, 1));
}

#[test]
fn pair_loss_monotone_and_case_ordered_on_20x20_grid() {
    let d = DEFAULT_DELTA;
    let grid: Vec<f64> = (1..=20).map(|i| 0.05 * i as f64 * i as f64).collect();
    for &u in &grid {
        for w in grid.windows(2) {
            assert!(pair_loss(true, u, w[1], d) > pair_loss(true, u, w[0], d));
            assert!(pair_loss(false, u, w[1], d) < pair_loss(false, u, w[0], d));
        }
    }
    for &(u_small, u_large) in &[(0.05, 5.0), (0.2, 20.0)] {
        for &(v_small, v_large) in &[(0.05, 5.0), (0.2, 2.0)] {
            assert!(pair_loss(true, u_large, v_small, d) < pair_loss(true, u_small, v_large, d));
            assert!(pair_loss(false, u_large, v_small, d) > pair_loss(false, u_small, v_large, d));
        }
    }
    assert!((pair_loss(true, 1.0, 1.0, d) - 2f64.ln()).abs() < 1e-8);
    assert_eq!(pair_loss(true, 1.0, 0.0, d), 0.0);
}

#[test]
fn pair_sampler_is_stratified_and_deterministic() {
    let labels: Vec<u32> = (0..400).map(|i| if i < 380 { 0 } else { 1 }).collect();
    let sim = PatchSimilarity::from_labels(20, 20, labels).unwrap();
    let a = PairBatch::sample(&sim, 256, 42).unwrap();
    let b = PairBatch::sample(&sim, 256, 42).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 256);
    let sim_count = a.pairs.iter().filter(|&&(i, j)| sim.similar(i, j)).count();
    assert!(
        sim_count >= 64 && 256 - sim_count >= 64,
        "similar pairs {sim_count}"
    );
    let mut sorted = a.pairs.clone();
    sorted.sort_unstable();
    sorted.dedup();
    assert_eq!(sorted.len(), 256);
    assert!(a.pairs.iter().all(|&(i, j)| i < j));
}

#[test]
fn loss_symmetric_in_pair_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let f_in = FeatureMap::random(&mut rng, 3, 3, 4, -1.0, 1.0);
    let f_out = FeatureMap::random(&mut rng, 3, 3, 2, -1.0, 1.0);
    let labels: Vec<u32> = (0..9).map(|_| rng.gen_range(0..2)).collect();
    let sim = PatchSimilarity::from_labels(3, 3, labels).unwrap();
    let pairs = PairBatch::sample(&sim, 12, 3).unwrap();
    let swapped = PairBatch {
        pairs: pairs.pairs.iter().map(|&(i, j)| (j, i)).collect(),
        seed: 3,
    };
    for div in [Divergence::Mse, Divergence::Kl] {
        let opts = LossOptions {
            divergence: div,
            ..LossOptions::default()
        };
        let (la, ga) = lga_contrastive_loss(&f_in, &f_out, &sim, &pairs, opts).unwrap();
        let (lb, gb) = lga_contrastive_loss(&f_in, &f_out, &sim, &swapped, opts).unwrap();
        assert!((la - lb).abs() < 1e-14);
        assert!(ga.max_abs_diff(&gb).unwrap() < 1e-14);
        assert!(la >= 0.0);
    }
    let empty = PairBatch {
        pairs: vec![],
        seed: 0,
    };
    assert!(lga_contrastive_loss(&f_in, &f_out, &sim, &empty, LossOptions::default()).is_err());
}
