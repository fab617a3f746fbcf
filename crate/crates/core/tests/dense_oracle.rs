//! The sparse pipeline against explicit dense-matrix and loop oracles.

use lga_core::graph::{
    assemble_adjacency, build_graph, compute_edge_maps, message_pass, normalize_adjacency,
    softplus, Direction, EdgeKernels, Weights,
};
use lga_core::lga::{lga_forward, LayerActivation, LgaConfig, LgaParams};
use lga_core::tensor::{conv1x1_grouped, FeatureMap, GroupedLinear};
use lga_core::EdgeActivation;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn to_matrix(x: &FeatureMap) -> DMatrix<f64> {
    DMatrix::from_row_slice(x.num_nodes(), x.channels(), x.data())
}

/// `N x C_in` times the dense `C_out x C_in` expansion of a grouped weight.
fn dense_linear(x: &DMatrix<f64>, w: &GroupedLinear) -> DMatrix<f64> {
    let mut wm = DMatrix::zeros(w.out_channels(), w.in_channels());
    let (ipg, opg) = (w.in_channels() / w.groups(), w.out_channels() / w.groups());
    for o in 0..w.out_channels() {
        let g = o / opg;
        for k in 0..ipg {
            wm[(o, g * ipg + k)] = w.weight()[o * ipg + k];
        }
    }
    let mut y = x * wm.transpose();
    if let Some(b) = w.bias() {
        for mut row in y.row_iter_mut() {
            for (v, bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
    }
    y
}

/// Row-normalized dense adjacency built straight from the definition.
fn dense_adjacency(
    x0: &DMatrix<f64>,
    h: usize,
    w: usize,
    k: &EdgeKernels,
    eps: f64,
) -> DMatrix<f64> {
    let n = h * w;
    let mut a = DMatrix::zeros(n, n);
    for y in 0..h as isize {
        for xx in 0..w as isize {
            let src = (y as usize) * w + xx as usize;
            for d in Direction::ALL {
                let (dy, dx) = d.offset();
                let (ty, tx) = (y + dy, xx + dx);
                if ty < 0 || tx < 0 || ty >= h as isize || tx >= w as isize {
                    continue;
                }
                let kern = k.kernel(d);
                let mut z: f64 = (0..x0.ncols())
                    .map(|c| kern.weight()[c] * x0[(src, c)])
                    .sum();
                if let Some(b) = kern.bias() {
                    z += b[0];
                }
                a[(src, ty as usize * w + tx as usize)] = softplus(z);
            }
        }
    }
    for i in 0..n {
        let s: f64 = a.row(i).sum();
        for j in 0..n {
            a[(i, j)] /= s + eps;
        }
    }
    a
}

fn dense_pipeline(f_in: &FeatureMap, p: &LgaParams) -> DMatrix<f64> {
    let x = to_matrix(f_in);
    let x0 = match &p.reducer {
        Some(r) => dense_linear(&x, r),
        None => x,
    };
    let a = dense_adjacency(
        &x0,
        f_in.height(),
        f_in.width(),
        &p.edge_kernels,
        p.config.eps,
    );
    let mut cur = x0;
    for (i, t) in p.transforms.iter().enumerate() {
        let m = a.transpose() * &cur;
        let act = p.config.activation_for_layer(i);
        cur = dense_linear(&m, t).map(|v| act.apply(v));
    }
    cur
}

fn random_config(rng: &mut ChaCha8Rng) -> LgaConfig {
    let lga_channels = [2usize, 4, 8][rng.gen_range(0..3)];
    let reducer = rng.gen_bool(0.6);
    let in_channels = if reducer {
        [4usize, 8][rng.gen_range(0..2)]
    } else {
        lga_channels
    };
    let groups = *[1usize, 2]
        .iter()
        .rfind(|g| lga_channels.is_multiple_of(**g) && in_channels % **g == 0)
        .unwrap();
    LgaConfig {
        in_channels,
        lga_channels,
        layers: rng.gen_range(1..=4),
        groups: if rng.gen_bool(0.5) { groups } else { 1 },
        reducer,
        bias: rng.gen_bool(0.3),
        hidden_activation: if rng.gen_bool(0.5) {
            LayerActivation::Relu
        } else {
            LayerActivation::Identity
        },
        ..LgaConfig::default()
    }
}

#[test]
fn sparse_forward_matches_dense_pipeline_on_100_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let cfg = random_config(&mut rng);
        let params = LgaParams::random(&mut rng, cfg).unwrap();
        let (h, w) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let f_in = FeatureMap::random(&mut rng, h, w, cfg.in_channels, -1.0, 1.0);
        let out = lga_forward(&f_in, &params, false).unwrap();
        let oracle = dense_pipeline(&f_in, &params);
        // nalgebra is column-major; compare element by element.
        for n in 0..h * w {
            for c in 0..cfg.lga_channels {
                worst = worst.max((out.f_out.node(n)[c] - oracle[(n, c)]).abs());
            }
        }
        assert_eq!(out.f_cat.channels(), cfg.in_channels + cfg.lga_channels);
        for n in 0..h * w {
            assert_eq!(&out.f_cat.node(n)[..cfg.in_channels], f_in.node(n));
            assert_eq!(&out.f_cat.node(n)[cfg.in_channels..], out.f_out.node(n));
        }
    }
    assert!(worst < 1e-10, "max abs diff {worst:e}");
}

#[test]
fn message_pass_equals_transposed_dense_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let x = FeatureMap::random(&mut rng, 4, 4, 3, -1.0, 1.0);
        let k = EdgeKernels::random(&mut rng, 3, false).unwrap();
        let (_, g) = build_graph(&x, &k, EdgeActivation::Softplus, 1e-6).unwrap();
        let dense = g.densify(Weights::Normalized).unwrap();
        let expect = dense.transpose() * to_matrix(&x);
        let got = message_pass(&x, &g).unwrap();
        for n in 0..16 {
            for c in 0..3 {
                assert!((got.node(n)[c] - expect[(n, c)]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn edge_maps_match_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = FeatureMap::random(&mut rng, 4, 4, 8, -2.0, 2.0);
    let k = EdgeKernels::random(&mut rng, 8, false).unwrap();
    let maps = compute_edge_maps(&x, &k, EdgeActivation::Softplus).unwrap();
    for n in 0..16 {
        for d in Direction::ALL {
            let z: f64 = (0..8).map(|c| x.node(n)[c] * k.kernel(d).weight()[c]).sum();
            let expect = (1.0 + z.exp()).ln();
            assert!((maps.weight(n, d) - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn normalized_rows_sum_to_s_over_s_plus_eps() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = FeatureMap::random(&mut rng, 3, 3, 2, -1.0, 1.0);
    let k = EdgeKernels::random(&mut rng, 2, false).unwrap();
    let eps = 1e-3;
    let maps = compute_edge_maps(&x, &k, EdgeActivation::Softplus).unwrap();
    let raw = assemble_adjacency(&maps);
    let norm = normalize_adjacency(&raw, eps).unwrap();
    let dr = raw.densify(Weights::Raw).unwrap();
    let dn = norm.densify(Weights::Normalized).unwrap();
    for i in 0..9 {
        let s: f64 = dr.row(i).sum();
        assert!((dn.row(i).sum() - s / (s + eps)).abs() < 1e-14);
        for j in 0..9 {
            assert_eq!(
                dr[(i, j)] == 0.0,
                dn[(i, j)] == 0.0,
                "sparsity pattern differs at ({i},{j})"
            );
        }
    }
}

#[test]
fn grouped_conv_equals_block_diagonal_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = FeatureMap::random(&mut rng, 2, 2, 4, -1.0, 1.0);
    let w = GroupedLinear::random(&mut rng, 4, 4, 2, false).unwrap();
    let got = conv1x1_grouped(&x, &w).unwrap();
    let expect = dense_linear(&to_matrix(&x), &w);
    for n in 0..4 {
        for c in 0..4 {
            assert!((got.node(n)[c] - expect[(n, c)]).abs() < 1e-14);
        }
    }
}

#[test]
fn graph_shape_for_32x32() {
    let x = FeatureMap::zeros(32, 32, 1);
    let k = EdgeKernels::zeros(1, false).unwrap();
    let (_, g) = build_graph(&x, &k, EdgeActivation::Softplus, 1e-6).unwrap();
    let d = g.densify(Weights::Raw).unwrap();
    assert_eq!(d.shape(), (1024, 1024));
    assert!(d.iter().all(|&v| v == 0.0 || (v - 2f64.ln()).abs() < 1e-15));
}
