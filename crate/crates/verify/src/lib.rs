//! Reference implementations used to check the sparse code paths.
//!
//! Nothing here shares code with the sparse implementation beyond the
//! parameter containers: adjacency matrices are built densely from the edge
//! definition, and receptive fields come from a breadth-first search.

use std::collections::{BTreeSet, VecDeque};

use lga_core::graph::{softplus, Direction, EdgeKernels};
use lga_core::lga::LgaParams;
use lga_core::tensor::{FeatureMap, GroupedLinear};
use nalgebra::DMatrix;

pub fn to_matrix(x: &FeatureMap) -> DMatrix<f64> {
    DMatrix::from_row_slice(x.num_nodes(), x.channels(), x.data())
}

/// `N x C_in` times the dense `C_out x C_in` expansion of a grouped weight.
pub fn dense_linear(x: &DMatrix<f64>, w: &GroupedLinear) -> DMatrix<f64> {
    let mut wm = DMatrix::zeros(w.out_channels(), w.in_channels());
    let (ipg, opg) = (w.in_channels() / w.groups(), w.out_channels() / w.groups());
    for o in 0..w.out_channels() {
        for k in 0..ipg {
            wm[(o, (o / opg) * ipg + k)] = w.weight()[o * ipg + k];
        }
    }
    let mut y = x * wm.transpose();
    if let Some(b) = w.bias() {
        for mut row in y.row_iter_mut() {
            row.iter_mut().zip(b).for_each(|(v, bb)| *v += bb);
        }
    }
    y
}

/// Row-normalized `N x N` adjacency: row `src` holds the softplus edge
/// weights to its neighbours divided by their sum plus `eps`.
pub fn dense_adjacency(
    x0: &DMatrix<f64>,
    h: usize,
    w: usize,
    k: &EdgeKernels,
    eps: f64,
) -> DMatrix<f64> {
    let n = h * w;
    let mut a = DMatrix::zeros(n, n);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let src = y as usize * w + x as usize;
            for d in Direction::ALL {
                let (dy, dx) = d.offset();
                let (ty, tx) = (y + dy, x + dx);
                if ty < 0 || tx < 0 || ty >= h as isize || tx >= w as isize {
                    continue;
                }
                let kern = k.kernel(d);
                let z: f64 = (0..x0.ncols())
                    .map(|c| kern.weight()[c] * x0[(src, c)])
                    .sum::<f64>()
                    + kern.bias().map_or(0.0, |b| b[0]);
                a[(src, ty as usize * w + tx as usize)] = softplus(z);
            }
        }
    }
    for i in 0..n {
        let s: f64 = a.row(i).sum();
        a.row_mut(i).iter_mut().for_each(|v| *v /= s + eps);
    }
    a
}

/// The full forward pass as dense matrix products. Returns `F_out`.
pub fn dense_pipeline(f_in: &FeatureMap, p: &LgaParams) -> DMatrix<f64> {
    let x = to_matrix(f_in);
    let x0 = p
        .reducer
        .as_ref()
        .map_or(x.clone(), |r| dense_linear(&x, r));
    let a = dense_adjacency(
        &x0,
        f_in.height(),
        f_in.width(),
        &p.edge_kernels,
        p.config.eps,
    );
    let mut cur = x0;
    for (i, t) in p.transforms.iter().enumerate() {
        let act = p.config.activation_for_layer(i);
        cur = dense_linear(&(a.transpose() * &cur), t).map(|v| act.apply(v));
    }
    cur
}

/// Nodes reachable from `src` in at most `hops` king moves, by BFS.
pub fn bfs_ball(src: usize, hops: usize, h: usize, w: usize) -> BTreeSet<usize> {
    let mut dist = vec![usize::MAX; h * w];
    let mut q = VecDeque::from([src]);
    dist[src] = 0;
    while let Some(n) = q.pop_front() {
        if dist[n] == hops {
            continue;
        }
        let (y, x) = ((n / w) as isize, (n % w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (ny, nx) = (y + dy, x + dx);
                if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                    let m = ny as usize * w + nx as usize;
                    if dist[m] == usize::MAX {
                        dist[m] = dist[n] + 1;
                        q.push_back(m);
                    }
                }
            }
        }
    }
    (0..h * w).filter(|&n| dist[n] != usize::MAX).collect()
}

/// Ordinary least-squares slope of `y` on `x`.
pub fn ols_slope(points: &[(f64, f64)]) -> f64 {
    let m = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / m;
    let my = points.iter().map(|p| p.1).sum::<f64>() / m;
    points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
        / points.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>()
}
