//! Locally connected directed graph over a feature map grid.
//!
//! Every node has up to nine outgoing edges: one to itself and one to each
//! 8-connected neighbour that exists on the grid. Edge weights come from nine
//! per-direction 1x1 kernels evaluated at the source node, pass through a
//! positive activation, and are normalized per source node:
//!
//! ```text
//! norm[i -> j] = raw[i -> j] / (sum_k raw[i -> k] + eps)
//! ```
//!
//! Message passing aggregates at the receiver:
//! `out[j] = sum_i x[i] * norm[i -> j]`.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, LgaError, Result};
use crate::instrument::{self, CostCategory};
use crate::tensor::{FeatureMap, GroupedLinear, GroupedLinearGrad};

pub const NUM_DIRECTIONS: usize = 9;
pub const DEFAULT_EPS: f64 = 1e-6;
/// Largest node count [`LocalGraph::densify`] will materialize.
pub const DENSE_NODE_LIMIT: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Myself,
    N,
    NE,
    E,
    SE,
    S,
    SW,
    W,
    NW,
}

impl Direction {
    pub const ALL: [Direction; NUM_DIRECTIONS] = [
        Direction::Myself,
        Direction::N,
        Direction::NE,
        Direction::E,
        Direction::SE,
        Direction::S,
        Direction::SW,
        Direction::W,
        Direction::NW,
    ];

    /// `(dy, dx)` grid offset; north is `dy = -1`.
    pub fn offset(self) -> (isize, isize) {
        match self {
            Direction::Myself => (0, 0),
            Direction::N => (-1, 0),
            Direction::NE => (-1, 1),
            Direction::E => (0, 1),
            Direction::SE => (1, 1),
            Direction::S => (1, 0),
            Direction::SW => (1, -1),
            Direction::W => (0, -1),
            Direction::NW => (-1, -1),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Target of this direction from node `n`, or `None` off the grid.
    pub fn step(self, n: usize, height: usize, width: usize) -> Option<usize> {
        let (dy, dx) = self.offset();
        let y = (n / width) as isize + dy;
        let x = (n % width) as isize + dx;
        if y < 0 || x < 0 || y >= height as isize || x >= width as isize {
            None
        } else {
            Some(y as usize * width + x as usize)
        }
    }
}

/// Map from raw kernel output to a nonnegative edge weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeActivation {
    #[default]
    Softplus,
    Abs,
    Sigmoid,
}

impl EdgeActivation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            EdgeActivation::Softplus => softplus(z),
            EdgeActivation::Abs => z.abs(),
            EdgeActivation::Sigmoid => sigmoid(z),
        }
    }

    pub fn derivative(self, z: f64) -> f64 {
        match self {
            EdgeActivation::Softplus => sigmoid(z),
            EdgeActivation::Abs => {
                if z > 0.0 {
                    1.0
                } else if z < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            EdgeActivation::Sigmoid => {
                let s = sigmoid(z);
                s * (1.0 - s)
            }
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            EdgeActivation::Softplus => "softplus",
            EdgeActivation::Abs => "abs",
            EdgeActivation::Sigmoid => "sigmoid",
        }
    }
}

impl std::str::FromStr for EdgeActivation {
    type Err = LgaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softplus" => Ok(EdgeActivation::Softplus),
            "abs" => Ok(EdgeActivation::Abs),
            "sigmoid" => Ok(EdgeActivation::Sigmoid),
            other => Err(LgaError::Config(format!(
                "unknown edge activation '{other}'"
            ))),
        }
    }
}

/// Numerically stable `ln(1 + e^z)`.
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// The nine direction kernels, each mapping `C` channels to one scalar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeKernels {
    kernels: Vec<GroupedLinear>,
}

impl EdgeKernels {
    pub fn new(kernels: Vec<GroupedLinear>) -> Result<Self> {
        if kernels.len() != NUM_DIRECTIONS {
            return Err(LgaError::Config(format!(
                "expected {NUM_DIRECTIONS} edge kernels, got {}",
                kernels.len()
            )));
        }
        let c = kernels[0].in_channels();
        for k in &kernels {
            if k.in_channels() != c || k.out_channels() != 1 || k.groups() != 1 {
                return Err(shape_err(
                    "EdgeKernels::new",
                    format!("{c} -> 1 kernels with one group"),
                    format!(
                        "{} -> {} with {} groups",
                        k.in_channels(),
                        k.out_channels(),
                        k.groups()
                    ),
                ));
            }
        }
        Ok(Self { kernels })
    }

    pub fn zeros(channels: usize, bias: bool) -> Result<Self> {
        let k = GroupedLinear::zeros(channels, 1, 1, bias)?;
        Ok(Self {
            kernels: vec![k; NUM_DIRECTIONS],
        })
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R, channels: usize, bias: bool) -> Result<Self> {
        let kernels = (0..NUM_DIRECTIONS)
            .map(|_| GroupedLinear::random(rng, channels, 1, 1, bias))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { kernels })
    }

    pub fn channels(&self) -> usize {
        self.kernels[0].in_channels()
    }

    pub fn kernel(&self, d: Direction) -> &GroupedLinear {
        &self.kernels[d.index()]
    }

    pub fn kernels(&self) -> &[GroupedLinear] {
        &self.kernels
    }

    pub fn kernels_mut(&mut self) -> &mut [GroupedLinear] {
        &mut self.kernels
    }

    pub fn param_count(&self) -> usize {
        self.kernels.iter().map(GroupedLinear::param_count).sum()
    }
}

/// Per-direction edge maps for every node, before and after activation.
///
/// Values exist for all nine directions at every node, including directions
/// that point off the grid; [`assemble_adjacency`] drops those.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMaps {
    pub height: usize,
    pub width: usize,
    pub activation: EdgeActivation,
    /// Kernel outputs, `N x 9`.
    pub pre: Vec<f64>,
    /// Activated weights, `N x 9`.
    pub weights: Vec<f64>,
}

impl EdgeMaps {
    pub fn weight(&self, n: usize, d: Direction) -> f64 {
        self.weights[n * NUM_DIRECTIONS + d.index()]
    }

    /// The `H x W` scalar map of one direction.
    pub fn direction_map(&self, d: Direction) -> Vec<f64> {
        (0..self.height * self.width)
            .map(|n| self.weight(n, d))
            .collect()
    }
}

pub fn compute_edge_maps(
    f_in: &FeatureMap,
    kernels: &EdgeKernels,
    activation: EdgeActivation,
) -> Result<EdgeMaps> {
    if f_in.channels() != kernels.channels() {
        return Err(shape_err(
            "compute_edge_maps",
            format!("{} channels", kernels.channels()),
            f_in.channels(),
        ));
    }
    let n_nodes = f_in.num_nodes();
    let mut pre = vec![0.0; n_nodes * NUM_DIRECTIONS];
    let mut out = [0.0];
    for n in 0..n_nodes {
        let x = f_in.node(n);
        for (d, k) in kernels.kernels.iter().enumerate() {
            k.apply_node(x, &mut out);
            pre[n * NUM_DIRECTIONS + d] = out[0];
        }
    }
    instrument::record_conv((NUM_DIRECTIONS * kernels.channels() * n_nodes) as u64);
    let weights = pre.iter().map(|&z| activation.apply(z)).collect();
    Ok(EdgeMaps {
        height: f_in.height(),
        width: f_in.width(),
        activation,
        pre,
        weights,
    })
}

/// Sparse directed graph stored by source node (CSR).
#[derive(Debug, Clone, PartialEq)]
pub struct LocalGraph {
    height: usize,
    width: usize,
    offsets: Vec<usize>,
    targets: Vec<usize>,
    directions: Vec<Direction>,
    raw: Vec<f64>,
    norm: Option<Vec<f64>>,
    eps: Option<f64>,
}

/// One directed edge of a [`LocalGraph`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub direction: Direction,
    pub raw: f64,
    pub norm: Option<f64>,
}

/// Which edge weights to read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weights {
    Raw,
    Normalized,
}

/// Outgoing directions of `n` that stay on the grid, in [`Direction::ALL`] order.
pub fn outgoing(n: usize, height: usize, width: usize) -> impl Iterator<Item = (Direction, usize)> {
    Direction::ALL
        .into_iter()
        .filter_map(move |d| d.step(n, height, width).map(|t| (d, t)))
}

/// Number of structural edges on an `H x W` grid: `(3H - 2)(3W - 2)`.
pub fn structural_edge_count(height: usize, width: usize) -> usize {
    if height == 0 || width == 0 {
        return 0;
    }
    (3 * height - 2) * (3 * width - 2)
}

/// Build the raw directed graph; edge `i -> j` takes direction `d(i -> j)`'s
/// weight evaluated at the source `i`.
pub fn assemble_adjacency(maps: &EdgeMaps) -> LocalGraph {
    let (h, w) = (maps.height, maps.width);
    let n_nodes = h * w;
    let cap = structural_edge_count(h, w);
    let mut offsets = Vec::with_capacity(n_nodes + 1);
    let mut targets = Vec::with_capacity(cap);
    let mut directions = Vec::with_capacity(cap);
    let mut raw = Vec::with_capacity(cap);
    offsets.push(0);
    for n in 0..n_nodes {
        for (d, t) in outgoing(n, h, w) {
            targets.push(t);
            directions.push(d);
            raw.push(maps.weight(n, d));
        }
        offsets.push(targets.len());
    }
    LocalGraph {
        height: h,
        width: w,
        offsets,
        targets,
        directions,
        raw,
        norm: None,
        eps: None,
    }
}

/// Divide each source's outgoing weights by their sum plus `eps`.
pub fn normalize_adjacency(graph: &LocalGraph, eps: f64) -> Result<LocalGraph> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(LgaError::Config(format!(
            "eps must be positive and finite, got {eps}"
        )));
    }
    let mut norm = vec![0.0; graph.raw.len()];
    for n in 0..graph.num_nodes() {
        let range = graph.edge_range(n);
        let denom = graph.raw[range.clone()].iter().sum::<f64>() + eps;
        for e in range {
            norm[e] = graph.raw[e] / denom;
        }
    }
    Ok(LocalGraph {
        norm: Some(norm),
        eps: Some(eps),
        ..graph.clone()
    })
}

impl LocalGraph {
    /// Build from explicit per-node, per-direction raw weights (`N x 9`).
    pub fn from_raw_weights(height: usize, width: usize, weights: &[f64]) -> Result<Self> {
        if weights.len() != height * width * NUM_DIRECTIONS {
            return Err(shape_err(
                "LocalGraph::from_raw_weights",
                height * width * NUM_DIRECTIONS,
                weights.len(),
            ));
        }
        let maps = EdgeMaps {
            height,
            width,
            activation: EdgeActivation::Abs,
            pre: weights.to_vec(),
            weights: weights.to_vec(),
        };
        Ok(assemble_adjacency(&maps))
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_nodes(&self) -> usize {
        self.height * self.width
    }

    /// Stored edge entries; never more than `9N`.
    pub fn num_edges(&self) -> usize {
        self.targets.len()
    }

    pub fn eps(&self) -> Option<f64> {
        self.eps
    }

    pub fn is_normalized(&self) -> bool {
        self.norm.is_some()
    }

    pub fn edge_range(&self, src: usize) -> std::ops::Range<usize> {
        self.offsets[src]..self.offsets[src + 1]
    }

    pub fn raw_weights(&self) -> &[f64] {
        &self.raw
    }

    pub fn norm_weights(&self) -> Option<&[f64]> {
        self.norm.as_deref()
    }

    pub fn edge(&self, e: usize, src: usize) -> Edge {
        Edge {
            src,
            dst: self.targets[e],
            direction: self.directions[e],
            raw: self.raw[e],
            norm: self.norm.as_ref().map(|v| v[e]),
        }
    }

    pub fn edges(&self) -> impl Iterator<Item = Edge> + '_ {
        (0..self.num_nodes())
            .flat_map(move |src| self.edge_range(src).map(move |e| self.edge(e, src)))
    }

    pub fn outgoing_edges(&self, src: usize) -> impl Iterator<Item = Edge> + '_ {
        self.edge_range(src).map(move |e| self.edge(e, src))
    }

    /// Sum of `src`'s outgoing weights of the chosen kind.
    pub fn outgoing_sum(&self, src: usize, which: Weights) -> Result<f64> {
        let w = self.weights(which)?;
        Ok(w[self.edge_range(src)].iter().sum())
    }

    /// Bytes held by the sparse structure and its weights.
    pub fn storage_bytes(&self) -> usize {
        use std::mem::size_of;
        self.offsets.len() * size_of::<usize>()
            + self.targets.len() * size_of::<usize>()
            + self.directions.len() * size_of::<Direction>()
            + self.raw.len() * size_of::<f64>()
            + self.norm.as_ref().map_or(0, |v| v.len() * size_of::<f64>())
    }

    fn weights(&self, which: Weights) -> Result<&[f64]> {
        match which {
            Weights::Raw => Ok(&self.raw),
            Weights::Normalized => self
                .norm
                .as_deref()
                .ok_or_else(|| LgaError::Config("graph has not been normalized".into())),
        }
    }

    /// Dense `N x N` matrix with `M[i][j]` = weight of edge `i -> j`.
    pub fn densify(&self, which: Weights) -> Result<DMatrix<f64>> {
        let n = self.num_nodes();
        if n > DENSE_NODE_LIMIT {
            return Err(LgaError::TooLarge {
                what: "densify",
                n,
                limit: DENSE_NODE_LIMIT,
            });
        }
        let w = self.weights(which)?;
        let mut m = DMatrix::zeros(n, n);
        for src in 0..n {
            for e in self.edge_range(src) {
                m[(src, self.targets[e])] = w[e];
            }
        }
        Ok(m)
    }

    pub fn dump(&self) -> GraphDump {
        GraphDump {
            height: self.height,
            width: self.width,
            eps: self.eps,
            edges: self
                .edges()
                .map(|e| DumpedEdge {
                    src: e.src,
                    dst: e.dst,
                    raw: e.raw,
                    norm: e.norm,
                })
                .collect(),
        }
    }
}

/// JSON debug form of a graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphDump {
    pub height: usize,
    pub width: usize,
    pub eps: Option<f64>,
    pub edges: Vec<DumpedEdge>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpedEdge {
    pub src: usize,
    pub dst: usize,
    pub raw: f64,
    pub norm: Option<f64>,
}

/// Edge maps from `f_in`, assembled and normalized in one go.
pub fn build_graph(
    f_in: &FeatureMap,
    kernels: &EdgeKernels,
    activation: EdgeActivation,
    eps: f64,
) -> Result<(EdgeMaps, LocalGraph)> {
    let maps = compute_edge_maps(f_in, kernels, activation)?;
    let graph = normalize_adjacency(&assemble_adjacency(&maps), eps)?;
    Ok((maps, graph))
}

fn check_grid(op: &'static str, x: &FeatureMap, graph: &LocalGraph) -> Result<()> {
    if x.height() != graph.height || x.width() != graph.width {
        return Err(shape_err(
            op,
            format!("{}x{} grid", graph.height, graph.width),
            format!("{}x{} grid", x.height(), x.width()),
        ));
    }
    Ok(())
}

/// One hop of receiver-aggregated propagation: `out[j] = sum_i x[i] * norm[i -> j]`.
pub fn message_pass(x: &FeatureMap, graph: &LocalGraph) -> Result<FeatureMap> {
    check_grid("message_pass", x, graph)?;
    let norm = graph.weights(Weights::Normalized)?;
    let c = x.channels();
    let mut out = FeatureMap::zeros(x.height(), x.width(), c);
    let data = out.data_mut();
    for src in 0..graph.num_nodes() {
        let xs = x.node(src);
        for e in graph.edge_range(src) {
            let a = norm[e];
            let dst = &mut data[graph.targets[e] * c..(graph.targets[e] + 1) * c];
            for (o, &v) in dst.iter_mut().zip(xs) {
                *o += a * v;
            }
        }
    }
    instrument::record(
        CostCategory::InfoPropagation,
        (graph.num_edges() * c) as u64,
    );
    Ok(out)
}

/// Reverse of [`message_pass`]: returns the gradient for `x` and one
/// gradient per stored edge for the normalized weights.
pub fn message_pass_backward(
    x: &FeatureMap,
    graph: &LocalGraph,
    grad_out: &FeatureMap,
) -> Result<(FeatureMap, Vec<f64>)> {
    check_grid("message_pass_backward", x, graph)?;
    if !grad_out.same_shape(x) {
        return Err(shape_err(
            "message_pass_backward",
            format!("{:?}", x.dims()),
            format!("{:?}", grad_out.dims()),
        ));
    }
    let norm = graph.weights(Weights::Normalized)?;
    let mut grad_x = FeatureMap::zeros(x.height(), x.width(), x.channels());
    let mut grad_norm = vec![0.0; graph.num_edges()];
    for src in 0..graph.num_nodes() {
        let xs = x.node(src);
        for e in graph.edge_range(src) {
            let g = grad_out.node(graph.targets[e]);
            grad_norm[e] = xs.iter().zip(g).map(|(a, b)| a * b).sum();
            let a = norm[e];
            for (gx, &gv) in grad_x.node_mut(src).iter_mut().zip(g) {
                *gx += a * gv;
            }
        }
    }
    Ok((grad_x, grad_norm))
}

/// Chain a per-edge gradient on normalized weights back to raw weights.
pub fn normalize_backward(graph: &LocalGraph, grad_norm: &[f64]) -> Result<Vec<f64>> {
    let eps = graph
        .eps
        .ok_or_else(|| LgaError::Config("graph has not been normalized".into()))?;
    if grad_norm.len() != graph.num_edges() {
        return Err(shape_err(
            "normalize_backward",
            graph.num_edges(),
            grad_norm.len(),
        ));
    }
    let mut grad_raw = vec![0.0; graph.num_edges()];
    for src in 0..graph.num_nodes() {
        let range = graph.edge_range(src);
        let denom = graph.raw[range.clone()].iter().sum::<f64>() + eps;
        let weighted: f64 = range.clone().map(|e| grad_norm[e] * graph.raw[e]).sum();
        let shared = weighted / (denom * denom);
        for e in range {
            grad_raw[e] = grad_norm[e] / denom - shared;
        }
    }
    Ok(grad_raw)
}

/// Chain per-edge raw-weight gradients through the activation and the direction
/// kernels. Off-grid directions receive no gradient.
pub fn edge_maps_backward(
    f_in: &FeatureMap,
    kernels: &EdgeKernels,
    maps: &EdgeMaps,
    graph: &LocalGraph,
    grad_raw: &[f64],
) -> Result<(FeatureMap, Vec<GroupedLinearGrad>)> {
    if grad_raw.len() != graph.num_edges() {
        return Err(shape_err(
            "edge_maps_backward",
            graph.num_edges(),
            grad_raw.len(),
        ));
    }
    let c = f_in.channels();
    let mut grad_f = FeatureMap::zeros(f_in.height(), f_in.width(), c);
    let mut grads: Vec<GroupedLinearGrad> = kernels
        .kernels
        .iter()
        .map(GroupedLinearGrad::zeros_like)
        .collect();
    for src in 0..graph.num_nodes() {
        let x = f_in.node(src);
        for e in graph.edge_range(src) {
            let d = graph.directions[e].index();
            let z = maps.pre[src * NUM_DIRECTIONS + d];
            let g = grad_raw[e] * maps.activation.derivative(z);
            if g == 0.0 {
                continue;
            }
            let w = kernels.kernels[d].weight();
            let gk = &mut grads[d];
            for k in 0..c {
                gk.weight[k] += g * x[k];
            }
            if let Some(b) = &mut gk.bias {
                b[0] += g;
            }
            for (gf, wk) in grad_f.node_mut(src).iter_mut().zip(w) {
                *gf += g * wk;
            }
        }
    }
    Ok((grad_f, grads))
}
