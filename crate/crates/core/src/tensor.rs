//! Dense feature maps and grouped 1x1 convolutions.
//!
//! Nodes are stored row-major: node `n` sits at `(y, x) = (n / W, n % W)` and
//! its `C` channel values are contiguous.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, LgaError, Result};
use crate::instrument;

/// An `H x W x C` latent tensor in node-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(shape_err(
                "FeatureMap::new",
                format!("{height}x{width}x{channels} = {expected} values"),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    /// Values drawn uniformly from `[lo, hi)`.
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        height: usize,
        width: usize,
        channels: usize,
        lo: f64,
        hi: f64,
    ) -> Self {
        Self::from_fn(height, width, channels, |_, _, _| rng.gen_range(lo..hi))
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_nodes(&self) -> usize {
        self.height * self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn node(&self, n: usize) -> &[f64] {
        &self.data[n * self.channels..(n + 1) * self.channels]
    }

    pub fn node_mut(&mut self, n: usize) -> &mut [f64] {
        &mut self.data[n * self.channels..(n + 1) * self.channels]
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f64) {
        self.data[(y * self.width + x) * self.channels + c] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.dims() == other.dims()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> FeatureMap {
        FeatureMap {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &FeatureMap) -> Result<()> {
        if !self.same_shape(other) {
            return Err(shape_err("add_scaled", dims_str(self), dims_str(other)));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    /// Sum of elementwise products.
    pub fn dot(&self, other: &FeatureMap) -> Result<f64> {
        if !self.same_shape(other) {
            return Err(shape_err("dot", dims_str(self), dims_str(other)));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn max_abs_diff(&self, other: &FeatureMap) -> Result<f64> {
        if !self.same_shape(other) {
            return Err(shape_err("max_abs_diff", dims_str(self), dims_str(other)));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// Concatenate `a` and `b` along the channel axis.
    pub fn concat_channels(a: &FeatureMap, b: &FeatureMap) -> Result<FeatureMap> {
        if a.height != b.height || a.width != b.width {
            return Err(shape_err(
                "concat_channels",
                format!("{}x{} spatial", a.height, a.width),
                format!("{}x{} spatial", b.height, b.width),
            ));
        }
        let channels = a.channels + b.channels;
        let mut data = Vec::with_capacity(a.num_nodes() * channels);
        for n in 0..a.num_nodes() {
            data.extend_from_slice(a.node(n));
            data.extend_from_slice(b.node(n));
        }
        Ok(FeatureMap {
            height: a.height,
            width: a.width,
            channels,
            data,
        })
    }

    /// Split channels `[0, at)` and `[at, C)` into two maps.
    pub fn split_channels(&self, at: usize) -> Result<(FeatureMap, FeatureMap)> {
        if at > self.channels {
            return Err(shape_err(
                "split_channels",
                format!("split point <= {}", self.channels),
                at,
            ));
        }
        let rest = self.channels - at;
        let mut left = Vec::with_capacity(self.num_nodes() * at);
        let mut right = Vec::with_capacity(self.num_nodes() * rest);
        for n in 0..self.num_nodes() {
            let node = self.node(n);
            left.extend_from_slice(&node[..at]);
            right.extend_from_slice(&node[at..]);
        }
        Ok((
            FeatureMap::new(self.height, self.width, at, left)?,
            FeatureMap::new(self.height, self.width, rest, right)?,
        ))
    }
}

fn dims_str(x: &FeatureMap) -> String {
    format!("{}x{}x{}", x.height, x.width, x.channels)
}

/// `N x C` view of a feature map, one row per node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl NodeMatrix {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Flatten the spatial grid; row `n` is node `(n / W, n % W)`.
pub fn flatten_nodes(x: &FeatureMap) -> NodeMatrix {
    NodeMatrix {
        rows: x.num_nodes(),
        cols: x.channels,
        data: x.data.clone(),
    }
}

pub fn unflatten_nodes(m: NodeMatrix, height: usize, width: usize) -> Result<FeatureMap> {
    if m.rows != height * width {
        return Err(shape_err(
            "unflatten_nodes",
            format!("{} rows", height * width),
            m.rows,
        ));
    }
    FeatureMap::new(height, width, m.cols, m.data)
}

/// A 1x1 convolution with `groups` independent channel blocks.
///
/// Output channel `o` belongs to group `o / (C_out / G)` and reads the
/// input channels of the same group. Weights are stored per output channel,
/// `C_in / G` values each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupedLinear {
    in_channels: usize,
    out_channels: usize,
    groups: usize,
    weight: Vec<f64>,
    bias: Option<Vec<f64>>,
}

impl GroupedLinear {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        groups: usize,
        weight: Vec<f64>,
        bias: Option<Vec<f64>>,
    ) -> Result<Self> {
        check_groups(in_channels, out_channels, groups)?;
        let expected = in_channels / groups * out_channels;
        if weight.len() != expected {
            return Err(shape_err("GroupedLinear::new", expected, weight.len()));
        }
        if let Some(b) = &bias {
            if b.len() != out_channels {
                return Err(shape_err("GroupedLinear::new bias", out_channels, b.len()));
            }
        }
        Ok(Self {
            in_channels,
            out_channels,
            groups,
            weight,
            bias,
        })
    }

    pub fn zeros(
        in_channels: usize,
        out_channels: usize,
        groups: usize,
        bias: bool,
    ) -> Result<Self> {
        check_groups(in_channels, out_channels, groups)?;
        Ok(Self {
            in_channels,
            out_channels,
            groups,
            weight: vec![0.0; in_channels / groups * out_channels],
            bias: bias.then(|| vec![0.0; out_channels]),
        })
    }

    /// Uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in))`, fan-in being the
    /// per-group input width.
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        in_channels: usize,
        out_channels: usize,
        groups: usize,
        bias: bool,
    ) -> Result<Self> {
        Self::random_scaled(rng, in_channels, out_channels, groups, bias, 1.0)
    }

    pub fn random_scaled<R: Rng + ?Sized>(
        rng: &mut R,
        in_channels: usize,
        out_channels: usize,
        groups: usize,
        bias: bool,
        gain: f64,
    ) -> Result<Self> {
        let mut layer = Self::zeros(in_channels, out_channels, groups, bias)?;
        let bound = gain / (layer.in_per_group() as f64).sqrt();
        for w in &mut layer.weight {
            *w = rng.gen_range(-bound..bound);
        }
        if let Some(b) = &mut layer.bias {
            for v in b {
                *v = rng.gen_range(-bound..bound);
            }
        }
        Ok(layer)
    }

    /// Identity map (requires `C_in == C_out`).
    pub fn identity(channels: usize, groups: usize) -> Result<Self> {
        let mut layer = Self::zeros(channels, channels, groups, false)?;
        let ipg = layer.in_per_group();
        for o in 0..channels {
            layer.weight[o * ipg + o % ipg] = 1.0;
        }
        Ok(layer)
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut [f64] {
        &mut self.weight
    }

    /// Weight and bias borrowed together, for optimizers.
    pub fn params_mut(&mut self) -> (&mut [f64], Option<&mut [f64]>) {
        (&mut self.weight, self.bias.as_deref_mut())
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    pub fn bias_mut(&mut self) -> Option<&mut [f64]> {
        self.bias.as_deref_mut()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Vec::len)
    }

    /// Weight connecting input channel `i` to output channel `o`, zero when
    /// they sit in different groups.
    pub fn dense_weight(&self, o: usize, i: usize) -> f64 {
        let g = o / self.out_per_group();
        let ipg = self.in_per_group();
        if i / ipg != g {
            0.0
        } else {
            self.weight[o * ipg + i % ipg]
        }
    }

    /// Apply to one node vector, writing `C_out` values into `out`.
    pub fn apply_node(&self, input: &[f64], out: &mut [f64]) {
        let ipg = self.in_per_group();
        let opg = self.out_per_group();
        for o in 0..self.out_channels {
            let g = o / opg;
            let xs = &input[g * ipg..(g + 1) * ipg];
            let ws = &self.weight[o * ipg..(o + 1) * ipg];
            let mut acc = self.bias.as_ref().map_or(0.0, |b| b[o]);
            for (w, x) in ws.iter().zip(xs) {
                acc += w * x;
            }
            out[o] = acc;
        }
    }

    /// Multiply-accumulates for one node.
    pub fn macs_per_node(&self) -> u64 {
        self.weight.len() as u64
    }
}

fn check_groups(in_channels: usize, out_channels: usize, groups: usize) -> Result<()> {
    if groups == 0 || in_channels == 0 || out_channels == 0 {
        return Err(LgaError::Config(format!(
            "grouped linear needs positive sizes (in {in_channels}, out {out_channels}, groups {groups})"
        )));
    }
    if !in_channels.is_multiple_of(groups) || !out_channels.is_multiple_of(groups) {
        return Err(LgaError::Config(format!(
            "groups {groups} must divide both in_channels {in_channels} and out_channels {out_channels}"
        )));
    }
    Ok(())
}

/// Gradients of a [`GroupedLinear`], laid out like its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedLinearGrad {
    pub weight: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

impl GroupedLinearGrad {
    pub fn zeros_like(w: &GroupedLinear) -> Self {
        Self {
            weight: vec![0.0; w.weight.len()],
            bias: w.bias.as_ref().map(|b| vec![0.0; b.len()]),
        }
    }

    pub fn accumulate(&mut self, other: &GroupedLinearGrad) {
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            *a += b;
        }
        if let (Some(a), Some(b)) = (&mut self.bias, &other.bias) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

/// Apply `w` independently at every node of `x`.
pub fn conv1x1_grouped(x: &FeatureMap, w: &GroupedLinear) -> Result<FeatureMap> {
    if x.channels != w.in_channels {
        return Err(shape_err(
            "conv1x1_grouped",
            format!("{} input channels", w.in_channels),
            format!("{} channels ({})", x.channels, dims_str(x)),
        ));
    }
    let mut out = FeatureMap::zeros(x.height, x.width, w.out_channels);
    let c_out = w.out_channels;
    for (n, dst) in out.data.chunks_exact_mut(c_out).enumerate() {
        w.apply_node(x.node(n), dst);
    }
    instrument::record_conv(w.macs_per_node() * x.num_nodes() as u64);
    Ok(out)
}

/// Reverse pass of [`conv1x1_grouped`]: gradients of `sum(grad_out * y)` with
/// respect to the input and the layer parameters.
pub fn conv1x1_grouped_backward(
    x: &FeatureMap,
    w: &GroupedLinear,
    grad_out: &FeatureMap,
) -> Result<(FeatureMap, GroupedLinearGrad)> {
    if x.channels != w.in_channels {
        return Err(shape_err(
            "conv1x1_grouped_backward",
            format!("{} input channels", w.in_channels),
            x.channels,
        ));
    }
    if grad_out.height != x.height
        || grad_out.width != x.width
        || grad_out.channels != w.out_channels
    {
        return Err(shape_err(
            "conv1x1_grouped_backward",
            format!("{}x{}x{}", x.height, x.width, w.out_channels),
            dims_str(grad_out),
        ));
    }
    let ipg = w.in_per_group();
    let opg = w.out_per_group();
    let mut grad_x = FeatureMap::zeros(x.height, x.width, x.channels);
    let mut grad = GroupedLinearGrad::zeros_like(w);
    for n in 0..x.num_nodes() {
        let xs = x.node(n);
        let gs = grad_out.node(n);
        let gx = grad_x.node_mut(n);
        for (o, &g) in gs.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let grp = o / opg;
            let base = grp * ipg;
            let ws = &w.weight[o * ipg..(o + 1) * ipg];
            let gw = &mut grad.weight[o * ipg..(o + 1) * ipg];
            for k in 0..ipg {
                gw[k] += g * xs[base + k];
                gx[base + k] += g * ws[k];
            }
            if let Some(b) = &mut grad.bias {
                b[o] += g;
            }
        }
    }
    Ok((grad_x, grad))
}
