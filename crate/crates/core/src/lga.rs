//! The latent graph attention module.
//!
//! ```text
//! X_0     = reduce(F_in)                  (or F_in when there is no reducer)
//! A*      = normalize(edges(X_0))         built once, shared by all layers
//! X_{i+1} = act_i(T_i(message_pass(X_i, A*)))
//! F_out   = X_L
//! F_cat   = concat(F_in, F_out)
//! ```

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, LgaError, Result};
use crate::graph::{
    build_graph, edge_maps_backward, message_pass, message_pass_backward, normalize_backward,
    EdgeActivation, EdgeKernels, EdgeMaps, LocalGraph, DEFAULT_EPS,
};
use crate::instrument::{with_category, CostCategory};
use crate::tensor::{
    conv1x1_grouped, conv1x1_grouped_backward, FeatureMap, GroupedLinear, GroupedLinearGrad,
};

pub const MAX_LAYERS: usize = 8;

/// Nonlinearity applied after a layer transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerActivation {
    Identity,
    #[default]
    Relu,
}

impl LayerActivation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            LayerActivation::Identity => z,
            LayerActivation::Relu => z.max(0.0),
        }
    }

    pub fn derivative(self, z: f64) -> f64 {
        match self {
            LayerActivation::Identity => 1.0,
            LayerActivation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            LayerActivation::Identity => "identity",
            LayerActivation::Relu => "relu",
        }
    }
}

impl std::str::FromStr for LayerActivation {
    type Err = LgaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(LayerActivation::Identity),
            "relu" => Ok(LayerActivation::Relu),
            other => Err(LgaError::Config(format!(
                "unknown layer activation '{other}'"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LgaConfig {
    pub in_channels: usize,
    /// Channel width inside the graph layers.
    pub lga_channels: usize,
    pub layers: usize,
    pub groups: usize,
    /// Insert a grouped 1x1 reducer `in_channels -> lga_channels`.
    pub reducer: bool,
    pub eps: f64,
    pub edge_activation: EdgeActivation,
    /// Applied after every layer transform except the last.
    pub hidden_activation: LayerActivation,
    pub output_activation: LayerActivation,
    pub bias: bool,
}

impl Default for LgaConfig {
    fn default() -> Self {
        Self::squeezenet(8)
    }
}

impl LgaConfig {
    /// The SqueezeNet placement: 512 input channels reduced to 128, four layers.
    pub fn squeezenet(groups: usize) -> Self {
        Self {
            in_channels: 512,
            lga_channels: 128,
            layers: 4,
            groups,
            reducer: true,
            eps: DEFAULT_EPS,
            edge_activation: EdgeActivation::Softplus,
            hidden_activation: LayerActivation::Relu,
            output_activation: LayerActivation::Identity,
            bias: false,
        }
    }

    /// A reduced configuration with `C_lga = C_in / 4`.
    pub fn quarter(in_channels: usize, layers: usize, groups: usize) -> Self {
        Self {
            in_channels,
            lga_channels: in_channels / 4,
            layers,
            groups,
            ..Self::squeezenet(groups)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.layers > MAX_LAYERS {
            return Err(LgaError::Config(format!(
                "layer count must be in 1..={MAX_LAYERS}, got {}",
                self.layers
            )));
        }
        if self.groups == 0
            || self.lga_channels == 0
            || !self.lga_channels.is_multiple_of(self.groups)
        {
            return Err(LgaError::Config(format!(
                "groups {} must divide lga_channels {}",
                self.groups, self.lga_channels
            )));
        }
        if self.reducer {
            if !self.in_channels.is_multiple_of(self.groups) {
                return Err(LgaError::Config(format!(
                    "groups {} must divide in_channels {}",
                    self.groups, self.in_channels
                )));
            }
        } else if self.in_channels != self.lga_channels {
            return Err(LgaError::Config(format!(
                "without a reducer in_channels ({}) must equal lga_channels ({})",
                self.in_channels, self.lga_channels
            )));
        }
        if !(self.eps > 0.0) {
            return Err(LgaError::Config(format!(
                "eps must be positive, got {}",
                self.eps
            )));
        }
        Ok(())
    }

    pub fn activation_for_layer(&self, layer: usize) -> LayerActivation {
        if layer + 1 == self.layers {
            self.output_activation
        } else {
            self.hidden_activation
        }
    }

    pub fn out_channels(&self) -> usize {
        self.lga_channels
    }

    pub fn cat_channels(&self) -> usize {
        self.in_channels + self.lga_channels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LgaParams {
    pub config: LgaConfig,
    pub edge_kernels: EdgeKernels,
    pub reducer: Option<GroupedLinear>,
    pub transforms: Vec<GroupedLinear>,
}

impl LgaParams {
    pub fn new(
        config: LgaConfig,
        edge_kernels: EdgeKernels,
        reducer: Option<GroupedLinear>,
        transforms: Vec<GroupedLinear>,
    ) -> Result<Self> {
        config.validate()?;
        let c = config.lga_channels;
        if edge_kernels.channels() != c {
            return Err(shape_err(
                "LgaParams::new edge kernels",
                c,
                edge_kernels.channels(),
            ));
        }
        match (&reducer, config.reducer) {
            (Some(r), true) => {
                if r.in_channels() != config.in_channels
                    || r.out_channels() != c
                    || r.groups() != config.groups
                {
                    return Err(shape_err(
                        "LgaParams::new reducer",
                        format!("{} -> {c} / {}", config.in_channels, config.groups),
                        format!(
                            "{} -> {} / {}",
                            r.in_channels(),
                            r.out_channels(),
                            r.groups()
                        ),
                    ));
                }
            }
            (None, false) => {}
            _ => {
                return Err(LgaError::Config(
                    "reducer presence does not match config".into(),
                ))
            }
        }
        if transforms.len() != config.layers {
            return Err(shape_err(
                "LgaParams::new transforms",
                config.layers,
                transforms.len(),
            ));
        }
        for t in &transforms {
            if t.in_channels() != c || t.out_channels() != c || t.groups() != config.groups {
                return Err(shape_err(
                    "LgaParams::new transform",
                    format!("{c} -> {c} / {}", config.groups),
                    format!(
                        "{} -> {} / {}",
                        t.in_channels(),
                        t.out_channels(),
                        t.groups()
                    ),
                ));
            }
        }
        Ok(Self {
            config,
            edge_kernels,
            reducer,
            transforms,
        })
    }

    /// Uniform fan-in initialization.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, config: LgaConfig) -> Result<Self> {
        config.validate()?;
        let c = config.lga_channels;
        let reducer = config
            .reducer
            .then(|| GroupedLinear::random(rng, config.in_channels, c, config.groups, config.bias))
            .transpose()?;
        let edge_kernels = EdgeKernels::random(rng, c, config.bias)?;
        let transforms = (0..config.layers)
            .map(|_| GroupedLinear::random(rng, c, c, config.groups, config.bias))
            .collect::<Result<Vec<_>>>()?;
        Self::new(config, edge_kernels, reducer, transforms)
    }

    pub fn param_count(&self) -> usize {
        self.edge_kernels.param_count()
            + self.reducer.as_ref().map_or(0, GroupedLinear::param_count)
            + self
                .transforms
                .iter()
                .map(GroupedLinear::param_count)
                .sum::<usize>()
    }

    /// Parameter tensors in a fixed order: edge kernels, reducer, transforms.
    pub fn tensors_mut(&mut self) -> Vec<&mut GroupedLinear> {
        let mut out: Vec<&mut GroupedLinear> = self.edge_kernels.kernels_mut().iter_mut().collect();
        if let Some(r) = &mut self.reducer {
            out.push(r);
        }
        out.extend(self.transforms.iter_mut());
        out
    }
}

/// Forward intermediates needed by [`lga_backward`].
#[derive(Debug, Clone)]
pub struct LgaCache {
    f_in: FeatureMap,
    x0: FeatureMap,
    maps: EdgeMaps,
    graph: LocalGraph,
    /// Per layer: input `X_i`, aggregated messages `M_i`, pre-activation `Z_i`.
    layers: Vec<(FeatureMap, FeatureMap, FeatureMap)>,
}

impl LgaCache {
    pub fn graph(&self) -> &LocalGraph {
        &self.graph
    }

    pub fn edge_maps(&self) -> &EdgeMaps {
        &self.maps
    }

    pub fn reduced_input(&self) -> &FeatureMap {
        &self.x0
    }

    /// `X_0 .. X_{L-1}`, the inputs to each layer.
    pub fn layer_inputs(&self) -> impl Iterator<Item = &FeatureMap> {
        self.layers.iter().map(|(x, _, _)| x)
    }
}

#[derive(Debug, Clone)]
pub struct LgaOutput {
    pub f_out: FeatureMap,
    pub f_cat: FeatureMap,
    pub cache: Option<LgaCache>,
}

/// Run the module. With `keep_intermediates = false` nothing is retained for
/// the backward pass.
pub fn lga_forward(
    f_in: &FeatureMap,
    params: &LgaParams,
    keep_intermediates: bool,
) -> Result<LgaOutput> {
    let cfg = &params.config;
    if f_in.channels() != cfg.in_channels {
        return Err(shape_err(
            "lga_forward",
            format!("{} input channels", cfg.in_channels),
            f_in.channels(),
        ));
    }
    let x0 = match &params.reducer {
        Some(r) => with_category(CostCategory::ChannelResize, || conv1x1_grouped(f_in, r))?,
        None => f_in.clone(),
    };
    let (maps, graph) = with_category(CostCategory::OtherConv, || {
        build_graph(&x0, &params.edge_kernels, cfg.edge_activation, cfg.eps)
    })?;

    let mut layers = Vec::with_capacity(if keep_intermediates { cfg.layers } else { 0 });
    let mut x = x0.clone();
    for (i, transform) in params.transforms.iter().enumerate() {
        let m = message_pass(&x, &graph)?;
        let z = with_category(CostCategory::OtherConv, || conv1x1_grouped(&m, transform))?;
        let act = cfg.activation_for_layer(i);
        let next = z.map(|v| act.apply(v));
        if keep_intermediates {
            layers.push((x, m, z));
        }
        x = next;
    }
    if !x.is_finite() {
        return Err(LgaError::NonFinite("lga_forward"));
    }
    let f_cat = FeatureMap::concat_channels(f_in, &x)?;
    let cache = keep_intermediates.then(|| LgaCache {
        f_in: f_in.clone(),
        x0,
        maps,
        graph,
        layers,
    });
    Ok(LgaOutput {
        f_out: x,
        f_cat,
        cache,
    })
}

/// Upstream gradients; either or both may be present and they add.
#[derive(Debug, Clone, Default)]
pub struct LgaUpstream {
    pub f_out: Option<FeatureMap>,
    pub f_cat: Option<FeatureMap>,
}

#[derive(Debug, Clone)]
pub struct LgaGrads {
    pub edge_kernels: Vec<GroupedLinearGrad>,
    pub reducer: Option<GroupedLinearGrad>,
    pub transforms: Vec<GroupedLinearGrad>,
    pub f_in: FeatureMap,
}

impl LgaGrads {
    /// Gradients in the order of [`LgaParams::tensors_mut`].
    pub fn tensors(&self) -> Vec<&GroupedLinearGrad> {
        let mut out: Vec<&GroupedLinearGrad> = self.edge_kernels.iter().collect();
        if let Some(r) = &self.reducer {
            out.push(r);
        }
        out.extend(self.transforms.iter());
        out
    }
}

/// Exact reverse pass. Edge-kernel gradients collect contributions from
/// every layer since all layers share the graph.
pub fn lga_backward(
    upstream: &LgaUpstream,
    cache: Option<&LgaCache>,
    params: &LgaParams,
) -> Result<LgaGrads> {
    let cache = cache.ok_or(LgaError::MissingIntermediates)?;
    let cfg = &params.config;
    if cache.layers.len() != cfg.layers {
        return Err(LgaError::MissingIntermediates);
    }
    let (h, w) = (cache.f_in.height(), cache.f_in.width());
    let mut grad_x = FeatureMap::zeros(h, w, cfg.lga_channels);
    let mut grad_f_in = FeatureMap::zeros(h, w, cfg.in_channels);
    if let Some(g) = &upstream.f_out {
        grad_x.add_scaled(1.0, g)?;
    }
    if let Some(g) = &upstream.f_cat {
        let (g_in, g_out) = g.split_channels(cfg.in_channels)?;
        grad_f_in.add_scaled(1.0, &g_in)?;
        grad_x.add_scaled(1.0, &g_out)?;
    }

    let graph = &cache.graph;
    let mut grad_norm = vec![0.0; graph.num_edges()];
    let mut transform_grads = vec![None; cfg.layers];
    for i in (0..cfg.layers).rev() {
        let (x_i, m_i, z_i) = &cache.layers[i];
        let act = cfg.activation_for_layer(i);
        let mut grad_z = grad_x;
        for (g, &z) in grad_z.data_mut().iter_mut().zip(z_i.data()) {
            *g *= act.derivative(z);
        }
        let (grad_m, grad_t) = conv1x1_grouped_backward(m_i, &params.transforms[i], &grad_z)?;
        transform_grads[i] = Some(grad_t);
        let (grad_xi, grad_norm_i) = message_pass_backward(x_i, graph, &grad_m)?;
        for (acc, g) in grad_norm.iter_mut().zip(grad_norm_i) {
            *acc += g;
        }
        grad_x = grad_xi;
    }

    let grad_raw = normalize_backward(graph, &grad_norm)?;
    let (grad_x0_edges, edge_grads) = edge_maps_backward(
        &cache.x0,
        &params.edge_kernels,
        &cache.maps,
        graph,
        &grad_raw,
    )?;
    grad_x.add_scaled(1.0, &grad_x0_edges)?;

    let reducer_grad = match &params.reducer {
        Some(r) => {
            let (g_in, g_r) = conv1x1_grouped_backward(&cache.f_in, r, &grad_x)?;
            grad_f_in.add_scaled(1.0, &g_in)?;
            Some(g_r)
        }
        None => {
            grad_f_in.add_scaled(1.0, &grad_x)?;
            None
        }
    };

    Ok(LgaGrads {
        edge_kernels: edge_grads,
        reducer: reducer_grad,
        transforms: transform_grads.into_iter().map(Option::unwrap).collect(),
        f_in: grad_f_in,
    })
}

/// Nodes whose `F_out` changes when the input at `source` is perturbed.
///
/// Uses a seeded random input and two opposite perturbations of every channel
/// of the source node, so a ReLU that happens to stay clamped under one
/// direction does not hide a dependency.
pub fn receptive_field_probe(
    params: &LgaParams,
    height: usize,
    width: usize,
    source: usize,
) -> Result<BTreeSet<usize>> {
    if height == 0 || width == 0 || source >= height * width {
        return Err(LgaError::Config(format!(
            "source node {source} outside {height}x{width} grid"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x16a_u64.wrapping_add(source as u64));
    let c = params.config.in_channels;
    let base = FeatureMap::random(&mut rng, height, width, c, -1.0, 1.0);
    let reference = lga_forward(&base, params, false)?.f_out;
    let mut influenced = BTreeSet::new();
    for sign in [1.0, -1.0] {
        let mut perturbed = base.clone();
        for v in perturbed.node_mut(source) {
            *v += sign * 0.5;
        }
        let out = lga_forward(&perturbed, params, false)?.f_out;
        for n in 0..height * width {
            if out.node(n) != reference.node(n) {
                influenced.insert(n);
            }
        }
    }
    Ok(influenced)
}
