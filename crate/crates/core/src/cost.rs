//! Analytic parameter and FLOP counts.
//!
//! Counts are split the way efficiency tables usually report attention
//! modules: channel resizing convolutions, information propagation (moving
//! features along edges / attention weights), and the remaining 1x1
//! convolutions. One multiply-accumulate counts as `flops_per_mac` FLOPs.
//! Scalar nonlinearities, normalization and softmax are not counted.
//!
//! The LGA counts match [`crate::instrument`] counts of the real kernels
//! exactly when `flops_per_mac = 1` and edges are [`EdgeCount::Clipped`].

use serde::{Deserialize, Serialize};

use crate::error::{LgaError, Result};
use crate::graph::{structural_edge_count, NUM_DIRECTIONS};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub params_channel_resize: u64,
    pub params_attention: u64,
    pub params_total: u64,
    pub flops_channel_resize: u64,
    pub flops_info_prop: u64,
    pub flops_other_conv: u64,
    pub flops_total: u64,
}

impl CostReport {
    fn from_parts(params: (u64, u64), flops: (u64, u64, u64)) -> Self {
        Self {
            params_channel_resize: params.0,
            params_attention: params.1,
            params_total: params.0 + params.1,
            flops_channel_resize: flops.0,
            flops_info_prop: flops.1,
            flops_other_conv: flops.2,
            flops_total: flops.0 + flops.1 + flops.2,
        }
    }

    /// Attention-only FLOPs (propagation plus its own convolutions).
    pub fn flops_attention(&self) -> u64 {
        self.flops_info_prop + self.flops_other_conv
    }

    /// Parameters in thousands and FLOPs in millions, as the usual tables
    /// display them.
    pub fn display_units(&self) -> DisplayedCost {
        let k = |v: u64| v as f64 / 1e3;
        let m = |v: u64| v as f64 / 1e6;
        DisplayedCost {
            params_resize_k: k(self.params_channel_resize),
            params_attention_k: k(self.params_attention),
            params_total_k: k(self.params_total),
            flops_resize_m: m(self.flops_channel_resize),
            flops_info_prop_m: m(self.flops_info_prop),
            flops_other_m: m(self.flops_other_conv),
            flops_total_m: m(self.flops_total),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DisplayedCost {
    pub params_resize_k: f64,
    pub params_attention_k: f64,
    pub params_total_k: f64,
    pub flops_resize_m: f64,
    pub flops_info_prop_m: f64,
    pub flops_other_m: f64,
    pub flops_total_m: f64,
}

impl std::fmt::Display for DisplayedCost {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "params(1e3): resize {:.1} attention {:.1} total {:.1} | flops(1e6): resize {:.1} info-prop {:.1} other-conv {:.1} total {:.1}",
            self.params_resize_k,
            self.params_attention_k,
            self.params_total_k,
            self.flops_resize_m,
            self.flops_info_prop_m,
            self.flops_other_m,
            self.flops_total_m
        )
    }
}

/// How many edges a grid contributes to propagation cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeCount {
    /// Exact structural count, `(3H - 2)(3W - 2)`.
    #[default]
    Clipped,
    /// Nine edges per node, as if the border were padded.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LgaCostConfig {
    pub in_channels: u64,
    pub lga_channels: u64,
    pub layers: u64,
    pub groups: u64,
    pub reducer: bool,
    pub height: u64,
    pub width: u64,
    pub flops_per_mac: u64,
    pub edge_count: EdgeCount,
}

impl LgaCostConfig {
    /// SqueezeNet placement (512 -> 128, four layers, 32x32 grid).
    pub fn squeeze(groups: u64) -> Self {
        Self {
            in_channels: 512,
            lga_channels: 128,
            layers: 4,
            groups,
            reducer: true,
            height: 32,
            width: 32,
            flops_per_mac: 1,
            edge_count: EdgeCount::Clipped,
        }
    }

    pub fn nodes(&self) -> u64 {
        self.height * self.width
    }
}

pub fn count_lga(cfg: &LgaCostConfig) -> Result<CostReport> {
    let c = cfg.lga_channels;
    if cfg.groups == 0 || c == 0 || !c.is_multiple_of(cfg.groups) || cfg.flops_per_mac == 0 {
        return Err(LgaError::Config(format!(
            "invalid LGA cost config: groups {} / lga_channels {c} / flops_per_mac {}",
            cfg.groups, cfg.flops_per_mac
        )));
    }
    if cfg.reducer && !cfg.in_channels.is_multiple_of(cfg.groups) {
        return Err(LgaError::Config(format!(
            "groups {} must divide in_channels {}",
            cfg.groups, cfg.in_channels
        )));
    }
    if !cfg.reducer && cfg.in_channels != c {
        return Err(LgaError::Config(
            "without a reducer in_channels must equal lga_channels".into(),
        ));
    }
    let n = cfg.nodes();
    let l = cfg.layers;
    let fpm = cfg.flops_per_mac;

    let resize_params = if cfg.reducer {
        cfg.in_channels * c / cfg.groups
    } else {
        0
    };
    let transform_params = c * c / cfg.groups;
    let edge_params = NUM_DIRECTIONS as u64 * c;
    let attention_params = if l == 0 {
        0
    } else {
        edge_params + l * transform_params
    };

    let edges = match cfg.edge_count {
        EdgeCount::Clipped => structural_edge_count(cfg.height as usize, cfg.width as usize) as u64,
        EdgeCount::Uniform => NUM_DIRECTIONS as u64 * n,
    };
    let resize = n * resize_params * fpm;
    let info = l * edges * c * fpm;
    let other = if l == 0 {
        0
    } else {
        (n * edge_params + l * n * transform_params) * fpm
    };
    Ok(CostReport::from_parts(
        (resize_params, attention_params),
        (resize, info, other),
    ))
}

/// Criss-cross attention head: a `k x k` resize convolution followed by
/// `R` criss-cross passes with Q/K/V projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CcnetCostConfig {
    pub in_channels: u64,
    pub mid_channels: u64,
    pub qk_channels: u64,
    pub value_channels: u64,
    pub resize_kernel: u64,
    pub recurrence: u64,
    pub height: u64,
    pub width: u64,
    pub flops_per_mac: u64,
    /// Count the Q/K/V projections once per pass instead of once overall.
    pub qkv_per_recurrence: bool,
}

impl CcnetCostConfig {
    /// Channel sizes recovered from the published SqueezeNet breakdown:
    /// 3x3 resize 512 -> 512, Q/K at 512/8, two passes, 2 FLOPs per MAC,
    /// projections counted once.
    pub fn squeeze() -> Self {
        Self {
            in_channels: 512,
            mid_channels: 512,
            qk_channels: 64,
            value_channels: 512,
            resize_kernel: 3,
            recurrence: 2,
            height: 32,
            width: 32,
            flops_per_mac: 2,
            qkv_per_recurrence: false,
        }
    }

    pub fn nodes(&self) -> u64 {
        self.height * self.width
    }
}

pub fn count_ccnet(cfg: &CcnetCostConfig) -> Result<CostReport> {
    if cfg.mid_channels == 0
        || cfg.qk_channels == 0
        || cfg.value_channels == 0
        || cfg.flops_per_mac == 0
    {
        return Err(LgaError::Config(
            "criss-cross cost config needs positive channel sizes".into(),
        ));
    }
    let n = cfg.nodes();
    let fpm = cfg.flops_per_mac;
    let k2 = cfg.resize_kernel * cfg.resize_kernel;
    let resize_params = k2 * cfg.in_channels * cfg.mid_channels;
    let proj_per_node = cfg.mid_channels * (2 * cfg.qk_channels + cfg.value_channels);
    let attention_params = proj_per_node;
    let per_position = if n == 0 {
        0
    } else {
        cfg.height + cfg.width - 1
    };
    let info = cfg.recurrence * n * per_position * (cfg.qk_channels + cfg.value_channels) * fpm;
    let proj_passes = match (cfg.recurrence, cfg.qkv_per_recurrence) {
        (0, _) => 0,
        (r, true) => r,
        (_, false) => 1,
    };
    let other = proj_passes * n * proj_per_node * fpm;
    let resize = n * resize_params * fpm;
    Ok(CostReport::from_parts(
        (resize_params, attention_params),
        (resize, info, other),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseCostConfig {
    pub in_channels: u64,
    pub qk_channels: u64,
    pub value_channels: u64,
    pub nodes: u64,
    pub flops_per_mac: u64,
}

pub fn count_dense(cfg: &DenseCostConfig) -> Result<CostReport> {
    if cfg.qk_channels == 0 || cfg.value_channels == 0 || cfg.flops_per_mac == 0 {
        return Err(LgaError::Config(
            "dense attention cost config needs positive channel sizes".into(),
        ));
    }
    let n = cfg.nodes;
    let proj = cfg.in_channels * (2 * cfg.qk_channels + cfg.value_channels);
    let info = n * n * (cfg.qk_channels + cfg.value_channels) * cfg.flops_per_mac;
    Ok(CostReport::from_parts(
        (0, proj),
        (0, info, n * proj * cfg.flops_per_mac),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionModel {
    Lga,
    CrissCross,
    Dense,
}

impl AttentionModel {
    pub const ALL: [AttentionModel; 3] = [
        AttentionModel::Lga,
        AttentionModel::CrissCross,
        AttentionModel::Dense,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttentionModel::Lga => "lga",
            AttentionModel::CrissCross => "crisscross",
            AttentionModel::Dense => "dense",
        }
    }
}

/// Asymptotic attention-term MACs: `9 N C` per LGA layer, `2 N^1.5 C` per
/// criss-cross pass, `N^2 C` for dense attention. `repeats` multiplies
/// (layers or passes).
pub fn attention_term(model: AttentionModel, nodes: f64, channels: f64, repeats: f64) -> f64 {
    let per = match model {
        AttentionModel::Lga => NUM_DIRECTIONS as f64 * nodes,
        AttentionModel::CrissCross => 2.0 * nodes.powf(1.5),
        AttentionModel::Dense => nodes * nodes,
    };
    per * channels * repeats
}

/// Least-squares line through `(ln N, ln cost)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingFit {
    pub samples: Vec<(f64, f64)>,
    pub exponent: f64,
    pub intercept: f64,
    /// Root-mean-square residual in log space.
    pub residual: f64,
}

pub const MIN_FIT_POINTS: usize = 4;
pub const MIN_FIT_SPAN: f64 = 16.0;

pub fn fit_scaling_exponent(samples: &[(f64, f64)]) -> Result<ScalingFit> {
    if samples.len() < MIN_FIT_POINTS {
        return Err(LgaError::Config(format!(
            "need at least {MIN_FIT_POINTS} samples, got {}",
            samples.len()
        )));
    }
    if samples
        .iter()
        .any(|&(n, c)| !(n > 0.0) || !(c > 0.0) || !n.is_finite() || !c.is_finite())
    {
        return Err(LgaError::Config(
            "scaling samples must be positive and finite".into(),
        ));
    }
    if samples.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(LgaError::Config(
            "sample sizes must be strictly increasing".into(),
        ));
    }
    let span = samples[samples.len() - 1].0 / samples[0].0;
    if span < MIN_FIT_SPAN {
        return Err(LgaError::Config(format!(
            "samples span {span:.1}x in N, need at least {MIN_FIT_SPAN}x"
        )));
    }
    let pts: Vec<(f64, f64)> = samples.iter().map(|&(n, c)| (n.ln(), c.ln())).collect();
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual = (pts
        .iter()
        .map(|p| (p.1 - (intercept + slope * p.0)).powi(2))
        .sum::<f64>()
        / m)
        .sqrt();
    Ok(ScalingFit {
        samples: samples.to_vec(),
        exponent: slope,
        intercept,
        residual,
    })
}
