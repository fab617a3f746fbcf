//! Scaling benchmark over grid sizes for LGA, criss-cross and dense attention.
//!
//! Only the attention (propagation) kernels are timed; projections and channel
//! resizing are excluded so the fitted exponent isolates the attention term.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::baselines::{attend_crisscross, attend_dense};
use crate::cost::{
    attention_term, count_ccnet, count_dense, count_lga, fit_scaling_exponent, AttentionModel,
    CcnetCostConfig, CostReport, DenseCostConfig, EdgeCount, LgaCostConfig, ScalingFit,
};
use crate::error::{LgaError, Result};
use crate::graph::{message_pass, normalize_adjacency, LocalGraph, DEFAULT_EPS, NUM_DIRECTIONS};
use crate::tensor::FeatureMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMode {
    /// Closed-form attention terms only; nothing is executed.
    Analytic,
    /// Median wall time of the real kernels.
    WallTime,
}

impl std::str::FromStr for BenchMode {
    type Err = LgaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "analytic" => Ok(BenchMode::Analytic),
            "walltime" | "wall" => Ok(BenchMode::WallTime),
            other => Err(LgaError::Config(format!("unknown bench mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchConfig {
    /// Square grid sides; `N = side^2`.
    pub sides: Vec<usize>,
    pub channels: usize,
    pub qk_channels: usize,
    pub layers: usize,
    pub recurrence: usize,
    pub runs: usize,
    pub warmups: usize,
    pub mode: BenchMode,
    pub models: Vec<AttentionModel>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sides: vec![16, 32, 64, 128],
            channels: 8,
            qk_channels: 8,
            layers: 4,
            recurrence: 2,
            runs: 9,
            warmups: 2,
            mode: BenchMode::WallTime,
            models: AttentionModel::ALL.to_vec(),
            seed: 0,
        }
    }
}

/// One CSV row. Column order is part of the output contract.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub model: String,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "C_in")]
    pub c_in: usize,
    #[serde(rename = "C_lga")]
    pub c_lga: usize,
    #[serde(rename = "G")]
    pub g: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub params_total: u64,
    pub flops_resize: u64,
    pub flops_attn: u64,
    pub flops_other: u64,
    pub wall_ns_median: Option<u64>,
}

pub const CSV_HEADER: &str =
    "model,N,C_in,C_lga,G,L,params_total,flops_resize,flops_attn,flops_other,wall_ns_median";

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub fits: Vec<(AttentionModel, ScalingFit)>,
}

impl BenchReport {
    pub fn fit(&self, model: AttentionModel) -> Option<&ScalingFit> {
        self.fits.iter().find(|(m, _)| *m == model).map(|(_, f)| f)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for row in &self.rows {
            out.serialize(row)
                .map_err(|e| LgaError::Format(e.to_string()))?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

fn median_ns(runs: usize, warmups: usize, mut f: impl FnMut()) -> u64 {
    for _ in 0..warmups {
        f();
    }
    let mut times: Vec<u64> = (0..runs.max(1))
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_nanos() as u64
        })
        .collect();
    times.sort_unstable();
    times[times.len() / 2]
}

fn cost_for(model: AttentionModel, cfg: &BenchConfig, side: usize) -> Result<CostReport> {
    let (c, s) = (cfg.channels as u64, side as u64);
    match model {
        AttentionModel::Lga => count_lga(&LgaCostConfig {
            in_channels: c,
            lga_channels: c,
            layers: cfg.layers as u64,
            groups: 1,
            reducer: false,
            height: s,
            width: s,
            flops_per_mac: 1,
            edge_count: EdgeCount::Clipped,
        }),
        AttentionModel::CrissCross => count_ccnet(&CcnetCostConfig {
            in_channels: c,
            mid_channels: c,
            qk_channels: cfg.qk_channels as u64,
            value_channels: c,
            resize_kernel: 0,
            recurrence: cfg.recurrence as u64,
            height: s,
            width: s,
            flops_per_mac: 1,
            qkv_per_recurrence: true,
        }),
        AttentionModel::Dense => count_dense(&DenseCostConfig {
            in_channels: c,
            qk_channels: cfg.qk_channels as u64,
            value_channels: c,
            nodes: s * s,
            flops_per_mac: 1,
        }),
    }
}

fn time_kernel(
    model: AttentionModel,
    cfg: &BenchConfig,
    side: usize,
    rng: &mut ChaCha8Rng,
) -> Result<u64> {
    let c = cfg.channels;
    Ok(match model {
        AttentionModel::Lga => {
            let x = FeatureMap::random(rng, side, side, c, -1.0, 1.0);
            let weights: Vec<f64> = (0..side * side * NUM_DIRECTIONS)
                .map(|i| 0.5 + ((i * 7919) % 101) as f64 / 101.0)
                .collect();
            let graph = normalize_adjacency(
                &LocalGraph::from_raw_weights(side, side, &weights)?,
                DEFAULT_EPS,
            )?;
            median_ns(cfg.runs, cfg.warmups, || {
                let mut cur = x.clone();
                for _ in 0..cfg.layers {
                    cur = message_pass(&cur, &graph).expect("grid matches");
                }
                std::hint::black_box(&cur);
            })
        }
        AttentionModel::CrissCross => {
            let q = FeatureMap::random(rng, side, side, cfg.qk_channels, -1.0, 1.0);
            let k = FeatureMap::random(rng, side, side, cfg.qk_channels, -1.0, 1.0);
            let v = FeatureMap::random(rng, side, side, c, -1.0, 1.0);
            median_ns(cfg.runs, cfg.warmups, || {
                for _ in 0..cfg.recurrence {
                    std::hint::black_box(attend_crisscross(&q, &k, &v));
                }
            })
        }
        AttentionModel::Dense => {
            let q = FeatureMap::random(rng, side, side, cfg.qk_channels, -1.0, 1.0);
            let k = FeatureMap::random(rng, side, side, cfg.qk_channels, -1.0, 1.0);
            let v = FeatureMap::random(rng, side, side, c, -1.0, 1.0);
            median_ns(cfg.runs, cfg.warmups, || {
                std::hint::black_box(attend_dense(&q, &k, &v));
            })
        }
    })
}

/// Run every configured model over every grid size and fit exponents.
pub fn run_scaling_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.channels == 0 || cfg.qk_channels == 0 || cfg.layers == 0 || cfg.recurrence == 0 {
        return Err(LgaError::Config(
            "bench channels, layers and recurrence must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::new();
    let mut fits = Vec::new();
    for &model in &cfg.models {
        let mut samples = Vec::with_capacity(cfg.sides.len());
        for &side in &cfg.sides {
            let n = side * side;
            let report = cost_for(model, cfg, side)?;
            let wall = match cfg.mode {
                BenchMode::Analytic => None,
                BenchMode::WallTime => Some(time_kernel(model, cfg, side, &mut rng)?),
            };
            let sample = match (cfg.mode, wall) {
                (BenchMode::WallTime, Some(ns)) => ns as f64,
                _ => {
                    let (channels, repeats) = match model {
                        AttentionModel::Lga => (cfg.channels, cfg.layers),
                        _ => (cfg.qk_channels + cfg.channels, cfg.recurrence),
                    };
                    let repeats = if model == AttentionModel::Dense {
                        1
                    } else {
                        repeats
                    };
                    attention_term(model, n as f64, channels as f64, repeats as f64)
                }
            };
            samples.push((n as f64, sample));
            rows.push(BenchRow {
                model: model.name().to_string(),
                n,
                c_in: cfg.channels,
                c_lga: if model == AttentionModel::Lga {
                    cfg.channels
                } else {
                    0
                },
                g: 1,
                l: match model {
                    AttentionModel::Lga => cfg.layers,
                    AttentionModel::CrissCross => cfg.recurrence,
                    AttentionModel::Dense => 1,
                },
                params_total: report.params_total,
                flops_resize: report.flops_channel_resize,
                flops_attn: report.flops_info_prop,
                flops_other: report.flops_other_conv,
                wall_ns_median: wall,
            });
        }
        fits.push((model, fit_scaling_exponent(&samples)?));
    }
    Ok(BenchReport { rows, fits })
}
