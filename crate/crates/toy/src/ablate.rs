use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{ToyError, ToyResult};
use crate::train::{train, TrainConfig, TrainOutputs};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    Layers,
    /// `0` trains without the contrastive term, `1` with it.
    DivergenceLoss,
    Groups,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Layers => "layers",
            AblationAxis::DivergenceLoss => "divergence_loss",
            AblationAxis::Groups => "groups",
        }
    }

    /// The training config for one point on the axis.
    pub fn apply(self, base: &TrainConfig, value: usize) -> ToyResult<TrainConfig> {
        let mut cfg = base.clone();
        match self {
            AblationAxis::Layers => cfg.model.layers = value,
            AblationAxis::Groups => cfg.model.groups = value,
            AblationAxis::DivergenceLoss => match value {
                0 => cfg.lambda = 0.0,
                1 if cfg.lambda == 0.0 => cfg.lambda = 1.0,
                1 => {}
                v => {
                    return Err(ToyError::Config(format!(
                        "divergence_loss takes 0 or 1, got {v}"
                    )))
                }
            },
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl FromStr for AblationAxis {
    type Err = ToyError;

    fn from_str(s: &str) -> ToyResult<Self> {
        match s {
            "layers" => Ok(AblationAxis::Layers),
            "divergence_loss" => Ok(AblationAxis::DivergenceLoss),
            "groups" => Ok(AblationAxis::Groups),
            other => Err(ToyError::Config(format!(
                "unknown ablation axis '{other}' (expected layers, divergence_loss or groups)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AblationRow {
    pub axis: &'static str,
    pub value: usize,
    pub seed: u64,
    pub pixel_accuracy: f64,
    pub miou: f64,
}

/// One training run per value, all other settings taken from `base`.
pub fn ablate(
    axis: AblationAxis,
    values: &[usize],
    base: &TrainConfig,
) -> ToyResult<Vec<AblationRow>> {
    if values.is_empty() {
        return Err(ToyError::Config("ablation needs at least one value".into()));
    }
    // Validate every point before spending time on training.
    let cfgs = values
        .iter()
        .map(|&v| axis.apply(base, v))
        .collect::<ToyResult<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(values.len());
    for (&value, cfg) in values.iter().zip(&cfgs) {
        let out = train(cfg, &TrainOutputs::default())?;
        let last = out.history.last().expect("epochs > 0");
        rows.push(AblationRow {
            axis: axis.name(),
            value,
            seed: cfg.seed,
            pixel_accuracy: last.pixel_accuracy,
            miou: last.miou,
        });
    }
    Ok(rows)
}

pub fn write_rows(path: impl AsRef<Path>, rows: &[AblationRow]) -> ToyResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
