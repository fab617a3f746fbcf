//! Parameter checkpoints: a `manifest.json` plus one LGAF file per tensor.
//!
//! A `GroupedLinear` weight with `C_out` outputs and `C_in / G` inputs per
//! group is stored as a `1 x C_out x (C_in / G)` map; a bias as
//! `1 x 1 x C_out`. The manifest carries the module configuration so a
//! checkpoint can be loaded without any other context.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{LgaError, Result};
use crate::graph::{Direction, EdgeKernels};
use crate::io::{read_feature_map, write_feature_map, DType};
use crate::lga::{LgaConfig, LgaParams};
use crate::tensor::{FeatureMap, GroupedLinear};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
    /// Stored map shape `[H, W, C]`.
    pub shape: [usize; 3],
    pub bias_file: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub layers: usize,
    pub groups: usize,
    pub eps: f64,
    pub edge_activation: String,
    pub hidden_activation: String,
    pub output_activation: String,
    pub config: LgaConfig,
    pub tensors: Vec<TensorEntry>,
    /// Free-form extras, e.g. the training epoch.
    #[serde(default)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

fn direction_tag(d: Direction) -> &'static str {
    match d {
        Direction::Myself => "self",
        Direction::N => "n",
        Direction::NE => "ne",
        Direction::E => "e",
        Direction::SE => "se",
        Direction::S => "s",
        Direction::SW => "sw",
        Direction::W => "w",
        Direction::NW => "nw",
    }
}

/// Names of all tensors in [`LgaParams::tensors_mut`] order.
pub fn tensor_names(params: &LgaParams) -> Vec<String> {
    let mut names: Vec<String> = Direction::ALL
        .iter()
        .map(|&d| format!("edge_kernel_{}", direction_tag(d)))
        .collect();
    if params.reducer.is_some() {
        names.push("reducer".into());
    }
    names.extend((0..params.transforms.len()).map(|i| format!("transform_{i}")));
    names
}

fn all_tensors(params: &LgaParams) -> Vec<&GroupedLinear> {
    let mut out: Vec<&GroupedLinear> = params.edge_kernels.kernels().iter().collect();
    out.extend(params.reducer.iter());
    out.extend(params.transforms.iter());
    out
}

/// Write `params` under `dir`, creating it if needed.
pub fn save_params(
    dir: impl AsRef<Path>,
    params: &LgaParams,
    extra: serde_json::Map<String, serde_json::Value>,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for (name, t) in tensor_names(params).into_iter().zip(all_tensors(params)) {
        let shape = [1, t.out_channels(), t.in_per_group()];
        let map = FeatureMap::new(shape[0], shape[1], shape[2], t.weight().to_vec())?;
        let file = format!("{name}.lgaf");
        write_feature_map(dir.join(&file), &map, DType::F64)?;
        let bias_file = match t.bias() {
            Some(b) => {
                let f = format!("{name}.bias.lgaf");
                write_feature_map(
                    dir.join(&f),
                    &FeatureMap::new(1, 1, b.len(), b.to_vec())?,
                    DType::F64,
                )?;
                Some(f)
            }
            None => None,
        };
        entries.push(TensorEntry {
            name,
            file,
            in_channels: t.in_channels(),
            out_channels: t.out_channels(),
            groups: t.groups(),
            shape,
            bias_file,
        });
    }
    let cfg = params.config;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        layers: cfg.layers,
        groups: cfg.groups,
        eps: cfg.eps,
        edge_activation: cfg.edge_activation.tag().into(),
        hidden_activation: cfg.hidden_activation.tag().into(),
        output_activation: cfg.output_activation.tag().into(),
        config: cfg,
        tensors: entries,
        extra,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let text = fs::read_to_string(dir.as_ref().join(MANIFEST_FILE))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.format_version != FORMAT_VERSION {
        return Err(LgaError::Format(format!(
            "unsupported checkpoint version {}",
            m.format_version
        )));
    }
    Ok(m)
}

fn load_tensor(dir: &Path, e: &TensorEntry) -> Result<GroupedLinear> {
    let map = read_feature_map(dir.join(&e.file))?;
    if [map.height(), map.width(), map.channels()] != e.shape {
        return Err(LgaError::Format(format!(
            "tensor {} has shape {:?}, manifest says {:?}",
            e.name,
            map.dims(),
            e.shape
        )));
    }
    let bias = match &e.bias_file {
        Some(f) => Some(read_feature_map(dir.join(f))?.into_data()),
        None => None,
    };
    GroupedLinear::new(
        e.in_channels,
        e.out_channels,
        e.groups,
        map.into_data(),
        bias,
    )
}

pub fn load_params(dir: impl AsRef<Path>) -> Result<(LgaParams, Manifest)> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let cfg = manifest.config;
    cfg.validate()?;
    let lookup = |name: &str| -> Result<GroupedLinear> {
        let e = manifest
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| LgaError::Format(format!("checkpoint is missing tensor {name}")))?;
        load_tensor(dir, e)
    };
    let kernels = Direction::ALL
        .iter()
        .map(|&d| lookup(&format!("edge_kernel_{}", direction_tag(d))))
        .collect::<Result<Vec<_>>>()?;
    let reducer = cfg.reducer.then(|| lookup("reducer")).transpose()?;
    let transforms = (0..cfg.layers)
        .map(|i| lookup(&format!("transform_{i}")))
        .collect::<Result<Vec<_>>>()?;
    let params = LgaParams::new(cfg, EdgeKernels::new(kernels)?, reducer, transforms)?;
    Ok((params, manifest))
}
