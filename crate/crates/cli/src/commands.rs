use std::fs;
use std::path::Path;

use lga_core::bench::{run_scaling_bench, BenchConfig, BenchMode};
use lga_core::cost::{
    count_ccnet, count_dense, count_lga, AttentionModel, CcnetCostConfig, CostReport,
    DenseCostConfig, EdgeCount, LgaCostConfig,
};
use lga_core::gradcheck::{run_gradcheck, GradcheckConfig};
use lga_core::graph::{build_graph, EdgeActivation, EdgeKernels, Weights, DEFAULT_EPS};
use lga_core::io::read_feature_map;
use lga_core::lga::LayerActivation;
use lga_core::loss::Divergence;
use lga_core::FeatureMap;
use lga_toy::ablate::write_rows;
use lga_toy::adam::AdamConfig;
use lga_toy::data::save_dataset;
use lga_toy::train::dataset_seeds;
use lga_toy::{
    ablate, generate_dataset, AblationAxis, DatasetConfig, ModelConfig, TrainConfig, TrainOutputs,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::config::Settings;
use crate::error::{CliError, CliResult};

/// Files each command writes under `--out-dir`.
pub const GRAPH_FILE: &str = "graph.json";
pub const GRADCHECK_FILE: &str = "gradcheck.json";
pub const COST_FILE: &str = "cost.json";
pub const BENCH_CSV: &str = "bench.csv";
pub const BENCH_FITS: &str = "bench_fits.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const ABLATION_FILE: &str = "ablation.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostPreset {
    SqueezeLga,
    SqueezeLgaSmall,
    Ccnet,
}

impl std::str::FromStr for CostPreset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "squeeze-lga" => Ok(CostPreset::SqueezeLga),
            "squeeze-lga-small" => Ok(CostPreset::SqueezeLgaSmall),
            "ccnet" => Ok(CostPreset::Ccnet),
            other => Err(format!(
                "unknown preset '{other}' (expected squeeze-lga, squeeze-lga-small or ccnet)"
            )),
        }
    }
}

fn s<T: ToString>(v: T) -> String {
    v.to_string()
}

fn write_json(dir: &Path, name: &str, value: &serde_json::Value) -> CliResult<()> {
    fs::write(dir.join(name), serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

// ---------------------------------------------------------------- dump-graph

pub fn dump_graph_defaults() -> Vec<(&'static str, String)> {
    vec![
        ("height", s(4)),
        ("width", s(4)),
        ("channels", s(4)),
        ("activation", s("softplus")),
        ("eps", s(DEFAULT_EPS)),
        ("input", String::new()),
        ("dense", s(false)),
        ("seed", s(0)),
    ]
}

/// Build a graph from random (or loaded) features and random edge kernels.
pub fn dump_graph(cfg: &Settings, out: &Path) -> CliResult<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.get("seed")?);
    let input = cfg.raw("input");
    let features = if input.is_empty() {
        let (h, w, c) = (cfg.get("height")?, cfg.get("width")?, cfg.get("channels")?);
        if h == 0 || w == 0 || c == 0 {
            return Err(CliError::Config(
                "height, width and channels must be positive".into(),
            ));
        }
        FeatureMap::random(&mut rng, h, w, c, -1.0, 1.0)
    } else {
        read_feature_map(input)?
    };
    let activation: EdgeActivation = cfg.get("activation")?;
    let kernels = EdgeKernels::random(&mut rng, features.channels(), false)?;
    let (_, graph) = build_graph(&features, &kernels, activation, cfg.get("eps")?)?;
    let mut body = serde_json::to_value(graph.dump())?;
    if cfg.get::<bool>("dense")? {
        let m = graph.densify(Weights::Normalized)?;
        let rows: Vec<Vec<f64>> = (0..m.nrows())
            .map(|i| m.row(i).iter().copied().collect())
            .collect();
        body["dense"] = json!(rows);
    }
    write_json(out, GRAPH_FILE, &body)?;
    Ok(format!(
        "{}x{} grid, {} edges -> {}",
        graph.height(),
        graph.width(),
        graph.num_edges(),
        out.join(GRAPH_FILE).display()
    ))
}

// ----------------------------------------------------------------- gradcheck

pub fn gradcheck_defaults() -> Vec<(&'static str, String)> {
    let d = GradcheckConfig::default();
    vec![
        ("height", s(d.height)),
        ("width", s(d.width)),
        ("in_channels", s(d.in_channels)),
        ("lga_channels", s(d.lga_channels)),
        ("layers", s(d.layers)),
        ("groups", s(d.groups)),
        ("reducer", s(d.reducer)),
        ("hidden_activation", s(d.hidden_activation.tag())),
        ("instances", s(d.instances)),
        ("step", s(d.step)),
        ("threshold", s(d.threshold)),
        ("pairs", s(d.pairs)),
        ("seed", s(d.seed)),
    ]
}

pub fn gradcheck(cfg: &Settings, out: &Path) -> CliResult<String> {
    let gc = GradcheckConfig {
        height: cfg.get("height")?,
        width: cfg.get("width")?,
        in_channels: cfg.get("in_channels")?,
        lga_channels: cfg.get("lga_channels")?,
        layers: cfg.get("layers")?,
        groups: cfg.get("groups")?,
        reducer: cfg.get("reducer")?,
        hidden_activation: cfg.get::<LayerActivation>("hidden_activation")?,
        instances: cfg.get("instances")?,
        step: cfg.get("step")?,
        threshold: cfg.get("threshold")?,
        pairs: cfg.get("pairs")?,
        seed: cfg.get("seed")?,
    };
    let report = run_gradcheck(&gc)?;
    write_json(out, GRADCHECK_FILE, &serde_json::to_value(&report)?)?;
    let table = report.to_table();
    if report.all_passed() {
        Ok(table)
    } else {
        Err(CliError::CheckFailed(format!(
            "relative error above {} for some tensors\n{table}",
            report.threshold
        )))
    }
}

// ---------------------------------------------------------------------- cost

pub fn cost_defaults(preset: Option<CostPreset>) -> Vec<(&'static str, String)> {
    let lga = match preset {
        Some(CostPreset::SqueezeLgaSmall) => LgaCostConfig::squeeze(8),
        _ => LgaCostConfig::squeeze(1),
    };
    let cc = CcnetCostConfig::squeeze();
    let model = if preset == Some(CostPreset::Ccnet) {
        "crisscross"
    } else {
        "lga"
    };
    let fpm = if preset == Some(CostPreset::Ccnet) {
        cc.flops_per_mac
    } else {
        lga.flops_per_mac
    };
    vec![
        ("model", s(model)),
        ("in_channels", s(lga.in_channels)),
        ("lga_channels", s(lga.lga_channels)),
        ("layers", s(lga.layers)),
        ("groups", s(lga.groups)),
        ("reducer", s(lga.reducer)),
        ("height", s(lga.height)),
        ("width", s(lga.width)),
        ("flops_per_mac", s(fpm)),
        ("edge_count", s("clipped")),
        ("mid_channels", s(cc.mid_channels)),
        ("qk_channels", s(cc.qk_channels)),
        ("value_channels", s(cc.value_channels)),
        ("resize_kernel", s(cc.resize_kernel)),
        ("recurrence", s(cc.recurrence)),
        ("qkv_per_recurrence", s(cc.qkv_per_recurrence)),
        ("seed", s(0)),
    ]
}

fn parse_model(name: &str) -> CliResult<AttentionModel> {
    AttentionModel::ALL
        .into_iter()
        .find(|m| m.name() == name)
        .ok_or_else(|| {
            CliError::Config(format!(
                "unknown model '{name}' (expected lga, crisscross or dense)"
            ))
        })
}

pub fn cost_report(cfg: &Settings) -> CliResult<(AttentionModel, CostReport)> {
    let model = parse_model(cfg.raw("model"))?;
    let report = match model {
        AttentionModel::Lga => count_lga(&LgaCostConfig {
            in_channels: cfg.get("in_channels")?,
            lga_channels: cfg.get("lga_channels")?,
            layers: cfg.get("layers")?,
            groups: cfg.get("groups")?,
            reducer: cfg.get("reducer")?,
            height: cfg.get("height")?,
            width: cfg.get("width")?,
            flops_per_mac: cfg.get("flops_per_mac")?,
            edge_count: match cfg.raw("edge_count") {
                "clipped" => EdgeCount::Clipped,
                "uniform" => EdgeCount::Uniform,
                other => return Err(CliError::Config(format!("unknown edge_count '{other}'"))),
            },
        })?,
        AttentionModel::CrissCross => count_ccnet(&CcnetCostConfig {
            in_channels: cfg.get("in_channels")?,
            mid_channels: cfg.get("mid_channels")?,
            qk_channels: cfg.get("qk_channels")?,
            value_channels: cfg.get("value_channels")?,
            resize_kernel: cfg.get("resize_kernel")?,
            recurrence: cfg.get("recurrence")?,
            height: cfg.get("height")?,
            width: cfg.get("width")?,
            flops_per_mac: cfg.get("flops_per_mac")?,
            qkv_per_recurrence: cfg.get("qkv_per_recurrence")?,
        })?,
        AttentionModel::Dense => count_dense(&DenseCostConfig {
            in_channels: cfg.get("in_channels")?,
            qk_channels: cfg.get("qk_channels")?,
            value_channels: cfg.get("value_channels")?,
            nodes: cfg.get::<u64>("height")? * cfg.get::<u64>("width")?,
            flops_per_mac: cfg.get("flops_per_mac")?,
        })?,
    };
    Ok((model, report))
}

pub fn cost(cfg: &Settings, out: &Path) -> CliResult<String> {
    let (model, report) = cost_report(cfg)?;
    let shown = report.display_units();
    write_json(
        out,
        COST_FILE,
        &json!({ "model": model.name(), "counts": report, "displayed": shown }),
    )?;
    Ok(format!("{}: {shown}", model.name()))
}

// --------------------------------------------------------------------- bench

pub fn bench_defaults() -> Vec<(&'static str, String)> {
    let d = BenchConfig::default();
    let join = |v: Vec<String>| v.join(",");
    vec![
        ("mode", s("walltime")),
        ("sides", join(d.sides.iter().map(s).collect())),
        ("channels", s(d.channels)),
        ("qk_channels", s(d.qk_channels)),
        ("layers", s(d.layers)),
        ("recurrence", s(d.recurrence)),
        ("runs", s(d.runs)),
        ("warmups", s(d.warmups)),
        (
            "models",
            join(d.models.iter().map(|m| s(m.name())).collect()),
        ),
        ("seed", s(d.seed)),
    ]
}

pub fn bench(cfg: &Settings, out: &Path) -> CliResult<String> {
    let bc = BenchConfig {
        sides: cfg.get_list("sides")?,
        channels: cfg.get("channels")?,
        qk_channels: cfg.get("qk_channels")?,
        layers: cfg.get("layers")?,
        recurrence: cfg.get("recurrence")?,
        runs: cfg.get("runs")?,
        warmups: cfg.get("warmups")?,
        mode: cfg.get::<BenchMode>("mode")?,
        models: cfg
            .get_list::<String>("models")?
            .iter()
            .map(|m| parse_model(m))
            .collect::<CliResult<_>>()?,
        seed: cfg.get("seed")?,
    };
    let report = run_scaling_bench(&bc)?;
    report.write_csv_file(out.join(BENCH_CSV))?;
    let fits: serde_json::Map<String, serde_json::Value> = report
        .fits
        .iter()
        .map(|(m, f)| {
            (
                m.name().to_string(),
                json!({ "exponent": f.exponent, "residual": f.residual }),
            )
        })
        .collect();
    write_json(out, BENCH_FITS, &serde_json::Value::Object(fits))?;
    let mut msg = String::new();
    for (m, f) in &report.fits {
        msg.push_str(&format!(
            "{:<11} exponent {:.3} (rms residual {:.3})\n",
            m.name(),
            f.exponent,
            f.residual
        ));
    }
    Ok(msg)
}

// --------------------------------------------------------------------- train

pub fn train_defaults() -> Vec<(&'static str, String)> {
    let d = TrainConfig::default();
    vec![
        ("epochs", s(d.epochs)),
        ("lr", s(d.lr)),
        ("lr_decay_epoch", s(d.lr_decay_epoch)),
        ("lr_decay", s(d.lr_decay)),
        ("batch_size", s(d.batch_size)),
        ("lambda", s(d.lambda)),
        ("pairs", s(d.pairs)),
        ("divergence", s("mse")),
        ("train_samples", s(d.train_samples)),
        ("test_samples", s(d.test_samples)),
        ("seed", s(d.seed)),
        ("height", s(d.data.height)),
        ("width", s(d.data.width)),
        ("objects", s(d.data.objects)),
        ("cue_radius", s(d.data.cue_radius)),
        ("cue_width", s(d.data.cue_width)),
        ("noise", s(d.data.noise)),
        ("enc_channels", s(d.model.enc_channels)),
        ("latent_channels", s(d.model.latent_channels)),
        ("lga", s(d.model.lga)),
        ("lga_channels", s(d.model.lga_channels)),
        ("layers", s(d.model.layers)),
        ("groups", s(d.model.groups)),
        ("dec_channels", s(d.model.dec_channels)),
        ("beta1", s(d.adam.beta1)),
        ("beta2", s(d.adam.beta2)),
        ("adam_eps", s(d.adam.eps)),
        ("checkpoints", s(true)),
        ("cache_dataset", s(false)),
    ]
}

pub fn train_config(cfg: &Settings) -> CliResult<TrainConfig> {
    let tc = TrainConfig {
        epochs: cfg.get("epochs")?,
        lr: cfg.get("lr")?,
        lr_decay_epoch: cfg.get("lr_decay_epoch")?,
        lr_decay: cfg.get("lr_decay")?,
        batch_size: cfg.get("batch_size")?,
        lambda: cfg.get("lambda")?,
        pairs: cfg.get("pairs")?,
        divergence: cfg.get::<Divergence>("divergence")?,
        train_samples: cfg.get("train_samples")?,
        test_samples: cfg.get("test_samples")?,
        seed: cfg.get("seed")?,
        data: DatasetConfig {
            height: cfg.get("height")?,
            width: cfg.get("width")?,
            objects: cfg.get("objects")?,
            cue_radius: cfg.get("cue_radius")?,
            cue_width: cfg.get("cue_width")?,
            noise: cfg.get("noise")?,
        },
        model: ModelConfig {
            enc_channels: cfg.get("enc_channels")?,
            latent_channels: cfg.get("latent_channels")?,
            lga: cfg.get("lga")?,
            lga_channels: cfg.get("lga_channels")?,
            layers: cfg.get("layers")?,
            groups: cfg.get("groups")?,
            dec_channels: cfg.get("dec_channels")?,
        },
        adam: AdamConfig {
            beta1: cfg.get("beta1")?,
            beta2: cfg.get("beta2")?,
            eps: cfg.get("adam_eps")?,
        },
    };
    tc.validate()?;
    Ok(tc)
}

pub fn train(cfg: &Settings, out: &Path, verbose: bool) -> CliResult<String> {
    let tc = train_config(cfg)?;
    if cfg.get::<bool>("cache_dataset")? {
        let (train_seed, test_seed) = dataset_seeds(tc.seed);
        save_dataset(
            out.join("dataset/train"),
            &generate_dataset(tc.train_samples, &tc.data, train_seed)?,
        )?;
        save_dataset(
            out.join("dataset/test"),
            &generate_dataset(tc.test_samples, &tc.data, test_seed)?,
        )?;
    }
    let outcome = lga_toy::train(
        &tc,
        &TrainOutputs {
            dir: Some(out.to_path_buf()),
            checkpoints: cfg.get("checkpoints")?,
        },
    )?;
    let last = *outcome.history.last().expect("epochs > 0");
    write_json(
        out,
        SUMMARY_FILE,
        &json!({ "final": last, "params": outcome.model.param_count(), "epochs": tc.epochs }),
    )?;
    let mut msg = String::new();
    if verbose {
        for h in &outcome.history {
            msg.push_str(&format!(
                "epoch {:>3} lr {:.1e} task {:.4} contrastive {:.4} acc {:.4} mIoU {:.4}\n",
                h.epoch, h.lr, h.task_loss, h.contrastive_loss, h.pixel_accuracy, h.miou
            ));
        }
    }
    msg.push_str(&format!(
        "final pixel accuracy {:.4}, mIoU {:.4} -> {}",
        last.pixel_accuracy,
        last.miou,
        out.join(METRICS_FILE).display()
    ));
    Ok(msg)
}

// -------------------------------------------------------------------- ablate

pub fn ablate_defaults() -> Vec<(&'static str, String)> {
    let mut d = train_defaults();
    d.retain(|(k, _)| *k != "checkpoints" && *k != "cache_dataset");
    d.push(("axis", s("layers")));
    d.push(("values", s("0,1,2,4")));
    d
}

pub fn ablate_cmd(cfg: &Settings, out: &Path) -> CliResult<String> {
    let axis: AblationAxis = cfg.get("axis")?;
    let values: Vec<usize> = cfg.get_list("values")?;
    let rows = ablate(axis, &values, &train_config(cfg)?)?;
    write_rows(out.join(ABLATION_FILE), &rows)?;
    let mut msg = format!("{:<16} {:>8}\n", axis.name(), "mIoU");
    for r in &rows {
        msg.push_str(&format!("{:<16} {:>8.4}\n", r.value, r.miou));
    }
    Ok(msg)
}
