use std::fs;
use std::path::{Path, PathBuf};

use lga_core::checkpoint::save_params;
use lga_core::io::{write_feature_map, DType};
use lga_core::loss::{
    build_similarity, Divergence, GroundTruth, LossOptions, PairBatch, PatchSimilarity,
    SimilarityMode,
};
use lga_core::{FeatureMap, LgaError};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{Adam, AdamConfig};
use crate::data::{generate_dataset, DatasetConfig, SyntheticSample, NUM_CLASSES};
use crate::error::{ToyError, ToyResult};
use crate::metrics::Confusion;
use crate::model::{ModelConfig, ModelGrads, ToyModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Epoch at which the learning rate is multiplied by `lr_decay`.
    pub lr_decay_epoch: usize,
    pub lr_decay: f64,
    pub batch_size: usize,
    /// Weight of the contrastive term; `0` disables it.
    pub lambda: f64,
    pub pairs: usize,
    pub divergence: Divergence,
    pub train_samples: usize,
    pub test_samples: usize,
    pub seed: u64,
    pub data: DatasetConfig,
    pub model: ModelConfig,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            lr: 3e-3,
            lr_decay_epoch: 6,
            lr_decay: 0.1,
            batch_size: 8,
            lambda: 1.0,
            pairs: 256,
            divergence: Divergence::Mse,
            train_samples: 256,
            test_samples: 96,
            seed: 0,
            data: DatasetConfig::default(),
            model: ModelConfig::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> ToyResult<()> {
        self.data.validate()?;
        self.model.validate()?;
        if self.epochs == 0
            || self.batch_size == 0
            || self.train_samples == 0
            || self.test_samples == 0
        {
            return Err(ToyError::Config(
                "epochs, batch_size and sample counts must be positive".into(),
            ));
        }
        if !(self.lr >= 0.0) || !(self.lambda >= 0.0) || !(self.lr_decay > 0.0) {
            return Err(ToyError::Config(
                "lr and lambda must be nonnegative, lr_decay positive".into(),
            ));
        }
        if self.lambda > 0.0 && self.pairs == 0 {
            return Err(ToyError::Config(
                "pairs must be positive when lambda > 0".into(),
            ));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_decay_epoch {
            self.lr * self.lr_decay
        } else {
            self.lr
        }
    }

    fn uses_contrastive(&self) -> bool {
        self.lambda > 0.0 && self.model.lga_config().is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub task_loss: f64,
    pub contrastive_loss: f64,
    pub pixel_accuracy: f64,
    pub miou: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochMetrics>,
    pub model: ToyModel,
}

impl TrainOutcome {
    pub fn final_miou(&self) -> f64 {
        self.history.last().map_or(0.0, |m| m.miou)
    }
}

/// Where training writes its files; `None` keeps everything in memory.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub dir: Option<PathBuf>,
    pub checkpoints: bool,
}

struct Prepared {
    sample: SyntheticSample,
    sim: PatchSimilarity,
}

fn prepare(samples: Vec<SyntheticSample>, latent: (usize, usize)) -> ToyResult<Vec<Prepared>> {
    samples
        .into_iter()
        .map(|s| {
            let gt = GroundTruth::Labels {
                height: s.image.height(),
                width: s.image.width(),
                labels: s.labels.iter().map(|&l| l as u32).collect(),
            };
            let sim = build_similarity(&gt, latent.0, latent.1, SimilarityMode::ClassMajority)?;
            Ok(Prepared { sample: s, sim })
        })
        .collect()
}

/// Held-out pixel accuracy and mIoU.
pub fn evaluate(model: &ToyModel, samples: &[SyntheticSample]) -> ToyResult<(f64, f64)> {
    let mut conf = Confusion::new(NUM_CLASSES);
    for s in samples {
        conf.add(&s.labels, &model.predict(&s.image)?);
    }
    Ok((conf.pixel_accuracy(), conf.miou()))
}

fn write_checkpoint(dir: &Path, model: &ToyModel, epoch: usize) -> ToyResult<()> {
    let ck = dir.join("checkpoints").join(format!("epoch_{epoch:03}"));
    fs::create_dir_all(&ck)?;
    let layers = [
        ("enc1", &model.enc1.weight, &model.enc1.bias),
        ("enc2", &model.enc2.weight, &model.enc2.bias),
        ("dec1", &model.dec1.weight, &model.dec1.bias),
        ("dec2", &model.dec2.weight, &model.dec2.bias),
    ];
    let mut files = serde_json::Map::new();
    for (name, w, b) in layers {
        let wf = format!("{name}.weight.lgaf");
        let bf = format!("{name}.bias.lgaf");
        write_feature_map(
            ck.join(&wf),
            &FeatureMap::new(1, 1, w.len(), w.to_vec())?,
            DType::F64,
        )?;
        write_feature_map(
            ck.join(&bf),
            &FeatureMap::new(1, 1, b.len(), b.to_vec())?,
            DType::F64,
        )?;
        files.insert(name.into(), serde_json::json!({ "weight": wf, "bias": bf }));
    }
    let mut extra = serde_json::Map::new();
    extra.insert("epoch".into(), epoch.into());
    extra.insert("backbone".into(), serde_json::Value::Object(files.clone()));
    extra.insert("model".into(), serde_json::to_value(model.config)?);
    match &model.lga {
        Some(p) => {
            save_params(&ck, p, extra)?;
        }
        None => {
            // Without an LGA module only the backbone is stored.
            fs::write(
                ck.join("backbone.json"),
                serde_json::to_string_pretty(&extra)?,
            )?;
        }
    }
    Ok(())
}

fn diverged(
    outputs: &TrainOutputs,
    epoch: usize,
    step: usize,
    what: &str,
    cfg: &TrainConfig,
) -> ToyError {
    let dump = outputs
        .dir
        .clone()
        .unwrap_or_else(std::env::temp_dir)
        .join("divergence_dump.json");
    let body = serde_json::json!({ "epoch": epoch, "step": step, "what": what, "config": cfg });
    let _ = fs::write(
        &dump,
        serde_json::to_string_pretty(&body).unwrap_or_default(),
    );
    ToyError::Diverged {
        epoch,
        step,
        what: what.to_string(),
        dump,
    }
}

/// Dataset seeds `(train, test)` used by [`train`] for a run seed.
pub fn dataset_seeds(seed: u64) -> (u64, u64) {
    (
        seed.wrapping_mul(2).wrapping_add(1),
        seed.wrapping_mul(2).wrapping_add(2),
    )
}

/// Train on freshly generated data and evaluate on a held-out split after
/// every epoch.
pub fn train(cfg: &TrainConfig, outputs: &TrainOutputs) -> ToyResult<TrainOutcome> {
    cfg.validate()?;
    let (train_seed, test_seed) = dataset_seeds(cfg.seed);
    let train_data = generate_dataset(cfg.train_samples, &cfg.data, train_seed)?;
    let test_data = generate_dataset(cfg.test_samples, &cfg.data, test_seed)?;
    train_on(cfg, train_data, &test_data, outputs)
}

pub fn train_on(
    cfg: &TrainConfig,
    train_data: Vec<SyntheticSample>,
    test_data: &[SyntheticSample],
    outputs: &TrainOutputs,
) -> ToyResult<TrainOutcome> {
    cfg.validate()?;
    let latent = (cfg.data.height / 4, cfg.data.width / 4);
    let prepared = prepare(train_data, latent)?;
    let mut model = ToyModel::new(cfg.model, cfg.seed)?;
    let mut opt = Adam::new(cfg.adam);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(7);
    let opts = LossOptions {
        divergence: cfg.divergence,
        ..LossOptions::default()
    };
    if let Some(dir) = &outputs.dir {
        fs::create_dir_all(dir)?;
    }

    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut order_rng);
        let (mut task_sum, mut con_sum) = (0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Option<ModelGrads> = None;
            for &i in batch {
                let p = &prepared[i];
                let pairs;
                let contrastive = if cfg.uses_contrastive() {
                    pairs = PairBatch::sample(&p.sim, cfg.pairs, pair_seed(cfg.seed, epoch, i))?;
                    Some((&p.sim, &pairs, opts, cfg.lambda))
                } else {
                    None
                };
                let (loss, grads) =
                    match model.loss_and_grads(&p.sample.image, &p.sample.labels, contrastive) {
                        Err(ToyError::Core(LgaError::NonFinite(what))) => {
                            return Err(diverged(
                                outputs,
                                epoch,
                                step,
                                &format!("non-finite value in {what}"),
                                cfg,
                            ))
                        }
                        r => r?,
                    };
                if !loss.task.is_finite() || !loss.contrastive.is_finite() || !grads.is_finite() {
                    return Err(diverged(
                        outputs,
                        epoch,
                        step,
                        "non-finite loss or gradient",
                        cfg,
                    ));
                }
                task_sum += loss.task;
                con_sum += loss.contrastive;
                match &mut acc {
                    Some(a) => a.accumulate(&grads),
                    None => acc = Some(grads),
                }
            }
            let mut g = acc.expect("batches are never empty");
            g.scale(1.0 / batch.len() as f64);
            opt.step(lr, &mut model.slots(&g));
            step += 1;
        }
        let (pixel_accuracy, miou) = evaluate(&model, test_data)?;
        let n = prepared.len() as f64;
        history.push(EpochMetrics {
            epoch,
            lr,
            task_loss: task_sum / n,
            contrastive_loss: con_sum / n,
            pixel_accuracy,
            miou,
        });
        if let Some(dir) = &outputs.dir {
            if outputs.checkpoints {
                write_checkpoint(dir, &model, epoch)?;
            }
            write_history(dir.join("metrics.csv"), &history)?;
        }
    }
    Ok(TrainOutcome { history, model })
}

/// Pair batches depend only on `(seed, epoch, sample)`, not on how many
/// random draws happened before.
fn pair_seed(seed: u64, epoch: usize, sample: usize) -> u64 {
    // The xor keeps these streams apart from the shuffle generator.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5041_4952);
    rng.set_stream(((epoch as u64) << 32) | sample as u64);
    rng.gen()
}

pub fn write_history(path: impl AsRef<Path>, history: &[EpochMetrics]) -> ToyResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in history {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            lr_decay_epoch: 1,
            batch_size: 2,
            train_samples: 4,
            test_samples: 2,
            pairs: 32,
            data: DatasetConfig {
                height: 16,
                width: 16,
                cue_radius: 3,
                objects: 1,
                ..DatasetConfig::default()
            },
            model: ModelConfig {
                enc_channels: 4,
                latent_channels: 8,
                lga: true,
                lga_channels: 4,
                layers: 2,
                groups: 2,
                dec_channels: 4,
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn deterministic_histories() {
        let a = train(&tiny(), &TrainOutputs::default()).unwrap();
        let b = train(&tiny(), &TrainOutputs::default()).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let cfg = TrainConfig { lr: 0.0, ..tiny() };
        let out = train(&cfg, &TrainOutputs::default()).unwrap();
        assert_eq!(out.model, ToyModel::new(cfg.model, cfg.seed).unwrap());
        assert_eq!(out.history[0].miou, out.history[1].miou);
        assert_eq!(out.history[0].pixel_accuracy, out.history[1].pixel_accuracy);
    }

    #[test]
    fn writes_metrics_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let outputs = TrainOutputs {
            dir: Some(dir.path().to_path_buf()),
            checkpoints: true,
        };
        let out = train(&tiny(), &outputs).unwrap();
        let text = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "epoch,lr,task_loss,contrastive_loss,pixel_accuracy,miou"
        );
        assert_eq!(text.lines().count(), 3);
        let (p, m) =
            lga_core::checkpoint::load_params(dir.path().join("checkpoints/epoch_001")).unwrap();
        assert_eq!(Some(p), out.model.lga);
        assert_eq!(m.extra["epoch"], 1);
        assert!(out.history[0].contrastive_loss > 0.0);
    }

    #[test]
    fn one_epoch_on_four_samples_is_quick() {
        let cfg = TrainConfig {
            epochs: 1,
            train_samples: 4,
            test_samples: 4,
            data: DatasetConfig::default(),
            model: ModelConfig::default(),
            ..TrainConfig::default()
        };
        let t = std::time::Instant::now();
        train(&cfg, &TrainOutputs::default()).unwrap();
        assert!(t.elapsed().as_secs() < 60);
    }
}
