//! Distant-cue segmentation samples.
//!
//! Each image holds square objects on a dark textured background. An
//! object's interior is the same gray for every class; only a thin colored
//! frame around it says which class it is (red frame for class 1, blue for
//! class 2). Pixels deeper than `cue_radius` inside a square therefore
//! cannot be classified from their own neighbourhood. With `cue_radius = 0`
//! the whole square is colored and the task becomes local.
//!
//! With two objects the image is split in half (vertically or horizontally,
//! at random) and one square is placed in each half, so objects never touch.
//! Their classes are drawn independently.

use std::fs;
use std::path::Path;

use lga_core::io::{read_feature_map, write_feature_map, DType};
use lga_core::FeatureMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ToyError, ToyResult};

pub const NUM_CLASSES: usize = 3;
pub const BACKGROUND: u8 = 0;

const CUE_COLORS: [[f64; 3]; 2] = [[0.9, 0.15, 0.1], [0.1, 0.2, 0.9]];
const INTERIOR_GRAY: f64 = 0.6;
const META_FILE: &str = "samples.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub height: usize,
    pub width: usize,
    /// Objects per image, 1 or 2.
    pub objects: usize,
    /// Minimum distance from an object center to its colored frame.
    pub cue_radius: usize,
    /// Frame thickness in pixels.
    pub cue_width: usize,
    /// Amplitude of the uniform pixel noise.
    pub noise: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            height: 48,
            width: 48,
            objects: 2,
            cue_radius: 6,
            cue_width: 2,
            noise: 0.05,
        }
    }
}

impl DatasetConfig {
    fn min_half(&self) -> usize {
        if self.cue_radius == 0 {
            4
        } else {
            self.cue_radius + self.cue_width
        }
    }

    /// Smallest side of the region one object is placed in.
    fn region_side(&self) -> usize {
        let side = self.height.min(self.width);
        if self.objects == 2 {
            side / 2
        } else {
            side
        }
    }

    pub fn validate(&self) -> ToyResult<()> {
        if self.height < 16 || self.width < 16 {
            return Err(ToyError::Config(format!(
                "images must be at least 16x16, got {}x{}",
                self.height, self.width
            )));
        }
        if !self.height.is_multiple_of(4) || !self.width.is_multiple_of(4) {
            return Err(ToyError::Config(
                "image sides must be multiples of 4".into(),
            ));
        }
        if !(1..=2).contains(&self.objects) {
            return Err(ToyError::Config(format!(
                "objects must be 1 or 2, got {}",
                self.objects
            )));
        }
        if self.cue_width == 0 {
            return Err(ToyError::Config("cue_width must be positive".into()));
        }
        if 2 * self.min_half() + 2 > self.region_side() {
            return Err(ToyError::Config(format!(
                "cue_radius {} with width {} does not fit {} object(s) in a {}x{} image",
                self.cue_radius, self.cue_width, self.objects, self.height, self.width
            )));
        }
        if !(0.0..=0.2).contains(&self.noise) {
            return Err(ToyError::Config("noise must be in [0, 0.2]".into()));
        }
        Ok(())
    }
}

/// Axis-aligned square object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectBox {
    pub top: usize,
    pub left: usize,
    pub side: usize,
    pub class: u8,
}

impl ObjectBox {
    fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.side && x >= self.left && x < self.left + self.side
    }

    /// Distance to the nearest edge of the square, for a pixel inside it.
    pub fn ring(&self, y: usize, x: usize) -> usize {
        let (b, r) = (self.top + self.side - 1, self.left + self.side - 1);
        (y - self.top).min(b - y).min(x - self.left).min(r - x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    /// `H x W x 3`, values in `[0, 1]`.
    pub image: FeatureMap,
    /// Row-major class ids.
    pub labels: Vec<u8>,
    pub objects: Vec<ObjectBox>,
    pub seed: u64,
}

fn place(
    rng: &mut ChaCha8Rng,
    cfg: &DatasetConfig,
    region: (usize, usize, usize, usize),
) -> ObjectBox {
    let (ry, rx, rh, rw) = region;
    let min_half = cfg.min_half();
    let max_half = (rh.min(rw) / 2 - 1).max(min_half);
    let half = rng.gen_range(min_half..=max_half.min(min_half + 4));
    let side = 2 * half;
    ObjectBox {
        top: ry + rng.gen_range(0..=rh - side),
        left: rx + rng.gen_range(0..=rw - side),
        side,
        class: rng.gen_range(1..=2),
    }
}

/// Generate one sample from its own seed. The configuration is assumed to
/// be valid; see [`DatasetConfig::validate`].
pub fn generate_sample(cfg: &DatasetConfig, seed: u64) -> SyntheticSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (cfg.height, cfg.width);
    let objects: Vec<ObjectBox> = if cfg.objects == 1 {
        vec![place(&mut rng, cfg, (0, 0, h, w))]
    } else if rng.gen::<bool>() {
        vec![
            place(&mut rng, cfg, (0, 0, h, w / 2)),
            place(&mut rng, cfg, (0, w / 2, h, w - w / 2)),
        ]
    } else {
        vec![
            place(&mut rng, cfg, (0, 0, h / 2, w)),
            place(&mut rng, cfg, (h / 2, 0, h - h / 2, w)),
        ]
    };

    let mut labels = vec![BACKGROUND; h * w];
    let image = FeatureMap::from_fn(h, w, 3, |y, x, c| {
        let base = match objects.iter().find(|o| o.contains(y, x)) {
            None => 0.15 + 0.1 * (((x / 3 + y / 5) % 3) as f64 / 2.0),
            Some(o) => {
                if c == 0 {
                    labels[y * w + x] = o.class;
                }
                if cfg.cue_radius == 0 || o.ring(y, x) < cfg.cue_width {
                    CUE_COLORS[o.class as usize - 1][c]
                } else {
                    INTERIOR_GRAY
                }
            }
        };
        (base + rng.gen_range(-cfg.noise..=cfg.noise)).clamp(0.0, 1.0)
    });
    SyntheticSample {
        image,
        labels,
        objects,
        seed,
    }
}

/// `n` samples; sample `i` uses a seed derived from `(seed, i)` so prefixes
/// of a dataset do not depend on its length.
pub fn generate_dataset(
    n: usize,
    cfg: &DatasetConfig,
    seed: u64,
) -> ToyResult<Vec<SyntheticSample>> {
    cfg.validate()?;
    if n == 0 {
        return Err(ToyError::Config("dataset size must be positive".into()));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| generate_sample(cfg, master.gen())).collect())
}

/// Fraction of objects belonging to each object class.
pub fn class_balance(samples: &[SyntheticSample]) -> [f64; 2] {
    let all: Vec<u8> = samples
        .iter()
        .flat_map(|s| s.objects.iter().map(|o| o.class))
        .collect();
    let ones = all.iter().filter(|&&c| c == 1).count() as f64;
    let n = all.len().max(1) as f64;
    [ones / n, (all.len() as f64 - ones) / n]
}

#[derive(Serialize, Deserialize)]
struct SampleMeta {
    seed: u64,
    objects: Vec<ObjectBox>,
}

/// Cache samples as `image_XXXXX.lgaf` (f32), `labels_XXXXX.lgaf` and a
/// `samples.json` index with seeds and object boxes.
pub fn save_dataset(dir: impl AsRef<Path>, samples: &[SyntheticSample]) -> ToyResult<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut meta = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        write_feature_map(dir.join(format!("image_{i:05}.lgaf")), &s.image, DType::F32)?;
        let (h, w) = (s.image.height(), s.image.width());
        let labels = FeatureMap::new(h, w, 1, s.labels.iter().map(|&l| l as f64).collect())?;
        write_feature_map(dir.join(format!("labels_{i:05}.lgaf")), &labels, DType::F32)?;
        meta.push(SampleMeta {
            seed: s.seed,
            objects: s.objects.clone(),
        });
    }
    fs::write(dir.join(META_FILE), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> ToyResult<Vec<SyntheticSample>> {
    let dir = dir.as_ref();
    let meta: Vec<SampleMeta> = serde_json::from_str(&fs::read_to_string(dir.join(META_FILE))?)?;
    meta.into_iter()
        .enumerate()
        .map(|(i, m)| {
            let image = read_feature_map(dir.join(format!("image_{i:05}.lgaf")))?;
            let labels = read_feature_map(dir.join(format!("labels_{i:05}.lgaf")))?
                .data()
                .iter()
                .map(|&v| v as u8)
                .collect();
            Ok(SyntheticSample {
                image,
                labels,
                objects: m.objects,
                seed: m.seed,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_data() {
        let cfg = DatasetConfig::default();
        let a = generate_dataset(20, &cfg, 5).unwrap();
        let b = generate_dataset(20, &cfg, 5).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(20, &cfg, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn interior_is_class_agnostic() {
        let cfg = DatasetConfig {
            noise: 0.0,
            ..DatasetConfig::default()
        };
        for seed in 0..30 {
            let s = generate_sample(&cfg, seed);
            let w = cfg.width;
            let mut object_pixels = 0;
            for o in &s.objects {
                let half = o.side / 2;
                let (cy, cx) = (o.top + half, o.left + half);
                for y in o.top..o.top + o.side {
                    for x in o.left..o.left + o.side {
                        object_pixels += 1;
                        assert_eq!(s.labels[y * w + x], o.class);
                        let px = s.image.node(y * w + x);
                        if o.ring(y, x) >= cfg.cue_width {
                            assert!(px.iter().all(|&v| v == INTERIOR_GRAY));
                        } else {
                            assert_eq!(px, &CUE_COLORS[o.class as usize - 1][..]);
                            // Distance from the center pixel pair to the frame.
                            let d = y
                                .abs_diff(cy)
                                .min(y.abs_diff(cy - 1))
                                .max(x.abs_diff(cx).min(x.abs_diff(cx - 1)));
                            assert!(d >= cfg.cue_radius, "cue at distance {d}");
                        }
                    }
                }
            }
            assert_eq!(
                object_pixels,
                s.labels.iter().filter(|&&l| l != BACKGROUND).count()
            );
        }
    }

    #[test]
    fn objects_do_not_overlap() {
        for seed in 0..50 {
            let s = generate_sample(&DatasetConfig::default(), seed);
            let [a, b] = [s.objects[0], s.objects[1]];
            let apart = a.top + a.side <= b.top
                || b.top + b.side <= a.top
                || a.left + a.side <= b.left
                || b.left + b.side <= a.left;
            assert!(apart, "{a:?} {b:?}");
        }
    }

    #[test]
    fn zero_radius_colors_whole_object() {
        let cfg = DatasetConfig {
            cue_radius: 0,
            noise: 0.0,
            ..DatasetConfig::default()
        };
        let s = generate_sample(&cfg, 3);
        for i in 0..s.labels.len() {
            if s.labels[i] != BACKGROUND {
                assert_eq!(s.image.node(i), &CUE_COLORS[s.labels[i] as usize - 1][..]);
            }
        }
    }

    #[test]
    fn balance_over_1000_samples() {
        for objects in [1, 2] {
            let cfg = DatasetConfig {
                objects,
                ..DatasetConfig::default()
            };
            let data = generate_dataset(1000, &cfg, 11).unwrap();
            let [a, b] = class_balance(&data);
            assert!(
                (0.4..=0.6).contains(&a) && (0.4..=0.6).contains(&b),
                "{a} {b}"
            );
        }
    }

    #[test]
    fn degenerate_sizes_rejected() {
        let small = DatasetConfig {
            height: 8,
            width: 8,
            ..DatasetConfig::default()
        };
        assert!(generate_dataset(1, &small, 0).is_err());
        let tight = DatasetConfig {
            cue_radius: 10,
            ..DatasetConfig::default()
        };
        assert!(generate_dataset(1, &tight, 0).is_err());
        let one = DatasetConfig {
            objects: 1,
            ..tight
        };
        assert!(generate_dataset(1, &one, 0).is_ok());
        assert!(generate_dataset(
            1,
            &DatasetConfig {
                objects: 3,
                ..DatasetConfig::default()
            },
            0
        )
        .is_err());
        assert!(generate_dataset(0, &DatasetConfig::default(), 0).is_err());
    }

    #[test]
    fn disk_roundtrip() {
        let cfg = DatasetConfig::default();
        let data = generate_dataset(3, &cfg, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &data).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in data.iter().zip(&back) {
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.objects, b.objects);
            assert_eq!(a.seed, b.seed);
            assert!(a.image.max_abs_diff(&b.image).unwrap() < 1e-6);
        }
    }
}
