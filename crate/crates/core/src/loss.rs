//! Pairwise contrastive loss on LGA input/output node distributions.
//!
//! For a sampled node pair `(i, j)` with input divergence `U`, output
//! divergence `V` and ground-truth similarity `C`:
//!
//! ```text
//! l_ij = C * ln(V^2 / (U + d) + 1) + (1 - C) * ln((U + d) / (V^2 + d) + 1)
//! ```
//!
//! `d` keeps both ratios finite. `U` depends only on `F_in` and is held
//! constant, so gradients flow into `F_out` alone.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, LgaError, Result};
use crate::tensor::FeatureMap;

pub const DEFAULT_DELTA: f64 = 1e-8;
pub const DEFAULT_SSIM_THRESHOLD: f64 = 0.8;
pub const DEFAULT_PAIRS: usize = 256;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Divergence {
    #[default]
    Mse,
    /// KL(softmax(a) || softmax(b)).
    Kl,
}

impl std::str::FromStr for Divergence {
    type Err = LgaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(Divergence::Mse),
            "kl" => Ok(Divergence::Kl),
            other => Err(LgaError::Config(format!("unknown divergence '{other}'"))),
        }
    }
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(shape_err("node_divergence", a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(shape_err("node_divergence", "non-empty vectors", 0));
    }
    if !a.iter().chain(b).all(|v| v.is_finite()) {
        return Err(LgaError::NonFinite("node_divergence"));
    }
    Ok(())
}

pub fn node_divergence(a: &[f64], b: &[f64], kind: Divergence) -> Result<f64> {
    check_pair(a, b)?;
    Ok(match kind {
        Divergence::Mse => {
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
        }
        Divergence::Kl => {
            let p = softmax(a);
            let q = softmax(b);
            p.iter()
                .zip(&q)
                .map(|(&pk, &qk)| if pk > 0.0 { pk * (pk / qk).ln() } else { 0.0 })
                .sum::<f64>()
                .max(0.0)
        }
    })
}

/// Divergence together with its gradients with respect to `a` and `b`.
pub fn node_divergence_grad(
    a: &[f64],
    b: &[f64],
    kind: Divergence,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    check_pair(a, b)?;
    let n = a.len() as f64;
    match kind {
        Divergence::Mse => {
            let ga: Vec<f64> = a.iter().zip(b).map(|(x, y)| 2.0 * (x - y) / n).collect();
            let gb = ga.iter().map(|g| -g).collect();
            Ok((node_divergence(a, b, kind)?, ga, gb))
        }
        Divergence::Kl => {
            let p = softmax(a);
            let q = softmax(b);
            let logs: Vec<f64> = p.iter().zip(&q).map(|(&pk, &qk)| (pk / qk).ln()).collect();
            let d: f64 = p.iter().zip(&logs).map(|(pk, l)| pk * l).sum();
            let ga = p.iter().zip(&logs).map(|(pk, l)| pk * (l - d)).collect();
            let gb = p.iter().zip(&q).map(|(pk, qk)| qk - pk).collect();
            Ok((d.max(0.0), ga, gb))
        }
    }
}

/// A rectangular single- or multi-channel image patch, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

/// Whole-patch SSIM (no sliding window), dynamic range 1, averaged over
/// channels.
pub fn ssim(a: &Patch, b: &Patch) -> Result<f64> {
    if (a.height, a.width, a.channels) != (b.height, b.width, b.channels) {
        return Err(shape_err(
            "ssim",
            format!("{}x{}x{}", a.height, a.width, a.channels),
            format!("{}x{}x{}", b.height, b.width, b.channels),
        ));
    }
    if a.data.len() != a.height * a.width * a.channels
        || b.data.len() != a.data.len()
        || a.data.is_empty()
    {
        return Err(shape_err(
            "ssim",
            a.height * a.width * a.channels,
            a.data.len(),
        ));
    }
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let n = (a.height * a.width) as f64;
    let mut total = 0.0;
    for ch in 0..a.channels {
        let xs = a.data.iter().skip(ch).step_by(a.channels);
        let ys = b.data.iter().skip(ch).step_by(a.channels);
        let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&x, &y) in xs.zip(ys) {
            sx += x;
            sy += y;
            sxx += x * x;
            syy += y * y;
            sxy += x * y;
        }
        let (mx, my) = (sx / n, sy / n);
        let vx = (sxx / n - mx * mx).max(0.0);
        let vy = (syy / n - my * my).max(0.0);
        let cov = sxy / n - mx * my;
        total +=
            ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
    Ok(total / a.channels as f64)
}

/// Ground truth at full resolution.
#[derive(Debug, Clone, PartialEq)]
pub enum GroundTruth {
    Labels {
        height: usize,
        width: usize,
        labels: Vec<u32>,
    },
    Image {
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f64>,
    },
}

impl GroundTruth {
    fn dims(&self) -> (usize, usize) {
        match self {
            GroundTruth::Labels { height, width, .. }
            | GroundTruth::Image { height, width, .. } => (*height, *width),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum SimilarityMode {
    ClassMajority,
    SsimThreshold { tau: f64 },
}

#[derive(Debug, Clone, PartialEq)]
enum NodeContent {
    Labels(Vec<u32>),
    Patches { patches: Vec<Patch>, tau: f64 },
}

/// Pairwise similarity predicate over the nodes of an `H x W` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSimilarity {
    height: usize,
    width: usize,
    content: NodeContent,
}

impl PatchSimilarity {
    pub fn from_labels(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(shape_err(
                "PatchSimilarity::from_labels",
                height * width,
                labels.len(),
            ));
        }
        Ok(Self {
            height,
            width,
            content: NodeContent::Labels(labels),
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.height * self.width
    }

    pub fn node_labels(&self) -> Option<&[u32]> {
        match &self.content {
            NodeContent::Labels(l) => Some(l),
            NodeContent::Patches { .. } => None,
        }
    }

    /// `C(i, j)`; always true on the diagonal.
    pub fn similar(&self, i: usize, j: usize) -> bool {
        if i == j {
            return true;
        }
        match &self.content {
            NodeContent::Labels(l) => l[i] == l[j],
            NodeContent::Patches { patches, tau } => {
                // Shapes are uniform by construction.
                ssim(&patches[i], &patches[j])
                    .map(|s| s > *tau)
                    .unwrap_or(false)
            }
        }
    }

    /// JSON dump: per-node labels in class mode, the full `C` matrix on
    /// request (at most 1024 nodes).
    pub fn to_json(&self, with_matrix: bool) -> Result<serde_json::Value> {
        let n = self.num_nodes();
        let mut v = serde_json::json!({ "height": self.height, "width": self.width });
        match &self.content {
            NodeContent::Labels(l) => {
                v["mode"] = "class_majority".into();
                v["labels"] = serde_json::json!(l);
            }
            NodeContent::Patches { tau, .. } => {
                v["mode"] = "ssim_threshold".into();
                v["tau"] = serde_json::json!(tau);
            }
        }
        if with_matrix {
            if n > 1024 {
                return Err(LgaError::TooLarge {
                    what: "similarity matrix dump",
                    n,
                    limit: 1024,
                });
            }
            let m: Vec<Vec<u8>> = (0..n)
                .map(|i| (0..n).map(|j| self.similar(i, j) as u8).collect())
                .collect();
            v["pairs"] = serde_json::json!(m);
        }
        Ok(v)
    }
}

/// Split the ground truth into `H x W` equal patches, one per node.
pub fn build_similarity(
    gt: &GroundTruth,
    height: usize,
    width: usize,
    mode: SimilarityMode,
) -> Result<PatchSimilarity> {
    let (gh, gw) = gt.dims();
    if height == 0 || width == 0 || gh % height != 0 || gw % width != 0 {
        return Err(LgaError::Config(format!(
            "ground truth {gh}x{gw} is not divisible into {height}x{width} equal patches"
        )));
    }
    let (ph, pw) = (gh / height, gw / width);
    let content = match (gt, mode) {
        (GroundTruth::Labels { labels, .. }, SimilarityMode::ClassMajority) => {
            if labels.len() != gh * gw {
                return Err(shape_err("build_similarity", gh * gw, labels.len()));
            }
            let mut node_labels = Vec::with_capacity(height * width);
            let mut counts: Vec<usize> = Vec::new();
            for y in 0..height {
                for x in 0..width {
                    counts.iter_mut().for_each(|c| *c = 0);
                    for py in y * ph..(y + 1) * ph {
                        for px in x * pw..(x + 1) * pw {
                            let l = labels[py * gw + px] as usize;
                            if l >= counts.len() {
                                counts.resize(l + 1, 0);
                            }
                            counts[l] += 1;
                        }
                    }
                    // Ties go to the smallest class id: max_by_key keeps the
                    // last maximum, so scan in reverse.
                    let best = counts
                        .iter()
                        .enumerate()
                        .rev()
                        .max_by_key(|(_, &c)| c)
                        .map_or(0, |(l, _)| l);
                    node_labels.push(best as u32);
                }
            }
            NodeContent::Labels(node_labels)
        }
        (GroundTruth::Image { channels, data, .. }, SimilarityMode::SsimThreshold { tau }) => {
            let c = *channels;
            if data.len() != gh * gw * c {
                return Err(shape_err("build_similarity", gh * gw * c, data.len()));
            }
            let mut patches = Vec::with_capacity(height * width);
            for y in 0..height {
                for x in 0..width {
                    let mut p = Vec::with_capacity(ph * pw * c);
                    for py in y * ph..(y + 1) * ph {
                        let start = (py * gw + x * pw) * c;
                        p.extend_from_slice(&data[start..start + pw * c]);
                    }
                    patches.push(Patch {
                        height: ph,
                        width: pw,
                        channels: c,
                        data: p,
                    });
                }
            }
            NodeContent::Patches { patches, tau }
        }
        _ => {
            return Err(LgaError::Config(
                "class mode needs a label map and SSIM mode needs an image".into(),
            ))
        }
    };
    Ok(PatchSimilarity {
        height,
        width,
        content,
    })
}

/// Node pairs for one loss evaluation, canonical `i < j`, no repeats.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairBatch {
    pub pairs: Vec<(usize, usize)>,
    pub seed: u64,
}

impl PairBatch {
    /// Draw up to `k` distinct pairs uniformly. When both similar and
    /// dissimilar pairs exist, at least a quarter of the batch comes from each
    /// (or all of that kind, if fewer exist).
    pub fn sample(sim: &PatchSimilarity, k: usize, seed: u64) -> Result<Self> {
        let n = sim.num_nodes();
        if n < 2 || k == 0 {
            return Err(LgaError::EmptyPairs);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let total = n * (n - 1) / 2;
        if k >= total || total <= 4 * k {
            // Small graph: enumerate, stratify exactly.
            let mut pos = Vec::new();
            let mut neg = Vec::new();
            for i in 0..n {
                for j in i + 1..n {
                    if sim.similar(i, j) {
                        pos.push((i, j));
                    } else {
                        neg.push((i, j));
                    }
                }
            }
            pos.shuffle(&mut rng);
            neg.shuffle(&mut rng);
            let pairs = stratified_take(pos, neg, k, &mut rng);
            return Ok(Self { pairs, seed });
        }

        let quota = k.div_ceil(4);
        let mut seen = HashSet::with_capacity(2 * k);
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        let mut rest = Vec::new();
        // Rejection sampling; bounded so degenerate label layouts terminate.
        let max_draws = 64 * k;
        for _ in 0..max_draws {
            if pos.len() >= quota && neg.len() >= quota && pos.len() + neg.len() + rest.len() >= k {
                break;
            }
            let i = rng.gen_range(0..n);
            let j = rng.gen_range(0..n);
            if i == j {
                continue;
            }
            let pair = (i.min(j), i.max(j));
            if !seen.insert(pair) {
                continue;
            }
            let s = sim.similar(pair.0, pair.1);
            if s && pos.len() < quota {
                pos.push(pair);
            } else if !s && neg.len() < quota {
                neg.push(pair);
            } else {
                rest.push(pair);
            }
        }
        let mut pairs = pos;
        pairs.extend(neg);
        let room = k.saturating_sub(pairs.len());
        pairs.extend(rest.into_iter().take(room));
        pairs.shuffle(&mut rng);
        Ok(Self { pairs, seed })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn stratified_take(
    pos: Vec<(usize, usize)>,
    neg: Vec<(usize, usize)>,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize)> {
    let quota = k.div_ceil(4);
    let take_pos = pos.len().min(quota);
    let take_neg = neg.len().min(quota);
    let mut out: Vec<_> = pos[..take_pos].to_vec();
    out.extend_from_slice(&neg[..take_neg]);
    let mut rest: Vec<_> = pos[take_pos..]
        .iter()
        .chain(&neg[take_neg..])
        .copied()
        .collect();
    rest.shuffle(rng);
    let room = k.saturating_sub(out.len());
    out.extend(rest.into_iter().take(room));
    out.shuffle(rng);
    out
}

/// Contribution of one pair given its divergences.
pub fn pair_loss(similar: bool, u: f64, v: f64, delta: f64) -> f64 {
    let v2 = v * v;
    if similar {
        (v2 / (u + delta)).ln_1p()
    } else {
        ((u + delta) / (v2 + delta)).ln_1p()
    }
}

/// `d pair_loss / d v`.
pub fn pair_loss_dv(similar: bool, u: f64, v: f64, delta: f64) -> f64 {
    let v2 = v * v;
    if similar {
        2.0 * v / (v2 + u + delta)
    } else {
        let denom = v2 + delta;
        let r = (u + delta) / denom;
        -(u + delta) * 2.0 * v / (denom * denom) / (r + 1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOptions {
    pub divergence: Divergence,
    pub delta: f64,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            divergence: Divergence::Mse,
            delta: DEFAULT_DELTA,
        }
    }
}

/// Mean pair loss over the batch and its gradient with respect to `f_out`.
pub fn lga_contrastive_loss(
    f_in: &FeatureMap,
    f_out: &FeatureMap,
    sim: &PatchSimilarity,
    pairs: &PairBatch,
    opts: LossOptions,
) -> Result<(f64, FeatureMap)> {
    if pairs.is_empty() {
        return Err(LgaError::EmptyPairs);
    }
    if f_in.height() != f_out.height() || f_in.width() != f_out.width() {
        return Err(shape_err(
            "lga_contrastive_loss",
            format!("{}x{} grid", f_in.height(), f_in.width()),
            format!("{}x{} grid", f_out.height(), f_out.width()),
        ));
    }
    if sim.num_nodes() != f_out.num_nodes() {
        return Err(shape_err(
            "lga_contrastive_loss similarity",
            f_out.num_nodes(),
            sim.num_nodes(),
        ));
    }
    let scale = 1.0 / pairs.len() as f64;
    let mut grad = FeatureMap::zeros(f_out.height(), f_out.width(), f_out.channels());
    let mut total = 0.0;
    for &(i, j) in &pairs.pairs {
        if i == j || i >= sim.num_nodes() || j >= sim.num_nodes() {
            return Err(LgaError::Config(format!("invalid pair ({i}, {j})")));
        }
        // KL is asymmetric; evaluating in canonical order keeps every pair's
        // contribution independent of how it was listed.
        let (i, j) = (i.min(j), i.max(j));
        let c = sim.similar(i, j);
        let u = node_divergence(f_in.node(i), f_in.node(j), opts.divergence)?;
        let (v, gi, gj) = node_divergence_grad(f_out.node(i), f_out.node(j), opts.divergence)?;
        total += pair_loss(c, u, v, opts.delta);
        let dv = pair_loss_dv(c, u, v, opts.delta) * scale;
        for (g, d) in grad.node_mut(i).iter_mut().zip(&gi) {
            *g += dv * d;
        }
        for (g, d) in grad.node_mut(j).iter_mut().zip(&gj) {
            *g += dv * d;
        }
    }
    let loss = total * scale;
    if !loss.is_finite() || !grad.is_finite() {
        return Err(LgaError::NonFinite("lga_contrastive_loss"));
    }
    Ok((loss, grad))
}
