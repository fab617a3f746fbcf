//! Encoder, optional LGA, decoder.
//!
//! ```text
//! image (H x W x 3)
//!   -> 2x2/2 conv + ReLU            H/2 x W/2 x enc_channels
//!   -> 2x2/2 conv + ReLU  = F_in    H/4 x W/4 x latent_channels
//!   -> LGA (skipped when layers = 0), F_cat = [F_in, F_out]
//!   -> 2x2/2 deconv + ReLU          H/2 x W/2 x dec_channels
//!   -> 2x2/2 deconv       = logits  H x W x classes
//! ```

use lga_core::lga::{
    lga_backward, lga_forward, LayerActivation, LgaCache, LgaConfig, LgaParams, LgaUpstream,
};
use lga_core::loss::{lga_contrastive_loss, LossOptions, PairBatch, PatchSimilarity};
use lga_core::tensor::{GroupedLinear, GroupedLinearGrad};
use lga_core::FeatureMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::NUM_CLASSES;
use crate::error::{ToyError, ToyResult};
use crate::layers::{relu, relu_backward, LayerGrad, PatchConv, PatchDeconv};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub enc_channels: usize,
    pub latent_channels: usize,
    /// `false` is the no-LGA control: the latent map goes straight to the
    /// decoder whatever `layers` says.
    pub lga: bool,
    pub lga_channels: usize,
    /// `0` also removes the LGA module entirely.
    pub layers: usize,
    pub groups: usize,
    pub dec_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            enc_channels: 16,
            latent_channels: 32,
            lga: true,
            lga_channels: 16,
            layers: 4,
            groups: 2,
            dec_channels: 16,
        }
    }
}

impl ModelConfig {
    pub fn lga_config(&self) -> Option<LgaConfig> {
        (self.lga && self.layers > 0).then(|| LgaConfig {
            in_channels: self.latent_channels,
            lga_channels: self.lga_channels,
            layers: self.layers,
            groups: self.groups,
            reducer: true,
            hidden_activation: LayerActivation::Relu,
            output_activation: LayerActivation::Identity,
            bias: false,
            ..LgaConfig::default()
        })
    }

    pub fn validate(&self) -> ToyResult<()> {
        if [self.enc_channels, self.latent_channels, self.dec_channels].contains(&0) {
            return Err(ToyError::Config("channel counts must be positive".into()));
        }
        if let Some(c) = self.lga_config() {
            c.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub config: ModelConfig,
    pub enc1: PatchConv,
    pub enc2: PatchConv,
    pub lga: Option<LgaParams>,
    pub dec1: PatchDeconv,
    pub dec2: PatchDeconv,
}

#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub enc1: LayerGrad,
    pub enc2: LayerGrad,
    pub lga: Option<Vec<GroupedLinearGrad>>,
    pub dec1: LayerGrad,
    pub dec2: LayerGrad,
}

impl ModelGrads {
    pub fn accumulate(&mut self, other: &ModelGrads) {
        self.enc1.accumulate(&other.enc1);
        self.enc2.accumulate(&other.enc2);
        self.dec1.accumulate(&other.dec1);
        self.dec2.accumulate(&other.dec2);
        if let (Some(a), Some(b)) = (&mut self.lga, &other.lga) {
            for (x, y) in a.iter_mut().zip(b) {
                x.accumulate(y);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        let scale = |v: &mut Vec<f64>| v.iter_mut().for_each(|x| *x *= s);
        for g in [
            &mut self.enc1,
            &mut self.enc2,
            &mut self.dec1,
            &mut self.dec2,
        ] {
            scale(&mut g.weight);
            scale(&mut g.bias);
        }
        for g in self.lga.iter_mut().flatten() {
            scale(&mut g.weight);
            if let Some(b) = &mut g.bias {
                scale(b);
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        let ok = |v: &[f64]| v.iter().all(|x| x.is_finite());
        [&self.enc1, &self.enc2, &self.dec1, &self.dec2]
            .iter()
            .all(|g| ok(&g.weight) && ok(&g.bias))
            && self
                .lga
                .iter()
                .flatten()
                .all(|g| ok(&g.weight) && g.bias.as_deref().is_none_or(ok))
    }
}

/// Everything the backward pass needs from one forward.
pub struct ForwardState {
    pub e1: FeatureMap,
    pub f_in: FeatureMap,
    pub f_out: Option<FeatureMap>,
    f_cat: FeatureMap,
    cache: Option<LgaCache>,
    pub d1: FeatureMap,
    pub logits: FeatureMap,
}

/// Per-sample losses.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SampleLoss {
    pub task: f64,
    pub contrastive: f64,
}

impl ToyModel {
    /// Backbone, LGA and extra decoder rows draw from separate ChaCha
    /// streams of the same seed, so runs that differ only in the LGA
    /// settings share their encoder initialization.
    pub fn new(config: ModelConfig, seed: u64) -> ToyResult<Self> {
        config.validate()?;
        let mut backbone = ChaCha8Rng::seed_from_u64(seed);
        backbone.set_stream(0);
        let mut lga_rng = ChaCha8Rng::seed_from_u64(seed);
        lga_rng.set_stream(1);
        let mut extra = ChaCha8Rng::seed_from_u64(seed);
        extra.set_stream(2);

        let enc1 = PatchConv::random(&mut backbone, 3, config.enc_channels);
        let enc2 = PatchConv::random(&mut backbone, config.enc_channels, config.latent_channels);
        let mut lga = config
            .lga_config()
            .map(|c| LgaParams::random(&mut lga_rng, c))
            .transpose()?;
        if let Some(p) = &mut lga {
            rescale_lga_init(p);
        }
        let lga_out = if lga.is_some() {
            config.lga_channels
        } else {
            0
        };
        let dec1 = PatchDeconv::random_split(
            &mut backbone,
            &mut extra,
            config.latent_channels,
            lga_out,
            config.dec_channels,
        );
        let dec2 = PatchDeconv::random_split(
            &mut backbone,
            &mut extra,
            config.dec_channels,
            0,
            NUM_CLASSES,
        );
        Ok(Self {
            config,
            enc1,
            enc2,
            lga,
            dec1,
            dec2,
        })
    }

    pub fn param_count(&self) -> usize {
        let layer = |w: usize, b: usize| w + b;
        layer(self.enc1.weight.len(), self.enc1.bias.len())
            + layer(self.enc2.weight.len(), self.enc2.bias.len())
            + layer(self.dec1.weight.len(), self.dec1.bias.len())
            + layer(self.dec2.weight.len(), self.dec2.bias.len())
            + self.lga.as_ref().map_or(0, LgaParams::param_count)
    }

    pub fn forward(&self, image: &FeatureMap, keep: bool) -> ToyResult<ForwardState> {
        let e1 = relu(&self.enc1.forward(image)?);
        let f_in = relu(&self.enc2.forward(&e1)?);
        let (f_out, f_cat, cache) = match &self.lga {
            Some(p) => {
                let out = lga_forward(&f_in, p, keep)?;
                (Some(out.f_out), out.f_cat, out.cache)
            }
            None => (None, f_in.clone(), None),
        };
        let d1 = relu(&self.dec1.forward(&f_cat)?);
        let logits = self.dec2.forward(&d1)?;
        Ok(ForwardState {
            e1,
            f_in,
            f_out,
            f_cat,
            cache,
            d1,
            logits,
        })
    }

    pub fn predict(&self, image: &FeatureMap) -> ToyResult<Vec<u8>> {
        Ok(argmax(&self.forward(image, false)?.logits))
    }

    /// Forward, losses and gradients for one sample. The contrastive term is
    /// added with weight `lambda` when the LGA module is present.
    pub fn loss_and_grads(
        &self,
        image: &FeatureMap,
        labels: &[u8],
        contrastive: Option<(&PatchSimilarity, &PairBatch, LossOptions, f64)>,
    ) -> ToyResult<(SampleLoss, ModelGrads)> {
        let st = self.forward(image, true)?;
        let (task, grad_logits) = cross_entropy(&st.logits, labels);
        let mut losses = SampleLoss {
            task,
            contrastive: 0.0,
        };

        let (mut grad_d1, dec2) = self.dec2.backward(&st.d1, &grad_logits);
        relu_backward(&st.d1, &mut grad_d1);
        let (grad_cat, dec1) = self.dec1.backward(&st.f_cat, &grad_d1);

        let (mut grad_f_in, lga) = match (&self.lga, &st.f_out) {
            (Some(p), Some(f_out)) => {
                let mut up_out = None;
                if let Some((sim, pairs, opts, lambda)) = contrastive {
                    if lambda != 0.0 {
                        let (lc, g) = lga_contrastive_loss(&st.f_in, f_out, sim, pairs, opts)?;
                        losses.contrastive = lc;
                        up_out = Some(g.map(|v| lambda * v));
                    }
                }
                let grads = lga_backward(
                    &LgaUpstream {
                        f_out: up_out,
                        f_cat: Some(grad_cat),
                    },
                    st.cache.as_ref(),
                    p,
                )?;
                let tensors = grads.tensors().into_iter().cloned().collect();
                (grads.f_in, Some(tensors))
            }
            _ => (grad_cat, None),
        };
        relu_backward(&st.f_in, &mut grad_f_in);
        let (mut grad_e1, enc2) = self.enc2.backward(&st.e1, &grad_f_in);
        relu_backward(&st.e1, &mut grad_e1);
        let (_, enc1) = self.enc1.backward(image, &grad_e1);
        Ok((
            losses,
            ModelGrads {
                enc1,
                enc2,
                lga,
                dec1,
                dec2,
            },
        ))
    }

    /// `(parameter, gradient)` slots in a fixed order for the optimizer.
    pub fn slots<'a>(&'a mut self, g: &'a ModelGrads) -> Vec<(&'a mut [f64], &'a [f64])> {
        let mut out: Vec<(&mut [f64], &[f64])> = vec![
            (&mut self.enc1.weight, &g.enc1.weight),
            (&mut self.enc1.bias, &g.enc1.bias),
            (&mut self.enc2.weight, &g.enc2.weight),
            (&mut self.enc2.bias, &g.enc2.bias),
            (&mut self.dec1.weight, &g.dec1.weight),
            (&mut self.dec1.bias, &g.dec1.bias),
            (&mut self.dec2.weight, &g.dec2.weight),
            (&mut self.dec2.bias, &g.dec2.bias),
        ];
        if let (Some(p), Some(gs)) = (&mut self.lga, &g.lga) {
            for (t, gt) in p.tensors_mut().into_iter().zip(gs) {
                let (w, b) = t.params_mut();
                out.push((w, &gt.weight));
                if let (Some(b), Some(gb)) = (b, &gt.bias) {
                    out.push((b, gb));
                }
            }
        }
        out
    }
}

/// The core initializer draws from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`,
/// which shrinks the activation variance threefold per layer. The toy
/// network rescales to He bounds for layers followed by a ReLU and LeCun
/// bounds for the last one so `f_out` starts on the scale of `f_in`.
fn rescale_lga_init(p: &mut LgaParams) {
    let scale = |t: &mut GroupedLinear, gain: f64| {
        let (w, b) = t.params_mut();
        w.iter_mut()
            .chain(b.into_iter().flatten())
            .for_each(|v| *v *= gain);
    };
    if let Some(r) = &mut p.reducer {
        scale(r, 3f64.sqrt());
    }
    let last = p.transforms.len().saturating_sub(1);
    for (i, t) in p.transforms.iter_mut().enumerate() {
        scale(t, if i < last { 6f64.sqrt() } else { 3f64.sqrt() });
    }
}

/// Mean softmax cross-entropy over pixels and its gradient.
pub fn cross_entropy(logits: &FeatureMap, labels: &[u8]) -> (f64, FeatureMap) {
    let n = logits.num_nodes();
    let mut grad = FeatureMap::zeros(logits.height(), logits.width(), logits.channels());
    let mut loss = 0.0;
    for (i, &label) in labels.iter().enumerate().take(n) {
        let z = logits.node(i);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - z[label as usize];
        for (k, g) in grad.node_mut(i).iter_mut().enumerate() {
            let p = (z[k] - lse).exp();
            *g = (p - if k == label as usize { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    (loss / n as f64, grad)
}

pub fn argmax(logits: &FeatureMap) -> Vec<u8> {
    (0..logits.num_nodes())
        .map(|i| {
            let z = logits.node(i);
            let mut best = 0;
            for k in 1..z.len() {
                if z[k] > z[best] {
                    best = k;
                }
            }
            best as u8
        })
        .collect()
}
