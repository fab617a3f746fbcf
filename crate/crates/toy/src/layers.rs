//! Non-overlapping 2x2 stride-2 convolution and its transpose.

use lga_core::FeatureMap;
use rand::Rng;

use crate::error::{ToyError, ToyResult};

/// `H x W x C_in -> H/2 x W/2 x C_out`, weight layout `[o][ky][kx][i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchConv {
    pub in_channels: usize,
    pub out_channels: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// `h x w x C_in -> 2h x 2w x C_out`, weight layout `[i][ky][kx][o]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchDeconv {
    pub in_channels: usize,
    pub out_channels: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerGrad {
    pub fn zeros(weights: usize, biases: usize) -> Self {
        Self {
            weight: vec![0.0; weights],
            bias: vec![0.0; biases],
        }
    }

    pub fn accumulate(&mut self, other: &LayerGrad) {
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }
}

fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

impl PatchConv {
    pub fn random<R: Rng + ?Sized>(rng: &mut R, in_channels: usize, out_channels: usize) -> Self {
        let b = he_bound(4 * in_channels);
        Self {
            in_channels,
            out_channels,
            weight: (0..out_channels * 4 * in_channels)
                .map(|_| rng.gen_range(-b..b))
                .collect(),
            bias: vec![0.0; out_channels],
        }
    }

    pub fn forward(&self, x: &FeatureMap) -> ToyResult<FeatureMap> {
        if x.channels() != self.in_channels
            || !x.height().is_multiple_of(2)
            || !x.width().is_multiple_of(2)
        {
            return Err(ToyError::Config(format!(
                "patch conv expects even sides and {} channels, got {:?}",
                self.in_channels,
                x.dims()
            )));
        }
        let (h, w) = (x.height() / 2, x.width() / 2);
        let ci = self.in_channels;
        let mut out = FeatureMap::zeros(h, w, self.out_channels);
        for y in 0..h {
            for xx in 0..w {
                let dst = out.node_mut(y * w + xx);
                dst.copy_from_slice(&self.bias);
                for k in 0..4 {
                    let src = x.node((2 * y + k / 2) * x.width() + 2 * xx + k % 2);
                    for (o, d) in dst.iter_mut().enumerate() {
                        let ws = &self.weight[(o * 4 + k) * ci..(o * 4 + k + 1) * ci];
                        *d += ws.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
        }
        Ok(out)
    }

    /// Returns `(grad_x, grad_params)`.
    pub fn backward(&self, x: &FeatureMap, grad_out: &FeatureMap) -> (FeatureMap, LayerGrad) {
        let (h, w) = (grad_out.height(), grad_out.width());
        let ci = self.in_channels;
        let mut gx = FeatureMap::zeros(x.height(), x.width(), ci);
        let mut g = LayerGrad::zeros(self.weight.len(), self.bias.len());
        for y in 0..h {
            for xx in 0..w {
                let go = grad_out.node(y * w + xx);
                for (b, &v) in g.bias.iter_mut().zip(go) {
                    *b += v;
                }
                for k in 0..4 {
                    let n = (2 * y + k / 2) * x.width() + 2 * xx + k % 2;
                    let src = x.node(n);
                    let gsrc = gx.node_mut(n);
                    for (o, &gv) in go.iter().enumerate() {
                        if gv == 0.0 {
                            continue;
                        }
                        let base = (o * 4 + k) * ci;
                        for i in 0..ci {
                            g.weight[base + i] += gv * src[i];
                            gsrc[i] += gv * self.weight[base + i];
                        }
                    }
                }
            }
        }
        (gx, g)
    }
}

impl PatchDeconv {
    /// Input channels `[0, primary)` draw from `rng_primary`, the rest from
    /// `rng_extra`, so adding extra inputs leaves the primary rows unchanged.
    pub fn random_split<R: Rng + ?Sized, S: Rng + ?Sized>(
        rng_primary: &mut R,
        rng_extra: &mut S,
        primary: usize,
        extra: usize,
        out_channels: usize,
    ) -> Self {
        let in_channels = primary + extra;
        let b = he_bound(in_channels);
        let row = 4 * out_channels;
        let mut weight = Vec::with_capacity(in_channels * row);
        for _ in 0..primary * row {
            weight.push(rng_primary.gen_range(-b..b));
        }
        for _ in 0..extra * row {
            weight.push(rng_extra.gen_range(-b..b));
        }
        Self {
            in_channels,
            out_channels,
            weight,
            bias: vec![0.0; out_channels],
        }
    }

    pub fn forward(&self, x: &FeatureMap) -> ToyResult<FeatureMap> {
        if x.channels() != self.in_channels {
            return Err(ToyError::Config(format!(
                "patch deconv expects {} channels, got {}",
                self.in_channels,
                x.channels()
            )));
        }
        let (h, w) = (x.height(), x.width());
        let co = self.out_channels;
        let mut out = FeatureMap::zeros(2 * h, 2 * w, co);
        for y in 0..h {
            for xx in 0..w {
                let src = x.node(y * w + xx);
                for k in 0..4 {
                    let dst = out.node_mut((2 * y + k / 2) * 2 * w + 2 * xx + k % 2);
                    dst.copy_from_slice(&self.bias);
                    for (i, &v) in src.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        let ws = &self.weight[(i * 4 + k) * co..(i * 4 + k + 1) * co];
                        for (d, wv) in dst.iter_mut().zip(ws) {
                            *d += v * wv;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn backward(&self, x: &FeatureMap, grad_out: &FeatureMap) -> (FeatureMap, LayerGrad) {
        let (h, w) = (x.height(), x.width());
        let co = self.out_channels;
        let mut gx = FeatureMap::zeros(h, w, self.in_channels);
        let mut g = LayerGrad::zeros(self.weight.len(), self.bias.len());
        for y in 0..h {
            for xx in 0..w {
                let src = x.node(y * w + xx);
                let gsrc = gx.node_mut(y * w + xx);
                for k in 0..4 {
                    let go = grad_out.node((2 * y + k / 2) * 2 * w + 2 * xx + k % 2);
                    for (b, &v) in g.bias.iter_mut().zip(go) {
                        *b += v;
                    }
                    for i in 0..self.in_channels {
                        let base = (i * 4 + k) * co;
                        let ws = &self.weight[base..base + co];
                        let gw = &mut g.weight[base..base + co];
                        let mut acc = 0.0;
                        for o in 0..co {
                            gw[o] += src[i] * go[o];
                            acc += ws[o] * go[o];
                        }
                        gsrc[i] += acc;
                    }
                }
            }
        }
        (gx, g)
    }
}

pub fn relu(x: &FeatureMap) -> FeatureMap {
    x.map(|v| v.max(0.0))
}

/// Zero the gradient wherever the forward output was clamped.
pub fn relu_backward(out: &FeatureMap, grad: &mut FeatureMap) {
    for (g, &o) in grad.data_mut().iter_mut().zip(out.data()) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}
