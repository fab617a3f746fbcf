//! Central finite-difference checks for every analytic gradient.
//!
//! The LGA objective is `J = <R, F_cat> + <S, F_out>` for fixed random `R`,
//! `S`, which exercises both upstream paths of [`lga_backward`]. The
//! contrastive loss is checked directly against its `F_out` gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{LgaError, Result};
use crate::graph::DEFAULT_EPS;
use crate::lga::{lga_backward, lga_forward, LayerActivation, LgaConfig, LgaParams, LgaUpstream};
use crate::loss::{lga_contrastive_loss, Divergence, LossOptions, PairBatch, PatchSimilarity};
use crate::tensor::FeatureMap;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckConfig {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub lga_channels: usize,
    pub layers: usize,
    pub groups: usize,
    pub reducer: bool,
    pub hidden_activation: LayerActivation,
    pub instances: usize,
    pub step: f64,
    pub threshold: f64,
    pub pairs: usize,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            height: 3,
            width: 3,
            in_channels: 8,
            lga_channels: 4,
            layers: 2,
            groups: 2,
            reducer: true,
            hidden_activation: LayerActivation::Relu,
            instances: 20,
            step: 1e-5,
            threshold: 1e-4,
            pairs: 24,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorCheck {
    pub tensor: String,
    pub elements: usize,
    /// Worst norm-wise relative error over all instances.
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub threshold: f64,
    pub instances: usize,
    pub rows: Vec<TensorCheck>,
}

impl GradcheckReport {
    pub fn all_passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<24} {:>9} {:>14} {:>6}\n",
            "tensor", "elements", "max_rel_err", "pass"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<24} {:>9} {:>14.3e} {:>6}\n",
                r.tensor,
                r.elements,
                r.max_rel_error,
                if r.passed { "ok" } else { "FAIL" }
            ));
        }
        s
    }
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central difference of `f` with respect to every entry of `x`.
pub fn numeric_gradient(x: &mut [f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let plus = f(x);
        x[i] = orig - step;
        let minus = f(x);
        x[i] = orig;
        g[i] = (plus - minus) / (2.0 * step);
    }
    g
}

fn lga_objective(
    params: &LgaParams,
    x: &FeatureMap,
    r_cat: &FeatureMap,
    s_out: &FeatureMap,
) -> f64 {
    let out = lga_forward(x, params, false).expect("shapes fixed during gradcheck");
    out.f_cat.dot(r_cat).unwrap() + out.f_out.dot(s_out).unwrap()
}

fn tensor_names(params: &LgaParams) -> Vec<String> {
    let mut names = vec!["edge_kernels".to_string(); 9];
    if params.reducer.is_some() {
        names.push("reducer".into());
    }
    names.extend((0..params.transforms.len()).map(|i| format!("transform_{i}")));
    names
}

struct Accumulator {
    rows: Vec<TensorCheck>,
}

impl Accumulator {
    fn record(&mut self, name: &str, analytic: &[f64], numeric: &[f64]) {
        let err = relative_error(analytic, numeric);
        match self.rows.iter_mut().find(|r| r.tensor == name) {
            Some(r) => {
                r.max_rel_error = r.max_rel_error.max(err);
                r.elements = r.elements.max(analytic.len());
            }
            None => self.rows.push(TensorCheck {
                tensor: name.to_string(),
                elements: analytic.len(),
                max_rel_error: err,
                passed: false,
            }),
        }
    }
}

fn check_lga_instance(
    cfg: &GradcheckConfig,
    rng: &mut ChaCha8Rng,
    acc: &mut Accumulator,
) -> Result<()> {
    let lga_cfg = LgaConfig {
        in_channels: cfg.in_channels,
        lga_channels: cfg.lga_channels,
        layers: cfg.layers,
        groups: cfg.groups,
        reducer: cfg.reducer,
        eps: DEFAULT_EPS,
        hidden_activation: cfg.hidden_activation,
        ..LgaConfig::default()
    };
    let params = LgaParams::random(rng, lga_cfg)?;
    let (h, w) = (cfg.height, cfg.width);
    let x = FeatureMap::random(rng, h, w, cfg.in_channels, -1.0, 1.0);
    let r_cat = FeatureMap::random(rng, h, w, lga_cfg.cat_channels(), -1.0, 1.0);
    let s_out = FeatureMap::random(rng, h, w, cfg.lga_channels, -1.0, 1.0);

    let out = lga_forward(&x, &params, true)?;
    let grads = lga_backward(
        &LgaUpstream {
            f_out: Some(s_out.clone()),
            f_cat: Some(r_cat.clone()),
        },
        out.cache.as_ref(),
        &params,
    )?;

    let names = tensor_names(&params);
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|g| g.weight.clone()).collect();
    let mut numeric: Vec<Vec<f64>> = Vec::with_capacity(names.len());
    for t in 0..names.len() {
        let mut probe = params.clone();
        let mut weights = probe.tensors_mut()[t].weight().to_vec();
        let g = numeric_gradient(&mut weights, cfg.step, |wv| {
            probe.tensors_mut()[t].weight_mut().copy_from_slice(wv);
            lga_objective(&probe, &x, &r_cat, &s_out)
        });
        numeric.push(g);
    }
    // Edge kernels are checked as a single 9 x C tensor.
    let mut i = 0;
    while i < names.len() {
        let mut j = i;
        while j < names.len() && names[j] == names[i] {
            j += 1;
        }
        let a: Vec<f64> = analytic[i..j].concat();
        let n: Vec<f64> = numeric[i..j].concat();
        acc.record(&names[i], &a, &n);
        i = j;
    }

    let mut xs = x.data().to_vec();
    let gx = numeric_gradient(&mut xs, cfg.step, |v| {
        let probe = FeatureMap::new(h, w, cfg.in_channels, v.to_vec()).unwrap();
        lga_objective(&params, &probe, &r_cat, &s_out)
    });
    acc.record("f_in", grads.f_in.data(), &gx);
    Ok(())
}

fn check_loss_instance(
    cfg: &GradcheckConfig,
    divergence: Divergence,
    rng: &mut ChaCha8Rng,
    acc: &mut Accumulator,
) -> Result<()> {
    let (h, w) = (cfg.height, cfg.width);
    let f_in = FeatureMap::random(rng, h, w, cfg.in_channels, -1.0, 1.0);
    let f_out = FeatureMap::random(rng, h, w, cfg.lga_channels, -1.0, 1.0);
    let labels: Vec<u32> = (0..h * w).map(|_| rng.gen_range(0..3)).collect();
    let sim = PatchSimilarity::from_labels(h, w, labels)?;
    let pairs = PairBatch::sample(&sim, cfg.pairs, rng.gen())?;
    let opts = LossOptions {
        divergence,
        ..LossOptions::default()
    };
    let (_, grad) = lga_contrastive_loss(&f_in, &f_out, &sim, &pairs, opts)?;
    let mut v = f_out.data().to_vec();
    let numeric = numeric_gradient(&mut v, cfg.step, |vals| {
        let probe = FeatureMap::new(h, w, cfg.lga_channels, vals.to_vec()).unwrap();
        lga_contrastive_loss(&f_in, &probe, &sim, &pairs, opts)
            .map(|r| r.0)
            .unwrap_or(f64::NAN)
    });
    let name = match divergence {
        Divergence::Mse => "contrastive_f_out_mse",
        Divergence::Kl => "contrastive_f_out_kl",
    };
    acc.record(name, grad.data(), &numeric);
    Ok(())
}

/// Check every parameter tensor, the module input, and the contrastive loss
/// on `instances` random problems.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if cfg.instances == 0 || !(cfg.step > 0.0) || cfg.height * cfg.width < 2 {
        return Err(LgaError::Config(
            "gradcheck needs at least one instance, a positive step and two nodes".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut acc = Accumulator { rows: Vec::new() };
    for _ in 0..cfg.instances {
        check_lga_instance(cfg, &mut rng, &mut acc)?;
        check_loss_instance(cfg, Divergence::Mse, &mut rng, &mut acc)?;
        check_loss_instance(cfg, Divergence::Kl, &mut rng, &mut acc)?;
    }
    for r in &mut acc.rows {
        // NaN never passes.
        r.passed = r.max_rel_error < cfg.threshold;
    }
    Ok(GradcheckReport {
        threshold: cfg.threshold,
        instances: cfg.instances,
        rows: acc.rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((relative_error(&[1.0, 0.0], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
        assert!(relative_error(&[3.0, 4.0], &[3.0, 4.0]) == 0.0);
    }

    #[test]
    fn numeric_gradient_of_quadratic() {
        let mut x = vec![1.0, -2.0];
        let g = numeric_gradient(&mut x, 1e-5, |v| v[0] * v[0] + 3.0 * v[1]);
        assert!((g[0] - 2.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
        assert_eq!(x, vec![1.0, -2.0]);
    }

    #[test]
    fn zero_threshold_always_fails() {
        let cfg = GradcheckConfig {
            instances: 1,
            threshold: 0.0,
            ..GradcheckConfig::default()
        };
        let report = run_gradcheck(&cfg).unwrap();
        assert!(!report.all_passed());
    }
}
