use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. One moment pair per parameter slot; slots are
/// addressed by the order in which [`Adam::step`] receives them.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Update every `(param, grad)` slot in place.
    pub fn step(&mut self, lr: f64, slots: &mut [(&mut [f64], &[f64])]) {
        self.t += 1;
        if self.m.is_empty() {
            self.m = slots.iter().map(|(p, _)| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        assert_eq!(
            self.m.len(),
            slots.len(),
            "parameter slots changed between steps"
        );
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for ((param, grad), (m, v)) in slots
            .iter_mut()
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..param.len() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                param[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // For f(x) = (x - 3)^2 at x = 0 the gradient is -6; after bias
        // correction m = g and v = g^2, so the step is lr * g / (|g| + eps).
        let mut x = [0.0];
        let g = [2.0 * (x[0] - 3.0)];
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(0.1, &mut [(&mut x[..], &g[..])]);
        let expect = 0.1 * 6.0 / (6.0 + 1e-8);
        assert!((x[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn second_step_closed_form() {
        let cfg = AdamConfig::default();
        let mut x = [1.0];
        let mut opt = Adam::new(cfg);
        let g1 = 2.0 * x[0];
        opt.step(0.01, &mut [(&mut x[..], &[g1][..])]);
        let g2 = 2.0 * x[0];
        let x_before = x[0];
        opt.step(0.01, &mut [(&mut x[..], &[g2][..])]);
        let m = 0.9 * 0.1 * g1 + 0.1 * g2;
        let v = 0.999 * 0.001 * g1 * g1 + 0.001 * g2 * g2;
        let mh = m / (1.0 - 0.81);
        let vh = v / (1.0 - 0.999f64.powi(2));
        assert!((x[0] - (x_before - 0.01 * mh / (vh.sqrt() + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut x = [0.5, -0.25];
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(0.0, &mut [(&mut x[..], &[1.0, -1.0][..])]);
        assert_eq!(x, [0.5, -0.25]);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut x = [5.0];
        let mut opt = Adam::new(AdamConfig::default());
        for _ in 0..2000 {
            let g = [2.0 * (x[0] - 1.0)];
            opt.step(0.05, &mut [(&mut x[..], &g[..])]);
        }
        assert!((x[0] - 1.0).abs() < 1e-3);
    }
}
