//! Adam with per-tensor step counters, so tensors that sit out a step (an
//! unrouted expert) keep their moments and bias correction untouched.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamTree;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 2e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: Vec<u64>,
}

impl Adam {
    pub fn new<P: ParamTree>(params: &P, config: AdamConfig) -> Self {
        let sizes: Vec<usize> = params.named_tensors().iter().map(|(_, t)| t.numel()).collect();
        Adam {
            config,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            steps: vec![0; sizes.len()],
        }
    }

    /// Per-tensor update counts, in parameter order.
    pub fn steps(&self) -> &[u64] {
        &self.steps
    }

    /// Updates every tensor whose name passes `active`.
    pub fn step<P: ParamTree>(&mut self, params: &mut P, grads: &P, active: impl Fn(&str) -> bool) {
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let named: Vec<(String, Vec<f64>)> =
            grads.named_tensors().into_iter().map(|(n, t)| (n, t.data().to_vec())).collect();
        for (i, (p, (name, g))) in params.tensors_mut().into_iter().zip(named).enumerate() {
            if !active(&name) {
                continue;
            }
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;
    use crate::rng::SeededRng;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = Linear::init(2, 2, &mut SeededRng::new(0));
        let before = p.clone();
        let mut g = p.zeros_like();
        g.weight.data_mut().copy_from_slice(&[1.0, -2.0, 0.5, 3.0]);
        let mut opt = Adam::new(&p, AdamConfig { lr: 0.1, ..Default::default() });
        opt.step(&mut p, &g, |_| true);
        for ((a, b), gv) in p.weight.data().iter().zip(before.weight.data()).zip(g.weight.data()) {
            assert!((a - (b - 0.1 * gv.signum())).abs() < 1e-6);
        }
        assert_eq!(p.bias, before.bias);
    }

    #[test]
    fn zero_lr_and_inactive_are_exact() {
        let mut p = Linear::init(3, 2, &mut SeededRng::new(1));
        let before = p.clone();
        let mut g = p.clone();
        g.bias.data_mut().fill(0.5);
        let mut opt = Adam::new(&p, AdamConfig { lr: 0.0, ..Default::default() });
        opt.step(&mut p, &g, |_| true);
        assert_eq!(p, before);
        let mut opt = Adam::new(&p, AdamConfig::default());
        opt.step(&mut p, &g, |n| n == "bias");
        assert_eq!(p.weight, before.weight);
        assert_ne!(p.bias, before.bias);
        assert_eq!(opt.steps(), &[0, 1]);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = Linear::zeros(1, 1);
        let mut opt = Adam::new(&p, AdamConfig { lr: 0.05, ..Default::default() });
        for _ in 0..2000 {
            let mut g = p.zeros_like();
            g.weight.data_mut()[0] = 2.0 * (p.weight.data()[0] - 3.0);
            g.bias.data_mut()[0] = 2.0 * (p.bias.data()[0] + 1.0);
            opt.step(&mut p, &g, |_| true);
        }
        assert!((p.weight.data()[0] - 3.0).abs() < 1e-3);
        assert!((p.bias.data()[0] + 1.0).abs() < 1e-3);
    }
}
