//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::nn::ParamSet;
use crate::tensor::{Element, Graph, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiply the learning rate by `decay_factor` every this many steps.
    pub decay_every: Option<usize>,
    pub decay_factor: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_every: None,
            decay_factor: 0.5,
        }
    }
}

impl AdamConfig {
    /// Learning rate in effect for the 1-based step `t`.
    pub fn lr_at(&self, t: u64) -> f64 {
        match self.decay_every {
            Some(every) if every > 0 => self.lr * self.decay_factor.powi(((t - 1) / every as u64) as i32),
            _ => self.lr,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    /// First and second moments in parameter visit order; created lazily.
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

/// Gradients of every tensor of `params` in visit order; `None` for tensors
/// that were frozen or never bound in `graph`.
pub fn collect_grads<T: Element, P: ParamSet<T>>(graph: &Graph<T>, params: &P) -> Vec<Option<Tensor<T>>> {
    let mut out = Vec::new();
    params.visit("", &mut |_, t| out.push(graph.param_grad(t)));
    out
}

impl<T: Element> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update; `grads` follows the visit order of `params`. Tensors with
    /// no gradient keep their value and moments.
    pub fn update<P: ParamSet<T>>(&mut self, params: &mut P, grads: &[Option<Tensor<T>>]) {
        if self.m.is_empty() {
            params.visit("", &mut |_, t| {
                self.m.push(Tensor::zeros(t.shape().to_vec()));
                self.v.push(Tensor::zeros(t.shape().to_vec()));
            });
        }
        assert_eq!(grads.len(), self.m.len(), "gradient list does not match parameters");
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let lr = T::of(c.lr_at(self.step));
        let (b1, b2, eps) = (T::of(c.beta1), T::of(c.beta2), T::of(c.eps));
        let bc1 = T::of(1.0 - c.beta1.powi(t));
        let bc2 = T::of(1.0 - c.beta2.powi(t));
        let one = T::one();
        let mut i = 0;
        params.visit_mut("", &mut |_, p| {
            if let Some(g) = &grads[i] {
                let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
                for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
            i += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LinearParams;

    fn params() -> LinearParams<f64> {
        LinearParams {
            weight: Tensor::from_vec(vec![1, 2], vec![0.5, -1.5]).unwrap(),
            bias: Tensor::from_vec(vec![1], vec![2.0]).unwrap(),
        }
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = params();
        let before = p.clone();
        let mut adam = AdamState::new(AdamConfig::default());
        let grads = vec![Some(Tensor::zeros(vec![1, 2])), Some(Tensor::zeros(vec![1]))];
        for _ in 0..5 {
            adam.update(&mut p, &grads);
        }
        assert_eq!(p, before);
        adam.update(&mut p, &[None, None]);
        assert_eq!(p, before);
    }

    #[test]
    fn matches_scalar_reference() {
        let cfg = AdamConfig::default();
        let mut p = params();
        let mut adam = AdamState::new(cfg);
        let gseq = [[0.3, -0.2, 1.0], [0.1, 0.4, -0.5], [0.3, 0.3, 0.3]];
        // scalar reference
        let mut w = [0.5, -1.5, 2.0];
        let (mut m, mut v) = ([0.0; 3], [0.0; 3]);
        for (step, g) in gseq.iter().enumerate() {
            let t = step as i32 + 1;
            for j in 0..3 {
                m[j] = 0.9 * m[j] + 0.1 * g[j];
                v[j] = 0.999 * v[j] + 0.001 * g[j] * g[j];
                let mh = m[j] / (1.0 - 0.9f64.powi(t));
                let vh = v[j] / (1.0 - 0.999f64.powi(t));
                w[j] -= 1e-3 * mh / (vh.sqrt() + 1e-8);
            }
            let grads = vec![
                Some(Tensor::from_vec(vec![1, 2], vec![g[0], g[1]]).unwrap()),
                Some(Tensor::from_vec(vec![1], vec![g[2]]).unwrap()),
            ];
            adam.update(&mut p, &grads);
        }
        let got = [p.weight.data()[0], p.weight.data()[1], p.bias.data()[0]];
        for j in 0..3 {
            assert!((got[j] - w[j]).abs() < 1e-9);
        }
        // first step moves each coordinate by about lr against the gradient sign
        let mut q = params();
        let mut a = AdamState::new(cfg);
        a.update(&mut q, &[Some(Tensor::full(vec![1, 2], 2.0)), Some(Tensor::full(vec![1], -3.0))]);
        assert!((q.weight.data()[0] - (0.5 - 1e-3)).abs() < 1e-9);
        assert!((q.bias.data()[0] - (2.0 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut p = LinearParams::<f64> {
            weight: Tensor::from_vec(vec![1, 1], vec![1.0]).unwrap(),
            bias: Tensor::zeros(vec![1]),
        };
        let mut adam = AdamState::new(AdamConfig {
            lr: 1e-2,
            ..AdamConfig::default()
        });
        for _ in 0..2000 {
            let w = p.weight.data()[0];
            adam.update(&mut p, &[Some(Tensor::full(vec![1, 1], 2.0 * w)), None]);
        }
        assert!(p.weight.data()[0].abs() < 1e-3, "{}", p.weight.data()[0]);
    }

    #[test]
    fn step_decay() {
        let cfg = AdamConfig {
            decay_every: Some(10),
            decay_factor: 0.1,
            ..AdamConfig::default()
        };
        assert_eq!(cfg.lr_at(1), 1e-3);
        assert_eq!(cfg.lr_at(10), 1e-3);
        assert!((cfg.lr_at(11) - 1e-4f64).abs() < 1e-18);
        assert_eq!(AdamConfig::default().lr_at(1_000_000), 1e-3);
    }
}
