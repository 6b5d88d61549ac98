//! Adam optimizer with Keras update semantics.

use ndarray::ArrayD;

use super::graph::{Gradients, Graph, ParamId};

/// Adam hyperparameters. Defaults mirror the common framework values,
/// including the 1e-7 epsilon placed outside the square root.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
        }
    }
}

/// Adam state: first and second moment estimates per parameter tensor,
/// allocated lazily on the first step that touches a parameter.
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    moments: Vec<Option<(ArrayD<f32>, ArrayD<f32>)>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, n_params: usize) -> Self {
        Adam {
            cfg,
            step: 0,
            moments: (0..n_params).map(|_| None).collect(),
        }
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update with an explicit learning rate (so schedules can
    /// decay it per epoch). Parameters without a gradient are untouched
    /// and their moments are not advanced, matching sparse-update
    /// behavior when the backbone is frozen.
    pub fn step(&mut self, graph: &mut Graph, grads: &Gradients, lr: f32) {
        self.step += 1;
        let t = self.step as f64;
        let bias1 = 1.0 - (self.cfg.beta1 as f64).powf(t);
        let bias2 = 1.0 - (self.cfg.beta2 as f64).powf(t);
        let alpha = (lr as f64 * bias2.sqrt() / bias1) as f32;
        let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
        for (pid, grad) in grads.params.iter().enumerate() {
            let Some(g) = grad else { continue };
            let slot = &mut self.moments[pid];
            if slot.is_none() {
                *slot = Some((ArrayD::zeros(g.raw_dim()), ArrayD::zeros(g.raw_dim())));
            }
            let (m, v) = slot.as_mut().unwrap();
            let p = &mut graph.param_mut(pid as ParamId).value;
            let ms = m.as_slice_mut().unwrap();
            let vs = v.as_slice_mut().unwrap();
            let gs = g.as_slice().unwrap();
            let ps = p.as_slice_mut().unwrap();
            for i in 0..gs.len() {
                ms[i] += (gs[i] - ms[i]) * (1.0 - b1);
                vs[i] += (gs[i] * gs[i] - vs[i]) * (1.0 - b2);
                ps[i] -= alpha * ms[i] / (vs[i].sqrt() + eps);
            }
        }
    }
}
